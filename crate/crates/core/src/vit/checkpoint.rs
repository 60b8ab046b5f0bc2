//! `PRTC` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PRTC" | u32 version = 1 | u32 tensor count
//! per tensor: u16 name length | UTF-8 name | u8 ndim | u32 dims[ndim] | f32 data[Π dims]
//! ```
//!
//! The encoder config travels as the entry `__config__`: a 1-D tensor whose
//! values are the bytes of its JSON text. Optimizer state, when present,
//! uses the reserved `__opt__.` prefix.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::ViTConfig;
use crate::error::{Error, Result};
use crate::optim::OptState;
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"PRTC";
pub const VERSION: u32 = 1;
pub const CONFIG_ENTRY: &str = "__config__";
const OPT_STEP: &str = "__opt__.step";
const OPT_M: &str = "__opt__.m.";
const OPT_V: &str = "__opt__.v.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ViTConfig,
    pub params: ParamSet<f32>,
    pub opt_state: Option<OptState<f32>>,
}

fn bytes_tensor(bytes: &[u8]) -> Result<Tensor<f32>> {
    Tensor::new(vec![bytes.len()], bytes.iter().map(|&b| f32::from(b)).collect())
}

fn tensor_bytes(t: &Tensor<f32>, what: &str) -> Result<Vec<u8>> {
    t.data()
        .iter()
        .map(|&v| {
            if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                Ok(v as u8)
            } else {
                Err(Error::Format(format!("{what}: value {v} is not a byte")))
            }
        })
        .collect()
}

/// A u64 as four exact 16-bit limbs, low first.
fn step_tensor(step: u64) -> Tensor<f32> {
    let limbs = (0..4).map(|i| ((step >> (16 * i)) & 0xffff) as f32).collect();
    Tensor::from_parts(vec![4], limbs)
}

fn step_from(t: &Tensor<f32>) -> Result<u64> {
    if t.numel() != 4 {
        return Err(Error::Format(format!("{OPT_STEP} must have 4 limbs")));
    }
    Ok(t.data()
        .iter()
        .enumerate()
        .map(|(i, &v)| (v as u64) << (16 * i))
        .sum())
}

fn write_entry<W: Write>(w: &mut W, name: &str, t: &Tensor<f32>) -> Result<()> {
    let name_len = u16::try_from(name.len())
        .map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
    w.write_all(&name_len.to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    let ndim = u8::try_from(t.ndim()).map_err(|_| Error::Format(format!("{name}: too many dims")))?;
    w.write_all(&[ndim])?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("{name}: dim too large")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_checkpoint<W: Write>(w: &mut W, ckpt: &Checkpoint) -> Result<()> {
    let mut entries: Vec<(String, Tensor<f32>)> = Vec::new();
    let config = serde_json::to_vec(&ckpt.config)?;
    entries.push((CONFIG_ENTRY.to_string(), bytes_tensor(&config)?));
    for (name, t) in ckpt.params.iter() {
        if name.starts_with("__") {
            return Err(Error::Format(format!("parameter name `{name}` is reserved")));
        }
        entries.push((name.to_string(), t.clone()));
    }
    if let Some(opt) = &ckpt.opt_state {
        entries.push((OPT_STEP.to_string(), step_tensor(opt.step)));
        for (name, t) in opt.m.iter() {
            entries.push((format!("{OPT_M}{name}"), t.clone()));
        }
        for (name, t) in opt.v.iter() {
            entries.push((format!("{OPT_V}{name}"), t.clone()));
        }
    }
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in &entries {
        write_entry(w, name, t)?;
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let available = self.buf.len() - self.pos;
        if available < n {
            return Err(Error::Truncated {
                what: what.to_string(),
                needed: n - available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    let magic: [u8; 4] = c.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::BadVersion {
            expected: VERSION,
            found: version,
        });
    }
    let count = c.u32("tensor count")?;
    let mut config = None;
    let mut params = ParamSet::new();
    let mut step = None;
    let (mut m, mut v) = (ParamSet::new(), ParamSet::new());
    for i in 0..count {
        let what = format!("tensor {i}");
        let len = c.u16(&what)? as usize;
        let name = std::str::from_utf8(c.take(len, &what)?)
            .map_err(|_| Error::Format(format!("{what}: name is not UTF-8")))?
            .to_string();
        let ndim = c.u8(&name)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u32(&name)? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = c.take(numel * 4, &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        if name == CONFIG_ENTRY {
            let text = tensor_bytes(&t, CONFIG_ENTRY)?;
            config = Some(serde_json::from_slice::<ViTConfig>(&text)?);
        } else if name == OPT_STEP {
            step = Some(step_from(&t)?);
        } else if let Some(p) = name.strip_prefix(OPT_M) {
            m.insert(p, t);
        } else if let Some(p) = name.strip_prefix(OPT_V) {
            v.insert(p, t);
        } else {
            params.insert(name, t);
        }
    }
    if c.pos != buf.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last tensor",
            buf.len() - c.pos
        )));
    }
    let config = config.ok_or_else(|| Error::Format(format!("missing `{CONFIG_ENTRY}` entry")))?;
    let opt_state = match step {
        Some(step) => Some(OptState { m, v, step }),
        None if m.is_empty() && v.is_empty() => None,
        None => return Err(Error::Format("optimizer moments without a step".into())),
    };
    Ok(Checkpoint {
        config,
        params,
        opt_state,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, ckpt)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::init_params;

    fn sample() -> Checkpoint {
        let config = ViTConfig::new(8, 4, 1, 16, 2, 2);
        let params = init_params::<f32>(&config, 3).unwrap();
        Checkpoint {
            config,
            params,
            opt_state: None,
        }
    }

    #[test]
    fn byte_layout_of_header() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &sample()).unwrap();
        assert_eq!(&buf[0..4], b"PRTC");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        let count = u32::from_le_bytes(buf[8..12].try_into().unwrap());
        assert_eq!(count as usize, sample().params.len() + 1);
        let name_len = u16::from_le_bytes(buf[12..14].try_into().unwrap()) as usize;
        assert_eq!(&buf[14..14 + name_len], CONFIG_ENTRY.as_bytes());
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut ck = sample();
        let mut m = ParamSet::new();
        m.insert("cls_token", Tensor::full(&[16], 0.5f32));
        let mut v = ParamSet::new();
        v.insert("cls_token", Tensor::full(&[16], 0.25f32));
        ck.opt_state = Some(OptState {
            m,
            v,
            step: (1 << 40) + 12345,
        });
        let mut a = Vec::new();
        write_checkpoint(&mut a, &ck).unwrap();
        let back = read_checkpoint(&mut a.as_slice()).unwrap();
        assert_eq!(back, ck);
        let mut b = Vec::new();
        write_checkpoint(&mut b, &back).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncation_and_magic_errors() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &sample()).unwrap();
        let cut = &buf[..buf.len() - 6];
        match read_checkpoint(&mut &cut[..]) {
            Err(Error::Truncated { needed, .. }) => assert_eq!(needed, 6),
            other => panic!("expected truncation, got {other:?}"),
        }
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&mut bad.as_slice()), Err(Error::BadMagic { .. })));
        let mut bad = buf;
        bad[4] = 9;
        assert!(matches!(read_checkpoint(&mut bad.as_slice()), Err(Error::BadVersion { .. })));
    }
}
