//! The `PXDS` image container.
//!
//! ```text
//! "PXDS" | u32 version = 1 | u32 N | u16 C | u16 H | u16 W | u8 has_labels
//!        | u16 class_count | u16 labels[N] (if has_labels) | u8 pixels[N·C·H·W]
//! ```
//!
//! All integers are little-endian. Free-text provenance is kept next to the
//! file in `<path>.meta` so the binary layout stays fixed.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"PXDS";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 21;

/// One image, `C×H×W` bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != channels * height * width || data.is_empty() {
            return Err(Error::Invalid(format!(
                "image of {channels}×{height}×{width} needs {} bytes, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetContainer {
    len: usize,
    channels: usize,
    height: usize,
    width: usize,
    pixels: Vec<u8>,
    labels: Option<Vec<u16>>,
    class_count: u16,
    pub provenance: String,
}

impl DatasetContainer {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        pixels: Vec<u8>,
        labels: Option<Vec<u16>>,
        class_count: u16,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        for (what, v) in [("channels", channels), ("height", height), ("width", width)] {
            if v == 0 || v > usize::from(u16::MAX) {
                return Err(Error::Invalid(format!("{what} must be in 1..=65535, got {v}")));
            }
        }
        let per = channels * height * width;
        if pixels.is_empty() || pixels.len() % per != 0 {
            return Err(Error::Invalid(format!(
                "{} pixel bytes is not a positive multiple of {per}",
                pixels.len()
            )));
        }
        let len = pixels.len() / per;
        if u32::try_from(len).is_err() {
            return Err(Error::Invalid("too many images".into()));
        }
        if let Some(l) = &labels {
            if l.len() != len {
                return Err(Error::Invalid(format!("{} labels for {len} images", l.len())));
            }
            if let Some(bad) = l.iter().find(|&&y| y >= class_count) {
                return Err(Error::Invalid(format!("label {bad} ≥ class_count {class_count}")));
            }
        }
        Ok(DatasetContainer {
            len,
            channels,
            height,
            width,
            pixels,
            labels,
            class_count,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn image_bytes(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn labels(&self) -> Option<&[u16]> {
        self.labels.as_deref()
    }

    pub fn class_count(&self) -> u16 {
        self.class_count
    }

    pub fn pixel_slice(&self, i: usize) -> &[u8] {
        let n = self.image_bytes();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn image(&self, i: usize) -> Image {
        Image {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.pixel_slice(i).to_vec(),
        }
    }

    /// Keeps the images at `indices`, in that order.
    pub fn select(&self, indices: &[usize], provenance: impl Into<String>) -> Result<Self> {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_bytes());
        for &i in indices {
            pixels.extend_from_slice(self.pixel_slice(i));
        }
        let labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        Self::new(
            self.channels,
            self.height,
            self.width,
            pixels,
            labels,
            self.class_count,
            provenance,
        )
    }

    /// Per-channel mean and standard deviation of pixel values scaled to
    /// `[0, 1]`.
    pub fn channel_stats(&self) -> NormStats {
        let hw = self.height * self.width;
        let mut sum = vec![0.0f64; self.channels];
        let mut sq = vec![0.0f64; self.channels];
        for img in self.pixels.chunks(self.image_bytes()) {
            for (c, plane) in img.chunks(hw).enumerate() {
                for &p in plane {
                    let v = f64::from(p) / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let n = (self.len * hw) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(MIN_STD))
            .collect();
        NormStats { mean, std }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 2 * self.len + self.pixels.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len as u32).to_le_bytes());
        for d in [self.channels, self.height, self.width] {
            out.extend_from_slice(&(d as u16).to_le_bytes());
        }
        out.push(u8::from(self.labels.is_some()));
        out.extend_from_slice(&self.class_count.to_le_bytes());
        if let Some(labels) = &self.labels {
            for l in labels {
                out.extend_from_slice(&l.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let need = |what: &str, at: usize, n: usize| -> Result<()> {
            if buf.len() < at + n {
                Err(Error::Truncated {
                    what: what.to_string(),
                    needed: at + n - buf.len(),
                })
            } else {
                Ok(())
            }
        };
        need("header", 0, HEADER_LEN)?;
        let magic: [u8; 4] = buf[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic {
                expected: MAGIC,
                found: magic,
            });
        }
        let u16_at = |i: usize| usize::from(u16::from_le_bytes([buf[i], buf[i + 1]]));
        let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::BadVersion {
                expected: VERSION,
                found: version,
            });
        }
        let n = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        let (c, h, w) = (u16_at(12), u16_at(14), u16_at(16));
        let has_labels = match buf[18] {
            0 => false,
            1 => true,
            v => return Err(Error::Format(format!("has_labels flag must be 0 or 1, got {v}"))),
        };
        let class_count = u16_at(19) as u16;
        let mut at = HEADER_LEN;
        let labels = if has_labels {
            need("labels", at, 2 * n)?;
            let l = (0..n).map(|i| u16_at(at + 2 * i) as u16).collect();
            at += 2 * n;
            Some(l)
        } else {
            None
        };
        let pixel_len = n * c * h * w;
        need("pixels", at, pixel_len)?;
        if buf.len() != at + pixel_len {
            return Err(Error::Format(format!(
                "{} trailing bytes after pixel data",
                buf.len() - at - pixel_len
            )));
        }
        Self::new(c, h, w, buf[at..].to_vec(), labels, class_count, String::new())
            .map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes())?;
        let meta = serde_json::json!({ "provenance": self.provenance });
        fs::write(meta_path(path), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    /// Reads a container; provenance comes from the sidecar when present.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut ds = Self::from_bytes(&fs::read(path)?)?;
        if let Ok(text) = fs::read(meta_path(path)) {
            let meta: serde_json::Value = serde_json::from_slice(&text)?;
            if let Some(p) = meta.get("provenance").and_then(|p| p.as_str()) {
                ds.provenance = p.to_string();
            }
        }
        Ok(ds)
    }
}

/// Floor applied to per-channel standard deviations so constant channels
/// do not divide by zero.
pub const MIN_STD: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(labels: bool) -> DatasetContainer {
        let pixels: Vec<u8> = (0..128).map(|i| (i * 7 % 256) as u8).collect();
        DatasetContainer::new(1, 8, 8, pixels, labels.then(|| vec![1, 0]), 2, "test").unwrap()
    }

    #[test]
    fn file_size_is_header_plus_labels_plus_pixels() {
        let ds = sample(true);
        assert_eq!(ds.to_bytes().len(), 21 + 2 * 2 + 128);
        assert_eq!(sample(false).to_bytes().len(), 21 + 128);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for labels in [true, false] {
            let ds = sample(labels);
            let p = dir.path().join(format!("d{labels}.pxds"));
            ds.save(&p).unwrap();
            let back = DatasetContainer::load(&p).unwrap();
            assert_eq!(back, ds);
            assert_eq!(fs::read(&p).unwrap(), ds.to_bytes());
        }
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = sample(true).to_bytes();
        match DatasetContainer::from_bytes(&bytes[..bytes.len() - 5]) {
            Err(Error::Truncated { what, needed }) => {
                assert_eq!(what, "pixels");
                assert_eq!(needed, 5);
            }
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[1] = b'Y';
        assert!(matches!(DatasetContainer::from_bytes(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes;
        bad[4] = 2;
        assert!(matches!(DatasetContainer::from_bytes(&bad), Err(Error::BadVersion { .. })));
    }

    #[test]
    fn labels_must_be_below_class_count() {
        assert!(DatasetContainer::new(1, 2, 2, vec![0; 4], Some(vec![3]), 3, "").is_err());
    }

    #[test]
    fn stats_of_constant_image() {
        let ds = DatasetContainer::new(2, 2, 2, vec![51; 8], None, 0, "").unwrap();
        let s = ds.channel_stats();
        assert!((s.mean[0] - 0.2).abs() < 1e-12);
        assert_eq!(s.std, vec![MIN_STD; 2]);
    }
}
