//! Pre-norm Vision Transformer encoder.
//!
//! The same encoder serves as frozen teacher and trainable student. Token
//! sequence layout is `[cls, patch_0, …, patch_{N-1}]` with learnable 1-D
//! positional embeddings. When a mask is supplied, masked patch embeddings
//! are swapped for the learnable mask token before positional embeddings
//! are added.

mod checkpoint;
mod inherit;
mod patch;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CONFIG_ENTRY,
};
pub use inherit::{select_channels, select_layers, weight_inherit, InheritReport, InheritSource};
pub use patch::{patchify, unpatchify};

use crate::autodiff::{Bindings, Tape, Var};
use crate::distill::MaskSpec;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Element, Tensor};

pub const INIT_STD: f64 = 0.02;
pub const INIT_TRUNCATION: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    /// Number of final blocks whose cls tokens are concatenated for probing.
    #[serde(default = "default_layers_for_probe")]
    pub layers_for_probe: usize,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

fn default_mlp_ratio() -> f64 {
    4.0
}

fn default_layers_for_probe() -> usize {
    4
}

fn default_ln_eps() -> f64 {
    1e-6
}

impl ViTConfig {
    pub fn new(
        image_size: usize,
        patch_size: usize,
        channels: usize,
        dim: usize,
        depth: usize,
        heads: usize,
    ) -> Self {
        ViTConfig {
            image_size,
            patch_size,
            channels,
            dim,
            depth,
            heads,
            mlp_ratio: default_mlp_ratio(),
            layers_for_probe: default_layers_for_probe().min(depth),
            ln_eps: default_ln_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("dim", self.dim),
            ("depth", self.depth),
            ("heads", self.heads),
            ("layers_for_probe", self.layers_for_probe),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::config(
                "patch_size",
                format!("{} does not divide image_size {}", self.patch_size, self.image_size),
            ));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::config(
                "heads",
                format!("{} does not divide dim {}", self.heads, self.dim),
            ));
        }
        if self.layers_for_probe > self.depth {
            return Err(Error::config("layers_for_probe", "exceeds depth"));
        }
        if !(self.mlp_ratio > 0.0) || !(self.ln_eps > 0.0) {
            return Err(Error::config("mlp_ratio/ln_eps", "must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Parameter names and shapes, in checkpoint order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, h) = (self.dim, self.mlp_hidden());
        let mut v = vec![
            ("patch_embed.weight".to_string(), vec![self.patch_dim(), d]),
            ("patch_embed.bias".to_string(), vec![d]),
            ("cls_token".to_string(), vec![d]),
            ("mask_token".to_string(), vec![d]),
            ("pos_embed".to_string(), vec![self.num_patches() + 1, d]),
        ];
        for i in 0..self.depth {
            let p = format!("blocks.{i}.");
            v.extend([
                (format!("{p}norm1.weight"), vec![d]),
                (format!("{p}norm1.bias"), vec![d]),
                (format!("{p}attn.qkv.weight"), vec![d, 3 * d]),
                (format!("{p}attn.qkv.bias"), vec![3 * d]),
                (format!("{p}attn.proj.weight"), vec![d, d]),
                (format!("{p}attn.proj.bias"), vec![d]),
                (format!("{p}norm2.weight"), vec![d]),
                (format!("{p}norm2.bias"), vec![d]),
                (format!("{p}mlp.fc1.weight"), vec![d, h]),
                (format!("{p}mlp.fc1.bias"), vec![h]),
                (format!("{p}mlp.fc2.weight"), vec![h, d]),
                (format!("{p}mlp.fc2.bias"), vec![d]),
            ]);
        }
        v.push(("norm.weight".to_string(), vec![d]));
        v.push(("norm.bias".to_string(), vec![d]));
        v
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// How a freshly initialised tensor is filled.
pub(crate) fn init_tensor<T: Element>(name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    let is_norm = name.contains("norm");
    if leaf == "bias" {
        Tensor::zeros(shape)
    } else if is_norm && leaf == "weight" {
        Tensor::ones(shape)
    } else {
        Tensor::trunc_normal(shape, INIT_STD, INIT_TRUNCATION, rng)
    }
}

/// Truncated-normal weights and tokens, zero biases, unit LayerNorm gains.
pub fn init_params<T: Element>(config: &ViTConfig, seed: u64) -> Result<ParamSet<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for (name, shape) in config.param_shapes() {
        let t = init_tensor(&name, &shape, &mut rng);
        params.insert(name, t);
    }
    Ok(params)
}

/// Checks that `params` has exactly the tensors `config` implies.
pub fn check_params<T: Element>(params: &ParamSet<T>, config: &ViTConfig) -> Result<()> {
    let shapes = config.param_shapes();
    for (name, shape) in &shapes {
        let t = params.get(name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::shape(
                "vit params",
                &[t.shape(), shape],
                format!("`{name}` does not match the config"),
            ));
        }
    }
    if params.len() != shapes.len() {
        return Err(Error::Format(format!(
            "expected {} parameter tensors, found {}",
            shapes.len(),
            params.len()
        )));
    }
    Ok(())
}

/// Graph handles for one encoder pass.
#[derive(Clone, Copy, Debug)]
pub struct ViTOutput {
    /// `B×dim` final cls token.
    pub cls: Var,
    /// `B×N×dim` final patch tokens.
    pub patches: Var,
    /// `B×layers_for_probe×dim` normalised cls tokens of the last blocks.
    pub layer_cls: Var,
    /// `B×(N+1)×dim` token sequence entering the first block.
    pub embedded: Var,
}

/// Concrete encoder outputs, detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Features<T> {
    pub cls: Tensor<T>,
    pub patches: Tensor<T>,
    pub layer_cls: Tensor<T>,
}

struct Scope<'a> {
    bind: &'a Bindings,
    prefix: &'a str,
}

impl Scope<'_> {
    fn get(&self, name: &str) -> Result<Var> {
        self.bind.get(&format!("{}{}", self.prefix, name))
    }
}

fn linear<T: Element>(tape: &mut Tape<T>, s: &Scope, name: &str, x: Var) -> Result<Var> {
    let w = s.get(&format!("{name}.weight"))?;
    let b = s.get(&format!("{name}.bias"))?;
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

fn norm<T: Element>(tape: &mut Tape<T>, s: &Scope, name: &str, x: Var, eps: f64) -> Result<Var> {
    let g = s.get(&format!("{name}.weight"))?;
    let b = s.get(&format!("{name}.bias"))?;
    tape.layer_norm(x, g, b, eps)
}

fn attention<T: Element>(
    tape: &mut Tape<T>,
    s: &Scope,
    prefix: &str,
    x: Var,
    cfg: &ViTConfig,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (b, seq, d) = (shape[0], shape[1], shape[2]);
    let (h, dh) = (cfg.heads, cfg.head_dim());
    let qkv = linear(tape, s, &format!("{prefix}attn.qkv"), x)?;
    let qkv = tape.reshape(qkv, &[b, seq, 3, h, dh])?;
    let qkv = tape.transpose(qkv, &[2, 0, 3, 1, 4])?;
    let part = |i: usize, tape: &mut Tape<T>| -> Result<Var> {
        let p = tape.slice(qkv, 0, i, i + 1)?;
        tape.reshape(p, &[b, h, seq, dh])
    };
    let q = part(0, tape)?;
    let k = part(1, tape)?;
    let v = part(2, tape)?;
    let kt = tape.transpose(k, &[0, 1, 3, 2])?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let attn = tape.softmax(scores)?;
    let o = tape.matmul(attn, v)?;
    let o = tape.transpose(o, &[0, 2, 1, 3])?;
    let o = tape.reshape(o, &[b, seq, d])?;
    linear(tape, s, &format!("{prefix}attn.proj"), o)
}

fn block<T: Element>(tape: &mut Tape<T>, s: &Scope, i: usize, x: Var, cfg: &ViTConfig) -> Result<Var> {
    let p = format!("blocks.{i}.");
    let h = norm(tape, s, &format!("{p}norm1"), x, cfg.ln_eps)?;
    let a = attention(tape, s, &p, h, cfg)?;
    let x = tape.add(x, a)?;
    let h = norm(tape, s, &format!("{p}norm2"), x, cfg.ln_eps)?;
    let h = linear(tape, s, &format!("{p}mlp.fc1"), h)?;
    let h = tape.gelu(h)?;
    let h = linear(tape, s, &format!("{p}mlp.fc2"), h)?;
    tape.add(x, h)
}

/// Runs the encoder on `images` (`B×C×H×W`) using parameters bound on the
/// tape under `prefix`.
pub fn forward<T: Element>(
    tape: &mut Tape<T>,
    bind: &Bindings,
    prefix: &str,
    cfg: &ViTConfig,
    images: &Tensor<T>,
    mask: Option<&MaskSpec>,
) -> Result<ViTOutput> {
    let s = Scope { bind, prefix };
    let is = images.shape();
    if is.len() != 4 || is[1] != cfg.channels || is[2] != cfg.image_size || is[3] != cfg.image_size {
        return Err(Error::shape(
            "vit_forward",
            &[is],
            format!(
                "expected B×{}×{}×{}",
                cfg.channels, cfg.image_size, cfg.image_size
            ),
        ));
    }
    let (b, n, d) = (is[0], cfg.num_patches(), cfg.dim);

    let patches = tape.constant(patchify(images, cfg.patch_size)?);
    let mut emb = linear(tape, &s, "patch_embed", patches)?;

    if let Some(mask) = mask {
        if mask.batch() != b || mask.num_patches() != n {
            return Err(Error::shape(
                "vit_forward",
                &[&[mask.batch(), mask.num_patches()], &[b, n]],
                "mask does not match batch × num_patches",
            ));
        }
        // Row B·N of the stacked table is the mask token.
        let flat = tape.reshape(emb, &[b * n, d])?;
        let tok = s.get("mask_token")?;
        let tok = tape.reshape(tok, &[1, d])?;
        let table = tape.concat(&[flat, tok], 0)?;
        let rows: Vec<usize> = mask
            .flags()
            .iter()
            .enumerate()
            .map(|(i, &m)| if m { b * n } else { i })
            .collect();
        let picked = tape.gather_rows(table, 0, &rows)?;
        emb = tape.reshape(picked, &[b, n, d])?;
    }

    let cls = s.get("cls_token")?;
    let cls = tape.reshape(cls, &[1, d])?;
    let cls = tape.gather_rows(cls, 0, &vec![0; b])?;
    let cls = tape.reshape(cls, &[b, 1, d])?;
    let seq = tape.concat(&[cls, emb], 1)?;
    let pos = s.get("pos_embed")?;
    let embedded = tape.add(seq, pos)?;

    let mut x = embedded;
    let mut layer_cls = Vec::with_capacity(cfg.layers_for_probe);
    let first_probe = cfg.depth - cfg.layers_for_probe;
    let mut final_tokens = None;
    for i in 0..cfg.depth {
        x = block(tape, &s, i, x, cfg)?;
        if i >= first_probe {
            let normed = norm(tape, &s, "norm", x, cfg.ln_eps)?;
            let c = tape.slice(normed, 1, 0, 1)?;
            layer_cls.push(c);
            if i + 1 == cfg.depth {
                final_tokens = Some(normed);
            }
        }
    }
    let out = match final_tokens {
        Some(t) => t,
        None => norm(tape, &s, "norm", x, cfg.ln_eps)?,
    };
    let cls = tape.slice(out, 1, 0, 1)?;
    let cls = tape.reshape(cls, &[b, d])?;
    let patches = tape.slice(out, 1, 1, n + 1)?;
    let layer_cls = tape.concat(&layer_cls, 1)?;
    Ok(ViTOutput {
        cls,
        patches,
        layer_cls,
        embedded,
    })
}

/// Gradient-free encoder pass.
pub fn encode<T: Element>(
    params: &ParamSet<T>,
    cfg: &ViTConfig,
    images: &Tensor<T>,
    mask: Option<&MaskSpec>,
) -> Result<Features<T>> {
    let mut tape = Tape::no_grad();
    let bind = tape.register(params, false);
    let out = forward(&mut tape, &bind, "", cfg, images, mask)?;
    Ok(Features {
        cls: tape.value(out.cls).clone(),
        patches: tape.value(out.patches).clone(),
        layer_cls: tape.value(out.layer_cls).clone(),
    })
}
