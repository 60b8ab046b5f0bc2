use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// LayerNorm followed by a linear map.
    #[default]
    LnLinear,
    LinearGelu,
    GeluLinear,
}

/// Maps student-width tokens to teacher width. Parameters live in a shared
/// [`ParamSet`] under `prefix`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    pub kind: HeadKind,
    pub in_dim: usize,
    pub out_dim: usize,
    pub prefix: String,
    pub eps: f64,
}

impl ProjectionHead {
    pub fn new(kind: HeadKind, in_dim: usize, out_dim: usize, prefix: impl Into<String>) -> Self {
        ProjectionHead {
            kind,
            in_dim,
            out_dim,
            prefix: prefix.into(),
            eps: 1e-6,
        }
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}{leaf}", self.prefix)
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut v = Vec::new();
        if self.kind == HeadKind::LnLinear {
            v.push((self.name("norm.weight"), vec![self.in_dim]));
            v.push((self.name("norm.bias"), vec![self.in_dim]));
        }
        v.push((self.name("linear.weight"), vec![self.in_dim, self.out_dim]));
        v.push((self.name("linear.bias"), vec![self.out_dim]));
        v
    }

    pub fn init<T: Element, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet<T> {
        let mut p = ParamSet::new();
        for (name, shape) in self.param_shapes() {
            let t = if name.ends_with("norm.weight") {
                Tensor::ones(&shape)
            } else if name.ends_with("bias") {
                Tensor::zeros(&shape)
            } else {
                Tensor::trunc_normal(&shape, 0.02, 2.0, rng)
            };
            p.insert(name, t);
        }
        p
    }

    /// Unit norm gain, zero shifts and a weight with ones on its leading
    /// diagonal: widths are padded with zeros or truncated.
    pub fn identity<T: Element>(&self) -> ParamSet<T> {
        let mut p = ParamSet::new();
        for (name, shape) in self.param_shapes() {
            let t = if name.ends_with("norm.weight") {
                Tensor::ones(&shape)
            } else if name.ends_with("linear.weight") {
                let mut w = Tensor::zeros(&shape);
                for i in 0..self.in_dim.min(self.out_dim) {
                    w.data_mut()[i * self.out_dim + i] = T::one();
                }
                w
            } else {
                Tensor::zeros(&shape)
            };
            p.insert(name, t);
        }
        p
    }

    pub fn project<T: Element>(&self, tape: &mut Tape<T>, bind: &Bindings, x: Var) -> Result<Var> {
        let width = *tape.shape(x).last().unwrap_or(&0);
        if width != self.in_dim {
            return Err(Error::shape(
                "project",
                &[tape.shape(x), &[self.in_dim]],
                "trailing width must equal the student dim",
            ));
        }
        let w = bind.get(&self.name("linear.weight"))?;
        let b = bind.get(&self.name("linear.bias"))?;
        let linear = |tape: &mut Tape<T>, h: Var| -> Result<Var> {
            let y = tape.matmul(h, w)?;
            tape.add(y, b)
        };
        match self.kind {
            HeadKind::LnLinear => {
                let g = bind.get(&self.name("norm.weight"))?;
                let s = bind.get(&self.name("norm.bias"))?;
                let h = tape.layer_norm(x, g, s, self.eps)?;
                linear(tape, h)
            }
            HeadKind::LinearGelu => {
                let h = linear(tape, x)?;
                tape.gelu(h)
            }
            HeadKind::GeluLinear => {
                let h = tape.gelu(x)?;
                linear(tape, h)
            }
        }
    }
}
