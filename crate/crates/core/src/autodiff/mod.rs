//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order of the graph. `backward` walks it once in reverse.

mod gradcheck;
mod ops;

use std::collections::HashMap;

pub use gradcheck::{default_shapes, grad_check, grad_check_fn, numeric_grad};
pub use ops::{gelu, gelu_deriv};
pub(crate) use ops::softmax_rows;

use crate::error::{Error, Result};
use crate::params::{GradMap, ParamSet};
use crate::tensor::{Element, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// An operation together with its attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// `[.., m, k] · [k, n]` or batched `[.., m, k] · [.., k, n]`.
    Matmul,
    /// Elementwise with trailing-axis broadcast of the shorter operand.
    Add,
    Sub,
    Mul,
    Scale(f64),
    Gelu,
    /// Inputs: x, scale, shift. Normalizes the last axis.
    LayerNorm { eps: f64 },
    Softmax,
    LogSoftmax,
    Sum { axes: Vec<usize> },
    Mean { axes: Vec<usize> },
    Reshape { shape: Vec<usize> },
    Transpose { perm: Vec<usize> },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    GatherRows { axis: usize, indices: Vec<usize> },
    /// Mean of squared differences over all elements.
    Mse,
    /// Mean over rows of the negative log-likelihood of hard targets.
    CrossEntropy { targets: Vec<usize> },
    /// Inputs: student logits, target distribution. Mean over rows of
    /// `Σ p·(log p − log_softmax(z))`.
    KlDiv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Matmul,
    Add,
    Sub,
    Mul,
    Scale,
    Gelu,
    LayerNorm,
    Softmax,
    LogSoftmax,
    Sum,
    Mean,
    Reshape,
    Transpose,
    Concat,
    Slice,
    GatherRows,
    Mse,
    CrossEntropy,
    KlDiv,
}

impl OpKind {
    pub const ALL: [OpKind; 19] = [
        OpKind::Matmul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Gelu,
        OpKind::LayerNorm,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Reshape,
        OpKind::Transpose,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::GatherRows,
        OpKind::Mse,
        OpKind::CrossEntropy,
        OpKind::KlDiv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Matmul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Gelu => "gelu",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Reshape => "reshape",
            OpKind::Transpose => "transpose",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::GatherRows => "gather_rows",
            OpKind::Mse => "mse",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::KlDiv => "kl_div",
        }
    }
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Matmul => OpKind::Matmul,
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Mul => OpKind::Mul,
            Op::Scale(_) => OpKind::Scale,
            Op::Gelu => OpKind::Gelu,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Softmax => OpKind::Softmax,
            Op::LogSoftmax => OpKind::LogSoftmax,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::Mse => OpKind::Mse,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::KlDiv => OpKind::KlDiv,
        }
    }

    /// Expected input count; concat accepts any non-zero count.
    fn arity(&self, given: usize) -> usize {
        match self {
            Op::Concat { .. } => given.max(1),
            Op::Matmul | Op::Add | Op::Sub | Op::Mul | Op::Mse | Op::KlDiv => 2,
            Op::LayerNorm { .. } => 3,
            _ => 1,
        }
    }
}

struct Node<T> {
    op: Option<Op>,
    inputs: Vec<Var>,
    value: Tensor<T>,
    saved: Vec<Tensor<T>>,
    requires_grad: bool,
}

/// Parameter name → tape variable, as produced by [`Tape::register`].
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: HashMap<String, Var>,
}

impl Bindings {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bindings {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
    grad_enabled: bool,
    check_finite: bool,
    deterministic: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
            grad_enabled: true,
            check_finite: false,
            deterministic: true,
        }
    }

    /// A tape on which nothing requires gradients.
    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Turn non-finite op outputs into errors.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    /// When off, batched kernels may use the rayon pool.
    pub fn with_determinism(mut self, on: bool) -> Self {
        self.deterministic = on;
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(None, Vec::new(), value, Vec::new(), false)
    }

    /// A named leaf. Leaves with `requires_grad` receive an entry in the
    /// [`GradMap`] returned by `backward`.
    pub fn leaf(&mut self, name: impl Into<String>, value: Tensor<T>, requires_grad: bool) -> Var {
        let rg = requires_grad && self.grad_enabled;
        let v = self.push(None, Vec::new(), value, Vec::new(), rg);
        if rg {
            self.params.push((name.into(), v));
        }
        v
    }

    /// Adds every tensor of `params` as a leaf.
    pub fn register(&mut self, params: &ParamSet<T>, requires_grad: bool) -> Bindings {
        let mut b = Bindings::default();
        for (name, t) in params.iter() {
            let v = self.leaf(name, t.clone(), requires_grad);
            b.vars.insert(name.to_string(), v);
        }
        b
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(
        &mut self,
        op: Option<Op>,
        inputs: Vec<Var>,
        value: Tensor<T>,
        saved: Vec<Tensor<T>>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            saved,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let fwd = ops::forward(&op, &values, !self.deterministic)?;
        if self.check_finite && !fwd.value.is_finite() {
            return Err(Error::NonFinite {
                op: op.kind().name(),
            });
        }
        let rg = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let saved = if rg { fwd.saved } else { Vec::new() };
        Ok(self.push(Some(op), inputs.to_vec(), fwd.value, saved, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Matmul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Op::Scale(c), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Gelu, &[a])
    }

    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        self.apply(Op::LayerNorm { eps }, &[x, scale, shift])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Softmax, &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::LogSoftmax, &[a])
    }

    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.apply(Op::Sum { axes: axes.to_vec() }, &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.apply(Op::Sum { axes }, &[a])
    }

    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.apply(Op::Mean { axes: axes.to_vec() }, &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.apply(Op::Mean { axes }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Reshape { shape: shape.to_vec() }, &[a])
    }

    pub fn transpose(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        self.apply(Op::Transpose { perm: perm.to_vec() }, &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat { axis }, parts)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(Op::Slice { axis, start, end }, &[a])
    }

    pub fn gather_rows(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        self.apply(
            Op::GatherRows {
                axis,
                indices: indices.to_vec(),
            },
            &[a],
        )
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mse, &[a, b])
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.apply(
            Op::CrossEntropy {
                targets: targets.to_vec(),
            },
            &[logits],
        )
    }

    pub fn kl_div(&mut self, student_logits: Var, target_probs: Var) -> Result<Var> {
        self.apply(Op::KlDiv, &[student_logits, target_probs])
    }

    /// Gradients of a scalar `loss` with respect to every named leaf that
    /// requires gradients. Leaves the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<GradMap<T>> {
        let grads = self.backward_all(loss)?;
        let mut map = GradMap::new();
        for (name, v) in &self.params {
            let g = grads[v.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()));
            map.insert(name.clone(), g);
        }
        Ok(map)
    }

    /// Gradient of `loss` with respect to an arbitrary node, zeros if the
    /// node does not participate.
    pub fn grad_of(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor<T>>> {
        let grads = self.backward_all(loss)?;
        Ok(wrt
            .iter()
            .map(|v| {
                grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()))
            })
            .collect())
    }

    fn backward_all(&self, loss: Var) -> Result<Vec<Option<Tensor<T>>>> {
        let root = &self.nodes[loss.0].value;
        if root.numel() != 1 {
            return Err(Error::NonScalarLoss(root.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(root.shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = &node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor<T>> =
                node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let input_grads = ops::backward(
                op,
                &inputs,
                &node.value,
                &node.saved,
                &g,
                &needs,
                !self.deterministic,
            );
            for ((v, need), ig) in node.inputs.iter().zip(&needs).zip(input_grads) {
                let (true, Some(ig)) = (*need, ig) else { continue };
                if self.check_finite && !ig.is_finite() {
                    return Err(Error::NonFinite {
                        op: op.kind().name(),
                    });
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(ig.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 4], &[1.0, 2.0, 3.0, 10.0, -4.0, 0.5, 0.25, 8.0]));
        let g = tape.constant(Tensor::ones(&[4]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, g, b, 0.0).unwrap();
        for row in tape.value(y).data().chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mse_of_self_has_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf("x", t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]), true);
        let l = tape.mse(x, x).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get("x").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sum_of_scaled_input_has_gradient_two() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf("x", t(&[3], &[1.0, 2.0, 3.0]), true);
        let y = tape.scale(x, 2.0).unwrap();
        let l = tape.sum_all(y).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get("x").unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf("x", t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf("x", t(&[2], &[1.0, 2.0]), true);
        let _unused = tape.leaf("unused", t(&[3], &[1.0, 2.0, 3.0]), true);
        let l = tape.sum_all(x).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get("unused").unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn no_grad_tape_records_no_params() {
        let mut tape = Tape::<f64>::no_grad();
        let x = tape.leaf("x", t(&[2], &[1.0, 2.0]), true);
        let l = tape.sum_all(x).unwrap();
        assert!(tape.backward(l).unwrap().is_empty());
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn finite_checks_flag_overflow() {
        let mut tape = Tape::<f32>::new().with_finite_checks(true);
        let x = tape.constant(Tensor::full(&[2], 1e30f32));
        let y = tape.mul(x, x);
        assert!(matches!(y, Err(Error::NonFinite { op: "mul" })));
    }

    #[test]
    fn shared_input_accumulates() {
        // d/dx sum(x*x) = 2x
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf("x", t(&[2], &[1.5, -3.0]), true);
        let y = tape.mul(x, x).unwrap();
        let l = tape.sum_all(y).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get("x").unwrap().data(), &[3.0, -6.0]);
    }
}
