//! Central finite-difference gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Op, OpKind, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

const STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so gradients that are zero up
/// to rounding are compared absolutely.
const REL_FLOOR: f64 = 1e-3;

/// Central-difference gradient of a scalar function of several tensors.
pub fn numeric_grad(
    f: &dyn Fn(&[Tensor<f64>]) -> Result<f64>,
    inputs: &[Tensor<f64>],
    h: f64,
) -> Result<Vec<Tensor<f64>>> {
    let mut point = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].numel()];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = point[i].data()[j];
            point[i].data_mut()[j] = orig + h;
            let up = f(&point)?;
            point[i].data_mut()[j] = orig - h;
            let down = f(&point)?;
            point[i].data_mut()[j] = orig;
            *gj = (up - down) / (2.0 * h);
        }
        grads.push(Tensor::new(inputs[i].shape().to_vec(), g)?);
    }
    Ok(grads)
}

fn max_rel_err(analytic: &[Tensor<f64>], numeric: &[Tensor<f64>]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

/// Compares the tape gradient of `build` against central differences.
/// `build` receives one variable per input and must return a scalar.
pub fn grad_check_fn<F>(build: F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| tape.leaf(format!("in{i}"), t.clone(), true))
        .collect();
    let loss = build(&mut tape, &vars)?;
    let analytic = tape.grad_of(loss, &vars)?;

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };
    let numeric = numeric_grad(&eval, inputs, STEP)?;
    Ok(max_rel_err(&analytic, &numeric))
}

/// Attributes and inputs for checking `kind` at a random point.
fn sample_case(kind: OpKind, shapes: &[Vec<usize>], rng: &mut ChaCha8Rng) -> (Op, Vec<Tensor<f64>>) {
    let rand = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::<f64>::uniform(shape, -1.0, 1.0, rng);
    let first = shapes[0].clone();
    let last = *first.last().unwrap();
    match kind {
        OpKind::Matmul | OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let op = match kind {
                OpKind::Matmul => Op::Matmul,
                OpKind::Add => Op::Add,
                OpKind::Sub => Op::Sub,
                _ => Op::Mul,
            };
            let second = shapes.get(1).cloned().unwrap_or_else(|| first.clone());
            (op, vec![rand(&first, rng), rand(&second, rng)])
        }
        OpKind::Scale => (Op::Scale(rng.random_range(-2.0..2.0)), vec![rand(&first, rng)]),
        OpKind::Gelu => (Op::Gelu, vec![Tensor::uniform(&first, -3.0, 3.0, rng)]),
        OpKind::LayerNorm => {
            let gamma = Tensor::uniform(&[last], 0.5, 1.5, rng);
            let beta = rand(&[last], rng);
            (
                Op::LayerNorm { eps: 1e-6 },
                vec![Tensor::uniform(&first, -2.0, 2.0, rng), gamma, beta],
            )
        }
        OpKind::Softmax => (Op::Softmax, vec![Tensor::uniform(&first, -2.0, 2.0, rng)]),
        OpKind::LogSoftmax => (Op::LogSoftmax, vec![Tensor::uniform(&first, -2.0, 2.0, rng)]),
        OpKind::Sum | OpKind::Mean => {
            let axes = vec![first.len() - 1];
            let op = if kind == OpKind::Sum {
                Op::Sum { axes }
            } else {
                Op::Mean { axes }
            };
            (op, vec![rand(&first, rng)])
        }
        OpKind::Reshape => {
            let n = first.iter().product();
            (Op::Reshape { shape: vec![n] }, vec![rand(&first, rng)])
        }
        OpKind::Transpose => {
            let perm = (0..first.len()).rev().collect();
            (Op::Transpose { perm }, vec![rand(&first, rng)])
        }
        OpKind::Concat => (
            Op::Concat { axis: 0 },
            shapes.iter().map(|s| rand(s, rng)).collect(),
        ),
        OpKind::Slice => {
            let len = first[0];
            let start = usize::from(len > 1);
            (
                Op::Slice {
                    axis: 0,
                    start,
                    end: len,
                },
                vec![rand(&first, rng)],
            )
        }
        OpKind::GatherRows => {
            // Repeated indices exercise gradient accumulation.
            let len = first[0];
            let indices = (0..len + 2).map(|_| rng.random_range(0..len)).collect();
            (Op::GatherRows { axis: 0, indices }, vec![rand(&first, rng)])
        }
        OpKind::Mse => (Op::Mse, vec![rand(&first, rng), rand(&first, rng)]),
        OpKind::CrossEntropy => {
            let rows = first.iter().product::<usize>() / last;
            let targets = (0..rows).map(|_| rng.random_range(0..last)).collect();
            (
                Op::CrossEntropy { targets },
                vec![Tensor::uniform(&first, -2.0, 2.0, rng)],
            )
        }
        OpKind::KlDiv => {
            let logits = Tensor::uniform(&first, -2.0, 2.0, rng);
            let target = crate::autodiff::ops::softmax_rows(&Tensor::uniform(&first, -1.0, 1.0, rng));
            (Op::KlDiv, vec![logits, target])
        }
    }
}

/// True when an input sits within 1e-3 of a point where the op is not
/// smooth, or badly conditioned, so the finite difference is unreliable.
fn near_nonsmooth(kind: OpKind, inputs: &[Tensor<f64>]) -> bool {
    match kind {
        // log p is singular at p = 0.
        OpKind::KlDiv => inputs[1].data().iter().any(|&p| p < 1e-3),
        // Normalization is singular for constant rows.
        OpKind::LayerNorm => {
            let d = *inputs[0].shape().last().unwrap();
            inputs[0].data().chunks(d).any(|row| {
                let mean = row.iter().sum::<f64>() / d as f64;
                row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d as f64) < 1e-3
            })
        }
        _ => false,
    }
}

/// Maximum relative error between the analytic and finite-difference
/// gradients of a random scalar projection of `kind`'s output.
pub fn grad_check(kind: OpKind, shapes: &[Vec<usize>], seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (op, inputs) = loop {
        let case = sample_case(kind, shapes, &mut rng);
        if !near_nonsmooth(kind, &case.1) {
            break case;
        }
    };
    // Shape of the op output decides the projection.
    let probe = {
        let mut tape = Tape::<f64>::no_grad();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = tape.apply(op.clone(), &vars)?;
        tape.value(y).shape().to_vec()
    };
    let projection = Tensor::<f64>::uniform(&probe, -1.0, 1.0, &mut rng);
    grad_check_fn(
        |tape, vars| {
            let y = tape.apply(op.clone(), vars)?;
            let r = tape.constant(projection.clone());
            let yr = tape.mul(y, r)?;
            tape.sum_all(yr)
        },
        &inputs,
    )
}

/// Input shapes used to exercise each op kind.
pub fn default_shapes(kind: OpKind) -> Vec<Vec<usize>> {
    match kind {
        OpKind::Matmul => vec![vec![2, 3, 4], vec![4, 5]],
        OpKind::Add | OpKind::Sub | OpKind::Mul => vec![vec![3, 4], vec![4]],
        OpKind::Concat => vec![vec![2, 3], vec![1, 3], vec![3, 3]],
        OpKind::Transpose => vec![vec![2, 3, 4]],
        OpKind::CrossEntropy | OpKind::KlDiv => vec![vec![4, 5]],
        _ => vec![vec![3, 5]],
    }
}
