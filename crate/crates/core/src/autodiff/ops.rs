//! Forward and backward kernels for every op kind.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{strides, Element, Tensor};

use super::Op;

pub(super) struct Forward<T> {
    pub value: Tensor<T>,
    pub saved: Vec<Tensor<T>>,
}

fn out<T>(value: Tensor<T>) -> Forward<T> {
    Forward {
        value,
        saved: Vec::new(),
    }
}

fn expect_arity(op: &'static str, inputs: usize, want: usize) -> Result<()> {
    if inputs != want {
        return Err(Error::Invalid(format!(
            "{op} takes {want} inputs, got {inputs}"
        )));
    }
    Ok(())
}

pub(super) fn forward<T: Element>(
    op: &Op,
    inputs: &[&Tensor<T>],
    parallel: bool,
) -> Result<Forward<T>> {
    let name = op.kind().name();
    expect_arity(name, inputs.len(), op.arity(inputs.len()))?;
    match op {
        Op::Matmul => matmul_forward(inputs[0], inputs[1], parallel).map(out),
        Op::Add => broadcast_binary(name, inputs[0], inputs[1], |a, b| a + b).map(out),
        Op::Sub => broadcast_binary(name, inputs[0], inputs[1], |a, b| a - b).map(out),
        Op::Mul => broadcast_binary(name, inputs[0], inputs[1], |a, b| a * b).map(out),
        Op::Scale(c) => {
            let c = T::of(*c);
            Ok(out(inputs[0].map(|v| v * c)))
        }
        Op::Gelu => Ok(out(inputs[0].map(gelu))),
        Op::LayerNorm { eps } => layer_norm_forward(inputs[0], inputs[1], inputs[2], *eps),
        Op::Softmax => Ok(out(softmax_rows(inputs[0]))),
        Op::LogSoftmax => Ok(out(log_softmax_rows(inputs[0]))),
        Op::Sum { axes } => reduce_forward(name, inputs[0], axes, false).map(out),
        Op::Mean { axes } => reduce_forward(name, inputs[0], axes, true).map(out),
        Op::Reshape { shape } => inputs[0].reshape(shape).map(out),
        Op::Transpose { perm } => {
            let (shape, src) = transpose_map(inputs[0].shape(), perm)?;
            let x = inputs[0].data();
            let data = src.iter().map(|&i| x[i]).collect();
            Ok(out(Tensor::from_parts(shape, data)))
        }
        Op::Concat { axis } => concat_forward(inputs, *axis).map(out),
        Op::Slice { axis, start, end } => {
            let (shape, src) = slice_map(inputs[0].shape(), *axis, *start, *end)?;
            let x = inputs[0].data();
            Ok(out(Tensor::from_parts(
                shape,
                src.iter().map(|&i| x[i]).collect(),
            )))
        }
        Op::GatherRows { axis, indices } => {
            let (shape, src) = gather_map(inputs[0].shape(), *axis, indices)?;
            let x = inputs[0].data();
            Ok(out(Tensor::from_parts(
                shape,
                src.iter().map(|&i| x[i]).collect(),
            )))
        }
        Op::Mse => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(Error::shape(name, &[a.shape(), b.shape()], "operands differ"));
            }
            let n = T::of(a.numel() as f64);
            let s: T = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum();
            Ok(out(Tensor::scalar(s / n)))
        }
        Op::CrossEntropy { targets } => cross_entropy_forward(inputs[0], targets),
        Op::KlDiv => kl_div_forward(inputs[0], inputs[1]),
    }
}

/// Gradients for each input; `None` where the input does not need one.
pub(super) fn backward<T: Element>(
    op: &Op,
    inputs: &[&Tensor<T>],
    value: &Tensor<T>,
    saved: &[Tensor<T>],
    grad: &Tensor<T>,
    needs: &[bool],
    parallel: bool,
) -> Vec<Option<Tensor<T>>> {
    match op {
        Op::Matmul => matmul_backward(inputs[0], inputs[1], grad, needs, parallel),
        Op::Add => {
            let (ga, gb) = broadcast_grads(inputs[0], inputs[1], grad, needs, |g, _, _| g, |g, _, _| g);
            vec![ga, gb]
        }
        Op::Sub => {
            let (ga, gb) =
                broadcast_grads(inputs[0], inputs[1], grad, needs, |g, _, _| g, |g, _, _| -g);
            vec![ga, gb]
        }
        Op::Mul => {
            let (ga, gb) = broadcast_grads(
                inputs[0],
                inputs[1],
                grad,
                needs,
                |g, _, b| g * b,
                |g, a, _| g * a,
            );
            vec![ga, gb]
        }
        Op::Scale(c) => {
            let c = T::of(*c);
            vec![Some(grad.map(|g| g * c))]
        }
        Op::Gelu => {
            let x = inputs[0];
            let data = x
                .data()
                .iter()
                .zip(grad.data())
                .map(|(&x, &g)| g * gelu_deriv(x))
                .collect();
            vec![Some(Tensor::from_parts(x.shape().to_vec(), data))]
        }
        Op::LayerNorm { .. } => layer_norm_backward(inputs[1], saved, grad, needs),
        Op::Softmax => {
            let d = *value.shape().last().unwrap();
            let mut dx = vec![T::zero(); value.numel()];
            for ((y, g), o) in value
                .data()
                .chunks(d)
                .zip(grad.data().chunks(d))
                .zip(dx.chunks_mut(d))
            {
                let dot: T = y.iter().zip(g).map(|(&y, &g)| y * g).sum();
                for i in 0..d {
                    o[i] = y[i] * (g[i] - dot);
                }
            }
            vec![Some(Tensor::from_parts(value.shape().to_vec(), dx))]
        }
        Op::LogSoftmax => {
            let d = *value.shape().last().unwrap();
            let mut dx = vec![T::zero(); value.numel()];
            for ((y, g), o) in value
                .data()
                .chunks(d)
                .zip(grad.data().chunks(d))
                .zip(dx.chunks_mut(d))
            {
                let gs: T = g.iter().copied().sum();
                for i in 0..d {
                    o[i] = g[i] - y[i].exp() * gs;
                }
            }
            vec![Some(Tensor::from_parts(value.shape().to_vec(), dx))]
        }
        Op::Sum { axes } | Op::Mean { axes } => {
            let x = inputs[0];
            let (_, map) = reduce_map(x.shape(), axes);
            let scale = if matches!(op, Op::Mean { .. }) {
                T::one() / T::of((x.numel() / value.numel()) as f64)
            } else {
                T::one()
            };
            let g = grad.data();
            let data = map.iter().map(|&o| g[o] * scale).collect();
            vec![Some(Tensor::from_parts(x.shape().to_vec(), data))]
        }
        Op::Reshape { .. } => vec![Some(Tensor::from_parts(
            inputs[0].shape().to_vec(),
            grad.data().to_vec(),
        ))],
        Op::Transpose { perm } => {
            let (_, src) = transpose_map(inputs[0].shape(), perm).expect("validated in forward");
            vec![Some(scatter(inputs[0].shape(), &src, grad.data()))]
        }
        Op::Concat { axis } => {
            let mut offset = 0;
            inputs
                .iter()
                .zip(needs)
                .map(|(x, &need)| {
                    let len = x.shape()[*axis];
                    let start = offset;
                    offset += len;
                    need.then(|| {
                        let (shape, src) = slice_map(grad.shape(), *axis, start, start + len)
                            .expect("validated in forward");
                        let g = grad.data();
                        Tensor::from_parts(shape, src.iter().map(|&i| g[i]).collect())
                    })
                })
                .collect()
        }
        Op::Slice { axis, start, end } => {
            let (_, src) =
                slice_map(inputs[0].shape(), *axis, *start, *end).expect("validated in forward");
            vec![Some(scatter(inputs[0].shape(), &src, grad.data()))]
        }
        Op::GatherRows { axis, indices } => {
            let (_, src) =
                gather_map(inputs[0].shape(), *axis, indices).expect("validated in forward");
            vec![Some(scatter(inputs[0].shape(), &src, grad.data()))]
        }
        Op::Mse => {
            let (a, b) = (inputs[0], inputs[1]);
            let k = grad.item() * T::of(2.0 / a.numel() as f64);
            let da: Vec<T> = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| (x - y) * k)
                .collect();
            let db = needs[1].then(|| Tensor::from_parts(b.shape().to_vec(), da.iter().map(|&v| -v).collect()));
            vec![Some(Tensor::from_parts(a.shape().to_vec(), da)), db]
        }
        Op::CrossEntropy { targets } => {
            let probs = &saved[0];
            let k = *probs.shape().last().unwrap();
            let scale = grad.item() / T::of(targets.len() as f64);
            let mut d = probs.data().to_vec();
            for (row, &t) in d.chunks_mut(k).zip(targets) {
                row[t] = row[t] - T::one();
                for v in row.iter_mut() {
                    *v = *v * scale;
                }
            }
            vec![Some(Tensor::from_parts(probs.shape().to_vec(), d))]
        }
        Op::KlDiv => {
            let (logits, target) = (inputs[0], inputs[1]);
            let log_q = &saved[0];
            let k = *logits.shape().last().unwrap();
            let rows = logits.numel() / k;
            let scale = grad.item() / T::of(rows as f64);
            let mut dz = vec![T::zero(); logits.numel()];
            let mut dp = vec![T::zero(); logits.numel()];
            for r in 0..rows {
                let p = &target.data()[r * k..(r + 1) * k];
                let lq = &log_q.data()[r * k..(r + 1) * k];
                let mass: T = p.iter().copied().sum();
                for j in 0..k {
                    dz[r * k + j] = (lq[j].exp() * mass - p[j]) * scale;
                    dp[r * k + j] = if p[j] > T::zero() {
                        (p[j].ln() + T::one() - lq[j]) * scale
                    } else {
                        T::zero()
                    };
                }
            }
            vec![
                Some(Tensor::from_parts(logits.shape().to_vec(), dz)),
                needs[1].then(|| Tensor::from_parts(target.shape().to_vec(), dp)),
            ]
        }
    }
}

// ---------------------------------------------------------------- matmul

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize, bool, Vec<usize>)> {
    let err = |why: &str| Error::shape("matmul", &[a, b], why);
    if a.len() < 2 || b.len() < 2 {
        return Err(err("operands must be at least 2-D"));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != kb {
        return Err(err("inner dimensions differ"));
    }
    let batch_dims = &a[..a.len() - 2];
    let b_batched = b.len() > 2;
    if b_batched && &b[..b.len() - 2] != batch_dims {
        return Err(err("batch dimensions differ"));
    }
    let batch = batch_dims.iter().product();
    let mut shape = batch_dims.to_vec();
    shape.extend([m, n]);
    Ok((batch, m, k, n, b_batched, shape))
}

fn gemm_acc<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + aip * bv;
            }
        }
    }
}

/// c (m×k) += g (m×n) · bᵀ where b is (k×n).
fn gemm_nt_acc<T: Element>(g: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let dot: T = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
            c[i * k + p] = c[i * k + p] + dot;
        }
    }
}

/// c (k×n) += aᵀ · g where a is (m×k), g is (m×n).
fn gemm_tn_acc<T: Element>(a: &[T], g: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv = *cv + aip * gv;
            }
        }
    }
}

fn matmul_forward<T: Element>(a: &Tensor<T>, b: &Tensor<T>, parallel: bool) -> Result<Tensor<T>> {
    let (batch, m, k, n, b_batched, shape) = matmul_dims(a.shape(), b.shape())?;
    let mut c = vec![T::zero(); batch * m * n];
    let (ad, bd) = (a.data(), b.data());
    let work = |(bi, cc): (usize, &mut [T])| {
        let bs = if b_batched { &bd[bi * k * n..(bi + 1) * k * n] } else { bd };
        gemm_acc(&ad[bi * m * k..(bi + 1) * m * k], bs, cc, m, k, n);
    };
    // Each output block is computed by exactly one worker in a fixed order,
    // so threaded and sequential results agree bit for bit.
    if parallel && batch > 1 {
        c.par_chunks_mut(m * n).enumerate().for_each(work);
    } else {
        c.chunks_mut(m * n).enumerate().for_each(work);
    }
    Ok(Tensor::from_parts(shape, c))
}

fn matmul_backward<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    needs: &[bool],
    parallel: bool,
) -> Vec<Option<Tensor<T>>> {
    let (batch, m, k, n, b_batched, _) =
        matmul_dims(a.shape(), b.shape()).expect("validated in forward");
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    let da = needs[0].then(|| {
        let mut da = vec![T::zero(); a.numel()];
        let work = |(bi, c): (usize, &mut [T])| {
            let bs = if b_batched { &bd[bi * k * n..(bi + 1) * k * n] } else { bd };
            gemm_nt_acc(&gd[bi * m * n..(bi + 1) * m * n], bs, c, m, k, n);
        };
        if parallel && batch > 1 {
            da.par_chunks_mut(m * k).enumerate().for_each(work);
        } else {
            da.chunks_mut(m * k).enumerate().for_each(work);
        }
        Tensor::from_parts(a.shape().to_vec(), da)
    });
    let db = needs[1].then(|| {
        let mut db = vec![T::zero(); b.numel()];
        if b_batched {
            let work = |(bi, c): (usize, &mut [T])| {
                gemm_tn_acc(
                    &ad[bi * m * k..(bi + 1) * m * k],
                    &gd[bi * m * n..(bi + 1) * m * n],
                    c,
                    m,
                    k,
                    n,
                );
            };
            if parallel && batch > 1 {
                db.par_chunks_mut(k * n).enumerate().for_each(work);
            } else {
                db.chunks_mut(k * n).enumerate().for_each(work);
            }
        } else {
            // Shared right operand: accumulate batches in index order.
            gemm_tn_acc(ad, gd, &mut db, batch * m, k, n);
        }
        Tensor::from_parts(b.shape().to_vec(), db)
    });
    vec![da, db]
}

// ------------------------------------------------------------- broadcast

/// Output shape and the length of the repeated operand's block, or an error
/// when neither operand is a trailing suffix of the other.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        return Ok(a.to_vec());
    }
    if a.len() < b.len() && b[b.len() - a.len()..] == *a {
        return Ok(b.to_vec());
    }
    Err(Error::shape(op, &[a, b], "trailing axes are not broadcast-compatible"))
}

fn broadcast_binary<T: Element>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let shape = broadcast_shape(op, a.shape(), b.shape())?;
    let n: usize = shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let (na, nb) = (ad.len(), bd.len());
    let data = (0..n).map(|i| f(ad[i % na], bd[i % nb])).collect();
    Ok(Tensor::from_parts(shape, data))
}

fn broadcast_grads<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    needs: &[bool],
    fa: impl Fn(T, T, T) -> T,
    fb: impl Fn(T, T, T) -> T,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    let (na, nb) = (ad.len(), bd.len());
    let ga = needs[0].then(|| {
        let mut d = vec![T::zero(); na];
        for (i, &gv) in gd.iter().enumerate() {
            d[i % na] = d[i % na] + fa(gv, ad[i % na], bd[i % nb]);
        }
        Tensor::from_parts(a.shape().to_vec(), d)
    });
    let gb = needs[1].then(|| {
        let mut d = vec![T::zero(); nb];
        for (i, &gv) in gd.iter().enumerate() {
            d[i % nb] = d[i % nb] + fb(gv, ad[i % na], bd[i % nb]);
        }
        Tensor::from_parts(b.shape().to_vec(), d)
    });
    (ga, gb)
}

// ----------------------------------------------------------- activations

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact erf-based GELU.
pub fn gelu<T: Element>(x: T) -> T {
    T::of(0.5) * x * (T::one() + (x * T::of(FRAC_1_SQRT_2)).erf())
}

pub fn gelu_deriv<T: Element>(x: T) -> T {
    let cdf = T::of(0.5) * (T::one() + (x * T::of(FRAC_1_SQRT_2)).erf());
    let pdf = T::of(INV_SQRT_2PI) * (-(x * x) * T::of(0.5)).exp();
    cdf + x * pdf
}

pub(crate) fn softmax_rows<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let d = *x.shape().last().unwrap();
    let mut y = x.data().to_vec();
    for row in y.chunks_mut(d) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            s = s + *v;
        }
        for v in row.iter_mut() {
            *v = *v / s;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), y)
}

pub(crate) fn log_softmax_rows<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let d = *x.shape().last().unwrap();
    let mut y = x.data().to_vec();
    for row in y.chunks_mut(d) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        for v in row.iter_mut() {
            *v = *v - lse;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), y)
}

// ------------------------------------------------------------ layer norm

fn layer_norm_forward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Forward<T>> {
    let d = *x.shape().last().unwrap();
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape(
            "layer_norm",
            &[x.shape(), gamma.shape(), beta.shape()],
            "affine parameters must match the last axis",
        ));
    }
    let rows = x.numel() / d;
    let mut y = vec![T::zero(); x.numel()];
    let mut xhat = vec![T::zero(); x.numel()];
    let mut rstd = vec![T::zero(); rows];
    let (g, b) = (gamma.data(), beta.data());
    let inv_d = T::one() / T::of(d as f64);
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + T::of(eps)).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = h * g[j] + b[j];
        }
    }
    Ok(Forward {
        value: Tensor::from_parts(x.shape().to_vec(), y),
        saved: vec![
            Tensor::from_parts(x.shape().to_vec(), xhat),
            Tensor::from_parts(vec![rows], rstd),
        ],
    })
}

fn layer_norm_backward<T: Element>(
    gamma: &Tensor<T>,
    saved: &[Tensor<T>],
    grad: &Tensor<T>,
    needs: &[bool],
) -> Vec<Option<Tensor<T>>> {
    let (xhat, rstd) = (&saved[0], &saved[1]);
    let d = gamma.numel();
    let rows = rstd.numel();
    let (g, xh, gd) = (gamma.data(), xhat.data(), grad.data());
    let mut dx = vec![T::zero(); xhat.numel()];
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    let inv_d = T::one() / T::of(d as f64);
    for r in 0..rows {
        let (xr, gr) = (&xh[r * d..(r + 1) * d], &gd[r * d..(r + 1) * d]);
        let mut mean_dh = T::zero();
        let mut mean_dh_x = T::zero();
        for j in 0..d {
            let dh = gr[j] * g[j];
            mean_dh = mean_dh + dh;
            mean_dh_x = mean_dh_x + dh * xr[j];
            dgamma[j] = dgamma[j] + gr[j] * xr[j];
            dbeta[j] = dbeta[j] + gr[j];
        }
        mean_dh = mean_dh * inv_d;
        mean_dh_x = mean_dh_x * inv_d;
        let rs = rstd.data()[r];
        for j in 0..d {
            let dh = gr[j] * g[j];
            dx[r * d + j] = rs * (dh - mean_dh - xr[j] * mean_dh_x);
        }
    }
    vec![
        needs[0].then(|| Tensor::from_parts(xhat.shape().to_vec(), dx)),
        needs[1].then(|| Tensor::from_parts(vec![d], dgamma)),
        needs[2].then(|| Tensor::from_parts(vec![d], dbeta)),
    ]
}

// ------------------------------------------------------------ reductions

/// Output shape after removing `axes`, and the output index of every input
/// element. Removing every axis yields shape `[1]`.
pub(super) fn reduce_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let keep: Vec<usize> = (0..shape.len()).filter(|d| !axes.contains(d)).collect();
    let out_shape: Vec<usize> = if keep.is_empty() {
        vec![1]
    } else {
        keep.iter().map(|&d| shape[d]).collect()
    };
    let out_strides = strides(&out_shape);
    let n: usize = shape.iter().product();
    let mut map = vec![0usize; n];
    let mut idx = vec![0usize; shape.len()];
    for slot in map.iter_mut() {
        let mut o = 0;
        if !keep.is_empty() {
            for (k, &d) in keep.iter().enumerate() {
                o += idx[d] * out_strides[k];
            }
        }
        *slot = o;
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, map)
}

fn reduce_forward<T: Element>(
    op: &'static str,
    x: &Tensor<T>,
    axes: &[usize],
    mean: bool,
) -> Result<Tensor<T>> {
    let mut seen = vec![false; x.ndim()];
    for &a in axes {
        if a >= x.ndim() || seen[a] {
            return Err(Error::shape(op, &[x.shape()], format!("bad reduction axes {axes:?}")));
        }
        seen[a] = true;
    }
    let (shape, map) = reduce_map(x.shape(), axes);
    let mut data = vec![T::zero(); shape.iter().product()];
    for (&o, &v) in map.iter().zip(x.data()) {
        data[o] = data[o] + v;
    }
    if mean {
        let c = T::one() / T::of((x.numel() / data.len()) as f64);
        data.iter_mut().for_each(|v| *v = *v * c);
    }
    Ok(Tensor::from_parts(shape, data))
}

// ----------------------------------------------------- index-style ops

/// Iterates the multi-indices of `shape` in row-major order.
fn for_each_index(shape: &[usize], mut f: impl FnMut(&[usize])) {
    let n: usize = shape.iter().product();
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        f(&idx);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

fn transpose_map(shape: &[usize], perm: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut sorted = perm.to_vec();
    sorted.sort_unstable();
    if sorted != (0..shape.len()).collect::<Vec<_>>() {
        return Err(Error::shape("transpose", &[shape, perm], "not a permutation of the axes"));
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let mut src = Vec::with_capacity(shape.iter().product());
    for_each_index(&out_shape, |o| {
        src.push(o.iter().zip(perm).map(|(&i, &p)| i * in_strides[p]).sum());
    });
    Ok((out_shape, src))
}

fn slice_map(shape: &[usize], axis: usize, start: usize, end: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if axis >= shape.len() || start >= end || end > shape[axis] {
        return Err(Error::shape(
            "slice",
            &[shape],
            format!("invalid range {start}..{end} on axis {axis}"),
        ));
    }
    let indices: Vec<usize> = (start..end).collect();
    gather_map(shape, axis, &indices)
}

fn gather_map(shape: &[usize], axis: usize, indices: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    if axis >= shape.len() || indices.is_empty() || indices.iter().any(|&i| i >= shape[axis]) {
        return Err(Error::shape(
            "gather_rows",
            &[shape],
            format!("indices out of range for axis {axis}"),
        ));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let len = shape[axis];
    let mut src = Vec::with_capacity(outer * indices.len() * inner);
    for o in 0..outer {
        for &i in indices {
            let base = (o * len + i) * inner;
            src.extend(base..base + inner);
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = indices.len();
    Ok((out_shape, src))
}

fn scatter<T: Element>(shape: &[usize], src: &[usize], g: &[T]) -> Tensor<T> {
    let mut d = vec![T::zero(); shape.iter().product()];
    for (&i, &v) in src.iter().zip(g) {
        d[i] = d[i] + v;
    }
    Tensor::from_parts(shape.to_vec(), d)
}

fn concat_forward<T: Element>(inputs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = inputs[0].shape();
    let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
    if axis >= first.len() {
        return Err(Error::shape("concat", &shapes, format!("axis {axis} out of range")));
    }
    for s in &shapes {
        let ok = s.len() == first.len()
            && s.iter()
                .zip(first)
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !ok {
            return Err(Error::shape("concat", &shapes, "non-concatenated axes differ"));
        }
    }
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let mut shape = first.to_vec();
    shape[axis] = shapes.iter().map(|s| s[axis]).sum();
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for t in inputs {
            let block = t.shape()[axis] * inner;
            data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
        }
    }
    Ok(Tensor::from_parts(shape, data))
}

// ---------------------------------------------------------------- losses

fn cross_entropy_forward<T: Element>(logits: &Tensor<T>, targets: &[usize]) -> Result<Forward<T>> {
    let k = *logits.shape().last().unwrap();
    let rows = logits.numel() / k;
    if logits.ndim() < 2 || rows != targets.len() || targets.iter().any(|&t| t >= k) {
        return Err(Error::shape(
            "cross_entropy",
            &[logits.shape(), &[targets.len()]],
            "targets must index the last axis, one per row",
        ));
    }
    let log_p = log_softmax_rows(logits);
    let nll: T = targets
        .iter()
        .enumerate()
        .map(|(r, &t)| -log_p.data()[r * k + t])
        .sum();
    let probs = log_p.map(|v| v.exp());
    Ok(Forward {
        value: Tensor::scalar(nll / T::of(rows as f64)),
        saved: vec![probs],
    })
}

fn kl_div_forward<T: Element>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<Forward<T>> {
    if logits.shape() != target.shape() || logits.ndim() < 2 {
        return Err(Error::shape(
            "kl_div",
            &[logits.shape(), target.shape()],
            "student logits and target distribution must share a ≥2-D shape",
        ));
    }
    let k = *logits.shape().last().unwrap();
    let rows = logits.numel() / k;
    let log_q = log_softmax_rows(logits);
    let mut total = T::zero();
    for (&p, &lq) in target.data().iter().zip(log_q.data()) {
        if p > T::zero() {
            total = total + p * (p.ln() - lq);
        }
    }
    Ok(Forward {
        value: Tensor::scalar(total / T::of(rows as f64)),
        saved: vec![log_q],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduce_map_all_axes_is_scalar() {
        let (s, m) = reduce_map(&[2, 3], &[0, 1]);
        assert_eq!(s, vec![1]);
        assert!(m.iter().all(|&i| i == 0));
    }

    #[test]
    fn reduce_map_middle_axis() {
        let (s, m) = reduce_map(&[2, 3, 2], &[1]);
        assert_eq!(s, vec![2, 2]);
        assert_eq!(m, vec![0, 1, 0, 1, 0, 1, 2, 3, 2, 3, 2, 3]);
    }

    #[test]
    fn transpose_map_2d() {
        let (s, src) = transpose_map(&[2, 3], &[1, 0]).unwrap();
        assert_eq!(s, vec![3, 2]);
        assert_eq!(src, vec![0, 3, 1, 4, 2, 5]);
    }

    #[test]
    fn gelu_reference_values() {
        // Φ(1) = 0.841344746068543
        assert!((gelu(1.0f64) - 0.841_344_746_068_543).abs() < 1e-12);
        assert_eq!(gelu(0.0f64), 0.0);
    }
}
