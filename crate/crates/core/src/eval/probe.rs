//! Linear classifiers on frozen features.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::lbfgs::{lbfgs, LbfgsOptions};
use super::{accuracy, FeatureMatrix};
use crate::error::{Error, Result};

pub const GRID_LEN: usize = 45;
pub const GRID_MIN: f64 = 1e-6;
pub const GRID_MAX: f64 = 1e3;

/// L2 strengths, log-spaced from `1e-6` to `1e3` inclusive.
pub fn l2_grid() -> Vec<f64> {
    let (lo, hi) = (GRID_MIN.log10(), GRID_MAX.log10());
    let mut g: Vec<f64> = (0..GRID_LEN)
        .map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (GRID_LEN - 1) as f64))
        .collect();
    g[0] = GRID_MIN;
    g[GRID_LEN - 1] = GRID_MAX;
    g
}

/// Multinomial logistic regression, weights `D×K` row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub dims: usize,
    pub classes: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearModel {
    pub fn zeros(dims: usize, classes: usize) -> Self {
        LinearModel {
            dims,
            classes,
            weight: vec![0.0; dims * classes],
            bias: vec![0.0; classes],
        }
    }

    pub fn logits_row(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.bias.clone();
        for (xi, wrow) in x.iter().zip(self.weight.chunks(self.classes)) {
            for (zk, wk) in z.iter_mut().zip(wrow) {
                *zk += xi * wk;
            }
        }
        z
    }

    /// Argmax class per row; ties go to the lowest index.
    pub fn predict(&self, fm: &FeatureMatrix) -> Vec<usize> {
        (0..fm.rows)
            .map(|i| {
                let z = self.logits_row(fm.row(i));
                z.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (k, &v)| if v > b.1 { (k, v) } else { b })
                    .0
            })
            .collect()
    }

    pub fn accuracy(&self, fm: &FeatureMatrix) -> Result<f64> {
        accuracy(&self.predict(fm), &fm.labels)
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    z.iter_mut().for_each(|v| *v /= s);
}

/// Mean cross-entropy plus `(λ/2)·‖W‖²` and its gradient; the bias is not
/// penalised. Parameters are `W` then `b`.
pub fn logreg_objective(fm: &FeatureMatrix, classes: usize, l2: f64, theta: &[f64]) -> (f64, Vec<f64>) {
    let (d, k) = (fm.dims, classes);
    let model = LinearModel {
        dims: d,
        classes: k,
        weight: theta[..d * k].to_vec(),
        bias: theta[d * k..].to_vec(),
    };
    let mut grad = vec![0.0; theta.len()];
    let mut loss = 0.0;
    let inv_n = 1.0 / fm.rows as f64;
    for i in 0..fm.rows {
        let x = fm.row(i);
        let mut p = model.logits_row(x);
        let y = fm.labels[i];
        let m = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + p.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - p[y];
        softmax_in_place(&mut p);
        p[y] -= 1.0;
        for (j, &xj) in x.iter().enumerate() {
            if xj != 0.0 {
                let row = &mut grad[j * k..(j + 1) * k];
                row.iter_mut().zip(&p).for_each(|(g, r)| *g += xj * r * inv_n);
            }
        }
        grad[d * k..].iter_mut().zip(&p).for_each(|(g, r)| *g += r * inv_n);
    }
    let w = &theta[..d * k];
    let penalty = 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>();
    grad[..d * k].iter_mut().zip(w).for_each(|(g, v)| *g += l2 * v);
    (loss * inv_n + penalty, grad)
}

fn class_count(splits: &[&FeatureMatrix]) -> usize {
    splits
        .iter()
        .flat_map(|s| s.labels.iter())
        .max()
        .map_or(0, |&m| m + 1)
}

fn check_train(train: &FeatureMatrix) -> Result<()> {
    let first = train.labels.first().copied();
    if train.rows == 0 || train.labels.iter().all(|&y| Some(y) == first) {
        return Err(Error::Invalid("probe needs at least two classes in the train split".into()));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct LogRegFit {
    pub model: LinearModel,
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
}

/// L-BFGS fit from zero initial weights.
pub fn fit_logreg(train: &FeatureMatrix, classes: usize, l2: f64, max_iter: usize) -> Result<LogRegFit> {
    check_train(train)?;
    let (d, k) = (train.dims, classes);
    let opts = LbfgsOptions {
        max_iter,
        ..LbfgsOptions::default()
    };
    let r = lbfgs(|t| logreg_objective(train, k, l2, t), vec![0.0; d * k + k], &opts);
    Ok(LogRegFit {
        model: LinearModel {
            dims: d,
            classes: k,
            weight: r.x[..d * k].to_vec(),
            bias: r.x[d * k..].to_vec(),
        },
        iterations: r.iterations,
        converged: r.converged,
        objective: r.f,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub method: String,
    /// Regularisation (L-BFGS) or learning rate (SGD) of the selected fit.
    pub best_l2: f64,
    pub grid: Vec<f64>,
    /// Validation accuracy for each grid value.
    pub grid_accuracies: Vec<f64>,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub iterations_used: usize,
}

fn best_index(acc: &[f64]) -> usize {
    acc.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, &a)| if a > b.1 { (i, a) } else { b })
        .0
}

/// Logistic regression over the 45-value L2 grid, selected on `val`.
/// Grid points are fitted in parallel and reported in grid order; ties
/// go to the smaller strength.
pub fn probe_lbfgs(
    train: &FeatureMatrix,
    val: &FeatureMatrix,
    test: Option<&FeatureMatrix>,
    max_iter: usize,
) -> Result<ProbeResult> {
    check_train(train)?;
    let mut splits = vec![train, val];
    splits.extend(test);
    let k = class_count(&splits);
    let grid = l2_grid();
    let fits: Vec<LogRegFit> = grid
        .par_iter()
        .map(|&l2| fit_logreg(train, k, l2, max_iter))
        .collect::<Result<_>>()?;
    let val_acc: Vec<f64> = fits
        .iter()
        .map(|f| f.model.accuracy(val))
        .collect::<Result<_>>()?;
    let best = best_index(&val_acc);
    let m = &fits[best].model;
    Ok(ProbeResult {
        method: "lbfgs".into(),
        best_l2: grid[best],
        train_accuracy: m.accuracy(train)?,
        val_accuracy: val_acc[best],
        test_accuracy: test.map(|t| m.accuracy(t)).transpose()?,
        iterations_used: fits[best].iterations,
        grid,
        grid_accuracies: val_acc,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdProbeConfig {
    pub lrs: Vec<f64>,
    pub iterations: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for SgdProbeConfig {
    fn default() -> Self {
        SgdProbeConfig {
            lrs: vec![0.01, 0.03, 0.1, 0.3, 1.0],
            iterations: 1000,
            batch_size: 64,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

fn sgd_fit(train: &FeatureMatrix, k: usize, lr: f64, cfg: &SgdProbeConfig) -> LinearModel {
    let d = train.dims;
    let mut theta = vec![0.0; d * k + k];
    let mut vel = vec![0.0; theta.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.rows).collect();
    let mut cursor = order.len();
    let bs = cfg.batch_size.clamp(1, train.rows);
    for it in 0..cfg.iterations {
        let mut idx = Vec::with_capacity(bs);
        while idx.len() < bs {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let batch = train.select(&idx);
        let (_, g) = logreg_objective(&batch, k, cfg.weight_decay, &theta);
        let step = lr * 0.5 * (1.0 + (std::f64::consts::PI * it as f64 / cfg.iterations as f64).cos());
        for ((t, v), gi) in theta.iter_mut().zip(vel.iter_mut()).zip(&g) {
            *v = cfg.momentum * *v + gi;
            *t -= step * *v;
        }
    }
    LinearModel {
        dims: d,
        classes: k,
        weight: theta[..d * k].to_vec(),
        bias: theta[d * k..].to_vec(),
    }
}

/// Minibatch SGD with momentum and cosine decay for each learning rate,
/// selected on `val`.
pub fn probe_sgd(
    train: &FeatureMatrix,
    val: &FeatureMatrix,
    test: Option<&FeatureMatrix>,
    cfg: &SgdProbeConfig,
) -> Result<ProbeResult> {
    check_train(train)?;
    if cfg.lrs.is_empty() || cfg.lrs.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
        return Err(Error::config("lrs", "need at least one positive learning rate"));
    }
    let mut splits = vec![train, val];
    splits.extend(test);
    let k = class_count(&splits);
    let models: Vec<LinearModel> = cfg.lrs.par_iter().map(|&lr| sgd_fit(train, k, lr, cfg)).collect();
    let val_acc: Vec<f64> = models.iter().map(|m| m.accuracy(val)).collect::<Result<_>>()?;
    let best = best_index(&val_acc);
    let m = &models[best];
    Ok(ProbeResult {
        method: "sgd".into(),
        best_l2: cfg.lrs[best],
        train_accuracy: m.accuracy(train)?,
        val_accuracy: val_acc[best],
        test_accuracy: test.map(|t| m.accuracy(t)).transpose()?,
        iterations_used: cfg.iterations,
        grid: cfg.lrs.clone(),
        grid_accuracies: val_acc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    /// Gaussian clusters around well separated centres.
    pub(crate) fn clusters(k: usize, per: usize, d: usize, spread: f64, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, spread).unwrap();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..k * per {
            let y = i % k;
            for j in 0..d {
                let centre = if j % k == y { 3.0 } else { 0.0 };
                data.push(centre + noise.sample(&mut rng));
            }
            labels.push(y);
        }
        FeatureMatrix::new(k * per, d, data, labels, 1).unwrap()
    }

    #[test]
    fn grid_endpoints_and_ratio() {
        let g = l2_grid();
        assert_eq!(g.len(), 45);
        assert_eq!(g[0], 1e-6);
        assert_eq!(g[44], 1e3);
        let r0 = g[1] / g[0];
        for w in g.windows(2) {
            assert!((w[1] / w[0] - r0).abs() < 1e-9);
        }
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let fm = clusters(3, 4, 5, 1.0, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let theta: Vec<f64> = (0..18).map(|_| Normal::new(0.0, 0.5).unwrap().sample(&mut rng)).collect();
        let (_, g) = logreg_objective(&fm, 3, 0.3, &theta);
        for i in 0..theta.len() {
            let h = 1e-6;
            let mut p = theta.clone();
            p[i] += h;
            let mut m = theta.clone();
            m[i] -= h;
            let num = (logreg_objective(&fm, 3, 0.3, &p).0 - logreg_objective(&fm, 3, 0.3, &m).0) / (2.0 * h);
            assert!((num - g[i]).abs() < 1e-7, "{i}: {num} vs {}", g[i]);
        }
    }

    #[test]
    fn separable_features_fit_at_smallest_strength() {
        let fm = clusters(2, 40, 6, 0.5, 3);
        let fit = fit_logreg(&fm, 2, l2_grid()[0], 500).unwrap();
        assert!(fit.model.accuracy(&fm).unwrap() >= 0.99);
    }

    #[test]
    fn duplicated_rows_leave_the_optimum() {
        let fm = clusters(3, 10, 4, 1.5, 4);
        let idx: Vec<usize> = (0..fm.rows).chain(0..fm.rows).collect();
        let twice = fm.select(&idx);
        let a = fit_logreg(&fm, 3, 1e-2, 500).unwrap();
        let b = fit_logreg(&twice, 3, 1e-2, 500).unwrap();
        assert!(a.converged && b.converged);
        for (x, y) in a.model.weight.iter().zip(&b.model.weight) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn single_class_is_rejected() {
        let fm = FeatureMatrix::new(3, 1, vec![1.0, 2.0, 3.0], vec![0, 0, 0], 1).unwrap();
        assert!(probe_lbfgs(&fm, &fm, None, 10).is_err());
        assert!(probe_sgd(&fm, &fm, None, &SgdProbeConfig::default()).is_err());
    }

    #[test]
    fn sgd_probe_on_separable_features() {
        let train = clusters(4, 50, 8, 0.7, 5);
        let val = clusters(4, 20, 8, 0.7, 6);
        let cfg = SgdProbeConfig {
            iterations: 300,
            ..SgdProbeConfig::default()
        };
        let r = probe_sgd(&train, &val, None, &cfg).unwrap();
        assert!(r.val_accuracy >= 0.95, "{r:?}");
        assert_eq!(probe_sgd(&train, &val, None, &cfg).unwrap(), r);
        let zero = SgdProbeConfig {
            iterations: 0,
            ..cfg
        };
        let r0 = probe_sgd(&train, &val, None, &zero).unwrap();
        // Untrained weights predict class 0 everywhere.
        assert!((r0.val_accuracy - 0.25).abs() < 1e-12);
    }
}
