//! Frozen-feature evaluation: feature extraction, linear probes and PCA
//! visualisation.

mod lbfgs;
mod pca;
mod probe;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use lbfgs::{lbfgs, LbfgsOptions, LbfgsResult};
pub use pca::{patch_tile, pca_rgb, symmetric_eigen, write_ppm, PcaRgb};
pub use probe::{
    fit_logreg, l2_grid, logreg_objective, probe_lbfgs, probe_sgd, LinearModel, LogRegFit,
    ProbeResult, SgdProbeConfig, GRID_LEN, GRID_MAX, GRID_MIN,
};

use crate::data::{make_batch, permutation, DatasetContainer, NormStats, View};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Element;
use crate::vit::{encode, ViTConfig};

/// Row-major `rows×dims` features with one class label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub dims: usize,
    pub data: Vec<f64>,
    pub labels: Vec<usize>,
    /// How many final blocks contributed cls tokens.
    pub layers: usize,
}

impl FeatureMatrix {
    pub fn new(rows: usize, dims: usize, data: Vec<f64>, labels: Vec<usize>, layers: usize) -> Result<Self> {
        if data.len() != rows * dims || labels.len() != rows {
            return Err(Error::Invalid(format!(
                "{} values and {} labels for {rows}×{dims} features",
                data.len(),
                labels.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "FeatureMatrix" });
        }
        Ok(FeatureMatrix {
            rows,
            dims,
            data,
            labels,
            layers,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dims..(i + 1) * self.dims]
    }

    pub fn select(&self, idx: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            rows: idx.len(),
            dims: self.dims,
            data: idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            layers: self.layers,
        }
    }
}

/// Concatenated cls tokens of the last `layers_for_probe` blocks for every
/// image, taken from the un-augmented view.
pub fn extract_features<T: Element>(
    params: &ParamSet<T>,
    cfg: &ViTConfig,
    ds: &DatasetContainer,
    stats: &NormStats,
    layers_for_probe: usize,
    batch_size: usize,
) -> Result<FeatureMatrix> {
    let labels = ds
        .labels()
        .ok_or_else(|| Error::Invalid("probing needs a labelled dataset".into()))?;
    let mut cfg = cfg.clone();
    cfg.layers_for_probe = layers_for_probe;
    cfg.validate()?;
    let dims = layers_for_probe * cfg.dim;
    let mut data = Vec::with_capacity(ds.len() * dims);
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let images = make_batch::<T>(ds, chunk, View::Center(cfg.image_size), stats, 0)?;
        let feats = encode(params, &cfg, &images, None)?;
        data.extend(feats.layer_cls.to_f64());
    }
    FeatureMatrix::new(
        ds.len(),
        dims,
        data,
        labels.iter().map(|&l| usize::from(l)).collect(),
        layers_for_probe,
    )
}

/// Deterministic hold-out: a seeded permutation, the first
/// `⌊fraction·N⌋` rows (at least one) become validation.
pub fn split_train_val(fm: &FeatureMatrix, fraction: f64, seed: u64) -> Result<(FeatureMatrix, FeatureMatrix)> {
    if !(fraction > 0.0 && fraction < 1.0) || fm.rows < 2 {
        return Err(Error::Invalid(format!(
            "cannot hold out {fraction} of {} rows",
            fm.rows
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perm = permutation(fm.rows, &mut rng);
    let n_val = ((fraction * fm.rows as f64).floor() as usize).clamp(1, fm.rows - 1);
    Ok((fm.select(&perm[n_val..]), fm.select(&perm[..n_val])))
}

/// Fraction of positions where prediction and label agree.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Ok(0.0);
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}
