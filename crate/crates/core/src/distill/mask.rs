use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};

/// Per-sample boolean patch mask, row-major `batch × num_patches`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    batch: usize,
    num_patches: usize,
    flags: Vec<bool>,
    ratio_range: [f64; 2],
}

impl MaskSpec {
    /// Wraps explicit flags. Only the length is validated, so degenerate
    /// masks (nothing masked) can be built for testing.
    pub fn from_flags(
        batch: usize,
        num_patches: usize,
        flags: Vec<bool>,
        ratio_range: [f64; 2],
    ) -> Result<Self> {
        if flags.len() != batch * num_patches {
            return Err(Error::shape(
                "mask",
                &[&[flags.len()], &[batch, num_patches]],
                "flag count must equal batch × num_patches",
            ));
        }
        Ok(MaskSpec {
            batch,
            num_patches,
            flags,
            ratio_range,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn num_patches(&self) -> usize {
        self.num_patches
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn ratio_range(&self) -> [f64; 2] {
        self.ratio_range
    }

    pub fn row(&self, b: usize) -> &[bool] {
        &self.flags[b * self.num_patches..(b + 1) * self.num_patches]
    }

    pub fn count(&self, b: usize) -> usize {
        self.row(b).iter().filter(|&&m| m).count()
    }

    pub fn fraction(&self, b: usize) -> f64 {
        self.count(b) as f64 / self.num_patches as f64
    }

    pub fn masked_indices(&self, b: usize) -> Vec<usize> {
        (0..self.num_patches).filter(|&i| self.row(b)[i]).collect()
    }

    pub fn total_masked(&self) -> usize {
        self.flags.iter().filter(|&&m| m).count()
    }
}

/// Number of positions to mask for a drawn ratio `r`: `round(r·n)`, kept
/// inside `[⌈lo·n⌉, ⌊hi·n⌋]` when that range is non-empty, and always
/// leaving at least one masked and one visible patch.
pub fn mask_count(r: f64, n: usize, [lo, hi]: [f64; 2]) -> usize {
    let nf = n as f64;
    let mut k = (r * nf).round() as usize;
    let (min_k, max_k) = ((lo * nf).ceil() as usize, (hi * nf).floor() as usize);
    if min_k <= max_k {
        k = k.clamp(min_k, max_k);
    }
    k.clamp(1, n - 1)
}

/// Draws one ratio per sample from `U[lo, hi]` and masks that many
/// positions chosen uniformly without replacement.
pub fn sample_mask<R: Rng + ?Sized>(
    batch: usize,
    num_patches: usize,
    ratio_range: [f64; 2],
    rng: &mut R,
) -> Result<MaskSpec> {
    let [lo, hi] = ratio_range;
    if !(lo > 0.0 && lo <= hi && hi < 1.0) {
        return Err(Error::config(
            "mask_ratio",
            format!("need 0 < lo ≤ hi < 1, got [{lo}, {hi}]"),
        ));
    }
    if num_patches < 2 {
        return Err(Error::config("mask_ratio", "masking needs at least 2 patches"));
    }
    let mut flags = vec![false; batch * num_patches];
    for b in 0..batch {
        let r = if lo == hi { lo } else { rng.random_range(lo..=hi) };
        let k = mask_count(r, num_patches, ratio_range);
        for i in index::sample(rng, num_patches, k) {
            flags[b * num_patches + i] = true;
        }
    }
    MaskSpec::from_flags(batch, num_patches, flags, ratio_range)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fixed_ratio_forces_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = sample_mask(8, 4, [0.5, 0.5], &mut rng).unwrap();
        for b in 0..8 {
            assert_eq!(m.count(b), 2);
        }
    }

    #[test]
    fn same_seed_same_mask() {
        let a = sample_mask(4, 16, [0.1, 0.5], &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = sample_mask(4, 16, [0.1, 0.5], &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bounds_are_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_mask(1, 4, [0.0, 0.5], &mut rng).is_err());
        assert!(sample_mask(1, 4, [0.6, 0.5], &mut rng).is_err());
        assert!(sample_mask(1, 4, [0.1, 1.0], &mut rng).is_err());
        assert!(sample_mask(1, 1, [0.1, 0.5], &mut rng).is_err());
    }

    #[test]
    fn small_grids_keep_one_of_each() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = sample_mask(64, 2, [0.1, 0.2], &mut rng).unwrap();
        for b in 0..64 {
            assert_eq!(m.count(b), 1);
        }
    }
}
