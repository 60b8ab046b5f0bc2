//! Procedural proxy datasets and the subsampling / merging operations
//! that derive new containers from existing ones.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::augment::{augment_pixels, AugRecipe};
use super::container::{DatasetContainer, Image};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySpec {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            classes: 10,
            per_class: 50,
            size: 16,
            channels: 3,
            seed: 0,
        }
    }
}

/// Oriented sinusoidal gratings, one orientation, phase and colour tint per
/// class, with per-image amplitude, phase jitter and pixel noise. Class
/// templates differ in pixel space, so a linear model separates them.
/// Labels cycle `0, 1, …, K−1, 0, …`.
pub fn gen_toy_dataset(spec: &ToySpec) -> Result<DatasetContainer> {
    if spec.classes < 2 || spec.classes > usize::from(u16::MAX) {
        return Err(Error::config("classes", "need 2 ≤ classes ≤ 65535"));
    }
    if spec.per_class == 0 || spec.size == 0 || spec.channels == 0 {
        return Err(Error::config("per_class", "counts and sizes must be positive"));
    }
    let (k, s, c) = (spec.classes, spec.size, spec.channels);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, 12.0).expect("valid std");
    let n = k * spec.per_class;
    let mut pixels = Vec::with_capacity(n * c * s * s);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % k;
        let theta = PI * y as f64 / k as f64;
        let (ct, st) = (theta.cos(), theta.sin());
        let phase = 2.0 * PI * (y as f64 * 0.618_033_988_75).fract() + rng.random_range(-0.3..0.3);
        let amp = 90.0 * rng.random_range(0.7..1.0);
        let freq = 2.0 * PI * 3.0 / s as f64;
        for ch in 0..c {
            let tint = 0.8 + 0.2 * (2.0 * PI * (y as f64 / k as f64 + ch as f64 / 3.0)).cos();
            for r in 0..s {
                for q in 0..s {
                    let u = q as f64 * ct + r as f64 * st;
                    let v = 128.0 + amp * tint * (freq * u + phase).sin() + noise.sample(&mut rng);
                    pixels.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        labels.push(y as u16);
    }
    DatasetContainer::new(
        c,
        s,
        s,
        pixels,
        Some(labels),
        k as u16,
        format!(
            "toy gratings: classes={k} per_class={} size={s} channels={c} seed={}",
            spec.per_class, spec.seed
        ),
    )
}

/// A large procedural scene: a few random gratings plus soft blobs, to be
/// cut into many crops.
pub fn gen_source_image(channels: usize, size: usize, seed: u64) -> Result<Image> {
    if channels == 0 || size == 0 {
        return Err(Error::config("size", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let theta = rng.random_range(0.0..PI);
            let cycles = rng.random_range(1.0..8.0);
            (theta, cycles, rng.random_range(0.0..2.0 * PI), rng.random_range(0.3..1.0))
        })
        .collect();
    let blobs: Vec<(f64, f64, f64, Vec<f64>)> = (0..6)
        .map(|_| {
            let cy = rng.random_range(0.0..size as f64);
            let cx = rng.random_range(0.0..size as f64);
            let r = rng.random_range(0.05..0.2) * size as f64;
            let col = (0..channels).map(|_| rng.random_range(-1.0..1.0)).collect();
            (cy, cx, r, col)
        })
        .collect();
    let mut field = vec![0.0f64; channels * size * size];
    for ch in 0..channels {
        for y in 0..size {
            for x in 0..size {
                let mut v = 0.0;
                for (i, &(theta, cycles, phase, amp)) in waves.iter().enumerate() {
                    let u = x as f64 * theta.cos() + y as f64 * theta.sin();
                    let shift = (i + ch) as f64 * 0.7;
                    v += amp * (2.0 * PI * cycles * u / size as f64 + phase + shift).sin();
                }
                for (cy, cx, r, col) in &blobs {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    v += 1.5 * col[ch] * (-d2 / (2.0 * r * r)).exp();
                }
                field[(ch * size + y) * size + x] = v;
            }
        }
    }
    let (lo, hi) = field
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-12);
    let data = field
        .iter()
        .map(|&v| ((v - lo) / span * 255.0).round() as u8)
        .collect();
    Image::new(channels, size, size, data)
}

/// `count` augmented crops of one source image, unlabeled.
pub fn gen_single_image_dataset(
    image: &Image,
    count: usize,
    recipe: &AugRecipe,
    seed: u64,
) -> Result<DatasetContainer> {
    recipe.validate()?;
    if image.height < recipe.output_size || image.width < recipe.output_size {
        return Err(Error::Invalid(format!(
            "source image {}×{} is smaller than the {}-pixel output",
            image.height, image.width, recipe.output_size
        )));
    }
    if count == 0 {
        return Err(Error::config("count", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = recipe.output_size;
    let mut pixels = Vec::with_capacity(count * image.channels * s * s);
    for _ in 0..count {
        let px = augment_pixels(image, recipe, &mut rng);
        pixels.extend(px.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8));
    }
    DatasetContainer::new(
        image.channels,
        s,
        s,
        pixels,
        None,
        0,
        format!(
            "single image: {count} crops of a {}×{}×{} source, seed={seed}",
            image.channels, image.height, image.width
        ),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsampleMode {
    /// Keep a fraction of the images of every class.
    PerClassFraction,
    /// Keep a fraction of the classes, all their images, labels re-indexed.
    ClassFraction,
}

fn check_fraction(fraction: f64) -> Result<()> {
    if fraction > 0.0 && fraction <= 1.0 {
        Ok(())
    } else {
        Err(Error::config("fraction", format!("must lie in (0, 1], got {fraction}")))
    }
}

fn labels_of(ds: &DatasetContainer) -> Result<&[u16]> {
    ds.labels()
        .ok_or_else(|| Error::Invalid("subsampling needs a labeled container".into()))
}

/// Images of classes `keep` (sorted), relabelled `0..keep.len()` in that order.
fn restrict_classes(ds: &DatasetContainer, keep: &[u16], provenance: String) -> Result<DatasetContainer> {
    let labels = labels_of(ds)?;
    let remap: BTreeMap<u16, u16> = keep.iter().enumerate().map(|(i, &k)| (k, i as u16)).collect();
    let idx: Vec<usize> = (0..ds.len()).filter(|&i| remap.contains_key(&labels[i])).collect();
    if idx.is_empty() {
        return Err(Error::Invalid("selected classes have no images".into()));
    }
    let mut pixels = Vec::with_capacity(idx.len() * ds.image_bytes());
    for &i in &idx {
        pixels.extend_from_slice(ds.pixel_slice(i));
    }
    let new_labels = idx.iter().map(|&i| remap[&labels[i]]).collect();
    DatasetContainer::new(
        ds.channels(),
        ds.height(),
        ds.width(),
        pixels,
        Some(new_labels),
        keep.len() as u16,
        provenance,
    )
}

pub fn subsample(
    ds: &DatasetContainer,
    mode: SubsampleMode,
    fraction: f64,
    seed: u64,
) -> Result<DatasetContainer> {
    check_fraction(fraction)?;
    let labels = labels_of(ds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match mode {
        SubsampleMode::PerClassFraction => {
            let mut by_class: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
            for (i, &y) in labels.iter().enumerate() {
                by_class.entry(y).or_default().push(i);
            }
            let mut keep = Vec::new();
            for members in by_class.values() {
                let k = ((fraction * members.len() as f64).round() as usize).max(1);
                keep.extend(index::sample(&mut rng, members.len(), k).iter().map(|j| members[j]));
            }
            keep.sort_unstable();
            ds.select(
                &keep,
                format!("{} | per-class fraction {fraction} seed={seed}", ds.provenance),
            )
        }
        SubsampleMode::ClassFraction => Ok(class_split(ds, fraction, seed)?.0),
    }
}

/// The class draw behind [`class_split`]: `round(fraction·k)` classes (at
/// least one) kept, the rest held out, both sorted.
pub fn pick_classes(k: usize, fraction: f64, seed: u64) -> (Vec<u16>, Vec<u16>) {
    let n_keep = ((fraction * k as f64).round() as usize).clamp(1, k);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep: Vec<u16> = index::sample(&mut rng, k, n_keep).iter().map(|c| c as u16).collect();
    keep.sort_unstable();
    let held = (0..k as u16).filter(|c| !keep.contains(c)).collect();
    (keep, held)
}

/// Splits the classes into a kept fraction and its complement, each
/// relabelled densely in ascending original-class order. The held-out part
/// is `None` when every class is kept.
pub fn class_split(
    ds: &DatasetContainer,
    fraction: f64,
    seed: u64,
) -> Result<(DatasetContainer, Option<DatasetContainer>)> {
    check_fraction(fraction)?;
    labels_of(ds)?;
    let k = usize::from(ds.class_count());
    let (keep, held) = pick_classes(k, fraction, seed);
    let kept = restrict_classes(
        ds,
        &keep,
        format!("{} | classes {keep:?} of {k} seed={seed}", ds.provenance),
    )?;
    let rest = if held.is_empty() {
        None
    } else {
        Some(restrict_classes(
            ds,
            &held,
            format!("{} | held-out classes {held:?} of {k} seed={seed}", ds.provenance),
        )?)
    };
    Ok((kept, rest))
}

/// Concatenates containers of identical image geometry. Labels are dropped.
pub fn merge(parts: &[DatasetContainer]) -> Result<DatasetContainer> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Invalid("merge needs at least one container".into()))?;
    let geom = |d: &DatasetContainer| [d.channels(), d.height(), d.width()];
    let mut pixels = Vec::new();
    for (i, p) in parts.iter().enumerate() {
        if geom(p) != geom(first) {
            return Err(Error::shape(
                "merge",
                &[&geom(first), &geom(p)],
                format!("part {i} has different image geometry"),
            ));
        }
        pixels.extend_from_slice(p.pixels());
    }
    let sources: Vec<&str> = parts.iter().map(|p| p.provenance.as_str()).collect();
    DatasetContainer::new(
        first.channels(),
        first.height(),
        first.width(),
        pixels,
        None,
        0,
        format!("merge of [{}]", sources.join("; ")),
    )
}

/// A seeded shuffle of `0..n`.
pub fn permutation(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}
