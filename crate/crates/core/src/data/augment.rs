use rand::Rng;
use serde::{Deserialize, Serialize};

use super::container::{Image, NormStats};
use crate::error::{Error, Result};
use crate::tensor::Element;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugRecipe {
    /// Crop area as a fraction of the source area.
    pub crop_scale: [f64; 2],
    /// Crop width / height.
    pub crop_aspect: [f64; 2],
    pub hflip_prob: f64,
    pub output_size: usize,
}

impl Default for AugRecipe {
    fn default() -> Self {
        AugRecipe {
            crop_scale: [0.08, 1.0],
            crop_aspect: [3.0 / 4.0, 4.0 / 3.0],
            hflip_prob: 0.5,
            output_size: 16,
        }
    }
}

impl AugRecipe {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::config("crop_scale", format!("need 0 < lo ≤ hi ≤ 1, got [{lo}, {hi}]")));
        }
        let [a, b] = self.crop_aspect;
        if !(a > 0.0 && a <= b && b.is_finite()) {
            return Err(Error::config("crop_aspect", format!("need 0 < lo ≤ hi, got [{a}, {b}]")));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::config("hflip_prob", "must lie in [0, 1]"));
        }
        if self.output_size == 0 {
            return Err(Error::config("output_size", "must be positive"));
        }
        Ok(())
    }
}

/// A crop window in source pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Crop {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Random-resized-crop window: up to ten draws of area and log-uniform
/// aspect, falling back to the largest centred crop within the aspect
/// range.
pub fn sample_crop<R: Rng + ?Sized>(h: usize, w: usize, recipe: &AugRecipe, rng: &mut R) -> Crop {
    let area = (h * w) as f64;
    let [s_lo, s_hi] = recipe.crop_scale;
    let (r_lo, r_hi) = (recipe.crop_aspect[0].ln(), recipe.crop_aspect[1].ln());
    for _ in 0..10 {
        let target = area * if s_lo == s_hi { s_lo } else { rng.random_range(s_lo..=s_hi) };
        let ratio = if r_lo == r_hi { r_lo } else { rng.random_range(r_lo..=r_hi) }.exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return Crop {
                top,
                left,
                height: ch,
                width: cw,
            };
        }
    }
    let in_ratio = w as f64 / h as f64;
    let (ch, cw) = if in_ratio < recipe.crop_aspect[0] {
        ((w as f64 / recipe.crop_aspect[0]).round() as usize, w)
    } else if in_ratio > recipe.crop_aspect[1] {
        (h, (h as f64 * recipe.crop_aspect[1]).round() as usize)
    } else {
        (h, w)
    };
    Crop {
        top: (h - ch) / 2,
        left: (w - cw) / 2,
        height: ch,
        width: cw,
    }
}

/// Bilinear resize of a crop to `size×size`, pixel centres at half-integer
/// coordinates, edges clamped. Values stay on the 0–255 scale.
pub fn resize_crop(img: &Image, crop: Crop, size: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(img.channels * size * size);
    let sy = crop.height as f64 / size as f64;
    let sx = crop.width as f64 / size as f64;
    let axis = |dst: usize, scale: f64, len: usize| -> (usize, usize, f64) {
        let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f64)
    };
    let ys: Vec<_> = (0..size).map(|y| axis(y, sy, crop.height)).collect();
    let xs: Vec<_> = (0..size).map(|x| axis(x, sx, crop.width)).collect();
    for c in 0..img.channels {
        let plane = &img.data[c * img.height * img.width..(c + 1) * img.height * img.width];
        let px = |y: usize, x: usize| f64::from(plane[(crop.top + y) * img.width + crop.left + x]);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = px(y0, x0) * (1.0 - fx) + px(y0, x1) * fx;
                let bot = px(y1, x0) * (1.0 - fx) + px(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

/// Mirrors each row of a `C×H×W` buffer in place.
pub fn hflip<V>(data: &mut [V], width: usize) {
    for row in data.chunks_mut(width) {
        row.reverse();
    }
}

/// `(x/255 − mean_c) / std_c` into the element type.
pub fn normalize<T: Element>(pixels: &[f64], channels: usize, stats: &NormStats) -> Vec<T> {
    let plane = pixels.len() / channels;
    pixels
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let c = i / plane;
            T::of((p / 255.0 - stats.mean[c]) / stats.std[c])
        })
        .collect()
}

/// A training view: random resized crop, optional horizontal flip, then
/// normalisation. Returns `C×S×S` values.
pub fn augment_train<T: Element, R: Rng + ?Sized>(
    img: &Image,
    recipe: &AugRecipe,
    stats: &NormStats,
    rng: &mut R,
) -> Vec<T> {
    let px = augment_pixels(img, recipe, rng);
    normalize(&px, img.channels, stats)
}

/// Crop, resize and flip without normalisation (0–255 scale).
pub fn augment_pixels<R: Rng + ?Sized>(img: &Image, recipe: &AugRecipe, rng: &mut R) -> Vec<f64> {
    let crop = sample_crop(img.height, img.width, recipe, rng);
    let mut px = resize_crop(img, crop, recipe.output_size);
    if recipe.hflip_prob > 0.0 && rng.random_bool(recipe.hflip_prob) {
        hflip(&mut px, recipe.output_size);
    }
    px
}

/// The evaluation view: the full frame resized to `size` (a no-op copy when
/// sizes already agree), normalised.
pub fn center_view<T: Element>(img: &Image, size: usize, stats: &NormStats) -> Vec<T> {
    let px: Vec<f64> = if img.height == size && img.width == size {
        img.data.iter().map(|&p| f64::from(p)).collect()
    } else {
        let full = Crop {
            top: 0,
            left: 0,
            height: img.height,
            width: img.width,
        };
        resize_crop(img, full, size)
    };
    normalize(&px, img.channels, stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gradient_image() -> Image {
        let data = (0..2 * 8 * 8).map(|i| (i * 3 % 256) as u8).collect();
        Image::new(2, 8, 8, data).unwrap()
    }

    #[test]
    fn double_flip_is_identity() {
        let mut v: Vec<f64> = (0..24).map(f64::from).collect();
        let orig = v.clone();
        hflip(&mut v, 4);
        assert_ne!(v, orig);
        hflip(&mut v, 4);
        assert_eq!(v, orig);
    }

    #[test]
    fn degenerate_recipe_is_a_full_frame_resize() {
        let img = gradient_image();
        let recipe = AugRecipe {
            crop_scale: [1.0, 1.0],
            crop_aspect: [1.0, 1.0],
            hflip_prob: 0.0,
            output_size: 8,
        };
        let stats = NormStats {
            mean: vec![0.0; 2],
            std: vec![1.0; 2],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a: Vec<f64> = augment_train(&img, &recipe, &stats, &mut rng);
        let b: Vec<f64> = augment_train(&img, &recipe, &stats, &mut rng);
        assert_eq!(a, b);
        // Same size: the resize is exact.
        let want: Vec<f64> = img.data.iter().map(|&p| f64::from(p) / 255.0).collect();
        for (x, y) in a.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_image_normalises_in_closed_form() {
        let img = Image::new(3, 10, 10, vec![128; 300]).unwrap();
        let stats = NormStats {
            mean: vec![0.4, 0.5, 0.6],
            std: vec![0.2, 0.25, 0.3],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out: Vec<f64> = augment_train(&img, &AugRecipe { output_size: 6, ..Default::default() }, &stats, &mut rng);
        for (i, v) in out.iter().enumerate() {
            let c = i / 36;
            let want = (128.0 / 255.0 - stats.mean[c]) / stats.std[c];
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn crops_stay_inside_the_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let recipe = AugRecipe::default();
        for _ in 0..500 {
            let c = sample_crop(20, 30, &recipe, &mut rng);
            assert!(c.height >= 1 && c.width >= 1);
            assert!(c.top + c.height <= 20 && c.left + c.width <= 30);
        }
    }

    #[test]
    fn bilinear_halving_averages_pairs() {
        let img = Image::new(1, 2, 4, vec![0, 100, 200, 100, 0, 100, 200, 100]).unwrap();
        let crop = Crop {
            top: 0,
            left: 0,
            height: 2,
            width: 4,
        };
        let out = resize_crop(&img, crop, 2);
        // Sample points at source x = 0.5 and 2.5, y = 0.5.
        assert_eq!(out, vec![50.0, 150.0, 50.0, 150.0]);
    }
}
