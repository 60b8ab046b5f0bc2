//! Three-component PCA colouring of patch embeddings.

use std::io::Write;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order and the matching unit
/// eigenvectors (one per row).
pub fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    (0..n).for_each(|i| v[i * n + i] = 1.0);
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let vectors = order
        .iter()
        .map(|&i| (0..n).map(|k| v[k * n + i]).collect())
        .collect();
    (values, vectors)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaRgb {
    /// One RGB triple per input row.
    pub rgb: Vec<[u8; 3]>,
    /// Top three principal axes, unit length; the largest-magnitude entry
    /// of each is positive.
    pub components: [Vec<f64>; 3],
    /// Variance along each component (covariance normalised by `N − 1`).
    pub explained_variance: [f64; 3],
    /// Share of total variance per component.
    pub explained_ratio: [f64; 3],
}

/// Number of eigenvalues above a relative tolerance.
fn effective_rank(values: &[f64], n: usize, d: usize) -> usize {
    let top = values.first().copied().unwrap_or(0.0).max(0.0);
    let tol = top * (n.max(d) as f64) * f64::EPSILON * 16.0;
    values.iter().filter(|&&l| l > tol && l > 0.0).count()
}

/// Centres the `N×D` rows, projects onto the top three principal axes and
/// min-max scales each projection to `0..=255`.
pub fn pca_rgb<T: Element>(features: &Tensor<T>) -> Result<PcaRgb> {
    let &[n, d] = features.shape() else {
        return Err(Error::shape("pca_rgb", &[features.shape()], "expected an N×D matrix"));
    };
    if n < 3 {
        return Err(Error::RankDeficient { rank: n.saturating_sub(1), needed: 3 });
    }
    let x = features.to_f64();
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "pca_rgb" });
    }
    let mut mean = vec![0.0; d];
    for row in x.chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centred: Vec<f64> = x.chunks(d).flat_map(|r| r.iter().zip(&mean).map(|(v, m)| v - m)).collect();
    let mut cov = vec![0.0; d * d];
    for row in centred.chunks(d) {
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] += row[i] * row[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i * d + j] /= (n - 1) as f64;
            cov[j * d + i] = cov[i * d + j];
        }
    }
    let (values, vectors) = symmetric_eigen(&cov, d);
    let rank = effective_rank(&values, n, d);
    if rank < 3 {
        return Err(Error::RankDeficient { rank, needed: 3 });
    }
    let mut comps: [Vec<f64>; 3] = [vectors[0].clone(), vectors[1].clone(), vectors[2].clone()];
    for c in comps.iter_mut() {
        let big = c.iter().cloned().fold(0.0, |a: f64, v| if v.abs() > a.abs() { v } else { a });
        if big < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
    }
    let proj: Vec<[f64; 3]> = centred
        .chunks(d)
        .map(|r| std::array::from_fn(|k| r.iter().zip(&comps[k]).map(|(a, b)| a * b).sum()))
        .collect();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &proj {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let rgb = proj
        .iter()
        .map(|p| {
            std::array::from_fn(|k| {
                let span = hi[k] - lo[k];
                if span > 0.0 {
                    ((p[k] - lo[k]) / span * 255.0).round() as u8
                } else {
                    0
                }
            })
        })
        .collect();
    let total: f64 = values.iter().map(|v| v.max(0.0)).sum();
    Ok(PcaRgb {
        rgb,
        explained_variance: [values[0], values[1], values[2]],
        explained_ratio: std::array::from_fn(|k| values[k] / total),
        components: comps,
    })
}

/// Arranges per-patch colours into a `grid×grid` image, each patch drawn
/// as a `scale×scale` block. Returns row-major RGB bytes.
pub fn patch_tile(rgb: &[[u8; 3]], grid: usize, scale: usize) -> Result<Vec<u8>> {
    if rgb.len() != grid * grid || scale == 0 {
        return Err(Error::Invalid(format!(
            "{} patches do not fill a {grid}×{grid} grid at scale {scale}",
            rgb.len()
        )));
    }
    let side = grid * scale;
    let mut out = Vec::with_capacity(side * side * 3);
    for y in 0..side {
        for x in 0..side {
            out.extend_from_slice(&rgb[(y / scale) * grid + x / scale]);
        }
    }
    Ok(out)
}

/// Binary PPM (P6) with maxval 255.
pub fn write_ppm<W: Write>(mut w: W, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::Invalid(format!(
            "{} bytes for a {width}×{height} RGB image",
            rgb.len()
        )));
    }
    write!(w, "P6\n{width} {height}\n255\n")?;
    w.write_all(rgb)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn jacobi_on_a_known_matrix() {
        // Eigenvalues 3 and 1 with axes (1,1)/√2 and (1,−1)/√2.
        let (vals, vecs) = symmetric_eigen(&[2.0, 1.0, 1.0, 2.0], 2);
        assert!((vals[0] - 3.0).abs() < 1e-14 && (vals[1] - 1.0).abs() < 1e-14);
        assert!((vecs[0][0].abs() - 0.5f64.sqrt()).abs() < 1e-14);
        assert!((vecs[0][0] - vecs[0][1]).abs() < 1e-14);
    }

    #[test]
    fn uncorrelated_axes_are_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let base: Tensor<f64> = Tensor::randn(&[200, 3], 1.0, &mut rng);
        // Scale columns so that axis 2 dominates, then 0, then 1.
        let scales = [3.0, 1.0, 10.0];
        let data: Vec<f64> = base.data().chunks(3).flat_map(|r| (0..3).map(move |k| r[k] * scales[k])).collect();
        let x = Tensor::new(vec![200, 3], data).unwrap();
        let p = pca_rgb(&x).unwrap();
        for (c, axis) in p.components.iter().zip([2, 0, 1]) {
            assert!((c[axis].abs() - 1.0).abs() < 0.02, "{c:?}");
        }
    }

    #[test]
    fn outputs_span_the_byte_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Tensor<f32> = Tensor::randn(&[64, 16], 1.0, &mut rng);
        let p = pca_rgb(&x).unwrap();
        assert_eq!(p.rgb.len(), 64);
        for k in 0..3 {
            assert_eq!(p.rgb.iter().map(|c| c[k]).min(), Some(0));
            assert_eq!(p.rgb.iter().map(|c| c[k]).max(), Some(255));
            assert!(dot(&p.components[k], &p.components[k]) - 1.0 < 1e-12);
        }
    }

    #[test]
    fn rank_two_input_is_rejected() {
        let rows: Vec<f64> = (0..20)
            .flat_map(|i| {
                let (a, b) = (i as f64, ((i * 7) % 5) as f64);
                [a, b, a + b, 2.0 * a - b]
            })
            .collect();
        let x = Tensor::new(vec![20, 4], rows).unwrap();
        match pca_rgb(&x) {
            Err(Error::RankDeficient { rank, needed }) => assert_eq!((rank, needed), (2, 3)),
            other => panic!("{other:?}"),
        }
        let two = Tensor::<f64>::zeros(&[2, 5]);
        assert!(matches!(pca_rgb(&two), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn ppm_header_and_tile_layout() {
        let rgb = [[1, 2, 3], [4, 5, 6], [7, 8, 9], [10, 11, 12]];
        let tile = patch_tile(&rgb, 2, 2).unwrap();
        assert_eq!(&tile[..12], &[1, 2, 3, 1, 2, 3, 4, 5, 6, 4, 5, 6]);
        let mut buf = Vec::new();
        write_ppm(&mut buf, 4, 4, &tile).unwrap();
        assert!(buf.starts_with(b"P6\n4 4\n255\n"));
        assert_eq!(buf.len(), 11 + 48);
        assert!(write_ppm(&mut buf, 5, 4, &tile).is_err());
        assert!(patch_tile(&rgb, 3, 1).is_err());
    }
}
