use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// `B×C×H×W` images to `B×N×(C·p·p)` patch vectors, patches in row-major
/// order from the top-left, each vector laid out as (channel, row, col).
pub fn patchify<T: Element>(images: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::shape("patchify", &[s], "expected B×C×H×W"));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(
            "patchify",
            &[s],
            format!("image size not divisible by patch size {patch}"),
        ));
    }
    let (gh, gw) = (h / patch, w / patch);
    let pd = c * patch * patch;
    let x = images.data();
    let mut out = Vec::with_capacity(x.len());
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                for ci in 0..c {
                    for r in 0..patch {
                        let row = ((bi * c + ci) * h + py * patch + r) * w + px * patch;
                        out.extend_from_slice(&x[row..row + patch]);
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, gh * gw, pd], out))
}

/// Inverse of [`patchify`] for square images with `channels` channels.
pub fn unpatchify<T: Element>(patches: &Tensor<T>, patch: usize, channels: usize) -> Result<Tensor<T>> {
    let s = patches.shape();
    if s.len() != 3 || s[2] != channels * patch * patch {
        return Err(Error::shape("unpatchify", &[s], "expected B×N×(C·p·p)"));
    }
    let (b, n) = (s[0], s[1]);
    let g = (n as f64).sqrt().round() as usize;
    if g * g != n {
        return Err(Error::shape("unpatchify", &[s], "patch count is not a square"));
    }
    let side = g * patch;
    let mut out = vec![T::zero(); b * channels * side * side];
    let x = patches.data();
    let mut k = 0;
    for bi in 0..b {
        for py in 0..g {
            for px in 0..g {
                for ci in 0..channels {
                    for r in 0..patch {
                        let row = ((bi * channels + ci) * side + py * patch + r) * side + px * patch;
                        out[row..row + patch].copy_from_slice(&x[k..k + patch]);
                        k += patch;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, channels, side, side], out))
}
