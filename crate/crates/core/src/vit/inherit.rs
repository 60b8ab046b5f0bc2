//! Initialising a smaller student from uniformly selected teacher weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{init_tensor, ViTConfig};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{strides, Element, Tensor};

/// Evenly spaced block indices; the first and last teacher blocks are
/// always selected when the student has at least two blocks.
pub fn select_layers(teacher_depth: usize, student_depth: usize) -> Vec<usize> {
    if student_depth <= 1 {
        return vec![0; student_depth];
    }
    let span = teacher_depth - 1;
    let gaps = student_depth - 1;
    (0..student_depth)
        .map(|i| (i * span + gaps / 2) / gaps)
        .collect()
}

/// Channel indices `0, s, 2s, …` with stride `s = ⌊teacher / student⌋`.
pub fn select_channels(teacher: usize, student: usize) -> Vec<usize> {
    let stride = teacher / student;
    (0..student).map(|i| i * stride).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum InheritSource {
    Copied { from: String },
    Selected { from: String },
    FreshInit { reason: String },
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct InheritReport {
    pub layers: Vec<usize>,
    pub tensors: Vec<(String, InheritSource)>,
}

impl InheritReport {
    pub fn fresh(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().filter_map(|(n, s)| match s {
            InheritSource::FreshInit { .. } => Some(n.as_str()),
            _ => None,
        })
    }
}

fn select_axes<T: Element>(t: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    let src_strides = strides(t.shape());
    let picks: Vec<Vec<usize>> = t
        .shape()
        .iter()
        .zip(target)
        .map(|(&from, &to)| select_channels(from, to))
        .collect();
    let n: usize = target.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; target.len()];
    for _ in 0..n {
        let off: usize = idx
            .iter()
            .enumerate()
            .map(|(d, &i)| picks[d][i] * src_strides[d])
            .sum();
        data.push(t.data()[off]);
        for d in (0..target.len()).rev() {
            idx[d] += 1;
            if idx[d] < target[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::from_parts(target.to_vec(), data)
}

/// Builds student parameters by uniform selection from `teacher`.
/// Tensors whose shapes cannot be matched (positional embeddings of a
/// different length) are freshly initialised from `seed` and reported.
pub fn weight_inherit<T: Element>(
    teacher: &ParamSet<T>,
    teacher_cfg: &ViTConfig,
    student_cfg: &ViTConfig,
    seed: u64,
) -> Result<(ParamSet<T>, InheritReport)> {
    teacher_cfg.validate()?;
    student_cfg.validate()?;
    if student_cfg.patch_size != teacher_cfg.patch_size {
        return Err(Error::config("patch_size", "student and teacher must share a patch size"));
    }
    if student_cfg.channels != teacher_cfg.channels {
        return Err(Error::config("channels", "student and teacher must share channel count"));
    }
    for (field, s, t) in [
        ("depth", student_cfg.depth, teacher_cfg.depth),
        ("dim", student_cfg.dim, teacher_cfg.dim),
        ("mlp_ratio", student_cfg.mlp_hidden(), teacher_cfg.mlp_hidden()),
    ] {
        if s > t {
            return Err(Error::config(
                field,
                format!("student ({s}) larger than teacher ({t})"),
            ));
        }
    }
    let layers = select_layers(teacher_cfg.depth, student_cfg.depth);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ParamSet::new();
    let mut report = InheritReport {
        layers: layers.clone(),
        tensors: Vec::new(),
    };
    for (name, shape) in student_cfg.param_shapes() {
        let source = match name.strip_prefix("blocks.") {
            Some(rest) => {
                let (idx, tail) = rest.split_once('.').expect("block parameter name");
                let i: usize = idx.parse().expect("block index");
                format!("blocks.{}.{tail}", layers[i])
            }
            None => name.clone(),
        };
        let t = teacher.get(&source)?;
        // Drawn for every tensor so the fresh-init stream is name-stable.
        let fresh = init_tensor::<T>(&name, &shape, &mut rng);
        let (tensor, how) = if t.shape() == shape.as_slice() {
            (t.clone(), InheritSource::Copied { from: source })
        } else if name == "pos_embed" {
            let reason = format!("length {} vs teacher {}", shape[0], t.shape()[0]);
            (fresh, InheritSource::FreshInit { reason })
        } else if t.ndim() == shape.len() && t.shape().iter().zip(&shape).all(|(a, b)| a >= b) {
            (select_axes(t, &shape), InheritSource::Selected { from: source })
        } else {
            return Err(Error::shape(
                "weight_inherit",
                &[t.shape(), &shape],
                format!("student `{name}` larger than teacher"),
            ));
        };
        out.insert(name.clone(), tensor);
        report.tensors.push((name, how));
    }
    Ok((out, report))
}
