use serde::{Deserialize, Serialize};

use super::head::ProjectionHead;
use super::mask::MaskSpec;
use crate::autodiff::{softmax_rows, Bindings, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub token: f64,
    pub feat: f64,
    pub patch: f64,
    /// Balance between the label and teacher terms of logit distillation.
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            token: 1.0,
            feat: 1.0,
            patch: 1.0,
            lambda: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (field, w) in [
            ("weights.token", self.token),
            ("weights.feat", self.feat),
            ("weights.patch", self.patch),
            ("weights.lambda", self.lambda),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::config(field, format!("must be finite and ≥ 0, got {w}")));
            }
        }
        if self.lambda > 1.0 {
            return Err(Error::config("weights.lambda", "must not exceed 1"));
        }
        Ok(())
    }
}

/// Which family of objectives a run optimises.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Token, feature and masked-patch matching before any classifier.
    #[default]
    Proteus,
    /// KL between teacher and student class distributions.
    SoftKd,
    /// Cross-entropy against the teacher's argmax class.
    HardKd,
}

/// Scalar values of every objective for one step. Inactive terms are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub token: f64,
    pub feat: f64,
    pub patch: f64,
    pub ce: f64,
    pub kl: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// The total implied by the components under `mode`.
    pub fn expected_total(&self, mode: LossMode, use_ce: bool, w: &LossWeights) -> f64 {
        match mode {
            LossMode::Proteus => w.token * self.token + w.feat * self.feat + w.patch * self.patch,
            _ if use_ce => (1.0 - w.lambda) * self.ce + w.lambda * self.kl,
            _ => self.kl,
        }
    }
}

/// Fills in `total` as the weighted sum of the token, feature and patch
/// components.
pub fn loss_total(components: LossBreakdown, w: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        total: components.expected_total(LossMode::Proteus, false, w),
        ..components
    }
}

/// `Σ wᵢ·xᵢ` on the tape, skipping zero weights. At least one weight must be
/// non-zero.
pub fn weighted_sum<T: Element>(tape: &mut Tape<T>, terms: &[(f64, Var)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(w, v) in terms {
        if w == 0.0 {
            continue;
        }
        let t = if w == 1.0 { v } else { tape.scale(v, w)? };
        acc = Some(match acc {
            Some(a) => tape.add(a, t)?,
            None => t,
        });
    }
    acc.ok_or_else(|| Error::config("weights", "all objective weights are zero"))
}

/// Mean squared difference between projected student cls tokens (`B×d_s`)
/// and teacher cls tokens (`B×d_t`).
pub fn loss_token<T: Element>(
    tape: &mut Tape<T>,
    bind: &Bindings,
    head: &ProjectionHead,
    student_cls: Var,
    teacher_cls: Var,
) -> Result<Var> {
    let p = head.project(tape, bind, student_cls)?;
    tape.mse(p, teacher_cls)
}

/// As [`loss_token`] over a token sequence (`B×N×d`).
pub fn loss_feat<T: Element>(
    tape: &mut Tape<T>,
    bind: &Bindings,
    head: &ProjectionHead,
    student_tokens: Var,
    teacher_tokens: Var,
) -> Result<Var> {
    let p = head.project(tape, bind, student_tokens)?;
    tape.mse(p, teacher_tokens)
}

/// Patch-recovery loss. With `masked_only` the squared error is averaged
/// over channels and masked positions of each sample, then over the batch;
/// unmasked student positions never enter the graph. Otherwise it is a
/// plain mean over all positions.
pub fn loss_patch<T: Element>(
    tape: &mut Tape<T>,
    bind: &Bindings,
    head: &ProjectionHead,
    student_patches: Var,
    teacher_patches: Var,
    mask: &MaskSpec,
    masked_only: bool,
) -> Result<Var> {
    let ss = tape.shape(student_patches).to_vec();
    let ts = tape.shape(teacher_patches).to_vec();
    let (b, n) = (mask.batch(), mask.num_patches());
    if ss.len() != 3 || ts.len() != 3 || ss[..2] != [b, n] || ts[..2] != [b, n] {
        return Err(Error::shape(
            "loss_patch",
            &[&ss, &ts, &[b, n]],
            "patch tensors must be batch × num_patches × dim matching the mask",
        ));
    }
    if let Some(empty) = (0..b).find(|&i| mask.count(i) == 0) {
        return Err(Error::Invalid(format!("loss_patch: sample {empty} has no masked patch")));
    }
    if !masked_only {
        return loss_feat(tape, bind, head, student_patches, teacher_patches);
    }
    let (ds, dt) = (ss[2], ts[2]);
    let mut rows = Vec::with_capacity(mask.total_masked());
    let mut weights = Vec::with_capacity(mask.total_masked());
    for i in 0..b {
        let c = mask.count(i);
        for j in mask.masked_indices(i) {
            rows.push(i * n + j);
            weights.push(T::of(1.0 / (c * dt * b) as f64));
        }
    }
    let m = rows.len();
    let s = tape.reshape(student_patches, &[b * n, ds])?;
    let s = tape.gather_rows(s, 0, &rows)?;
    let s = head.project(tape, bind, s)?;
    let t = tape.reshape(teacher_patches, &[b * n, dt])?;
    let t = tape.gather_rows(t, 0, &rows)?;
    let d = tape.sub(s, t)?;
    let sq = tape.mul(d, d)?;
    let per_row = tape.sum(sq, &[1])?;
    let w = tape.constant(Tensor::from_parts(vec![m], weights));
    let weighted = tape.mul(per_row, w)?;
    tape.sum_all(weighted)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdMode {
    Hard,
    Soft,
}

/// Graph handles of a logit-distillation loss.
#[derive(Clone, Copy, Debug)]
pub struct KdTerms {
    pub total: Var,
    pub ce: Option<Var>,
    pub kl: Var,
}

/// Conventional logit distillation: the teacher term is CE against the
/// teacher argmax (`Hard`) or KL from the teacher distribution (`Soft`);
/// with `use_ce` it is mixed with label CE as `(1−λ)·CE + λ·teacher`.
pub fn loss_supervised_kd<T: Element>(
    tape: &mut Tape<T>,
    student_logits: Var,
    teacher_logits: &Tensor<T>,
    labels: Option<&[usize]>,
    mode: KdMode,
    use_ce: bool,
    lambda: f64,
) -> Result<KdTerms> {
    let ss = tape.shape(student_logits).to_vec();
    if ss.len() != 2 || ss != teacher_logits.shape() {
        return Err(Error::shape(
            "loss_supervised_kd",
            &[&ss, teacher_logits.shape()],
            "student and teacher must produce B×K logits over the same classes",
        ));
    }
    let k = ss[1];
    let kl = match mode {
        KdMode::Hard => {
            let targets: Vec<usize> = teacher_logits
                .data()
                .chunks(k)
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .fold((0, row[0]), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                        .0
                })
                .collect();
            tape.cross_entropy(student_logits, &targets)?
        }
        KdMode::Soft => {
            let p = tape.constant(softmax_rows(teacher_logits));
            tape.kl_div(student_logits, p)?
        }
    };
    if !use_ce {
        return Ok(KdTerms {
            total: kl,
            ce: None,
            kl,
        });
    }
    let labels = labels.ok_or_else(|| Error::Invalid("label CE requested without labels".into()))?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Invalid(format!("label {bad} out of range for {k} classes")));
    }
    let ce = tape.cross_entropy(student_logits, labels)?;
    let a = tape.scale(ce, 1.0 - lambda)?;
    let bterm = tape.scale(kl, lambda)?;
    let total = tape.add(a, bterm)?;
    Ok(KdTerms {
        total,
        ce: Some(ce),
        kl,
    })
}
