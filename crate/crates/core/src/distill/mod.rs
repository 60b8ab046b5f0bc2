//! Distillation objectives and the training step.
//!
//! A frozen teacher encoder is run without gradients; its cls and patch
//! tokens become constants on the student's tape. All trainable tensors
//! (student, projection heads, optional classifier) share one [`ParamSet`]
//! under fixed prefixes so a single optimizer state covers them.

mod head;
mod loss;
mod mask;

use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use head::{HeadKind, ProjectionHead};
pub use loss::{
    loss_feat, loss_patch, loss_supervised_kd, loss_token, loss_total, weighted_sum, KdMode,
    KdTerms, LossBreakdown, LossMode, LossWeights,
};
pub use mask::{mask_count, sample_mask, MaskSpec};

use crate::autodiff::{Bindings, Tape, Var};
use crate::error::{Error, Result};
use crate::optim::{adamw_step, OptState, Schedule};
use crate::params::{GradMap, ParamSet};
use crate::tensor::{Element, Tensor};
use crate::vit::{self, ViTConfig};

pub const STUDENT: &str = "student.";
pub const HEAD_CLS: &str = "head.cls.";
pub const HEAD_FEAT: &str = "head.feat.";
pub const HEAD_PATCH: &str = "head.patch.";
pub const CLASSIFIER: &str = "classifier.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub mode: LossMode,
    /// Mix label cross-entropy into logit distillation.
    pub use_ce: bool,
    pub weights: LossWeights,
    pub head: HeadKind,
    pub mask_ratio: [f64; 2],
    /// Include the cls token in the feature objective.
    pub feat_with_cls: bool,
    /// Average the patch objective over every position instead of only
    /// the masked ones.
    pub patch_all_positions: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            mode: LossMode::Proteus,
            use_ce: false,
            weights: LossWeights::default(),
            head: HeadKind::LnLinear,
            mask_ratio: [0.1, 0.5],
            feat_with_cls: false,
            patch_all_positions: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let [lo, hi] = self.mask_ratio;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::config("mask_ratio", format!("need 0 < lo ≤ hi < 1, got [{lo}, {hi}]")));
        }
        let w = &self.weights;
        if self.mode == LossMode::Proteus && w.token + w.feat + w.patch == 0.0 {
            return Err(Error::config("weights", "at least one objective weight must be positive"));
        }
        Ok(())
    }
}

/// Labels for a batch, with a counter of how often they were read.
#[derive(Debug)]
pub struct Labels<'a> {
    values: Option<&'a [u16]>,
    reads: Cell<usize>,
}

impl<'a> Labels<'a> {
    pub fn new(values: Option<&'a [u16]>) -> Self {
        Labels {
            values,
            reads: Cell::new(0),
        }
    }

    pub fn none() -> Self {
        Self::new(None)
    }

    pub fn get(&self) -> Result<&'a [u16]> {
        self.reads.set(self.reads.get() + 1);
        self.values
            .ok_or_else(|| Error::Invalid("this objective needs labels but the batch has none".into()))
    }

    pub fn reads(&self) -> usize {
        self.reads.get()
    }
}

/// A fixed linear map from teacher cls tokens to class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherHead<T> {
    /// `d_teacher × K`
    pub weight: Tensor<T>,
    /// `K`
    pub bias: Tensor<T>,
}

impl<T: Element> TeacherHead<T> {
    pub fn classes(&self) -> usize {
        self.bias.numel()
    }

    pub fn logits(&self, cls: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::no_grad();
        let x = tape.constant(cls.clone());
        let w = tape.constant(self.weight.clone());
        let b = tape.constant(self.bias.clone());
        let y = tape.matmul(x, w)?;
        let y = tape.add(y, b)?;
        Ok(tape.value(y).clone())
    }
}

struct Heads {
    cls: ProjectionHead,
    feat: ProjectionHead,
    patch: ProjectionHead,
}

/// Owns a frozen teacher and the trainable student-side parameters.
pub struct Distiller<T> {
    teacher: ParamSet<T>,
    teacher_cfg: ViTConfig,
    student_cfg: ViTConfig,
    config: DistillConfig,
    heads: Heads,
    teacher_head: Option<TeacherHead<T>>,
    params: ParamSet<T>,
    opt: OptState<T>,
    check_finite: bool,
    deterministic: bool,
}

impl<T: Element> Distiller<T> {
    /// `teacher_head` is required for the logit modes and ignored otherwise.
    pub fn new(
        teacher: ParamSet<T>,
        teacher_cfg: ViTConfig,
        student: &ParamSet<T>,
        student_cfg: ViTConfig,
        config: DistillConfig,
        teacher_head: Option<TeacherHead<T>>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        teacher_cfg.validate()?;
        student_cfg.validate()?;
        for (field, t, s) in [
            ("patch_size", teacher_cfg.patch_size, student_cfg.patch_size),
            ("image_size", teacher_cfg.image_size, student_cfg.image_size),
            ("channels", teacher_cfg.channels, student_cfg.channels),
        ] {
            if t != s {
                return Err(Error::config(
                    field,
                    format!("teacher has {t} but student has {s}"),
                ));
            }
        }
        vit::check_params(&teacher, &teacher_cfg)?;
        vit::check_params(student, &student_cfg)?;
        let (ds, dt) = (student_cfg.dim, teacher_cfg.dim);
        let heads = Heads {
            cls: ProjectionHead::new(config.head, ds, dt, HEAD_CLS),
            feat: ProjectionHead::new(config.head, ds, dt, HEAD_FEAT),
            patch: ProjectionHead::new(config.head, ds, dt, HEAD_PATCH),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        params.extend_prefixed(STUDENT, student);
        let teacher_head = match config.mode {
            LossMode::Proteus => {
                let w = &config.weights;
                for (weight, h) in [(w.token, &heads.cls), (w.feat, &heads.feat), (w.patch, &heads.patch)] {
                    if weight > 0.0 {
                        for (n, t) in h.init::<T, _>(&mut rng).iter() {
                            params.insert(n, t.clone());
                        }
                    }
                }
                None
            }
            LossMode::SoftKd | LossMode::HardKd => {
                let th = teacher_head
                    .ok_or_else(|| Error::config("mode", "logit distillation needs a teacher head"))?;
                if th.weight.shape() != [dt, th.classes()] {
                    return Err(Error::shape(
                        "teacher_head",
                        &[th.weight.shape(), th.bias.shape()],
                        format!("expected {dt}×K weight"),
                    ));
                }
                let k = th.classes();
                params.insert(
                    format!("{CLASSIFIER}weight"),
                    Tensor::trunc_normal(&[ds, k], 0.02, 2.0, &mut rng),
                );
                params.insert(format!("{CLASSIFIER}bias"), Tensor::zeros(&[k]));
                Some(th)
            }
        };
        Ok(Distiller {
            teacher,
            teacher_cfg,
            student_cfg,
            config,
            heads,
            teacher_head,
            params,
            opt: OptState::new(),
            check_finite: false,
            deterministic: true,
        })
    }

    /// Rejects non-finite forward values and gradients.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    /// Deterministic mode keeps every kernel's reduction order independent
    /// of the thread count.
    pub fn with_determinism(mut self, on: bool) -> Self {
        self.deterministic = on;
        self
    }

    pub fn config(&self) -> &DistillConfig {
        &self.config
    }

    pub fn teacher(&self) -> &ParamSet<T> {
        &self.teacher
    }

    pub fn student_config(&self) -> &ViTConfig {
        &self.student_cfg
    }

    /// Every trainable tensor, prefixed.
    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Student encoder weights without heads or classifier.
    pub fn student(&self) -> ParamSet<T> {
        self.params.extract_prefixed(STUDENT)
    }

    pub fn opt_state(&self) -> &OptState<T> {
        &self.opt
    }

    pub fn set_opt_state(&mut self, opt: OptState<T>) {
        self.opt = opt;
    }

    /// Sets every projection head to its identity map.
    pub fn set_identity_heads(&mut self) {
        for h in [&self.heads.cls, &self.heads.feat, &self.heads.patch] {
            if self.params.contains(&format!("{}linear.weight", h.prefix)) {
                for (n, t) in h.identity::<T>().iter() {
                    self.params.insert(n, t.clone());
                }
            }
        }
    }

    fn tape(&self, grad: bool) -> Tape<T> {
        let t = if grad { Tape::new() } else { Tape::no_grad() };
        t.with_finite_checks(self.check_finite)
            .with_determinism(self.deterministic)
    }

    fn build<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        images: &Tensor<T>,
        labels: &Labels,
        rng: &mut R,
    ) -> Result<(Var, LossBreakdown)> {
        let bind = tape.register(&self.params, tape.grad_enabled());
        let teacher = vit::encode(&self.teacher, &self.teacher_cfg, images, None)?;
        let out = vit::forward(tape, &bind, STUDENT, &self.student_cfg, images, None)?;
        let value = |tape: &Tape<T>, v: Var| tape.value(v).item().f64();
        let mut parts = LossBreakdown::default();
        let total = match self.config.mode {
            LossMode::Proteus => {
                let w = self.config.weights;
                let mut terms = Vec::new();
                if w.token > 0.0 {
                    let t = tape.constant(teacher.cls.clone());
                    let l = loss_token(tape, &bind, &self.heads.cls, out.cls, t)?;
                    parts.token = value(tape, l);
                    terms.push((w.token, l));
                }
                if w.feat > 0.0 {
                    let l = self.feat_term(tape, &bind, out.cls, out.patches, &teacher)?;
                    parts.feat = value(tape, l);
                    terms.push((w.feat, l));
                }
                if w.patch > 0.0 {
                    let b = images.shape()[0];
                    let mask =
                        sample_mask(b, self.student_cfg.num_patches(), self.config.mask_ratio, rng)?;
                    let masked =
                        vit::forward(tape, &bind, STUDENT, &self.student_cfg, images, Some(&mask))?;
                    let t = tape.constant(teacher.patches.clone());
                    let l = loss_patch(
                        tape,
                        &bind,
                        &self.heads.patch,
                        masked.patches,
                        t,
                        &mask,
                        !self.config.patch_all_positions,
                    )?;
                    parts.patch = value(tape, l);
                    terms.push((w.patch, l));
                }
                weighted_sum(tape, &terms)?
            }
            LossMode::SoftKd | LossMode::HardKd => {
                let th = self.teacher_head.as_ref().expect("checked in new");
                let w = bind.get(&format!("{CLASSIFIER}weight"))?;
                let bias = bind.get(&format!("{CLASSIFIER}bias"))?;
                let z = tape.matmul(out.cls, w)?;
                let z = tape.add(z, bias)?;
                let teacher_logits = th.logits(&teacher.cls)?;
                let kd = if self.config.mode == LossMode::HardKd {
                    KdMode::Hard
                } else {
                    KdMode::Soft
                };
                let y: Option<Vec<usize>> = if self.config.use_ce {
                    Some(labels.get()?.iter().map(|&l| usize::from(l)).collect())
                } else {
                    None
                };
                let terms = loss_supervised_kd(
                    tape,
                    z,
                    &teacher_logits,
                    y.as_deref(),
                    kd,
                    self.config.use_ce,
                    self.config.weights.lambda,
                )?;
                parts.kl = value(tape, terms.kl);
                if let Some(ce) = terms.ce {
                    parts.ce = value(tape, ce);
                }
                terms.total
            }
        };
        parts.total = value(tape, total);
        Ok((total, parts))
    }

    fn feat_term(
        &self,
        tape: &mut Tape<T>,
        bind: &Bindings,
        cls: Var,
        patches: Var,
        teacher: &vit::Features<T>,
    ) -> Result<Var> {
        if !self.config.feat_with_cls {
            let t = tape.constant(teacher.patches.clone());
            return loss_feat(tape, bind, &self.heads.feat, patches, t);
        }
        let (b, ds, dt) = (teacher.cls.shape()[0], self.student_cfg.dim, self.teacher_cfg.dim);
        let c = tape.reshape(cls, &[b, 1, ds])?;
        let s = tape.concat(&[c, patches], 1)?;
        let tc = tape.constant(teacher.cls.reshape(&[b, 1, dt])?);
        let tp = tape.constant(teacher.patches.clone());
        let t = tape.concat(&[tc, tp], 1)?;
        loss_feat(tape, bind, &self.heads.feat, s, t)
    }

    /// Loss values without an update.
    pub fn evaluate<R: Rng + ?Sized>(
        &self,
        images: &Tensor<T>,
        labels: &Labels,
        rng: &mut R,
    ) -> Result<LossBreakdown> {
        let mut tape = self.tape(false);
        Ok(self.build(&mut tape, images, labels, rng)?.1)
    }

    /// Loss values and gradients for every trainable tensor.
    pub fn gradients<R: Rng + ?Sized>(
        &self,
        images: &Tensor<T>,
        labels: &Labels,
        rng: &mut R,
    ) -> Result<(LossBreakdown, GradMap<T>)> {
        let mut tape = self.tape(true);
        let (total, parts) = self.build(&mut tape, images, labels, rng)?;
        Ok((parts, tape.backward(total)?))
    }

    /// One optimizer step on a batch of images (`B×C×H×W`).
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        images: &Tensor<T>,
        labels: &Labels,
        schedule: &Schedule,
        rng: &mut R,
    ) -> Result<LossBreakdown> {
        let (parts, grads) = self.gradients(images, labels, rng)?;
        adamw_step(&mut self.params, &grads, &mut self.opt, schedule, self.check_finite)?;
        Ok(parts)
    }
}

/// Free-function form of [`Distiller::step`].
pub fn distill_step<T: Element, R: Rng + ?Sized>(
    distiller: &mut Distiller<T>,
    images: &Tensor<T>,
    labels: &Labels,
    schedule: &Schedule,
    rng: &mut R,
) -> Result<LossBreakdown> {
    distiller.step(images, labels, schedule, rng)
}
