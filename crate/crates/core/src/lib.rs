//! Task-agnostic distillation of vision-transformer teachers into smaller
//! students.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: dense tensors with a reverse-mode tape.
//! - [`vit`]: the encoder used as both teacher and student, plus the
//!   `PRTC` checkpoint format.
//! - [`distill`]: projection heads, patch masking, the token / feature /
//!   patch objectives and the logit-distillation baselines.
//! - [`optim`]: AdamW with warmup + cosine decay.
//! - [`data`]: the `PXDS` image container and proxy-dataset builders.
//! - [`eval`]: frozen-feature probes and PCA visualisation.

pub mod autodiff;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use params::{GradMap, ParamSet};
pub use tensor::{Element, Tensor};
