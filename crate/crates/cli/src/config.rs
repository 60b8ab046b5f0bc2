//! Run configuration: one JSON document per run, defaults materialised on
//! write so `config.json` alone reproduces the run.

use std::path::{Path, PathBuf};

use proteus_core::data::{AugRecipe, NormStats};
use proteus_core::distill::DistillConfig;
use proteus_core::eval::SgdProbeConfig;
use proteus_core::optim::Schedule;
use proteus_core::vit::ViTConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    TrainTeacher,
    #[default]
    Distill,
    Probe,
    MakeDataset,
    Visualize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentInit {
    #[default]
    Fresh,
    /// Uniform layer/channel selection from the teacher.
    Inherit,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMethod {
    #[default]
    Lbfgs,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSettings {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub method: ProbeMethod,
    /// Defaults to the model's own `layers_for_probe`.
    pub layers_for_probe: Option<usize>,
    /// Share of the train split held out for selecting the regulariser.
    pub val_fraction: f64,
    pub max_iter: usize,
    pub sgd: SgdProbeConfig,
    pub batch_size: usize,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings {
            train: None,
            test: None,
            method: ProbeMethod::Lbfgs,
            layers_for_probe: None,
            val_fraction: 0.2,
            max_iter: 500,
            sgd: SgdProbeConfig::default(),
            batch_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    /// Fixed reduction order and no wall-clock values in `metrics.csv`.
    pub deterministic: bool,
    /// Reject non-finite activations and gradients.
    pub debug: bool,
    pub precision: Precision,
    pub output_dir: PathBuf,
    /// Training images: labelled for teacher training, any proxy set for
    /// distillation.
    pub dataset: Option<PathBuf>,
    /// The model being trained (teacher or student).
    pub model: ViTConfig,
    pub teacher: Option<PathBuf>,
    /// Labelled images on which the teacher classifier is fitted for the
    /// logit-distillation modes.
    pub teacher_head_data: Option<PathBuf>,
    pub student_init: StudentInit,
    pub distill: DistillConfig,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub augment: AugRecipe,
    /// Input normalisation; computed from `dataset` when absent.
    pub norm: Option<NormStats>,
    /// Metrics row every this many steps (the last step is always logged).
    pub log_every: u64,
    pub probe: ProbeSettings,
}

pub fn default_model() -> ViTConfig {
    let mut c = ViTConfig::new(16, 4, 3, 32, 2, 2);
    c.layers_for_probe = 2;
    c
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::default(),
            seed: 0,
            deterministic: true,
            debug: false,
            precision: Precision::F32,
            output_dir: PathBuf::from("runs/out"),
            dataset: None,
            model: default_model(),
            teacher: None,
            teacher_head_data: None,
            student_init: StudentInit::Fresh,
            distill: DistillConfig::default(),
            schedule: Schedule::default(),
            batch_size: 32,
            augment: AugRecipe::default(),
            norm: None,
            log_every: 1,
            probe: ProbeSettings::default(),
        }
    }
}

fn cfg_err(field: &str, reason: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {reason}"))
}

fn require_file(field: &str, p: &Option<PathBuf>) -> Result<(), CliError> {
    match p {
        None => Err(cfg_err(field, "required")),
        Some(p) if !p.is_file() => Err(cfg_err(field, format!("{} does not exist", p.display()))),
        Some(_) => Ok(()),
    }
}

fn optional_file(field: &str, p: &Option<PathBuf>) -> Result<(), CliError> {
    if p.is_some() {
        require_file(field, p)?;
    }
    Ok(())
}

fn core_cfg(prefix: &str, e: proteus_core::Error) -> CliError {
    match e {
        proteus_core::Error::Config { field, reason } => cfg_err(&format!("{prefix}{field}"), reason),
        other => cfg_err(prefix.trim_end_matches('.'), other),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| cfg_err("config", format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| cfg_err("config", e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises") + "\n"
    }

    /// Checks everything the run for `self.mode` needs, naming the first
    /// offending field.
    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(|e| core_cfg("model.", e))?;
        if self.model.layers_for_probe == 0 || self.model.layers_for_probe > self.model.depth {
            return Err(cfg_err("model.layers_for_probe", "must lie in 1..=depth"));
        }
        match self.mode {
            Mode::TrainTeacher | Mode::Distill => {
                require_file("dataset", &self.dataset)?;
                self.schedule.validate().map_err(|e| core_cfg("schedule.", e))?;
                self.augment.validate().map_err(|e| core_cfg("augment.", e))?;
                if self.augment.output_size != self.model.image_size {
                    return Err(cfg_err(
                        "augment.output_size",
                        format!("must equal model.image_size ({})", self.model.image_size),
                    ));
                }
                if self.batch_size == 0 {
                    return Err(cfg_err("batch_size", "must be positive"));
                }
                if self.log_every == 0 {
                    return Err(cfg_err("log_every", "must be positive"));
                }
            }
            _ => {}
        }
        if self.mode == Mode::Distill {
            require_file("teacher", &self.teacher)?;
            self.distill.validate().map_err(|e| core_cfg("distill.", e))?;
            if self.distill.mode != proteus_core::distill::LossMode::Proteus {
                require_file("teacher_head_data", &self.teacher_head_data)?;
            } else {
                optional_file("teacher_head_data", &self.teacher_head_data)?;
            }
        }
        if self.mode == Mode::Probe {
            require_file("probe.train", &self.probe.train)?;
        }
        optional_file("probe.test", &self.probe.test)?;
        if let Some(l) = self.probe.layers_for_probe {
            if l == 0 || l > self.model.depth {
                return Err(cfg_err("probe.layers_for_probe", "must lie in 1..=depth"));
            }
        }
        if !(self.probe.val_fraction > 0.0 && self.probe.val_fraction < 1.0) {
            return Err(cfg_err("probe.val_fraction", "must lie in (0, 1)"));
        }
        if let Some(n) = &self.norm {
            if n.mean.len() != self.model.channels || n.std.len() != self.model.channels {
                return Err(cfg_err("norm", "needs one mean and std per channel"));
            }
            if n.std.iter().any(|s| !(*s > 0.0)) {
                return Err(cfg_err("norm.std", "must be positive"));
            }
        }
        Ok(())
    }
}
