//! The training, probing and visualisation runs behind each subcommand.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use proteus_core::autodiff::Tape;
use proteus_core::data::{
    batch_labels, epoch_batches, load_container, make_batch, DatasetContainer, NormStats, View,
};
use proteus_core::distill::{Distiller, Labels, LossBreakdown, LossMode, TeacherHead};
use proteus_core::eval::{
    extract_features, fit_logreg, patch_tile, pca_rgb, probe_lbfgs, probe_sgd, split_train_val,
    write_ppm, FeatureMatrix, ProbeResult,
};
use proteus_core::optim::{adamw_step, lr_at, OptState};
use proteus_core::vit::{
    encode, init_params, load_checkpoint, save_checkpoint, weight_inherit, Checkpoint, ViTConfig,
};
use proteus_core::{Element, ParamSet, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{Precision, ProbeMethod, RunConfig, StudentInit};
use crate::metrics::{MetricsRow, MetricsWriter};
use crate::CliError;

const BACKBONE: &str = "backbone.";
const CLASSIFIER: &str = "classifier.";

/// What a finished training run reports back to presets.
#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub output_dir: PathBuf,
    pub steps: u64,
    pub first: LossBreakdown,
    pub last: LossBreakdown,
    /// Mean losses per epoch, in epoch order.
    pub epoch_means: Vec<LossBreakdown>,
    /// Largest `|total − weighted sum of components|` over every step.
    pub max_total_mismatch: f64,
}

pub fn load_dataset(field: &str, path: &Path) -> Result<DatasetContainer, CliError> {
    load_container(path).map_err(|e| CliError::Run(format!("{field} {}: {e}", path.display())))
}

/// Loads a checkpoint; unreadable or malformed files map to the corrupt
/// checkpoint exit status.
pub fn read_checkpoint_file(path: &Path) -> Result<Checkpoint, CliError> {
    use proteus_core::Error as E;
    load_checkpoint(path).map_err(|e| match e {
        E::Io(ref io) if io.kind() == std::io::ErrorKind::NotFound => {
            CliError::Config(format!("checkpoint: {} does not exist", path.display()))
        }
        e => CliError::Corrupt(format!("{}: {e}", path.display())),
    })
}

/// The resolved normalisation, falling back to the checkpoint's sibling
/// `config.json`, then to statistics of `ds`.
pub fn resolve_norm(explicit: Option<&NormStats>, checkpoint: Option<&Path>, ds: &DatasetContainer) -> NormStats {
    if let Some(n) = explicit {
        return n.clone();
    }
    if let Some(sib) = checkpoint.and_then(Path::parent).map(|d| d.join("config.json")) {
        if let Ok(c) = RunConfig::load(&sib) {
            if let Some(n) = c.norm {
                return n;
            }
        }
    }
    ds.channel_stats()
}

fn prepare_output(cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("config.json"), cfg.to_json())?;
    Ok(())
}

/// Per-batch augmentation seed: distinct for every step of a run.
fn batch_seed(seed: u64, step: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

struct Logger {
    metrics: MetricsWriter,
    timing: Option<csv::Writer<fs::File>>,
    every: u64,
    total: u64,
    deterministic: bool,
    started: Instant,
    summary: TrainSummary,
    epoch_sum: (LossBreakdown, u64, u64),
}

fn add(a: &LossBreakdown, b: &LossBreakdown, s: f64) -> LossBreakdown {
    LossBreakdown {
        token: a.token + s * b.token,
        feat: a.feat + s * b.feat,
        patch: a.patch + s * b.patch,
        ce: a.ce + s * b.ce,
        kl: a.kl + s * b.kl,
        total: a.total + s * b.total,
    }
}

impl Logger {
    fn new(cfg: &RunConfig) -> Result<Self, CliError> {
        let dir = &cfg.output_dir;
        let timing = if cfg.deterministic {
            let mut w = csv::Writer::from_path(dir.join("timing.csv")).map_err(|e| CliError::Run(e.to_string()))?;
            w.write_record(["step", "wall_ms"]).map_err(|e| CliError::Run(e.to_string()))?;
            Some(w)
        } else {
            None
        };
        Ok(Logger {
            metrics: MetricsWriter::create(&dir.join("metrics.csv"))?,
            timing,
            every: cfg.log_every,
            total: cfg.schedule.total_steps,
            deterministic: cfg.deterministic,
            started: Instant::now(),
            summary: TrainSummary {
                output_dir: dir.clone(),
                steps: 0,
                first: LossBreakdown::default(),
                last: LossBreakdown::default(),
                epoch_means: Vec::new(),
                max_total_mismatch: 0.0,
            },
            epoch_sum: (LossBreakdown::default(), 0, 0),
        })
    }

    fn record(&mut self, step: u64, epoch: u64, lr: f64, l: &LossBreakdown, expected_total: f64) -> Result<(), CliError> {
        let s = &mut self.summary;
        if step == 0 {
            s.first = *l;
        }
        s.last = *l;
        s.steps = step + 1;
        s.max_total_mismatch = s.max_total_mismatch.max((l.total - expected_total).abs());
        if self.epoch_sum.2 != epoch {
            self.close_epoch();
            self.epoch_sum.2 = epoch;
        }
        self.epoch_sum.0 = add(&self.epoch_sum.0, l, 1.0);
        self.epoch_sum.1 += 1;
        if step % self.every == 0 || step + 1 == self.total {
            let ms = self.started.elapsed().as_millis() as u64;
            let logged_ms = if self.deterministic { 0 } else { ms };
            self.metrics
                .write(&MetricsRow::new(step, epoch, lr, l, logged_ms))
                .map_err(|e| CliError::Run(e.to_string()))?;
            if let Some(t) = &mut self.timing {
                t.write_record([step.to_string(), ms.to_string()])
                    .map_err(|e| CliError::Run(e.to_string()))?;
            }
        }
        Ok(())
    }

    fn close_epoch(&mut self) {
        let (sum, n, _) = &self.epoch_sum;
        if *n > 0 {
            let mean = add(&LossBreakdown::default(), sum, 1.0 / *n as f64);
            self.summary.epoch_means.push(mean);
        }
        self.epoch_sum = (LossBreakdown::default(), 0, self.epoch_sum.2);
    }

    fn finish(mut self) -> Result<TrainSummary, CliError> {
        self.close_epoch();
        self.metrics.finish()?;
        if let Some(mut t) = self.timing {
            t.flush()?;
        }
        fs::write(
            self.summary.output_dir.join("summary.json"),
            serde_json::to_string_pretty(&self.summary).expect("summary serialises") + "\n",
        )?;
        Ok(self.summary)
    }
}

/// Runs `step` over shuffled epochs until the schedule's step budget is
/// spent. `step` receives the images, labels and step index.
fn train_loop<T: Element>(
    cfg: &RunConfig,
    ds: &DatasetContainer,
    stats: &NormStats,
    expected_total: impl Fn(&LossBreakdown) -> f64,
    mut step: impl FnMut(&Tensor<T>, Option<&[u16]>, u64) -> proteus_core::Result<LossBreakdown>,
) -> Result<TrainSummary, CliError> {
    let mut log = Logger::new(cfg)?;
    let total = cfg.schedule.total_steps;
    let mut s = 0u64;
    let mut epoch = 0u64;
    while s < total {
        for idx in epoch_batches(ds.len(), cfg.batch_size, cfg.seed, epoch) {
            if s == total {
                break;
            }
            let images = make_batch::<T>(ds, &idx, View::Train(&cfg.augment), stats, batch_seed(cfg.seed, s))?;
            let labels = batch_labels(ds, &idx);
            let lr = lr_at(s, &cfg.schedule)?;
            let l = step(&images, labels.as_deref(), s)?;
            log.record(s, epoch, lr, &l, expected_total(&l))?;
            s += 1;
        }
        epoch += 1;
    }
    log.finish()
}

fn save_model<T: Element>(cfg: &RunConfig, model: &ViTConfig, params: &ParamSet<T>) -> Result<(), CliError> {
    let ck = Checkpoint {
        config: model.clone(),
        params: params.cast(),
        opt_state: None,
    };
    save_checkpoint(cfg.output_dir.join("checkpoint.prtc"), &ck)?;
    Ok(())
}

fn with_norm(cfg: &RunConfig, ds: &DatasetContainer) -> RunConfig {
    let mut c = cfg.clone();
    if c.norm.is_none() {
        c.norm = Some(ds.channel_stats());
    }
    c
}

/// Supervised training of an encoder plus a linear classifier on its cls
/// token. The checkpoint keeps the encoder only.
pub fn train_teacher(cfg: &RunConfig) -> Result<TrainSummary, CliError> {
    cfg.validate()?;
    let ds = load_dataset("dataset", cfg.dataset.as_ref().expect("validated"))?;
    let classes = usize::from(ds.class_count());
    if ds.labels().is_none() || classes < 2 {
        return Err(CliError::Config("dataset: teacher training needs at least two labelled classes".into()));
    }
    check_geometry(&cfg.model, &ds)?;
    let cfg = with_norm(cfg, &ds);
    prepare_output(&cfg)?;
    match cfg.precision {
        Precision::F32 => train_teacher_impl::<f32>(&cfg, &ds, classes),
        Precision::F64 => train_teacher_impl::<f64>(&cfg, &ds, classes),
    }
}

fn check_geometry(model: &ViTConfig, ds: &DatasetContainer) -> Result<(), CliError> {
    if ds.channels() != model.channels {
        return Err(CliError::Config(format!(
            "model.channels: {} but the dataset has {}",
            model.channels,
            ds.channels()
        )));
    }
    Ok(())
}

fn train_teacher_impl<T: Element>(cfg: &RunConfig, ds: &DatasetContainer, classes: usize) -> Result<TrainSummary, CliError> {
    let stats = cfg.norm.clone().expect("resolved");
    let mut params = ParamSet::new();
    params.extend_prefixed(BACKBONE, &init_params::<T>(&cfg.model, cfg.seed)?);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    params.insert(
        format!("{CLASSIFIER}weight"),
        Tensor::trunc_normal(&[cfg.model.dim, classes], 0.02, 2.0, &mut rng),
    );
    params.insert(format!("{CLASSIFIER}bias"), Tensor::zeros(&[classes]));
    let mut opt = OptState::new();
    let summary = train_loop::<T>(cfg, ds, &stats, |l| l.ce, |images, labels, _| {
        let y: Vec<usize> = labels.expect("labelled").iter().map(|&l| usize::from(l)).collect();
        let mut tape = Tape::new()
            .with_finite_checks(cfg.debug)
            .with_determinism(cfg.deterministic);
        let bind = tape.register(&params, true);
        let out = proteus_core::vit::forward(&mut tape, &bind, BACKBONE, &cfg.model, images, None)?;
        let z = tape.matmul(out.cls, bind.get(&format!("{CLASSIFIER}weight"))?)?;
        let z = tape.add(z, bind.get(&format!("{CLASSIFIER}bias"))?)?;
        let loss = tape.cross_entropy(z, &y)?;
        let value = tape.value(loss).item().f64();
        let grads = tape.backward(loss)?;
        adamw_step(&mut params, &grads, &mut opt, &cfg.schedule, cfg.debug)?;
        Ok(LossBreakdown {
            ce: value,
            total: value,
            ..LossBreakdown::default()
        })
    })?;
    save_model(cfg, &cfg.model, &params.extract_prefixed(BACKBONE))?;
    Ok(summary)
}

/// A linear read-out of teacher cls tokens, fitted by L-BFGS with the
/// regulariser chosen on a held-out fifth of `ds`.
pub fn fit_teacher_head<T: Element>(
    teacher: &ParamSet<T>,
    teacher_cfg: &ViTConfig,
    ds: &DatasetContainer,
    stats: &NormStats,
    seed: u64,
) -> Result<TeacherHead<T>, CliError> {
    let fm = extract_features(teacher, teacher_cfg, ds, stats, 1, 64)?;
    let (train, val) = split_train_val(&fm, 0.2, seed)?;
    let probe = probe_lbfgs(&train, &val, None, 500)?;
    let k = usize::from(ds.class_count()).max(fm.labels.iter().max().map_or(0, |m| m + 1));
    let fit = fit_logreg(&fm, k, probe.best_l2, 500)?;
    Ok(TeacherHead {
        weight: Tensor::from_f64(&[fm.dims, k], &fit.model.weight)?,
        bias: Tensor::from_f64(&[k], &fit.model.bias)?,
    })
}

pub fn distill(cfg: &RunConfig) -> Result<TrainSummary, CliError> {
    cfg.validate()?;
    let ds = load_dataset("dataset", cfg.dataset.as_ref().expect("validated"))?;
    check_geometry(&cfg.model, &ds)?;
    let teacher = read_checkpoint_file(cfg.teacher.as_ref().expect("validated"))?;
    let mut resolved = cfg.clone();
    if resolved.norm.is_none() {
        resolved.norm = Some(resolve_norm(None, cfg.teacher.as_deref(), &ds));
    }
    prepare_output(&resolved)?;
    match cfg.precision {
        Precision::F32 => distill_impl::<f32>(&resolved, &ds, teacher),
        Precision::F64 => distill_impl::<f64>(&resolved, &ds, teacher),
    }
}

fn distill_impl<T: Element>(cfg: &RunConfig, ds: &DatasetContainer, teacher: Checkpoint) -> Result<TrainSummary, CliError> {
    let stats = cfg.norm.clone().expect("resolved");
    let tparams: ParamSet<T> = teacher.params.cast();
    let student = match cfg.student_init {
        StudentInit::Fresh => init_params::<T>(&cfg.model, cfg.seed)?,
        StudentInit::Inherit => {
            let (p, report) = weight_inherit(&tparams, &teacher.config, &cfg.model, cfg.seed)?;
            fs::write(
                cfg.output_dir.join("inherit.json"),
                serde_json::to_string_pretty(&report).expect("report serialises") + "\n",
            )?;
            p
        }
    };
    let head = if cfg.distill.mode == LossMode::Proteus {
        None
    } else {
        let hd = load_dataset("teacher_head_data", cfg.teacher_head_data.as_ref().expect("validated"))?;
        Some(fit_teacher_head(&tparams, &teacher.config, &hd, &stats, cfg.seed)?)
    };
    let mut d = Distiller::new(
        tparams,
        teacher.config.clone(),
        &student,
        cfg.model.clone(),
        cfg.distill.clone(),
        head,
        cfg.seed,
    )
    .map_err(|e| match e {
        proteus_core::Error::Config { field, reason } => CliError::Config(format!("{field}: {reason}")),
        e => e.into(),
    })?
    .with_finite_checks(cfg.debug)
    .with_determinism(cfg.deterministic);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    mask_rng.set_stream(2);
    let (mode, use_ce, w) = (cfg.distill.mode, cfg.distill.use_ce, cfg.distill.weights);
    let summary = train_loop::<T>(
        cfg,
        ds,
        &stats,
        |l| l.expected_total(mode, use_ce, &w),
        |images, labels, _| d.step(images, &Labels::new(labels), &cfg.schedule, &mut mask_rng),
    )?;
    save_model(cfg, &cfg.model, &d.student())?;
    Ok(summary)
}

/// Linear probe report plus the provenance needed to reproduce it.
#[derive(Clone, Debug, Serialize)]
pub struct ProbeReport {
    pub checkpoint: PathBuf,
    pub train: PathBuf,
    pub test: Option<PathBuf>,
    pub seed: u64,
    pub layers_for_probe: usize,
    pub feature_dims: usize,
    #[serde(flatten)]
    pub result: ProbeResult,
}

fn features_for(ck: &Checkpoint, ds: &DatasetContainer, stats: &NormStats, layers: usize, bs: usize, precision: Precision) -> Result<FeatureMatrix, CliError> {
    Ok(match precision {
        Precision::F32 => extract_features(&ck.params, &ck.config, ds, stats, layers, bs)?,
        Precision::F64 => extract_features(&ck.params.cast::<f64>(), &ck.config, ds, stats, layers, bs)?,
    })
}

/// Probes `checkpoint` on the configured splits and writes `probe.json`.
pub fn probe(cfg: &RunConfig, checkpoint: &Path) -> Result<ProbeReport, CliError> {
    let train_path = cfg
        .probe
        .train
        .clone()
        .ok_or_else(|| CliError::Config("probe.train: required".into()))?;
    let ck = read_checkpoint_file(checkpoint)?;
    let mut c = cfg.clone();
    c.model = ck.config.clone();
    c.validate()?;
    let train_ds = load_dataset("probe.train", &train_path)?;
    check_geometry(&ck.config, &train_ds)?;
    let test_ds = c.probe.test.as_ref().map(|p| load_dataset("probe.test", p)).transpose()?;
    let stats = resolve_norm(c.norm.as_ref(), Some(checkpoint), &train_ds);
    c.norm = Some(stats.clone());
    let layers = c.probe.layers_for_probe.unwrap_or(ck.config.layers_for_probe);
    let bs = c.probe.batch_size.max(1);
    let fm = features_for(&ck, &train_ds, &stats, layers, bs, c.precision)?;
    let test = test_ds
        .as_ref()
        .map(|t| features_for(&ck, t, &stats, layers, bs, c.precision))
        .transpose()?;
    let (tr, va) = split_train_val(&fm, c.probe.val_fraction, c.seed)?;
    let result = match c.probe.method {
        ProbeMethod::Lbfgs => probe_lbfgs(&tr, &va, test.as_ref(), c.probe.max_iter)?,
        ProbeMethod::Sgd => probe_sgd(&tr, &va, test.as_ref(), &c.probe.sgd)?,
    };
    let report = ProbeReport {
        checkpoint: checkpoint.to_path_buf(),
        train: train_path,
        test: c.probe.test.clone(),
        seed: c.seed,
        layers_for_probe: layers,
        feature_dims: fm.dims,
        result,
    };
    fs::create_dir_all(&c.output_dir)?;
    fs::write(c.output_dir.join("probe_config.json"), c.to_json())?;
    fs::write(
        c.output_dir.join("probe.json"),
        serde_json::to_string_pretty(&report).expect("report serialises") + "\n",
    )?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct PcaImageReport {
    pub index: usize,
    pub tile: PathBuf,
    pub explained_variance: [f64; 3],
    pub explained_ratio: [f64; 3],
}

/// Colours each image's patch tokens by their top three principal
/// components and writes one PPM tile per image, plus the input frame
/// when it has three channels.
pub fn visualize_pca(
    checkpoint: &Path,
    ds_path: &Path,
    indices: &[usize],
    scale: usize,
    out: &Path,
    norm: Option<&NormStats>,
) -> Result<Vec<PcaImageReport>, CliError> {
    let ck = read_checkpoint_file(checkpoint)?;
    let ds = load_dataset("data", ds_path)?;
    check_geometry(&ck.config, &ds)?;
    if let Some(&bad) = indices.iter().find(|&&i| i >= ds.len()) {
        return Err(CliError::Config(format!("images: index {bad} out of range for {} images", ds.len())));
    }
    let stats = resolve_norm(norm, Some(checkpoint), &ds);
    fs::create_dir_all(out)?;
    let cfg = &ck.config;
    let images = make_batch::<f32>(&ds, indices, View::Center(cfg.image_size), &stats, 0)?;
    let feats = encode(&ck.params, cfg, &images, None)?;
    let (n, d, g) = (cfg.num_patches(), cfg.dim, cfg.grid());
    let mut reports = Vec::new();
    for (b, &i) in indices.iter().enumerate() {
        let rows = feats.patches.data()[b * n * d..(b + 1) * n * d].to_vec();
        let p = pca_rgb(&Tensor::new(vec![n, d], rows)?)?;
        let tile = patch_tile(&p.rgb, g, scale)?;
        let path = out.join(format!("pca_{i:04}.ppm"));
        write_ppm(fs::File::create(&path)?, g * scale, g * scale, &tile)?;
        if ds.channels() == 3 {
            let img = ds.image(i);
            let plane = img.height * img.width;
            let px = &img.data;
            let rgb: Vec<u8> = (0..plane).flat_map(|j| (0..3).map(move |c| px[c * plane + j])).collect();
            write_ppm(fs::File::create(out.join(format!("image_{i:04}.ppm")))?, img.width, img.height, &rgb)?;
        }
        reports.push(PcaImageReport {
            index: i,
            tile: path,
            explained_variance: p.explained_variance,
            explained_ratio: p.explained_ratio,
        });
    }
    fs::write(
        out.join("pca.json"),
        serde_json::to_string_pretty(&reports).expect("report serialises") + "\n",
    )?;
    Ok(reports)
}
