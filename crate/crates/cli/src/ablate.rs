//! Desk-scale experiment presets: objective ablation, dataset-bias
//! ablation, and inherited versus fresh student initialisation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use proteus_core::data::{
    class_split, gen_toy_dataset, pick_classes, save_container, subsample, DatasetContainer, SubsampleMode,
    ToySpec,
};
use proteus_core::distill::{DistillConfig, LossMode, LossWeights};
use proteus_core::vit::ViTConfig;
use serde::Serialize;

use crate::config::{default_model, Mode, RunConfig, StudentInit};
use crate::runs::{distill, probe, train_teacher, ProbeReport, TrainSummary};
use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Hint-style versus logit distillation on a class-restricted proxy set.
    Table1,
    /// Token / feature / patch objective combinations.
    Table2,
    /// Student initialised from teacher weights versus fresh.
    Inherit,
}

#[derive(Clone, Debug)]
pub struct AblateOptions {
    pub preset: Preset,
    pub out: PathBuf,
    pub seeds: Vec<u64>,
    pub teacher_steps: u64,
    pub steps: u64,
    pub per_class: usize,
    /// Share of each held-out class's training images given to the
    /// held-out probe; the full set saturates the probe at desk scale.
    pub held_out_probe_fraction: f64,
}

impl AblateOptions {
    pub fn new(preset: Preset, out: impl Into<PathBuf>) -> Self {
        AblateOptions {
            preset,
            out: out.into(),
            seeds: vec![0, 1, 2],
            teacher_steps: 300,
            steps: 200,
            per_class: 50,
            held_out_probe_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblateRow {
    pub run: String,
    pub seed: u64,
    pub steps: u64,
    pub loss_first: f64,
    pub loss_last: f64,
    /// Patch loss strictly decreasing over epoch means (runs with a patch
    /// objective only).
    pub patch_monotone: Option<bool>,
    pub probe_val: f64,
    pub probe_test: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblateReport {
    pub preset: Preset,
    pub rows: Vec<AblateRow>,
    /// Seed-averaged held-out probe accuracy per run name, in run order.
    pub means: Vec<(String, f64)>,
    /// For the bias preset: whether hint distillation matched or beat
    /// logit distillation with labels on the held-out classes.
    pub direction_ok: Option<bool>,
    pub notes: Vec<String>,
}

const CLASSES: usize = 10;

fn toy(per_class: usize, seed: u64) -> Result<DatasetContainer, CliError> {
    Ok(gen_toy_dataset(&ToySpec {
        classes: CLASSES,
        per_class,
        size: 16,
        channels: 3,
        seed,
    })?)
}

fn save(ds: &DatasetContainer, path: &Path) -> Result<PathBuf, CliError> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    save_container(ds, path)?;
    Ok(path.to_path_buf())
}

fn student_model() -> ViTConfig {
    let mut m = ViTConfig::new(16, 4, 3, 16, 2, 2);
    m.layers_for_probe = 2;
    m
}

fn base(out: &Path, mode: Mode, seed: u64, steps: u64) -> RunConfig {
    let mut c = RunConfig {
        mode,
        seed,
        output_dir: out.to_path_buf(),
        ..RunConfig::default()
    };
    c.schedule.total_steps = steps;
    c.schedule.warmup_steps = (steps / 10).min(c.schedule.warmup_steps);
    c.log_every = 1;
    c
}

fn teacher_run(out: &Path, model: ViTConfig, train: &Path, steps: u64) -> Result<(PathBuf, RunConfig), CliError> {
    let mut c = base(&out.join("teacher"), Mode::TrainTeacher, 0, steps);
    c.model = model;
    c.dataset = Some(train.to_path_buf());
    c.schedule.base_lr = 1e-3;
    train_teacher(&c)?;
    Ok((c.output_dir.join("checkpoint.prtc"), c))
}

fn probe_run(dir: &Path, ck: &Path, train: &Path, test: &Path, seed: u64) -> Result<ProbeReport, CliError> {
    let mut c = base(dir, Mode::Probe, seed, 1);
    c.probe.train = Some(train.to_path_buf());
    c.probe.test = Some(test.to_path_buf());
    probe(&c, ck)
}

fn monotone(s: &TrainSummary) -> bool {
    s.epoch_means.windows(2).all(|w| w[1].patch < w[0].patch)
}

fn row(name: &str, seed: u64, s: &TrainSummary, has_patch: bool, p: &ProbeReport) -> AblateRow {
    AblateRow {
        run: name.to_string(),
        seed,
        steps: s.steps,
        loss_first: s.first.total,
        loss_last: s.last.total,
        patch_monotone: has_patch.then(|| monotone(s)),
        probe_val: p.result.val_accuracy,
        probe_test: p.result.test_accuracy,
    }
}

fn weights(token: f64, feat: f64, patch: f64) -> LossWeights {
    LossWeights {
        token,
        feat,
        patch,
        ..LossWeights::default()
    }
}

/// Runs a preset under `opts.out` and writes `summary.csv`, `summary.md`
/// and `summary.json` there.
pub fn run_preset(opts: &AblateOptions) -> Result<AblateReport, CliError> {
    if opts.seeds.is_empty() {
        return Err(CliError::Config("seeds: need at least one".into()));
    }
    if !(opts.held_out_probe_fraction > 0.0 && opts.held_out_probe_fraction <= 1.0) {
        return Err(CliError::Config("held_out_probe_fraction: must lie in (0, 1]".into()));
    }
    if opts.steps == 0 || opts.teacher_steps == 0 {
        return Err(CliError::Config("steps: must be positive".into()));
    }
    fs::create_dir_all(&opts.out)?;
    let data = opts.out.join("data");
    let train_ds = toy(opts.per_class, 0)?;
    let test_ds = toy((opts.per_class / 2).max(2), 1000)?;
    let train = save(&train_ds, &data.join("train.pxds"))?;
    let test = save(&test_ds, &data.join("test.pxds"))?;
    let report = match opts.preset {
        Preset::Table2 => table2(opts, &train, &test)?,
        Preset::Table1 => table1(opts, &train_ds, &test_ds, &train)?,
        Preset::Inherit => inherit(opts, &train, &test)?,
    };
    write_summary(&opts.out, &report)?;
    Ok(report)
}

fn table2(opts: &AblateOptions, train: &Path, test: &Path) -> Result<AblateReport, CliError> {
    let (teacher, _) = teacher_run(&opts.out, default_model(), train, opts.teacher_steps)?;
    let combos = [
        ("token", weights(1.0, 0.0, 0.0)),
        ("feat", weights(0.0, 1.0, 0.0)),
        ("token_feat", weights(1.0, 1.0, 0.0)),
        ("token_feat_patch", weights(1.0, 1.0, 1.0)),
    ];
    let mut rows = Vec::new();
    for &seed in &opts.seeds {
        for (name, w) in combos {
            let dir = opts.out.join(format!("{name}_s{seed}"));
            let mut c = base(&dir, Mode::Distill, seed, opts.steps);
            c.model = student_model();
            c.dataset = Some(train.to_path_buf());
            c.teacher = Some(teacher.clone());
            c.distill.weights = w;
            let s = distill(&c)?;
            let p = probe_run(&dir.join("probe"), &dir.join("checkpoint.prtc"), train, test, seed)?;
            rows.push(row(name, seed, &s, w.patch > 0.0, &p));
        }
    }
    let means = means(&rows, |r| r.probe_test.unwrap_or(r.probe_val));
    Ok(AblateReport {
        preset: Preset::Table2,
        rows,
        means,
        direction_ok: None,
        notes: vec!["probe: test accuracy on a separately generated toy set".into()],
    })
}

/// The proxy set keeps original label indices so that label
/// cross-entropy lines up with the teacher's classifier.
fn proxy_with_original_labels(ds: &DatasetContainer, keep: &[u16], seed: u64) -> Result<DatasetContainer, CliError> {
    let labels = ds.labels().expect("toy sets are labelled");
    let idx: Vec<usize> = (0..ds.len()).filter(|&i| keep.contains(&labels[i])).collect();
    Ok(ds.select(&idx, format!("{} | proxy classes {keep:?} seed={seed}", ds.provenance))?)
}

fn table1(
    opts: &AblateOptions,
    train_ds: &DatasetContainer,
    test_ds: &DatasetContainer,
    train: &Path,
) -> Result<AblateReport, CliError> {
    let (teacher, tcfg) = teacher_run(&opts.out, default_model(), train, opts.teacher_steps)?;
    // One normalisation for every run: the teacher's.
    let tnorm: RunConfig = RunConfig::load(&tcfg.output_dir.join("config.json"))?;
    let runs: [(&str, LossMode, bool, LossWeights); 6] = [
        ("hard_ce", LossMode::HardKd, true, LossWeights::default()),
        ("soft_ce", LossMode::SoftKd, true, LossWeights::default()),
        ("hard", LossMode::HardKd, false, LossWeights::default()),
        ("soft", LossMode::SoftKd, false, LossWeights::default()),
        ("hint_token", LossMode::Proteus, false, weights(1.0, 0.0, 0.0)),
        ("hint_token_feat", LossMode::Proteus, false, weights(1.0, 1.0, 0.0)),
    ];
    let mut rows = Vec::new();
    let mut notes = Vec::new();
    for &seed in &opts.seeds {
        let (keep, held) = pick_classes(CLASSES, 0.5, seed);
        notes.push(format!("seed {seed}: proxy classes {keep:?}, held-out {held:?}"));
        let sd = opts.out.join(format!("data/seed{seed}"));
        let proxy = save(&proxy_with_original_labels(train_ds, &keep, seed)?, &sd.join("proxy.pxds"))?;
        let held_train = class_split(train_ds, 0.5, seed)?.1.expect("half the classes are held out");
        let held_train = if opts.held_out_probe_fraction < 1.0 {
            subsample(&held_train, SubsampleMode::PerClassFraction, opts.held_out_probe_fraction, seed)?
        } else {
            held_train
        };
        let held_test = class_split(test_ds, 0.5, seed)?.1.expect("half the classes are held out");
        let held_train = save(&held_train, &sd.join("held_train.pxds"))?;
        let held_test = save(&held_test, &sd.join("held_test.pxds"))?;
        for (name, mode, use_ce, w) in runs {
            let dir = opts.out.join(format!("{name}_s{seed}"));
            let mut c = base(&dir, Mode::Distill, seed, opts.steps);
            c.model = student_model();
            c.dataset = Some(proxy.clone());
            c.teacher = Some(teacher.clone());
            c.norm = tnorm.norm.clone();
            c.distill = DistillConfig {
                mode,
                use_ce,
                weights: w,
                ..DistillConfig::default()
            };
            if mode != LossMode::Proteus {
                c.teacher_head_data = Some(train.to_path_buf());
            }
            let s = distill(&c)?;
            let p = probe_run(&dir.join("probe"), &dir.join("checkpoint.prtc"), &held_train, &held_test, seed)?;
            rows.push(row(name, seed, &s, false, &p));
        }
    }
    let means = means(&rows, |r| r.probe_test.unwrap_or(r.probe_val));
    let get = |n: &str| means.iter().find(|(k, _)| k == n).map(|(_, v)| *v).expect("run present");
    let (hint, logit) = (get("hint_token_feat"), get("soft_ce"));
    let ok = hint >= logit;
    notes.push(format!(
        "held-out probe accuracy, mean over seeds {:?}: hint_token_feat {hint:.4} vs soft_ce {logit:.4} -> {}",
        opts.seeds,
        if ok { "direction holds" } else { "REGRESSION: direction does not hold" }
    ));
    Ok(AblateReport {
        preset: Preset::Table1,
        rows,
        means,
        direction_ok: Some(ok),
        notes,
    })
}

fn inherit(opts: &AblateOptions, train: &Path, test: &Path) -> Result<AblateReport, CliError> {
    let mut tm = default_model();
    tm.depth = 4;
    tm.layers_for_probe = 2;
    let (teacher, _) = teacher_run(&opts.out, tm, train, opts.teacher_steps)?;
    let mut sm = default_model();
    sm.depth = 2;
    let mut rows = Vec::new();
    for &seed in &opts.seeds {
        for (name, init) in [("fresh", StudentInit::Fresh), ("inherit", StudentInit::Inherit)] {
            let dir = opts.out.join(format!("{name}_s{seed}"));
            let mut c = base(&dir, Mode::Distill, seed, opts.steps);
            c.model = sm.clone();
            c.dataset = Some(train.to_path_buf());
            c.teacher = Some(teacher.clone());
            c.student_init = init;
            let s = distill(&c)?;
            let p = probe_run(&dir.join("probe"), &dir.join("checkpoint.prtc"), train, test, seed)?;
            rows.push(row(name, seed, &s, true, &p));
        }
    }
    let means = means(&rows, |r| r.probe_test.unwrap_or(r.probe_val));
    let note = {
        let f = rows.iter().filter(|r| r.run == "fresh").map(|r| r.loss_last).sum::<f64>();
        let i = rows.iter().filter(|r| r.run == "inherit").map(|r| r.loss_last).sum::<f64>();
        let n = opts.seeds.len() as f64;
        format!("final distillation loss, mean over seeds: fresh {:.5} vs inherit {:.5}", f / n, i / n)
    };
    Ok(AblateReport {
        preset: Preset::Inherit,
        rows,
        means,
        direction_ok: None,
        notes: vec![note],
    })
}

fn means(rows: &[AblateRow], acc: impl Fn(&AblateRow) -> f64) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64, usize)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|(n, _, _)| *n == r.run) {
            Some(e) => {
                e.1 += acc(r);
                e.2 += 1;
            }
            None => out.push((r.run.clone(), acc(r), 1)),
        }
    }
    out.into_iter().map(|(n, s, c)| (n, s / c as f64)).collect()
}

fn write_summary(out: &Path, rep: &AblateReport) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(out.join("summary.csv")).map_err(|e| CliError::Run(e.to_string()))?;
    for r in &rep.rows {
        w.serialize(r).map_err(|e| CliError::Run(e.to_string()))?;
    }
    w.flush()?;
    let mut md = String::new();
    let _ = writeln!(md, "| run | seed | steps | loss first | loss last | patch monotone | probe val | probe test |");
    let _ = writeln!(md, "|---|---|---|---|---|---|---|---|");
    for r in &rep.rows {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {:.5} | {:.5} | {} | {:.4} | {} |",
            r.run,
            r.seed,
            r.steps,
            r.loss_first,
            r.loss_last,
            r.patch_monotone.map_or("-".into(), |b| b.to_string()),
            r.probe_val,
            r.probe_test.map_or("-".into(), |t| format!("{t:.4}")),
        );
    }
    let _ = writeln!(md, "\n| run | mean probe accuracy |\n|---|---|");
    for (n, m) in &rep.means {
        let _ = writeln!(md, "| {n} | {m:.4} |");
    }
    for n in &rep.notes {
        let _ = writeln!(md, "\n{n}");
    }
    fs::write(out.join("summary.md"), md)?;
    fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(rep).expect("report serialises") + "\n",
    )?;
    Ok(())
}
