//! Command-line front end for `proteus-core`: configured training runs,
//! linear probes, PCA tiles, dataset construction and ablation presets.
//!
//! Exit status: 0 success, 1 runtime failure, 2 usage or configuration
//! error, 3 corrupt checkpoint.

pub mod ablate;
pub mod config;
pub mod metrics;
pub mod runs;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use proteus_core::data::{
    class_split, gen_single_image_dataset, gen_source_image, gen_toy_dataset, load_container, merge,
    save_container, subsample, AugRecipe, SubsampleMode, ToySpec,
};

use crate::ablate::{run_preset, AblateOptions, Preset};
use crate::config::{Mode, ProbeMethod, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("{0}")]
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Corrupt(_) => 3,
            CliError::Run(_) => 1,
        }
    }
}

impl From<proteus_core::Error> for CliError {
    fn from(e: proteus_core::Error) -> Self {
        match e {
            proteus_core::Error::Config { field, reason } => CliError::Config(format!("{field}: {reason}")),
            e => CliError::Run(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "proteus", version, about = "Feature distillation into small vision transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training images (overrides `dataset`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, short = 'o')]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Optimizer steps (overrides `schedule.total_steps`).
    #[arg(long)]
    pub steps: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Supervised training of a teacher encoder on labelled images.
    TrainTeacher(RunArgs),
    /// Distil a frozen teacher checkpoint into a student.
    Distill {
        #[command(flatten)]
        run: RunArgs,
        /// Teacher checkpoint (overrides `teacher`).
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Linear probe on frozen features; writes `probe.json`.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long, short = 'o', default_value = "probe")]
        out: PathBuf,
        /// Number of final blocks whose cls tokens are concatenated.
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long, value_enum, default_value_t = ProbeMethod::Lbfgs)]
        method: ProbeMethod,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run configuration supplying `norm` and `probe` settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Build PXDS image containers.
    MakeDataset {
        #[command(subcommand)]
        kind: DatasetKind,
    },
    /// Colour patch embeddings by their top three principal components.
    VisualizePca {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated image indices.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
        images: Vec<usize>,
        /// Pixels per patch in the output tile.
        #[arg(long, default_value_t = 8)]
        scale: usize,
        #[arg(long, short = 'o', default_value = "pca")]
        out: PathBuf,
    },
    /// Run an experiment preset and write a summary table.
    Ablate {
        #[arg(long, value_enum)]
        preset: Preset,
        #[arg(long, short = 'o')]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Distillation steps per run.
        #[arg(long, default_value_t = 200)]
        steps: u64,
        #[arg(long, default_value_t = 300)]
        teacher_steps: u64,
        /// Training images per class of the generated toy set.
        #[arg(long, default_value_t = 50)]
        per_class: usize,
        /// Share of held-out training images used by the held-out probe.
        #[arg(long, default_value_t = 0.2)]
        held_out_probe_fraction: f64,
    },
    /// Print the default configuration for a mode.
    DefaultConfig {
        #[arg(long, value_enum, default_value_t = ModeArg::Distill)]
        mode: ModeArg,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum ModeArg {
    TrainTeacher,
    Distill,
    Probe,
}

#[derive(Debug, Subcommand)]
pub enum DatasetKind {
    /// Labelled oriented-grating classes.
    Toy {
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 50)]
        per_class: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short = 'o')]
        output: PathBuf,
    },
    /// Augmented crops of one synthetic source image (unlabelled).
    Single {
        #[arg(long, default_value_t = 500)]
        count: usize,
        /// Side of the generated source image.
        #[arg(long, default_value_t = 128)]
        source_size: usize,
        /// Side of each crop.
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short = 'o')]
        output: PathBuf,
    },
    /// Keep a fraction of each class, or a fraction of the classes.
    Subsample {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        fraction: f64,
        #[arg(long, value_enum, default_value_t = SubsampleArg::PerClass)]
        mode: SubsampleArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short = 'o')]
        output: PathBuf,
        /// With `--mode class`, also write the complementary classes here.
        #[arg(long)]
        held_out: Option<PathBuf>,
    },
    /// Concatenate containers of identical geometry (labels dropped).
    Merge {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, short = 'o')]
        output: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum SubsampleArg {
    PerClass,
    Class,
}

fn run_config(args: &RunArgs, mode: Mode) -> Result<RunConfig, CliError> {
    let mut c = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    c.mode = mode;
    if let Some(d) = &args.data {
        c.dataset = Some(d.clone());
    }
    if let Some(o) = &args.out {
        c.output_dir = o.clone();
    }
    if let Some(s) = args.seed {
        c.seed = s;
    }
    if let Some(s) = args.steps {
        c.schedule.total_steps = s;
        // Warmup must end before the last step.
        c.schedule.warmup_steps = c.schedule.warmup_steps.min(s.saturating_sub(1));
    }
    Ok(c)
}

fn report(line: impl AsRef<str>) {
    println!("{}", line.as_ref());
}

fn make_dataset(kind: DatasetKind) -> Result<(), CliError> {
    let (ds, out) = match kind {
        DatasetKind::Toy { classes, per_class, size, channels, seed, output } => {
            let spec = ToySpec { classes, per_class, size, channels, seed };
            (gen_toy_dataset(&spec)?, output)
        }
        DatasetKind::Single { count, source_size, size, channels, seed, output } => {
            let src = gen_source_image(channels, source_size, seed)?;
            let recipe = AugRecipe {
                output_size: size,
                ..AugRecipe::default()
            };
            (gen_single_image_dataset(&src, count, &recipe, seed)?, output)
        }
        DatasetKind::Subsample { input, fraction, mode, seed, output, held_out } => {
            let ds = load_container(&input)?;
            match (mode, held_out) {
                (SubsampleArg::PerClass, None) => (subsample(&ds, SubsampleMode::PerClassFraction, fraction, seed)?, output),
                (SubsampleArg::PerClass, Some(_)) => {
                    return Err(CliError::Usage("--held-out needs --mode class".into()));
                }
                (SubsampleArg::Class, held) => {
                    let (kept, rest) = class_split(&ds, fraction, seed)?;
                    if let Some(h) = held {
                        let rest = rest.ok_or_else(|| CliError::Config("fraction: no classes left to hold out".into()))?;
                        save_container(&rest, &h)?;
                        report(format!("wrote {} ({} images)", h.display(), rest.len()));
                    }
                    (kept, output)
                }
            }
        }
        DatasetKind::Merge { inputs, output } => {
            let parts = inputs.iter().map(load_container).collect::<Result<Vec<_>, _>>()?;
            (merge(&parts)?, output)
        }
    };
    save_container(&ds, &out)?;
    report(format!("wrote {} ({} images)", out.display(), ds.len()));
    Ok(())
}

fn init_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("PROTEUS_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("PROTEUS_THREADS: expected a positive integer, got {v:?}")))?;
        // A second initialisation in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::TrainTeacher(args) => {
            let s = runs::train_teacher(&run_config(&args, Mode::TrainTeacher)?)?;
            report(format!("{} steps, loss {:.5} -> {:.5}, wrote {}", s.steps, s.first.total, s.last.total, s.output_dir.display()));
        }
        Command::Distill { run, teacher } => {
            let mut c = run_config(&run, Mode::Distill)?;
            if teacher.is_some() {
                c.teacher = teacher;
            }
            let s = runs::distill(&c)?;
            report(format!("{} steps, loss {:.5} -> {:.5}, wrote {}", s.steps, s.first.total, s.last.total, s.output_dir.display()));
        }
        Command::Probe { checkpoint, train, test, out, layers, method, seed, config } => {
            let mut c = match &config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            c.mode = Mode::Probe;
            c.output_dir = out;
            c.seed = seed;
            c.probe.train = Some(train);
            c.probe.test = test;
            c.probe.method = method;
            if layers.is_some() {
                c.probe.layers_for_probe = layers;
            }
            let r = runs::probe(&c, &checkpoint)?;
            report(format!(
                "best {} = {:e}: train {:.4}, val {:.4}{}",
                if method == ProbeMethod::Lbfgs { "l2" } else { "lr" },
                r.result.best_l2,
                r.result.train_accuracy,
                r.result.val_accuracy,
                r.result.test_accuracy.map_or(String::new(), |t| format!(", test {t:.4}"))
            ));
        }
        Command::MakeDataset { kind } => make_dataset(kind)?,
        Command::VisualizePca { checkpoint, data, images, scale, out } => {
            if scale == 0 {
                return Err(CliError::Config("scale: must be positive".into()));
            }
            let r = runs::visualize_pca(&checkpoint, &data, &images, scale, &out, None)?;
            report(format!("wrote {} tiles to {}", r.len(), out.display()));
        }
        Command::Ablate { preset, out, seeds, steps, teacher_steps, per_class, held_out_probe_fraction } => {
            let opts = AblateOptions {
                preset,
                out,
                seeds,
                teacher_steps,
                steps,
                per_class,
                held_out_probe_fraction,
            };
            let r = run_preset(&opts)?;
            for (n, m) in &r.means {
                report(format!("{n}: mean probe accuracy {m:.4}"));
            }
            for n in &r.notes {
                report(n);
            }
        }
        Command::DefaultConfig { mode } => {
            let c = RunConfig {
                mode: match mode {
                    ModeArg::TrainTeacher => Mode::TrainTeacher,
                    ModeArg::Distill => Mode::Distill,
                    ModeArg::Probe => Mode::Probe,
                },
                ..RunConfig::default()
            };
            print!("{}", c.to_json());
        }
    }
    Ok(())
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit status.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
