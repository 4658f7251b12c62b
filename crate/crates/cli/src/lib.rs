//! The `mechbench` command line: data generation, training, evaluation and
//! whole-grid benchmarks over the built-in presets.

pub mod table;

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use mechbench_core::datasets::{generate_with_workers, preset, preset_names, read_dataset, write_dataset, ExperimentConfig, ExperimentData, ModelKind, Scale};
use mechbench_core::evaluation::{evaluate, write_comparison_csv, Evaluation, MetricsRecord};
use mechbench_core::models::Model;
use mechbench_core::parallel::worker_count;
use mechbench_core::systems::SystemKind;
use mechbench_core::training::{load_checkpoint, save_checkpoint, train_with, write_loss_csv, TrainConfig, TrainData, TrainReport};
use mechbench_core::MechError;
use serde::Serialize;
use sha2::{Digest, Sha256};

use table::{BenchmarkRow, RowOutcome};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_FAILURE: u8 = 2;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const DATA_DIR: &str = "data";
pub const TRAJECTORY_DIR: &str = "trajectories";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_TXT: &str = "summary.txt";

#[derive(Parser, Debug)]
#[command(
    name = "mechbench",
    version,
    about = "Generate, train and benchmark HNN, LNN and SRNN models on mechanical systems"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Override the preset seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Root directory of run artifacts; each preset writes into `<out>/<system>/<model>`.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Flat TOML file whose keys override the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override applied after the config file (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Preset scale.
    #[arg(long, default_value = "paper")]
    scale: Scale,
    /// Worker threads for data generation and evaluation (default: MECHBENCH_WORKERS or all cores).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the train and test data of a preset.
    Generate {
        preset: String,
        #[command(flatten)]
        common: Common,
    },
    /// Train a preset's model on previously generated data.
    Train {
        preset: String,
        /// Dataset directory (default `<out>/<system>/<model>/data`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Write a checkpoint every this many epochs in addition to the final one.
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Roll a checkpoint out from the test initial states and score it.
    Evaluate {
        preset: String,
        /// Checkpoint file (default `<out>/<system>/<model>/checkpoint.json`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory (default `<out>/<system>/<model>/data`).
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Generate, train and evaluate every matching preset and tabulate the metrics.
    Benchmark {
        /// Only presets of this system.
        #[arg(long)]
        system: Option<String>,
        /// Only presets of this model.
        #[arg(long)]
        model: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Inspect the built-in presets.
    Presets {
        #[command(subcommand)]
        action: PresetsAction,
    },
}

#[derive(Subcommand, Debug)]
enum PresetsAction {
    /// Print every preset name.
    List,
    /// Print the effective configuration of a preset.
    Dump {
        preset: String,
        #[arg(long, value_enum, default_value_t = DumpFormat::Toml)]
        format: DumpFormat,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum DumpFormat {
    Toml,
    Json,
}

/// A failed command and its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn failure(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_FAILURE,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<MechError> for CliError {
    fn from(e: MechError) -> Self {
        match e {
            MechError::UnknownPreset(_) => CliError::usage(format!("{e}\navailable presets:\n  {}", preset_names().join("\n  "))),
            MechError::InvalidConfig(_) => CliError::usage(e.to_string()),
            _ => CliError::failure(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Generate { preset, common } => cmd_generate(&preset, &common),
        Command::Train {
            preset,
            data,
            checkpoint_every,
            common,
        } => cmd_train(&preset, data, checkpoint_every, &common),
        Command::Evaluate {
            preset,
            checkpoint,
            data,
            common,
        } => cmd_evaluate(&preset, checkpoint, data, &common),
        Command::Benchmark { system, model, common } => cmd_benchmark(system.as_deref(), model.as_deref(), &common),
        Command::Presets { action } => match action {
            PresetsAction::List => {
                for name in preset_names() {
                    println!("{name}");
                }
                Ok(())
            }
            PresetsAction::Dump { preset, format, common } => {
                let cfg = resolve(&preset, &common)?;
                match format {
                    DumpFormat::Toml => print!("{}", cfg.to_toml()?),
                    DumpFormat::Json => println!("{}", to_json(&cfg)?),
                }
                Ok(())
            }
        },
    }
}

/// Preset, then config file, then `--set`, then `--seed`.
fn resolve(name: &str, common: &Common) -> CliResult<ExperimentConfig> {
    let mut cfg = preset(name, common.scale)?;
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
        cfg = cfg.with_toml_overrides(&text)?;
    }
    let pairs = common
        .set
        .iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| CliError::usage(format!("--set expects KEY=VALUE, got `{s}`")))
        })
        .collect::<CliResult<Vec<_>>>()?;
    if !pairs.is_empty() {
        cfg = cfg.with_overrides(pairs)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn workers(common: &Common) -> usize {
    common.workers.unwrap_or_else(worker_count).max(1)
}

/// `<out>/<system>/<model>`.
pub fn run_dir(out: &Path, cfg: &ExperimentConfig) -> PathBuf {
    out.join(cfg.kind().name()).join(cfg.model.to_string())
}

fn to_json<T: Serialize>(value: &T) -> CliResult<String> {
    serde_json::to_string_pretty(value).map_err(|e| CliError::failure(e.to_string()))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| MechError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| MechError::io(path, e).into())
}

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn generate_into(cfg: &ExperimentConfig, dir: &Path, workers: usize) -> CliResult<ExperimentData> {
    let data = generate_with_workers(cfg, workers)?;
    write_dataset(&dir.join(DATA_DIR), &data)?;
    write_text(&dir.join(CONFIG_FILE), &cfg.to_toml()?)?;
    let (train, test) = data.sample_counts();
    let (ntr, nte) = data.trajectory_counts();
    println!(
        "{}: {train} train samples ({ntr} trajectories), {test} test samples ({nte} trajectories)",
        cfg.preset
    );
    Ok(data)
}

fn cmd_generate(name: &str, common: &Common) -> CliResult<()> {
    let cfg = resolve(name, common)?;
    println!("seed: {}", cfg.seed);
    let dir = run_dir(&common.out, &cfg);
    generate_into(&cfg, &dir, workers(common))?;
    println!("wrote {}", dir.join(DATA_DIR).display());
    Ok(())
}

fn load_data(cfg: &ExperimentConfig, dir: &Path) -> CliResult<ExperimentData> {
    let data = read_dataset(dir)?;
    data.with_config(cfg.clone())
        .map_err(|e| CliError::failure(format!("{e} (data in {})", dir.display())))
}

fn train_into(cfg: &ExperimentConfig, data: &ExperimentData, dir: &Path, checkpoint_every: usize) -> CliResult<(Model, TrainReport)> {
    let mut tc = TrainConfig::from_experiment(cfg);
    if checkpoint_every > 0 {
        tc.checkpoint_every = checkpoint_every;
        tc.checkpoint_dir = Some(dir.join("checkpoints"));
    }
    let report_every = (cfg.epochs / 10).max(1);
    println!(
        "training {} for {} epochs (batch {}, learning rate {:e})",
        cfg.preset, cfg.epochs, cfg.batch_size, cfg.learning_rate
    );
    let (model, report) = train_with(Model::init(cfg)?, TrainData::train_split(data), &tc, |e| {
        if e.epoch % report_every == 0 || e.epoch == cfg.epochs {
            eprintln!("  epoch {:>5}/{}  loss {:.6e}", e.epoch, cfg.epochs, e.mean_loss);
        }
        Ok(())
    })?;
    let ck = dir.join(CHECKPOINT_FILE);
    save_checkpoint(&model, cfg, cfg.seed, cfg.epochs, &ck)?;
    write_loss_csv(&dir.join(LOSS_FILE), &report.epoch_losses)?;
    write_text(&dir.join(TRAIN_REPORT_FILE), &(to_json(&report)? + "\n"))?;
    let digest = file_digest(&ck).map_err(|e| MechError::io(&ck, e))?;
    println!("trained in {:.1} s; checkpoint sha256 {digest}", report.wall_time_secs);
    Ok((model, report))
}

fn cmd_train(name: &str, data: Option<PathBuf>, checkpoint_every: usize, common: &Common) -> CliResult<()> {
    let cfg = resolve(name, common)?;
    println!("seed: {}", cfg.seed);
    let dir = run_dir(&common.out, &cfg);
    let data = load_data(&cfg, &data.unwrap_or_else(|| dir.join(DATA_DIR)))?;
    train_into(&cfg, &data, &dir, checkpoint_every)?;
    Ok(())
}

#[derive(Serialize)]
struct ComponentEntry<'a> {
    component: &'a str,
    #[serde(flatten)]
    metrics: mechbench_core::metrics::MetricsReport,
}

#[derive(Serialize)]
struct TrajectoryEntry {
    index: usize,
    file: String,
    failed: bool,
    error: Option<String>,
    mse: Option<f64>,
}

#[derive(Serialize)]
struct EvaluationDoc<'a> {
    metrics: &'a MetricsRecord,
    components: Vec<ComponentEntry<'a>>,
    trajectories: Vec<TrajectoryEntry>,
}

fn evaluate_into(model: &Model, data: &ExperimentData, dir: &Path, workers: usize) -> CliResult<MetricsRecord> {
    let cfg = data.config();
    let ev: Evaluation = evaluate(model, data, workers)?;
    let names = cfg.system.state_names(cfg.convention(), cfg.dof());
    let traj_dir = dir.join(TRAJECTORY_DIR);
    fs::create_dir_all(&traj_dir).map_err(|e| MechError::io(&traj_dir, e))?;
    let mut entries = Vec::new();
    for o in &ev.outcomes {
        let file = format!("test_{:03}.csv", o.index);
        write_comparison_csv(&traj_dir.join(&file), &names, o)?;
        entries.push(TrajectoryEntry {
            index: o.index,
            file: format!("{TRAJECTORY_DIR}/{file}"),
            failed: o.failed(),
            error: o.prediction.as_ref().err().cloned(),
            mse: o.metrics.map(|m| m.mse),
        });
    }
    let record = ev.record();
    write_text(&dir.join(METRICS_FILE), &(to_json(&record)? + "\n"))?;
    let doc = EvaluationDoc {
        metrics: &record,
        components: names
            .iter()
            .zip(&ev.components)
            .map(|(n, m)| ComponentEntry { component: n, metrics: *m })
            .collect(),
        trajectories: entries,
    };
    write_text(&dir.join(EVALUATION_FILE), &(to_json(&doc)? + "\n"))?;
    for o in ev.outcomes.iter().filter(|o| o.failed()) {
        eprintln!(
            "  test trajectory {} failed: {}",
            o.index,
            o.prediction.as_ref().err().map_or("", String::as_str)
        );
    }
    if ev.metrics.is_none() {
        return Err(CliError::failure(format!("every rollout of {} failed", cfg.preset)));
    }
    Ok(record)
}

fn cmd_evaluate(name: &str, checkpoint: Option<PathBuf>, data: Option<PathBuf>, common: &Common) -> CliResult<()> {
    let cfg = resolve(name, common)?;
    println!("seed: {}", cfg.seed);
    let dir = run_dir(&common.out, &cfg);
    let ck_path = checkpoint.unwrap_or_else(|| dir.join(CHECKPOINT_FILE));
    let ck = load_checkpoint(&ck_path)?;
    if ck.model.kind() != cfg.model || ck.config.kind() != cfg.kind() {
        return Err(CliError::failure(format!(
            "checkpoint {} holds a {} model, not {}",
            ck_path.display(),
            ck.config.preset,
            cfg.preset
        )));
    }
    let data = load_data(&cfg, &data.unwrap_or_else(|| dir.join(DATA_DIR)))?;
    let record = evaluate_into(&ck.model, &data, &dir, workers(common))?;
    let row = BenchmarkRow {
        system: cfg.kind(),
        model: cfg.model,
        outcome: RowOutcome::Done(record),
    };
    print!("{}", table::text_tables(std::slice::from_ref(&row)));
    println!("wrote {}", dir.join(METRICS_FILE).display());
    Ok(())
}

/// Generate, train and evaluate one preset into its run directory.
fn pipeline(cfg: &ExperimentConfig, out: &Path, workers: usize) -> CliResult<MetricsRecord> {
    let dir = run_dir(out, cfg);
    let data = generate_into(cfg, &dir, workers)?;
    let (model, _) = train_into(cfg, &data, &dir, 0)?;
    evaluate_into(&model, &data, &dir, workers)
}

fn cmd_benchmark(system: Option<&str>, model: Option<&str>, common: &Common) -> CliResult<()> {
    let system: Option<SystemKind> = system.map(|s| s.parse().map_err(|e: MechError| CliError::usage(e.to_string()))).transpose()?;
    let model: Option<ModelKind> = model.map(|s| s.parse().map_err(|e: MechError| CliError::usage(e.to_string()))).transpose()?;
    let names: Vec<String> = preset_names()
        .into_iter()
        .filter(|n| {
            let (s, m) = mechbench_core::datasets::parse_preset_name(n).expect("built-in preset");
            system.is_none_or(|x| x == s) && model.is_none_or(|x| x == m)
        })
        .collect();
    if names.is_empty() {
        return Err(CliError::usage("no preset matches the filter"));
    }
    let seed_note = common.seed.map_or("preset seeds".to_string(), |s| s.to_string());
    println!("seed: {seed_note}");
    let mut rows = Vec::new();
    for name in &names {
        let (s, m) = mechbench_core::datasets::parse_preset_name(name)?;
        let outcome = resolve(name, common).and_then(|cfg| {
            println!("== {} (seed {})", cfg.preset, cfg.seed);
            pipeline(&cfg, &common.out, workers(common))
        });
        let outcome = match outcome {
            Ok(record) => RowOutcome::Done(record),
            Err(e) => {
                eprintln!("  {name} failed: {e}");
                RowOutcome::Failed(e.message)
            }
        };
        rows.push(BenchmarkRow { system: s, model: m, outcome });
    }
    let csv = table::summary_csv(&rows).map_err(|e| CliError::failure(e.to_string()))?;
    write_text(&common.out.join(SUMMARY_CSV), &csv)?;
    let text = table::text_tables(&rows);
    write_text(&common.out.join(SUMMARY_TXT), &text)?;
    print!("{text}");
    let failed = rows.iter().filter(|r| matches!(r.outcome, RowOutcome::Failed(_))).count();
    if failed > 0 {
        return Err(CliError::failure(format!("{failed} of {} presets failed", rows.len())));
    }
    Ok(())
}
