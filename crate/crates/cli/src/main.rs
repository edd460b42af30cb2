//! Command-line entry point for data generation, training, evaluation,
//! parameter counting, curve export, and the full comparison matrix.
//!
//! Exit codes: 0 success, 1 validation error (bad flags, bad configs,
//! malformed files), 2 runtime failure (I/O mid-run, divergence).
//! `QVIT_THREADS` caps worker-thread parallelism.

use std::fmt::Display;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use qvit_core::data::{
    self, file_sha256, load_all, normalize_all, synth_generate, DataError, DataFormat, EventRecord,
    SynthParams,
};
use qvit_core::model::{count_params, Checkpoint, ModelConfig, ModelError};
use qvit_core::trainer::{
    evaluate_checkpoint, export_curves, train, MetricsReport, RunManifest, TrainConfig, TrainData,
    TrainError,
};
use qvit_core::{EncoderKind, GradBackend, Variant};

#[derive(Parser)]
#[command(
    name = "qvit",
    about = "Train and evaluate classical and hybrid vision transformers on calorimeter shower images",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shower dataset.
    GenData(GenDataArgs),
    /// Train one model and emit checkpoint, curves, and manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a data split.
    Eval(EvalArgs),
    /// Print the trainable-parameter count for a configuration.
    CountParams(CountParamsArgs),
    /// Write the per-epoch curve CSV stored in a checkpoint.
    ExportCurves(ExportCurvesArgs),
    /// Train/evaluate every cell of a comparison matrix.
    RunMatrix(RunMatrixArgs),
}

#[derive(Args)]
struct ModelFlags {
    /// Encoder kind.
    #[arg(long, value_parser = ["classical", "hybrid"], default_value = "classical")]
    encoder: String,
    /// Pooling variant: cls (class token), cmx (column max), cmn (column mean).
    #[arg(long, value_parser = ["cls", "cmx", "cmn"], default_value = "cmx")]
    variant: String,
    /// Enable the positional embedding (default).
    #[arg(long, overrides_with = "no_pos")]
    pos: bool,
    /// Disable the positional embedding.
    #[arg(long = "no-pos", overrides_with = "pos")]
    no_pos: bool,
}

impl ModelFlags {
    fn config(&self) -> ModelConfig {
        ModelConfig {
            encoder: if self.encoder == "hybrid" {
                EncoderKind::Hybrid
            } else {
                EncoderKind::Classical
            },
            variant: Variant::from_tag(&self.variant).expect("clap-validated"),
            positional: !self.no_pos,
            ..ModelConfig::default()
        }
    }
}

#[derive(Args)]
struct DataFlags {
    /// Dataset file.
    #[arg(long)]
    data: PathBuf,
    /// Dataset format.
    #[arg(long, value_parser = ["portable", "hdf5"], default_value = "portable")]
    format: String,
    /// Read at most this many records.
    #[arg(long)]
    limit: Option<usize>,
}

impl DataFlags {
    fn format(&self) -> DataFormat {
        DataFormat::from_tag(&self.format).expect("clap-validated")
    }

    fn load(&self) -> Result<Vec<EventRecord>, CliError> {
        let records = load_all(&self.data, self.format(), self.limit)?;
        if records.is_empty() {
            return Err(CliError::Validation(format!(
                "{} contains no records",
                self.data.display()
            )));
        }
        let (normalized, rejected) = normalize_all(records);
        if rejected > 0 {
            eprintln!("warning: rejected {rejected} all-zero record(s)");
        }
        Ok(normalized)
    }
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of events.
    #[arg(long, default_value_t = 3000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = ["portable", "hdf5"], default_value = "portable")]
    format: String,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    data: DataFlags,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[arg(long, default_value_t = 512)]
    batch: usize,
    #[arg(long, default_value_t = 5e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for checkpoint.ckpt, curves.csv, manifest.json.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Record deterministic mode in manifests (execution is always
    /// deterministic).
    #[arg(long)]
    deterministic: bool,
    /// Circuit gradient backend.
    #[arg(long, value_parser = ["adjoint", "shift"], default_value = "adjoint")]
    backend: String,
    /// Train/val/test fractions, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.1])]
    fractions: Vec<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataFlags,
    /// Which split to evaluate; splits are re-derived from the seed and
    /// fractions stored in the checkpoint.
    #[arg(long, value_parser = ["train", "val", "test", "all"], default_value = "test")]
    split: String,
}

#[derive(Args)]
struct CountParamsArgs {
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args)]
struct ExportCurvesArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunMatrixArgs {
    /// Matrix configuration (JSON); see docs/FORMATS.md.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "matrix")]
    out: PathBuf,
}

enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io(_) | DataError::Hdf5(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } | TrainError::Io(_) => CliError::Runtime(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Data(d) => d.into(),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

fn runtime<E: Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Ok(threads) = std::env::var("QVIT_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
            _ => {
                eprintln!("error: QVIT_THREADS must be a positive integer, got {threads:?}");
                return 1;
            }
        }
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            eprint!("{e}");
            return 1;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => train_cmd(args),
        Command::Eval(args) => eval_cmd(args),
        Command::CountParams(args) => {
            let config = args.model.config();
            println!("{}", count_params(&config)?);
            Ok(())
        }
        Command::ExportCurves(args) => {
            let checkpoint = Checkpoint::load(&args.checkpoint)?;
            export_curves(&checkpoint.curves, &args.out)?;
            println!(
                "wrote {} curve rows to {}",
                checkpoint.curves.len(),
                args.out.display()
            );
            Ok(())
        }
        Command::RunMatrix(args) => run_matrix(args),
    }
}

fn gen_data(args: GenDataArgs) -> Result<(), CliError> {
    let records = synth_generate(args.n, args.seed, &SynthParams::default());
    match DataFormat::from_tag(&args.format).expect("clap-validated") {
        DataFormat::Portable => data::write_portable(&args.out, &records)?,
        DataFormat::Hdf5 => data::write_hdf5(&args.out, &records)?,
    }
    println!("wrote {} events to {}", records.len(), args.out.display());
    Ok(())
}

struct PreparedSplits {
    records: Vec<EventRecord>,
    split: data::DatasetSplit,
}

fn prepare_splits(
    flags: &DataFlags,
    fractions: [f64; 3],
    seed: u64,
) -> Result<PreparedSplits, CliError> {
    let records = flags.load()?;
    let split = data::split(&records, fractions, seed)?;
    Ok(PreparedSplits { records, split })
}

fn train_cmd(args: TrainArgs) -> Result<(), CliError> {
    let model_cfg = args.model.config();
    let fractions: [f64; 3] = args
        .fractions
        .clone()
        .try_into()
        .map_err(|_| CliError::Validation("--fractions needs three values".into()))?;
    let train_cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        learning_rate: args.lr,
        seed: args.seed,
        deterministic: args.deterministic,
        backend: if args.backend == "shift" {
            GradBackend::ParameterShift
        } else {
            GradBackend::Adjoint
        },
        split_fractions: fractions,
    };

    let prepared = prepare_splits(&args.data, fractions, args.seed)?;
    let train_owned: Vec<EventRecord> = prepared
        .split
        .gather("train", &prepared.records)
        .into_iter()
        .cloned()
        .collect();
    let val_owned: Vec<EventRecord> = prepared
        .split
        .gather("val", &prepared.records)
        .into_iter()
        .cloned()
        .collect();
    let test_owned: Vec<EventRecord> = prepared
        .split
        .gather("test", &prepared.records)
        .into_iter()
        .cloned()
        .collect();

    std::fs::create_dir_all(&args.out).map_err(runtime)?;
    let outcome = match train(
        &model_cfg,
        None,
        &TrainData {
            train: &train_owned,
            val: &val_owned,
        },
        &train_cfg,
    ) {
        Ok(outcome) => outcome,
        Err(TrainError::Diverged {
            epoch,
            step,
            checkpoint,
        }) => {
            let path = args.out.join("diverged.ckpt");
            checkpoint.save(&path)?;
            return Err(CliError::Runtime(format!(
                "training diverged at epoch {epoch}, step {step}; diagnostic checkpoint at {}",
                path.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };

    let mut checkpoint = outcome.checkpoint;
    if !test_owned.is_empty() {
        let report = evaluate_checkpoint(&checkpoint, &test_owned, "test")?;
        println!(
            "test: accuracy {:.4}  bce {:.4}  auc {:.4}",
            report.accuracy, report.bce, report.auc
        );
        checkpoint.metrics.insert("test".into(), report);
    }
    if let Some(val_report) = checkpoint.metrics.get("val") {
        println!(
            "val (best epoch {}): accuracy {:.4}  bce {:.4}  auc {:.4}",
            checkpoint.epoch, val_report.accuracy, val_report.bce, val_report.auc
        );
    }

    let ckpt_path = args.out.join("checkpoint.ckpt");
    checkpoint.save(&ckpt_path)?;
    let curves_path = args.out.join("curves.csv");
    export_curves(&outcome.curves, &curves_path)?;
    let manifest = RunManifest {
        model: model_cfg,
        train: train_cfg,
        data_path: args.data.data.display().to_string(),
        data_format: args.data.format(),
        data_sha256: file_sha256(&args.data.data)?,
    };
    manifest.save(&args.out.join("manifest.json"))?;
    println!("wrote {}", ckpt_path.display());
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> Result<(), CliError> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let records = args.data.load()?;
    let selected: Vec<EventRecord> = if args.split == "all" {
        records
    } else {
        let split = data::split(&records, checkpoint.split_fractions, checkpoint.seed)?;
        split
            .gather(&args.split, &records)
            .into_iter()
            .cloned()
            .collect()
    };
    if selected.is_empty() {
        return Err(CliError::Validation(format!(
            "split {:?} is empty for this dataset",
            args.split
        )));
    }
    let report = evaluate_checkpoint(&checkpoint, &selected, &args.split)?;
    println!(
        "{}: accuracy {:.4}  bce {:.4}  auc {:.4}  (n={})",
        report.split,
        report.accuracy,
        report.bce,
        report.auc,
        selected.len()
    );
    Ok(())
}

/// Declarative matrix run; `cells` defaults to all twelve combinations.
#[derive(Debug, Serialize, Deserialize)]
struct MatrixSpec {
    data: PathBuf,
    #[serde(default = "default_format")]
    format: DataFormat,
    #[serde(default)]
    limit: Option<usize>,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_epochs")]
    epochs: usize,
    #[serde(default = "default_batch")]
    batch: usize,
    #[serde(default = "default_lr")]
    lr: f64,
    #[serde(default = "default_fractions")]
    fractions: [f64; 3],
    #[serde(default)]
    parallel: bool,
    #[serde(default)]
    cells: Option<Vec<MatrixCell>>,
}

fn default_format() -> DataFormat {
    DataFormat::Portable
}
fn default_epochs() -> usize {
    40
}
fn default_batch() -> usize {
    512
}
fn default_lr() -> f64 {
    5e-3
}
fn default_fractions() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MatrixCell {
    encoder: EncoderKind,
    variant: Variant,
    positional: bool,
}

fn all_cells() -> Vec<MatrixCell> {
    let mut cells = Vec::new();
    for encoder in [EncoderKind::Classical, EncoderKind::Hybrid] {
        for variant in [Variant::ClassToken, Variant::ColumnMax, Variant::ColumnMean] {
            for positional in [true, false] {
                cells.push(MatrixCell {
                    encoder,
                    variant,
                    positional,
                });
            }
        }
    }
    cells
}

struct CellResult {
    cell: MatrixCell,
    params: usize,
    metrics: Option<MetricsReport>,
    error: Option<String>,
}

fn run_matrix(args: RunMatrixArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.config).map_err(runtime)?;
    let spec: MatrixSpec = serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("bad matrix config: {e}")))?;
    let cells = spec.cells.clone().unwrap_or_else(all_cells);
    if cells.is_empty() {
        return Err(CliError::Validation("matrix has no cells".into()));
    }
    std::fs::create_dir_all(&args.out).map_err(runtime)?;

    let flags = DataFlags {
        data: spec.data.clone(),
        format: spec.format.tag().to_string(),
        limit: spec.limit,
    };
    let prepared = prepare_splits(&flags, spec.fractions, spec.seed)?;
    let run_cell = |cell: &MatrixCell| -> CellResult {
        let params = count_params(&ModelConfig {
            encoder: cell.encoder,
            variant: cell.variant,
            positional: cell.positional,
            ..ModelConfig::default()
        })
        .unwrap_or(0);
        match run_one_cell(&spec, cell, &prepared, &args.out) {
            Ok(metrics) => CellResult {
                cell: cell.clone(),
                params,
                metrics: Some(metrics),
                error: None,
            },
            Err(e) => CellResult {
                cell: cell.clone(),
                params,
                metrics: None,
                error: Some(e.message().to_string()),
            },
        }
    };
    let results: Vec<CellResult> = if spec.parallel {
        use rayon::prelude::*;
        cells.par_iter().map(run_cell).collect()
    } else {
        cells.iter().map(run_cell).collect()
    };

    let mut csv = String::from("encoder,variant,positional,accuracy,bce,auc,params,status\n");
    for r in &results {
        let (accuracy, bce, auc, status) = match (&r.metrics, &r.error) {
            (Some(m), _) => (
                format!("{:.6}", m.accuracy),
                format!("{:.6}", m.bce),
                format!("{:.6}", m.auc),
                "ok".to_string(),
            ),
            (None, Some(e)) => (
                String::new(),
                String::new(),
                String::new(),
                format!("failed: {}", e.replace(',', ";")),
            ),
            _ => unreachable!(),
        };
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.cell.encoder.tag(),
            r.cell.variant.tag(),
            r.cell.positional,
            accuracy,
            bce,
            auc,
            r.params,
            status
        ));
        if let Some(e) = &r.error {
            eprintln!(
                "cell {}-{}-pos={} failed: {e}",
                r.cell.encoder.tag(),
                r.cell.variant.tag(),
                r.cell.positional
            );
        }
    }
    let csv_path = args.out.join("matrix.csv");
    std::fs::write(&csv_path, csv).map_err(runtime)?;
    println!("wrote {} cells to {}", results.len(), csv_path.display());
    Ok(())
}

fn run_one_cell(
    spec: &MatrixSpec,
    cell: &MatrixCell,
    prepared: &PreparedSplits,
    out_dir: &Path,
) -> Result<MetricsReport, CliError> {
    let model_cfg = ModelConfig {
        encoder: cell.encoder,
        variant: cell.variant,
        positional: cell.positional,
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig {
        epochs: spec.epochs,
        batch_size: spec.batch,
        learning_rate: spec.lr,
        seed: spec.seed,
        deterministic: true,
        backend: GradBackend::Adjoint,
        split_fractions: spec.fractions,
    };
    let train_owned: Vec<EventRecord> = prepared
        .split
        .gather("train", &prepared.records)
        .into_iter()
        .cloned()
        .collect();
    let val_owned: Vec<EventRecord> = prepared
        .split
        .gather("val", &prepared.records)
        .into_iter()
        .cloned()
        .collect();
    let test_owned: Vec<EventRecord> = prepared
        .split
        .gather("test", &prepared.records)
        .into_iter()
        .cloned()
        .collect();

    let cell_dir = out_dir.join(format!(
        "{}-{}-{}",
        cell.encoder.tag(),
        cell.variant.tag(),
        if cell.positional { "pos" } else { "nopos" }
    ));
    std::fs::create_dir_all(&cell_dir).map_err(runtime)?;

    let outcome = train(
        &model_cfg,
        None,
        &TrainData {
            train: &train_owned,
            val: &val_owned,
        },
        &train_cfg,
    )?;
    let mut checkpoint = outcome.checkpoint;
    let eval_set = if test_owned.is_empty() {
        &val_owned
    } else {
        &test_owned
    };
    let report = evaluate_checkpoint(&checkpoint, eval_set, "test")?;
    checkpoint.metrics.insert("test".into(), report.clone());
    checkpoint.save(&cell_dir.join("checkpoint.ckpt"))?;
    export_curves(&outcome.curves, &cell_dir.join("curves.csv"))?;
    Ok(report)
}
