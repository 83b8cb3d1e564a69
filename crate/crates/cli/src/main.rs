//! `meshfusion` command-line tool.
//!
//! Exit codes: 0 on success, 2 for invalid inputs or configuration, 3 for
//! failures while computing. Errors are printed to stderr as one JSON
//! object.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use meshfusion::alignment::ReferenceChoice;
use meshfusion::data::{generate_synthetic, SynthConfig};
use meshfusion::error::Error;
use meshfusion::gnn::LayerKind;
use meshfusion::model::{Mode, Task};
use meshfusion::pipeline::{self, read_json, read_index};
use meshfusion::train::TrainConfig;
use serde_json::json;

#[derive(Parser)]
#[command(name = "meshfusion", version, about = "Subcortical shape graphs fused with image embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (meshes, embeddings, manifest).
    Synth(SynthArgs),
    /// Align meshes to a reference subject and compute FPFH features.
    Preprocess(PreprocessArgs),
    /// Train shape, image and fusion models for every seed.
    Train(TrainArgs),
    /// Score trained models on the test split.
    Evaluate(OutArgs),
    /// Predict for one subject from its meshes and optional embedding.
    Predict(PredictArgs),
    /// Summarize evaluations over seeds as mean ± std tables.
    Report(OutArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Regression,
    Classification,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Regression => Task::Regression,
            TaskArg::Classification => Task::Classification,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum LayerArg {
    Gcn,
    Spline,
}

impl From<LayerArg> for LayerKind {
    fn from(l: LayerArg) -> LayerKind {
        match l {
            LayerArg::Gcn => LayerKind::Gcn,
            LayerArg::Spline => LayerKind::Spline,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Shape,
    Image,
    Fusion,
    #[value(name = "fusion_e2e")]
    FusionEndToEnd,
}

impl From<ModelArg> for Mode {
    fn from(m: ModelArg) -> Mode {
        match m {
            ModelArg::Shape => Mode::Shape,
            ModelArg::Image => Mode::Image,
            ModelArg::Fusion => Mode::Fusion,
            ModelArg::FusionEndToEnd => Mode::FusionEndToEnd,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Dataset directory to create.
    #[arg(long)]
    out: PathBuf,
    /// JSON generator configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Icosphere subdivision level.
    #[arg(long)]
    level: Option<usize>,
    #[arg(long)]
    shape_weight: Option<f64>,
    #[arg(long)]
    image_weight: Option<f64>,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Reference subject id; defaults to the first id in sorted order.
    #[arg(long, conflicts_with = "reference_seed")]
    reference: Option<String>,
    /// Pick the reference subject at random with this seed.
    #[arg(long)]
    reference_seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON training configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Train a single seed.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long, value_enum)]
    layer: Option<LayerArg>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Maximum vertex translation in mm for augmentation.
    #[arg(long)]
    augment: Option<f64>,
    /// Train the shape model only.
    #[arg(long)]
    no_fusion: bool,
    /// Train the shape branch jointly with the fusion head.
    #[arg(long)]
    end_to_end: bool,
}

#[derive(Args)]
struct OutArgs {
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    out: PathBuf,
    /// Directory holding `<structure>.off` or `<structure>.ply` files.
    #[arg(long)]
    meshes: PathBuf,
    #[arg(long)]
    embedding: Option<PathBuf>,
    /// Defaults to the first trained seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "shape")]
    model: ModelArg,
}

/// A command failure carrying its exit code.
struct Failure {
    code: u8,
    body: serde_json::Value,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_validation() { 2 } else { 3 };
        Failure { code, body: json!({ "error": e.kind(), "message": e.to_string(), "exit_code": code }) }
    }
}

type CmdResult = Result<serde_json::Value, Failure>;

fn run_synth(a: SynthArgs) -> CmdResult {
    let mut cfg = match &a.config {
        Some(p) => read_json::<SynthConfig>(p)?,
        None => SynthConfig::for_task(a.task.map(Task::from).unwrap_or(Task::Regression)),
    };
    if let Some(t) = a.task {
        if a.config.is_some() {
            cfg.task = t.into();
        }
    }
    if let Some(v) = a.subjects {
        cfg.subjects = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.level {
        cfg.level = v;
    }
    if let Some(v) = a.shape_weight {
        cfg.shape_weight = v;
    }
    if let Some(v) = a.image_weight {
        cfg.image_weight = v;
    }
    let m = generate_synthetic(&cfg, &a.out)?;
    let [train, val, test] = m.split_sizes();
    Ok(json!({
        "manifest": a.out.join("manifest.csv"),
        "subjects": m.entries.len(),
        "split_sizes": { "train": train, "val": val, "test": test },
    }))
}

fn run_preprocess(a: PreprocessArgs) -> CmdResult {
    let choice = match (a.reference, a.reference_seed) {
        (Some(id), _) => ReferenceChoice::Explicit(id),
        (None, Some(s)) => ReferenceChoice::Seeded(s),
        (None, None) => ReferenceChoice::FirstId,
    };
    let index = pipeline::preprocess(&a.manifest, &a.out, &choice)?;
    Ok(json!({
        "run_id": index.run_id,
        "reference": index.reference,
        "subjects": index.subjects.len(),
        "split_sizes": index.split_sizes,
    }))
}

/// Regression when every subject has an age, otherwise classification when
/// every subject has a diagnosis.
fn infer_task(out: &Path) -> Result<Task, Error> {
    let index = read_index(out)?;
    if index.subjects.iter().all(|s| s.age.is_some()) {
        Ok(Task::Regression)
    } else if index.subjects.iter().all(|s| s.diagnosis.is_some()) {
        Ok(Task::Classification)
    } else {
        Err(Error::Invalid("cannot infer the task: subjects lack both complete ages and diagnoses".into()))
    }
}

fn run_train(a: TrainArgs) -> CmdResult {
    let mut cfg = match &a.config {
        Some(p) => read_json::<TrainConfig>(p)?,
        None => TrainConfig::default(),
    };
    match a.task {
        Some(t) => cfg.model.task = t.into(),
        None if a.config.is_none() => cfg.model.task = infer_task(&a.out)?,
        None => {}
    }
    if let Some(v) = a.layer {
        cfg.model.layer = v.into();
    }
    if let Some(v) = a.seed {
        cfg.seeds = vec![v];
    }
    if let Some(v) = a.seeds {
        cfg.seeds = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = Some(v);
    }
    if let Some(v) = a.epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = a.patience {
        cfg.patience = v;
    }
    if let Some(v) = a.augment {
        cfg.augment_strength = v;
    }
    if a.no_fusion {
        cfg.fusion = false;
    }
    if a.end_to_end {
        cfg.end_to_end = true;
    }
    let summary = pipeline::train_stage(&a.out, &cfg)?;
    let body = serde_json::to_value(&summary).expect("serializable");
    if summary.failures.is_empty() {
        Ok(body)
    } else {
        Err(Failure {
            code: 3,
            body: json!({
                "error": "seed_failed",
                "message": format!("{} of {} seeds failed", summary.failures.len(), summary.seeds.len()),
                "exit_code": 3,
                "failures": summary.failures,
            }),
        })
    }
}

fn run_evaluate(a: OutArgs) -> CmdResult {
    let evals = pipeline::evaluate_stage(&a.out, None)?;
    Ok(serde_json::to_value(&evals).expect("serializable"))
}

fn run_predict(a: PredictArgs) -> CmdResult {
    let seed = match a.seed {
        Some(s) => s,
        None => pipeline::read_train_config(&a.out)?.seeds[0],
    };
    let p = pipeline::predict_subject(&a.out, &a.meshes, a.embedding.as_deref(), seed, a.model.into())?;
    Ok(serde_json::to_value(&p).expect("serializable"))
}

fn run_report(a: OutArgs) -> CmdResult {
    let r = pipeline::report_stage(&a.out)?;
    Ok(json!({
        "table": a.out.join("report").join("table.csv"),
        "partial": r.partial,
        "csv": r.to_csv(),
    }))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Preprocess(a) => run_preprocess(a),
        Command::Train(a) => run_train(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Predict(a) => run_predict(a),
        Command::Report(a) => run_report(a),
    };
    match result {
        Ok(v) => {
            // A closed stdout (e.g. piped into `head`) is not an error.
            let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(&v).expect("serializable"));
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("{}", f.body);
            ExitCode::from(f.code)
        }
    }
}
