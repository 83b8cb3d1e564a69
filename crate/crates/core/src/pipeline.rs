//! Stages behind the command-line tool, all working on one output
//! directory with a fixed layout:
//!
//! ```text
//! <out>/preprocess/index.json            subjects, splits, labels, pseudo scales
//! <out>/preprocess/aligned/<id>/<s>.off  meshes registered to the reference
//! <out>/preprocess/cache/<sha256>.mff    FPFH features keyed by mesh content
//! <out>/preprocess/embeddings/<id>.mfe   validated copies of image embeddings
//! <out>/preprocess/transforms.csv        per-structure rigid transforms
//! <out>/train_run.json                   training configuration and seeds
//! <out>/seed_<n>/<mode>/checkpoint.mfck  parameters and normalization buffers
//! <out>/seed_<n>/<mode>/model.json       architecture and training summary
//! <out>/seed_<n>/<mode>/train_log.csv    per-epoch losses
//! <out>/seed_<n>/failed.json             present when the seed's run failed
//! <out>/seed_<n>/evaluation/metrics.json test-split metrics
//! <out>/seed_<n>/evaluation/roc_<mode>.csv
//! <out>/report/table.csv, table.json     mean ± std over seeds
//! ```
//!
//! Every stage also writes `<stage>_run.json` metadata. Artifacts carry the
//! stage's `run_id`, a hash of its configuration and inputs that excludes
//! timestamps.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::{align_dataset, apply_transform, select_reference, umeyama_rigid, ReferenceChoice, SubjectMeshes};
use crate::data::formats::{read_checkpoint, read_embedding, read_features, write_checkpoint, write_embedding, write_features};
use crate::data::manifest::load_manifest;
use crate::dataset::{canonical_order, Dataset, Split, SubjectData};
use crate::descriptors::{fpfh, FpfhFeatures};
use crate::error::{Error, Result};
use crate::gnn::pseudo_scale;
use crate::mesh::{load_mesh, mesh_to_graph, write_file, StructureId, TriangleMesh};
use crate::metrics::{classification_metrics, regression_metrics, MetricsReport, SeedResult};
use crate::model::{Mode, ModelConfig, Task};
use crate::train::{train, EpochRecord, TrainConfig, TrainedModel};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Version tag mixed into feature cache keys.
const FEATURE_CACHE_TAG: &str = "fpfh-v1";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    write_file(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))
}

/// Provenance of one stage invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub command: String,
    pub version: String,
    pub run_id: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    /// Input file name to SHA-256 of its content.
    pub inputs: BTreeMap<String, String>,
    /// Where inputs were read from; not part of the run id, so moving a
    /// dataset does not change it.
    #[serde(default)]
    pub locations: BTreeMap<String, String>,
    pub started: String,
    pub finished: Option<String>,
}

impl RunMetadata {
    pub fn new(command: &str, config: &impl Serialize, seeds: Vec<u64>, inputs: BTreeMap<String, String>) -> Self {
        let config = serde_json::to_value(config).expect("serializable");
        let key = serde_json::json!([command, VERSION, &config, &seeds, &inputs]);
        let run_id = sha256_hex(key.to_string().as_bytes())[..16].to_string();
        RunMetadata {
            command: command.to_string(),
            version: VERSION.to_string(),
            run_id,
            config,
            seeds,
            inputs,
            locations: BTreeMap::new(),
            started: chrono::Utc::now().to_rfc3339(),
            finished: None,
        }
    }

    fn finish(mut self, path: &Path) -> Result<Self> {
        self.finished = Some(chrono::Utc::now().to_rfc3339());
        write_json(path, &self)?;
        Ok(self)
    }
}

/// Paths inside an output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn preprocess_dir(&self) -> PathBuf {
        self.root.join("preprocess")
    }

    pub fn index_path(&self) -> PathBuf {
        self.preprocess_dir().join("index.json")
    }

    pub fn run_path(&self, stage: &str) -> PathBuf {
        self.root.join(format!("{stage}_run.json"))
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed_{seed}"))
    }

    pub fn model_dir(&self, seed: u64, mode: Mode) -> PathBuf {
        self.seed_dir(seed).join(mode.key())
    }

    pub fn checkpoint_path(&self, seed: u64, mode: Mode) -> PathBuf {
        self.model_dir(seed, mode).join("checkpoint.mfck")
    }

    pub fn failed_path(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("failed.json")
    }

    pub fn evaluation_dir(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("evaluation")
    }

    pub fn metrics_path(&self, seed: u64) -> PathBuf {
        self.evaluation_dir(seed).join("metrics.json")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl From<[usize; 3]> for SplitSizes {
    fn from(s: [usize; 3]) -> Self {
        SplitSizes { train: s[0], val: s[1], test: s[2] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub age: Option<f64>,
    pub diagnosis: Option<u8>,
    pub split: Split,
    /// Paths relative to the preprocess directory.
    pub embedding: Option<String>,
    pub meshes: Vec<String>,
    pub features: String,
}

/// Everything later stages need from preprocessing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedIndex {
    pub run_id: String,
    pub reference: String,
    /// Canonical structure order.
    pub pseudo_scales: Vec<f64>,
    pub split_sizes: SplitSizes,
    pub subjects: Vec<IndexEntry>,
}

#[derive(Debug, Clone, Serialize)]
struct PreprocessConfig {
    reference: String,
}

/// Loads the manifest's meshes, aligns every structure to the reference
/// subject, computes FPFH features (reusing cached ones) and records the
/// result under `<out>/preprocess`.
pub fn preprocess(manifest_path: &Path, out: &Path, reference: &ReferenceChoice) -> Result<PreparedIndex> {
    let layout = Layout::new(out);
    let manifest = load_manifest(manifest_path)?;
    let mut inputs = BTreeMap::new();
    inputs.insert("manifest".to_string(), sha256_file(manifest_path)?);
    let files: Vec<PathBuf> = manifest
        .entries
        .iter()
        .flat_map(|e| e.meshes.iter().chain(&e.embedding).map(|p| manifest.resolve(p)))
        .collect();
    let digests = files.par_iter().map(|p| sha256_file(p)).collect::<Result<Vec<String>>>()?;
    inputs.insert("meshes_and_embeddings".to_string(), sha256_hex(digests.concat().as_bytes()));
    let ref_id = select_reference(manifest.entries.iter().map(|e| e.id.as_str()), reference)?;
    let mut meta = RunMetadata::new("preprocess", &PreprocessConfig { reference: ref_id.clone() }, vec![], inputs);
    meta.locations.insert("manifest".to_string(), manifest_path.display().to_string());

    log::info!("loading meshes for {} subjects", manifest.entries.len());
    let raw: Vec<SubjectMeshes> = manifest
        .entries
        .par_iter()
        .map(|e| -> Result<SubjectMeshes> {
            let meshes = StructureId::ALL
                .iter()
                .map(|&s| Ok((s, load_mesh(&manifest.resolve(e.mesh(s)), s)?)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            Ok(SubjectMeshes { id: e.id.clone(), meshes })
        })
        .collect::<Result<_>>()?;
    log::info!("aligning to reference {ref_id}");
    let aligned = align_dataset(&raw, &ref_id)?;

    let pre = layout.preprocess_dir();
    let entries: Vec<IndexEntry> = manifest
        .entries
        .par_iter()
        .zip(&aligned.subjects)
        .map(|(e, a)| -> Result<IndexEntry> {
            let meshes: Vec<&TriangleMesh> = a.meshes.values().collect();
            let mut hasher = Sha256::new();
            hasher.update(FEATURE_CACHE_TAG);
            let mut mesh_paths = Vec::with_capacity(StructureId::COUNT);
            for m in &meshes {
                let off = m.to_off_string();
                hasher.update(off.as_bytes());
                let rel = format!("aligned/{}/{}.off", e.id, m.structure().key());
                write_file(&pre.join(&rel), off.as_bytes())?;
                mesh_paths.push(rel);
            }
            let features = format!("cache/{}.mff", hex::encode(hasher.finalize()));
            let cache = pre.join(&features);
            let cached = cache.is_file() && read_features(&cache).is_ok_and(|f| features_match(&f, &meshes));
            if !cached {
                let feats = meshes
                    .iter()
                    .map(|m| fpfh(m, &mesh_to_graph(m)).map_err(|err| annotate(&e.id, m.structure(), err)))
                    .collect::<Result<Vec<_>>>()?;
                write_features(&cache, &feats)?;
            }
            let embedding = match &e.embedding {
                Some(p) => {
                    let v = read_embedding(&manifest.resolve(p))?;
                    let rel = format!("embeddings/{}.mfe", e.id);
                    write_embedding(&pre.join(&rel), &v)?;
                    Some(rel)
                }
                None => None,
            };
            Ok(IndexEntry {
                id: e.id.clone(),
                age: e.age,
                diagnosis: e.diagnosis,
                split: e.split,
                embedding,
                meshes: mesh_paths,
                features,
            })
        })
        .collect::<Result<_>>()?;

    let reference_subject = &aligned.subjects[manifest.entries.iter().position(|e| e.id == ref_id).expect("selected")];
    let pseudo_scales = reference_subject
        .meshes
        .values()
        .map(|m| pseudo_scale(m, &mesh_to_graph(m)))
        .collect::<Result<Vec<_>>>()?;

    let mut transforms = String::from("subject,structure,r00,r01,r02,r10,r11,r12,r20,r21,r22,tx,ty,tz\n");
    for rec in &aligned.log {
        let vals: Vec<String> = rec.transform.iter().map(|v| v.to_string()).collect();
        transforms.push_str(&format!("{},{},{}\n", rec.subject, rec.structure, vals.join(",")));
    }
    write_file(&pre.join("transforms.csv"), transforms.as_bytes())?;

    let index = PreparedIndex {
        run_id: meta.run_id.clone(),
        reference: ref_id,
        pseudo_scales,
        split_sizes: manifest.split_sizes().into(),
        subjects: entries,
    };
    write_json(&layout.index_path(), &index)?;
    meta.finish(&layout.run_path("preprocess"))?;
    log::info!(
        "preprocessed {} subjects (train {}, val {}, test {})",
        index.subjects.len(),
        index.split_sizes.train,
        index.split_sizes.val,
        index.split_sizes.test
    );
    Ok(index)
}

fn features_match(f: &[FpfhFeatures], meshes: &[&TriangleMesh]) -> bool {
    f.len() == meshes.len() && f.iter().zip(meshes).all(|(f, m)| f.num_nodes() == m.num_vertices())
}

fn annotate(subject: &str, s: StructureId, e: Error) -> Error {
    match e {
        Error::DegenerateGeometry { vertex, reason } => {
            Error::DegenerateGeometry { vertex, reason: format!("subject {subject} {s}: {reason}") }
        }
        Error::IsolatedVertex { vertex } => {
            Error::InvalidMesh(format!("subject {subject} {s}: isolated vertex {vertex}"))
        }
        other => other,
    }
}

/// Records which subjects a stage read from the prepared dataset.
#[derive(Debug, Default)]
pub struct AccessLog(Mutex<Vec<(String, Split)>>);

impl AccessLog {
    pub fn new() -> Self {
        Self::default()
    }

    fn record(&self, id: &str, split: Split) {
        self.0.lock().expect("access log poisoned").push((id.to_string(), split));
    }

    pub fn entries(&self) -> Vec<(String, Split)> {
        let mut v = self.0.lock().expect("access log poisoned").clone();
        v.sort();
        v
    }
}

pub fn read_index(out: &Path) -> Result<PreparedIndex> {
    let path = Layout::new(out).index_path();
    if !path.is_file() {
        return Err(Error::MissingArtifact { path, what: "preprocessed dataset index (run `preprocess` first)".into() });
    }
    read_json(&path)
}

/// Loads the prepared subjects whose split passes `keep`. Nothing of the
/// other subjects is read beyond their index row.
pub fn load_subjects(out: &Path, keep: &[Split], access: Option<&AccessLog>) -> Result<(PreparedIndex, Vec<SubjectData>)> {
    let index = read_index(out)?;
    let pre = Layout::new(out).preprocess_dir();
    let subjects = index
        .subjects
        .par_iter()
        .filter(|e| keep.contains(&e.split))
        .map(|e| -> Result<SubjectData> {
            if let Some(log) = access {
                log.record(&e.id, e.split);
            }
            let meshes = StructureId::ALL
                .iter()
                .zip(&e.meshes)
                .map(|(&s, p)| load_mesh(&pre.join(p), s))
                .collect::<Result<Vec<_>>>()?;
            let features = read_features(&pre.join(&e.features))?;
            if !features_match(&features, &meshes.iter().collect::<Vec<_>>()) {
                return Err(Error::format(pre.join(&e.features), format!("features do not match meshes of subject {}", e.id)));
            }
            let image = e.embedding.as_ref().map(|p| read_embedding(&pre.join(p))).transpose()?;
            Ok(SubjectData {
                id: e.id.clone(),
                split: e.split,
                age: e.age,
                diagnosis: e.diagnosis,
                topologies: meshes.iter().map(mesh_to_graph).collect(),
                meshes,
                features,
                image,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((index, subjects))
}

/// Models trained per seed, in report order.
pub fn planned_modes(config: &TrainConfig) -> Vec<Mode> {
    let mut modes = vec![Mode::Shape];
    if config.fusion {
        modes.push(Mode::Image);
        modes.push(if config.end_to_end { Mode::FusionEndToEnd } else { Mode::Fusion });
    }
    modes
}

/// Row label in report tables.
pub fn model_name(config: &ModelConfig, mode: Mode) -> String {
    let layer = config.layer.display_name();
    match mode {
        Mode::Shape => layer.to_string(),
        Mode::Image => "Image".to_string(),
        Mode::Fusion => format!("Fusion {layer}"),
        Mode::FusionEndToEnd => format!("Fusion {layer} (end-to-end)"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub run_id: String,
    pub seed: u64,
    pub mode: Mode,
    pub model: ModelConfig,
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// Augmented sample count per split: train, val, test.
    pub augmented: [usize; 3],
    pub split_sizes: SplitSizes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub mode: Mode,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub run_id: String,
    pub seeds: Vec<u64>,
    pub modes: Vec<Mode>,
    pub failures: Vec<SeedFailure>,
}

fn log_csv(log: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss\n");
    for r in log {
        s.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.val_loss));
    }
    s
}

/// Trains the shape model and, when configured, the image and fusion
/// models for every seed. A failing seed is recorded in
/// `seed_<n>/failed.json` and the remaining seeds still run.
pub fn train_stage(out: &Path, config: &TrainConfig) -> Result<TrainSummary> {
    config.validate()?;
    let layout = Layout::new(out);
    let mut inputs = BTreeMap::new();
    inputs.insert("index".to_string(), sha256_file(&layout.index_path()).map_err(|_| Error::MissingArtifact {
        path: layout.index_path(),
        what: "preprocessed dataset index (run `preprocess` first)".into(),
    })?);
    let meta = RunMetadata::new("train", config, config.seeds.clone(), inputs);

    let (index, subjects) = load_subjects(out, &[Split::Train, Split::Val], None)?;
    check_labels(&subjects, config.model.task)?;
    let modes = planned_modes(config);
    if modes.len() > 1 {
        if let Some(s) = subjects.iter().find(|s| s.image.is_none()) {
            return Err(Error::Invalid(format!(
                "fusion needs an image embedding for every subject; {} has none (set fusion to false to train the shape model only)",
                s.id
            )));
        }
    }
    let data = Dataset { subjects, pseudo_scales: index.pseudo_scales.clone() };

    let mut failures = Vec::new();
    for &seed in &config.seeds {
        let seed_dir = layout.seed_dir(seed);
        if seed_dir.exists() {
            fs::remove_dir_all(&seed_dir).map_err(|e| Error::io(&seed_dir, e))?;
        }
        let mut shape: Option<TrainedModel> = None;
        for &mode in &modes {
            log::info!("seed {seed}: training {} model", mode.key());
            let frozen = if mode == Mode::Fusion { shape.as_ref() } else { None };
            match train(config, &data, mode, seed, frozen) {
                Ok(outcome) => {
                    let dir = layout.model_dir(seed, mode);
                    write_checkpoint(&layout.checkpoint_path(seed, mode), &outcome.trained.checkpoint())?;
                    write_file(&dir.join("train_log.csv"), log_csv(&outcome.log).as_bytes())?;
                    let record = ModelRecord {
                        run_id: meta.run_id.clone(),
                        seed,
                        mode,
                        model: config.model.clone(),
                        best_epoch: outcome.best_epoch,
                        epochs_run: outcome.log.len(),
                        augmented: outcome.augmented,
                        split_sizes: index.split_sizes,
                    };
                    write_json(&dir.join("model.json"), &record)?;
                    if mode == Mode::Shape {
                        shape = Some(outcome.trained);
                    }
                }
                Err(e) if !e.is_validation() => {
                    log::warn!("seed {seed}: {} model failed: {e}", mode.key());
                    if let Error::Diverged { log, .. } = &e {
                        write_file(&layout.model_dir(seed, mode).join("train_log.csv"), log_csv(log).as_bytes())?;
                    }
                    let f = SeedFailure { seed, mode, kind: e.kind().to_string(), message: e.to_string() };
                    write_json(&layout.failed_path(seed), &f)?;
                    failures.push(f);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
    }
    let summary = TrainSummary { run_id: meta.run_id.clone(), seeds: config.seeds.clone(), modes, failures };
    meta.finish(&layout.run_path("train"))?;
    Ok(summary)
}

fn check_labels(subjects: &[SubjectData], task: Task) -> Result<()> {
    for s in subjects {
        let ok = match task {
            Task::Regression => s.age.is_some(),
            Task::Classification => s.diagnosis.is_some(),
        };
        if !ok {
            return Err(Error::Invalid(format!("subject {} lacks the label required for {task:?}", s.id)));
        }
    }
    Ok(())
}

/// The training configuration recorded by the last `train` run.
pub fn read_train_config(out: &Path) -> Result<TrainConfig> {
    let layout = Layout::new(out);
    let path = layout.run_path("train");
    if !path.is_file() {
        return Err(Error::MissingArtifact {
            path: layout.checkpoint_path(0, Mode::Shape),
            what: "model checkpoint (run `train` first)".into(),
        });
    }
    let meta: RunMetadata = read_json(&path)?;
    serde_json::from_value(meta.config).map_err(|e| Error::format(&path, format!("bad training config: {e}")))
}

pub fn load_model(out: &Path, seed: u64, mode: Mode) -> Result<(ModelRecord, TrainedModel)> {
    let layout = Layout::new(out);
    let ck = layout.checkpoint_path(seed, mode);
    let store = read_checkpoint(&ck)?;
    let record: ModelRecord = read_json(&layout.model_dir(seed, mode).join("model.json"))?;
    if record.mode != mode {
        return Err(Error::format(&ck, format!("model.json describes a {} model", record.mode.key())));
    }
    let trained = TrainedModel::from_checkpoint(record.model.clone(), mode, &store)?;
    Ok((record, trained))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub model: String,
    pub mode: Mode,
    /// Column name to value, in report column order.
    pub metrics: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEvaluation {
    pub run_id: String,
    pub seed: u64,
    pub task: Task,
    pub test_subjects: usize,
    pub models: Vec<ModelMetrics>,
    pub notes: Vec<String>,
}

/// Conventions and unstated-in-source defaults the reported numbers rest
/// on.
pub fn report_notes(config: &TrainConfig) -> Vec<String> {
    let batch = config.batch_size.map_or("full training split".to_string(), |b| b.to_string());
    vec![
        "operating points use the step-function convention (no interpolation between ROC points)".into(),
        format!(
            "toolkit defaults: max_epochs={}, early-stopping patience={} on validation loss, batch size {}",
            config.max_epochs, config.patience, batch
        ),
        "standard deviation over seeds uses the population formula".into(),
    ]
}

/// Scores test subjects with every trained model of every seed that did
/// not fail. Only test rows of the prepared dataset are read.
pub fn evaluate_stage(out: &Path, access: Option<&AccessLog>) -> Result<Vec<SeedEvaluation>> {
    let layout = Layout::new(out);
    let config = read_train_config(out)?;
    let modes = planned_modes(&config);
    let runnable: Vec<u64> = config.seeds.iter().copied().filter(|&s| !layout.failed_path(s).exists()).collect();
    for &seed in &runnable {
        for &mode in &modes {
            let ck = layout.checkpoint_path(seed, mode);
            if !ck.is_file() {
                return Err(Error::MissingArtifact { path: ck, what: "model checkpoint (run `train` first)".into() });
            }
        }
    }
    let mut inputs = BTreeMap::new();
    inputs.insert("index".to_string(), sha256_file(&layout.index_path())?);
    for &seed in &runnable {
        for &mode in &modes {
            inputs.insert(format!("seed_{seed}/{}", mode.key()), sha256_file(&layout.checkpoint_path(seed, mode))?);
        }
    }
    let meta = RunMetadata::new("evaluate", &config, runnable.clone(), inputs);

    let (_, subjects) = load_subjects(out, &[Split::Test], access)?;
    if subjects.is_empty() {
        return Err(Error::Invalid("the test split is empty".into()));
    }
    check_labels(&subjects, config.model.task)?;
    let task = config.model.task;
    let mut results = Vec::new();
    for &seed in &runnable {
        let eval_dir = layout.evaluation_dir(seed);
        let mut shape: Option<TrainedModel> = None;
        let mut models = Vec::new();
        for &mode in &modes {
            let (_, trained) = load_model(out, seed, mode)?;
            let frozen = if mode == Mode::Fusion { shape.as_ref() } else { None };
            let preds = subjects.iter().map(|s| trained.predict(s, frozen)).collect::<Result<Vec<f64>>>()?;
            let mut pred_csv = String::from("subject_id,target,prediction\n");
            let metrics = match task {
                Task::Regression => {
                    let y: Vec<f64> = subjects.iter().map(|s| s.age.expect("checked")).collect();
                    for (s, (t, p)) in subjects.iter().zip(y.iter().zip(&preds)) {
                        pred_csv.push_str(&format!("{},{t},{p}\n", s.id));
                    }
                    let m = regression_metrics(&preds, &y)?;
                    vec![("MAE".to_string(), m.mae), ("R2".to_string(), m.r2)]
                }
                Task::Classification => {
                    let y: Vec<u8> = subjects.iter().map(|s| s.diagnosis.expect("checked")).collect();
                    for (s, (t, p)) in subjects.iter().zip(y.iter().zip(&preds)) {
                        pred_csv.push_str(&format!("{},{t},{p}\n", s.id));
                    }
                    let (m, roc) = classification_metrics(&preds, &y)?;
                    write_file(&eval_dir.join(format!("roc_{}.csv", mode.key())), roc.to_csv().as_bytes())?;
                    crate::metrics::columns(task).iter().map(|c| c.to_string()).zip(m.values()).collect()
                }
            };
            write_file(&eval_dir.join(format!("predictions_{}.csv", mode.key())), pred_csv.as_bytes())?;
            models.push(ModelMetrics { model: model_name(&config.model, mode), mode, metrics });
            if mode == Mode::Shape {
                shape = Some(trained);
            }
        }
        let ev = SeedEvaluation {
            run_id: meta.run_id.clone(),
            seed,
            task,
            test_subjects: subjects.len(),
            models,
            notes: report_notes(&config),
        };
        write_json(&layout.metrics_path(seed), &ev)?;
        results.push(ev);
    }
    meta.finish(&layout.run_path("evaluate"))?;
    Ok(results)
}

/// Aggregates per-seed evaluations into `report/table.csv` and
/// `report/table.json`. Seeds that failed or were never evaluated are
/// missing values, which marks the report partial.
pub fn report_stage(out: &Path) -> Result<MetricsReport> {
    let layout = Layout::new(out);
    let config = read_train_config(out)?;
    let modes = planned_modes(&config);
    let mut evals: BTreeMap<u64, SeedEvaluation> = BTreeMap::new();
    let mut inputs = BTreeMap::new();
    for &seed in &config.seeds {
        let p = layout.metrics_path(seed);
        if p.is_file() {
            inputs.insert(format!("seed_{seed}/metrics"), sha256_file(&p)?);
            evals.insert(seed, read_json(&p)?);
        }
    }
    if evals.is_empty() {
        return Err(Error::MissingArtifact {
            path: layout.metrics_path(config.seeds[0]),
            what: "evaluation metrics (run `evaluate` first)".into(),
        });
    }
    let meta = RunMetadata::new("report", &config, config.seeds.clone(), inputs);
    let rows = modes
        .iter()
        .map(|&mode| {
            let seeds = config
                .seeds
                .iter()
                .map(|&seed| SeedResult {
                    seed,
                    values: evals
                        .get(&seed)
                        .and_then(|e| e.models.iter().find(|m| m.mode == mode))
                        .map(|m| m.metrics.iter().map(|(_, v)| *v).collect()),
                })
                .collect();
            (model_name(&config.model, mode), seeds)
        })
        .collect();
    let report = MetricsReport::new(config.model.task, rows, report_notes(&config))?;
    let dir = layout.report_dir();
    write_file(&dir.join("table.csv"), report.to_csv().as_bytes())?;
    write_json(&dir.join("table.json"), &report)?;
    meta.finish(&layout.run_path("report"))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub seed: u64,
    pub mode: Mode,
    pub task: Task,
    /// Years for regression, probability of class 1 for classification.
    pub value: f64,
}

/// Finds `<structure>.off` or `<structure>.ply` for every structure in
/// `dir`.
fn subject_meshes_from_dir(dir: &Path) -> Result<Vec<TriangleMesh>> {
    let mut missing = Vec::new();
    let mut meshes = Vec::new();
    for s in StructureId::ALL {
        let found = ["off", "ply"].iter().map(|ext| dir.join(format!("{}.{ext}", s.key()))).find(|p| p.is_file());
        match found {
            Some(p) => meshes.push(load_mesh(&p, s)?),
            None => missing.push(s),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingStructures { subject: dir.display().to_string(), structures: missing });
    }
    Ok(meshes)
}

/// Single-subject inference: the meshes in `mesh_dir` are registered to the
/// training reference, featurized, and scored by the `mode` model of
/// `seed`.
pub fn predict_subject(out: &Path, mesh_dir: &Path, embedding: Option<&Path>, seed: u64, mode: Mode) -> Result<Prediction> {
    let index = read_index(out)?;
    let pre = Layout::new(out).preprocess_dir();
    let reference = index
        .subjects
        .iter()
        .find(|e| e.id == index.reference)
        .ok_or_else(|| Error::format(Layout::new(out).index_path(), "reference subject missing from index"))?;
    let (_, trained) = load_model(out, seed, mode)?;
    let frozen = if mode == Mode::Fusion { Some(load_model(out, seed, Mode::Shape)?.1) } else { None };

    let raw = canonical_order("prediction subject", subject_meshes_from_dir(mesh_dir)?)?;
    let mut meshes = Vec::with_capacity(StructureId::COUNT);
    for (m, rel) in raw.iter().zip(&reference.meshes) {
        let target = load_mesh(&pre.join(rel), m.structure())?;
        if target.num_vertices() != m.num_vertices() {
            return Err(Error::VertexCountMismatch {
                subject: mesh_dir.display().to_string(),
                structures: vec![m.structure()],
            });
        }
        let t = umeyama_rigid(m.vertices(), target.vertices())?;
        meshes.push(apply_transform(&t, m));
    }
    let image = embedding.map(read_embedding).transpose()?;
    let subject = SubjectData::from_meshes("prediction", Split::Test, None, None, meshes, image)?;
    let value = trained.predict(&subject, frozen.as_ref())?;
    Ok(Prediction { seed, mode, task: trained.task(), value })
}
