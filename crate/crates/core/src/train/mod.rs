//! Optimization loop: input standardization, per-epoch augmentation,
//! mini-batch Adam with per-sample tapes, and early stopping on validation
//! loss.

mod adam;
mod augment;
mod loss;
mod normalize;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use augment::augment_translate;
pub use loss::{cross_entropy, mse};
pub use normalize::{Normalizer, Standardizer, STD_FLOOR};

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::dataset::{Dataset, Split, SubjectData};
use crate::descriptors::{fpfh, FpfhFeatures, FPFH_DIM};
use crate::error::{Error, Result};
use crate::gnn::{compute_pseudo, GcnGraph, GraphPlan, LayerKind, SplineGraph};
use crate::mesh::{StructureId, TriangleMesh};
use crate::model::{Mode, Model, ModelConfig, SampleInput, StructureGraph, SubjectGraphs, Task};

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    /// Samples per optimizer step; `None` uses the whole training split.
    pub batch_size: Option<usize>,
    pub max_epochs: usize,
    /// Epochs without a new best validation loss before stopping.
    pub patience: usize,
    pub seeds: Vec<u64>,
    /// Maximum per-component vertex translation in mm.
    pub augment_strength: f64,
    /// Train the fusion head after the standalone branches.
    pub fusion: bool,
    /// Train shape branch and fusion head jointly instead of on frozen
    /// embeddings.
    pub end_to_end: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            learning_rate: 1e-3,
            batch_size: None,
            max_epochs: 500,
            patience: 20,
            seeds: vec![0, 1, 2],
            augment_strength: 0.1,
            fusion: true,
            end_to_end: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Invalid("seeds must not be empty".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Invalid("batch_size must be positive".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Invalid("max_epochs must be positive".into()));
        }
        if !(self.augment_strength >= 0.0 && self.augment_strength.is_finite()) {
            return Err(Error::Invalid(format!("augment_strength must be >= 0, got {}", self.augment_strength)));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Independent random streams derived from a run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Augment = 3,
}

pub fn derive_seed(seed: u64, stream: Stream) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng.next_u64()
}

/// Generator for one subject's augmentation in one epoch; independent of
/// thread scheduling.
fn augment_rng(seed: u64, epoch: usize, subject: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, Stream::Augment));
    rng.set_stream(((epoch as u64) << 32) | subject as u64);
    rng
}

/// A model with the statistics needed to feed it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub model: Model<f32>,
    pub norm: Normalizer,
}

/// Prepared input for one subject.
#[derive(Debug, Clone)]
enum Prepared {
    Graphs(SubjectGraphs<f32>),
    Vector(Tensor<f32>),
    Both(SubjectGraphs<f32>, Tensor<f32>),
}

impl Prepared {
    fn input(&self) -> SampleInput<'_, f32> {
        match self {
            Prepared::Graphs(g) => SampleInput::Graphs(g),
            Prepared::Vector(v) => SampleInput::Vector(v),
            Prepared::Both(g, v) => SampleInput::GraphsAndVector(g, v),
        }
    }
}

fn build_graphs(
    subject: &SubjectData,
    config: &ModelConfig,
    norm: &Normalizer,
    meshes: &[TriangleMesh],
    features: &[FpfhFeatures],
) -> Result<SubjectGraphs<f32>> {
    let stats = norm
        .fpfh
        .as_ref()
        .ok_or_else(|| Error::Invalid("normalizer lacks FPFH statistics".into()))?;
    let mut parts = Vec::with_capacity(StructureId::COUNT);
    for s in StructureId::ALL {
        let i = s.index();
        let topo = &subject.topologies[i];
        let feats = stats[i].apply(features[i].as_slice());
        let features = Tensor::new(vec![features[i].num_nodes(), FPFH_DIM], feats)?;
        let graph = match config.layer {
            LayerKind::Gcn => GraphPlan::Gcn(GcnGraph::new(topo)),
            LayerKind::Spline => {
                let pseudo = compute_pseudo(&meshes[i], topo, norm.pseudo_scales[i] as f64)?;
                GraphPlan::Spline(SplineGraph::new(topo, &pseudo, config.kernel_size)?)
            }
        };
        parts.push((s, StructureGraph { features, graph }));
    }
    SubjectGraphs::new(&subject.id, parts)
}

fn image_of(subject: &SubjectData, dim: usize) -> Result<&[f32]> {
    let img = subject
        .image
        .as_deref()
        .ok_or_else(|| Error::Invalid(format!("subject {} has no image embedding", subject.id)))?;
    if img.len() != dim {
        return Err(Error::shape(
            "image_embedding",
            format!("subject {}: dim {} vs configured {dim}", subject.id, img.len()),
        ));
    }
    Ok(img)
}

impl TrainedModel {
    pub fn mode(&self) -> Mode {
        self.model.mode
    }

    pub fn task(&self) -> Task {
        self.model.config.task
    }

    /// Shape embedding of a subject computed without augmentation.
    pub fn shape_embedding(&self, subject: &SubjectData) -> Result<Vec<f32>> {
        let g = build_graphs(subject, &self.model.config, &self.norm, &subject.meshes, &subject.features)?;
        self.model.embed(&g)
    }

    /// Head input before standardization for vector modes.
    fn raw_vector(&self, subject: &SubjectData, frozen: Option<&TrainedModel>) -> Result<Vec<f32>> {
        let img = image_of(subject, self.model.config.image_dim)?;
        match self.mode() {
            Mode::Image | Mode::FusionEndToEnd => Ok(img.to_vec()),
            Mode::Fusion => {
                let shape = frozen.ok_or_else(|| Error::Invalid("fusion model needs the frozen shape model".into()))?;
                let mut v = shape.shape_embedding(subject)?;
                v.extend_from_slice(img);
                Ok(v)
            }
            Mode::Shape => unreachable!("shape models take graphs"),
        }
    }

    fn prepare(
        &self,
        subject: &SubjectData,
        frozen: Option<&TrainedModel>,
        geometry: Option<(&[TriangleMesh], &[FpfhFeatures])>,
    ) -> Result<Prepared> {
        let (meshes, feats) = geometry.unwrap_or((&subject.meshes, &subject.features));
        let vector = |raw: Vec<f32>| -> Result<Tensor<f32>> {
            let s = self.norm.input.as_ref().ok_or_else(|| Error::Invalid("normalizer lacks input statistics".into()))?;
            Ok(Tensor::vector(s.apply(&raw)))
        };
        Ok(match self.mode() {
            Mode::Shape => Prepared::Graphs(build_graphs(subject, &self.model.config, &self.norm, meshes, feats)?),
            Mode::Image | Mode::Fusion => Prepared::Vector(vector(self.raw_vector(subject, frozen)?)?),
            Mode::FusionEndToEnd => Prepared::Both(
                build_graphs(subject, &self.model.config, &self.norm, meshes, feats)?,
                vector(self.raw_vector(subject, frozen)?)?,
            ),
        })
    }

    /// Predicted age in years, or probability of the positive class.
    pub fn predict(&self, subject: &SubjectData, frozen: Option<&TrainedModel>) -> Result<f64> {
        let p = self.prepare(subject, frozen, None)?;
        let out = self.model.predict(p.input())?;
        Ok(self.output_to_score(&out))
    }

    fn output_to_score(&self, out: &[f32]) -> f64 {
        match self.task() {
            Task::Regression => self.norm.target_from_model(out[0] as f64),
            Task::Classification => {
                let z: Vec<f64> = out.iter().map(|&x| x as f64).collect();
                crate::model::softmax(&z)[1]
            }
        }
    }

    /// Parameters and `norm.*` buffers in one store.
    pub fn checkpoint(&self) -> ParamStore<f32> {
        let mut store = self.model.params.clone();
        for (k, v) in self.norm.to_buffers() {
            store.insert(k, v).expect("buffer names are disjoint from parameters");
        }
        store
    }

    pub fn from_checkpoint(config: ModelConfig, mode: Mode, store: &ParamStore<f32>) -> Result<Self> {
        let norm = Normalizer::from_buffers(store)?;
        let params: ParamStore<f32> = store
            .iter()
            .filter(|(k, _)| !k.starts_with("norm."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Ok(TrainedModel { model: Model::from_params(config, mode, params)?, norm })
    }
}

/// Result of one training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trained: TrainedModel,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Augmented sample count per split (train, val, test). Only the first
    /// entry may be non-zero.
    pub augmented: [usize; 3],
}

fn fit_normalizer(
    config: &TrainConfig,
    data: &Dataset,
    mode: Mode,
    frozen: Option<&TrainedModel>,
    train: &[&SubjectData],
) -> Result<Normalizer> {
    let mc = &config.model;
    let target = match mc.task {
        Task::Regression => {
            let ages = train
                .iter()
                .map(|s| s.age.map(|a| a as f32).ok_or_else(|| Error::Invalid(format!("subject {} lacks age", s.id))))
                .collect::<Result<Vec<f32>>>()?;
            let rows: Vec<&[f32]> = ages.iter().map(std::slice::from_ref).collect();
            let s = Standardizer::fit(1, rows)?;
            (s.mean[0], s.std[0])
        }
        Task::Classification => (0.0, 1.0),
    };
    let fpfh = if mode.has_shape_branch() {
        let per_structure = StructureId::ALL
            .iter()
            .map(|&s| {
                let rows = train
                    .iter()
                    .flat_map(|subj| subj.features[s.index()].as_slice().chunks(FPFH_DIM));
                Standardizer::fit(FPFH_DIM, rows)
            })
            .collect::<Result<Vec<_>>>()?;
        Some(per_structure)
    } else {
        None
    };
    let mut norm = Normalizer {
        fpfh,
        input: None,
        target,
        pseudo_scales: data.pseudo_scales.iter().map(|&r| r as f32).collect(),
    };
    if mode != Mode::Shape {
        let probe = TrainedModel { model: Model::init(mc.clone(), mode, 0)?, norm: norm.clone() };
        let raws = train
            .iter()
            .map(|s| probe.raw_vector(s, frozen))
            .collect::<Result<Vec<_>>>()?;
        let dim = mc.head_input_dim(mode) - if mode == Mode::FusionEndToEnd { mc.shape_embedding_dim() } else { 0 };
        norm.input = Some(Standardizer::fit(dim, raws.iter().map(|r| r.as_slice()))?);
    }
    Ok(norm)
}

#[derive(Clone, Copy)]
enum Label {
    Value(f32),
    Class(usize),
}

fn label_of(subject: &SubjectData, task: Task, norm: &Normalizer) -> Result<Label> {
    match task {
        Task::Regression => subject
            .age
            .map(|a| Label::Value(norm.target_to_model(a) as f32))
            .ok_or_else(|| Error::Invalid(format!("subject {} lacks age", subject.id))),
        Task::Classification => match subject.diagnosis {
            Some(d @ (0 | 1)) => Ok(Label::Class(d as usize)),
            Some(d) => Err(Error::Invalid(format!("subject {}: diagnosis {d} is not 0 or 1", subject.id))),
            None => Err(Error::Invalid(format!("subject {} lacks diagnosis", subject.id))),
        },
    }
}

fn sample_loss(tape: &mut Tape<f32>, model: &Model<f32>, input: &Prepared, label: Label) -> Result<Var> {
    let out = model.forward(tape, input.input())?;
    match label {
        Label::Value(y) => {
            let t = tape.constant(Tensor::vector(vec![y]));
            mse(tape, out, t)
        }
        Label::Class(c) => cross_entropy(tape, out, &[c]),
    }
}

/// Samples per parallel work unit; fixed so the gradient summation order
/// does not depend on the thread count.
const CHUNK: usize = 4;

/// Gradient of `(1/|batch|) Σ loss_i` and the summed unscaled loss.
fn batch_gradient(
    model: &Model<f32>,
    inputs: &[&Prepared],
    labels: &[Label],
) -> Result<(BTreeMap<String, Tensor<f32>>, f64)> {
    let scale = 1.0 / inputs.len() as f32;
    let partials: Vec<(BTreeMap<String, Tensor<f32>>, f64)> = inputs
        .par_chunks(CHUNK)
        .zip(labels.par_chunks(CHUNK))
        .map(|(ins, labs)| -> Result<_> {
            let mut acc: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
            let mut loss_sum = 0.0;
            for (inp, &lab) in ins.iter().zip(labs) {
                let mut tape = Tape::new();
                let l = sample_loss(&mut tape, model, inp, lab)?;
                loss_sum += tape.value(l).item() as f64;
                let scaled = tape.scale(l, scale);
                for (k, g) in tape.backward(scaled)?.into_params() {
                    match acc.get_mut(&k) {
                        Some(a) => a.add_assign(&g),
                        None => {
                            acc.insert(k, g);
                        }
                    }
                }
            }
            Ok((acc, loss_sum))
        })
        .collect::<Result<_>>()?;
    let mut total: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    let mut loss = 0.0;
    for (g, l) in partials {
        loss += l;
        for (k, v) in g {
            match total.get_mut(&k) {
                Some(a) => a.add_assign(&v),
                None => {
                    total.insert(k, v);
                }
            }
        }
    }
    Ok((total, loss))
}

fn mean_loss(model: &Model<f32>, inputs: &[Prepared], labels: &[Label]) -> Result<f64> {
    let losses: Vec<f64> = inputs
        .par_iter()
        .zip(labels.par_iter())
        .map(|(inp, &lab)| -> Result<f64> {
            let mut tape = Tape::new();
            let l = sample_loss(&mut tape, model, inp, lab)?;
            Ok(tape.value(l).item() as f64)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Recomputes geometry-derived inputs from randomly translated meshes.
fn augmented_input(
    trained: &TrainedModel,
    subject: &SubjectData,
    frozen: Option<&TrainedModel>,
    strength: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Prepared> {
    let meshes = subject
        .meshes
        .iter()
        .map(|m| augment_translate(m, strength, rng))
        .collect::<Result<Vec<_>>>()?;
    let feats = meshes
        .iter()
        .zip(&subject.topologies)
        .map(|(m, t)| fpfh(m, t))
        .collect::<Result<Vec<_>>>()?;
    trained.prepare(subject, frozen, Some((&meshes, &feats)))
}

/// Trains one model on the train split with early stopping on the val
/// split. `frozen` supplies the shape model whose embeddings a
/// [`Mode::Fusion`] head consumes.
pub fn train(
    config: &TrainConfig,
    data: &Dataset,
    mode: Mode,
    seed: u64,
    frozen: Option<&TrainedModel>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if mode == Mode::Fusion && frozen.map(|f| f.mode()) != Some(Mode::Shape) {
        return Err(Error::Invalid("fusion stage requires a trained shape model".into()));
    }
    let task = config.model.task;
    let train_set: Vec<&SubjectData> = data.split(Split::Train).collect();
    let val_set: Vec<&SubjectData> = data.split(Split::Val).collect();
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Invalid(format!(
            "training needs train and val subjects (have {} and {})",
            train_set.len(),
            val_set.len()
        )));
    }

    let norm = fit_normalizer(config, data, mode, frozen, &train_set)?;
    let model = Model::<f32>::init(config.model.clone(), mode, derive_seed(seed, Stream::Init))?;
    let mut trained = TrainedModel { model, norm };

    let prep_all = |set: &[&SubjectData]| -> Result<Vec<Prepared>> {
        set.par_iter().map(|s| trained.prepare(s, frozen, None)).collect()
    };
    let train_labels = train_set.iter().map(|s| label_of(s, task, &trained.norm)).collect::<Result<Vec<_>>>()?;
    let val_labels = val_set.iter().map(|s| label_of(s, task, &trained.norm)).collect::<Result<Vec<_>>>()?;
    let augmenting = config.augment_strength > 0.0 && mode.has_shape_branch();
    let base_train = if augmenting { Vec::new() } else { prep_all(&train_set)? };
    let val_inputs = prep_all(&val_set)?;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, Stream::Shuffle));
    let mut adam = Adam::new(config.learning_rate);
    let batch = config.batch_size.unwrap_or(train_set.len()).min(train_set.len());
    let mut log = Vec::new();
    let mut best = (f64::INFINITY, 0usize, trained.model.params.clone());
    let mut augmented = [0usize; 3];

    for epoch in 1..=config.max_epochs {
        let epoch_inputs;
        let train_inputs: &[Prepared] = if augmenting {
            epoch_inputs = train_set
                .par_iter()
                .enumerate()
                .map(|(i, s)| {
                    debug_assert_eq!(s.split, Split::Train);
                    let mut rng = augment_rng(seed, epoch, i);
                    augmented_input(&trained, s, frozen, config.augment_strength, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            augmented[0] += train_set.len();
            &epoch_inputs
        } else {
            &base_train
        };

        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(batch) {
            let ins: Vec<&Prepared> = idx.iter().map(|&i| &train_inputs[i]).collect();
            let labs: Vec<Label> = idx.iter().map(|&i| train_labels[i]).collect();
            let (grads, l) = batch_gradient(&trained.model, &ins, &labs)?;
            if !l.is_finite() {
                return Err(Error::Diverged { epoch, reason: format!("training loss is {l}"), log });
            }
            if let Err(e) = adam.step(&mut trained.model.params, &grads) {
                return Err(Error::Diverged { epoch, reason: e.to_string(), log });
            }
            loss_sum += l;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let val_loss = mean_loss(&trained.model, &val_inputs, &val_labels)?;
        log.push(EpochRecord { epoch, train_loss, val_loss });
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch, reason: format!("validation loss is {val_loss}"), log });
        }
        if val_loss < best.0 {
            best = (val_loss, epoch, trained.model.params.clone());
        } else if epoch - best.1 >= config.patience {
            break;
        }
    }

    trained.model.params = best.2;
    Ok(TrainOutcome { trained, log, best_epoch: best.1, augmented })
}

#[cfg(test)]
mod tests;
