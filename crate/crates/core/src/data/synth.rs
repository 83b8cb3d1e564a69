//! Synthetic subjects with a controllable split of label information
//! between mesh shape and image embedding.
//!
//! Each subject has a standardized latent `ẑ` (age mapped to [−1, 1], or
//! ±1 for diagnosis). The shape channel `s = w_s·(ẑ + σ_s·ε)` scales and
//! elongates a subset of structures; the image channel places
//! `w_i·(ẑ + σ_i·ε')` along a fixed direction of the embedding next to
//! modality-private factors. The two noise draws are independent, so the
//! modalities carry complementary evidence about `ẑ`.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::formats::write_embedding;
use super::manifest::{Manifest, ManifestEntry};
use crate::alignment::random_rotation;
use crate::dataset::Split;
use crate::error::{Error, Result};
use crate::geom::mat_vec;
use crate::mesh::{icosphere, write_file, StructureId, TriangleMesh};
use crate::model::Task;

pub const AGE_RANGE: (f64, f64) = (18.0, 88.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub subjects: usize,
    pub seed: u64,
    pub task: Task,
    /// Icosphere subdivision level of every structure.
    pub level: usize,
    /// Shape-channel weight `w_s`.
    pub shape_weight: f64,
    /// Image-channel weight `w_i`.
    pub image_weight: f64,
    /// `σ_s`, in units of the standardized latent.
    pub shape_noise: f64,
    /// `σ_i`, in units of the standardized latent.
    pub image_noise: f64,
    /// Log radius change per unit of shape signal.
    pub radius_gain: f64,
    /// Log aspect-ratio change per unit of shape signal.
    pub elongation_gain: f64,
    /// Standard deviation of subject-specific bump amplitudes.
    pub bump_noise: f64,
    /// Isotropic per-vertex jitter in mm.
    pub vertex_noise: f64,
    pub image_dim: usize,
    /// Modality-private embedding factors.
    pub private_factors: usize,
    /// Per-dimension embedding noise.
    pub embedding_noise: f64,
    /// Train and val fractions; the rest is test.
    pub split_fractions: [f64; 2],
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            subjects: 120,
            seed: 0,
            task: Task::Regression,
            level: 2,
            shape_weight: 1.0,
            image_weight: 1.0,
            shape_noise: 0.1,
            image_noise: 0.1,
            radius_gain: 0.15,
            elongation_gain: 0.8,
            bump_noise: 0.03,
            vertex_noise: 0.01,
            image_dim: 512,
            private_factors: 8,
            embedding_noise: 0.1,
            split_fractions: [0.72, 0.08],
        }
    }
}

impl SynthConfig {
    /// Defaults tuned per task. Classification uses noisier channels so
    /// that neither modality alone separates the classes.
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Regression => SynthConfig::default(),
            Task::Classification => SynthConfig {
                task,
                shape_noise: 1.5,
                image_noise: 0.8,
                ..SynthConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects < 10 {
            return Err(Error::Invalid(format!("synthetic datasets need at least 10 subjects, got {}", self.subjects)));
        }
        let nonneg = [
            ("shape_weight", self.shape_weight),
            ("image_weight", self.image_weight),
            ("shape_noise", self.shape_noise),
            ("image_noise", self.image_noise),
            ("radius_gain", self.radius_gain),
            ("elongation_gain", self.elongation_gain),
            ("bump_noise", self.bump_noise),
            ("vertex_noise", self.vertex_noise),
            ("embedding_noise", self.embedding_noise),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.image_dim == 0 || self.image_dim > 1 << 20 {
            return Err(Error::Invalid(format!("image_dim must be in 1..=2^20, got {}", self.image_dim)));
        }
        let [tr, va] = self.split_fractions;
        if !(tr > 0.0 && va > 0.0 && tr + va < 1.0) {
            return Err(Error::Invalid("split_fractions must be positive and sum below 1".into()));
        }
        if self.level > 4 {
            return Err(Error::Invalid(format!("level {} is too fine for synthetic data (max 4)", self.level)));
        }
        Ok(())
    }
}

/// How strongly each structure follows the shape signal. Hippocampi move
/// most, then amygdalae, then thalami; the rest carry no signal.
pub fn signal_coefficient(s: StructureId) -> f64 {
    use StructureId::*;
    match s {
        HippocampusLeft | HippocampusRight => 1.0,
        AmygdalaLeft | AmygdalaRight => 0.8,
        ThalamusLeft | ThalamusRight => 0.5,
        _ => 0.0,
    }
}

/// Nominal radius (mm) and centre (mm) of each structure.
pub fn base_geometry(s: StructureId) -> (f64, [f64; 3]) {
    use StructureId::*;
    let (r, c): (f64, [f64; 3]) = match s {
        BrainStem => (11.0, [0.0, -28.0, -30.0]),
        ThalamusLeft | ThalamusRight => (9.0, [11.0, -18.0, 6.0]),
        CaudateLeft | CaudateRight => (7.0, [13.0, 12.0, 10.0]),
        PutamenLeft | PutamenRight => (8.0, [25.0, 2.0, 0.0]),
        PallidumLeft | PallidumRight => (5.0, [19.0, -4.0, -2.0]),
        HippocampusLeft | HippocampusRight => (6.5, [27.0, -22.0, -14.0]),
        AmygdalaLeft | AmygdalaRight => (4.5, [23.0, -4.0, -20.0]),
        AccumbensLeft | AccumbensRight => (3.5, [9.0, 12.0, -8.0]),
    };
    let left = matches!(
        s,
        ThalamusLeft | CaudateLeft | PutamenLeft | PallidumLeft | HippocampusLeft | AmygdalaLeft | AccumbensLeft
    );
    (r, if left { [-c[0], c[1], c[2]] } else { c })
}

/// Standardized latent for a label.
pub fn latent(task: Task, age: Option<f64>, diagnosis: Option<u8>) -> f64 {
    match task {
        Task::Regression => {
            let (lo, hi) = AGE_RANGE;
            (age.expect("regression subjects have an age") - (lo + hi) / 2.0) / ((hi - lo) / 2.0)
        }
        Task::Classification => {
            if diagnosis == Some(1) {
                1.0
            } else {
                -1.0
            }
        }
    }
}

/// Fixed per-structure template: orientation and three bump directions
/// with amplitudes. Independent of the dataset seed.
struct Template {
    rotation: [[f64; 3]; 3],
    bumps: [([f64; 3], f64); 3],
}

fn template(s: StructureId) -> Template {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + s.index() as u64);
    let rotation = random_rotation(&mut rng);
    let bumps = std::array::from_fn(|_| {
        let d = unit(&mut rng);
        (d, rng.random_range(-0.25..0.25))
    });
    Template { rotation, bumps }
}

fn unit<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-6 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// One generated subject before it is written out.
#[derive(Debug, Clone)]
pub struct SynthSubject {
    pub id: String,
    pub age: Option<f64>,
    pub diagnosis: Option<u8>,
    pub split: Split,
    pub shape_signal: f64,
    pub meshes: Vec<TriangleMesh>,
    pub embedding: Vec<f32>,
}

fn subject_id(i: usize) -> String {
    format!("sub-{i:04}")
}

/// Labels and splits for all subjects, from the dataset-level stream.
fn assign_labels(cfg: &SynthConfig) -> Vec<(Option<f64>, Option<u8>, Split)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.subjects;
    let mut out: Vec<(Option<f64>, Option<u8>, Split)> = match cfg.task {
        Task::Regression => {
            let u = Uniform::new(AGE_RANGE.0, AGE_RANGE.1).expect("valid range");
            (0..n).map(|_| (Some((u.sample(&mut rng) * 10.0).round() / 10.0), None, Split::Train)).collect()
        }
        // Exactly balanced; a shuffle decides which ids are positive.
        Task::Classification => {
            let mut labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
            labels.shuffle(&mut rng);
            labels.into_iter().map(|d| (None, Some(d), Split::Train)).collect()
        }
    };
    // Stratify splits by class for classification.
    let groups: Vec<Vec<usize>> = match cfg.task {
        Task::Regression => vec![(0..n).collect()],
        Task::Classification => (0..2u8).map(|c| (0..n).filter(|&i| out[i].1 == Some(c)).collect()).collect(),
    };
    for mut g in groups {
        g.shuffle(&mut rng);
        let n_train = (cfg.split_fractions[0] * g.len() as f64).round() as usize;
        let n_val = ((cfg.split_fractions[1] * g.len() as f64).round() as usize).max(1);
        for (k, &i) in g.iter().enumerate() {
            out[i].2 = if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    out
}

/// Fixed projection from `[image channel, private factors]` to the
/// embedding, column-major with unit-norm columns.
fn projection(cfg: &SynthConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    (0..=cfg.private_factors)
        .map(|_| {
            let col: Vec<f64> = (0..cfg.image_dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = col.iter().map(|x| x * x).sum::<f64>().sqrt();
            col.into_iter().map(|x| x / n * (cfg.image_dim as f64).sqrt()).collect()
        })
        .collect()
}

fn make_subject(cfg: &SynthConfig, index: usize, label: (Option<f64>, Option<u8>, Split), proj: &[Vec<f64>]) -> Result<SynthSubject> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let (age, diagnosis, split) = label;
    let z = latent(cfg.task, age, diagnosis);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

    let shape_signal = cfg.shape_weight * (z + cfg.shape_noise * normal(&mut rng));
    let image_signal = cfg.image_weight * (z + cfg.image_noise * normal(&mut rng));

    let pose = random_rotation(&mut rng);
    let shift: [f64; 3] = std::array::from_fn(|_| rng.random_range(-10.0..10.0));
    let (unit_verts, faces) = icosphere(cfg.level, 1.0);
    let mut meshes = Vec::with_capacity(StructureId::COUNT);
    for s in StructureId::ALL {
        let t = template(s);
        let (radius, centre) = base_geometry(s);
        let c = signal_coefficient(s);
        let amps: [f64; 3] = std::array::from_fn(|k| t.bumps[k].1 + cfg.bump_noise * normal(&mut rng));
        let r = radius * (cfg.radius_gain * c * shape_signal).exp();
        let e = (cfg.elongation_gain * c * shape_signal).exp();
        let axes = [e, 1.0 / e.sqrt(), 1.0 / e.sqrt()];
        let verts = unit_verts
            .iter()
            .map(|&u| {
                let bump: f64 = (0..3)
                    .map(|k| {
                        let d = t.bumps[k].0;
                        let p = u[0] * d[0] + u[1] * d[1] + u[2] * d[2];
                        amps[k] * (p * p - 1.0 / 3.0)
                    })
                    .sum();
                let local: [f64; 3] = std::array::from_fn(|a| r * (1.0 + bump) * axes[a] * u[a]);
                let placed = mat_vec(&t.rotation, local);
                let world = mat_vec(&pose, std::array::from_fn(|a| placed[a] + centre[a]));
                std::array::from_fn(|a| world[a] + shift[a] + cfg.vertex_noise * normal(&mut rng))
            })
            .collect();
        meshes.push(TriangleMesh::new(verts, faces.clone(), s)?);
    }

    let mut factors = Vec::with_capacity(1 + cfg.private_factors);
    factors.push(image_signal);
    factors.extend((0..cfg.private_factors).map(|_| normal(&mut rng)));
    let embedding = (0..cfg.image_dim)
        .map(|d| {
            let v: f64 = factors.iter().zip(proj).map(|(f, col)| f * col[d]).sum();
            (v + cfg.embedding_noise * normal(&mut rng)) as f32
        })
        .collect();

    Ok(SynthSubject { id: subject_id(index), age, diagnosis, split, shape_signal, meshes, embedding })
}

/// All subjects in memory. Parallel over subjects; each subject draws from
/// its own stream so the result does not depend on scheduling.
pub fn synthesize(cfg: &SynthConfig) -> Result<Vec<SynthSubject>> {
    cfg.validate()?;
    let labels = assign_labels(cfg);
    let proj = projection(cfg);
    labels
        .into_par_iter()
        .enumerate()
        .map(|(i, l)| make_subject(cfg, i, l, &proj))
        .collect()
}

/// Relative path of a subject's mesh inside a generated dataset.
pub fn mesh_path(id: &str, s: StructureId) -> PathBuf {
    Path::new("meshes").join(id).join(format!("{}.off", s.key()))
}

pub fn embedding_path(id: &str) -> PathBuf {
    Path::new("embeddings").join(format!("{id}.mfe"))
}

/// Writes `manifest.csv`, `synth.json`, `meshes/<id>/<structure>.off` and
/// `embeddings/<id>.mfe` under `out`.
pub fn generate_synthetic(cfg: &SynthConfig, out: &Path) -> Result<Manifest> {
    let subjects = synthesize(cfg)?;
    subjects.par_iter().try_for_each(|s| -> Result<()> {
        for m in &s.meshes {
            m.write_off(&out.join(mesh_path(&s.id, m.structure())))?;
        }
        write_embedding(&out.join(embedding_path(&s.id)), &s.embedding)
    })?;
    let entries = subjects
        .iter()
        .map(|s| ManifestEntry {
            id: s.id.clone(),
            age: s.age,
            diagnosis: s.diagnosis,
            split: s.split,
            embedding: Some(embedding_path(&s.id)),
            meshes: StructureId::ALL.iter().map(|&st| mesh_path(&s.id, st)).collect(),
        })
        .collect();
    let manifest = Manifest { base_dir: out.to_path_buf(), entries };
    manifest.save(&out.join("manifest.csv"))?;
    let json = serde_json::to_string_pretty(cfg).expect("config serializes");
    write_file(&out.join("synth.json"), json.as_bytes())?;
    Ok(manifest)
}
