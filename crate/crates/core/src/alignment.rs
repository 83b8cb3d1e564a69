//! Closed-form rigid registration of corresponded point sets.
//!
//! Every structure mesh of every subject is registered onto the same
//! structure of a reference subject. Correspondence is by vertex index,
//! which holds because all subjects share one vertex ordering per
//! structure.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::mesh::{StructureId, TriangleMesh};

/// Relative singular-value threshold below which the cross-covariance is
/// treated as rank deficient.
const RANK_TOL: f64 = 1e-10;

/// `x ↦ R·x + t` with `R` a proper rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    /// Row-major rotation matrix.
    pub rotation: [[f64; 3]; 3],
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Checks orthonormality and `det R = +1` to within `1e-9`.
    pub fn new(rotation: [[f64; 3]; 3], translation: Vec3) -> Result<Self> {
        let r = to_matrix(&rotation);
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        let det = r.determinant();
        if ortho > 1e-9 || (det - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!(
                "not a proper rotation (orthogonality error {ortho:.3e}, det {det})"
            )));
        }
        Ok(RigidTransform {
            rotation,
            translation,
        })
    }

    pub fn apply_point(&self, p: Vec3) -> Vec3 {
        let r = &self.rotation;
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + self.translation[i];
        }
        out
    }

    /// `self ∘ first`: applies `first`, then `self`.
    pub fn compose(&self, first: &RigidTransform) -> RigidTransform {
        let a = to_matrix(&self.rotation);
        let b = to_matrix(&first.rotation);
        let t = a * Vector3::from(first.translation) + Vector3::from(self.translation);
        RigidTransform {
            rotation: from_matrix(&(a * b)),
            translation: [t[0], t[1], t[2]],
        }
    }

    /// Rotation row-major followed by translation.
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2], t[0],
            t[1], t[2],
        ]
    }

    pub fn from_row_major(v: &[f64; 12]) -> Result<Self> {
        RigidTransform::new(
            [[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]],
            [v[9], v[10], v[11]],
        )
    }
}

pub(crate) fn to_matrix(r: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::new(
        r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
    )
}

pub(crate) fn from_matrix(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    [
        [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
        [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
        [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
    ]
}

fn centroid(points: &[Vec3]) -> Vector3<f64> {
    let s = points
        .iter()
        .fold(Vector3::zeros(), |acc, p| acc + Vector3::from(*p));
    s / points.len() as f64
}

/// Least-squares rigid transform taking `source[i]` onto `target[i]`.
///
/// Minimizes `Σ ‖target_i − (R·source_i + t)‖²` with scale fixed to one.
/// The cross-covariance `Σ = (1/n) Σ (y_i − μ_y)(x_i − μ_x)ᵀ` is decomposed
/// as `U D Vᵀ`; the rotation is `U S Vᵀ` with `S = diag(1, 1, det(U Vᵀ))`,
/// which keeps the result proper even when the optimal orthogonal map is a
/// reflection. Rank-2 (planar) configurations are accepted.
pub fn umeyama_rigid(source: &[Vec3], target: &[Vec3]) -> Result<RigidTransform> {
    if source.len() != target.len() {
        return Err(Error::Invalid(format!(
            "point counts differ: source {} vs target {}",
            source.len(),
            target.len()
        )));
    }
    let n = source.len();
    if n < 3 {
        return Err(Error::DegenerateConfiguration(format!(
            "need at least 3 corresponding points, got {n}"
        )));
    }
    let mu_s = centroid(source);
    let mu_t = centroid(target);
    let mut sigma = Matrix3::<f64>::zeros();
    for (s, t) in source.iter().zip(target) {
        let ds = Vector3::from(*s) - mu_s;
        let dt = Vector3::from(*t) - mu_t;
        sigma += dt * ds.transpose();
    }
    sigma /= n as f64;

    let svd = sigma.svd(true, true);
    let sv = svd.singular_values;
    let smax = sv.max();
    let rank = sv.iter().filter(|&&s| s > RANK_TOL * smax.max(f64::MIN_POSITIVE)).count();
    if smax <= 0.0 || !smax.is_finite() || rank < 2 {
        return Err(Error::DegenerateConfiguration(format!(
            "cross-covariance rank {rank} < 2 (collinear or coincident points)"
        )));
    }
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let d = (u * v_t).determinant().signum();
    let s = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let r = u * s * v_t;
    let t = mu_t - r * mu_s;
    Ok(RigidTransform {
        rotation: from_matrix(&r),
        translation: [t[0], t[1], t[2]],
    })
}

/// Sum of squared residuals `Σ ‖target_i − T(source_i)‖²`.
pub fn residual(transform: &RigidTransform, source: &[Vec3], target: &[Vec3]) -> f64 {
    source
        .iter()
        .zip(target)
        .map(|(s, t)| {
            let p = transform.apply_point(*s);
            (0..3).map(|k| (t[k] - p[k]).powi(2)).sum::<f64>()
        })
        .sum()
}

/// Maps every vertex through `transform`; faces and ordering are kept.
pub fn apply_transform(transform: &RigidTransform, mesh: &TriangleMesh) -> TriangleMesh {
    let verts = mesh.vertices().iter().map(|&v| transform.apply_point(v)).collect();
    mesh.with_vertices(verts).expect("same vertex count")
}

/// All fifteen structure meshes of one subject.
#[derive(Debug, Clone)]
pub struct SubjectMeshes {
    pub id: String,
    pub meshes: BTreeMap<StructureId, TriangleMesh>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub subject: String,
    pub structure: StructureId,
    /// Rotation row-major, then translation.
    pub transform: [f64; 12],
}

#[derive(Debug, Clone)]
pub struct AlignedDataset {
    pub reference: String,
    pub subjects: Vec<SubjectMeshes>,
    pub log: Vec<TransformRecord>,
}

/// How the reference subject is picked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReferenceChoice {
    /// First id in lexicographic order.
    FirstId,
    Explicit(String),
    /// Uniform draw over the sorted ids with a seeded generator.
    Seeded(u64),
}

pub fn select_reference<'a>(ids: impl IntoIterator<Item = &'a str>, choice: &ReferenceChoice) -> Result<String> {
    let mut ids: Vec<&str> = ids.into_iter().collect();
    ids.sort_unstable();
    if ids.is_empty() {
        return Err(Error::Invalid("dataset has no subjects".into()));
    }
    match choice {
        ReferenceChoice::FirstId => Ok(ids[0].to_string()),
        ReferenceChoice::Explicit(id) => ids
            .iter()
            .find(|&&i| i == id)
            .map(|s| s.to_string())
            .ok_or_else(|| Error::Invalid(format!("reference subject '{id}' not in dataset"))),
        ReferenceChoice::Seeded(seed) => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(*seed);
            Ok(ids.choose(&mut rng).expect("non-empty").to_string())
        }
    }
}

/// Registers every subject's structures onto the reference subject's.
///
/// The reference subject's meshes are passed through untouched with
/// identity transforms. Subjects are processed in parallel; output order
/// follows input order.
pub fn align_dataset(subjects: &[SubjectMeshes], reference: &str) -> Result<AlignedDataset> {
    let reference_subject = subjects
        .iter()
        .find(|s| s.id == reference)
        .ok_or_else(|| Error::Invalid(format!("reference subject '{reference}' not in dataset")))?;
    check_complete(reference_subject)?;

    for s in subjects {
        check_complete(s)?;
        let mismatched: Vec<StructureId> = StructureId::ALL
            .iter()
            .copied()
            .filter(|id| s.meshes[id].num_vertices() != reference_subject.meshes[id].num_vertices())
            .collect();
        if !mismatched.is_empty() {
            return Err(Error::VertexCountMismatch {
                subject: s.id.clone(),
                structures: mismatched,
            });
        }
    }

    let results: Vec<Result<(SubjectMeshes, Vec<TransformRecord>)>> = subjects
        .par_iter()
        .map(|s| {
            let mut meshes = BTreeMap::new();
            let mut records = Vec::with_capacity(StructureId::COUNT);
            for id in StructureId::ALL {
                let mesh = &s.meshes[&id];
                let transform = if s.id == reference {
                    RigidTransform::identity()
                } else {
                    umeyama_rigid(mesh.vertices(), reference_subject.meshes[&id].vertices())
                        .map_err(|e| Error::DegenerateConfiguration(format!("subject {} {id}: {e}", s.id)))?
                };
                let aligned = if s.id == reference {
                    mesh.clone()
                } else {
                    apply_transform(&transform, mesh)
                };
                meshes.insert(id, aligned);
                records.push(TransformRecord {
                    subject: s.id.clone(),
                    structure: id,
                    transform: transform.to_row_major(),
                });
            }
            Ok((
                SubjectMeshes {
                    id: s.id.clone(),
                    meshes,
                },
                records,
            ))
        })
        .collect();

    let mut aligned = Vec::with_capacity(subjects.len());
    let mut log = Vec::with_capacity(subjects.len() * StructureId::COUNT);
    for r in results {
        let (s, recs) = r?;
        aligned.push(s);
        log.extend(recs);
    }
    Ok(AlignedDataset {
        reference: reference.to_string(),
        subjects: aligned,
        log,
    })
}

fn check_complete(s: &SubjectMeshes) -> Result<()> {
    let missing: Vec<StructureId> = StructureId::ALL
        .iter()
        .copied()
        .filter(|id| !s.meshes.contains_key(id))
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingStructures {
            subject: s.id.clone(),
            structures: missing,
        })
    }
}

/// Uniformly distributed proper rotation (via a random unit quaternion).
pub fn random_rotation<R: rand::Rng + ?Sized>(rng: &mut R) -> [[f64; 3]; 3] {
    let mut q = [0.0f64; 4];
    loop {
        for c in q.iter_mut() {
            *c = rng.sample(rand_distr::StandardNormal);
        }
        let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        if n > 1e-6 {
            for c in q.iter_mut() {
                *c /= n;
            }
            break;
        }
    }
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}
