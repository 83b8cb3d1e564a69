//! In-memory subjects ready for training: aligned meshes, their graphs and
//! FPFH features, labels, split and optional image embedding.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descriptors::{fpfh, FpfhFeatures};
use crate::error::{Error, Result};
use crate::gnn::pseudo_scale;
use crate::mesh::{mesh_to_graph, GraphTopology, StructureId, TriangleMesh};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn key(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Invalid(format!("unknown split '{s}' (expected train, val or test)"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.key())
    }
}

/// One subject with all 15 structures in canonical order.
#[derive(Debug, Clone)]
pub struct SubjectData {
    pub id: String,
    pub split: Split,
    pub age: Option<f64>,
    pub diagnosis: Option<u8>,
    pub meshes: Vec<TriangleMesh>,
    pub topologies: Vec<GraphTopology>,
    pub features: Vec<FpfhFeatures>,
    pub image: Option<Vec<f32>>,
}

impl SubjectData {
    /// Builds graphs and FPFH features from aligned meshes given in any
    /// order.
    pub fn from_meshes(
        id: impl Into<String>,
        split: Split,
        age: Option<f64>,
        diagnosis: Option<u8>,
        meshes: Vec<TriangleMesh>,
        image: Option<Vec<f32>>,
    ) -> Result<Self> {
        let id = id.into();
        let meshes = canonical_order(&id, meshes)?;
        let topologies: Vec<GraphTopology> = meshes.iter().map(mesh_to_graph).collect();
        let features = meshes
            .par_iter()
            .zip(&topologies)
            .map(|(m, t)| fpfh(m, t))
            .collect::<Result<Vec<_>>>()?;
        Ok(SubjectData { id, split, age, diagnosis, meshes, topologies, features, image })
    }

    pub fn mesh(&self, s: StructureId) -> &TriangleMesh {
        &self.meshes[s.index()]
    }
}

/// Sorts meshes into canonical structure order, rejecting gaps and
/// duplicates.
pub fn canonical_order(subject: &str, meshes: Vec<TriangleMesh>) -> Result<Vec<TriangleMesh>> {
    let mut slots: Vec<Option<TriangleMesh>> = vec![None; StructureId::COUNT];
    for m in meshes {
        let i = m.structure().index();
        if slots[i].is_some() {
            return Err(Error::Invalid(format!("subject {subject}: duplicate mesh for {}", m.structure())));
        }
        slots[i] = Some(m);
    }
    let missing: Vec<StructureId> = StructureId::ALL.into_iter().filter(|s| slots[s.index()].is_none()).collect();
    if !missing.is_empty() {
        return Err(Error::MissingStructures { subject: subject.to_string(), structures: missing });
    }
    Ok(slots.into_iter().map(|m| m.expect("checked")).collect())
}

/// Subjects plus the per-structure pseudo-coordinate scale frozen from the
/// reference subject.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub subjects: Vec<SubjectData>,
    pub pseudo_scales: Vec<f64>,
}

impl Dataset {
    /// Uses `reference` (a subject id) to fix pseudo-coordinate scales and
    /// checks that vertex counts agree per structure.
    pub fn new(subjects: Vec<SubjectData>, reference: &str) -> Result<Self> {
        let ref_subject = subjects
            .iter()
            .find(|s| s.id == reference)
            .ok_or_else(|| Error::Invalid(format!("reference subject '{reference}' not in dataset")))?;
        let pseudo_scales = StructureId::ALL
            .iter()
            .map(|&s| pseudo_scale(ref_subject.mesh(s), &ref_subject.topologies[s.index()]))
            .collect::<Result<Vec<_>>>()?;
        let mut seen = std::collections::HashSet::new();
        for subj in &subjects {
            if !seen.insert(subj.id.as_str()) {
                return Err(Error::Invalid(format!("duplicate subject id '{}'", subj.id)));
            }
            let bad: Vec<StructureId> = StructureId::ALL
                .into_iter()
                .filter(|&s| subj.mesh(s).num_vertices() != ref_subject.mesh(s).num_vertices())
                .collect();
            if !bad.is_empty() {
                return Err(Error::VertexCountMismatch { subject: subj.id.clone(), structures: bad });
            }
        }
        Ok(Dataset { subjects, pseudo_scales })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SubjectData> {
        self.subjects.iter().filter(move |s| s.split == split)
    }

    pub fn split_sizes(&self) -> [usize; 3] {
        Split::ALL.map(|sp| self.split(sp).count())
    }
}
