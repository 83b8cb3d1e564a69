//! Dataset manifest: one CSV row per subject with labels, split, embedding
//! path and the fifteen mesh paths in canonical structure order.
//!
//! Relative paths are resolved against the manifest's directory and are
//! written back exactly as read.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::dataset::Split;
use crate::error::{Error, Result};
use crate::mesh::{write_file, StructureId};
use crate::model::Task;

pub const FIXED_COLUMNS: [&str; 5] = ["subject_id", "age", "diagnosis", "split", "embedding_path"];

/// The full header row.
pub fn header() -> Vec<String> {
    FIXED_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain(StructureId::ALL.iter().map(|s| format!("mesh_{}", s.key())))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub age: Option<f64>,
    pub diagnosis: Option<u8>,
    pub split: Split,
    pub embedding: Option<PathBuf>,
    /// Canonical structure order.
    pub meshes: Vec<PathBuf>,
}

impl ManifestEntry {
    pub fn mesh(&self, s: StructureId) -> &Path {
        &self.meshes[s.index()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn split_sizes(&self) -> [usize; 3] {
        Split::ALL.map(|sp| self.entries.iter().filter(|e| e.split == sp).count())
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Every subject carries the label `task` trains on.
    pub fn require_labels(&self, task: Task) -> Result<()> {
        for e in &self.entries {
            let ok = match task {
                Task::Regression => e.age.is_some(),
                Task::Classification => e.diagnosis.is_some(),
            };
            if !ok {
                let what = match task {
                    Task::Regression => "age",
                    Task::Classification => "diagnosis",
                };
                return Err(Error::Invalid(format!("subject {} lacks {what} required for {task:?}", e.id)));
            }
        }
        Ok(())
    }

    /// Subjects that carry an image embedding path.
    pub fn require_embeddings(&self) -> Result<()> {
        match self.entries.iter().find(|e| e.embedding.is_none()) {
            Some(e) => Err(Error::Invalid(format!("subject {} has no embedding_path", e.id))),
            None => Ok(()),
        }
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Invalid(format!("manifest serialization: {e}"));
        w.write_record(header()).map_err(csv_err)?;
        for e in &self.entries {
            let mut rec = vec![
                e.id.clone(),
                e.age.map(|a| a.to_string()).unwrap_or_default(),
                e.diagnosis.map(|d| d.to_string()).unwrap_or_default(),
                e.split.to_string(),
                e.embedding.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ];
            rec.extend(e.meshes.iter().map(|p| p.display().to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Invalid(format!("manifest serialization: {e}")))?;
        Ok(String::from_utf8(bytes).expect("CSV of UTF-8 fields"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_csv_string()?.as_bytes())
    }
}

/// Parses and validates a manifest: header, unique ids, labels, that every
/// referenced file exists, and that each structure has the same vertex
/// count in every subject (read from the mesh headers).
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let manifest = parse_manifest(path)?;
    check_files(&manifest)?;
    check_vertex_counts(&manifest)?;
    Ok(manifest)
}

/// Header and cell validation only; touches no other file.
pub fn parse_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(text.as_bytes());
    let mut records = rdr.records();
    let want = header();
    let head = match records.next() {
        Some(r) => r.map_err(|e| Error::parse(path, 1, e.to_string()))?,
        None => return Err(Error::parse(path, 1, "empty manifest")),
    };
    let got: Vec<&str> = head.iter().map(str::trim).collect();
    if got != want {
        return Err(Error::parse(path, 1, format!("header must be '{}'", want.join(","))));
    }

    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, rec) in records.enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::parse(path, line, e.to_string()))?;
        if rec.len() != want.len() {
            return Err(Error::parse(path, line, format!("{} fields, expected {}", rec.len(), want.len())));
        }
        let cell = |c: usize| rec[c].trim();
        let id = cell(0).to_string();
        if id.is_empty() {
            return Err(Error::parse(path, line, "empty subject_id"));
        }
        if !seen.insert(id.clone()) {
            return Err(Error::parse(path, line, format!("duplicate subject id '{id}'")));
        }
        let age = match cell(1) {
            "" => None,
            s => match s.parse::<f64>() {
                Ok(a) if a.is_finite() => Some(a),
                _ => return Err(Error::parse(path, line, format!("subject {id}: bad age '{s}'"))),
            },
        };
        let diagnosis = match cell(2) {
            "" => None,
            "0" => Some(0),
            "1" => Some(1),
            s => return Err(Error::parse(path, line, format!("subject {id}: diagnosis must be 0 or 1, got '{s}'"))),
        };
        let split: Split = cell(3).parse().map_err(|e: Error| Error::parse(path, line, format!("subject {id}: {e}")))?;
        let embedding = match cell(4) {
            "" => None,
            s => Some(PathBuf::from(s)),
        };
        let missing: Vec<StructureId> = StructureId::ALL.into_iter().filter(|s| cell(5 + s.index()).is_empty()).collect();
        if !missing.is_empty() {
            return Err(Error::MissingStructures { subject: id, structures: missing });
        }
        let meshes = StructureId::ALL.iter().map(|s| PathBuf::from(cell(5 + s.index()))).collect();
        entries.push(ManifestEntry { id, age, diagnosis, split, embedding, meshes });
    }
    if entries.is_empty() {
        return Err(Error::parse(path, 2, "manifest lists no subjects"));
    }
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Manifest { base_dir, entries })
}

fn check_files(m: &Manifest) -> Result<()> {
    for e in &m.entries {
        for s in StructureId::ALL {
            let p = m.resolve(e.mesh(s));
            if !p.is_file() {
                return Err(Error::MissingArtifact { path: p, what: format!("subject {} mesh {s}", e.id) });
            }
        }
        if let Some(p) = &e.embedding {
            let p = m.resolve(p);
            if !p.is_file() {
                return Err(Error::MissingArtifact { path: p, what: format!("subject {} image embedding", e.id) });
            }
        }
    }
    Ok(())
}

/// Vertex count declared in an OFF or PLY header.
pub fn header_vertex_count(path: &Path) -> Result<usize> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(f).lines().enumerate();
    let mut next = || -> Result<Option<(usize, String)>> {
        for (i, l) in lines.by_ref() {
            let l = l.map_err(|e| Error::io(path, e))?;
            let t = l.split('#').next().unwrap_or("").trim().to_string();
            if !t.is_empty() {
                return Ok(Some((i + 1, t)));
            }
        }
        Ok(None)
    };
    let (n, first) = next()?.ok_or_else(|| Error::parse(path, 1, "empty mesh file"))?;
    let bad = |line: usize, msg: &str| Error::parse(path, line, msg.to_string());
    if let Some(rest) = first.strip_prefix("OFF") {
        let counts = if rest.trim().is_empty() {
            next()?.ok_or_else(|| bad(n + 1, "missing OFF counts"))?
        } else {
            (n, rest.trim().to_string())
        };
        counts
            .1
            .split_whitespace()
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad(counts.0, "bad OFF vertex count"))
    } else if first == "ply" {
        while let Some((i, l)) = next()? {
            let toks: Vec<&str> = l.split_whitespace().collect();
            if toks.len() == 3 && toks[0] == "element" && toks[1] == "vertex" {
                return toks[2].parse().map_err(|_| bad(i, "bad PLY vertex count"));
            }
            if l == "end_header" {
                break;
            }
        }
        Err(bad(n, "PLY header declares no vertex element"))
    } else {
        Err(bad(n, "unrecognized mesh header"))
    }
}

fn check_vertex_counts(m: &Manifest) -> Result<()> {
    let counts: Vec<Vec<usize>> = m
        .entries
        .par_iter()
        .map(|e| StructureId::ALL.iter().map(|&s| header_vertex_count(&m.resolve(e.mesh(s)))).collect())
        .collect::<Result<_>>()?;
    let reference = &counts[0];
    for (e, c) in m.entries.iter().zip(&counts).skip(1) {
        let bad: Vec<StructureId> = StructureId::ALL.into_iter().filter(|s| c[s.index()] != reference[s.index()]).collect();
        if !bad.is_empty() {
            return Err(Error::VertexCountMismatch { subject: e.id.clone(), structures: bad });
        }
    }
    Ok(())
}
