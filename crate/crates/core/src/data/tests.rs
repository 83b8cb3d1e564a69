use std::fs;
use std::path::Path;

use super::manifest::{header, header_vertex_count, parse_manifest};
use super::synth::{base_geometry, signal_coefficient, AGE_RANGE};
use super::*;
use crate::dataset::Split;
use crate::error::Error;
use crate::mesh::{icosphere, StructureId, TriangleMesh};
use crate::model::Task;

fn write_subject(dir: &Path, id: &str, level: usize) -> Vec<String> {
    let (v, f) = icosphere(level, 3.0);
    StructureId::ALL
        .iter()
        .map(|&s| {
            let rel = format!("m/{id}/{}.off", s.key());
            TriangleMesh::new(v.clone(), f.clone(), s).unwrap().write_off(&dir.join(&rel)).unwrap();
            rel
        })
        .collect()
}

fn row(id: &str, age: &str, split: &str, meshes: &[String]) -> String {
    format!("{id},{age},,{split},,{}\n", meshes.join(","))
}

fn three_subjects(dir: &Path) -> String {
    let mut csv = header().join(",") + "\n";
    for (id, split) in [("a", "train"), ("b", "val"), ("c", "test")] {
        let m = write_subject(dir, id, 1);
        csv += &row(id, "40.5", split, &m);
    }
    csv
}

#[test]
fn valid_manifest_loads() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("manifest.csv");
    fs::write(&p, three_subjects(dir.path())).unwrap();
    let m = load_manifest(&p).unwrap();
    assert_eq!(m.split_sizes(), [1, 1, 1]);
    assert_eq!(m.entries[0].age, Some(40.5));
    m.require_labels(Task::Regression).unwrap();
    assert!(m.require_labels(Task::Classification).is_err());
}

#[test]
fn manifest_round_trip_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("manifest.csv");
    fs::write(&p, three_subjects(dir.path())).unwrap();
    let m = load_manifest(&p).unwrap();
    let q = dir.path().join("copy.csv");
    m.save(&q).unwrap();
    assert_eq!(load_manifest(&q).unwrap(), m);
}

#[test]
fn missing_structure_column_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("manifest.csv");
    let mut m = write_subject(dir.path(), "a", 1);
    m[StructureId::CaudateLeft.index()] = String::new();
    fs::write(&p, header().join(",") + "\n" + &row("a", "30", "train", &m)).unwrap();
    match parse_manifest(&p) {
        Err(Error::MissingStructures { subject, structures }) => {
            assert_eq!(subject, "a");
            assert_eq!(structures, vec![StructureId::CaudateLeft]);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn duplicate_ids_and_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("manifest.csv");
    let m = write_subject(dir.path(), "a", 1);
    fs::write(&p, header().join(",") + "\n" + &row("a", "30", "train", &m) + &row("a", "31", "val", &m)).unwrap();
    assert!(load_manifest(&p).unwrap_err().to_string().contains("duplicate subject id 'a'"));

    let mut gone = m.clone();
    gone[3] = "m/a/nowhere.off".into();
    fs::write(&p, header().join(",") + "\n" + &row("a", "30", "train", &gone)).unwrap();
    let e = load_manifest(&p).unwrap_err();
    assert!(matches!(e, Error::MissingArtifact { .. }));
    assert!(e.to_string().contains("subject a mesh caudate_l"), "{e}");
}

#[test]
fn vertex_count_mismatch_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("manifest.csv");
    let a = write_subject(dir.path(), "a", 1);
    let mut b = write_subject(dir.path(), "b", 1);
    let (v, f) = icosphere(2, 3.0);
    let rel = "m/b/fine.off".to_string();
    TriangleMesh::new(v, f, StructureId::PutamenRight).unwrap().write_off(&dir.path().join(&rel)).unwrap();
    b[StructureId::PutamenRight.index()] = rel;
    fs::write(&p, header().join(",") + "\n" + &row("a", "30", "train", &a) + &row("b", "31", "val", &b)).unwrap();
    match load_manifest(&p) {
        Err(Error::VertexCountMismatch { subject, structures }) => {
            assert_eq!(subject, "b");
            assert_eq!(structures, vec![StructureId::PutamenRight]);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn bad_header_and_cells() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("manifest.csv");
    fs::write(&p, "subject,age\n").unwrap();
    assert!(matches!(parse_manifest(&p), Err(Error::Parse { line: 1, .. })));
    let m = write_subject(dir.path(), "a", 1);
    fs::write(&p, header().join(",") + "\n" + &row("a", "30", "holdout", &m)).unwrap();
    assert!(matches!(parse_manifest(&p), Err(Error::Parse { line: 2, .. })));
    fs::write(&p, header().join(",") + "\n" + &format!("a,30,2,train,,{}\n", m.join(","))).unwrap();
    assert!(parse_manifest(&p).unwrap_err().to_string().contains("diagnosis"));
}

#[test]
fn ply_and_off_header_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (v, f) = icosphere(1, 1.0);
    let m = TriangleMesh::new(v, f, StructureId::BrainStem).unwrap();
    m.write_off(&dir.path().join("x.off")).unwrap();
    m.write_ply(&dir.path().join("x.ply")).unwrap();
    assert_eq!(header_vertex_count(&dir.path().join("x.off")).unwrap(), 42);
    assert_eq!(header_vertex_count(&dir.path().join("x.ply")).unwrap(), 42);
}

fn small(task: Task) -> SynthConfig {
    SynthConfig { subjects: 24, task, level: 1, image_dim: 16, ..SynthConfig::default() }
}

fn dir_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synthetic_output_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = small(Task::Classification);
    generate_synthetic(&cfg, a.path()).unwrap();
    generate_synthetic(&cfg, b.path()).unwrap();
    let (da, db) = (dir_bytes(a.path()), dir_bytes(b.path()));
    assert_eq!(da.len(), 24 * 16 + 2);
    assert!(da == db);
    let c = tempfile::tempdir().unwrap();
    generate_synthetic(&SynthConfig { seed: 1, ..cfg }, c.path()).unwrap();
    assert!(dir_bytes(c.path()) != da);
}

#[test]
fn generated_dataset_loads_through_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(Task::Regression);
    let written = generate_synthetic(&cfg, dir.path()).unwrap();
    let m = load_manifest(&dir.path().join("manifest.csv")).unwrap();
    assert_eq!(m.entries, written.entries);
    let e = read_embedding(&m.resolve(m.entries[0].embedding.as_ref().unwrap())).unwrap();
    assert_eq!(e.len(), 16);
    for entry in &m.entries {
        let age = entry.age.unwrap();
        assert!((AGE_RANGE.0..=AGE_RANGE.1).contains(&age));
    }
}

#[test]
fn classification_labels_are_balanced_and_stratified() {
    let cfg = SynthConfig { subjects: 120, task: Task::Classification, level: 0, image_dim: 4, ..SynthConfig::default() };
    let subjects = synthesize(&cfg).unwrap();
    let pos = subjects.iter().filter(|s| s.diagnosis == Some(1)).count();
    assert!((pos as f64 / 120.0 - 0.5).abs() <= 0.05);
    let sizes = Split::ALL.map(|sp| subjects.iter().filter(|s| s.split == sp).count());
    assert_eq!(sizes, [86, 10, 24]);
    let test_pos = subjects.iter().filter(|s| s.split == Split::Test && s.diagnosis == Some(1)).count();
    assert_eq!(test_pos, 12);
}

#[test]
fn generated_meshes_are_valid_and_consistent() {
    let subjects = synthesize(&small(Task::Regression)).unwrap();
    for s in &subjects {
        for (m, r) in s.meshes.iter().zip(&subjects[0].meshes) {
            m.check_ingest().unwrap();
            assert_eq!(m.num_vertices(), r.num_vertices());
            assert_eq!(m.faces(), r.faces());
        }
    }
}

fn det3(m: [[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Log size of a structure from its vertex covariance; invariant to pose
/// and, to first order, to the volume-preserving elongation.
fn log_size(m: &TriangleMesh) -> f64 {
    let c = m.centroid();
    let mut cov = [[0.0; 3]; 3];
    for v in m.vertices() {
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += (v[i] - c[i]) * (v[j] - c[j]);
            }
        }
    }
    det3(cov).ln() / 6.0
}

/// Hand-coded age estimator: a linear map from the mean normalized log size
/// of the signal structures, fitted by least squares on the train split.
#[test]
fn closed_form_oracle_reaches_noise_floor() {
    let cfg = SynthConfig {
        subjects: 300,
        task: Task::Regression,
        image_weight: 0.0,
        image_dim: 4,
        level: 1,
        ..SynthConfig::default()
    };
    let subjects = synthesize(&cfg).unwrap();
    let stat = |s: &SynthSubject| -> f64 {
        let (mut sum, mut w) = (0.0, 0.0);
        for m in &s.meshes {
            let c = signal_coefficient(m.structure());
            if c > 0.0 {
                sum += (log_size(m) - base_geometry(m.structure()).0.ln()) / c;
                w += 1.0;
            }
        }
        sum / w
    };
    let (train, held): (Vec<&SynthSubject>, Vec<&SynthSubject>) = subjects.iter().partition(|s| s.split == Split::Train);
    let xs: Vec<f64> = train.iter().map(|s| stat(s)).collect();
    let ys: Vec<f64> = train.iter().map(|s| s.age.unwrap()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / xs.len() as f64, ys.iter().sum::<f64>() / ys.len() as f64);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let mae = held.iter().map(|s| (my + slope * (stat(s) - mx) - s.age.unwrap()).abs()).sum::<f64>() / held.len() as f64;
    let half_range = (AGE_RANGE.1 - AGE_RANGE.0) / 2.0;
    let floor = cfg.shape_noise * half_range * (2.0 / std::f64::consts::PI).sqrt();
    assert!(mae < 1.3 * floor, "oracle MAE {mae:.3} vs noise floor {floor:.3}");
    assert!(mae > 0.7 * floor, "oracle MAE {mae:.3} suspiciously below noise floor {floor:.3}");
}
