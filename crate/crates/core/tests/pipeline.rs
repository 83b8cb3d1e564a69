use std::path::Path;

use meshfusion::alignment::ReferenceChoice;
use meshfusion::data::{generate_synthetic, SynthConfig};
use meshfusion::dataset::Split;
use meshfusion::model::Task;
use meshfusion::pipeline::{evaluate_stage, preprocess, read_index, report_stage, train_stage, AccessLog};
use meshfusion::train::TrainConfig;

fn prepare(root: &Path, cfg: &SynthConfig) -> std::path::PathBuf {
    let data = root.join("data");
    let out = root.join("run");
    generate_synthetic(cfg, &data).unwrap();
    preprocess(&data.join("manifest.csv"), &out, &ReferenceChoice::FirstId).unwrap();
    out
}

fn quick(task: Task, seeds: Vec<u64>, epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig { seeds, max_epochs: epochs, batch_size: Some(8), ..TrainConfig::default() };
    cfg.model.task = task;
    cfg.model.image_dim = 16;
    cfg
}

#[test]
fn index_records_split_sizes_and_evaluation_reads_only_test_rows() {
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig { subjects: 30, level: 1, image_dim: 16, ..SynthConfig::for_task(Task::Classification) };
    let out = prepare(dir.path(), &synth);
    let index = read_index(&out).unwrap();
    let sizes = [index.split_sizes.train, index.split_sizes.val, index.split_sizes.test];
    let counted = Split::ALL.map(|sp| index.subjects.iter().filter(|s| s.split == sp).count());
    assert_eq!(sizes, counted);
    assert_eq!(sizes.iter().sum::<usize>(), 30);

    train_stage(&out, &quick(Task::Classification, vec![0, 1], 1)).unwrap();
    let log = AccessLog::new();
    let evals = evaluate_stage(&out, Some(&log)).unwrap();
    let touched = log.entries();
    assert_eq!(touched.len(), sizes[2]);
    assert!(touched.iter().all(|(_, sp)| *sp == Split::Test));
    assert!(evals.iter().all(|e| e.test_subjects == sizes[2]));

    let report = report_stage(&out).unwrap();
    assert!(!report.partial);
    assert_eq!(report.rows.len(), 3);
}

#[test]
fn shape_model_finds_nothing_without_shape_signal() {
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig { subjects: 120, level: 1, image_dim: 16, shape_weight: 0.0, ..SynthConfig::default() };
    let out = prepare(dir.path(), &synth);
    let mut cfg = quick(Task::Regression, vec![0, 1, 2], 30);
    cfg.fusion = false;
    train_stage(&out, &cfg).unwrap();
    let evals = evaluate_stage(&out, None).unwrap();
    let r2: Vec<f64> = evals.iter().map(|e| e.models[0].metrics[1].1).collect();
    let mean = r2.iter().sum::<f64>() / 3.0;
    assert!(mean.abs() < 0.15, "shape-only R2 without signal: {r2:?}");
}
