//! Evaluation metrics and the multi-seed summary table.
//!
//! ROC operating points use the step-function convention: no interpolation
//! between curve points.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Task;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub mae: f64,
    pub r2: f64,
}

pub fn regression_metrics(preds: &[f64], targets: &[f64]) -> Result<RegressionMetrics> {
    if preds.len() != targets.len() {
        return Err(Error::shape("regression_metrics", format!("{} predictions vs {} targets", preds.len(), targets.len())));
    }
    let n = targets.len();
    if n < 2 {
        return Err(Error::Invalid(format!("regression metrics need at least 2 samples, got {n}")));
    }
    let mean = targets.iter().sum::<f64>() / n as f64;
    let ss_tot: f64 = targets.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Invalid("R2 is undefined for constant targets".into()));
    }
    let mae = preds.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum::<f64>() / n as f64;
    let ss_res: f64 = preds.iter().zip(targets).map(|(p, t)| (p - t).powi(2)).sum();
    Ok(RegressionMetrics { mae, r2: 1.0 - ss_res / ss_tot })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Scores at or above this value are called positive. `+inf` for the
    /// origin.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC curve from a descending threshold sweep with tied scores grouped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub positives: usize,
    pub negatives: usize,
    /// Twice the area under the curve times `positives · negatives`; exact.
    auc_numerator: u128,
}

impl RocCurve {
    /// `labels` are 1 for positive and 0 for negative.
    pub fn new(scores: &[f64], labels: &[u8]) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::shape("roc", format!("{} scores vs {} labels", scores.len(), labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Invalid(format!("ROC labels must be 0 or 1, got {l}")));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("ROC scores".into()));
        }
        let positives = labels.iter().filter(|&&l| l == 1).count();
        let negatives = labels.len() - positives;
        if positives == 0 || negatives == 0 {
            return Err(Error::Invalid("ROC needs both classes present".into()));
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

        let (p, n) = (positives as f64, negatives as f64);
        let mut points = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
        let (mut tp, mut fp) = (0u128, 0u128);
        let mut auc_numerator = 0u128;
        let mut i = 0;
        while i < order.len() {
            let thr = scores[order[i]];
            let (tp0, fp0) = (tp, fp);
            while i < order.len() && scores[order[i]] == thr {
                if labels[order[i]] == 1 {
                    tp += 1;
                } else {
                    fp += 1;
                }
                i += 1;
            }
            auc_numerator += (fp - fp0) * (tp + tp0);
            points.push(RocPoint { threshold: thr, fpr: fp as f64 / n, tpr: tp as f64 / p });
        }
        Ok(RocCurve { points, positives, negatives, auc_numerator })
    }

    /// Trapezoidal area, evaluated with a single final division.
    pub fn auc(&self) -> f64 {
        self.auc_numerator as f64 / (2 * self.positives * self.negatives) as f64
    }

    /// Largest TPR among points with FPR ≤ `f`.
    pub fn tpr_at_fpr(&self, f: f64) -> f64 {
        self.points.iter().filter(|q| q.fpr <= f).map(|q| q.tpr).fold(0.0, f64::max)
    }

    /// Smallest FPR among points with TPR ≥ `t`.
    pub fn fpr_at_tpr(&self, t: f64) -> f64 {
        self.points.iter().filter(|q| q.tpr >= t).map(|q| q.fpr).fold(1.0, f64::min)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,fpr,tpr\n");
        for q in &self.points {
            s.push_str(&format!("{},{},{}\n", q.threshold, q.fpr, q.tpr));
        }
        s
    }
}

pub const FPR_POINTS: [f64; 2] = [0.15, 0.20];
pub const TPR_POINT: f64 = 0.70;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub auc: f64,
    pub tpr_at_fpr_015: f64,
    pub tpr_at_fpr_020: f64,
    pub fpr_at_tpr_070: f64,
}

pub fn classification_metrics(scores: &[f64], labels: &[u8]) -> Result<(ClassificationMetrics, RocCurve)> {
    let roc = RocCurve::new(scores, labels)?;
    let m = ClassificationMetrics {
        auc: roc.auc(),
        tpr_at_fpr_015: roc.tpr_at_fpr(FPR_POINTS[0]),
        tpr_at_fpr_020: roc.tpr_at_fpr(FPR_POINTS[1]),
        fpr_at_tpr_070: roc.fpr_at_tpr(TPR_POINT),
    };
    Ok((m, roc))
}

/// Table columns for a task, in report order.
pub fn columns(task: Task) -> &'static [&'static str] {
    match task {
        Task::Regression => &["MAE", "R2"],
        Task::Classification => &["AUC", "TPR@FPR=0.15", "TPR@FPR=0.20", "FPR@TPR=0.70"],
    }
}

impl RegressionMetrics {
    pub fn values(&self) -> Vec<f64> {
        vec![self.mae, self.r2]
    }
}

impl ClassificationMetrics {
    pub fn values(&self) -> Vec<f64> {
        vec![self.auc, self.tpr_at_fpr_015, self.tpr_at_fpr_020, self.fpr_at_tpr_070]
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One model's metrics for one seed; `None` when that seed's run failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub values: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub seeds: Vec<SeedResult>,
    /// Per column, over successful seeds.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: Task,
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
    /// Set when any seed of any model failed.
    pub partial: bool,
    /// Conventions and defaults the numbers depend on.
    pub notes: Vec<String>,
}

impl MetricsReport {
    /// Aggregates per-seed results. Needs at least 2 seeds per model, and
    /// at least one success per model.
    pub fn new(task: Task, rows: Vec<(String, Vec<SeedResult>)>, notes: Vec<String>) -> Result<Self> {
        let cols = columns(task);
        let mut partial = false;
        let mut out = Vec::with_capacity(rows.len());
        for (model, seeds) in rows {
            if seeds.len() < 2 {
                return Err(Error::Invalid(format!("model {model}: a report needs at least 2 seeds, got {}", seeds.len())));
            }
            let ok: Vec<&Vec<f64>> = seeds.iter().filter_map(|s| s.values.as_ref()).collect();
            if let Some(bad) = ok.iter().find(|v| v.len() != cols.len()) {
                return Err(Error::shape("report", format!("model {model}: {} values vs {} columns", bad.len(), cols.len())));
            }
            if ok.is_empty() {
                return Err(Error::Invalid(format!("model {model}: every seed failed")));
            }
            partial |= ok.len() < seeds.len();
            let (mean, std) = (0..cols.len())
                .map(|c| mean_std(&ok.iter().map(|v| v[c]).collect::<Vec<_>>()))
                .unzip();
            out.push(ReportRow { model, seeds, mean, std });
        }
        Ok(MetricsReport { task, columns: cols.iter().map(|c| c.to_string()).collect(), rows: out, partial, notes })
    }

    /// Header `Model,<columns>`, one row per model with `mean ± std` cells.
    pub fn to_csv(&self) -> String {
        let mut s = format!("Model,{}\n", self.columns.join(","));
        for r in &self.rows {
            let cells: Vec<String> = r.mean.iter().zip(&r.std).map(|(m, sd)| format_cell(*m, *sd)).collect();
            s.push_str(&format!("{},{}\n", csv_field(&r.model), cells.join(",")));
        }
        s
    }
}

pub fn format_cell(mean: f64, std: f64) -> String {
    format!("{mean:.3} ± {std:.3}")
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn pair_count_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let (mut twice, mut pairs) = (0u128, 0u128);
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1;
                    twice += if si > sj { 2 } else if si == sj { 1 } else { 0 };
                }
            }
        }
        twice as f64 / (2 * pairs) as f64
    }

    /// Rates at every threshold `score ≥ c` for `c` in the observed scores,
    /// plus the empty prediction set.
    fn enumerate_rates(scores: &[f64], labels: &[u8]) -> Vec<(f64, f64)> {
        let p = labels.iter().filter(|&&l| l == 1).count() as f64;
        let n = labels.len() as f64 - p;
        let mut out = vec![(0.0, 0.0)];
        for &c in scores {
            let tp = scores.iter().zip(labels).filter(|(s, l)| **s >= c && **l == 1).count() as f64;
            let fp = scores.iter().zip(labels).filter(|(s, l)| **s >= c && **l == 0).count() as f64;
            out.push((fp / n, tp / p));
        }
        out
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<u8>) {
        loop {
            let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            if labels.contains(&0) && labels.contains(&1) {
                let scores = (0..n).map(|_| rng.random_range(0..40) as f64 / 4.0).collect();
                return (scores, labels);
            }
        }
    }

    #[test]
    fn regression_identities() {
        let t = [20.0, 30.0, 55.0, 80.0];
        let m = regression_metrics(&t, &t).unwrap();
        assert_eq!((m.mae, m.r2), (0.0, 1.0));
        let mean = [46.25; 4];
        assert!(regression_metrics(&mean, &t).unwrap().r2.abs() < 1e-15);
        assert!(regression_metrics(&t, &[5.0; 4]).is_err());
        assert!(regression_metrics(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn regression_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p: Vec<f64> = (0..50).map(|_| rng.random_range(18.0..88.0)).collect();
        let t: Vec<f64> = (0..50).map(|_| rng.random_range(18.0..88.0)).collect();
        let m = regression_metrics(&p, &t).unwrap();
        let (mut abs, mut res, mut sum) = (0.0, 0.0, 0.0);
        for i in 0..50 {
            abs += (p[i] - t[i]).abs();
            res += (p[i] - t[i]) * (p[i] - t[i]);
            sum += t[i];
        }
        let mut tot = 0.0;
        for v in &t {
            tot += (v - sum / 50.0) * (v - sum / 50.0);
        }
        assert!((m.mae - abs / 50.0).abs() < 1e-12);
        assert!((m.r2 - (1.0 - res / tot)).abs() < 1e-12);
    }

    #[test]
    fn separating_and_inverted_scores() {
        let labels = [0, 0, 0, 1, 1, 1];
        let scores = [0.1, 0.2, 0.3, 0.7, 0.8, 0.9];
        let (m, _) = classification_metrics(&scores, &labels).unwrap();
        assert_eq!(m.auc, 1.0);
        assert_eq!(m.tpr_at_fpr_015, 1.0);
        assert_eq!(m.fpr_at_tpr_070, 0.0);
        let inverted: Vec<f64> = labels.iter().map(|&l| 1.0 - l as f64).collect();
        assert_eq!(RocCurve::new(&inverted, &labels).unwrap().auc(), 0.0);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(RocCurve::new(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(RocCurve::new(&[0.1, 0.2], &[0, 2]).is_err());
    }

    #[test]
    fn curve_is_monotone_with_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (s, l) = random_set(&mut rng, 200);
        let roc = RocCurve::new(&s, &l).unwrap();
        let first = roc.points[0];
        let last = *roc.points.last().unwrap();
        assert_eq!((first.fpr, first.tpr), (0.0, 0.0));
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        for w in roc.points.windows(2) {
            assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
            assert!(w[1].threshold < w[0].threshold);
        }
    }

    #[test]
    fn matches_brute_force_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let (s, l) = random_set(&mut rng, 200);
            let roc = RocCurve::new(&s, &l).unwrap();
            assert_eq!(roc.auc(), pair_count_auc(&s, &l));
            let rates = enumerate_rates(&s, &l);
            for f in [0.0, 0.15, 0.2, 0.5] {
                let want = rates.iter().filter(|r| r.0 <= f).map(|r| r.1).fold(0.0, f64::max);
                assert_eq!(roc.tpr_at_fpr(f), want);
            }
            for t in [0.3, 0.7, 1.0] {
                let want = rates.iter().filter(|r| r.1 >= t).map(|r| r.0).fold(1.0, f64::min);
                assert_eq!(roc.fpr_at_tpr(t), want);
            }
        }
    }

    proptest! {
        #[test]
        fn auc_is_pair_counting(data in prop::collection::vec((0i32..6, 0u8..2), 2..40)) {
            let s: Vec<f64> = data.iter().map(|d| d.0 as f64).collect();
            let l: Vec<u8> = data.iter().map(|d| d.1).collect();
            prop_assume!(l.contains(&0) && l.contains(&1));
            prop_assert_eq!(RocCurve::new(&s, &l).unwrap().auc(), pair_count_auc(&s, &l));
        }
    }

    fn seeds(vals: &[&[f64]]) -> Vec<SeedResult> {
        vals.iter().enumerate().map(|(i, v)| SeedResult { seed: i as u64, values: Some(v.to_vec()) }).collect()
    }

    #[test]
    fn report_statistics() {
        let r = MetricsReport::new(Task::Regression, vec![("m".into(), seeds(&[&[2.0, 0.5] as &[f64]; 3]))], vec![]).unwrap();
        assert_eq!(r.rows[0].std, vec![0.0, 0.0]);
        let r = MetricsReport::new(Task::Regression, vec![("m".into(), seeds(&[&[1.0, 0.1], &[2.0, 0.2], &[4.0, 0.6]]))], vec![])
            .unwrap();
        // Hand computation: mean 7/3, population variance (16+1+25)/27.
        assert!((r.rows[0].mean[0] - 7.0 / 3.0).abs() < 1e-15);
        assert!((r.rows[0].std[0] - (42.0f64 / 27.0).sqrt()).abs() < 1e-15);
        assert!(!r.partial);
        assert!(MetricsReport::new(Task::Regression, vec![("m".into(), seeds(&[&[1.0, 0.1]]))], vec![]).is_err());
    }

    #[test]
    fn failed_seed_marks_partial() {
        let mut s = seeds(&[&[0.9, 0.5, 0.6, 0.2], &[0.8, 0.4, 0.5, 0.3]]);
        s.push(SeedResult { seed: 2, values: None });
        let r = MetricsReport::new(Task::Classification, vec![("fusion".into(), s)], vec![]).unwrap();
        assert!(r.partial);
        assert!((r.rows[0].mean[0] - 0.85).abs() < 1e-12);
    }

    #[test]
    fn csv_layout() {
        let r = MetricsReport::new(Task::Classification, vec![("GCN".into(), seeds(&[&[0.9, 0.5, 0.6, 0.2] as &[f64]; 2]))], vec![])
            .unwrap();
        let csv = r.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("Model,AUC,TPR@FPR=0.15,TPR@FPR=0.20,FPR@TPR=0.70"));
        assert_eq!(lines.next(), Some("GCN,0.900 ± 0.000,0.500 ± 0.000,0.600 ± 0.000,0.200 ± 0.000"));
    }
}
