//! Ranking and confusion metrics with per-task/per-class reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::MetricError;
use crate::heads::{argmax_rows, FusionWeightTriple};
use crate::numcore::Tensor;
use crate::par;

fn check_scores(scores: &[f64], n: usize) -> Result<(), MetricError> {
    if scores.len() != n {
        return Err(MetricError::Size(format!("{} scores for {n} labels", scores.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(MetricError::Undefined("NaN score".into()));
    }
    Ok(())
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auc_binary(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    check_scores(scores, labels.len())?;
    let n_pos = labels.iter().filter(|&&l| l).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::Undefined("AUC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the Mann-Whitney count keeps everything integral
    let (mut twice_wins, mut neg_below) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice_wins += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
        i = j;
    }
    Ok((twice_wins as f64 / 2.0) / (n_pos * n_neg) as f64)
}

/// One-vs-rest AUC of every class column of `probs[n×K]`.
pub fn auc_one_vs_rest(probs: &Tensor, truth: &[usize]) -> Vec<Result<f64, MetricError>> {
    (0..probs.cols())
        .map(|c| {
            let scores: Vec<f64> = (0..probs.rows()).map(|r| probs.at2(r, c)).collect();
            let labels: Vec<bool> = truth.iter().map(|&t| t == c).collect();
            auc_binary(&scores, &labels)
        })
        .collect()
}

/// Non-interpolated average precision over the ranking sorted by
/// (score descending, index ascending).
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    check_scores(scores, labels.len())?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(MetricError::Undefined("average precision needs a positive sample".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank0, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(sum / n_pos as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
    /// Set when any ratio had a zero denominator and was reported as 0.
    pub zero_division: bool,
}

pub fn confusion_metrics(pred: &[usize], truth: &[usize], positive: usize) -> Result<ConfusionMetrics, MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::Size(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    let (mut tp, mut fp, mut tn, mut fnn) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p == positive, t == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fnn += 1,
        }
    }
    let mut zero_division = false;
    let mut ratio = |num: usize, den: usize| {
        if den == 0 {
            zero_division = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(tp, tp + fp);
    let sensitivity = ratio(tp, tp + fnn);
    let specificity = ratio(tn, tn + fp);
    let accuracy = ratio(tp + tn, pred.len());
    Ok(ConfusionMetrics { precision, sensitivity, specificity, accuracy, zero_division })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub auc: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub zero_division: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: usize,
    pub accuracy: f64,
    pub classes: Vec<ClassMetrics>,
    /// Average precision of class 1, for binary tasks only.
    pub ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tasks: Vec<TaskReport>,
    /// Mean over every per-class AUC of every task.
    pub avg_auc: f64,
    /// Mean over tasks of accuracy.
    pub avg_acc: f64,
}

fn check_sizes(probs: &[Tensor], truth: &[Vec<usize>]) -> Result<(), MetricError> {
    if probs.is_empty() || probs.len() != truth.len() {
        return Err(MetricError::Size(format!("{} prediction tasks for {} label tasks", probs.len(), truth.len())));
    }
    for (t, (p, y)) in probs.iter().zip(truth).enumerate() {
        if p.rank() != 2 || p.rows() != y.len() {
            return Err(MetricError::Size(format!("task {t}: {:?} predictions for {} labels", p.shape(), y.len())));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= p.cols()) {
            return Err(MetricError::Size(format!("task {t}: label {bad} outside {} classes", p.cols())));
        }
    }
    Ok(())
}

/// Full report over per-task probability matrices `[n×K_t]`.
pub fn report(probs: &[Tensor], truth: &[Vec<usize>]) -> Result<MetricReport, MetricError> {
    check_sizes(probs, truth)?;
    let idx: Vec<usize> = (0..probs.len()).collect();
    let tasks = par::map(&idx, |&t| task_report(t, &probs[t], &truth[t]))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let aucs: Vec<f64> = tasks.iter().flat_map(|t| t.classes.iter().map(|c| c.auc)).collect();
    let avg_auc = aucs.iter().sum::<f64>() / aucs.len() as f64;
    let avg_acc = tasks.iter().map(|t| t.accuracy).sum::<f64>() / tasks.len() as f64;
    Ok(MetricReport { tasks, avg_auc, avg_acc })
}

fn task_report(task: usize, probs: &Tensor, truth: &[usize]) -> Result<TaskReport, MetricError> {
    let pred = argmax_rows(probs);
    let aucs = auc_one_vs_rest(probs, truth);
    let mut classes = Vec::with_capacity(probs.cols());
    let accuracy = pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64;
    for (c, auc) in aucs.into_iter().enumerate() {
        let auc = auc.map_err(|e| MetricError::Undefined(format!("task {task} class {c}: {e}")))?;
        let cm = confusion_metrics(&pred, truth, c)?;
        classes.push(ClassMetrics {
            class: c,
            auc,
            precision: cm.precision,
            sensitivity: cm.sensitivity,
            specificity: cm.specificity,
            zero_division: cm.zero_division,
        });
    }
    let ap = if probs.cols() == 2 {
        let scores: Vec<f64> = (0..probs.rows()).map(|r| probs.at2(r, 1)).collect();
        let labels: Vec<bool> = truth.iter().map(|&t| t == 1).collect();
        Some(average_precision(&scores, &labels)?)
    } else {
        None
    };
    Ok(TaskReport { task, accuracy, classes, ap })
}

/// `(avg_acc, avg_auc)` that skips classes whose AUC is undefined; the AUC
/// is NaN when no class qualifies. Used for per-epoch monitoring.
pub fn summary_lenient(probs: &[Tensor], truth: &[Vec<usize>]) -> Result<(f64, f64), MetricError> {
    check_sizes(probs, truth)?;
    let mut accs = Vec::new();
    let mut aucs = Vec::new();
    for (p, y) in probs.iter().zip(truth) {
        let pred = argmax_rows(p);
        accs.push(pred.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64);
        aucs.extend(auc_one_vs_rest(p, y).into_iter().filter_map(Result::ok));
    }
    let acc = accs.iter().sum::<f64>() / accs.len() as f64;
    let auc = if aucs.is_empty() { f64::NAN } else { aucs.iter().sum::<f64>() / aucs.len() as f64 };
    Ok((acc, auc))
}

/// Serialized evaluation output: test report plus the fusion weights used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    #[serde(flatten)]
    pub weights: FusionWeightTriple,
    pub weights_searched: bool,
    pub fused: MetricReport,
    pub clinical: MetricReport,
    pub derm: MetricReport,
    pub fusion_branch: MetricReport,
}

pub const REPORT_CSV_HEADER: &str = "scope,task,class,metric,value";

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// Flat rows `scope,task,class,metric,value` in a fixed order.
    pub fn write_csv_rows(&self, scope: &str, out: &mut String) {
        for t in &self.tasks {
            let _ = writeln!(out, "{scope},{},,accuracy,{}", t.task, t.accuracy);
            for c in &t.classes {
                for (name, v) in [
                    ("auc", c.auc),
                    ("precision", c.precision),
                    ("sensitivity", c.sensitivity),
                    ("specificity", c.specificity),
                ] {
                    let _ = writeln!(out, "{scope},{},{},{name},{v}", t.task, c.class);
                }
            }
            if let Some(ap) = t.ap {
                let _ = writeln!(out, "{scope},{},1,ap,{ap}", t.task);
            }
        }
        let _ = writeln!(out, "{scope},avg,,avg_auc,{}", self.avg_auc);
        let _ = writeln!(out, "{scope},avg,,avg_acc,{}", self.avg_acc);
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_CSV_HEADER}\n");
        self.write_csv_rows("fused", &mut s);
        s
    }

    /// Every reported value, for range checks.
    pub fn values(&self) -> Vec<f64> {
        let mut v = vec![self.avg_auc, self.avg_acc];
        for t in &self.tasks {
            v.push(t.accuracy);
            v.extend(t.ap);
            for c in &t.classes {
                v.extend([c.auc, c.precision, c.sensitivity, c.specificity]);
            }
        }
        v
    }
}

impl EvaluationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_CSV_HEADER}\n");
        let w = &self.weights;
        for (name, v) in [("w_C", w.w_c), ("w_D", w.w_d), ("w_F", w.w_f)] {
            let _ = writeln!(s, "weights,,,{name},{v}");
        }
        self.fused.write_csv_rows("fused", &mut s);
        self.clinical.write_csv_rows("clinical", &mut s);
        self.derm.write_csv_rows("derm", &mut s);
        self.fusion_branch.write_csv_rows("fusion", &mut s);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_fixture() {
        let auc = auc_binary(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert_eq!(auc, 0.75);
    }

    #[test]
    fn auc_extremes() {
        assert_eq!(auc_binary(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc_binary(&[0.5; 5], &[false, true, true, false, true]).unwrap(), 0.5);
        assert!(matches!(auc_binary(&[0.1, 0.2], &[true, true]), Err(MetricError::Undefined(_))));
        assert!(auc_binary(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn ap_fixture() {
        let ap = average_precision(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!((ap - 0.8333).abs() < 1e-4);
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        assert!(average_precision(&[0.9, 0.8], &[false, false]).is_err());
    }

    #[test]
    fn confusion_fixture() {
        // TP=3, FP=1, FN=2, TN=4
        let pred = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0];
        let truth = [1, 1, 1, 0, 1, 1, 0, 0, 0, 0];
        let m = confusion_metrics(&pred, &truth, 1).unwrap();
        assert_eq!((m.precision, m.sensitivity, m.specificity, m.accuracy), (0.75, 0.6, 0.8, 0.7));
        assert!(!m.zero_division);
    }

    #[test]
    fn confusion_edge_cases() {
        let truth = [0, 1, 1, 0];
        let perfect = confusion_metrics(&truth, &truth, 1).unwrap();
        assert_eq!((perfect.precision, perfect.sensitivity, perfect.specificity, perfect.accuracy), (1.0, 1.0, 1.0, 1.0));
        let negative = confusion_metrics(&[0, 0, 0, 0], &truth, 1).unwrap();
        assert_eq!((negative.sensitivity, negative.specificity, negative.precision), (0.0, 1.0, 0.0));
        assert!(negative.zero_division);
    }

    #[test]
    fn perfect_binary_report() {
        let probs = Tensor::from_rows(&[&[0.9, 0.1], &[0.2, 0.8], &[0.7, 0.3], &[0.4, 0.6]]);
        let r = report(&[probs], &[vec![0, 1, 0, 1]]).unwrap();
        assert_eq!(r.avg_auc, 1.0);
        assert_eq!(r.avg_acc, 1.0);
        assert_eq!(r.tasks[0].ap, Some(1.0));
        let back = MetricReport::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn report_rejects_missing_class() {
        let probs = Tensor::from_rows(&[&[0.9, 0.1], &[0.2, 0.8]]);
        assert!(report(std::slice::from_ref(&probs), &[vec![0, 0]]).is_err());
        let (acc, auc) = summary_lenient(&[probs], &[vec![0, 0]]).unwrap();
        assert_eq!(acc, 0.5);
        assert!(auc.is_nan());
    }

    #[test]
    fn csv_layout() {
        let probs = Tensor::from_rows(&[&[0.9, 0.1], &[0.2, 0.8]]);
        let r = report(&[probs], &[vec![0, 1]]).unwrap();
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], REPORT_CSV_HEADER);
        assert_eq!(lines[1], "fused,0,,accuracy,1");
        assert_eq!(lines[2], "fused,0,0,auc,1");
        assert_eq!(lines.last().unwrap(), &"fused,avg,,avg_acc,1");
    }
}
