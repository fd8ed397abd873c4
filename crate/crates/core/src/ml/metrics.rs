//! Binary classification metrics. The anomalous class is positive.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn from_predictions(labels: &[bool], predicted: &[bool]) -> Self {
        let mut c = Confusion::default();
        for (&y, &p) in labels.iter().zip(predicted) {
            match (y, p) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Ratio, or `None` when the denominator is zero.
fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Names of ratios whose denominator was zero and were reported as 0.
    pub undefined: UndefinedFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct UndefinedFlags {
    pub accuracy: bool,
    pub precision: bool,
    pub recall: bool,
    pub f1: bool,
    pub auc_roc: bool,
}

impl UndefinedFlags {
    pub fn any(&self) -> bool {
        self.accuracy || self.precision || self.recall || self.f1 || self.auc_roc
    }
}

impl Scores {
    pub fn from_confusion(c: &Confusion) -> Self {
        let accuracy = ratio(c.tp + c.tn, c.total());
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            _ => None,
        };
        Scores {
            accuracy: accuracy.unwrap_or(0.0),
            precision: precision.unwrap_or(0.0),
            recall: recall.unwrap_or(0.0),
            f1: f1.unwrap_or(0.0),
            undefined: UndefinedFlags {
                accuracy: accuracy.is_none(),
                precision: precision.is_none(),
                recall: recall.is_none(),
                f1: f1.is_none(),
                auc_roc: false,
            },
        }
    }
}

pub fn f1_score(labels: &[bool], predicted: &[bool]) -> f64 {
    Scores::from_confusion(&Confusion::from_predictions(labels, predicted)).f1
}

pub fn accuracy(labels: &[bool], predicted: &[bool]) -> f64 {
    Scores::from_confusion(&Confusion::from_predictions(labels, predicted)).accuracy
}

/// Area under the ROC curve from the Mann-Whitney rank sum, with tied
/// scores sharing their mid-rank. `None` when either class is absent.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; the group i..=j shares the average rank.
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count();
        rank_sum_pos += mid_rank * pos_in_group as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc_roc: f64,
    pub inference_time_ms_per_sample: f64,
    pub confusion: Confusion,
    pub undefined: UndefinedFlags,
}

impl EvalReport {
    pub fn from_scores(labels: &[bool], scores: &[f64], inference_time_ms_per_sample: f64) -> Self {
        let predicted: Vec<bool> = scores.iter().map(|&s| s >= 0.5).collect();
        let confusion = Confusion::from_predictions(labels, &predicted);
        let s = Scores::from_confusion(&confusion);
        let auc = roc_auc(scores, labels);
        EvalReport {
            accuracy: s.accuracy,
            precision: s.precision,
            recall: s.recall,
            f1: s.f1,
            auc_roc: auc.unwrap_or(0.0),
            inference_time_ms_per_sample,
            confusion,
            undefined: UndefinedFlags {
                auc_roc: auc.is_none(),
                ..s.undefined
            },
        }
    }

    /// Flat `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "accuracy = {:.6}", self.accuracy);
        let _ = writeln!(out, "precision = {:.6}", self.precision);
        let _ = writeln!(out, "recall = {:.6}", self.recall);
        let _ = writeln!(out, "f1 = {:.6}", self.f1);
        let _ = writeln!(out, "auc_roc = {:.6}", self.auc_roc);
        let _ = writeln!(out, "inference_time_ms_per_sample = {:.6}", self.inference_time_ms_per_sample);
        let c = &self.confusion;
        let _ = writeln!(out, "tp = {}\nfp = {}\ntn = {}\nfn = {}", c.tp, c.fp, c.tn, c.fn_);
        if self.undefined.any() {
            let u = &self.undefined;
            let names: Vec<&str> = [
                (u.accuracy, "accuracy"),
                (u.precision, "precision"),
                (u.recall, "recall"),
                (u.f1, "f1"),
                (u.auc_roc, "auc_roc"),
            ]
            .iter()
            .filter(|(f, _)| *f)
            .map(|(_, n)| *n)
            .collect();
            let _ = writeln!(out, "undefined = {}", names.join(","));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
