//! Binary classification metrics with deterministic tie handling.
//!
//! Class 1 is the positive class throughout.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            return 0.0;
        }
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    /// `2·TP / (2·TP + FP + FN)`, zero when the denominator is zero.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    /// `[[TN, FP], [FN, TP]]` with rows = actual class, columns = predicted class.
    pub fn to_table(&self) -> String {
        format!(
            "actual\\predicted,0,1\n0,{},{}\n1,{},{}\n",
            self.tn, self.fp, self.fn_, self.tp
        )
    }
}

fn check_binary(xs: &[usize], what: &str) -> Result<()> {
    match xs.iter().find(|&&x| x > 1) {
        Some(x) => Err(Error::contract(format!("{what} must be binary, found {x}"))),
        None => Ok(()),
    }
}

pub fn confusion(preds: &[usize], labels: &[usize]) -> Result<Confusion> {
    if preds.len() != labels.len() {
        return Err(Error::dim("confusion", &[preds.len()], &[labels.len()]));
    }
    check_binary(preds, "predictions")?;
    check_binary(labels, "labels")?;
    let mut c = Confusion::default();
    for (&p, &l) in preds.iter().zip(labels) {
        match (p, l) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 0) => c.tn += 1,
            _ => c.fn_ += 1,
        }
    }
    Ok(c)
}

pub fn f1(preds: &[usize], labels: &[usize]) -> Result<f64> {
    Ok(confusion(preds, labels)?.f1())
}

fn check_scores(scores: &[f64], labels: &[usize]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::dim("auc", &[scores.len()], &[labels.len()]));
    }
    check_binary(labels, "labels")?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::contract("scores contain NaN"));
    }
    Ok(())
}

/// Groups of tied scores as `(positives, negatives)`, in ascending or
/// descending score order.
fn tie_groups(scores: &[f64], labels: &[usize], descending: bool) -> Vec<(u64, u64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let o = scores[a].total_cmp(&scores[b]);
        if descending {
            o.reverse()
        } else {
            o
        }
    });
    let mut groups: Vec<(u64, u64)> = Vec::new();
    let mut last: Option<f64> = None;
    for i in order {
        // 0.0 and -0.0 compare equal and belong to one group
        if last != Some(scores[i]) {
            groups.push((0, 0));
            last = Some(scores[i]);
        }
        let g = groups.last_mut().expect("group pushed");
        if labels[i] == 1 {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    groups
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half (Mann–Whitney U normalized).
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    check_scores(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "ROC AUC needs at least one positive and one negative".into(),
        ));
    }
    // twice the concordant-pair count keeps half-credit ties integral
    let mut twice = 0u64;
    let mut neg_below = 0u64;
    for (p, n) in tie_groups(scores, labels, false) {
        twice += 2 * p * neg_below + p * n;
        neg_below += n;
    }
    Ok(twice as f64 / (2 * pos * neg) as f64)
}

/// Average precision: Σ over descending thresholds of recall increment times
/// precision at that threshold, each tie group forming one threshold.
pub fn pr_auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    check_scores(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    if pos == 0 {
        return Err(Error::UndefinedMetric("PR AUC needs at least one positive".into()));
    }
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut ap = 0.0;
    for (p, n) in tie_groups(scores, labels, true) {
        tp += p;
        fp += n;
        if p > 0 {
            ap += (p as f64 / pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub f1: f64,
    /// `None` when the split holds a single class.
    pub roc_auc: Option<f64>,
    pub pr_auc: Option<f64>,
    pub confusion: Confusion,
    pub n_samples: usize,
}

pub const UNDEFINED: &str = "undefined";

impl MetricsReport {
    pub fn compute(preds: &[usize], scores: &[f64], labels: &[usize]) -> Result<Self> {
        let confusion = confusion(preds, labels)?;
        let defined = |r: Result<f64>| match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::UndefinedMetric(_)) => Ok(None),
            Err(e) => Err(e),
        };
        Ok(MetricsReport {
            accuracy: confusion.accuracy(),
            f1: confusion.f1(),
            roc_auc: defined(roc_auc(scores, labels))?,
            pr_auc: defined(pr_auc(scores, labels))?,
            confusion,
            n_samples: labels.len(),
        })
    }

    /// `(name, value)` pairs in a fixed order; undefined AUCs are `None`.
    pub fn entries(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("accuracy", Some(self.accuracy)),
            ("f1", Some(self.f1)),
            ("roc_auc", self.roc_auc),
            ("pr_auc", self.pr_auc),
            ("tp", Some(self.confusion.tp as f64)),
            ("fp", Some(self.confusion.fp as f64)),
            ("tn", Some(self.confusion.tn as f64)),
            ("fn", Some(self.confusion.fn_ as f64)),
            ("n_samples", Some(self.n_samples as f64)),
        ]
    }

    /// Flat `key=value` block, one metric per line.
    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            match v {
                Some(v) => writeln!(out, "{k}={v}").unwrap(),
                None => writeln!(out, "{k}={UNDEFINED}").unwrap(),
            }
        }
        out
    }

    /// `metric,value,seed` rows without a header.
    pub fn csv_rows(&self, seed: u64) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let v = v.map_or_else(|| UNDEFINED.to_string(), |v| v.to_string());
            writeln!(out, "{k},{v},{seed}").unwrap();
        }
        out
    }
}

pub const CSV_HEADER: &str = "metric,value,seed";

/// Mean and population standard deviation of one metric across reports,
/// skipping undefined values.
pub fn aggregate(values: &[Option<f64>]) -> Option<(f64, f64)> {
    let xs: Vec<f64> = values.iter().flatten().copied().collect();
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}
