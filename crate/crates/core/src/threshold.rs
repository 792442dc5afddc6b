//! Mark-imbalance calibration: score each mark by the ratio of its
//! predicted probability to its empirical prior, learn per-mark decision
//! thresholds maximizing one-vs-rest F1 on the training split, and predict
//! by the largest margin above threshold.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Calibrated thresholds. Marks without positives (or with zero prior)
/// get `epsilon = +inf` and are never predicted by margin.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub prior: Vec<f64>,
    /// `+inf` (a mark never predicted by margin) appears as `null` in JSON.
    #[serde(with = "eps_serde")]
    pub epsilon: Vec<f64>,
    /// One-vs-rest F1 achieved at calibration, per mark.
    pub f1: Vec<f64>,
}

mod eps_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let opts: Vec<Option<f64>> =
            v.iter().map(|&x| if x.is_finite() { Some(x) } else { None }).collect();
        opts.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let opts = Vec::<Option<f64>>::deserialize(d)?;
        Ok(opts.into_iter().map(|x| x.unwrap_or(f64::INFINITY)).collect())
    }
}

impl ThresholdTable {
    /// Zero thresholds over a given prior — the no-thresholding baseline.
    pub fn zero(prior: Vec<f64>) -> Self {
        let n = prior.len();
        ThresholdTable { prior, epsilon: vec![0.0; n], f1: vec![0.0; n] }
    }

    pub fn n_marks(&self) -> usize {
        self.prior.len()
    }

    pub fn usable(&self, m: usize) -> bool {
        self.prior[m] > 0.0
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let table: ThresholdTable = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if table.epsilon.len() != table.prior.len() || table.f1.len() != table.prior.len() {
            return Err(Error::Config("threshold table length mismatch".into()));
        }
        Ok(table)
    }
}

/// Prior-relative scores `r_m = p*(m) / prior_m`. Zero-prior marks score
/// `-inf` so they never win an argmax.
pub fn ratios(pm: &[f64], prior: &[f64]) -> Result<Vec<f64>> {
    if pm.len() != prior.len() {
        return Err(Error::Precondition(format!(
            "probability vector length {} vs prior length {}",
            pm.len(),
            prior.len()
        )));
    }
    Ok(pm
        .iter()
        .zip(prior)
        .map(|(&p, &q)| if q > 0.0 { p / q } else { f64::NEG_INFINITY })
        .collect())
}

/// One-vs-rest F1 over a binary split at threshold `eps` with `score >= eps`
/// predicting positive; 0/0 counts as 0.
fn f1_at(values: &[f64], is_pos: &[bool], eps: f64) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fne = 0usize;
    for (&v, &pos) in values.iter().zip(is_pos) {
        let pred = v >= eps;
        match (pred, pos) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            (false, false) => {}
        }
    }
    if 2 * tp + fp + fne == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fne) as f64
    }
}

/// Exhaustive search over the precision-recall curve's breakpoints (the
/// sorted distinct score values, `>=` semantics). Returns the threshold
/// with maximal F1 — ties broken toward the smallest — placed at the
/// midpoint below the winning breakpoint so separable classes end up with
/// a threshold strictly between them.
fn best_threshold(values: &[f64], is_pos: &[bool]) -> (f64, f64) {
    let mut distinct: Vec<f64> = values.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    let mut best_f1 = -1.0;
    let mut best_idx = 0usize;
    // scan from the smallest breakpoint so ties keep the smaller threshold
    for (idx, &v) in distinct.iter().enumerate() {
        let f1 = f1_at(values, is_pos, v);
        if f1 > best_f1 {
            best_f1 = f1;
            best_idx = idx;
        }
    }
    let v = distinct[best_idx];
    let eps = if best_idx > 0 { 0.5 * (v + distinct[best_idx - 1]) } else { v - 1.0 };
    (eps, best_f1)
}

/// Learns per-mark thresholds from prior-relative scores and true next
/// marks observed on the training split.
pub fn calibrate(scores: &[Vec<f64>], labels: &[usize], prior: Vec<f64>) -> Result<ThresholdTable> {
    if scores.len() != labels.len() {
        return Err(Error::Precondition(format!(
            "{} score vectors vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::Degenerate("no calibration examples".into()));
    }
    let n_marks = prior.len();
    for row in scores {
        if row.len() != n_marks {
            return Err(Error::Precondition("score vector width mismatch".into()));
        }
    }
    if let Some(&bad) = labels.iter().find(|&&m| m >= n_marks) {
        return Err(Error::Data(format!("label {bad} out of range")));
    }
    let mut epsilon = vec![f64::INFINITY; n_marks];
    let mut f1 = vec![0.0; n_marks];
    for m in 0..n_marks {
        let is_pos: Vec<bool> = labels.iter().map(|&l| l == m).collect();
        if prior[m] <= 0.0 || !is_pos.iter().any(|&p| p) {
            continue; // unusable: epsilon stays +inf
        }
        let values: Vec<f64> = scores.iter().map(|row| row[m]).collect();
        let (eps, best) = best_threshold(&values, &is_pos);
        epsilon[m] = eps;
        f1[m] = best;
    }
    Ok(ThresholdTable { prior, epsilon, f1 })
}

/// Thresholded prediction: the mark with the largest margin `r_m - eps_m`
/// among usable marks; ties go to the smallest mark id.
pub fn predict_mark(r: &[f64], table: &ThresholdTable) -> Result<usize> {
    if r.len() != table.n_marks() {
        return Err(Error::Precondition("ratio vector width mismatch".into()));
    }
    let mut best: Option<(usize, f64)> = None;
    for (m, &rv) in r.iter().enumerate() {
        if !table.usable(m) {
            continue;
        }
        let margin = rv - table.epsilon[m];
        if margin.is_nan() {
            continue;
        }
        match best {
            Some((_, b)) if margin <= b => {}
            _ => best = Some((m, margin)),
        }
    }
    best.map(|(m, _)| m)
        .ok_or_else(|| Error::Degenerate("no usable mark for prediction".into()))
}

/// Plain argmax prediction, ties to the smallest mark id.
pub fn predict_mark_plain(pm: &[f64]) -> usize {
    let mut best = 0usize;
    for (m, &p) in pm.iter().enumerate().skip(1) {
        if p > pm[best] {
            best = m;
        }
    }
    best
}
