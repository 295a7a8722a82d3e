//! Presentation-attack error rates.
//!
//! Scores are "higher = more genuine". A sample is accepted as genuine when
//! its score is at or above the threshold, so a score exactly at the
//! threshold counts as accepted.

use std::fmt::Write as _;

use crate::corpus::Label;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    scores: Vec<f64>,
    labels: Vec<Label>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, labels: Vec<Label>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(invalid!("{} scores for {} labels", scores.len(), labels.len()));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(invalid!("scores must not be NaN"));
        }
        Ok(Self { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn counts(&self) -> Result<(usize, usize)> {
        let genuine = self.labels.iter().filter(|l| **l == Label::Genuine).count();
        let spoof = self.labels.len() - genuine;
        if genuine == 0 || spoof == 0 {
            return Err(invalid!(
                "need both classes, got {genuine} genuine and {spoof} spoof scores"
            ));
        }
        Ok((genuine, spoof))
    }
}

/// `(apcer, bpcer)`: the fraction of attacks accepted and the fraction of
/// genuine samples rejected at `threshold`.
pub fn apcer_bpcer(set: &ScoreSet, threshold: f64) -> Result<(f64, f64)> {
    let (n_genuine, n_spoof) = set.counts()?;
    let mut accepted_spoof = 0usize;
    let mut rejected_genuine = 0usize;
    for (s, l) in set.scores.iter().zip(&set.labels) {
        match (l, *s >= threshold) {
            (Label::Spoof, true) => accepted_spoof += 1,
            (Label::Genuine, false) => rejected_genuine += 1,
            _ => {}
        }
    }
    Ok((accepted_spoof as f64 / n_spoof as f64, rejected_genuine as f64 / n_genuine as f64))
}

/// Half total error `(FAR + FRR) / 2` at a fixed threshold.
pub fn hter(set: &ScoreSet, threshold: f64) -> Result<f64> {
    let (far, frr) = apcer_bpcer(set, threshold)?;
    Ok((far + frr) / 2.0)
}

/// One operating point of a threshold sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// Error rates at every candidate threshold, ascending: `-inf`, the
/// midpoints between adjacent distinct scores, and `+inf`.
pub fn roc(set: &ScoreSet) -> Result<Vec<RocPoint>> {
    let (n_genuine, n_spoof) = set.counts()?;
    let mut order: Vec<(f64, Label)> = set.scores.iter().copied().zip(set.labels.iter().copied()).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    // everything is accepted at -inf
    let mut accepted_spoof = n_spoof;
    let mut rejected_genuine = 0usize;
    let mut points = vec![RocPoint {
        threshold: f64::NEG_INFINITY,
        far: 1.0,
        frr: 0.0,
    }];
    let mut i = 0;
    while i < order.len() {
        let value = order[i].0;
        while i < order.len() && order[i].0 == value {
            match order[i].1 {
                Label::Spoof => accepted_spoof -= 1,
                Label::Genuine => rejected_genuine += 1,
            }
            i += 1;
        }
        let threshold = if i < order.len() {
            (value + order[i].0) / 2.0
        } else {
            f64::INFINITY
        };
        points.push(RocPoint {
            threshold,
            far: accepted_spoof as f64 / n_spoof as f64,
            frr: rejected_genuine as f64 / n_genuine as f64,
        });
    }
    Ok(points)
}

/// Equal error rate and the threshold that attains it.
///
/// Picks the candidate threshold minimizing `|FAR - FRR|` (lowest threshold
/// on ties) and reports `(FAR + FRR) / 2` there.
pub fn eer(set: &ScoreSet) -> Result<(f64, f64)> {
    let mut best: Option<RocPoint> = None;
    for p in roc(set)? {
        if best.is_none_or(|b| (p.far - p.frr).abs() < (b.far - b.frr).abs()) {
            best = Some(p);
        }
    }
    let b = best.expect("roc always has the two infinite thresholds");
    Ok(((b.far + b.frr) / 2.0, b.threshold))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
    pub eer: f64,
    pub hter: f64,
    pub threshold: f64,
}

pub const REPORT_KEYS: [&str; 6] = ["apcer", "bpcer", "acer", "eer", "hter", "threshold"];

impl MetricsReport {
    /// Rates on `test` at a threshold fixed at the EER point of `dev`, or of
    /// `test` itself when no development set is given. `eer` is always the
    /// test set's own EER.
    pub fn evaluate(dev: Option<&ScoreSet>, test: &ScoreSet) -> Result<Self> {
        let (test_eer, test_threshold) = eer(test)?;
        let threshold = match dev {
            Some(d) => eer(d)?.1,
            None => test_threshold,
        };
        let (apcer, bpcer) = apcer_bpcer(test, threshold)?;
        Ok(Self {
            apcer,
            bpcer,
            acer: (apcer + bpcer) / 2.0,
            eer: test_eer,
            hter: hter(test, threshold)?,
            threshold,
        })
    }

    fn values(&self) -> [f64; 6] {
        [self.apcer, self.bpcer, self.acer, self.eer, self.hter, self.threshold]
    }

    /// `key = value` lines.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        for (k, v) in REPORT_KEYS.iter().zip(self.values()) {
            writeln!(out, "{k} = {v}").expect("writing to a String");
        }
        out
    }

    pub fn from_key_values(text: &str) -> Result<Self> {
        let mut vals = [None; 6];
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid!("report line '{line}' is not key = value"))?;
            let idx = REPORT_KEYS
                .iter()
                .position(|n| *n == k.trim())
                .ok_or_else(|| invalid!("unknown report key '{}'", k.trim()))?;
            vals[idx] = Some(v.trim().parse::<f64>().map_err(|e| invalid!("report value '{}': {e}", v.trim()))?);
        }
        let get = |i: usize| vals[i].ok_or_else(|| invalid!("report lacks '{}'", REPORT_KEYS[i]));
        Ok(Self {
            apcer: get(0)?,
            bpcer: get(1)?,
            acer: get(2)?,
            eer: get(3)?,
            hter: get(4)?,
            threshold: get(5)?,
        })
    }

    /// Header of the results table; `tag_columns` precede the metric columns.
    pub fn table_header(tag_columns: &[&str]) -> String {
        tag_columns
            .iter()
            .copied()
            .chain(REPORT_KEYS)
            .collect::<Vec<_>>()
            .join("\t")
    }

    pub fn table_row(&self, tags: &[&str]) -> String {
        tags.iter()
            .map(|t| t.to_string())
            .chain(self.values().iter().map(|v| v.to_string()))
            .collect::<Vec<_>>()
            .join("\t")
    }
}

/// Tab-separated `(threshold, FAR, FRR)` dump with a header line.
pub fn roc_table(points: &[RocPoint]) -> String {
    let mut out = String::from("threshold\tfar\tfrr\n");
    for p in points {
        writeln!(out, "{}\t{}\t{}", p.threshold, p.far, p.frr).expect("writing to a String");
    }
    out
}
