//! Aggregation of per-pass logits.
//!
//! Hard voting, soft voting, logit averaging, Non-Significant Suppression
//! (NSS) and the StableTTA aggregate. Every tie, whether in argmax, Top-K
//! membership, vote counts or top-k scoring, breaks to the lowest class
//! index.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EnsembleError {
    #[error("logit vector needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("non-finite logit at class {0}")]
    NonFinite(usize),
    #[error("logit matrix needs at least one row")]
    NoRows,
    #[error("row {row} has {len} classes, expected {expected}")]
    RaggedRows {
        row: usize,
        len: usize,
        expected: usize,
    },
    #[error("K = {k} out of range 1..={classes}")]
    KOutOfRange { k: usize, classes: usize },
}

/// Raw model outputs for one pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EnsembleError> {
        if values.len() < 2 {
            return Err(EnsembleError::TooFewClasses(values.len()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EnsembleError::NonFinite(i));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

impl AsRef<[f64]> for LogitVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Class probabilities summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for ProbVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// N passes by C classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitMatrix {
    rows: Vec<LogitVector>,
}

impl LogitMatrix {
    pub fn new(rows: Vec<LogitVector>) -> Result<Self, EnsembleError> {
        let first = rows.first().ok_or(EnsembleError::NoRows)?;
        let expected = first.len();
        if let Some((row, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != expected) {
            return Err(EnsembleError::RaggedRows {
                row,
                len: r.len(),
                expected,
            });
        }
        Ok(Self { rows })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, EnsembleError> {
        Self::new(rows.into_iter().map(LogitVector::new).collect::<Result<_, _>>()?)
    }

    pub fn rows(&self) -> &[LogitVector] {
        &self.rows
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_classes(&self) -> usize {
        self.rows[0].len()
    }

    /// Values of one class coordinate across all passes.
    pub fn column(&self, class: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r.0[class]).collect()
    }

    pub fn map_rows(&self, f: impl Fn(&LogitVector) -> LogitVector) -> LogitMatrix {
        LogitMatrix {
            rows: self.rows.iter().map(f).collect(),
        }
    }

    fn mean_of(&self, f: impl Fn(&LogitVector) -> Vec<f64>) -> Vec<f64> {
        let n = self.rows.len() as f64;
        let mut acc = vec![0.0; self.n_classes()];
        for row in &self.rows {
            for (a, v) in acc.iter_mut().zip(f(row)) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

/// Max-shifted softmax.
pub fn softmax(z: &LogitVector) -> ProbVector {
    let max = z.max();
    let exps: Vec<f64> = z.0.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    ProbVector(exps.into_iter().map(|e| e / total).collect())
}

/// Index of the largest entry, lowest index on ties. Panics on an empty slice.
pub fn argmax_class(v: &[f64]) -> usize {
    assert!(!v.is_empty(), "argmax of an empty vector");
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest entries in rank order (value descending, then
/// index ascending).
pub fn top_k_indices(v: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

pub fn hard_vote(m: &LogitMatrix) -> usize {
    let mut votes = vec![0usize; m.n_classes()];
    for row in &m.rows {
        votes[argmax_class(&row.0)] += 1;
    }
    let mut best = 0;
    for (i, &v) in votes.iter().enumerate() {
        if v > votes[best] {
            best = i;
        }
    }
    best
}

pub fn mean_probs(m: &LogitMatrix) -> ProbVector {
    ProbVector(m.mean_of(|r| softmax(r).0))
}

pub fn soft_vote(m: &LogitMatrix) -> usize {
    argmax_class(&mean_probs(m).0)
}

pub fn logit_average(m: &LogitMatrix) -> (usize, LogitVector) {
    let mean = LogitVector(m.mean_of(|r| r.0.clone()));
    (argmax_class(&mean.0), mean)
}

fn check_k(k: usize, classes: usize) -> Result<(), EnsembleError> {
    if k == 0 || k > classes {
        return Err(EnsembleError::KOutOfRange { k, classes });
    }
    Ok(())
}

/// Non-Significant Suppression: keep the Top-K entries, set the rest to the
/// vector minimum.
pub fn nss(z: &LogitVector, k: usize) -> Result<LogitVector, EnsembleError> {
    check_k(k, z.len())?;
    let floor = z.min();
    let mut out = vec![floor; z.len()];
    for i in top_k_indices(&z.0, k) {
        out[i] = z.0[i];
    }
    Ok(LogitVector(out))
}

/// Mean of the NSS-processed rows and its argmax.
pub fn stable_tta_aggregate(m: &LogitMatrix, k: usize) -> Result<(usize, LogitVector), EnsembleError> {
    check_k(k, m.n_classes())?;
    let suppressed = LogitMatrix {
        rows: m
            .rows
            .iter()
            .map(|r| nss(r, k))
            .collect::<Result<_, _>>()?,
    };
    Ok(logit_average(&suppressed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Hard,
    Soft,
    Logit,
}

/// Unordered pair of strategies, stored in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StrategyPair(Strategy, Strategy);

impl StrategyPair {
    pub fn new(a: Strategy, b: Strategy) -> Self {
        if a <= b {
            Self(a, b)
        } else {
            Self(b, a)
        }
    }

    pub fn all() -> [StrategyPair; 3] {
        [
            Self(Strategy::Hard, Strategy::Soft),
            Self(Strategy::Hard, Strategy::Logit),
            Self(Strategy::Soft, Strategy::Logit),
        ]
    }

    pub fn label(&self) -> String {
        let name = |s: Strategy| match s {
            Strategy::Hard => "hard",
            Strategy::Soft => "soft",
            Strategy::Logit => "logit",
        };
        format!("{}_{}", name(self.0), name(self.1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationOutcome {
    pub y_hard: usize,
    pub y_soft: usize,
    pub y_logit: usize,
    pub mean_logits: LogitVector,
    pub mean_probs: ProbVector,
    pub conflict_pairs: BTreeSet<StrategyPair>,
}

impl AggregationOutcome {
    pub fn prediction(&self, s: Strategy) -> usize {
        match s {
            Strategy::Hard => self.y_hard,
            Strategy::Soft => self.y_soft,
            Strategy::Logit => self.y_logit,
        }
    }

    pub fn has_conflict(&self) -> bool {
        !self.conflict_pairs.is_empty()
    }
}

pub fn detect_conflict(m: &LogitMatrix) -> AggregationOutcome {
    let y_hard = hard_vote(m);
    let probs = mean_probs(m);
    let y_soft = argmax_class(&probs.0);
    let (y_logit, mean_logits) = logit_average(m);
    let mut outcome = AggregationOutcome {
        y_hard,
        y_soft,
        y_logit,
        mean_logits,
        mean_probs: probs,
        conflict_pairs: BTreeSet::new(),
    };
    for pair in StrategyPair::all() {
        if outcome.prediction(pair.0) != outcome.prediction(pair.1) {
            outcome.conflict_pairs.insert(pair);
        }
    }
    outcome
}

/// Whether `label` is among the `k` largest entries under the tie rule.
pub fn topk_accuracy(aggregated: &[f64], label: usize, k: usize) -> Result<bool, EnsembleError> {
    check_k(k, aggregated.len())?;
    Ok(top_k_indices(aggregated, k).contains(&label))
}
