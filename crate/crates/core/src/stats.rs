//! Normality and smoothness diagnostics for per-pass logits.
//!
//! Jarque-Bera tests over (image, class) groups with an ECDF of the
//! p-values, plus a log-log least-squares fit of the Hölder constants
//! relating input distances to logit distances and the resulting variance
//! bound.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::trace_variance;
use crate::ensemble::LogitMatrix;
use crate::tensor::ImageTensor;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("samples have zero variance")]
    Degenerate,
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("need at least 2 usable pairs, got {0}")]
    InsufficientPairs(usize),
    #[error("degenerate regressor: {0}")]
    DegenerateRegressor(String),
    #[error("{passes} input passes but {rows} logit rows")]
    LengthMismatch { passes: usize, rows: usize },
}

pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CentralMoments {
    pub mean: f64,
    pub m2: f64,
    pub m3: f64,
    pub m4: f64,
}

/// Population central moments `m_k = (1/n) sum (x - mean)^k`.
pub fn central_moments(samples: &[f64]) -> Result<CentralMoments, StatsError> {
    if samples.len() < 2 {
        return Err(StatsError::TooFewSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite(i));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &x in samples {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    Ok(CentralMoments {
        mean,
        m2: m2 / n,
        m3: m3 / n,
        m4: m4 / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JbResult {
    pub n: usize,
    pub skew: f64,
    pub kurt: f64,
    pub jb: f64,
    pub p_value: f64,
}

impl JbResult {
    pub fn rejects(&self, alpha: f64) -> bool {
        self.p_value <= alpha
    }
}

/// Upper tail of chi-squared with two degrees of freedom.
pub fn chi2_2_sf(x: f64) -> f64 {
    (-x / 2.0).exp()
}

pub fn jb_statistic(n: usize, skew: f64, kurt: f64) -> f64 {
    n as f64 / 6.0 * (skew * skew + (kurt - 3.0) * (kurt - 3.0) / 4.0)
}

pub fn jb_test(samples: &[f64]) -> Result<JbResult, StatsError> {
    if samples.len() < 4 {
        return Err(StatsError::TooFewSamples {
            needed: 4,
            got: samples.len(),
        });
    }
    let m = central_moments(samples)?;
    // relative threshold: constant samples leave only rounding noise in m2
    let scale = samples.iter().map(|v| v.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    if m.m2 <= (scale * 1e-14).powi(2) {
        return Err(StatsError::Degenerate);
    }
    let skew = m.m3 / m.m2.powf(1.5);
    let kurt = m.m4 / (m.m2 * m.m2);
    let jb = jb_statistic(samples.len(), skew, kurt);
    Ok(JbResult {
        n: samples.len(),
        skew,
        kurt,
        jb,
        p_value: chi2_2_sf(jb),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JbRecord {
    pub image_index: usize,
    pub class_index: usize,
    pub result: JbResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedGroup {
    pub image_index: usize,
    pub class_index: usize,
    pub reason: String,
}

/// Step ECDF over a sorted sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ecdf {
    sorted: Vec<f64>,
}

impl Ecdf {
    pub fn new(mut values: Vec<f64>) -> Self {
        values.sort_by(f64::total_cmp);
        Self { sorted: values }
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    /// Fraction of values `<= x`.
    pub fn eval(&self, x: f64) -> f64 {
        if self.sorted.is_empty() {
            return 0.0;
        }
        self.sorted.partition_point(|v| *v <= x) as f64 / self.sorted.len() as f64
    }

    pub fn on_grid(&self, grid: &[f64]) -> Vec<(f64, f64)> {
        grid.iter().map(|&a| (a, self.eval(a))).collect()
    }
}

/// `alpha = 0, 0.01, ..., 1`.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..=100).map(|i| f64::from(i) / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JbSuite {
    pub records: Vec<JbRecord>,
    pub skipped: Vec<SkippedGroup>,
    pub ecdf: Ecdf,
    pub alpha: f64,
    pub rejection_fraction: f64,
}

/// One test per (image, class) group: the `N` values class `k` takes across
/// the passes of image `i`. Groups that fail the preconditions are listed in
/// `skipped`.
pub fn jb_over_groups(groups: &[LogitMatrix], alpha: f64) -> JbSuite {
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (image_index, m) in groups.iter().enumerate() {
        for class_index in 0..m.n_classes() {
            match jb_test(&m.column(class_index)) {
                Ok(result) => records.push(JbRecord {
                    image_index,
                    class_index,
                    result,
                }),
                Err(e) => skipped.push(SkippedGroup {
                    image_index,
                    class_index,
                    reason: e.to_string(),
                }),
            }
        }
    }
    let ecdf = Ecdf::new(records.iter().map(|r| r.result.p_value).collect());
    let rejection_fraction = ecdf.eval(alpha);
    JbSuite {
        records,
        skipped,
        ecdf,
        alpha,
        rejection_fraction,
    }
}

pub fn write_jb_csv(records: &[JbRecord], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "image_index,class_index,skew,kurt,jb,p")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.image_index, r.class_index, r.result.skew, r.result.kurt, r.result.jb, r.result.p_value
        )?;
    }
    Ok(())
}

pub fn write_ecdf_csv(points: &[(f64, f64)], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "alpha,fraction")?;
    for (a, f) in points {
        writeln!(out, "{a},{f}")?;
    }
    Ok(())
}

/// `(1/N) sum_i ||z_i - mean||^2`.
pub fn logit_variance(m: &LogitMatrix) -> Result<f64, StatsError> {
    if m.n_rows() < 2 {
        return Err(StatsError::TooFewSamples {
            needed: 2,
            got: m.n_rows(),
        });
    }
    Ok(trace_variance(m.rows().iter().map(|r| r.values())))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HolderFit {
    pub c: f64,
    pub d: f64,
    pub r2: f64,
    pub pairs_used: usize,
}

pub const MIN_INPUT_DISTANCE: f64 = 1e-9;

/// Least squares of `log dz = log c + d log dx` over `(dx, dz)` distance
/// pairs. Pairs with `dx < 1e-9`, or with `dz == 0` (no logarithm), are
/// dropped.
pub fn holder_fit_pairs(pairs: &[(f64, f64)]) -> Result<HolderFit, StatsError> {
    let points: Vec<(f64, f64)> = pairs
        .iter()
        .filter(|(dx, dz)| *dx >= MIN_INPUT_DISTANCE && *dz > 0.0)
        .map(|(dx, dz)| (dx.ln(), dz.ln()))
        .collect();
    if points.is_empty() && !pairs.is_empty() {
        return Err(StatsError::DegenerateRegressor(
            "every pair has input distance below 1e-9 or zero logit distance".into(),
        ));
    }
    if points.len() < 2 {
        return Err(StatsError::InsufficientPairs(points.len()));
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - mean_y).powi(2)).sum();
    let spread = points.iter().map(|p| p.0.abs()).fold(1.0, f64::max);
    if sxx <= n * (spread * 1e-12).powi(2) {
        return Err(StatsError::DegenerateRegressor("all input distances are equal".into()));
    }
    let d = sxy / sxx;
    let log_c = mean_y - d * mean_x;
    let ss_res: f64 = points.iter().map(|p| (p.1 - log_c - d * p.0).powi(2)).sum();
    let r2 = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    Ok(HolderFit {
        c: log_c.exp(),
        d,
        r2,
        pairs_used: points.len(),
    })
}

/// Pairwise `(||psi_i - psi_j||, ||z_i - z_j||)` for `i < j`.
pub fn distance_pairs(input_passes: &[ImageTensor], logits: &LogitMatrix) -> Result<Vec<(f64, f64)>, StatsError> {
    if input_passes.len() != logits.n_rows() {
        return Err(StatsError::LengthMismatch {
            passes: input_passes.len(),
            rows: logits.n_rows(),
        });
    }
    let rows = logits.rows();
    let mut pairs = Vec::new();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let dx = input_passes[i].squared_distance(&input_passes[j]).sqrt();
            let dz = rows[i]
                .values()
                .iter()
                .zip(rows[j].values())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            pairs.push((dx, dz));
        }
    }
    Ok(pairs)
}

pub fn holder_fit(input_passes: &[ImageTensor], logits: &LogitMatrix) -> Result<HolderFit, StatsError> {
    if input_passes.len() < 3 {
        return Err(StatsError::TooFewSamples {
            needed: 3,
            got: input_passes.len(),
        });
    }
    holder_fit_pairs(&distance_pairs(input_passes, logits)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub var_input: f64,
    pub var_logits: f64,
    /// `2^(d-1) c^2 var_input`.
    pub jensen_bound: f64,
    /// `2^(d-1) c^2 var_input^d`, the bound Jensen's inequality yields when
    /// the exponent is carried through.
    pub power_bound: f64,
    /// `d` lies in `(0, 1]`.
    pub applicable: bool,
    pub satisfied: bool,
}

pub const JENSEN_SLACK: f64 = 0.05;

pub fn jensen_bound_check(fit: &HolderFit, var_input: f64, var_logits: f64) -> VarianceReport {
    let factor = 2f64.powf(fit.d - 1.0) * fit.c * fit.c;
    let jensen_bound = factor * var_input;
    let power_bound = factor * var_input.powf(fit.d);
    let applicable = fit.d > 0.0 && fit.d <= 1.0;
    VarianceReport {
        var_input,
        var_logits,
        jensen_bound,
        power_bound,
        applicable,
        satisfied: applicable && var_logits <= jensen_bound * (1.0 + JENSEN_SLACK),
    }
}
