//! Conflict between logit averaging and hard voting in the binary Gaussian
//! model.
//!
//! With per-pass logits `z ~ N((mu1, mu2), sigma^2 I)` and `N` passes, the
//! sample mean of `z1 - z2` and the fraction of passes voting for class 1
//! are asymptotically jointly Gaussian. This module evaluates the resulting
//! closed-form conflict probability and checks it by direct simulation.

#![allow(clippy::excessive_precision)]

use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};
use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Domain};

#[derive(Debug, Error, PartialEq)]
pub enum ConflictError {
    #[error("correlation {0} is too close to +/-1 (degenerate bivariate normal)")]
    DegenerateCorrelation(f64),
    #[error("invalid model: {0}")]
    InvalidSpec(String),
    #[error("trials must be at least 1")]
    NoTrials,
    #[error("sweep grid is empty")]
    EmptyGrid,
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_677_94;

pub fn std_normal_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// `Phi(a) * (1 - Phi(a))` without cancellation in the tails.
fn bernoulli_variance(a: f64) -> f64 {
    std_normal_cdf(a) * std_normal_cdf(-a)
}

// Gauss-Legendre half-rules (weight, positive node) for 6, 12 and 20 points.
const GL6: [(f64, f64); 3] = [
    (0.1713244923791705, 0.9324695142031522),
    (0.3607615730481384, 0.6612093864662647),
    (0.4679139345726904, 0.2386191860831970),
];
const GL12: [(f64, f64); 6] = [
    (0.04717533638651177, 0.9815606342467191),
    (0.1069393259953183, 0.9041172563704750),
    (0.1600783285433464, 0.7699026741943050),
    (0.2031674267230659, 0.5873179542866171),
    (0.2334925365383547, 0.3678314989981802),
    (0.2491470458134029, 0.1252334085114692),
];
const GL20: [(f64, f64); 10] = [
    (0.01761400713915212, 0.9931285991850949),
    (0.04060142980038694, 0.9639719272779138),
    (0.06267204833410906, 0.9122344282513259),
    (0.08327674157670475, 0.8391169718222188),
    (0.1019301198172404, 0.7463319064601508),
    (0.1181945319615184, 0.6360536807265150),
    (0.1316886384491766, 0.5108670019508271),
    (0.1420961093183821, 0.3737060887154196),
    (0.1491729864726037, 0.2277858511416451),
    (0.1527533871307259, 0.07652652113349733),
];

/// `P(X > dh, Y > dk)` for a standard bivariate normal with correlation `r`
/// (Drezner-Wesolowsky with Genz's refinements for |r| near 1).
fn bvn_upper(dh: f64, dk: f64, r: f64) -> f64 {
    if dh == f64::INFINITY || dk == f64::INFINITY {
        return 0.0;
    }
    if dh == f64::NEG_INFINITY {
        return if dk == f64::NEG_INFINITY { 1.0 } else { std_normal_cdf(-dk) };
    }
    if dk == f64::NEG_INFINITY {
        return std_normal_cdf(-dh);
    }
    if r == 0.0 {
        return std_normal_cdf(-dh) * std_normal_cdf(-dk);
    }
    let rule: &[(f64, f64)] = if r.abs() < 0.3 {
        &GL6
    } else if r.abs() < 0.75 {
        &GL12
    } else {
        &GL20
    };
    let two_pi = 2.0 * PI;
    let h = dh;
    let mut k = dk;
    let mut hk = h * k;
    let mut bvn = 0.0;

    if r.abs() < 0.925 {
        let hs = (h * h + k * k) / 2.0;
        let asr = r.asin() / 2.0;
        for &(w, x) in rule {
            for node in [1.0 - x, 1.0 + x] {
                let sn = (asr * node).sin();
                bvn += w * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
            }
        }
        return (bvn * asr / two_pi + std_normal_cdf(-h) * std_normal_cdf(-k)).clamp(0.0, 1.0);
    }

    if r < 0.0 {
        k = -k;
        hk = -hk;
    }
    if r.abs() < 1.0 {
        let a_sq = (1.0 - r) * (1.0 + r);
        let mut a = a_sq.sqrt();
        let b_sq = (h - k) * (h - k);
        let c = (4.0 - hk) / 8.0;
        let d = (12.0 - hk) / 80.0;
        let asr = -(b_sq / a_sq + hk) / 2.0;
        if asr > -100.0 {
            bvn = a * asr.exp() * (1.0 - c * (b_sq - a_sq) * (1.0 - d * b_sq) / 3.0 + c * d * a_sq * a_sq);
        }
        if hk > -100.0 {
            let b = b_sq.sqrt();
            let sp = two_pi.sqrt() * std_normal_cdf(-b / a);
            bvn -= (-hk / 2.0).exp() * sp * b * (1.0 - c * b_sq * (1.0 - d * b_sq) / 3.0);
        }
        a /= 2.0;
        let mut sum = 0.0;
        for &(w, x) in rule {
            for node in [1.0 - x, 1.0 + x] {
                let xs = (a * node) * (a * node);
                let asr = -(b_sq / xs + hk) / 2.0;
                if asr > -100.0 {
                    let sp = 1.0 + c * xs * (1.0 + 5.0 * d * xs);
                    let rs = (1.0 - xs).sqrt();
                    let ep = (-(hk / 2.0) * xs / ((1.0 + rs) * (1.0 + rs))).exp() / rs;
                    sum += w * asr.exp() * (sp - ep);
                }
            }
        }
        bvn = (a * sum - bvn) / two_pi;
    }
    let out = if r > 0.0 {
        bvn + std_normal_cdf(-h.max(k))
    } else if h >= k {
        -bvn
    } else {
        let l = if h < 0.0 {
            std_normal_cdf(k) - std_normal_cdf(h)
        } else {
            std_normal_cdf(-h) - std_normal_cdf(-k)
        };
        l - bvn
    };
    out.clamp(0.0, 1.0)
}

pub const MAX_ABS_RHO: f64 = 1.0 - 1e-12;

/// `P(X <= h, Y <= k)` for a standard bivariate normal with correlation `rho`.
pub fn bvn_cdf(h: f64, k: f64, rho: f64) -> Result<f64, ConflictError> {
    if rho.is_nan() || rho.abs() > MAX_ABS_RHO {
        return Err(ConflictError::DegenerateCorrelation(rho));
    }
    Ok(bvn_upper(-h, -k, rho))
}

/// Two-class Gaussian logit model with `n_experts` passes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryGaussianSpec {
    pub mu1: f64,
    pub mu2: f64,
    pub sigma: f64,
    pub n_experts: usize,
}

impl BinaryGaussianSpec {
    pub fn new(mu1: f64, mu2: f64, sigma: f64, n_experts: usize) -> Result<Self, ConflictError> {
        let spec = Self {
            mu1,
            mu2,
            sigma,
            n_experts,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ConflictError> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(ConflictError::InvalidSpec(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !self.mu1.is_finite() || !self.mu2.is_finite() {
            return Err(ConflictError::InvalidSpec("means must be finite".into()));
        }
        if self.n_experts == 0 {
            return Err(ConflictError::InvalidSpec("n_experts must be at least 1".into()));
        }
        Ok(())
    }

    /// Standardized margin `(mu1 - mu2) / (sqrt(2) sigma)`.
    pub fn margin(&self) -> f64 {
        (self.mu1 - self.mu2) / (SQRT_2 * self.sigma)
    }
}

/// Mean and covariance of `(z1 - z2, 1{z1 > z2})` for a single pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndicatorMoments {
    pub mean_diff: f64,
    pub mean_ind: f64,
    pub var_diff: f64,
    pub var_ind: f64,
    pub cov: f64,
}

pub fn indicator_moments(spec: &BinaryGaussianSpec) -> IndicatorMoments {
    let a = spec.margin();
    IndicatorMoments {
        mean_diff: spec.mu1 - spec.mu2,
        mean_ind: std_normal_cdf(a),
        var_diff: 2.0 * spec.sigma * spec.sigma,
        var_ind: bernoulli_variance(a),
        cov: SQRT_2 * spec.sigma * std_normal_pdf(a),
    }
}

/// Which variant of the closed form to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalyticForm {
    /// Bernoulli mean `Phi(a)` and variance `Phi(a) - Phi(a)^2`.
    #[default]
    Corrected,
    /// Density `phi(a)` in place of `Phi(a)` in the vote threshold and its
    /// variance. Kept for comparison; the moments it implies are wrong.
    DensityForm,
    /// `Corrected` with a continuity correction on the vote count, matching
    /// a hard vote that sends exact ties to class 2.
    ContinuityCorrected,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticConflict {
    pub probability: f64,
    /// The vote indicator is (numerically) deterministic and the Gaussian
    /// approximation collapses; probability is reported as 0.
    pub saturated: bool,
}

pub fn conflict_prob_analytic(spec: &BinaryGaussianSpec, form: AnalyticForm) -> Result<AnalyticConflict, ConflictError> {
    spec.validate()?;
    let a = spec.margin();
    let n = spec.n_experts as f64;
    let root_n = n.sqrt();
    let var_corrected = bernoulli_variance(a);
    let (vote_mean, vote_var, threshold) = match form {
        AnalyticForm::Corrected => (std_normal_cdf(a), var_corrected, 0.5),
        AnalyticForm::DensityForm => {
            let p = std_normal_pdf(a);
            (p, p - p * p, 0.5)
        }
        AnalyticForm::ContinuityCorrected => {
            let count = (spec.n_experts / 2) as f64 + 0.5;
            (std_normal_cdf(a), var_corrected, count / n)
        }
    };
    if vote_var < 1e-300 || var_corrected < 1e-300 {
        return Ok(AnalyticConflict {
            probability: 0.0,
            saturated: true,
        });
    }
    let t = (threshold - vote_mean) * root_n / vote_var.sqrt();
    let rho = std_normal_pdf(a) / var_corrected.sqrt();
    let h = -a * root_n;
    let joint = bvn_cdf(h, t, rho)?;
    let p = std_normal_cdf(h) + std_normal_cdf(t) - 2.0 * joint;
    Ok(AnalyticConflict {
        probability: p.clamp(0.0, 1.0),
        saturated: false,
    })
}

/// Resolution of an exactly split hard vote (`N` even, `N/2` votes each).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieRule {
    /// Fair coin per tied trial.
    #[default]
    FairCoin,
    /// Tie goes to class 2 (vote fraction `<= 1/2` means class 2).
    SecondClass,
    /// Tie goes to class 1.
    FirstClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConflictEstimate {
    pub rate: f64,
    pub trials: u64,
    pub conflicts: u64,
    pub std_err: f64,
}

impl ConflictEstimate {
    pub fn from_counts(conflicts: u64, trials: u64) -> Self {
        let rate = conflicts as f64 / trials as f64;
        Self {
            rate,
            trials,
            conflicts,
            std_err: (rate * (1.0 - rate) / trials as f64).sqrt(),
        }
    }
}

const SHARD_TRIALS: u64 = 4096;

/// Monte Carlo rate of `argmax(mean logits) != hard vote`. Trials are split
/// into fixed-size shards with index-derived streams, so the result does not
/// depend on the thread count.
pub fn simulate_conflict(
    spec: &BinaryGaussianSpec,
    trials: u64,
    seed: u64,
    ties: TieRule,
) -> Result<ConflictEstimate, ConflictError> {
    spec.validate()?;
    if trials == 0 {
        return Err(ConflictError::NoTrials);
    }
    let shards = trials.div_ceil(SHARD_TRIALS);
    let conflicts: u64 = (0..shards)
        .into_par_iter()
        .map(|shard| {
            let count = SHARD_TRIALS.min(trials - shard * SHARD_TRIALS);
            let mut rng = rng::stream(seed, Domain::Conflict, shard, 0);
            (0..count).filter(|_| conflict_trial(spec, ties, &mut rng)).count() as u64
        })
        .sum();
    Ok(ConflictEstimate::from_counts(conflicts, trials))
}

fn conflict_trial(spec: &BinaryGaussianSpec, ties: TieRule, rng: &mut impl Rng) -> bool {
    let mut diff_sum = 0.0;
    let mut votes_first = 0usize;
    for _ in 0..spec.n_experts {
        let z1 = spec.mu1 + spec.sigma * rng.sample::<f64, _>(StandardNormal);
        let z2 = spec.mu2 + spec.sigma * rng.sample::<f64, _>(StandardNormal);
        diff_sum += z1 - z2;
        if z1 > z2 {
            votes_first += 1;
        }
    }
    let logit_first = diff_sum > 0.0;
    let n = spec.n_experts;
    let hard_first = if 2 * votes_first == n {
        match ties {
            TieRule::FairCoin => rng.random::<bool>(),
            TieRule::SecondClass => false,
            TieRule::FirstClass => true,
        }
    } else {
        2 * votes_first > n
    };
    logit_first != hard_first
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fig10Row {
    pub mu1: f64,
    pub mu2: f64,
    pub sigma: f64,
    pub n: usize,
    pub analytic: f64,
    pub saturated: bool,
    pub empirical: f64,
    pub std_err: f64,
}

impl Fig10Row {
    /// Agreement gate: `|empirical - analytic| <= max(3 * std_err, 0.01)`.
    pub fn within_tolerance(&self) -> bool {
        (self.empirical - self.analytic).abs() <= (3.0 * self.std_err).max(0.01)
    }
}

pub const FIG10_MUS: [(f64, f64); 3] = [(1.0, 0.9), (1.0, 0.7), (1.0, 0.5)];
pub const FIG10_SIGMAS: [f64; 5] = [0.05, 0.10, 0.15, 0.20, 0.25];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub n_experts: usize,
    pub trials: u64,
    pub seed: u64,
    pub ties: TieRule,
    pub form: AnalyticForm,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            n_experts: 32,
            trials: 100_000,
            seed: 0,
            ties: TieRule::default(),
            form: AnalyticForm::default(),
        }
    }
}

/// Every grid point uses the same seed, so a single-point sweep equals a
/// direct `simulate_conflict` call.
pub fn sweep_fig10(mus: &[(f64, f64)], sigmas: &[f64], opts: &SweepOptions) -> Result<Vec<Fig10Row>, ConflictError> {
    if mus.is_empty() || sigmas.is_empty() {
        return Err(ConflictError::EmptyGrid);
    }
    let mut rows = Vec::with_capacity(mus.len() * sigmas.len());
    for &(mu1, mu2) in mus {
        for &sigma in sigmas {
            let spec = BinaryGaussianSpec::new(mu1, mu2, sigma, opts.n_experts)?;
            let analytic = conflict_prob_analytic(&spec, opts.form)?;
            let est = simulate_conflict(&spec, opts.trials, opts.seed, opts.ties)?;
            rows.push(Fig10Row {
                mu1,
                mu2,
                sigma,
                n: opts.n_experts,
                analytic: analytic.probability,
                saturated: analytic.saturated,
                empirical: est.rate,
                std_err: est.std_err,
            });
        }
    }
    Ok(rows)
}

pub const FIG10_CSV_HEADER: &str = "mu1,mu2,sigma,n,analytic,empirical,stderr";

pub fn write_fig10_csv(rows: &[Fig10Row], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{FIG10_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{:.16e},{:.16e},{:.16e},{},{:.16e},{:.16e},{:.16e}",
            r.mu1, r.mu2, r.sigma, r.n, r.analytic, r.empirical, r.std_err
        )?;
    }
    Ok(())
}
