//! Special functions and the conflict model checked against independent
//! numerical oracles computed here.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use stabletta::conflict::{
    bvn_cdf, conflict_prob_analytic, indicator_moments, simulate_conflict, std_normal_cdf, AnalyticForm,
    BinaryGaussianSpec, TieRule,
};

/// Composite Simpson rule with `n` (even) intervals.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let x = a + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
    }
    s * h / 3.0
}

fn pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `Phi(x)` by quadrature of the density from 0.
fn cdf_oracle(x: f64) -> f64 {
    0.5 + simpson(pdf, 0.0, x, 4000)
}

/// Plackett's identity: `Phi2(h, k; rho) = Phi(h)Phi(k) + int_0^rho phi2(h, k; r) dr`.
fn bvn_oracle(h: f64, k: f64, rho: f64) -> f64 {
    let density = |r: f64| {
        let q = 1.0 - r * r;
        (-(h * h - 2.0 * r * h * k + k * k) / (2.0 * q)).exp() / (2.0 * std::f64::consts::PI * q.sqrt())
    };
    cdf_oracle(h) * cdf_oracle(k) + simpson(density, 0.0, rho, 4000)
}

#[test]
fn normal_cdf_matches_quadrature() {
    assert!((std_normal_cdf(1.96) - 0.9750021048517795).abs() < 1e-12);
    for &x in &[-6.0, -3.3, -1.0, -0.25, 0.0, 0.4, 1.0, 1.96, 2.5, 5.0] {
        let got = std_normal_cdf(x);
        let want = cdf_oracle(x);
        assert!((got - want).abs() < 1e-12, "x={x}: {got} vs {want}");
    }
}

#[test]
fn bvn_matches_plackett_quadrature() {
    for &(h, k) in &[(0.0, 0.0), (0.5, -0.3), (-1.2, 0.8), (1.5, 1.5), (-2.0, -0.5), (2.5, -2.5)] {
        for &rho in &[-0.95, -0.7, -0.3, 0.0, 0.2, 0.6, 0.9, 0.95] {
            let got = bvn_cdf(h, k, rho).unwrap();
            let want = bvn_oracle(h, k, rho);
            assert!((got - want).abs() < 1e-9, "({h},{k},{rho}): {got} vs {want}");
        }
    }
}

#[test]
fn bvn_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (h, k, rho) = (0.3, -0.4, 0.65);
    let draws = 2_000_000;
    let s = (1.0f64 - rho * rho).sqrt();
    let hits = (0..draws)
        .filter(|_| {
            let x: f64 = rng.sample(StandardNormal);
            let e: f64 = rng.sample(StandardNormal);
            x <= h && rho * x + s * e <= k
        })
        .count() as f64
        / draws as f64;
    let want = bvn_cdf(h, k, rho).unwrap();
    let se = (want * (1.0 - want) / draws as f64).sqrt();
    assert!((hits - want).abs() < 4.0 * se, "{hits} vs {want}");
}

#[test]
fn indicator_moments_match_simulation() {
    let spec = BinaryGaussianSpec::new(1.0, 0.7, 0.3, 1).unwrap();
    let m = indicator_moments(&spec);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws = 400_000;
    let (mut sd, mut si, mut sdd, mut sii, mut sdi) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for _ in 0..draws {
        let d = spec.mu1 - spec.mu2
            + spec.sigma * (rng.sample::<f64, _>(StandardNormal) - rng.sample::<f64, _>(StandardNormal));
        let i = if d > 0.0 { 1.0 } else { 0.0 };
        sd += d;
        si += i;
        sdd += d * d;
        sii += i * i;
        sdi += d * i;
    }
    let n = draws as f64;
    let (md, mi) = (sd / n, si / n);
    let vi = sii / n - mi * mi;
    let cov = sdi / n - md * mi;
    assert!((mi - m.mean_ind).abs() < 4.0 * (vi / n).sqrt());
    assert!((vi - m.var_ind).abs() < 4.0 * (vi * (1.0 - 4.0 * vi) / n).sqrt().max(1e-4));
    assert!((sdd / n - md * md - m.var_diff).abs() < 0.01 * m.var_diff);
    assert!((cov - m.cov).abs() < 0.01 * m.cov.abs().max(1e-3), "{cov} vs {}", m.cov);
}

#[test]
fn closed_form_tracks_simulation_off_grid() {
    for &(mu2, sigma) in &[(0.8, 0.3), (0.6, 0.5), (0.95, 0.1)] {
        let spec = BinaryGaussianSpec::new(1.0, mu2, sigma, 32).unwrap();
        let analytic = conflict_prob_analytic(&spec, AnalyticForm::Corrected).unwrap().probability;
        let est = simulate_conflict(&spec, 100_000, 17, TieRule::FairCoin).unwrap();
        assert!(
            (est.rate - analytic).abs() <= (3.0 * est.std_err).max(0.01),
            "mu2={mu2} sigma={sigma}: {} vs {analytic}",
            est.rate
        );
    }
}

#[test]
fn zero_margin_closed_form_value() {
    // a = 0: t = 0, rho = phi(0)/(1/2), P = 1 - 2 Phi2(0, 0; rho) with the
    // orthant formula Phi2(0, 0; rho) = 1/4 + asin(rho)/(2 pi)
    let rho = 2.0 * pdf(0.0);
    let want = 1.0 - 2.0 * (0.25 + rho.asin() / (2.0 * std::f64::consts::PI));
    let spec = BinaryGaussianSpec::new(1.0, 1.0, 0.2, 32).unwrap();
    let got = conflict_prob_analytic(&spec, AnalyticForm::Corrected).unwrap().probability;
    assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    assert!((got - 0.205952).abs() < 1e-6);
}
