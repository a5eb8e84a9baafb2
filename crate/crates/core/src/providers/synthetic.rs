//! Synthetic one-hot margin task: `z = delta * e_label + noise`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use super::ProviderError;
use crate::ensemble::LogitVector;
use crate::rng::{self, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "family")]
pub enum NoiseFamily {
    #[default]
    Gaussian,
    /// Student-t with `dof` degrees of freedom, scaled by `noise_sigma`.
    StudentT { dof: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub num_classes: usize,
    pub num_samples: usize,
    pub delta: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    #[serde(default)]
    pub noise: NoiseFamily,
}

impl SyntheticTaskSpec {
    pub fn new(num_classes: usize, num_samples: usize, delta: f64, noise_sigma: f64, seed: u64) -> Self {
        Self {
            num_classes,
            num_samples,
            delta,
            noise_sigma,
            seed,
            noise: NoiseFamily::Gaussian,
        }
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        let bad = |m: &str| Err(ProviderError::InvalidConfig(m.to_string()));
        if self.num_classes < 2 {
            return bad("synthetic task needs at least 2 classes");
        }
        if self.num_samples == 0 {
            return bad("synthetic task needs at least 1 sample");
        }
        if !(self.delta > 0.0) {
            return bad("delta must be positive");
        }
        if !(self.noise_sigma > 0.0) {
            return bad("noise_sigma must be positive");
        }
        if let NoiseFamily::StudentT { dof } = self.noise {
            if !(dof > 0.0) {
                return bad("Student-t degrees of freedom must be positive");
            }
        }
        Ok(())
    }

    pub fn label(&self, sample_index: usize) -> usize {
        sample_index % self.num_classes
    }
}

/// Logits for one (sample, pass), deterministic in `(seed, sample, pass)`.
pub fn synthetic_logits(
    spec: &SyntheticTaskSpec,
    sample_index: usize,
    pass_index: usize,
) -> Result<(LogitVector, usize), ProviderError> {
    spec.validate()?;
    if sample_index >= spec.num_samples {
        return Err(ProviderError::IndexOutOfRange {
            index: sample_index,
            len: spec.num_samples,
        });
    }
    let label = spec.label(sample_index);
    let mut rng = rng::stream(spec.seed, Domain::Synthetic, sample_index as u64, pass_index as u64);
    let mut values: Vec<f64> = match spec.noise {
        NoiseFamily::Gaussian => (0..spec.num_classes)
            .map(|_| spec.noise_sigma * rng.sample::<f64, _>(StandardNormal))
            .collect(),
        NoiseFamily::StudentT { dof } => {
            let t = StudentT::new(dof).map_err(|e| ProviderError::InvalidConfig(e.to_string()))?;
            (0..spec.num_classes)
                .map(|_| spec.noise_sigma * t.sample(&mut rng))
                .collect()
        }
    };
    values[label] += spec.delta;
    Ok((LogitVector::new(values)?, label))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::argmax_class;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tiny_noise_argmax_is_label() {
        let spec = SyntheticTaskSpec::new(7, 50, 1.0, 1e-9, 3);
        for i in 0..50 {
            for p in 0..3 {
                let (z, label) = synthetic_logits(&spec, i, p).unwrap();
                assert_eq!(label, i % 7);
                assert_eq!(argmax_class(z.values()), label);
            }
        }
    }

    #[test]
    fn deterministic_and_distinct() {
        let spec = SyntheticTaskSpec::new(5, 10, 1.0, 1.0, 8);
        assert_eq!(synthetic_logits(&spec, 3, 2).unwrap(), synthetic_logits(&spec, 3, 2).unwrap());
        assert_ne!(synthetic_logits(&spec, 3, 2).unwrap().0, synthetic_logits(&spec, 3, 1).unwrap().0);
        assert!(matches!(
            synthetic_logits(&spec, 10, 0),
            Err(ProviderError::IndexOutOfRange { index: 10, len: 10 })
        ));
    }

    #[test]
    fn invalid_specs() {
        assert!(SyntheticTaskSpec::new(1, 10, 1.0, 1.0, 0).validate().is_err());
        assert!(SyntheticTaskSpec::new(3, 10, 0.0, 1.0, 0).validate().is_err());
        assert!(SyntheticTaskSpec::new(3, 10, 1.0, 0.0, 0).validate().is_err());
        assert!(SyntheticTaskSpec::new(3, 0, 1.0, 1.0, 0).validate().is_err());
    }

    #[test]
    fn single_pass_accuracy_matches_direct_simulation() {
        // oracle: P(N(1,1) > max of 9 N(0,1)) estimated from a separate
        // ChaCha stream, compared within 3 combined standard errors
        let m = 10_000;
        let spec = SyntheticTaskSpec::new(10, m, 1.0, 1.0, 21);
        let hits = (0..m)
            .filter(|&i| {
                let (z, label) = synthetic_logits(&spec, i, 0).unwrap();
                argmax_class(z.values()) == label
            })
            .count() as f64
            / m as f64;

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let oracle_trials = 200_000;
        let oracle = (0..oracle_trials)
            .filter(|_| {
                let target = 1.0 + rng.sample::<f64, _>(StandardNormal);
                (0..9).all(|_| rng.sample::<f64, _>(StandardNormal) < target)
            })
            .count() as f64
            / oracle_trials as f64;
        let se = (oracle * (1.0 - oracle) / m as f64 + oracle * (1.0 - oracle) / oracle_trials as f64).sqrt();
        assert!((hits - oracle).abs() <= 3.0 * se, "{hits} vs {oracle}");
    }
}
