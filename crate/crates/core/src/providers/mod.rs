//! Logit providers: where per-pass logits come from.
//!
//! * [`SyntheticSource`]: the one-hot margin task, no images or model.
//! * [`ReplaySource`]: logits recorded earlier into a replay file.
//! * [`live::LiveSource`]: images from a manifest, augmented here and sent
//!   to an external model adapter over the wire protocol.

pub mod adapter;
pub mod live;
pub mod loopback;
pub mod replay;
pub mod synthetic;
pub mod wire;

use thiserror::Error;

use crate::augment::AugError;
use crate::ensemble::{EnsembleError, LogitMatrix, LogitVector};
use crate::tensor::{IngestError, TensorError};

pub use adapter::{AdapterClient, AdapterError};
pub use live::{AugMode, LiveConfig, LiveSource};
pub use replay::{replay_read, replay_write, ReplayData, ReplayError};
pub use synthetic::{synthetic_logits, NoiseFamily, SyntheticTaskSpec};

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("invalid provider configuration: {0}")]
    InvalidConfig(String),
    #[error("sample index {index} out of range for {len} samples")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("requested {requested} passes but only {available} are available")]
    TooFewPasses { requested: usize, available: usize },
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Augment(#[from] AugError),
}

/// A labelled set of samples that can produce `N` logit vectors each.
pub trait LogitSource: Send + Sync {
    fn num_samples(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn label(&self, sample: usize) -> usize;

    /// Logits for `n_passes` views of `sample`. With `augmented == false`
    /// only the plain view is returned (one row).
    fn sample_logits(&self, sample: usize, n_passes: usize, augmented: bool) -> Result<LogitMatrix, ProviderError>;

    /// Whether samples may be requested from several threads at once.
    fn parallel(&self) -> bool {
        true
    }
}

pub struct SyntheticSource {
    spec: SyntheticTaskSpec,
}

impl SyntheticSource {
    pub fn new(spec: SyntheticTaskSpec) -> Result<Self, ProviderError> {
        spec.validate()?;
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &SyntheticTaskSpec {
        &self.spec
    }
}

impl LogitSource for SyntheticSource {
    fn num_samples(&self) -> usize {
        self.spec.num_samples
    }

    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn label(&self, sample: usize) -> usize {
        self.spec.label(sample)
    }

    /// Pass 0 doubles as the un-augmented view.
    fn sample_logits(&self, sample: usize, n_passes: usize, augmented: bool) -> Result<LogitMatrix, ProviderError> {
        let n = if augmented { n_passes } else { 1 };
        if n == 0 {
            return Err(ProviderError::InvalidConfig("n_passes must be at least 1".into()));
        }
        let rows = (0..n)
            .map(|p| synthetic_logits(&self.spec, sample, p).map(|(z, _)| z))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(LogitMatrix::new(rows)?)
    }
}

pub struct ReplaySource {
    data: ReplayData,
}

impl ReplaySource {
    pub fn new(data: ReplayData) -> Result<Self, ProviderError> {
        data.validate()?;
        if data.num_classes < 2 {
            return Err(ProviderError::InvalidConfig("replay needs at least 2 classes".into()));
        }
        if let Some((row, &label)) = data
            .labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= data.num_classes)
        {
            return Err(ProviderError::InvalidConfig(format!(
                "replay record {row} has label {label} >= C = {}",
                data.num_classes
            )));
        }
        Ok(Self { data })
    }

    pub fn open(path: &std::path::Path) -> Result<Self, ProviderError> {
        Self::new(replay_read(path)?)
    }

    pub fn data(&self) -> &ReplayData {
        &self.data
    }
}

impl LogitSource for ReplaySource {
    fn num_samples(&self) -> usize {
        self.data.num_samples()
    }

    fn num_classes(&self) -> usize {
        self.data.num_classes
    }

    fn label(&self, sample: usize) -> usize {
        self.data.labels[sample] as usize
    }

    /// The first `n_passes` recorded passes. A replay holds augmented passes
    /// only, so the plain view is pass 0; baseline numbers from a replay are
    /// single-augmented-pass numbers.
    fn sample_logits(&self, sample: usize, n_passes: usize, augmented: bool) -> Result<LogitMatrix, ProviderError> {
        if sample >= self.num_samples() {
            return Err(ProviderError::IndexOutOfRange {
                index: sample,
                len: self.num_samples(),
            });
        }
        let n = if augmented { n_passes } else { 1 };
        if n == 0 {
            return Err(ProviderError::InvalidConfig("n_passes must be at least 1".into()));
        }
        if n > self.data.num_passes {
            return Err(ProviderError::TooFewPasses {
                requested: n,
                available: self.data.num_passes,
            });
        }
        let c = self.data.num_classes;
        let rows = self.data.sample(sample)[..n * c]
            .chunks_exact(c)
            .map(|row| LogitVector::new(row.iter().map(|&v| f64::from(v)).collect()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(LogitMatrix::new(rows)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replay_source_slices_passes() {
        let data = ReplayData {
            num_passes: 3,
            num_classes: 2,
            labels: vec![1, 0],
            logits: vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0],
        };
        let src = ReplaySource::new(data).unwrap();
        let m = src.sample_logits(1, 2, true).unwrap();
        assert_eq!(m.rows()[0].values(), &[6.0, 7.0]);
        assert_eq!(m.rows()[1].values(), &[8.0, 9.0]);
        assert_eq!(src.sample_logits(0, 32, false).unwrap().n_rows(), 1);
        assert!(matches!(
            src.sample_logits(0, 4, true),
            Err(ProviderError::TooFewPasses { requested: 4, available: 3 })
        ));
        assert_eq!(src.label(0), 1);
    }

    #[test]
    fn replay_source_rejects_bad_labels() {
        let data = ReplayData {
            num_passes: 1,
            num_classes: 2,
            labels: vec![2],
            logits: vec![0.0, 1.0],
        };
        assert!(ReplaySource::new(data).is_err());
    }

    #[test]
    fn synthetic_source_plain_view_is_first_pass() {
        let src = SyntheticSource::new(SyntheticTaskSpec::new(4, 8, 1.0, 1.0, 2)).unwrap();
        let plain = src.sample_logits(5, 16, false).unwrap();
        let aug = src.sample_logits(5, 16, true).unwrap();
        assert_eq!(plain.n_rows(), 1);
        assert_eq!(aug.n_rows(), 16);
        assert_eq!(plain.rows()[0], aug.rows()[0]);
    }
}
