//! Live provider: manifest images, augmented locally, scored by an adapter.

use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::adapter::{AdapterClient, DEFAULT_TIMEOUT};
use super::{LogitSource, ProviderError};
use crate::augment::{generate_baseline_passes, generate_passes, select_reference, AugPolicyConfig, BaselineAug, ReferenceImage};
use crate::ensemble::{LogitMatrix, LogitVector};
use crate::rng::{self, Domain};
use crate::tensor::{decode_image, load_manifest, preprocess, standardize, DatasetManifest, ImageTensor, ManifestEntry, PreprocessConfig};

/// Partner images loaded for standard mixup/cutmix.
const PARTNER_POOL: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum AugMode {
    Stable(AugPolicyConfig),
    Standard { ops: Vec<BaselineAug> },
}

impl Default for AugMode {
    fn default() -> Self {
        AugMode::Stable(AugPolicyConfig::default())
    }
}

#[derive(Debug, Clone)]
pub struct LiveConfig {
    pub command: String,
    pub manifest: PathBuf,
    /// Mean/std are used as given; the target size comes from the adapter.
    pub preprocess: PreprocessConfig,
    pub aug: AugMode,
    pub batch_size: usize,
    pub timeout: Duration,
    pub seed: u64,
}

impl LiveConfig {
    pub fn new(command: impl Into<String>, manifest: impl Into<PathBuf>, seed: u64) -> Self {
        Self {
            command: command.into(),
            manifest: manifest.into(),
            preprocess: PreprocessConfig::default(),
            aug: AugMode::default(),
            batch_size: 16,
            timeout: DEFAULT_TIMEOUT,
            seed,
        }
    }
}

pub struct LiveSource {
    manifest: DatasetManifest,
    preprocess: PreprocessConfig,
    aug: AugMode,
    reference: Option<ReferenceImage>,
    partners: Vec<ImageTensor>,
    batch_size: usize,
    seed: u64,
    client: Mutex<AdapterClient>,
}

fn load_entry(entry: &ManifestEntry, cfg: &PreprocessConfig) -> Result<ImageTensor, ProviderError> {
    let raw = decode_image(&entry.path)?;
    Ok(preprocess(&raw, cfg)?)
}

impl LiveSource {
    pub fn open(cfg: &LiveConfig) -> Result<Self, ProviderError> {
        if cfg.batch_size == 0 {
            return Err(ProviderError::InvalidConfig("batch_size must be at least 1".into()));
        }
        let client = AdapterClient::spawn(&cfg.command, cfg.timeout)?;
        let hello = client.hello();
        if hello.channels != 3 {
            return Err(ProviderError::InvalidConfig(format!(
                "adapter expects {} channels, images are RGB",
                hello.channels
            )));
        }
        let manifest = load_manifest(&cfg.manifest, client.num_classes())?;
        let preprocess = PreprocessConfig {
            target_h: hello.height as usize,
            target_w: hello.width as usize,
            ..cfg.preprocess.clone()
        };
        let (reference, partners) = match &cfg.aug {
            AugMode::Stable(policy) => {
                policy.validate()?;
                let r = select_reference(&manifest, policy.reference_seed, |e| load_entry(e, &preprocess))?;
                (Some(r), Vec::new())
            }
            AugMode::Standard { ops } => {
                let partners = if ops.iter().any(BaselineAug::needs_partner) {
                    let mut rng = rng::stream(cfg.seed, Domain::Baseline, u64::MAX, 0);
                    (0..PARTNER_POOL.min(manifest.len()))
                        .map(|_| load_entry(&manifest.entries[rng.random_range(0..manifest.len())], &preprocess))
                        .collect::<Result<Vec<_>, _>>()?
                } else {
                    Vec::new()
                };
                (None, partners)
            }
        };
        Ok(Self {
            manifest,
            preprocess,
            aug: cfg.aug.clone(),
            reference,
            partners,
            batch_size: cfg.batch_size,
            seed: cfg.seed,
            client: Mutex::new(client),
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn reference(&self) -> Option<&ReferenceImage> {
        self.reference.as_ref()
    }

    /// The `[0, 1]` views of `sample` before standardization.
    pub fn sample_inputs(&self, sample: usize, n_passes: usize, augmented: bool) -> Result<Vec<ImageTensor>, ProviderError> {
        let entry = self.manifest.entries.get(sample).ok_or(ProviderError::IndexOutOfRange {
            index: sample,
            len: self.manifest.len(),
        })?;
        let x = load_entry(entry, &self.preprocess)?;
        if !augmented {
            return Ok(vec![x]);
        }
        match &self.aug {
            AugMode::Stable(policy) => {
                let reference = self.reference.as_ref().expect("stable mode has a reference");
                Ok(generate_passes(&x, reference, n_passes, policy, self.seed, sample as u64)?
                    .into_iter()
                    .map(|(t, _)| t)
                    .collect())
            }
            AugMode::Standard { ops } => Ok(generate_baseline_passes(
                &x,
                ops,
                &self.partners,
                n_passes,
                self.seed,
                sample as u64,
            )?),
        }
    }

    /// Score `[0, 1]` views through the adapter in batches.
    pub fn score(&self, views: &[ImageTensor]) -> Result<LogitMatrix, ProviderError> {
        let standardized = views
            .iter()
            .map(|v| standardize(v, &self.preprocess))
            .collect::<Result<Vec<_>, _>>()?;
        let mut client = self.client.lock().unwrap_or_else(|p| p.into_inner());
        let mut rows: Vec<LogitVector> = Vec::with_capacity(views.len());
        for chunk in standardized.chunks(self.batch_size) {
            rows.extend(client.infer(chunk)?);
        }
        Ok(LogitMatrix::new(rows)?)
    }
}

impl LogitSource for LiveSource {
    fn num_samples(&self) -> usize {
        self.manifest.len()
    }

    fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    fn label(&self, sample: usize) -> usize {
        self.manifest.entries[sample].label
    }

    fn sample_logits(&self, sample: usize, n_passes: usize, augmented: bool) -> Result<LogitMatrix, ProviderError> {
        let views = self.sample_inputs(sample, n_passes, augmented)?;
        self.score(&views)
    }

    fn parallel(&self) -> bool {
        false
    }
}
