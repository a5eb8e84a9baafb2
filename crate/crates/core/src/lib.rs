//! Stabilized test-time augmentation ensembles.
//!
//! Logits from `N` augmented passes are sparsified per pass with
//! negative-sample suppression (keep the top `K`, flatten the rest to the
//! row minimum), averaged, and classified by argmax. Around that core sit
//! the augmentation policies, the three classic aggregation strategies with
//! conflict detection, the binary conflict model, normality and Hölder
//! diagnostics, logit providers, and the evaluation harness.

pub mod augment;
pub mod conflict;
pub mod ensemble;
pub mod harness;
pub mod providers;
pub mod rng;
pub mod stats;
pub mod tensor;
