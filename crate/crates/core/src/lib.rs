//! Interpretable sleep staging.
//!
//! Polysomnogram epochs are described twice: by expert-defined features
//! (band powers, spindle and slow-wave occupancy, amplitude statistics,
//! moments) and by the latent embedding of a CNN-BiLSTM stager. A ridge map
//! projects embeddings back onto the feature axes, and simple classifiers
//! trained on that representative matrix produce stage predictions whose
//! inputs carry feature names.

pub mod artifacts;
pub mod bundle;
pub mod dsp;
pub mod embednet;
pub mod evalmetrics;
pub mod featsel;
pub mod featurex;
pub mod interpret;
pub mod linmap;
pub mod pipeline;
pub mod psg_io;
pub mod simpleclf;
pub mod stage;
pub mod synthgen;

pub use stage::{StageLabel, NUM_STAGES};
