//! Polysomnogram ingestion: EDF recordings, stage-label sidecars, resampling
//! and segmentation into fixed-length labeled epochs.

mod edf;
mod labels;
mod resample;
mod segment;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use edf::{parse_edf, write_edf, DIGITAL_MAX, DIGITAL_MIN};
pub use labels::{
    format_stage_labels, map_token, read_stage_labels, Annotation, LabelOptions, LabelSchema,
};
pub use resample::{resample, resample_recording, resample_with, NyquistWarning};
pub use segment::{segment_epochs, select_channels, EpochSet};

#[derive(Debug, Error, PartialEq)]
pub enum PsgError {
    #[error("malformed EDF header: {0}")]
    MalformedHeader(String),
    #[error("truncated data: header promises {expected} bytes of samples, file holds {actual}")]
    TruncatedRecord { expected: usize, actual: usize },
    #[error("channel `{0}` has digital min equal to digital max")]
    CalibrationDegenerate(String),
    #[error("channel `{channel}` sample {value} outside declared physical range [{min}, {max}]")]
    RangeOverflow {
        channel: String,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("invalid recording: {0}")]
    InvalidRecording(String),
    #[error("line {line}: unknown stage token `{token}`")]
    UnknownToken { line: usize, token: String },
    #[error("line {line}: malformed annotation row `{row}`")]
    MalformedAnnotation { line: usize, row: String },
    #[error("annotation at {onset} s overlaps the previous one ending at {previous_end} s")]
    OverlappingAnnotations { onset: f64, previous_end: f64 },
    #[error("annotation at {onset} s is not aligned to {epoch_seconds} s epochs")]
    MisalignedAnnotation { onset: f64, epoch_seconds: f64 },
    #[error("channel `{channel}` is sampled at {actual} Hz, expected {expected} Hz")]
    RateMismatch {
        channel: String,
        expected: f64,
        actual: f64,
    },
    #[error("no scored epochs left in recording `{0}`")]
    EmptyAfterFiltering(String),
    #[error("channel `{0}` not present in recording")]
    ChannelMissing(String),
    #[error("invalid rate: {0}")]
    InvalidRate(String),
}

pub type Result<T> = std::result::Result<T, PsgError>;

/// One signal of a recording, in physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub label: String,
    pub sampling_rate: f64,
    pub physical_unit: String,
    /// Declared physical range used for the 16-bit EDF calibration.
    pub physical_range: (f64, f64),
    pub samples: Vec<f64>,
}

impl Channel {
    /// Channel whose declared range is symmetric and covers the data, rounded
    /// up to a multiple of 100 units.
    pub fn new(label: impl Into<String>, sampling_rate: f64, unit: impl Into<String>, samples: Vec<f64>) -> Self {
        let peak = samples.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let bound = if peak == 0.0 { 100.0 } else { ((peak * 1.001) / 100.0).ceil() * 100.0 };
        Channel {
            label: label.into(),
            sampling_rate,
            physical_unit: unit.into(),
            physical_range: (-bound, bound),
            samples,
        }
    }

    pub fn with_range(mut self, min: f64, max: f64) -> Self {
        self.physical_range = (min, max);
        self
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sampling_rate
    }
}

/// A multichannel recording. Construct through [`Recording::new`], which
/// enforces finite samples, unique labels and a common duration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recording {
    pub id: String,
    pub channels: Vec<Channel>,
}

impl Recording {
    pub fn new(id: impl Into<String>, channels: Vec<Channel>) -> Result<Self> {
        let rec = Recording { id: id.into(), channels };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for ch in &self.channels {
            if !(ch.sampling_rate > 0.0 && ch.sampling_rate.is_finite()) {
                return Err(PsgError::InvalidRate(format!(
                    "channel `{}` has rate {}",
                    ch.label, ch.sampling_rate
                )));
            }
            if !seen.insert(ch.label.as_str()) {
                return Err(PsgError::InvalidRecording(format!("duplicate channel label `{}`", ch.label)));
            }
            if let Some(pos) = ch.samples.iter().position(|v| !v.is_finite()) {
                return Err(PsgError::InvalidRecording(format!(
                    "channel `{}` sample {pos} is not finite",
                    ch.label
                )));
            }
        }
        if let Some(first) = self.channels.first() {
            let d0 = first.duration();
            for ch in &self.channels[1..] {
                let period = 1.0 / ch.sampling_rate.min(first.sampling_rate);
                if (ch.duration() - d0).abs() > period + 1e-9 {
                    return Err(PsgError::InvalidRecording(format!(
                        "channel `{}` spans {} s but `{}` spans {} s",
                        ch.label,
                        ch.duration(),
                        first.label,
                        d0
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn channel(&self, label: &str) -> Option<&Channel> {
        self.channels.iter().find(|c| c.label == label)
    }

    pub fn duration(&self) -> f64 {
        self.channels.iter().map(Channel::duration).fold(0.0, f64::max)
    }
}
