//! Expert-defined per-epoch features.

mod events;
mod spectral;
mod stats;

use std::collections::HashMap;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::psg_io::EpochSet;

pub use events::{detect_slow_waves, detect_spindles, spindle_events};
pub use spectral::{multitaper_band_power, multitaper_band_power_for, Spectrum};
pub use stats::{amplitude_stats, moments};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FeatureError {
    #[error("band {lo}-{hi} Hz outside (0, {nyquist}] Hz")]
    BandOutOfRange { lo: f64, hi: f64, nyquist: f64 },
    #[error("channel map references unknown channel {0:?}")]
    UnknownChannel(String),
    #[error("feature {name:?} is not finite on epoch {epoch}")]
    NonFinite { name: String, epoch: usize },
    #[error("malformed feature matrix: {0}")]
    Malformed(String),
}

pub const DELTA_HZ: (f64, f64) = (0.5, 4.0);
pub const THETA_HZ: (f64, f64) = (4.0, 8.0);
pub const ALPHA_HZ: (f64, f64) = (8.0, 12.0);
pub const BETA_HZ: (f64, f64) = (12.0, 30.0);
pub const EMG_HZ: (f64, f64) = (12.0, 50.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalKind {
    Eeg,
    Eog,
    Emg,
}

impl SignalKind {
    /// Upper edge of the total-power range used to normalise band power.
    pub fn total_power_hi(self) -> f64 {
        match self {
            SignalKind::Eeg | SignalKind::Eog => 35.0,
            SignalKind::Emg => 50.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureKind {
    BandPower,
    Spindle,
    SlowWave,
    Amplitude,
    Moment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistic {
    Mean,
    Variance,
    Kurtosis,
    Skew,
    P2p,
    P95,
    Rms,
}

impl Statistic {
    pub fn as_str(self) -> &'static str {
        match self {
            Statistic::Mean => "mean",
            Statistic::Variance => "variance",
            Statistic::Kurtosis => "kurtosis",
            Statistic::Skew => "skew",
            Statistic::P2p => "p2p",
            Statistic::P95 => "p95",
            Statistic::Rms => "rms",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelRef {
    Single(String),
    Pair(String, String),
}

impl ChannelRef {
    pub fn display(&self) -> String {
        match self {
            ChannelRef::Single(c) => c.clone(),
            ChannelRef::Pair(a, b) => format!("{a} & {b}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDescriptor {
    pub name: String,
    pub kind: FeatureKind,
    pub channels: ChannelRef,
    pub band: Option<(f64, f64)>,
    pub statistic: Option<Statistic>,
}

impl FeatureDescriptor {
    fn band(channel: &str, label: &str, band: (f64, f64)) -> Self {
        FeatureDescriptor {
            name: format!("{channel} {label} power"),
            kind: FeatureKind::BandPower,
            channels: ChannelRef::Single(channel.to_string()),
            band: Some(band),
            statistic: None,
        }
    }

    fn stat(channel: &str, kind: FeatureKind, statistic: Statistic) -> Self {
        FeatureDescriptor {
            name: format!("{channel} {}", statistic.as_str()),
            kind,
            channels: ChannelRef::Single(channel.to_string()),
            band: None,
            statistic: Some(statistic),
        }
    }

    fn pair(a: &str, b: &str, kind: FeatureKind) -> Self {
        let what = if kind == FeatureKind::Spindle { "spindle" } else { "slow wave" };
        FeatureDescriptor {
            name: format!("{a} & {b} {what}"),
            kind,
            channels: ChannelRef::Pair(a.to_string(), b.to_string()),
            band: None,
            statistic: None,
        }
    }
}

/// Which channels feed which part of the catalog.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ChannelMap {
    #[serde(default)]
    pub eeg: Vec<String>,
    #[serde(default)]
    pub eog: Vec<String>,
    #[serde(default)]
    pub emg: Vec<String>,
    #[serde(default)]
    pub pairs: Vec<(String, String)>,
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

impl ChannelMap {
    pub fn isruc() -> Self {
        ChannelMap {
            eeg: strings(&["F3-A2", "C3-A2", "O1-A2", "F4-A1", "C4-A1", "O2-A1"]),
            eog: strings(&["LOC-A2", "ROC-A1"]),
            emg: strings(&["X1"]),
            pairs: vec![
                ("C3-A2".into(), "C4-A1".into()),
                ("F3-A2".into(), "F4-A1".into()),
                ("O1-A2".into(), "O2-A1".into()),
            ],
        }
    }

    /// The two EEG derivations are treated as the pair for event features.
    pub fn edfx() -> Self {
        ChannelMap {
            eeg: strings(&["EEG Fpz-Cz", "EEG Pz-Oz"]),
            eog: strings(&["EOG horizontal"]),
            emg: strings(&["EMG submental"]),
            pairs: vec![("EEG Fpz-Cz".into(), "EEG Pz-Oz".into())],
        }
    }

    /// Layout written by the synthetic generator.
    pub fn synthetic() -> Self {
        ChannelMap {
            eeg: strings(&["C3-A2", "C4-A1"]),
            eog: strings(&["E1-M2"]),
            emg: strings(&["EMG"]),
            pairs: vec![("C3-A2".into(), "C4-A1".into())],
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "isruc" => Some(Self::isruc()),
            "edfx" => Some(Self::edfx()),
            "synthetic" => Some(Self::synthetic()),
            _ => None,
        }
    }

    /// Every referenced channel, each once, in first-reference order.
    pub fn channels(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let all = self
            .eeg
            .iter()
            .chain(&self.eog)
            .chain(&self.emg)
            .chain(self.pairs.iter().flat_map(|(a, b)| [a, b]));
        for c in all {
            if !out.contains(c) {
                out.push(c.clone());
            }
        }
        out
    }

    /// Deterministic descriptor enumeration; its order is the column order.
    pub fn catalog(&self) -> Vec<FeatureDescriptor> {
        use FeatureKind::{Amplitude, Moment};
        let moments = [Statistic::Mean, Statistic::Variance, Statistic::Skew, Statistic::Kurtosis];
        let amplitude = [Statistic::P2p, Statistic::P95, Statistic::Rms];
        let mut out = Vec::new();
        for c in &self.eeg {
            for (label, band) in [("delta", DELTA_HZ), ("theta", THETA_HZ), ("alpha", ALPHA_HZ), ("beta", BETA_HZ)] {
                out.push(FeatureDescriptor::band(c, label, band));
            }
            out.extend(moments.iter().map(|&s| FeatureDescriptor::stat(c, Moment, s)));
            out.extend(amplitude.iter().map(|&s| FeatureDescriptor::stat(c, Amplitude, s)));
        }
        for c in &self.eog {
            out.push(FeatureDescriptor::band(c, "delta", DELTA_HZ));
            out.push(FeatureDescriptor::band(c, "theta", THETA_HZ));
            out.extend(moments.iter().map(|&s| FeatureDescriptor::stat(c, Moment, s)));
            out.extend(amplitude.iter().map(|&s| FeatureDescriptor::stat(c, Amplitude, s)));
        }
        for c in &self.emg {
            out.push(FeatureDescriptor::band(c, "high", EMG_HZ));
            out.extend(amplitude.iter().map(|&s| FeatureDescriptor::stat(c, Amplitude, s)));
            out.extend(moments.iter().map(|&s| FeatureDescriptor::stat(c, Moment, s)));
        }
        for (a, b) in &self.pairs {
            out.push(FeatureDescriptor::pair(a, b, FeatureKind::Spindle));
            out.push(FeatureDescriptor::pair(a, b, FeatureKind::SlowWave));
        }
        out
    }

    fn kind_of(&self, channel: &str) -> SignalKind {
        if self.emg.iter().any(|c| c == channel) {
            SignalKind::Emg
        } else if self.eog.iter().any(|c| c == channel) {
            SignalKind::Eog
        } else {
            SignalKind::Eeg
        }
    }
}

/// N×M′ feature values with their descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: Array2<f64>,
    descriptors: Vec<FeatureDescriptor>,
}

impl FeatureMatrix {
    pub fn new(values: Array2<f64>, descriptors: Vec<FeatureDescriptor>) -> Result<Self, FeatureError> {
        if values.ncols() != descriptors.len() {
            return Err(FeatureError::Malformed(format!(
                "{} columns but {} descriptors",
                values.ncols(),
                descriptors.len()
            )));
        }
        if let Some(((epoch, col), _)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(FeatureError::NonFinite { name: descriptors[col].name.clone(), epoch });
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(d) = descriptors.iter().find(|d| !seen.insert(d.name.as_str())) {
            return Err(FeatureError::Malformed(format!("duplicate feature name {:?}", d.name)));
        }
        Ok(FeatureMatrix { values, descriptors })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn descriptors(&self) -> &[FeatureDescriptor] {
        &self.descriptors
    }

    pub fn num_epochs(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_features(&self) -> usize {
        self.values.ncols()
    }

    /// Columns `indices`, in that order.
    pub fn select_columns(&self, indices: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            values: self.values.select(ndarray::Axis(1), indices),
            descriptors: indices.iter().map(|&i| self.descriptors[i].clone()).collect(),
        }
    }

    pub fn select_rows(&self, indices: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            values: self.values.select(ndarray::Axis(0), indices),
            descriptors: self.descriptors.clone(),
        }
    }

    /// Stack row blocks that share one descriptor list.
    pub fn vstack(parts: &[&FeatureMatrix]) -> Result<FeatureMatrix, FeatureError> {
        let Some(first) = parts.first() else {
            return Err(FeatureError::Malformed("nothing to stack".into()));
        };
        if parts.iter().any(|p| p.descriptors != first.descriptors) {
            return Err(FeatureError::Malformed("descriptor lists differ".into()));
        }
        let views: Vec<_> = parts.iter().map(|p| p.values.view()).collect();
        let values = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| FeatureError::Malformed(e.to_string()))?;
        Ok(FeatureMatrix { values, descriptors: first.descriptors.clone() })
    }

    /// CSV with a header row of descriptor names.
    pub fn to_csv(&self) -> String {
        let mut out = self.descriptors.iter().map(|d| csv_field(&d.name)).collect::<Vec<_>>().join(",");
        out.push('\n');
        for row in self.values.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    /// Descriptor sidecar (JSON) for [`FeatureMatrix::to_csv`].
    pub fn descriptors_json(&self) -> String {
        serde_json::to_string_pretty(&self.descriptors).expect("descriptors serialise")
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Per-channel quantities computed once per epoch and shared by the columns.
struct ChannelCache {
    spectrum: Option<Spectrum>,
    kind: SignalKind,
    moments: (f64, f64, f64, f64),
    amplitude: (f64, f64, f64),
    spindle: Option<f64>,
    slow_wave: Option<f64>,
}

fn column_value(d: &FeatureDescriptor, cache: &HashMap<&str, ChannelCache>) -> Result<f64, FeatureError> {
    let single = |c: &ChannelRef| match c {
        ChannelRef::Single(c) => &cache[c.as_str()],
        ChannelRef::Pair(a, _) => &cache[a.as_str()],
    };
    Ok(match d.kind {
        FeatureKind::BandPower => {
            let ch = single(&d.channels);
            let spectrum = ch.spectrum.as_ref().expect("spectrum computed for band-power channels");
            spectrum.relative_power(d.band.expect("band-power descriptors carry a band"), ch.kind.total_power_hi())?
        }
        FeatureKind::Moment | FeatureKind::Amplitude => {
            let ch = single(&d.channels);
            let (mean, var, skew, kurt) = ch.moments;
            let (p2p, p95, rms) = ch.amplitude;
            match d.statistic.expect("statistic descriptors carry a statistic") {
                Statistic::Mean => mean,
                Statistic::Variance => var,
                Statistic::Skew => skew,
                Statistic::Kurtosis => kurt,
                Statistic::P2p => p2p,
                Statistic::P95 => p95,
                Statistic::Rms => rms,
            }
        }
        FeatureKind::Spindle | FeatureKind::SlowWave => {
            let ChannelRef::Pair(a, b) = &d.channels else {
                return Err(FeatureError::Malformed(format!("{} needs a channel pair", d.name)));
            };
            let pick = |c: &ChannelCache| if d.kind == FeatureKind::Spindle { c.spindle } else { c.slow_wave };
            let va = pick(&cache[a.as_str()]).expect("event features computed for paired channels");
            let vb = pick(&cache[b.as_str()]).expect("event features computed for paired channels");
            0.5 * (va + vb)
        }
    })
}

/// Compute the catalog of `channel_map` on every epoch.
pub fn extract_features(epochs: &EpochSet, channel_map: &ChannelMap) -> Result<FeatureMatrix, FeatureError> {
    let descriptors = channel_map.catalog();
    let channels = channel_map.channels();
    let mut index = Vec::with_capacity(channels.len());
    for c in &channels {
        let i = epochs.channel_index(c).ok_or_else(|| FeatureError::UnknownChannel(c.clone()))?;
        index.push(i);
    }
    let spectral: std::collections::HashSet<&str> = descriptors
        .iter()
        .filter(|d| d.kind == FeatureKind::BandPower)
        .filter_map(|d| match &d.channels {
            ChannelRef::Single(c) => Some(c.as_str()),
            ChannelRef::Pair(..) => None,
        })
        .collect();
    let paired: std::collections::HashSet<&str> =
        channel_map.pairs.iter().flat_map(|(a, b)| [a.as_str(), b.as_str()]).collect();
    let rate = epochs.rate();

    let rows: Result<Vec<Vec<f64>>, FeatureError> = (0..epochs.len())
        .into_par_iter()
        .map(|n| {
            let mut cache = HashMap::with_capacity(channels.len());
            for (name, &c) in channels.iter().zip(&index) {
                let x = epochs.channel_f64(n, c);
                let entry = ChannelCache {
                    spectrum: spectral.contains(name.as_str()).then(|| Spectrum::multitaper(&x, rate)),
                    kind: channel_map.kind_of(name),
                    moments: moments(&x),
                    amplitude: amplitude_stats(&x, rate),
                    spindle: paired.contains(name.as_str()).then(|| detect_spindles(&x, rate)),
                    slow_wave: paired.contains(name.as_str()).then(|| detect_slow_waves(&x, rate)),
                };
                cache.insert(name.as_str(), entry);
            }
            descriptors.iter().map(|d| column_value(d, &cache)).collect()
        })
        .collect();
    let rows = rows?;
    let mut values = Array2::zeros((rows.len(), descriptors.len()));
    for (n, row) in rows.iter().enumerate() {
        for (m, v) in row.iter().enumerate() {
            values[(n, m)] = *v;
        }
    }
    FeatureMatrix::new(values, descriptors)
}
