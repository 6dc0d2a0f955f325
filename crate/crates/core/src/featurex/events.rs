use std::ops::Range;

use super::stats::{centered_rms, median};
use crate::dsp::Fir;

pub const SPINDLE_BAND_HZ: (f64, f64) = (11.0, 16.0);
pub const SPINDLE_TRANSITION_HZ: f64 = 2.0;
pub const SPINDLE_ENVELOPE_S: f64 = 0.25;
pub const SPINDLE_THRESHOLD_FACTOR: f64 = 3.0;
pub const SPINDLE_MIN_S: f64 = 0.5;
pub const SPINDLE_MAX_S: f64 = 3.0;
/// Thresholds at or below this level (µV) mean there is no oscillatory
/// activity to detect.
pub const SPINDLE_FLOOR_UV: f64 = 1e-6;

pub const SLOW_WAVE_BAND_HZ: (f64, f64) = (0.5, 2.0);
pub const SLOW_WAVE_TRANSITION_HZ: f64 = 0.5;
pub const SLOW_WAVE_P2P_UV: f64 = 75.0;

fn demeaned(x: &[f64]) -> Vec<f64> {
    let mean = x.iter().sum::<f64>() / x.len().max(1) as f64;
    x.iter().map(|v| v - mean).collect()
}

fn band_filter(band: (f64, f64), transition: f64, rate: f64) -> Fir {
    Fir::bandpass(band.0, band.1, rate, Fir::taps_for_transition(rate, transition))
}

/// Sample ranges of detected spindles.
pub fn spindle_events(x: &[f64], rate: f64) -> Vec<Range<usize>> {
    if x.is_empty() {
        return Vec::new();
    }
    let filtered = band_filter(SPINDLE_BAND_HZ, SPINDLE_TRANSITION_HZ, rate).apply(&demeaned(x));
    let window = ((SPINDLE_ENVELOPE_S * rate).round() as usize).max(1);
    let envelope = centered_rms(&filtered, window);
    let threshold = SPINDLE_THRESHOLD_FACTOR * median(&envelope);
    if threshold <= SPINDLE_FLOOR_UV {
        return Vec::new();
    }
    let min_len = SPINDLE_MIN_S * rate;
    let max_len = SPINDLE_MAX_S * rate;
    let mut events = Vec::new();
    let mut start = None;
    for i in 0..=envelope.len() {
        let above = i < envelope.len() && envelope[i] > threshold;
        match (above, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                let len = (i - s) as f64;
                if len >= min_len && len <= max_len {
                    events.push(s..i);
                }
                start = None;
            }
            _ => {}
        }
    }
    events
}

/// Fraction of samples inside detected spindles.
pub fn detect_spindles(x: &[f64], rate: f64) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let covered: usize = spindle_events(x, rate).iter().map(|r| r.len()).sum();
    covered as f64 / x.len() as f64
}

/// Fraction of samples in slow-wave half-waves. A half-wave qualifies when
/// its extremum and the larger opposite extremum next to it span more than
/// 75 µV.
pub fn detect_slow_waves(x: &[f64], rate: f64) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let y = band_filter(SLOW_WAVE_BAND_HZ, SLOW_WAVE_TRANSITION_HZ, rate).apply(&demeaned(x));
    // split at sign changes; each segment is one half-wave
    let mut segments: Vec<(usize, f64)> = Vec::new();
    let mut seg_start = 0;
    let mut peak = 0.0f64;
    for i in 0..y.len() {
        if i > seg_start && (y[i] >= 0.0) != (y[i - 1] >= 0.0) {
            segments.push((i - seg_start, peak));
            seg_start = i;
            peak = 0.0;
        }
        peak = peak.max(y[i].abs());
    }
    segments.push((y.len() - seg_start, peak));

    let mut covered = 0usize;
    for (k, &(len, peak)) in segments.iter().enumerate() {
        let prev = if k > 0 { segments[k - 1].1 } else { 0.0 };
        let next = segments.get(k + 1).map_or(0.0, |s| s.1);
        if peak + prev.max(next) > SLOW_WAVE_P2P_UV {
            covered += len;
        }
    }
    covered as f64 / y.len() as f64
}
