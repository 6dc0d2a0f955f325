use super::{Channel, PsgError, Recording, Result};
use crate::dsp::Fir;

/// Raised when downsampling without the anti-alias low-pass.
#[derive(Debug, Clone, PartialEq)]
pub struct NyquistWarning {
    pub from_rate: f64,
    pub to_rate: f64,
}

/// Resample with the anti-alias filter enabled.
pub fn resample(samples: &[f64], from_rate: f64, to_rate: f64) -> Result<Vec<f64>> {
    resample_with(samples, from_rate, to_rate, true).map(|(s, _)| s)
}

/// Windowed-sinc low-pass (when downsampling and `anti_alias` is set)
/// followed by linear interpolation onto the new grid. Output length is
/// `round(len * to / from)`.
pub fn resample_with(
    samples: &[f64],
    from_rate: f64,
    to_rate: f64,
    anti_alias: bool,
) -> Result<(Vec<f64>, Option<NyquistWarning>)> {
    if !(from_rate > 0.0 && to_rate > 0.0 && from_rate.is_finite() && to_rate.is_finite()) {
        return Err(PsgError::InvalidRate(format!("cannot resample {from_rate} Hz -> {to_rate} Hz")));
    }
    if from_rate == to_rate || samples.is_empty() {
        return Ok((samples.to_vec(), None));
    }
    let mut warning = None;
    let filtered;
    let source: &[f64] = if to_rate < from_rate {
        if anti_alias {
            let cutoff = 0.45 * to_rate;
            let taps = Fir::taps_for_transition(from_rate, 0.1 * to_rate);
            filtered = Fir::lowpass(cutoff, from_rate, taps).apply(samples);
            &filtered
        } else {
            warning = Some(NyquistWarning { from_rate, to_rate });
            samples
        }
    } else {
        samples
    };

    let out_len = (samples.len() as f64 * to_rate / from_rate).round() as usize;
    let step = from_rate / to_rate;
    let last = source.len() - 1;
    let out = (0..out_len)
        .map(|i| {
            let x = i as f64 * step;
            let idx = x.floor() as usize;
            if idx >= last {
                return source[last];
            }
            let frac = x - idx as f64;
            let a = source[idx];
            let b = source[idx + 1];
            if frac == 0.0 {
                a
            } else {
                a + (b - a) * frac
            }
        })
        .collect();
    Ok((out, warning))
}

/// Resample every channel to `to_rate`. Returns the labels of channels that
/// were downsampled without anti-aliasing.
pub fn resample_recording(recording: &Recording, to_rate: f64, anti_alias: bool) -> Result<(Recording, Vec<String>)> {
    let mut warned = Vec::new();
    let mut channels = Vec::with_capacity(recording.channels.len());
    for ch in &recording.channels {
        let (samples, warning) = resample_with(&ch.samples, ch.sampling_rate, to_rate, anti_alias)?;
        if warning.is_some() {
            warned.push(ch.label.clone());
        }
        let (lo, hi) = ch.physical_range;
        let peak = samples.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let range = if peak > hi.max(-lo) { (-peak, peak) } else { (lo, hi) };
        channels.push(Channel {
            label: ch.label.clone(),
            sampling_rate: to_rate,
            physical_unit: ch.physical_unit.clone(),
            physical_range: range,
            samples,
        });
    }
    if !warned.is_empty() {
        log::warn!("downsampled without anti-alias filter: {}", warned.join(", "));
    }
    Ok((Recording::new(recording.id.clone(), channels)?, warned))
}
