use super::{FeatureError, SignalKind};
use crate::dsp;

/// Time-bandwidth product of the DPSS tapers.
pub const TIME_BANDWIDTH: f64 = 4.0;
/// Number of tapers averaged.
pub const NUM_TAPERS: usize = 7;
/// Lower edge of the total-power range.
pub const TOTAL_POWER_LO_HZ: f64 = 0.5;

/// Multitaper power spectrum of one epoch channel.
#[derive(Debug, Clone)]
pub struct Spectrum {
    power: Vec<f64>,
    bin_hz: f64,
    nyquist: f64,
}

impl Spectrum {
    pub fn multitaper(x: &[f64], rate: f64) -> Self {
        Spectrum {
            power: dsp::multitaper_psd(x, TIME_BANDWIDTH, NUM_TAPERS),
            bin_hz: rate / x.len() as f64,
            nyquist: rate / 2.0,
        }
    }

    pub fn power(&self) -> &[f64] {
        &self.power
    }

    fn sum_range(&self, lo: f64, hi: f64) -> f64 {
        self.power
            .iter()
            .enumerate()
            .filter(|(i, _)| {
                let f = *i as f64 * self.bin_hz;
                f >= lo && (f < hi || (hi >= self.nyquist && f <= hi))
            })
            .map(|(_, p)| p)
            .sum()
    }

    /// Power in `band` relative to the total in `(0.5 Hz, total_hi)`, with the
    /// band clipped to the total range. All-zero spectra give 0.
    pub fn relative_power(&self, band: (f64, f64), total_hi: f64) -> Result<f64, FeatureError> {
        let (lo, hi) = band;
        if !(lo >= 0.0 && lo < hi && hi <= self.nyquist) {
            return Err(FeatureError::BandOutOfRange { lo, hi, nyquist: self.nyquist });
        }
        let total_hi = total_hi.min(self.nyquist);
        let total = self.sum_range(TOTAL_POWER_LO_HZ, total_hi);
        if total <= 0.0 {
            return Ok(0.0);
        }
        let band = self.sum_range(lo.max(TOTAL_POWER_LO_HZ), hi.min(total_hi));
        Ok((band / total).clamp(0.0, 1.0))
    }
}

/// Multitaper relative band power for an EEG-like channel.
pub fn multitaper_band_power(x: &[f64], rate: f64, band: (f64, f64)) -> Result<f64, FeatureError> {
    multitaper_band_power_for(x, rate, band, SignalKind::Eeg)
}

/// As [`multitaper_band_power`], with the total-power ceiling chosen by
/// signal kind (35 Hz for EEG/EOG, 50 Hz for EMG).
pub fn multitaper_band_power_for(
    x: &[f64],
    rate: f64,
    band: (f64, f64),
    kind: SignalKind,
) -> Result<f64, FeatureError> {
    Spectrum::multitaper(x, rate).relative_power(band, kind.total_power_hi())
}
