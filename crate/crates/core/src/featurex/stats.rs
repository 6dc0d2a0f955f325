/// Window for the moving RMS in [`amplitude_stats`].
pub const RMS_WINDOW_S: f64 = 0.5;

pub(crate) fn median(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Linear-interpolated quantile at position `q * (n - 1)` of the sorted data.
pub(crate) fn quantile(x: &[f64], q: f64) -> f64 {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

fn square_prefix(x: &[f64]) -> Vec<f64> {
    let mut prefix = Vec::with_capacity(x.len() + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for v in x {
        acc += v * v;
        prefix.push(acc);
    }
    prefix
}

/// RMS over a window centred on each sample, truncated at the edges.
pub(crate) fn centered_rms(x: &[f64], window: usize) -> Vec<f64> {
    let prefix = square_prefix(x);
    let n = x.len();
    let before = window / 2;
    (0..n)
        .map(|i| {
            let a = i.saturating_sub(before);
            let b = (a + window).min(n);
            ((prefix[b] - prefix[a]).max(0.0) / (b - a) as f64).sqrt()
        })
        .collect()
}

/// RMS of every full window.
fn valid_rms(x: &[f64], window: usize) -> Vec<f64> {
    let window = window.clamp(1, x.len());
    let prefix = square_prefix(x);
    (0..=x.len() - window)
        .map(|i| ((prefix[i + window] - prefix[i]).max(0.0) / window as f64).sqrt())
        .collect()
}

/// `(p2p, p95 of |x|, median of the 0.5 s moving RMS)`.
pub fn amplitude_stats(x: &[f64], rate: f64) -> (f64, f64, f64) {
    if x.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let abs: Vec<f64> = x.iter().map(|v| v.abs()).collect();
    let window = (RMS_WINDOW_S * rate).round() as usize;
    (hi - lo, quantile(&abs, 0.95), median(&valid_rms(x, window)))
}

/// Population `(mean, variance, skew, excess kurtosis)`. Skew and kurtosis
/// are 0 for constant input.
pub fn moments(x: &[f64]) -> (f64, f64, f64, f64) {
    if x.is_empty() {
        return (0.0, 0.0, 0.0, 0.0);
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for v in x {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    let scale = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m2 <= (1e-12 * scale).powi(2) || m2 == 0.0 {
        return (mean, m2, 0.0, 0.0);
    }
    (mean, m2, m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
}
