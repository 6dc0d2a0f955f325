//! Shared signal-processing kernels: cached real FFT plans, windowed-sinc FIR
//! design and application, and discrete prolate spheroidal (Slepian) tapers.
//!
//! The same FIR designs back resampling, synthetic band-limited noise and the
//! spindle / slow-wave detectors, so one set of tests covers all three.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use realfft::num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

fn planner() -> &'static Mutex<RealFftPlanner<f64>> {
    static PLANNER: OnceLock<Mutex<RealFftPlanner<f64>>> = OnceLock::new();
    PLANNER.get_or_init(|| Mutex::new(RealFftPlanner::new()))
}

pub fn forward_plan(n: usize) -> Arc<dyn RealToComplex<f64>> {
    planner().lock().expect("fft planner poisoned").plan_fft_forward(n)
}

pub fn inverse_plan(n: usize) -> Arc<dyn ComplexToReal<f64>> {
    planner().lock().expect("fft planner poisoned").plan_fft_inverse(n)
}

/// Smallest even `m >= n` of the form 2^a 3^b 5^c (the real transform halves
/// only even lengths).
pub fn next_fast_len(n: usize) -> usize {
    let mut m = n.max(2);
    loop {
        let mut r = m;
        for p in [2, 3, 5] {
            while r % p == 0 {
                r /= p;
            }
        }
        if r == 1 && m % 2 == 0 {
            return m;
        }
        m += 1;
    }
}

/// Real-input spectrum of `x` zero-padded to `nfft` (length `nfft / 2 + 1`).
pub fn rfft_padded(x: &[f64], nfft: usize) -> Vec<Complex64> {
    let plan = forward_plan(nfft);
    let mut input = vec![0.0; nfft];
    input[..x.len()].copy_from_slice(x);
    let mut out = plan.make_output_vec();
    plan.process(&mut input, &mut out).expect("rfft length mismatch");
    out
}

/// Inverse of [`rfft_padded`], including the `1 / nfft` normalisation.
pub fn irfft(spectrum: &[Complex64], nfft: usize) -> Vec<f64> {
    let plan = inverse_plan(nfft);
    let mut spec = spectrum.to_vec();
    // The C2R transform rejects non-zero imaginary parts at DC / Nyquist.
    spec[0].im = 0.0;
    if nfft % 2 == 0 {
        let last = spec.len() - 1;
        spec[last].im = 0.0;
    }
    let mut out = plan.make_output_vec();
    plan.process(&mut spec, &mut out).expect("irfft length mismatch");
    let scale = 1.0 / nfft as f64;
    out.iter_mut().for_each(|v| *v *= scale);
    out
}

/// Full linear convolution `a * b` (length `a.len() + b.len() - 1`).
pub fn convolve_full(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let n = a.len() + b.len() - 1;
    if a.len().min(b.len()) <= 64 {
        let mut out = vec![0.0; n];
        for (i, &av) in a.iter().enumerate() {
            for (j, &bv) in b.iter().enumerate() {
                out[i + j] += av * bv;
            }
        }
        return out;
    }
    let nfft = next_fast_len(n);
    let fa = rfft_padded(a, nfft);
    let fb = rfft_padded(b, nfft);
    let prod: Vec<Complex64> = fa.iter().zip(&fb).map(|(x, y)| x * y).collect();
    let mut out = irfft(&prod, nfft);
    out.truncate(n);
    out
}

/// Mirror index into `0..len` without repeating the edge sample (numpy "reflect").
fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

/// Linear-phase FIR filter with an odd number of symmetric taps.
#[derive(Debug, Clone, PartialEq)]
pub struct Fir {
    taps: Vec<f64>,
}

impl Fir {
    pub fn from_taps(taps: Vec<f64>) -> Self {
        assert!(taps.len() % 2 == 1, "linear-phase FIR needs an odd tap count");
        Fir { taps }
    }

    /// Hamming-window tap count for a given transition width.
    pub fn taps_for_transition(rate: f64, transition_hz: f64) -> usize {
        let n = (3.3 * rate / transition_hz).ceil() as usize;
        n | 1
    }

    /// Windowed-sinc low-pass with unit DC gain. A cutoff at or above Nyquist
    /// yields the identity filter.
    pub fn lowpass(cutoff_hz: f64, rate: f64, num_taps: usize) -> Self {
        let num_taps = num_taps | 1;
        let m = (num_taps - 1) / 2;
        if cutoff_hz >= rate / 2.0 {
            let mut taps = vec![0.0; num_taps];
            taps[m] = 1.0;
            return Fir { taps };
        }
        let fc = cutoff_hz / rate;
        let mut taps: Vec<f64> = (0..num_taps)
            .map(|i| {
                let k = i as f64 - m as f64;
                let sinc = if k == 0.0 {
                    2.0 * fc
                } else {
                    (2.0 * PI * fc * k).sin() / (PI * k)
                };
                let w = if num_taps == 1 {
                    1.0
                } else {
                    0.54 - 0.46 * (2.0 * PI * i as f64 / (num_taps - 1) as f64).cos()
                };
                sinc * w
            })
            .collect();
        let sum: f64 = taps.iter().sum();
        taps.iter_mut().for_each(|t| *t /= sum);
        Fir { taps }
    }

    /// Band-pass as the difference of two unit-DC low-passes, so the DC gain
    /// is zero up to rounding.
    pub fn bandpass(lo_hz: f64, hi_hz: f64, rate: f64, num_taps: usize) -> Self {
        let hi = Self::lowpass(hi_hz, rate, num_taps);
        let lo = Self::lowpass(lo_hz, rate, num_taps);
        Fir {
            taps: hi.taps.iter().zip(&lo.taps).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn half_len(&self) -> usize {
        (self.taps.len() - 1) / 2
    }

    /// Sum of squared taps: the output variance for unit white-noise input.
    pub fn noise_gain(&self) -> f64 {
        self.taps.iter().map(|t| t * t).sum()
    }

    /// Magnitude response at `freq_hz`.
    pub fn gain_at(&self, freq_hz: f64, rate: f64) -> f64 {
        let m = self.half_len() as f64;
        let w = 2.0 * PI * freq_hz / rate;
        let (re, im) = self
            .taps
            .iter()
            .enumerate()
            .fold((0.0, 0.0), |(re, im), (i, &t)| {
                let ph = w * (i as f64 - m);
                (re + t * ph.cos(), im - t * ph.sin())
            });
        (re * re + im * im).sqrt()
    }

    /// Zero-phase filtering with output aligned to the input. Edges are
    /// extended by mirror reflection.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        if x.is_empty() {
            return Vec::new();
        }
        let m = self.half_len();
        let len = x.len();
        let padded: Vec<f64> = (0..len + 2 * m)
            .map(|j| x[reflect_index(j as isize - m as isize, len)])
            .collect();
        let full = convolve_full(&padded, &self.taps);
        full[2 * m..2 * m + len].to_vec()
    }

    /// "Valid" filtering: output has `x.len() - (len - 1)` samples, each using
    /// only real input.
    pub fn apply_valid(&self, x: &[f64]) -> Vec<f64> {
        let n = self.taps.len();
        if x.len() < n {
            return Vec::new();
        }
        let full = convolve_full(x, &self.taps);
        full[n - 1..x.len()].to_vec()
    }
}

/// Symmetric tridiagonal solve `(T - shift I) y = b` with partial pivoting.
fn tridiagonal_shifted_solve(diag: &[f64], off: &[f64], shift: f64, b: &[f64]) -> Vec<f64> {
    // Gaussian elimination with row interchanges (LAPACK dgtsv). `off[i]`
    // couples rows i and i+1.
    let n = diag.len();
    let mut d: Vec<f64> = diag.iter().map(|v| v - shift).collect();
    let mut dl: Vec<f64> = off.to_vec();
    let mut du: Vec<f64> = off.to_vec();
    let mut du2 = vec![0.0; n.saturating_sub(2)];
    let mut rhs = b.to_vec();
    let tiny = f64::EPSILON * diag.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    for i in 0..n.saturating_sub(1) {
        if d[i].abs() >= dl[i].abs() {
            if d[i] == 0.0 {
                d[i] = tiny;
            }
            let fact = dl[i] / d[i];
            d[i + 1] -= fact * du[i];
            rhs[i + 1] -= fact * rhs[i];
            dl[i] = 0.0;
        } else {
            let fact = d[i] / dl[i];
            d[i] = dl[i];
            let tmp = d[i + 1];
            d[i + 1] = du[i] - fact * tmp;
            if i + 1 < n - 1 {
                du2[i] = du[i + 1];
                du[i + 1] = -fact * du[i + 1];
            }
            du[i] = tmp;
            rhs.swap(i, i + 1);
            rhs[i + 1] -= fact * rhs[i];
        }
    }
    if d[n - 1] == 0.0 {
        d[n - 1] = tiny;
    }
    let mut y = vec![0.0; n];
    y[n - 1] = rhs[n - 1] / d[n - 1];
    if n > 1 {
        y[n - 2] = (rhs[n - 2] - du[n - 2] * y[n - 1]) / d[n - 2];
    }
    for i in (0..n.saturating_sub(2)).rev() {
        y[i] = (rhs[i] - du[i] * y[i + 1] - du2[i] * y[i + 2]) / d[i];
    }
    y
}

/// Number of eigenvalues of the symmetric tridiagonal matrix below `x`.
fn sturm_count(diag: &[f64], off: &[f64], x: f64) -> usize {
    let mut count = 0;
    let mut q = diag[0] - x;
    if q < 0.0 {
        count += 1;
    }
    for i in 1..diag.len() {
        let denom = if q == 0.0 { f64::EPSILON * (off[i - 1].abs() + 1.0) } else { q };
        q = diag[i] - x - off[i - 1] * off[i - 1] / denom;
        if q < 0.0 {
            count += 1;
        }
    }
    count
}

fn compute_dpss(n: usize, nw: f64, k: usize) -> Vec<Vec<f64>> {
    if n == 1 {
        return vec![vec![1.0]];
    }
    let w = nw / n as f64;
    let cos_w = (2.0 * PI * w).cos();
    let diag: Vec<f64> = (0..n)
        .map(|i| {
            let t = (n as f64 - 1.0 - 2.0 * i as f64) / 2.0;
            t * t * cos_w
        })
        .collect();
    let off: Vec<f64> = (1..n).map(|i| (i * (n - i)) as f64 / 2.0).collect();

    let mut lo_bound = f64::INFINITY;
    let mut hi_bound = f64::NEG_INFINITY;
    for i in 0..n {
        let r = if i > 0 { off[i - 1].abs() } else { 0.0 } + if i + 1 < n { off[i].abs() } else { 0.0 };
        lo_bound = lo_bound.min(diag[i] - r);
        hi_bound = hi_bound.max(diag[i] + r);
    }

    let mut tapers: Vec<Vec<f64>> = Vec::with_capacity(k);
    for j in 0..k.min(n) {
        // j-th largest eigenvalue has ascending index n-1-j.
        let idx = n - 1 - j;
        let (mut lo, mut hi) = (lo_bound, hi_bound);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if sturm_count(&diag, &off, mid) > idx {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let lambda = 0.5 * (lo + hi);

        let mut v: Vec<f64> = (0..n)
            .map(|i| 1.0 + 0.1 * ((i as f64 * 0.7 + j as f64).sin()))
            .collect();
        for _ in 0..4 {
            v = tridiagonal_shifted_solve(&diag, &off, lambda, &v);
            for prev in &tapers {
                let dot: f64 = prev.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(prev).for_each(|(x, p)| *x -= dot * p);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
        }

        // Sign convention: even tapers have positive sum, odd tapers a
        // positive first significant lobe.
        if j % 2 == 0 {
            if v.iter().sum::<f64>() < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
        } else {
            let thresh = (1.0 / n as f64).max(1e-7);
            if let Some(first) = v.iter().find(|x| x.abs() > thresh) {
                if *first < 0.0 {
                    v.iter_mut().for_each(|x| *x = -*x);
                }
            }
        }
        tapers.push(v);
    }
    tapers
}

type TaperKey = (usize, u64, usize);

/// Unit-norm DPSS tapers of length `n`, time-bandwidth `nw`, first `k` orders.
/// Results are cached per `(n, nw, k)`.
pub fn dpss(n: usize, nw: f64, k: usize) -> Arc<Vec<Vec<f64>>> {
    static CACHE: OnceLock<Mutex<HashMap<TaperKey, Arc<Vec<Vec<f64>>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let key = (n, nw.to_bits(), k);
    if let Some(t) = cache.lock().expect("taper cache poisoned").get(&key) {
        return Arc::clone(t);
    }
    let tapers = Arc::new(compute_dpss(n, nw, k));
    cache
        .lock()
        .expect("taper cache poisoned")
        .entry(key)
        .or_insert_with(|| Arc::clone(&tapers))
        .clone()
}

/// Multitaper power spectrum: the mean over `k` DPSS tapers of the squared
/// magnitude of the tapered, mean-removed signal. Bin `i` sits at
/// `i * rate / x.len()` Hz.
pub fn multitaper_psd(x: &[f64], nw: f64, k: usize) -> Vec<f64> {
    let n = x.len();
    let tapers = dpss(n, nw, k);
    let mean = x.iter().sum::<f64>() / n as f64;
    let plan = forward_plan(n);
    let mut psd = vec![0.0; n / 2 + 1];
    let mut buf = vec![0.0; n];
    let mut spec = plan.make_output_vec();
    for taper in tapers.iter() {
        for ((b, &xv), &t) in buf.iter_mut().zip(x).zip(taper.iter()) {
            *b = (xv - mean) * t;
        }
        plan.process(&mut buf, &mut spec).expect("rfft length mismatch");
        for (p, c) in psd.iter_mut().zip(&spec) {
            *p += c.norm_sqr();
        }
    }
    let kf = tapers.len() as f64;
    psd.iter_mut().for_each(|p| *p /= kf);
    psd
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_len() {
        assert_eq!(next_fast_len(3100), 3200);
        assert_eq!(next_fast_len(7), 8);
        assert_eq!(next_fast_len(3000), 3000);
    }

    #[test]
    fn fft_convolution_matches_direct() {
        let a: Vec<f64> = (0..300).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let b: Vec<f64> = (0..101).map(|i| (i as f64 * 0.1).sin()).collect();
        let fast = convolve_full(&a, &b);
        let mut slow = vec![0.0; a.len() + b.len() - 1];
        for (i, av) in a.iter().enumerate() {
            for (j, bv) in b.iter().enumerate() {
                slow[i + j] += av * bv;
            }
        }
        for (f, s) in fast.iter().zip(&slow) {
            assert!((f - s).abs() < 1e-9, "{f} vs {s}");
        }
    }

    #[test]
    fn bandpass_has_zero_dc_and_unit_passband() {
        let rate = 100.0;
        let f = Fir::bandpass(11.0, 16.0, rate, Fir::taps_for_transition(rate, 2.0));
        assert!(f.taps().iter().sum::<f64>().abs() < 1e-12);
        assert!((f.gain_at(13.5, rate) - 1.0).abs() < 0.01);
        // at least 40 dB down at 2 Hz
        assert!(f.gain_at(2.0, rate) < 0.01);
    }

    #[test]
    fn apply_preserves_constant_through_lowpass() {
        let f = Fir::lowpass(10.0, 100.0, 101);
        let y = f.apply(&[3.0; 500]);
        assert!(y.iter().all(|v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn dpss_matches_reference_values() {
        // Reference: scipy.signal.windows.dpss(64, 4, 7), unit 2-norm.
        let t = dpss(64, 4.0, 7);
        let expected0 = [3.10636830e-05, 9.97739769e-05, 2.39214056e-04, 4.91575907e-04];
        let expected1 = [0.00024711, 0.00070009, 0.00152895, 0.00290028];
        let expected6 = [0.14469863, 0.18244331, 0.21191136, 0.22940089];
        for (got, want, tol) in [
            (&t[0], &expected0[..], 1e-12f64),
            (&t[1], &expected1[..], 1e-8),
            (&t[6], &expected6[..], 1e-8),
        ] {
            for (g, w) in got.iter().zip(want) {
                assert!((g - w).abs() < tol.max(w.abs() * 1e-6), "{g} vs {w}");
            }
        }
    }

    #[test]
    fn dpss_tapers_are_orthonormal() {
        let t = dpss(3000, 4.0, 7);
        for i in 0..7 {
            for j in 0..7 {
                let d: f64 = t[i].iter().zip(&t[j]).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-9, "<{i},{j}> = {d}");
            }
        }
    }
}
