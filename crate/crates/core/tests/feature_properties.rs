use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use serf_core::featurex::{
    amplitude_stats, detect_slow_waves, detect_spindles, extract_features, moments, multitaper_band_power,
    ChannelMap, FeatureKind, Statistic,
};
use serf_core::psg_io::EpochSet;
use serf_core::synthgen::{default_channel_labels, synth_recording, RecipeSet};
use serf_core::StageLabel;

const RATE: f64 = 100.0;
const BANDS: [(f64, f64); 4] = [(0.5, 4.0), (4.0, 8.0), (8.0, 12.0), (12.0, 30.0)];

fn noisy_epoch(seed: u64, sigma: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, sigma).unwrap();
    let mut x: Vec<f64> = (0..3000).map(|_| n.sample(&mut rng)).collect();
    for (i, v) in x.iter_mut().enumerate() {
        *v += 40.0 * (2.0 * std::f64::consts::PI * 1.1 * i as f64 / RATE).sin();
    }
    x
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn offset_leaves_shape_features_unchanged(seed in 0u64..1000, offset in -500.0f64..500.0) {
        let x = noisy_epoch(seed, 10.0);
        let y: Vec<f64> = x.iter().map(|v| v + offset).collect();
        for b in BANDS {
            prop_assert!(close(multitaper_band_power(&x, RATE, b).unwrap(), multitaper_band_power(&y, RATE, b).unwrap(), 1e-9));
        }
        prop_assert!(close(detect_spindles(&x, RATE), detect_spindles(&y, RATE), 1e-12));
        prop_assert!(close(detect_slow_waves(&x, RATE), detect_slow_waves(&y, RATE), 1e-12));
        let (mx, vx, sx, kx) = moments(&x);
        let (my, vy, sy, ky) = moments(&y);
        prop_assert!(close(my, mx + offset, 1e-9));
        prop_assert!(close(vx, vy, 1e-8) && close(sx, sy, 1e-7) && close(kx, ky, 1e-7));
        let (p2p_x, _, _) = amplitude_stats(&x, RATE);
        let (p2p_y, _, _) = amplitude_stats(&y, RATE);
        prop_assert!(close(p2p_x, p2p_y, 1e-9));
    }

    #[test]
    fn scaling_is_equivariant(seed in 0u64..1000, c in 0.1f64..10.0) {
        let x = noisy_epoch(seed, 10.0);
        let y: Vec<f64> = x.iter().map(|v| v * c).collect();
        for b in BANDS {
            prop_assert!(close(multitaper_band_power(&x, RATE, b).unwrap(), multitaper_band_power(&y, RATE, b).unwrap(), 1e-9));
        }
        prop_assert!(close(detect_spindles(&x, RATE), detect_spindles(&y, RATE), 1e-12));
        let (_, vx, sx, kx) = moments(&x);
        let (_, vy, sy, ky) = moments(&y);
        prop_assert!(close(vy, c * c * vx, 1e-9) && close(sx, sy, 1e-8) && close(kx, ky, 1e-8));
        let (a, b, r) = amplitude_stats(&x, RATE);
        let (a2, b2, r2) = amplitude_stats(&y, RATE);
        prop_assert!(close(a2, c * a, 1e-9) && close(b2, c * b, 1e-9) && close(r2, c * r, 1e-9));
    }
}

fn synthetic_set(seed: u64) -> EpochSet {
    let stages = [StageLabel::Wake, StageLabel::N2, StageLabel::N3, StageLabel::Rem, StageLabel::N1];
    let (rec, _) = synth_recording(&stages, &RecipeSet::default(), &default_channel_labels(), RATE, seed).unwrap();
    EpochSet::unlabeled(&rec, 30.0, RATE).unwrap()
}

#[test]
fn values_are_bounded_and_rows_permute() {
    let set = synthetic_set(1);
    let map = ChannelMap::synthetic();
    let fm = extract_features(&set, &map).unwrap();
    assert_eq!(fm.values().dim(), (5, 41));
    for (m, d) in fm.descriptors().iter().enumerate() {
        if matches!(d.kind, FeatureKind::BandPower | FeatureKind::Spindle | FeatureKind::SlowWave) {
            assert!(fm.values().column(m).iter().all(|v| (0.0..=1.0).contains(v)), "{}", d.name);
        }
    }
    let order = [4, 2, 0, 3, 1];
    let permuted = EpochSet::concat(&order.iter().map(|&i| set.slice(i..i + 1)).collect::<Vec<_>>().iter().collect::<Vec<_>>())
        .unwrap();
    let fp = extract_features(&permuted, &map).unwrap();
    for (r, &i) in order.iter().enumerate() {
        assert_eq!(fp.values().row(r), fm.values().row(i));
    }
}

#[test]
fn stage_signatures_show_in_features() {
    let fm = extract_features(&synthetic_set(2), &ChannelMap::synthetic()).unwrap();
    let col = |name: &str| fm.descriptors().iter().position(|d| d.name == name).unwrap();
    let v = fm.values();
    let spindle = col("C3-A2 & C4-A1 spindle");
    let slow = col("C3-A2 & C4-A1 slow wave");
    let alpha = col("C3-A2 alpha power");
    // rows: W, N2, N3, REM, N1
    assert!(v[(1, spindle)] > 0.05 && v[(1, spindle)] > 2.0 * v[(4, spindle)]);
    assert!(v[(2, slow)] > v[(1, slow)] + 0.2);
    assert!(v[(0, alpha)] > 2.0 * v[(3, alpha)]);
    let emg_rms = fm
        .descriptors()
        .iter()
        .position(|d| d.name == "EMG rms" && d.statistic == Some(Statistic::Rms))
        .unwrap();
    assert!(v[(0, emg_rms)] > 4.0 * v[(3, emg_rms)]);
}
