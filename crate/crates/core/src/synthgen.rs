//! Synthetic recordings with known stage-dependent content.

use std::collections::HashMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::Fir;
use crate::featurex::{SignalKind, ALPHA_HZ, BETA_HZ, DELTA_HZ, THETA_HZ};
use crate::psg_io::{Annotation, Channel, Recording};
use crate::stage::{AnnotatedStage, StageLabel, NUM_STAGES};

pub const BLOCK_SECONDS: f64 = 30.0;
pub const SPINDLE_FREQ_HZ: (f64, f64) = (11.0, 15.0);
pub const SPINDLE_DURATION_S: (f64, f64) = (1.0, 2.0);
pub const SPINDLE_PEAK_UV: (f64, f64) = (40.0, 60.0);
pub const SLOW_WAVE_FREQ_HZ: (f64, f64) = (0.6, 1.2);
pub const SLOW_WAVE_P2P_UV: (f64, f64) = (120.0, 200.0);
pub const AMPLITUDE_JITTER: (f64, f64) = (0.8, 1.2);
const BAND_TRANSITION_HZ: f64 = 0.5;
const EMG_BAND_HZ: (f64, f64) = (12.0, 45.0);

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SynthError {
    #[error("transition matrix row {row} is not a probability vector")]
    InvalidStochasticMatrix { row: usize },
    #[error("invalid generator parameter: {0}")]
    InvalidParameter(String),
}

/// Generative parameters of one stage. Band weights are RMS µV of the
/// band-limited component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageRecipe {
    pub delta: f64,
    pub theta: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Events per 30 s.
    pub spindle_rate: f64,
    /// Events per 30 s.
    pub slow_wave_rate: f64,
    /// µV RMS on EMG channels.
    pub emg_tone: f64,
    pub noise_sigma: f64,
}

impl StageRecipe {
    pub const ZERO: StageRecipe = StageRecipe {
        delta: 0.0,
        theta: 0.0,
        alpha: 0.0,
        beta: 0.0,
        spindle_rate: 0.0,
        slow_wave_rate: 0.0,
        emg_tone: 0.0,
        noise_sigma: 0.0,
    };

    fn validate(&self) -> Result<(), SynthError> {
        let all = [
            self.delta,
            self.theta,
            self.alpha,
            self.beta,
            self.spindle_rate,
            self.slow_wave_rate,
            self.emg_tone,
            self.noise_sigma,
        ];
        if all.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(SynthError::InvalidParameter(format!("negative or non-finite recipe value in {self:?}")))
        }
    }
}

/// One recipe per stage, indexed by [`StageLabel::index`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecipeSet(pub [StageRecipe; NUM_STAGES]);

impl RecipeSet {
    pub fn get(&self, stage: StageLabel) -> &StageRecipe {
        &self.0[stage.index()]
    }

    pub fn uniform(recipe: StageRecipe) -> Self {
        RecipeSet([recipe; NUM_STAGES])
    }
}

impl Default for RecipeSet {
    fn default() -> Self {
        let base = StageRecipe { noise_sigma: 3.0, ..StageRecipe::ZERO };
        // N1 background; N2 adds spindles, REM drops muscle tone
        let theta = StageRecipe { delta: 8.0, theta: 25.0, alpha: 5.0, beta: 4.0, emg_tone: 10.0, ..base };
        RecipeSet([
            StageRecipe { delta: 5.0, theta: 5.0, alpha: 20.0, beta: 15.0, emg_tone: 30.0, ..base },
            theta,
            StageRecipe { spindle_rate: 4.0, ..theta },
            StageRecipe { delta: 60.0, theta: 10.0, alpha: 2.0, beta: 2.0, slow_wave_rate: 6.0, emg_tone: 10.0, ..base },
            StageRecipe { emg_tone: 1.5, ..theta },
        ])
    }
}

/// Channel layout of the default synthetic montage.
pub fn default_channel_labels() -> Vec<String> {
    ["C3-A2", "C4-A1", "E1-M2", "EMG"].iter().map(|s| s.to_string()).collect()
}

/// Guess the signal kind from a channel label.
pub fn infer_kind(label: &str) -> SignalKind {
    let l = label.to_ascii_uppercase();
    if l.contains("EMG") || l.starts_with("X1") || l.contains("CHIN") {
        SignalKind::Emg
    } else if l.contains("EOG") || l.starts_with("E1") || l.starts_with("E2") || l.starts_with("LOC") || l.starts_with("ROC") {
        SignalKind::Eog
    } else {
        SignalKind::Eeg
    }
}

/// A generated burst placed on every EEG channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthEvent {
    pub start: usize,
    pub len: usize,
}

struct Filters {
    taps: usize,
    bands: [Vec<f64>; 4],
    emg: Vec<f64>,
    cache: HashMap<(usize, u8), Fir>,
}

impl Filters {
    fn new(rate: f64) -> Self {
        let taps = Fir::taps_for_transition(rate, BAND_TRANSITION_HZ);
        let unit = |lo: f64, hi: f64| {
            let f = Fir::bandpass(lo, hi.min(0.49 * rate), rate, taps);
            let norm = f.noise_gain().sqrt();
            f.taps().iter().map(|t| t / norm).collect::<Vec<f64>>()
        };
        Filters {
            taps,
            bands: [
                unit(DELTA_HZ.0, DELTA_HZ.1),
                unit(THETA_HZ.0, THETA_HZ.1),
                unit(ALPHA_HZ.0, ALPHA_HZ.1),
                unit(BETA_HZ.0, BETA_HZ.1),
            ],
            emg: unit(EMG_BAND_HZ.0, EMG_BAND_HZ.1),
            cache: HashMap::new(),
        }
    }

    /// Combined filter whose output on unit white noise has the recipe's
    /// per-band RMS. Bands overlap only in transition regions.
    fn combined(&mut self, stage: StageLabel, kind: SignalKind, recipe: &StageRecipe) -> &Fir {
        let key = (stage.index(), kind as u8);
        let (bands, emg) = (&self.bands, &self.emg);
        self.cache.entry(key).or_insert_with(|| {
            let weights: Vec<(f64, &Vec<f64>)> = match kind {
                SignalKind::Eeg => vec![
                    (recipe.delta, &bands[0]),
                    (recipe.theta, &bands[1]),
                    (recipe.alpha, &bands[2]),
                    (recipe.beta, &bands[3]),
                ],
                SignalKind::Eog => vec![(0.5 * recipe.delta, &bands[0]), (0.5 * recipe.theta, &bands[1])],
                SignalKind::Emg => vec![(recipe.emg_tone, emg)],
            };
            let mut taps = vec![0.0; emg.len()];
            for (w, h) in weights {
                for (t, v) in taps.iter_mut().zip(h) {
                    *t += w * v;
                }
            }
            Fir::from_taps(taps)
        })
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    range.0 + (range.1 - range.0) * rng.gen::<f64>()
}

fn event_count(rng: &mut ChaCha8Rng, rate: f64) -> usize {
    let whole = rate.floor();
    let extra = if rng.gen::<f64>() < rate - whole { 1 } else { 0 };
    whole as usize + extra
}

/// Non-overlapping placements: the block is cut into equal slots and each
/// event sits at a random offset inside its own slot.
fn place(rng: &mut ChaCha8Rng, count: usize, block_len: usize, lens: &[usize]) -> Vec<usize> {
    if count == 0 {
        return Vec::new();
    }
    let slot = block_len / count;
    lens.iter()
        .enumerate()
        .map(|(k, &len)| {
            let room = slot.saturating_sub(len + 2);
            k * slot + 1 + if room > 0 { rng.gen_range(0..=room) } else { 0 }
        })
        .collect()
}

/// Generated recording, its annotations and the spindle events (per block
/// sample offsets in recording coordinates).
pub struct SynthOutput {
    pub recording: Recording,
    pub annotations: Vec<Annotation>,
    pub spindles: Vec<SynthEvent>,
    pub slow_waves: Vec<SynthEvent>,
}

/// Generate one recording with a 30 s block per stage.
pub fn synth_recording_detailed(
    stages: &[StageLabel],
    recipes: &RecipeSet,
    channel_labels: &[String],
    rate: f64,
    seed: u64,
) -> Result<SynthOutput, SynthError> {
    if stages.is_empty() {
        return Err(SynthError::InvalidParameter("empty stage sequence".into()));
    }
    if !(rate >= 100.0 && rate.is_finite()) {
        return Err(SynthError::InvalidParameter(format!("rate {rate} Hz below 100 Hz")));
    }
    if channel_labels.is_empty() {
        return Err(SynthError::InvalidParameter("no channels".into()));
    }
    for r in &recipes.0 {
        r.validate()?;
    }

    let block_len = (BLOCK_SECONDS * rate).round() as usize;
    let total = block_len * stages.len();
    let kinds: Vec<SignalKind> = channel_labels.iter().map(|l| infer_kind(l)).collect();
    let mut data = vec![vec![0.0f64; total]; channel_labels.len()];
    let mut filters = Filters::new(rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spindles = Vec::new();
    let mut slow_waves = Vec::new();

    for (b, &stage) in stages.iter().enumerate() {
        let recipe = *recipes.get(stage);
        let offset = b * block_len;
        for (c, &kind) in kinds.iter().enumerate() {
            let jitter = uniform(&mut rng, AMPLITUDE_JITTER);
            let white: Vec<f64> = (0..block_len + filters.taps - 1).map(|_| StandardNormal.sample(&mut rng)).collect();
            let band = filters.combined(stage, kind, &recipe).apply_valid(&white);
            let out = &mut data[c][offset..offset + block_len];
            for (o, v) in out.iter_mut().zip(band) {
                *o = jitter * v;
            }
            for o in out.iter_mut() {
                let w: f64 = StandardNormal.sample(&mut rng);
                *o += recipe.noise_sigma * w;
            }
        }

        let eeg: Vec<usize> = (0..kinds.len()).filter(|&c| kinds[c] == SignalKind::Eeg).collect();

        let n_sp = event_count(&mut rng, recipe.spindle_rate);
        let sp: Vec<(f64, f64, usize)> = (0..n_sp)
            .map(|_| {
                let f = uniform(&mut rng, SPINDLE_FREQ_HZ);
                let a = uniform(&mut rng, SPINDLE_PEAK_UV);
                let len = (uniform(&mut rng, SPINDLE_DURATION_S) * rate).round() as usize;
                (f, a, len)
            })
            .collect();
        let lens: Vec<usize> = sp.iter().map(|e| e.2).collect();
        for (&start, &(f, a, len)) in place(&mut rng, n_sp, block_len, &lens).iter().zip(&sp) {
            for &c in &eeg {
                for i in 0..len {
                    let env = (PI * i as f64 / len as f64).sin().powi(2);
                    data[c][offset + start + i] += a * env * (2.0 * PI * f * i as f64 / rate).sin();
                }
            }
            spindles.push(SynthEvent { start: offset + start, len });
        }

        let n_sw = event_count(&mut rng, recipe.slow_wave_rate);
        let sw: Vec<(f64, f64, usize)> = (0..n_sw)
            .map(|_| {
                let f = uniform(&mut rng, SLOW_WAVE_FREQ_HZ);
                let p2p = uniform(&mut rng, SLOW_WAVE_P2P_UV);
                let len = (rate / f).round() as usize;
                (f, p2p, len)
            })
            .collect();
        let lens: Vec<usize> = sw.iter().map(|e| e.2).collect();
        for (&start, &(f, p2p, len)) in place(&mut rng, n_sw, block_len, &lens).iter().zip(&sw) {
            for &c in &eeg {
                for i in 0..len {
                    // negative half-wave first, as in scalp slow oscillations
                    data[c][offset + start + i] -= 0.5 * p2p * (2.0 * PI * f * i as f64 / rate).sin();
                }
            }
            slow_waves.push(SynthEvent { start: offset + start, len });
        }
    }

    let channels = channel_labels
        .iter()
        .zip(data)
        .map(|(label, samples)| Channel::new(label.clone(), rate, "uV", samples))
        .collect();
    let recording = Recording::new(format!("synth-{seed}"), channels)
        .map_err(|e| SynthError::InvalidParameter(e.to_string()))?;
    let annotations = stages
        .iter()
        .enumerate()
        .map(|(b, &s)| Annotation {
            onset: b as f64 * BLOCK_SECONDS,
            duration: BLOCK_SECONDS,
            stage: AnnotatedStage::Scored(s),
        })
        .collect();
    Ok(SynthOutput { recording, annotations, spindles, slow_waves })
}

pub fn synth_recording(
    stages: &[StageLabel],
    recipes: &RecipeSet,
    channel_labels: &[String],
    rate: f64,
    seed: u64,
) -> Result<(Recording, Vec<Annotation>), SynthError> {
    synth_recording_detailed(stages, recipes, channel_labels, rate, seed).map(|o| (o.recording, o.annotations))
}

pub type Markov = [[f64; NUM_STAGES]; NUM_STAGES];

/// A sleep-like chain with long stage runs.
pub fn default_markov() -> Markov {
    [
        [0.80, 0.12, 0.05, 0.01, 0.02],
        [0.10, 0.50, 0.30, 0.02, 0.08],
        [0.03, 0.05, 0.80, 0.08, 0.04],
        [0.02, 0.01, 0.12, 0.85, 0.00],
        [0.05, 0.05, 0.05, 0.00, 0.85],
    ]
}

pub fn validate_markov(m: &Markov) -> Result<(), SynthError> {
    for (row, p) in m.iter().enumerate() {
        let sum: f64 = p.iter().sum();
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(SynthError::InvalidStochasticMatrix { row });
        }
    }
    Ok(())
}

/// Sample `n` stages starting from `start`.
pub fn markov_sequence(m: &Markov, n: usize, start: StageLabel, rng: &mut impl Rng) -> Vec<StageLabel> {
    let mut out = Vec::with_capacity(n);
    let mut state = start;
    for i in 0..n {
        if i > 0 {
            let u: f64 = rng.gen();
            let row = &m[state.index()];
            let mut acc = 0.0;
            let mut next = NUM_STAGES - 1;
            for (k, p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    next = k;
                    break;
                }
            }
            // guard against rounding in the last bucket landing on a zero row entry
            while row[next] == 0.0 && next > 0 {
                next -= 1;
            }
            state = StageLabel::from_index(next).expect("stage index in range");
        }
        out.push(state);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub recipes: RecipeSet,
    pub channel_labels: Vec<String>,
    pub rate: f64,
    pub start: StageLabel,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            recipes: RecipeSet::default(),
            channel_labels: default_channel_labels(),
            rate: 100.0,
            start: StageLabel::Wake,
        }
    }
}

/// Seed for subject `index`, derived so that subjects are independent.
pub fn subject_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng.gen()
}

pub fn synth_dataset(
    n_subjects: usize,
    epochs_per_subject: usize,
    markov: &Markov,
    seed: u64,
) -> Result<Vec<(Recording, Vec<Annotation>)>, SynthError> {
    synth_dataset_with(n_subjects, epochs_per_subject, markov, seed, &SynthOptions::default())
}

pub fn synth_dataset_with(
    n_subjects: usize,
    epochs_per_subject: usize,
    markov: &Markov,
    seed: u64,
    options: &SynthOptions,
) -> Result<Vec<(Recording, Vec<Annotation>)>, SynthError> {
    validate_markov(markov)?;
    (0..n_subjects).into_par_iter().map(|i| synth_subject(i, epochs_per_subject, markov, seed, options)).collect()
}

/// Subject `index` of the dataset [`synth_dataset_with`] would build, generated alone.
pub fn synth_subject(
    index: usize,
    epochs_per_subject: usize,
    markov: &Markov,
    seed: u64,
    options: &SynthOptions,
) -> Result<(Recording, Vec<Annotation>), SynthError> {
    validate_markov(markov)?;
    let s = subject_seed(seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let stages = markov_sequence(markov, epochs_per_subject, options.start, &mut rng);
    let (mut rec, ann) =
        synth_recording(&stages, &options.recipes, &options.channel_labels, options.rate, s.wrapping_add(1))?;
    rec.id = format!("subject-{index:03}");
    Ok((rec, ann))
}
