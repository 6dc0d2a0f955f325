//! Run configuration, subject split and the end-to-end pipeline:
//! ingest, features, selection, embedder, map, classifier, evaluation and
//! explanation artifacts.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{BundleError, ModelBundle, ValidationRows};
use crate::embednet::{
    extract_embeddings, init_model, train, EmbedError, EmbedderConfig, EmbedderModel, LossTrace,
};
use crate::evalmetrics::{summarize, EvalReport, MetricError};
use crate::featsel::{select_top, SelectError, SelectionMask};
use crate::featurex::{extract_features, ChannelMap, FeatureDescriptor, FeatureError, FeatureMatrix};
use crate::interpret::{
    decision_path, export_tree_dot, permutation_importance, split_gain_importance, ImportanceMetric,
    ImportanceReport, InterpretError,
};
use crate::linmap::{fit_map, LinearMap, MapError, Standardization};
use crate::psg_io::{
    parse_edf, read_stage_labels, resample_recording, segment_epochs, select_channels, Annotation, EpochSet,
    LabelOptions, LabelSchema, PsgError, Recording,
};
use crate::simpleclf::{
    fit_boosted, fit_logistic, fit_tree, BoostOptions, BoostedEnsemble, ClfError, Classifier, DecisionTreeModel,
    LogisticOptions,
    StageClassifier, TreeOptions,
};
use crate::stage::StageLabel;
use crate::synthgen::{
    default_channel_labels, default_markov, synth_subject, validate_markov, Markov, RecipeSet, SynthError,
    SynthOptions,
};

/// Offsets added to the run seed to derive each stage's seed.
pub const SPLIT_SEED_OFFSET: u64 = 1;
pub const EMBED_SEED_OFFSET: u64 = 2;
pub const BOOST_SEED_OFFSET: u64 = 3;
pub const IMPORTANCE_SEED_OFFSET: u64 = 4;

/// Training rows whose inference is stored in the bundle.
pub const VALIDATION_ROWS: usize = 64;

pub fn derived_seed(seed: u64, offset: u64) -> u64 {
    seed.wrapping_add(offset)
}

/// Cap the global worker pool at `threads`. Outputs do not depend on the count.
pub fn set_worker_threads(threads: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build_global()
        .map_err(|e| PipelineError::Config(format!("worker pool: {e}")))
}

#[derive(Debug, thiserror::Error)]
pub enum StageError {
    #[error(transparent)]
    Psg(#[from] PsgError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Classifier(#[from] ClfError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Interpret(#[from] InterpretError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("need at least 2 subjects to split, got {0}")]
    TooFewSubjects(usize),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{stage}: {source}")]
    Stage { stage: &'static str, source: StageError },
}

pub type Result<T> = std::result::Result<T, PipelineError>;

impl PipelineError {
    /// Process exit code: 2 configuration, 3 data, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::TooFewSubjects(_) | PipelineError::Io { .. } => 3,
            PipelineError::Stage { source, .. } => match source {
                StageError::Embed(EmbedError::NonFiniteLoss { .. })
                | StageError::Map(MapError::SingularSystem { .. })
                | StageError::Classifier(ClfError::NonFiniteGradient { .. })
                | StageError::Metric(MetricError::DegenerateAgreement(_))
                | StageError::Feature(FeatureError::NonFinite { .. }) => 4,
                StageError::Embed(EmbedError::InvalidConfig(_) | EmbedError::ShapeInfeasible(_))
                | StageError::Classifier(ClfError::InvalidOption(_))
                | StageError::Map(MapError::InvalidLambda(_))
                | StageError::Synth(_) => 2,
                _ => 3,
            },
        }
    }
}

/// Attach a stage name to a module error.
pub fn at<E: Into<StageError>>(stage: &'static str) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::Stage { stage, source: e.into() }
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.display().to_string(), source }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataConfig {
    Synth {
        subjects: usize,
        epochs_per_subject: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        markov: Option<Markov>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        recipes: Option<RecipeSet>,
    },
    Edf {
        recordings: Vec<RecordingEntry>,
        schema: LabelSchema,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingEntry {
    pub psg: PathBuf,
    /// Hypnogram sidecar: lines `onset,duration,token`.
    pub labels: PathBuf,
    /// Subject id; the file stem when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    Dt,
    Gb,
    Xg,
    Lr,
}

impl ClassifierKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dt" => Some(ClassifierKind::Dt),
            "gb" => Some(ClassifierKind::Gb),
            "xg" => Some(ClassifierKind::Xg),
            "lr" => Some(ClassifierKind::Lr),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassifierKind::Dt => "dt",
            ClassifierKind::Gb => "gb",
            ClassifierKind::Xg => "xg",
            ClassifierKind::Lr => "lr",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoostConfig {
    pub rounds: usize,
    pub learning_rate: f64,
    pub tree_depth: usize,
    pub min_samples_leaf: usize,
    /// Used by `xg`; `gb` always runs without dropout.
    pub dart_dropout: f64,
}

impl Default for BoostConfig {
    fn default() -> Self {
        BoostConfig { rounds: 100, learning_rate: 0.1, tree_depth: 3, min_samples_leaf: 1, dart_dropout: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub kind: ClassifierKind,
    /// The evaluated `dt` model.
    pub tree: TreeOptions,
    /// The tree exported as DOT.
    pub explain_tree: TreeOptions,
    pub boost: BoostConfig,
    pub logistic: LogisticOptions,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            kind: ClassifierKind::Xg,
            tree: TreeOptions { max_depth: 8, min_samples_leaf: 20 },
            explain_tree: TreeOptions { max_depth: 4, min_samples_leaf: 1 },
            boost: BoostConfig::default(),
            logistic: LogisticOptions::default(),
        }
    }
}

impl ClassifierConfig {
    pub fn with_kind(&self, kind: ClassifierKind) -> Self {
        ClassifierConfig { kind, ..self.clone() }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        for (what, t) in [("tree", &self.tree), ("explain_tree", &self.explain_tree)] {
            if t.min_samples_leaf == 0 {
                return bad(format!("classifier.{what}.min_samples_leaf must be at least 1"));
            }
        }
        let b = &self.boost;
        if b.rounds == 0 || b.tree_depth == 0 || b.min_samples_leaf == 0 {
            return bad("classifier.boost needs rounds, tree_depth and min_samples_leaf of at least 1".into());
        }
        if !(b.learning_rate >= 0.0 && b.learning_rate.is_finite()) || !(0.0..1.0).contains(&b.dart_dropout) {
            return bad(format!("classifier.boost: learning_rate {} / dart_dropout {}", b.learning_rate, b.dart_dropout));
        }
        let l = &self.logistic;
        if !(l.l2_penalty >= 0.0) || !(l.tol > 0.0) || l.max_iters == 0 {
            return bad("classifier.logistic needs l2_penalty >= 0, tol > 0 and max_iters >= 1".into());
        }
        Ok(())
    }

    fn boost_options(&self, seed: u64) -> BoostOptions {
        let b = &self.boost;
        BoostOptions {
            rounds: b.rounds,
            learning_rate: b.learning_rate,
            tree_depth: b.tree_depth,
            min_samples_leaf: b.min_samples_leaf,
            dart_dropout: if self.kind == ClassifierKind::Xg { b.dart_dropout } else { 0.0 },
            seed: derived_seed(seed, BOOST_SEED_OFFSET),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImportanceConfig {
    pub metric: ImportanceMetric,
    pub repeats: usize,
}

impl Default for ImportanceConfig {
    fn default() -> Self {
        ImportanceConfig { metric: ImportanceMetric::MacroF1, repeats: 5 }
    }
}

fn default_ratio() -> f64 {
    0.9
}
fn default_lambda() -> f64 {
    1.0
}
fn default_epoch_seconds() -> f64 {
    30.0
}
fn default_rate() -> f64 {
    100.0
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("serf-out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_ratio")]
    pub split_ratio: f64,
    /// Ridge strength of the linear map.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_epoch_seconds")]
    pub epoch_seconds: f64,
    /// Rate every recording is resampled to.
    #[serde(default = "default_rate")]
    pub sampling_rate: f64,
    /// Named channel layout (`isruc`, `edfx`, `synthetic`); ignored when
    /// `channel_map` is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_map: Option<ChannelMap>,
    pub data: DataConfig,
    /// Input channel count, input length and seed are set from the data and
    /// the run seed.
    #[serde(default)]
    pub embedder: EmbedderConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub importance: ImportanceConfig,
}

impl RunConfig {
    /// Synthetic-data configuration with the given size and embedder defaults.
    pub fn synthetic(subjects: usize, epochs_per_subject: usize, seed: u64) -> Self {
        RunConfig {
            seed,
            output_dir: default_output_dir(),
            split_ratio: default_ratio(),
            lambda: default_lambda(),
            epoch_seconds: default_epoch_seconds(),
            sampling_rate: default_rate(),
            channel_preset: Some("synthetic".into()),
            channel_map: None,
            data: DataConfig::Synth { subjects, epochs_per_subject, markov: None, recipes: None },
            embedder: EmbedderConfig::default(),
            classifier: ClassifierConfig::default(),
            importance: ImportanceConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            config.resolve_paths(base);
        }
        Ok(config)
    }

    /// Make relative recording paths and the output directory relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        if self.output_dir.is_relative() {
            self.output_dir = base.join(&self.output_dir);
        }
        if let DataConfig::Edf { recordings, .. } = &mut self.data {
            for r in recordings {
                for p in [&mut r.psg, &mut r.labels] {
                    if p.is_relative() {
                        *p = base.join(&*p);
                    }
                }
            }
        }
    }

    pub fn resolved_channel_map(&self) -> Result<ChannelMap> {
        if let Some(m) = &self.channel_map {
            return Ok(m.clone());
        }
        match &self.channel_preset {
            Some(name) => {
                ChannelMap::preset(name).ok_or_else(|| PipelineError::Config(format!("unknown channel preset `{name}`")))
            }
            None => match self.data {
                DataConfig::Synth { .. } => Ok(ChannelMap::synthetic()),
                DataConfig::Edf { .. } => Err(PipelineError::Config("a channel_map or channel_preset is required".into())),
            },
        }
    }

    pub fn samples_per_epoch(&self) -> usize {
        (self.epoch_seconds * self.sampling_rate).round() as usize
    }

    /// Embedder configuration with data-derived input dimensions and seed.
    pub fn effective_embedder(&self) -> Result<EmbedderConfig> {
        let channels = self.resolved_channel_map()?.channels().len();
        Ok(EmbedderConfig {
            input_channels: channels,
            input_length: self.samples_per_epoch(),
            seed: derived_seed(self.seed, EMBED_SEED_OFFSET),
            ..self.embedder.clone()
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.seed > i64::MAX as u64 {
            return bad(format!("seed {} exceeds {}", self.seed, i64::MAX));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad(format!("split_ratio {} must lie in (0, 1)", self.split_ratio));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be positive", self.lambda));
        }
        if !(self.epoch_seconds > 0.0 && self.sampling_rate > 0.0) || !self.epoch_seconds.is_finite() {
            return bad("epoch_seconds and sampling_rate must be positive".into());
        }
        let l = self.epoch_seconds * self.sampling_rate;
        if (l - l.round()).abs() > 1e-9 {
            return bad(format!("{} s at {} Hz is not a whole number of samples", self.epoch_seconds, self.sampling_rate));
        }
        let map = self.resolved_channel_map()?;
        if map.channels().is_empty() {
            return bad("channel map lists no channels".into());
        }
        match &self.data {
            DataConfig::Synth { subjects, epochs_per_subject, markov, .. } => {
                if *subjects < 2 || *epochs_per_subject == 0 {
                    return bad("synth data needs at least 2 subjects and 1 epoch per subject".into());
                }
                if let Some(m) = markov {
                    validate_markov(m).map_err(|e| PipelineError::Config(e.to_string()))?;
                }
                let have: HashSet<String> = default_channel_labels().into_iter().collect();
                if let Some(c) = map.channels().into_iter().find(|c| !have.contains(c)) {
                    return bad(format!("synthetic recordings have no channel `{c}`"));
                }
            }
            DataConfig::Edf { recordings, .. } => {
                if recordings.len() < 2 {
                    return bad("edf data needs at least 2 recordings".into());
                }
            }
        }
        let embedder = self.effective_embedder()?;
        embedder.layer_lengths().map_err(|e| PipelineError::Config(e.to_string()))?;
        if embedder.learning_rate < 0.0 || !embedder.learning_rate.is_finite() || embedder.max_sequence == 0 {
            return bad("embedder needs a finite learning_rate >= 0 and max_sequence >= 1".into());
        }
        self.classifier.validate()?;
        if self.importance.repeats == 0 {
            return bad("importance.repeats must be at least 1".into());
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Split

/// Seeded shuffle then prefix split: `max(1, floor(ratio·n))` train subjects,
/// the rest test.
pub fn split_subjects(ids: &[String], ratio: f64, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    let n = ids.len();
    if n < 2 {
        return Err(PipelineError::TooFewSubjects(n));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(PipelineError::Config(format!("split ratio {ratio} must lie in (0, 1)")));
    }
    let mut seen = HashSet::new();
    if let Some(d) = ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(PipelineError::Config(format!("duplicate subject id `{d}`")));
    }
    let mut order = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    // the epsilon keeps products such as 0.57·100 from flooring one short
    let train = ((ratio * n as f64 + 1e-9).floor() as usize).clamp(1, n - 1);
    let test = order.split_off(train);
    Ok((order, test))
}

// ---------------------------------------------------------------------------
// Data

/// Subjects that can be loaded one at a time.
pub trait SubjectSource: Sync {
    fn subject_ids(&self) -> Vec<String>;
    /// Recording (its id is the subject id) and stage annotations of subject `index`.
    fn load(&self, index: usize) -> Result<(Recording, Vec<Annotation>)>;
}

/// The source a [`RunConfig`] describes.
pub struct ConfigSource<'a> {
    config: &'a RunConfig,
}

impl<'a> ConfigSource<'a> {
    pub fn new(config: &'a RunConfig) -> Self {
        ConfigSource { config }
    }
}

pub fn synth_options(recipes: &Option<RecipeSet>) -> SynthOptions {
    SynthOptions { recipes: recipes.unwrap_or_default(), ..SynthOptions::default() }
}

fn entry_subject(entry: &RecordingEntry) -> String {
    entry.subject.clone().unwrap_or_else(|| {
        entry.psg.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| entry.psg.display().to_string())
    })
}

/// Read an EDF recording and its hypnogram sidecar.
pub fn load_edf_pair(psg: &Path, labels: &Path, schema: LabelSchema) -> Result<(Recording, Vec<Annotation>)> {
    let bytes = std::fs::read(psg).map_err(io_error(psg))?;
    let recording = parse_edf(&bytes).map_err(at("ingest"))?;
    let text = std::fs::read_to_string(labels).map_err(io_error(labels))?;
    let annotations = read_stage_labels(&text, LabelOptions::new(schema)).map_err(at("ingest"))?;
    Ok((recording, annotations))
}

impl SubjectSource for ConfigSource<'_> {
    fn subject_ids(&self) -> Vec<String> {
        match &self.config.data {
            DataConfig::Synth { subjects, .. } => (0..*subjects).map(|i| format!("subject-{i:03}")).collect(),
            DataConfig::Edf { recordings, .. } => recordings.iter().map(entry_subject).collect(),
        }
    }

    fn load(&self, index: usize) -> Result<(Recording, Vec<Annotation>)> {
        match &self.config.data {
            DataConfig::Synth { epochs_per_subject, markov, recipes, .. } => {
                let markov = markov.unwrap_or_else(default_markov);
                let options = SynthOptions { rate: self.config.sampling_rate, ..synth_options(recipes) };
                synth_subject(index, *epochs_per_subject, &markov, self.config.seed, &options).map_err(at("synth"))
            }
            DataConfig::Edf { recordings, schema } => {
                let entry = &recordings[index];
                let (mut rec, ann) = load_edf_pair(&entry.psg, &entry.labels, *schema)?;
                rec.id = entry_subject(entry);
                Ok((rec, ann))
            }
        }
    }
}

/// Select the mapped channels, resample and cut into epochs.
pub fn ingest_recording(
    recording: &Recording,
    annotations: Option<&[Annotation]>,
    channel_map: &ChannelMap,
    epoch_seconds: f64,
    rate: f64,
) -> Result<EpochSet> {
    let selected = select_channels(recording, &channel_map.channels()).map_err(at("ingest"))?;
    let selected = if selected.channels.iter().all(|c| c.sampling_rate == rate) {
        selected
    } else {
        let (r, warnings) = resample_recording(&selected, rate, true).map_err(at("ingest"))?;
        for w in warnings {
            log::warn!("recording `{}`: {w}", recording.id);
        }
        r
    };
    match annotations {
        Some(a) => segment_epochs(&selected, a, epoch_seconds, rate).map_err(at("ingest")),
        None => EpochSet::unlabeled(&selected, epoch_seconds, rate).map_err(at("ingest")),
    }
}

/// Epochs and features of one side of the split.
pub struct Partition {
    pub epochs: EpochSet,
    pub features: Option<FeatureMatrix>,
}

struct PartitionBuilder {
    data: Vec<f32>,
    labels: Vec<StageLabel>,
    subjects: Vec<String>,
    features: Vec<FeatureMatrix>,
    layout: Option<(Vec<String>, f64, f64)>,
}

impl PartitionBuilder {
    fn new() -> Self {
        PartitionBuilder { data: Vec::new(), labels: Vec::new(), subjects: Vec::new(), features: Vec::new(), layout: None }
    }

    fn push(&mut self, epochs: EpochSet, features: Option<FeatureMatrix>) {
        if self.layout.is_none() {
            self.layout = Some((epochs.channel_labels().to_vec(), epochs.rate(), epochs.epoch_seconds()));
        }
        self.data.extend_from_slice(epochs.data());
        self.labels.extend_from_slice(epochs.labels());
        self.subjects.extend_from_slice(epochs.subject_ids());
        self.features.extend(features);
    }

    fn finish(self) -> Result<Partition> {
        let (channels, rate, epoch_seconds) =
            self.layout.ok_or_else(|| PipelineError::Config("a split side has no subjects".into()))?;
        let epochs =
            EpochSet::from_parts(self.data, self.labels, channels, rate, epoch_seconds, self.subjects).map_err(at("ingest"))?;
        let features = if self.features.is_empty() {
            None
        } else {
            let parts: Vec<&FeatureMatrix> = self.features.iter().collect();
            Some(FeatureMatrix::vstack(&parts).map_err(at("features"))?)
        };
        Ok(Partition { epochs, features })
    }
}

/// Which sides of the split get feature matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSides {
    None,
    Train,
    Both,
}

/// Load every subject, route it to its side of the split and extract
/// features where requested. Subjects are processed a few at a time to
/// bound memory.
pub fn ingest_split(
    config: &RunConfig,
    source: &dyn SubjectSource,
    train_ids: &[String],
    sides: FeatureSides,
) -> Result<(Partition, Partition)> {
    let channel_map = config.resolved_channel_map()?;
    let ids = source.subject_ids();
    let train_set: HashSet<&str> = train_ids.iter().map(String::as_str).collect();
    let mut train = PartitionBuilder::new();
    let mut test = PartitionBuilder::new();
    let batch = rayon::current_num_threads().max(1);
    let indices: Vec<usize> = (0..ids.len()).collect();
    for chunk in indices.chunks(batch) {
        let loaded = chunk
            .par_iter()
            .map(|&i| {
                let (rec, ann) = source.load(i)?;
                let epochs = ingest_recording(&rec, Some(&ann), &channel_map, config.epoch_seconds, config.sampling_rate)?;
                drop(rec);
                let is_train = train_set.contains(ids[i].as_str());
                let features = if sides == FeatureSides::Both || (sides == FeatureSides::Train && is_train) {
                    Some(extract_features(&epochs, &channel_map).map_err(at("features"))?)
                } else {
                    None
                };
                Ok((i, epochs, features))
            })
            .collect::<Result<Vec<_>>>()?;
        for (i, epochs, features) in loaded {
            log::debug!("ingested {} ({} epochs)", ids[i], epochs.len());
            if train_set.contains(ids[i].as_str()) {
                train.push(epochs, features);
            } else {
                test.push(epochs, features);
            }
        }
    }
    Ok((train.finish()?, test.finish()?))
}

// ---------------------------------------------------------------------------
// Stages

/// ANOVA selection on training rows.
pub fn select_stage(train_features: &FeatureMatrix, y_train: &[StageLabel]) -> Result<SelectionMask> {
    let selection = select_top(train_features, y_train).map_err(at("select"))?;
    log::info!("select: kept {} of {} features", selection.m, selection.m_prime);
    Ok(selection)
}

pub fn train_embedder_stage(config: &RunConfig, train_epochs: &EpochSet) -> Result<(EmbedderModel, LossTrace)> {
    let model = init_model(&config.effective_embedder()?).map_err(at("train-embed"))?;
    let out = train(model, train_epochs).map_err(at("train-embed"))?;
    if let Some(last) = out.1.losses.last() {
        log::info!("train-embed: {} steps, final loss {last:.4}", out.1.losses.len());
    }
    Ok(out)
}

/// Standardize the selected training features and fit `T` against the
/// training embeddings; the standardization is stored with the map.
pub fn fit_map_stage(
    lambda: f64,
    selection: &SelectionMask,
    train_features: &FeatureMatrix,
    h_train: ArrayView2<f64>,
) -> Result<LinearMap> {
    let f_train = selection.apply(train_features).map_err(at("fit-map"))?;
    let standardization = Standardization::fit(f_train.values().view());
    let f_z = standardization.apply(f_train.values().view()).map_err(at("fit-map"))?;
    let mut map = fit_map(f_z.view(), h_train, lambda).map_err(at("fit-map"))?;
    let s = map.represent(h_train).map_err(at("fit-map"))?;
    log::info!("fit-map: training R² {:.4}", r_squared(f_z.view(), s.view()));
    map.standardization = Some(standardization);
    Ok(map)
}

/// Coefficient of determination of `target` by `fitted`, over all entries.
pub fn r_squared(target: ArrayView2<f64>, fitted: ArrayView2<f64>) -> f64 {
    let mean = target.mean().unwrap_or(0.0);
    let ss_tot: f64 = target.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res: f64 = target.iter().zip(fitted.iter()).map(|(a, b)| (a - b).powi(2)).sum();
    if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else {
        0.0
    }
}

pub fn selected_names(selection: &SelectionMask, descriptors: &[FeatureDescriptor]) -> Vec<String> {
    selection.kept_indices.iter().map(|&j| descriptors[j].name.clone()).collect()
}

pub fn fit_classifier(
    config: &ClassifierConfig,
    seed: u64,
    x: ArrayView2<f64>,
    y: &[StageLabel],
    names: &[String],
) -> Result<Classifier> {
    let c = match config.kind {
        ClassifierKind::Dt => {
            let mut t = fit_tree(x, y, &config.tree).map_err(at("train-clf"))?;
            t.feature_names = names.to_vec();
            Classifier::Tree(t)
        }
        ClassifierKind::Gb | ClassifierKind::Xg => {
            Classifier::Boosted(fit_boosted(x, y, &config.boost_options(seed)).map_err(at("train-clf"))?)
        }
        ClassifierKind::Lr => {
            let m = fit_logistic(x, y, &config.logistic).map_err(at("train-clf"))?;
            if !m.converged {
                log::warn!("logistic regression stopped after {} iterations without converging", m.iterations);
            }
            Classifier::Logistic(m)
        }
    };
    log::info!("train-clf: fitted {}", config.kind.as_str());
    Ok(c)
}

pub fn predictions(p: &Array2<f64>) -> Vec<StageLabel> {
    p.rows().into_iter().map(|r| StageLabel::argmax(r.as_slice().expect("rows are contiguous"))).collect()
}

/// Test-set probabilities, predictions and metrics.
pub fn evaluate_stage(
    classifier: &Classifier,
    s_test: ArrayView2<f64>,
    y_test: &[StageLabel],
) -> Result<(Array2<f64>, Vec<StageLabel>, EvalReport)> {
    let p = classifier.predict_proba(s_test).map_err(at("evaluate"))?;
    let pred = predictions(&p);
    let report = summarize(y_test, &pred, Some(p.view())).map_err(at("evaluate"))?;
    log::info!("evaluate: kappa {:.4}, macro F1 {:.4}", report.kappa, report.macro_f1);
    Ok((p, pred, report))
}

/// Metrics of the embedder's own stage probabilities.
pub fn baseline_report(probabilities: &Array2<f64>, y_test: &[StageLabel]) -> Result<EvalReport> {
    summarize(y_test, &predictions(probabilities), Some(probabilities.view())).map_err(at("evaluate"))
}

/// Explanation tree with its DOT text, split-gain and permutation importance.
pub struct Explanation {
    pub tree: DecisionTreeModel,
    pub dot: String,
    pub split_gain: ImportanceReport,
    pub permutation: ImportanceReport,
}

/// The explanation tree and split gain come from the training rows,
/// permutation importance from the test rows.
#[allow(clippy::too_many_arguments)]
pub fn explain_stage(
    config: &RunConfig,
    classifier_config: &ClassifierConfig,
    classifier: &Classifier,
    names: &[String],
    s_train: ArrayView2<f64>,
    y_train: &[StageLabel],
    s_test: ArrayView2<f64>,
    y_test: &[StageLabel],
) -> Result<Explanation> {
    let mut tree = fit_tree(s_train, y_train, &classifier_config.explain_tree).map_err(at("explain"))?;
    tree.feature_names = names.to_vec();
    let dot = export_tree_dot(&tree).map_err(at("explain"))?;
    let split_gain = match classifier {
        Classifier::Logistic(_) => split_gain_importance(&Classifier::Tree(tree.clone()), names),
        c => split_gain_importance(c, names),
    }
    .map_err(at("explain"))?;
    let permutation = permutation_importance(
        classifier,
        s_test,
        y_test,
        names,
        config.importance.metric,
        config.importance.repeats,
        derived_seed(config.seed, IMPORTANCE_SEED_OFFSET),
    )
    .map_err(at("explain"))?;
    Ok(Explanation { tree, dot, split_gain, permutation })
}

/// Parts a bundle is assembled from.
pub struct BundleParts<'a> {
    pub config: &'a RunConfig,
    pub classifier_config: &'a ClassifierConfig,
    pub descriptors: &'a [FeatureDescriptor],
    pub selection: &'a SelectionMask,
    pub embedder: &'a EmbedderModel,
    pub map: &'a LinearMap,
    pub classifier: Classifier,
    /// Training embeddings; the leading [`VALIDATION_ROWS`] are stored.
    pub h_train: ArrayView2<'a, f64>,
}

/// The stored configuration has its output location cleared, so bundles do
/// not depend on where artifacts were written.
pub fn assemble_bundle(parts: BundleParts<'_>) -> Result<ModelBundle<RunConfig>> {
    let config = RunConfig {
        output_dir: PathBuf::new(),
        classifier: parts.classifier_config.clone(),
        ..parts.config.clone()
    };
    let k = VALIDATION_ROWS.min(parts.h_train.nrows());
    let embeddings = parts.h_train.slice(s![..k, ..]).to_owned();
    let s = parts.map.represent(embeddings.view()).map_err(at("represent"))?;
    let probabilities = parts.classifier.predict_proba(s.view()).map_err(at("evaluate"))?;
    Ok(ModelBundle {
        channel_map: config.resolved_channel_map()?,
        config,
        descriptors: parts.descriptors.to_vec(),
        selection: parts.selection.clone(),
        embedder: parts.embedder.clone(),
        map: parts.map.clone(),
        classifier: parts.classifier,
        validation: ValidationRows { predictions: predictions(&probabilities), embeddings, probabilities },
    })
}

// ---------------------------------------------------------------------------
// Pipeline

/// Everything up to the representative matrices; shared by all classifiers.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: RunConfig,
    pub train_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
    /// Full catalog before selection.
    pub descriptors: Vec<FeatureDescriptor>,
    pub selection: SelectionMask,
    pub feature_names: Vec<String>,
    pub embedder: EmbedderModel,
    pub loss_trace: LossTrace,
    pub map: LinearMap,
    pub h_train: Array2<f64>,
    pub s_train: Array2<f64>,
    pub y_train: Vec<StageLabel>,
    pub s_test: Array2<f64>,
    pub y_test: Vec<StageLabel>,
    pub test_subject_ids: Vec<String>,
    /// The embedder's own stage probabilities on the test epochs.
    pub baseline_probabilities: Array2<f64>,
}

pub fn prepare(config: &RunConfig) -> Result<Prepared> {
    prepare_with(config, &ConfigSource::new(config))
}

/// Run every stage before classifier training. Only training subjects feed
/// fitted statistics.
pub fn prepare_with(config: &RunConfig, source: &dyn SubjectSource) -> Result<Prepared> {
    config.validate()?;
    let ids = source.subject_ids();
    let (train_subjects, test_subjects) =
        split_subjects(&ids, config.split_ratio, derived_seed(config.seed, SPLIT_SEED_OFFSET))?;
    log::info!("split: {} train / {} test subjects", train_subjects.len(), test_subjects.len());

    let (train_part, test_part) = ingest_split(config, source, &train_subjects, FeatureSides::Train)?;
    let train_features = train_part.features.expect("training features requested");
    let (train_epochs, test_epochs) = (train_part.epochs, test_part.epochs);
    log::info!("ingest: {} train / {} test epochs", train_epochs.len(), test_epochs.len());

    let descriptors = train_features.descriptors().to_vec();
    let y_train = train_epochs.labels().to_vec();
    let y_test = test_epochs.labels().to_vec();
    let selection = select_stage(&train_features, &y_train)?;

    let (embedder, loss_trace) = train_embedder_stage(config, &train_epochs)?;
    let h_train = extract_embeddings(&embedder, &train_epochs).map_err(at("embed"))?;
    drop(train_epochs);
    let h_test = extract_embeddings(&embedder, &test_epochs).map_err(at("embed"))?;
    let test_subject_ids = test_epochs.subject_ids().to_vec();
    drop(test_epochs);

    let map = fit_map_stage(config.lambda, &selection, &train_features, h_train.values.view())?;
    let s_train = map.represent(h_train.values.view()).map_err(at("represent"))?;
    let s_test = map.represent(h_test.values.view()).map_err(at("represent"))?;

    Ok(Prepared {
        config: config.clone(),
        train_subjects,
        test_subjects,
        feature_names: selected_names(&selection, &descriptors),
        descriptors,
        selection,
        embedder,
        loss_trace,
        map,
        h_train: h_train.values,
        s_train,
        y_train,
        s_test,
        y_test,
        test_subject_ids,
        baseline_probabilities: h_test.probabilities,
    })
}

/// Results of one classifier on prepared data.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub bundle: ModelBundle<RunConfig>,
    pub report: EvalReport,
    pub baseline_report: EvalReport,
    pub test_probabilities: Array2<f64>,
    pub test_predictions: Vec<StageLabel>,
    pub explain_tree: DecisionTreeModel,
    pub dot: String,
    pub split_gain: ImportanceReport,
    pub permutation: ImportanceReport,
}

pub fn finish(prepared: &Prepared, classifier_config: &ClassifierConfig) -> Result<Outcome> {
    let config = &prepared.config;
    let names = &prepared.feature_names;
    let classifier = fit_classifier(classifier_config, config.seed, prepared.s_train.view(), &prepared.y_train, names)?;
    let (test_probabilities, test_predictions, report) =
        evaluate_stage(&classifier, prepared.s_test.view(), &prepared.y_test)?;
    let baseline_report = baseline_report(&prepared.baseline_probabilities, &prepared.y_test)?;
    let explanation = explain_stage(
        config,
        classifier_config,
        &classifier,
        names,
        prepared.s_train.view(),
        &prepared.y_train,
        prepared.s_test.view(),
        &prepared.y_test,
    )?;
    let bundle = assemble_bundle(BundleParts {
        config,
        classifier_config,
        descriptors: &prepared.descriptors,
        selection: &prepared.selection,
        embedder: &prepared.embedder,
        map: &prepared.map,
        classifier,
        h_train: prepared.h_train.view(),
    })?;
    Ok(Outcome {
        bundle,
        report,
        baseline_report,
        test_probabilities,
        test_predictions,
        explain_tree: explanation.tree,
        dot: explanation.dot,
        split_gain: explanation.split_gain,
        permutation: explanation.permutation,
    })
}

pub fn run_pipeline(config: &RunConfig) -> Result<Outcome> {
    finish(&prepare(config)?, &config.classifier)
}

/// Matrix as CSV with named columns and an optional label column.
pub fn matrix_csv(m: ArrayView2<f64>, names: &[String], labels: Option<&[StageLabel]>) -> String {
    let mut out = names.iter().map(|n| csv_field(n)).collect::<Vec<_>>().join(",");
    if labels.is_some() {
        out.push_str(",stage");
    }
    out.push('\n');
    for (i, row) in m.axis_iter(Axis(0)).enumerate() {
        let fields: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&fields.join(","));
        if let Some(l) = labels {
            out.push(',');
            out.push_str(l[i].as_str());
        }
        out.push('\n');
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Kept features with their ANOVA F statistics, best first.
pub fn selection_csv(selection: &SelectionMask, descriptors: &[FeatureDescriptor]) -> String {
    let mut out = String::from("rank,column,feature,f_stat\n");
    for (rank, &j) in selection.kept_indices.iter().enumerate() {
        out.push_str(&format!("{},{},{},{}\n", rank + 1, j, csv_field(&descriptors[j].name), selection.f_stats[j]));
    }
    out
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(io_error(&path))
}

pub const BUNDLE_FILE: &str = "bundle.serf";

/// Write the prepared-stage artifacts: loss trace, selection and representative matrices.
pub fn write_prepared(prepared: &Prepared, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_error(dir))?;
    write(dir, "split.txt", format!("train {}\ntest {}\n", prepared.train_subjects.join(" "), prepared.test_subjects.join(" ")))?;
    write(dir, "loss_trace.csv", prepared.loss_trace.to_csv())?;
    write(dir, "selection.csv", selection_csv(&prepared.selection, &prepared.descriptors))?;
    write(
        dir,
        "representative_test.csv",
        matrix_csv(prepared.s_test.view(), &prepared.feature_names, Some(&prepared.y_test)),
    )?;
    write(dir, "baseline_report.txt", baseline_text(prepared)?)?;
    Ok(())
}

fn baseline_text(prepared: &Prepared) -> Result<String> {
    Ok(baseline_report(&prepared.baseline_probabilities, &prepared.y_test)?.to_text())
}

/// Write the classifier-stage artifacts: bundle, reports, DOT and importances.
pub fn write_outcome(outcome: &Outcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_error(dir))?;
    write(dir, BUNDLE_FILE, outcome.bundle.to_bytes())?;
    write(dir, "report.txt", outcome.report.to_text())?;
    write(dir, "report.csv", format!("{}\n{}\n", EvalReport::CSV_HEADER, outcome.report.csv_row()))?;
    write(dir, "baseline_report.csv", format!("{}\n{}\n", EvalReport::CSV_HEADER, outcome.baseline_report.csv_row()))?;
    write(dir, "tree.dot", &outcome.dot)?;
    write(dir, "importance_split_gain.csv", outcome.split_gain.to_csv())?;
    write(dir, "importance_split_gain.txt", outcome.split_gain.to_text())?;
    write(dir, "importance_permutation.csv", outcome.permutation.to_csv())?;
    write(dir, "importance_permutation.txt", outcome.permutation.to_text())?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Scoring

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedStep {
    pub feature: String,
    pub threshold: f64,
    pub value: f64,
    pub left: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Attribution {
    /// Splits the epoch passed through, root first.
    DecisionPath(Vec<NamedStep>),
    /// Features with the largest contribution to the predicted stage.
    TopFeatures(Vec<(String, f64)>),
}

impl Attribution {
    pub fn to_text(&self) -> String {
        match self {
            Attribution::DecisionPath(steps) => steps
                .iter()
                .map(|s| format!("{} {} {:.4}", s.feature, if s.left { "<=" } else { ">" }, s.threshold))
                .collect::<Vec<_>>()
                .join("; "),
            Attribution::TopFeatures(f) => {
                f.iter().map(|(n, v)| format!("{n} ({v:.4})")).collect::<Vec<_>>().join("; ")
            }
        }
    }
}

pub const TOP_ATTRIBUTIONS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreResult {
    pub epoch_seconds: f64,
    pub hypnogram: Vec<StageLabel>,
    pub probabilities: Array2<f64>,
    pub attributions: Vec<Attribution>,
}

impl ScoreResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,onset,stage,p_wake,p_n1,p_n2,p_n3,p_rem,attribution\n");
        for (i, stage) in self.hypnogram.iter().enumerate() {
            let p: Vec<String> = self.probabilities.row(i).iter().map(|v| format!("{v:.6}")).collect();
            out.push_str(&format!(
                "{i},{},{},{},{}\n",
                i as f64 * self.epoch_seconds,
                stage.as_str(),
                p.join(","),
                csv_field(&self.attributions[i].to_text())
            ));
        }
        out
    }
}

fn top_k(scores: Vec<f64>, names: &[String]) -> Vec<(String, f64)> {
    let mut order: Vec<usize> = (0..scores.len()).filter(|&j| scores[j] != 0.0).collect();
    order.sort_by(|&a, &b| scores[b].abs().total_cmp(&scores[a].abs()).then(a.cmp(&b)));
    order.truncate(TOP_ATTRIBUTIONS);
    order.into_iter().map(|j| (names[j].clone(), scores[j])).collect()
}

/// Split gain of the nodes an epoch visits in the predicted stage's trees.
fn ensemble_path_gains(model: &BoostedEnsemble, row: &[f64], stage: usize) -> Vec<f64> {
    let mut acc = vec![0.0; model.num_features];
    for round in &model.rounds {
        let mut node = &round.trees[stage].root;
        while let (Some(s), Some(c)) = (&node.split, &node.children) {
            acc[s.feature] += round.weight * node.gain;
            node = if row[s.feature] <= s.threshold { &c.0 } else { &c.1 };
        }
    }
    acc
}

/// Per-epoch attributions of a classifier's predictions on `s`.
pub fn attributions(classifier: &Classifier, s: ArrayView2<f64>, predicted: &[StageLabel], names: &[String]) -> Vec<Attribution> {
    (0..s.nrows())
        .into_par_iter()
        .map(|i| {
            let row = s.row(i).to_vec();
            let stage = predicted[i];
            match classifier {
                Classifier::Tree(t) => Attribution::DecisionPath(
                    decision_path(t, &row)
                        .into_iter()
                        .map(|p| NamedStep { feature: names[p.feature].clone(), threshold: p.threshold, value: p.value, left: p.left })
                        .collect(),
                ),
                Classifier::Boosted(b) => Attribution::TopFeatures(top_k(ensemble_path_gains(b, &row, stage.index()), names)),
                Classifier::Logistic(m) => {
                    let k = stage.index();
                    let contrib = (0..row.len()).map(|j| m.weights[(j, k)] * row[j]).collect();
                    Attribution::TopFeatures(top_k(contrib, names))
                }
            }
        })
        .collect()
}

/// Stage a recording through the frozen pipeline of `bundle`.
pub fn score_recording(bundle: &ModelBundle<RunConfig>, recording: &Recording) -> Result<ScoreResult> {
    let config = &bundle.config;
    let epochs = ingest_recording(recording, None, &bundle.channel_map, config.epoch_seconds, config.sampling_rate)?;
    let h = extract_embeddings(&bundle.embedder, &epochs).map_err(at("score"))?;
    let s = bundle.map.represent(h.values.view()).map_err(at("score"))?;
    let probabilities = bundle.classifier.predict_proba(s.view()).map_err(at("score"))?;
    let hypnogram = predictions(&probabilities);
    let attributions = attributions(&bundle.classifier, s.view(), &hypnogram, &bundle.feature_names());
    Ok(ScoreResult { epoch_seconds: config.epoch_seconds, hypnogram, probabilities, attributions })
}

/// Load an EDF file and score it.
pub fn score_path(bundle: &ModelBundle<RunConfig>, path: &Path) -> Result<ScoreResult> {
    let bytes = std::fs::read(path).map_err(io_error(path))?;
    let recording = parse_edf(&bytes).map_err(at("score"))?;
    score_recording(bundle, &recording)
}

/// Stage counts of a hypnogram keyed by stage name.
pub fn hypnogram_counts(h: &[StageLabel]) -> BTreeMap<&'static str, usize> {
    let mut out = BTreeMap::new();
    for s in StageLabel::ALL {
        out.insert(s.as_str(), h.iter().filter(|&&x| x == s).count());
    }
    out
}
