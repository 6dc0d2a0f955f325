use serf_core::bundle::{BundleError, ModelBundle};
use serf_core::pipeline::{
    derived_seed, finish, prepare, prepare_with, score_recording, split_subjects, Attribution, ClassifierKind,
    ConfigSource, Outcome, PipelineError, Result, RunConfig, StageError, SubjectSource, SPLIT_SEED_OFFSET,
};
use serf_core::psg_io::{Annotation, PsgError, Recording};
use serf_core::synthgen::{default_channel_labels, synth_recording, RecipeSet};
use serf_core::StageLabel;

fn tiny_config(seed: u64) -> RunConfig {
    let mut c = RunConfig::synthetic(6, 40, seed);
    c.embedder.conv_out_channels = vec![4, 4, 4];
    c.embedder.conv_kernels = vec![41, 5, 5];
    c.embedder.lstm_hidden = 4;
    c.embedder.learning_rate = 1e-3;
    c.embedder.train_epochs = 2;
    c.embedder.max_sequence = 20;
    c.classifier.boost.rounds = 10;
    c.importance.repeats = 2;
    c
}

fn run(config: &RunConfig) -> Outcome {
    finish(&prepare(config).unwrap(), &config.classifier).unwrap()
}

#[test]
fn smoke_run_writes_consistent_artifacts() {
    let config = tiny_config(1);
    let outcome = run(&config);
    assert_eq!(outcome.report.n_epochs, 40);
    assert!(outcome.dot.starts_with("digraph tree {"));
    assert_eq!(outcome.split_gain.entries.len(), 36);
    assert!(outcome.bundle.verify());

    let bytes = outcome.bundle.to_bytes();
    let back: ModelBundle<RunConfig> = ModelBundle::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert!(back.verify());
    let p = back.classify_embeddings(back.validation.embeddings.view()).unwrap();
    let q = outcome.bundle.classify_embeddings(outcome.bundle.validation.embeddings.view()).unwrap();
    assert!(p.iter().zip(q.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));

    let dir = tempfile::tempdir().unwrap();
    serf_core::pipeline::write_outcome(&outcome, dir.path()).unwrap();
    let loaded: ModelBundle<RunConfig> = ModelBundle::load(&dir.path().join("bundle.serf")).unwrap();
    assert_eq!(loaded.to_bytes(), bytes);
    let truncated = &bytes[..bytes.len() - 10];
    assert!(matches!(ModelBundle::<RunConfig>::from_bytes(truncated), Err(BundleError::CorruptBundle(_))));
}

#[test]
fn rerun_gives_identical_reports_and_bundles() {
    let config = tiny_config(2);
    let a = run(&config);
    let b = run(&config);
    assert_eq!(a.report.to_text(), b.report.to_text());
    assert_eq!(a.report.csv_row(), b.report.csv_row());
    assert_eq!(a.bundle.to_bytes(), b.bundle.to_bytes());
    assert_eq!(a.dot, b.dot);
    assert_eq!(a.permutation.to_csv(), b.permutation.to_csv());
}

#[test]
fn thread_count_does_not_change_outputs() {
    let config = tiny_config(3);
    let in_pool = |n: usize| {
        rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap().install(|| run(&config))
    };
    let one = in_pool(1);
    let three = in_pool(3);
    assert_eq!(one.bundle.to_bytes(), three.bundle.to_bytes());
    assert_eq!(one.report.to_text(), three.report.to_text());
    assert_eq!(one.permutation.to_csv(), three.permutation.to_csv());
}

/// Synthetic subjects with the test subjects' signals scaled.
struct Perturbed<'a> {
    inner: ConfigSource<'a>,
    test: Vec<String>,
}

impl SubjectSource for Perturbed<'_> {
    fn subject_ids(&self) -> Vec<String> {
        self.inner.subject_ids()
    }

    fn load(&self, index: usize) -> Result<(Recording, Vec<Annotation>)> {
        let (mut rec, ann) = self.inner.load(index)?;
        if self.test.contains(&rec.id) {
            for ch in &mut rec.channels {
                for (i, v) in ch.samples.iter_mut().enumerate() {
                    *v = 3.0 * *v + (i % 7) as f64;
                }
            }
        }
        Ok((rec, ann))
    }
}

#[test]
fn test_subjects_do_not_influence_the_bundle() {
    let config = tiny_config(4);
    let source = ConfigSource::new(&config);
    let (_, test) =
        split_subjects(&source.subject_ids(), config.split_ratio, derived_seed(config.seed, SPLIT_SEED_OFFSET)).unwrap();
    let clean = finish(&prepare(&config).unwrap(), &config.classifier).unwrap();
    let perturbed_source = Perturbed { inner: ConfigSource::new(&config), test };
    let perturbed = finish(&prepare_with(&config, &perturbed_source).unwrap(), &config.classifier).unwrap();
    assert_eq!(clean.bundle.to_bytes(), perturbed.bundle.to_bytes());
    assert_ne!(clean.test_probabilities, perturbed.test_probabilities);
}

#[test]
fn classifier_kinds_share_prepared_data() {
    let config = tiny_config(5);
    let prepared = prepare(&config).unwrap();
    for kind in [ClassifierKind::Dt, ClassifierKind::Gb, ClassifierKind::Xg, ClassifierKind::Lr] {
        let o = finish(&prepared, &config.classifier.with_kind(kind)).unwrap();
        assert!(o.bundle.verify(), "{kind:?}");
        assert_eq!(o.bundle.config.classifier.kind, kind);
        assert!(o.report.kappa.is_finite());
    }
}

#[test]
fn scoring_is_deterministic_and_checks_channels() {
    let config = tiny_config(6);
    let outcome = run(&config);
    let stages = vec![StageLabel::N2; 6];
    let (rec, _) = synth_recording(&stages, &RecipeSet::default(), &default_channel_labels(), 100.0, 77).unwrap();
    let a = score_recording(&outcome.bundle, &rec).unwrap();
    let b = score_recording(&outcome.bundle, &rec).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.hypnogram.len(), 6);
    assert_eq!(a.probabilities.dim(), (6, 5));
    assert!(a.attributions.iter().all(|t| matches!(t, Attribution::TopFeatures(f) if f.len() <= 5)));
    assert_eq!(a.to_csv().lines().count(), 7);

    let mut dt = config.clone();
    dt.classifier.kind = ClassifierKind::Dt;
    let tree = run(&dt);
    let t = score_recording(&tree.bundle, &rec).unwrap();
    assert!(t.attributions.iter().all(|x| matches!(x, Attribution::DecisionPath(_))));

    let mut missing = rec.clone();
    missing.channels.retain(|c| c.label != "EMG");
    let err = score_recording(&outcome.bundle, &missing).unwrap_err();
    assert!(
        matches!(&err, PipelineError::Stage { source: StageError::Psg(PsgError::ChannelMissing(c)), .. } if c == "EMG"),
        "{err}"
    );
    assert_eq!(err.exit_code(), 3);
}
