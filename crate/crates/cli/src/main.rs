use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use mimalloc::MiMalloc;
use serf_core::artifacts::{self, MatrixArtifact};
use serf_core::bundle::{Archive, ModelBundle};
use serf_core::embednet::extract_embeddings;
use serf_core::evalmetrics::EvalReport;
use serf_core::featurex::extract_features;
use serf_core::pipeline::{
    self as pl, at, BundleParts, ClassifierKind, ConfigSource, DataConfig, FeatureSides, PipelineError, RecordingEntry,
    RunConfig, SubjectSource,
};
use serf_core::psg_io::{format_stage_labels, write_edf, LabelSchema};

#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

#[derive(Parser)]
#[command(name = "serf", version, about = "Interpretable sleep staging from expert features and learned embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Working directory for artifacts; defaults to the configured output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the classifier.
    #[arg(long, value_parser = parse_kind)]
    classifier: Option<ClassifierKind>,
}

fn parse_kind(s: &str) -> std::result::Result<ClassifierKind, String> {
    ClassifierKind::parse(s).ok_or_else(|| format!("unknown classifier `{s}` (expected dt, gb, xg or lr)"))
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic recordings as EDF files with hypnogram sidecars and a
    /// configuration that reads them.
    Synth(Common),
    /// Split subjects and cut recordings into labeled epochs.
    Ingest(Common),
    /// Expert-defined features of the ingested epochs.
    Features(Common),
    /// ANOVA selection on the training features.
    Select(Common),
    /// Train the CNN-BiLSTM embedder on the training epochs.
    TrainEmbed(Common),
    /// Extract embeddings of all epochs.
    Embed(Common),
    /// Fit the ridge map from embeddings to standardized features.
    FitMap(Common),
    /// Representative feature matrices through the fitted map.
    Represent(Common),
    /// Train the classifier on representative features and write the bundle.
    TrainClf(Common),
    /// Evaluate the classifier on the test subjects.
    Evaluate(Common),
    /// Export the explanation tree and feature importances.
    Explain(Common),
    /// Run every stage in memory.
    Pipeline(Common),
    /// Stage an EDF recording with a trained bundle.
    Score {
        /// Model bundle.
        #[arg(long)]
        bundle: PathBuf,
        /// EDF recording.
        recording: PathBuf,
        /// Output CSV; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Ctx {
    config: RunConfig,
    dir: PathBuf,
}

impl Ctx {
    fn new(c: &Common) -> Result<Self> {
        let mut config = RunConfig::load(&c.config)?;
        if let Some(seed) = c.seed {
            config.seed = seed;
        }
        if let Some(k) = c.classifier {
            config.classifier.kind = k;
        }
        if let Some(out) = &c.out {
            config.output_dir = out.clone();
        }
        config.validate()?;
        let dir = config.output_dir.clone();
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Ctx { config, dir })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn load(&self, name: &str) -> Result<Archive> {
        let path = self.path(name);
        artifacts::load(&path).map_err(at("load")).with_context(|| format!("reading {}", path.display()))
    }

    fn matrix(&self, name: &str, kind: &str) -> Result<MatrixArtifact> {
        Ok(MatrixArtifact::from_archive(&self.load(name)?, kind).map_err(at("load"))?)
    }

    fn save(&self, name: &str, archive: &Archive) -> Result<()> {
        Ok(archive.save(&self.path(name)).map_err(at("save"))?)
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.path(name);
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
    }

    fn split_sides(&self) -> [(&'static str, &'static str); 2] {
        [("train", "_train.serf"), ("test", "_test.serf")]
    }
}

fn synth(c: &Common) -> Result<()> {
    let ctx = Ctx::new(c)?;
    if !matches!(ctx.config.data, DataConfig::Synth { .. }) {
        return Err(PipelineError::Config("synth needs a config with source = \"synth\"".into()).into());
    }
    let data_dir = ctx.path("recordings");
    std::fs::create_dir_all(&data_dir)?;
    let source = ConfigSource::new(&ctx.config);
    let mut entries = Vec::new();
    for (i, id) in source.subject_ids().iter().enumerate() {
        let (rec, ann) = source.load(i)?;
        let edf = write_edf(&rec).map_err(at("synth"))?;
        let psg = format!("{id}.edf");
        let labels = format!("{id}.csv");
        std::fs::write(data_dir.join(&psg), edf)?;
        std::fs::write(data_dir.join(&labels), format_stage_labels(&ann))?;
        entries.push(RecordingEntry { psg: psg.into(), labels: labels.into(), subject: Some(id.clone()) });
    }
    let edf_config = RunConfig {
        output_dir: PathBuf::from("../serf-out"),
        channel_map: Some(ctx.config.resolved_channel_map()?),
        channel_preset: None,
        data: DataConfig::Edf { recordings: entries, schema: LabelSchema::Aasm },
        ..ctx.config.clone()
    };
    std::fs::write(data_dir.join("config.toml"), edf_config.to_toml()?)?;
    log::info!("synth: wrote {} recordings to {}", source.subject_ids().len(), data_dir.display());
    Ok(())
}

fn ingest(c: &Common) -> Result<()> {
    let ctx = Ctx::new(c)?;
    let config = &ctx.config;
    let source = ConfigSource::new(config);
    let (train, test) =
        pl::split_subjects(&source.subject_ids(), config.split_ratio, pl::derived_seed(config.seed, pl::SPLIT_SEED_OFFSET))?;
    let (tr, te) = pl::ingest_split(config, &source, &train, FeatureSides::None)?;
    ctx.write("split.txt", format!("train {}\ntest {}\n", train.join(" "), test.join(" ")))?;
    ctx.save("epochs_train.serf", &artifacts::epochs_archive(&tr.epochs))?;
    ctx.save("epochs_test.serf", &artifacts::epochs_archive(&te.epochs))?;
    Ok(())
}

fn features(c: &Common) -> Result<()> {
    let ctx = Ctx::new(c)?;
    let map = ctx.config.resolved_channel_map()?;
    for (side, suffix) in ctx.split_sides() {
        let epochs = artifacts::epochs_from(&ctx.load(&format!("epochs{suffix}"))?).map_err(at("load"))?;
        let f = extract_features(&epochs, &map).map_err(at("features"))?;
        let m = MatrixArtifact::features(&f, epochs.labels(), epochs.subject_ids());
        ctx.save(&format!("features{suffix}"), &m.to_archive("features"))?;
        log::info!("features: {} {side} epochs × {} features", f.num_epochs(), f.num_features());
    }
    Ok(())
}

fn select(c: &Common) -> Result<()> {
    let ctx = Ctx::new(c)?;
    let train = ctx.matrix("features_train.serf", "features")?;
    let selection = pl::select_stage(&train.feature_matrix().map_err(at("load"))?, &train.labels)?;
    ctx.save("selection.serf", &artifacts::selection_archive(&selection))?;
    ctx.write("selection.csv", pl::selection_csv(&selection, train.descriptors.as_deref().unwrap_or_default()))
}

fn train_embed(c: &Common) -> Result<()> {
    let ctx = Ctx::new(c)?;
    let epochs = artifacts::epochs_from(&ctx.load("epochs_train.serf")?).map_err(at("load"))?;
    let (model, trace) = pl::train_embedder_stage(&ctx.config, &epochs)?;
    ctx.save("embedder.serf", &artifacts::embedder_archive(&model))?;
    ctx.write("loss_trace.csv", trace.to_csv())
}

fn embed(c: &Common) -> Result<()> {
    let ctx = Ctx::new(c)?;
    let model = artifacts::embedder_from(&ctx.load("embedder.serf")?).map_err(at("load"))?;
    for (_, suffix) in ctx.split_sides() {
        let epochs = artifacts::epochs_from(&ctx.load(&format!("epochs{suffix}"))?).map_err(at("load"))?;
        let h = extract_embeddings(&model, &epochs).map_err(at("embed"))?;
        let m = MatrixArtifact {
            columns: (0..h.values.ncols()).map(|j| format!("h{j}")).collect(),
            descriptors: None,
            labels: epochs.labels().to_vec(),
            subject_ids: h.subject_ids,
            values: h.values,
            probabilities: Some(h.probabilities),
        };
        ctx.save(&format!("embeddings{suffix}"), &m.to_archive("embeddings"))?;
    }
    Ok(())
}

fn fit_map(c: &Common) -> Result<()> {
    let ctx = Ctx::new(c)?;
    let features = ctx.matrix("features_train.serf", "features")?;
    let h = ctx.matrix("embeddings_train.serf", "embeddings")?;
    let selection = artifacts::selection_from(&ctx.load("selection.serf")?).map_err(at("load"))?;
    let map = pl::fit_map_stage(ctx.config.lambda, &selection, &features.feature_matrix().map_err(at("load"))?, h.view())?;
    ctx.save("map.serf", &artifacts::map_archive(&map))
}

fn represent(c: &Common) -> Result<()> {
    let ctx = Ctx::new(c)?;
    let map = artifacts::map_from(&ctx.load("map.serf")?).map_err(at("load"))?;
    let selection = artifacts::selection_from(&ctx.load("selection.serf")?).map_err(at("load"))?;
    let features = ctx.matrix("features_train.serf", "features")?;
    let names = pl::selected_names(&selection, features.descriptors.as_deref().unwrap_or_default());
    for (side, suffix) in ctx.split_sides() {
        let h = ctx.matrix(&format!("embeddings{suffix}"), "embeddings")?;
        let s = map.represent(h.view()).map_err(at("represent"))?;
        ctx.write(&format!("representative_{side}.csv"), pl::matrix_csv(s.view(), &names, Some(&h.labels)))?;
        let m = MatrixArtifact {
            columns: names.clone(),
            descriptors: None,
            labels: h.labels,
            subject_ids: h.subject_ids,
            values: s,
            probabilities: None,
        };
        ctx.save(&format!("representative{suffix}"), &m.to_archive("representative"))?;
    }
    Ok(())
}

fn train_clf(c: &Common) -> Result<()> {
    let ctx = Ctx::new(c)?;
    let config = &ctx.config;
    let s = ctx.matrix("representative_train.serf", "representative")?;
    let classifier = pl::fit_classifier(&config.classifier, config.seed, s.view(), &s.labels, &s.columns)?;
    ctx.save("classifier.serf", &artifacts::classifier_archive(&classifier))?;
    let features = ctx.matrix("features_train.serf", "features")?;
    let h = ctx.matrix("embeddings_train.serf", "embeddings")?;
    let bundle = pl::assemble_bundle(BundleParts {
        config,
        classifier_config: &config.classifier,
        descriptors: features.descriptors.as_deref().unwrap_or_default(),
        selection: &artifacts::selection_from(&ctx.load("selection.serf")?).map_err(at("load"))?,
        embedder: &artifacts::embedder_from(&ctx.load("embedder.serf")?).map_err(at("load"))?,
        map: &artifacts::map_from(&ctx.load("map.serf")?).map_err(at("load"))?,
        classifier,
        h_train: h.view(),
    })?;
    ctx.write(pl::BUNDLE_FILE, bundle.to_bytes())
}

fn write_report(ctx: &Ctx, stem: &str, report: &EvalReport) -> Result<()> {
    ctx.write(&format!("{stem}.txt"), report.to_text())?;
    ctx.write(&format!("{stem}.csv"), format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row()))
}

fn evaluate(c: &Common) -> Result<()> {
    let ctx = Ctx::new(c)?;
    let classifier = artifacts::classifier_from(&ctx.load("classifier.serf")?).map_err(at("load"))?;
    let s = ctx.matrix("representative_test.serf", "representative")?;
    let (_, _, report) = pl::evaluate_stage(&classifier, s.view(), &s.labels)?;
    write_report(&ctx, "report", &report)?;
    let h = ctx.matrix("embeddings_test.serf", "embeddings")?;
    if let Some(p) = &h.probabilities {
        write_report(&ctx, "baseline_report", &pl::baseline_report(p, &h.labels)?)?;
    }
    print!("{}", report.to_text());
    Ok(())
}

fn explain(c: &Common) -> Result<()> {
    let ctx = Ctx::new(c)?;
    let classifier = artifacts::classifier_from(&ctx.load("classifier.serf")?).map_err(at("load"))?;
    let train = ctx.matrix("representative_train.serf", "representative")?;
    let test = ctx.matrix("representative_test.serf", "representative")?;
    let e = pl::explain_stage(
        &ctx.config,
        &ctx.config.classifier,
        &classifier,
        &train.columns,
        train.view(),
        &train.labels,
        test.view(),
        &test.labels,
    )?;
    ctx.write("tree.dot", &e.dot)?;
    ctx.write("importance_split_gain.csv", e.split_gain.to_csv())?;
    ctx.write("importance_split_gain.txt", e.split_gain.to_text())?;
    ctx.write("importance_permutation.csv", e.permutation.to_csv())?;
    ctx.write("importance_permutation.txt", e.permutation.to_text())
}

fn pipeline(c: &Common) -> Result<()> {
    let ctx = Ctx::new(c)?;
    let prepared = pl::prepare(&ctx.config)?;
    pl::write_prepared(&prepared, &ctx.dir)?;
    let outcome = pl::finish(&prepared, &ctx.config.classifier)?;
    pl::write_outcome(&outcome, &ctx.dir)?;
    print!("{}", outcome.report.to_text());
    Ok(())
}

fn score(bundle: &Path, recording: &Path, out: Option<&Path>) -> Result<()> {
    let bundle: ModelBundle<RunConfig> =
        ModelBundle::load(bundle).map_err(at("load")).with_context(|| format!("reading {}", bundle.display()))?;
    let result = pl::score_path(&bundle, recording)?;
    let csv = result.to_csv();
    match out {
        Some(p) => std::fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(c) => synth(c),
        Command::Ingest(c) => ingest(c),
        Command::Features(c) => features(c),
        Command::Select(c) => select(c),
        Command::TrainEmbed(c) => train_embed(c),
        Command::Embed(c) => embed(c),
        Command::FitMap(c) => fit_map(c),
        Command::Represent(c) => represent(c),
        Command::TrainClf(c) => train_clf(c),
        Command::Evaluate(c) => evaluate(c),
        Command::Explain(c) => explain(c),
        Command::Pipeline(c) => pipeline(c),
        Command::Score { bundle, recording, out } => score(bundle, recording, out.as_deref()),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.downcast_ref::<PipelineError>().map_or(3, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Ok(v) = std::env::var("SERF_THREADS") {
        match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = pl::set_worker_threads(n) {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            }
            _ => {
                eprintln!("error: SERF_THREADS must be a positive integer, got `{v}`");
                return ExitCode::from(2);
            }
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
