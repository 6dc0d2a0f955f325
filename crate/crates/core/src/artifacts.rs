//! Intermediate artifacts exchanged between pipeline stages, stored as
//! checksummed archives.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::bundle::{embedder_blocks, matrix_block, Archive, Block, BundleError, EmbedderManifest, Result};
use crate::embednet::EmbedderModel;
use crate::featsel::SelectionMask;
use crate::featurex::{FeatureDescriptor, FeatureMatrix};
use crate::linmap::LinearMap;
use crate::psg_io::EpochSet;
use crate::simpleclf::Classifier;
use crate::stage::{StageLabel, NUM_STAGES};

#[derive(Serialize, Deserialize)]
struct Manifest<T> {
    kind: String,
    #[serde(flatten)]
    body: T,
}

fn archive<T: Serialize>(kind: &str, body: T) -> Archive {
    let manifest = Manifest { kind: kind.to_string(), body };
    Archive { manifest: serde_json::to_string_pretty(&manifest).expect("manifest serialises"), blocks: BTreeMap::new() }
}

fn manifest<T: for<'de> Deserialize<'de>>(archive: &Archive, kind: &str) -> Result<T> {
    let m: Manifest<T> = serde_json::from_str(&archive.manifest).map_err(|e| BundleError::Manifest(e.to_string()))?;
    if m.kind != kind {
        return Err(BundleError::Manifest(format!("expected a `{kind}` archive, found `{}`", m.kind)));
    }
    Ok(m.body)
}

fn label_block(labels: &[StageLabel]) -> Block {
    Block::U64(labels.iter().map(|s| s.index() as u64).collect())
}

fn labels_from(values: &[u64]) -> Result<Vec<StageLabel>> {
    values
        .iter()
        .map(|&k| StageLabel::from_index(k as usize).ok_or_else(|| BundleError::CorruptBundle(format!("stage index {k}"))))
        .collect()
}

fn matrix(values: &[f64], rows: usize, cols: usize, name: &str) -> Result<Array2<f64>> {
    Array2::from_shape_vec((rows, cols), values.to_vec())
        .map_err(|_| BundleError::CorruptBundle(format!("block {name} does not hold {rows}×{cols} values")))
}

// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct EpochsManifest {
    channel_labels: Vec<String>,
    rate: f64,
    epoch_seconds: f64,
    subject_ids: Vec<String>,
}

pub fn epochs_archive(epochs: &EpochSet) -> Archive {
    let mut a = archive(
        "epochs",
        EpochsManifest {
            channel_labels: epochs.channel_labels().to_vec(),
            rate: epochs.rate(),
            epoch_seconds: epochs.epoch_seconds(),
            subject_ids: epochs.subject_ids().to_vec(),
        },
    );
    a.insert("data", Block::F32(epochs.data().to_vec()));
    a.insert("labels", label_block(epochs.labels()));
    a
}

pub fn epochs_from(archive: &Archive) -> Result<EpochSet> {
    let m: EpochsManifest = manifest(archive, "epochs")?;
    let labels = labels_from(archive.u64s("labels")?)?;
    EpochSet::from_parts(archive.f32s("data")?.to_vec(), labels, m.channel_labels, m.rate, m.epoch_seconds, m.subject_ids)
        .map_err(|e| BundleError::CorruptBundle(e.to_string()))
}

// ---------------------------------------------------------------------------

/// A row-labeled matrix: features, embeddings or representative features.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixArtifact {
    pub columns: Vec<String>,
    /// Present for feature matrices.
    pub descriptors: Option<Vec<FeatureDescriptor>>,
    pub labels: Vec<StageLabel>,
    pub subject_ids: Vec<String>,
    pub values: Array2<f64>,
    /// Per-row stage probabilities (embedder output).
    pub probabilities: Option<Array2<f64>>,
}

#[derive(Serialize, Deserialize)]
struct MatrixManifest {
    columns: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    descriptors: Option<Vec<FeatureDescriptor>>,
    subject_ids: Vec<String>,
    rows: usize,
    has_probabilities: bool,
}

impl MatrixArtifact {
    pub fn features(features: &FeatureMatrix, epochs_labels: &[StageLabel], subject_ids: &[String]) -> Self {
        MatrixArtifact {
            columns: features.descriptors().iter().map(|d| d.name.clone()).collect(),
            descriptors: Some(features.descriptors().to_vec()),
            labels: epochs_labels.to_vec(),
            subject_ids: subject_ids.to_vec(),
            values: features.values().clone(),
            probabilities: None,
        }
    }

    pub fn feature_matrix(&self) -> Result<FeatureMatrix> {
        let d = self.descriptors.clone().ok_or_else(|| BundleError::Manifest("matrix carries no feature descriptors".into()))?;
        FeatureMatrix::new(self.values.clone(), d).map_err(|e| BundleError::CorruptBundle(e.to_string()))
    }

    pub fn to_archive(&self, kind: &str) -> Archive {
        let mut a = archive(
            kind,
            MatrixManifest {
                columns: self.columns.clone(),
                descriptors: self.descriptors.clone(),
                subject_ids: self.subject_ids.clone(),
                rows: self.values.nrows(),
                has_probabilities: self.probabilities.is_some(),
            },
        );
        a.insert("values", matrix_block(self.values.view()));
        a.insert("labels", label_block(&self.labels));
        if let Some(p) = &self.probabilities {
            a.insert("probabilities", matrix_block(p.view()));
        }
        a
    }

    pub fn from_archive(archive: &Archive, kind: &str) -> Result<Self> {
        let m: MatrixManifest = manifest(archive, kind)?;
        let values = matrix(archive.f64s("values")?, m.rows, m.columns.len(), "values")?;
        let labels = labels_from(archive.u64s("labels")?)?;
        if labels.len() != m.rows || m.subject_ids.len() != m.rows {
            return Err(BundleError::CorruptBundle("row metadata does not match the matrix".into()));
        }
        let probabilities = if m.has_probabilities {
            Some(matrix(archive.f64s("probabilities")?, m.rows, NUM_STAGES, "probabilities")?)
        } else {
            None
        };
        Ok(MatrixArtifact { columns: m.columns, descriptors: m.descriptors, labels, subject_ids: m.subject_ids, values, probabilities })
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }
}

// ---------------------------------------------------------------------------

pub fn selection_archive(selection: &SelectionMask) -> Archive {
    let mut a = archive("selection", SelectionMask { f_stats: Vec::new(), ..selection.clone() });
    a.insert("f_stats", Block::F64(selection.f_stats.clone()));
    a
}

pub fn selection_from(archive: &Archive) -> Result<SelectionMask> {
    let mut s: SelectionMask = manifest(archive, "selection")?;
    s.f_stats = archive.f64s("f_stats")?.to_vec();
    Ok(s)
}

pub fn embedder_archive(model: &EmbedderModel) -> Archive {
    let mut a = archive("embedder", EmbedderManifest::of(model));
    embedder_blocks(model, &mut a);
    a
}

pub fn embedder_from(archive: &Archive) -> Result<EmbedderModel> {
    let m: EmbedderManifest = manifest(archive, "embedder")?;
    m.restore(archive)
}

#[derive(Serialize, Deserialize)]
struct MapManifest {
    map: LinearMap,
    rows: usize,
    cols: usize,
}

pub fn map_archive(map: &LinearMap) -> Archive {
    let mut a = archive(
        "map",
        MapManifest { map: LinearMap { t: Array2::zeros((0, 0)), ..map.clone() }, rows: map.t.nrows(), cols: map.t.ncols() },
    );
    a.insert("t", matrix_block(map.t.view()));
    a
}

pub fn map_from(archive: &Archive) -> Result<LinearMap> {
    let m: MapManifest = manifest(archive, "map")?;
    let mut map = m.map;
    map.t = matrix(archive.f64s("t")?, m.rows, m.cols, "t")?;
    Ok(map)
}

#[derive(Serialize, Deserialize)]
struct ClassifierManifest {
    classifier: Classifier,
}

pub fn classifier_archive(classifier: &Classifier) -> Archive {
    archive("classifier", ClassifierManifest { classifier: classifier.clone() })
}

pub fn classifier_from(archive: &Archive) -> Result<Classifier> {
    Ok(manifest::<ClassifierManifest>(archive, "classifier")?.classifier)
}

pub fn load(path: &Path) -> Result<Archive> {
    Archive::load(path)
}
