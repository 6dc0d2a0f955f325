//! Checksummed archives of named little-endian numeric blocks plus a JSON
//! manifest, and the model bundle stored in one.
//!
//! Layout: magic `SERFARCH`, format version (u32), manifest length (u64),
//! manifest bytes, block count (u64), blocks, then the SHA-256 of everything
//! before it. A block is name length (u32), name, dtype tag (u8), element
//! count (u64) and the elements.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embednet::{init_model, EmbedderConfig, EmbedderModel};
use crate::featsel::SelectionMask;
use crate::featurex::{ChannelMap, FeatureDescriptor};
use crate::linmap::LinearMap;
use crate::simpleclf::{Classifier, StageClassifier};
use crate::stage::{StageLabel, NUM_STAGES};

pub const ARCHIVE_MAGIC: &[u8; 8] = b"SERFARCH";
pub const ARCHIVE_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum BundleError {
    #[error("corrupt bundle: {0}")]
    CorruptBundle(String),
    #[error("bundle version {found} is newer than supported version {supported}")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("bundle is missing block `{0}`")]
    MissingBlock(String),
    #[error("bundle manifest: {0}")]
    Manifest(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, BundleError>;

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    F64(Vec<f64>),
    F32(Vec<f32>),
    U64(Vec<u64>),
}

impl Block {
    fn tag(&self) -> u8 {
        match self {
            Block::F64(_) => 1,
            Block::F32(_) => 2,
            Block::U64(_) => 3,
        }
    }

    fn len(&self) -> usize {
        match self {
            Block::F64(v) => v.len(),
            Block::F32(v) => v.len(),
            Block::U64(v) => v.len(),
        }
    }
}

/// Manifest plus named blocks, serialised in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Archive {
    pub manifest: String,
    pub blocks: BTreeMap<String, Block>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(BundleError::CorruptBundle(format!("unexpected end of data at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn count(&mut self, width: usize) -> Result<usize> {
        let n = self.u64()?;
        let n = usize::try_from(n).map_err(|_| BundleError::CorruptBundle("length overflow".into()))?;
        if n.checked_mul(width).map_or(true, |b| b > self.bytes.len() - self.pos) {
            return Err(BundleError::CorruptBundle(format!("length {n} exceeds remaining data")));
        }
        Ok(n)
    }
}

impl Archive {
    pub fn insert(&mut self, name: impl Into<String>, block: Block) {
        self.blocks.insert(name.into(), block);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(self.manifest.as_bytes());
        out.extend_from_slice(&(self.blocks.len() as u64).to_le_bytes());
        for (name, block) in &self.blocks {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(block.tag());
            out.extend_from_slice(&(block.len() as u64).to_le_bytes());
            match block {
                Block::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Block::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Block::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < ARCHIVE_MAGIC.len() + 4 || &bytes[..8] != ARCHIVE_MAGIC {
            return Err(BundleError::CorruptBundle("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version > ARCHIVE_VERSION {
            return Err(BundleError::VersionMismatch { found: version, supported: ARCHIVE_VERSION });
        }
        if bytes.len() < 12 + DIGEST_LEN {
            return Err(BundleError::CorruptBundle("truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(BundleError::CorruptBundle("checksum mismatch".into()));
        }
        let mut r = Reader { bytes: body, pos: 12 };
        let len = r.count(1)?;
        let manifest = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| BundleError::CorruptBundle("manifest is not UTF-8".into()))?;
        let n_blocks = r.u64()?;
        let mut blocks = BTreeMap::new();
        for _ in 0..n_blocks {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| BundleError::CorruptBundle("block name is not UTF-8".into()))?;
            let tag = r.take(1)?[0];
            let block = match tag {
                1 => {
                    let n = r.count(8)?;
                    Block::F64(r.take(8 * n)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
                }
                2 => {
                    let n = r.count(4)?;
                    Block::F32(r.take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
                }
                3 => {
                    let n = r.count(8)?;
                    Block::U64(r.take(8 * n)?.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
                }
                t => return Err(BundleError::CorruptBundle(format!("unknown block type {t}"))),
            };
            blocks.insert(name, block);
        }
        if r.pos != body.len() {
            return Err(BundleError::CorruptBundle("trailing bytes".into()));
        }
        Ok(Archive { manifest, blocks })
    }

    pub fn f64s(&self, name: &str) -> Result<&[f64]> {
        match self.blocks.get(name) {
            Some(Block::F64(v)) => Ok(v),
            _ => Err(BundleError::MissingBlock(name.into())),
        }
    }

    pub fn f32s(&self, name: &str) -> Result<&[f32]> {
        match self.blocks.get(name) {
            Some(Block::F32(v)) => Ok(v),
            _ => Err(BundleError::MissingBlock(name.into())),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match self.blocks.get(name) {
            Some(Block::U64(v)) => Ok(v),
            _ => Err(BundleError::MissingBlock(name.into())),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|source| BundleError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| BundleError::Io { path: path.display().to_string(), source })?;
        Archive::from_bytes(&bytes)
    }
}

/// Embedder parameters as blocks named `embedder.<param>`.
pub fn embedder_blocks(model: &EmbedderModel, archive: &mut Archive) {
    for (name, values) in model.param_names().into_iter().zip(model.params()) {
        archive.insert(format!("embedder.{name}"), Block::F64(values.clone()));
    }
    for (name, values) in model.buffers() {
        archive.insert(format!("embedder.{name}"), Block::F64(values.clone()));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderManifest {
    pub config: EmbedderConfig,
    pub training: bool,
    pub running_stats: Vec<bool>,
}

impl EmbedderManifest {
    pub fn of(model: &EmbedderModel) -> Self {
        EmbedderManifest {
            config: model.config.clone(),
            training: model.training,
            running_stats: model.norms.iter().map(|n| n.has_running_stats).collect(),
        }
    }

    /// Rebuild the model from the manifest and its blocks.
    pub fn restore(&self, archive: &Archive) -> Result<EmbedderModel> {
        let mut model = init_model(&self.config).map_err(|e| BundleError::Manifest(e.to_string()))?;
        let names = model.param_names();
        for (name, slot) in names.iter().zip(model.params_mut()) {
            let values = archive.f64s(&format!("embedder.{name}"))?;
            if values.len() != slot.len() {
                return Err(BundleError::CorruptBundle(format!("block embedder.{name} has {} values", values.len())));
            }
            slot.copy_from_slice(values);
        }
        for (name, slot) in model.buffers_mut() {
            let values = archive.f64s(&format!("embedder.{name}"))?;
            if values.len() != slot.len() {
                return Err(BundleError::CorruptBundle(format!("block embedder.{name} has {} values", values.len())));
            }
            slot.copy_from_slice(values);
        }
        if self.running_stats.len() != model.norms.len() {
            return Err(BundleError::Manifest("one running-stats flag per batch-norm layer".into()));
        }
        for (norm, &flag) in model.norms.iter_mut().zip(&self.running_stats) {
            norm.has_running_stats = flag;
        }
        model.training = self.training;
        Ok(model)
    }
}

/// Embedding rows kept with a bundle together with the predictions they gave
/// when it was written.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationRows {
    pub embeddings: Array2<f64>,
    pub probabilities: Array2<f64>,
    pub predictions: Vec<StageLabel>,
}

/// Everything needed to score a recording.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle<C> {
    /// The run configuration that produced the bundle.
    pub config: C,
    pub channel_map: ChannelMap,
    /// Full feature catalog before selection.
    pub descriptors: Vec<FeatureDescriptor>,
    pub selection: SelectionMask,
    pub embedder: EmbedderModel,
    /// Carries the feature standardization.
    pub map: LinearMap,
    pub classifier: Classifier,
    pub validation: ValidationRows,
}

#[derive(Serialize, Deserialize)]
struct BundleManifest<K> {
    kind: String,
    config: K,
    channel_map: ChannelMap,
    descriptors: Vec<FeatureDescriptor>,
    selection: SelectionMask,
    embedder: EmbedderManifest,
    map: LinearMap,
    classifier: Classifier,
    validation_rows: usize,
}

const BUNDLE_KIND: &str = "model-bundle";

fn matrix(values: &[f64], rows: usize, cols: usize, name: &str) -> Result<Array2<f64>> {
    Array2::from_shape_vec((rows, cols), values.to_vec())
        .map_err(|_| BundleError::CorruptBundle(format!("block {name} has {} values, expected {rows}×{cols}", values.len())))
}

impl<C: Serialize + for<'de> Deserialize<'de>> ModelBundle<C> {
    pub fn to_archive(&self) -> Archive {
        let manifest = BundleManifest {
            kind: BUNDLE_KIND.into(),
            config: &self.config,
            channel_map: self.channel_map.clone(),
            descriptors: self.descriptors.clone(),
            selection: SelectionMask { f_stats: Vec::new(), ..self.selection.clone() },
            embedder: EmbedderManifest::of(&self.embedder),
            map: LinearMap { t: Array2::zeros((0, 0)), ..self.map.clone() },
            classifier: self.classifier.clone(),
            validation_rows: self.validation.predictions.len(),
        };
        let mut archive = Archive {
            manifest: serde_json::to_string_pretty(&manifest).expect("bundle manifest serialises"),
            blocks: BTreeMap::new(),
        };
        embedder_blocks(&self.embedder, &mut archive);
        archive.insert("selection.f_stats", Block::F64(self.selection.f_stats.clone()));
        archive.insert("map.t", matrix_block(self.map.t.view()));
        archive.insert("map.shape", Block::U64(vec![self.map.t.nrows() as u64, self.map.t.ncols() as u64]));
        let v = &self.validation;
        archive.insert("validation.embeddings", Block::F64(v.embeddings.iter().copied().collect()));
        archive.insert("validation.probabilities", Block::F64(v.probabilities.iter().copied().collect()));
        archive.insert("validation.predictions", Block::U64(v.predictions.iter().map(|s| s.index() as u64).collect()));
        archive
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let manifest: BundleManifest<C> =
            serde_json::from_str(&archive.manifest).map_err(|e| BundleError::Manifest(e.to_string()))?;
        if manifest.kind != BUNDLE_KIND {
            return Err(BundleError::Manifest(format!("archive holds `{}`, not a model bundle", manifest.kind)));
        }
        let embedder = manifest.embedder.restore(archive)?;
        let mut selection = manifest.selection;
        selection.f_stats = archive.f64s("selection.f_stats")?.to_vec();
        let shape = archive.u64s("map.shape")?;
        if shape.len() != 2 {
            return Err(BundleError::CorruptBundle("map.shape".into()));
        }
        let mut map = manifest.map;
        map.t = matrix(archive.f64s("map.t")?, shape[0] as usize, shape[1] as usize, "map.t")?;
        let rows = manifest.validation_rows;
        let d = embedder.embedding_dim();
        let embeddings = matrix(archive.f64s("validation.embeddings")?, rows, d, "validation.embeddings")?;
        let probabilities = matrix(archive.f64s("validation.probabilities")?, rows, NUM_STAGES, "validation.probabilities")?;
        let predictions = archive
            .u64s("validation.predictions")?
            .iter()
            .map(|&k| StageLabel::from_index(k as usize).ok_or_else(|| BundleError::CorruptBundle(format!("stage index {k}"))))
            .collect::<Result<Vec<_>>>()?;
        if predictions.len() != rows {
            return Err(BundleError::CorruptBundle("validation prediction count".into()));
        }
        Ok(ModelBundle {
            config: manifest.config,
            channel_map: manifest.channel_map,
            descriptors: manifest.descriptors,
            selection,
            embedder,
            map,
            classifier: manifest.classifier,
            validation: ValidationRows { embeddings, probabilities, predictions },
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_archive().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_archive(&Archive::from_bytes(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }

    /// Names of the representative features the classifier consumes.
    pub fn feature_names(&self) -> Vec<String> {
        self.selection.kept_indices.iter().map(|&j| self.descriptors[j].name.clone()).collect()
    }

    /// Stage probabilities for embedding rows through the frozen map and classifier.
    pub fn classify_embeddings(&self, embeddings: ArrayView2<f64>) -> std::result::Result<Array2<f64>, String> {
        let s = self.map.represent(embeddings).map_err(|e| e.to_string())?;
        self.classifier.predict_proba(s.view()).map_err(|e| e.to_string())
    }

    /// Re-run the stored validation rows; true when probabilities and
    /// predictions match bit for bit.
    pub fn verify(&self) -> bool {
        let Ok(p) = self.classify_embeddings(self.validation.embeddings.view()) else {
            return false;
        };
        let bits_equal = p.iter().zip(self.validation.probabilities.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
        let preds: Vec<StageLabel> =
            p.rows().into_iter().map(|r| StageLabel::argmax(r.as_slice().expect("rows are contiguous"))).collect();
        bits_equal && p.dim() == self.validation.probabilities.dim() && preds == self.validation.predictions
    }
}

/// Row-major block of a matrix.
pub fn matrix_block(m: ArrayView2<f64>) -> Block {
    Block::F64(m.iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Archive {
        let mut a = Archive { manifest: "{\"kind\":\"test\"}".into(), blocks: BTreeMap::new() };
        a.insert("x", Block::F64(vec![1.5, -0.0, f64::MAX, 1e-310]));
        a.insert("y", Block::F32(vec![2.25, f32::MIN_POSITIVE]));
        a.insert("z", Block::U64(vec![0, u64::MAX]));
        a
    }

    #[test]
    fn round_trip_is_exact() {
        let a = sample();
        let bytes = a.to_bytes();
        let b = Archive::from_bytes(&bytes).unwrap();
        assert_eq!(b.manifest, a.manifest);
        assert_eq!(b.f64s("x").unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   a.f64s("x").unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(b, a);
        assert_eq!(b.to_bytes(), bytes);
    }

    #[test]
    fn truncation_and_tampering_are_corrupt() {
        let bytes = sample().to_bytes();
        for cut in [0, 5, 13, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Archive::from_bytes(&bytes[..cut]), Err(BundleError::CorruptBundle(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[30] ^= 1;
        assert!(matches!(Archive::from_bytes(&flipped), Err(BundleError::CorruptBundle(_))));
    }

    #[test]
    fn newer_version_is_reported() {
        let mut bytes = sample().to_bytes();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        let err = Archive::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, BundleError::VersionMismatch { found: 7, supported: 1 }));
        let msg = err.to_string();
        assert!(msg.contains('7') && msg.contains('1'));
    }

    #[test]
    fn missing_block_is_named() {
        assert!(matches!(sample().f64s("w"), Err(BundleError::MissingBlock(n)) if n == "w"));
        assert!(matches!(sample().f64s("z"), Err(BundleError::MissingBlock(_))));
    }
}
