//! Explanations: annotated decision-tree diagrams in DOT form and ranked
//! feature-importance reports.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::evalmetrics::{f1_scores, kappa, MetricError};
use crate::simpleclf::{BoostedEnsemble, ClfError, Classifier, DecisionTreeModel, RegressionNode, StageClassifier, TreeNode};
use crate::stage::{StageLabel, NUM_STAGES};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum InterpretError {
    #[error("tree node {0} has no training statistics")]
    MissingStats(usize),
    #[error("split-gain importance needs a tree-based model")]
    NotTreeBased,
    #[error("{names} feature names for {features} features")]
    NameMismatch { names: usize, features: usize },
    #[error("permutation importance needs at least 10 rows, got {0}")]
    TooFewRows(usize),
    #[error(transparent)]
    Classifier(#[from] ClfError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub type Result<T> = std::result::Result<T, InterpretError>;

/// Node colours in stage order.
pub const STAGE_COLORS: [(u8, u8, u8); NUM_STAGES] =
    [(0xE6, 0x9F, 0x00), (0x56, 0xB4, 0xE9), (0x00, 0x9E, 0x73), (0x00, 0x72, 0xB2), (0xCC, 0x79, 0xA7)];

/// `v` rounded to `digits` significant digits, positional unless very large
/// or very small.
pub fn format_significant(v: f64, digits: usize) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{:.*}", digits.saturating_sub(1), if v.is_finite() { 0.0 } else { v });
    }
    let exp = v.abs().log10().floor() as i32;
    if !(-4..6).contains(&exp) {
        return format!("{:.*e}", digits - 1, v);
    }
    let mut decimals = (digits as i32 - 1 - exp).max(0) as usize;
    let text = format!("{v:.decimals$}");
    // rounding up can add a digit (9.996 → 10.00)
    if decimals > 0 && text.trim_start_matches('-').parse::<f64>().map_or(false, |r| r >= 10f64.powi(exp + 1)) {
        decimals -= 1;
        return format!("{v:.decimals$}");
    }
    text
}

/// `#RRGGBBAA` fill for a node: majority-stage colour, alpha = purity.
pub fn node_color(majority: StageLabel, purity: f64) -> String {
    let (r, g, b) = STAGE_COLORS[majority.index()];
    let a = (purity.clamp(0.0, 1.0) * 255.0).round() as u8;
    format!("#{r:02X}{g:02X}{b:02X}{a:02X}")
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

fn has_stats(node: &TreeNode) -> bool {
    let total: f64 = node.ratios.iter().sum();
    node.samples > 0 && node.fraction > 0.0 && (total - 1.0).abs() < 1e-6
}

/// Label rows of one node: feature, threshold, share of training data, class
/// ratios, majority stage. Leaves carry the last three.
pub fn node_rows(tree: &DecisionTreeModel, node: &TreeNode) -> Vec<String> {
    let mut rows = Vec::with_capacity(5);
    if let Some(s) = &node.split {
        rows.push(tree.feature_names[s.feature].clone());
        rows.push(format!("≤ {}", format_significant(s.threshold, 3)));
    }
    rows.push(format!("{:.1}%", 100.0 * node.fraction));
    let ratios: Vec<String> = node.ratios.iter().map(|r| format!("{r:.2}")).collect();
    rows.push(format!("[{}]", ratios.join(", ")));
    rows.push(node.majority.as_str().to_string());
    rows
}

/// Graphviz description of a fitted tree; the left edge of each split is the
/// `≤` branch.
pub fn export_tree_dot(tree: &DecisionTreeModel) -> Result<String> {
    let mut nodes: Vec<&TreeNode> = Vec::new();
    tree.root.walk(&mut |n| nodes.push(n));
    if let Some(i) = nodes.iter().position(|n| !has_stats(n)) {
        return Err(InterpretError::MissingStats(i));
    }
    let mut out = String::from("digraph tree {\n");
    out.push_str("    node [shape=box, style=\"filled, rounded\", fontname=\"Helvetica\"];\n");
    out.push_str("    edge [fontname=\"Helvetica\"];\n");
    let mut next = 0usize;
    emit(tree, &tree.root, &mut next, &mut out);
    out.push_str("}\n");
    Ok(out)
}

fn emit(tree: &DecisionTreeModel, node: &TreeNode, next: &mut usize, out: &mut String) -> usize {
    let id = *next;
    *next += 1;
    let label: Vec<String> = node_rows(tree, node).iter().map(|r| escape(r)).collect();
    out.push_str(&format!(
        "    n{id} [label=\"{}\", fillcolor=\"{}\"];\n",
        label.join("\\n"),
        node_color(node.majority, node.purity())
    ));
    if let Some(children) = &node.children {
        let l = emit(tree, &children.0, next, out);
        out.push_str(&format!("    n{id} -> n{l} [label=\"yes\"];\n"));
        let r = emit(tree, &children.1, next, out);
        out.push_str(&format!("    n{id} -> n{r} [label=\"no\"];\n"));
    }
    id
}

/// One step of a row's path through a tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathStep {
    pub feature: usize,
    pub threshold: f64,
    pub value: f64,
    /// True when `value <= threshold`.
    pub left: bool,
}

/// Splits visited by `row` from the root to its leaf.
pub fn decision_path(tree: &DecisionTreeModel, row: &[f64]) -> Vec<PathStep> {
    let mut path = Vec::new();
    let mut node = &tree.root;
    while let (Some(s), Some(c)) = (&node.split, &node.children) {
        let value = row[s.feature];
        let left = value <= s.threshold;
        path.push(PathStep { feature: s.feature, threshold: s.threshold, value, left });
        node = if left { &c.0 } else { &c.1 };
    }
    path
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceMethod {
    Permutation,
    SplitGain,
}

impl ImportanceMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            ImportanceMethod::Permutation => "permutation",
            ImportanceMethod::SplitGain => "split_gain",
        }
    }
}

/// Score compared before and after shuffling a column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceMetric {
    Kappa,
    MacroF1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub name: String,
    pub feature: usize,
    pub per_stage: [f64; NUM_STAGES],
    pub overall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub method: ImportanceMethod,
    /// Descending overall importance, ties by name.
    pub entries: Vec<FeatureImportance>,
}

impl ImportanceReport {
    fn new(method: ImportanceMethod, mut entries: Vec<FeatureImportance>) -> Self {
        entries.sort_by(|a, b| b.overall.total_cmp(&a.overall).then_with(|| a.name.cmp(&b.name)));
        ImportanceReport { method, entries }
    }

    pub fn get(&self, name: &str) -> Option<&FeatureImportance> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Entries ranked by their importance for one stage, ties by name.
    pub fn ranked_for(&self, stage: StageLabel) -> Vec<&FeatureImportance> {
        let k = stage.index();
        let mut v: Vec<&FeatureImportance> = self.entries.iter().collect();
        v.sort_by(|a, b| b.per_stage[k].total_cmp(&a.per_stage[k]).then_with(|| a.name.cmp(&b.name)));
        v
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("feature,overall");
        for s in StageLabel::ALL {
            out.push(',');
            out.push_str(s.as_str());
        }
        out.push('\n');
        for e in &self.entries {
            let name = if e.name.contains([',', '"']) { format!("\"{}\"", e.name.replace('"', "\"\"")) } else { e.name.clone() };
            out.push_str(&format!("{name},{:?}", e.overall));
            for v in e.per_stage {
                out.push_str(&format!(",{v:?}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let width = self.entries.iter().map(|e| e.name.chars().count()).max().unwrap_or(7).max(7);
        let mut out = format!("importance ({})\n", self.method.as_str());
        out.push_str(&format!("{:<width$}  {:>9}", "feature", "overall"));
        for s in StageLabel::ALL {
            out.push_str(&format!("  {:>9}", s.as_str()));
        }
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!("{:<width$}  {:>9.4}", e.name, e.overall));
            for v in e.per_stage {
                out.push_str(&format!("  {v:>9.4}"));
            }
            out.push('\n');
        }
        out
    }
}

fn check_names(names: &[String], features: usize) -> Result<()> {
    if names.len() != features {
        return Err(InterpretError::NameMismatch { names: names.len(), features });
    }
    Ok(())
}

fn scores(metric: ImportanceMetric, y: &[StageLabel], pred: &[StageLabel]) -> Result<(f64, [f64; NUM_STAGES])> {
    let (per_stage, macro_f1) = f1_scores(y, pred)?;
    let overall = match metric {
        ImportanceMetric::Kappa => kappa(y, pred)?,
        ImportanceMetric::MacroF1 => macro_f1,
    };
    Ok((overall, per_stage))
}

/// Baseline score minus the mean score after shuffling each column, over
/// `repeats` seeded shuffles. Per-stage values use per-stage F1.
pub fn permutation_importance(
    model: &(impl StageClassifier + Sync),
    x: ArrayView2<f64>,
    y: &[StageLabel],
    names: &[String],
    metric: ImportanceMetric,
    repeats: usize,
    seed: u64,
) -> Result<ImportanceReport> {
    check_names(names, model.num_features())?;
    if x.nrows() < 10 {
        return Err(InterpretError::TooFewRows(x.nrows()));
    }
    let (base, base_stage) = scores(metric, y, &model.predict(x)?)?;
    let repeats = repeats.max(1);
    let entries: Vec<Result<FeatureImportance>> = (0..x.ncols())
        .into_par_iter()
        .map(|j| {
            let mut shuffled: Array2<f64> = x.to_owned();
            let mut overall = 0.0;
            let mut per_stage = [0.0; NUM_STAGES];
            for r in 0..repeats {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream((j * repeats + r) as u64);
                let mut col: Vec<f64> = x.column(j).to_vec();
                col.shuffle(&mut rng);
                for (dst, v) in shuffled.column_mut(j).iter_mut().zip(col) {
                    *dst = v;
                }
                let (s, st) = scores(metric, y, &model.predict(shuffled.view())?)?;
                overall += base - s;
                for k in 0..NUM_STAGES {
                    per_stage[k] += base_stage[k] - st[k];
                }
            }
            for v in per_stage.iter_mut() {
                *v /= repeats as f64;
            }
            Ok(FeatureImportance { name: names[j].clone(), feature: j, per_stage, overall: overall / repeats as f64 })
        })
        .collect();
    Ok(ImportanceReport::new(ImportanceMethod::Permutation, entries.into_iter().collect::<Result<_>>()?))
}

/// Per-class share `p_k (1 - p_k)` of a node's Gini impurity, weighted by the
/// node's share of training rows.
fn weighted_class_gini(node: &TreeNode) -> [f64; NUM_STAGES] {
    let mut g = [0.0; NUM_STAGES];
    for k in 0..NUM_STAGES {
        g[k] = node.fraction * node.ratios[k] * (1.0 - node.ratios[k]);
    }
    g
}

fn tree_gains(tree: &DecisionTreeModel) -> Vec<(f64, [f64; NUM_STAGES])> {
    let mut acc = vec![(0.0, [0.0; NUM_STAGES]); tree.num_features()];
    tree.root.walk(&mut |n| {
        if let (Some(s), Some(c)) = (&n.split, &n.children) {
            let p = weighted_class_gini(n);
            let l = weighted_class_gini(&c.0);
            let r = weighted_class_gini(&c.1);
            let entry = &mut acc[s.feature];
            entry.0 += n.gain;
            for k in 0..NUM_STAGES {
                entry.1[k] += p[k] - l[k] - r[k];
            }
        }
    });
    acc
}

fn ensemble_gains(model: &BoostedEnsemble) -> Vec<(f64, [f64; NUM_STAGES])> {
    let mut acc = vec![(0.0, [0.0; NUM_STAGES]); model.num_features];
    for round in &model.rounds {
        for (k, tree) in round.trees.iter().enumerate() {
            tree.root.walk(&mut |n: &RegressionNode| {
                if let Some(s) = &n.split {
                    acc[s.feature].0 += n.gain;
                    acc[s.feature].1[k] += n.gain;
                }
            });
        }
    }
    acc
}

/// Impurity (trees) or squared-error (ensembles) reduction summed per
/// feature, normalised so overall importances sum to 1. Per-stage values
/// share the normalisation and sum to the overall value.
pub fn split_gain_importance(model: &Classifier, names: &[String]) -> Result<ImportanceReport> {
    let gains = match model {
        Classifier::Tree(t) => tree_gains(t),
        Classifier::Boosted(b) => ensemble_gains(b),
        Classifier::Logistic(_) => return Err(InterpretError::NotTreeBased),
    };
    check_names(names, gains.len())?;
    let total: f64 = gains.iter().map(|g| g.0).sum();
    let scale = if total > 0.0 { 1.0 / total } else { 0.0 };
    let entries = gains
        .into_iter()
        .enumerate()
        .map(|(j, (overall, stage))| FeatureImportance {
            name: names[j].clone(),
            feature: j,
            per_stage: stage.map(|v| v * scale),
            overall: overall * scale,
        })
        .collect();
    Ok(ImportanceReport::new(ImportanceMethod::SplitGain, entries))
}
