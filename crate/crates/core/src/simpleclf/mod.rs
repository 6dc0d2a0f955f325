//! Interpretable classifiers: CART, boosted trees and logistic regression.

mod boosted;
mod logistic;
mod split;
mod tree;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::stage::{StageLabel, NUM_STAGES};

pub use boosted::{fit_boosted, BoostOptions, BoostRound, BoostedEnsemble, RegressionNode, RegressionTree};
pub use logistic::{fit_logistic, LogisticModel, LogisticOptions};
pub use tree::{fit_tree, DecisionTreeModel, Split, TreeNode, TreeOptions};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ClfError {
    #[error("no training rows")]
    EmptyInput,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient in boosting round {round}")]
    NonFiniteGradient { round: usize },
    #[error("invalid option: {0}")]
    InvalidOption(String),
}

pub type Result<T> = std::result::Result<T, ClfError>;

fn check_inputs(x: ArrayView2<f64>, y: &[StageLabel]) -> Result<()> {
    if x.nrows() == 0 {
        return Err(ClfError::EmptyInput);
    }
    if x.nrows() != y.len() {
        return Err(ClfError::ShapeMismatch(format!("{} rows but {} labels", x.nrows(), y.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(ClfError::ShapeMismatch("non-finite input value".into()));
    }
    Ok(())
}

fn check_width(x: ArrayView2<f64>, expected: usize) -> Result<()> {
    if x.ncols() != expected {
        return Err(ClfError::ShapeMismatch(format!("{} columns, model trained on {expected}", x.ncols())));
    }
    Ok(())
}

/// Numerically stable softmax of one score row.
pub fn softmax(z: &[f64; NUM_STAGES]) -> [f64; NUM_STAGES] {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p = [0.0; NUM_STAGES];
    let mut sum = 0.0;
    for (pk, zk) in p.iter_mut().zip(z) {
        *pk = (zk - max).exp();
        sum += *pk;
    }
    for pk in p.iter_mut() {
        *pk /= sum;
    }
    p
}

/// Shared inference contract.
pub trait StageClassifier {
    fn num_features(&self) -> usize;

    /// Per-row stage probabilities in stage order.
    fn predict_proba(&self, x: ArrayView2<f64>) -> Result<Array2<f64>>;

    /// Argmax of [`StageClassifier::predict_proba`], ties to the earlier stage.
    fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<StageLabel>> {
        let p = self.predict_proba(x)?;
        Ok(p.rows().into_iter().map(|r| StageLabel::argmax(r.as_slice().expect("rows are contiguous"))).collect())
    }
}

/// Any of the fitted models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Classifier {
    Tree(DecisionTreeModel),
    Boosted(BoostedEnsemble),
    Logistic(LogisticModel),
}

impl StageClassifier for Classifier {
    fn num_features(&self) -> usize {
        match self {
            Classifier::Tree(m) => m.num_features(),
            Classifier::Boosted(m) => m.num_features(),
            Classifier::Logistic(m) => m.num_features(),
        }
    }

    fn predict_proba(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        match self {
            Classifier::Tree(m) => m.predict_proba(x),
            Classifier::Boosted(m) => m.predict_proba(x),
            Classifier::Logistic(m) => m.predict_proba(x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn predict_is_argmax_with_stage_order_ties() {
        let m = LogisticModel::zeros(2, 0.0);
        let x = arr2(&[[1.0, 2.0], [-3.0, 0.5]]);
        let p = m.predict_proba(x.view()).unwrap();
        assert!(p.iter().all(|v| (v - 0.2).abs() < 1e-15));
        assert_eq!(m.predict(x.view()).unwrap(), vec![StageLabel::Wake; 2]);
    }

    #[test]
    fn wrapped_models_check_width() {
        let x = arr2(&[[0.0], [1.0], [2.0], [3.0]]);
        let y = [StageLabel::Wake, StageLabel::Wake, StageLabel::N2, StageLabel::N2];
        let tree = Classifier::Tree(fit_tree(x.view(), &y, &TreeOptions::default()).unwrap());
        assert!(matches!(tree.predict_proba(arr2(&[[0.0, 1.0]]).view()), Err(ClfError::ShapeMismatch(_))));
        assert_eq!(tree.predict(x.view()).unwrap(), y.to_vec());
    }
}
