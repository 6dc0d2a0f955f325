use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::split::{midpoint, Presorted};
use super::{check_inputs, check_width, Result, StageClassifier};
use crate::stage::{StageLabel, NUM_STAGES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeOptions {
    pub max_depth: usize,
    pub min_samples_leaf: usize,
}

impl Default for TreeOptions {
    fn default() -> Self {
        TreeOptions { max_depth: 4, min_samples_leaf: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub feature: usize,
    /// Rows with `value <= threshold` go left.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub split: Option<Split>,
    pub children: Option<Box<(TreeNode, TreeNode)>>,
    /// Training rows reaching the node.
    pub samples: usize,
    /// Share of all training rows reaching the node.
    pub fraction: f64,
    pub ratios: [f64; NUM_STAGES],
    pub majority: StageLabel,
    /// Decrease in Gini impurity weighted by the node's share of training
    /// rows; 0 at leaves.
    pub gain: f64,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.split.is_none()
    }

    pub fn gini(&self) -> f64 {
        1.0 - self.ratios.iter().map(|r| r * r).sum::<f64>()
    }

    pub fn purity(&self) -> f64 {
        self.ratios.iter().cloned().fold(0.0, f64::max)
    }

    pub fn depth(&self) -> usize {
        match &self.children {
            Some(c) => 1 + c.0.depth().max(c.1.depth()),
            None => 0,
        }
    }

    /// Visit nodes in preorder.
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a TreeNode)) {
        f(self);
        if let Some(c) = &self.children {
            c.0.walk(f);
            c.1.walk(f);
        }
    }

    fn leaf_for(&self, row: &[f64]) -> &TreeNode {
        let mut node = self;
        while let (Some(s), Some(c)) = (&node.split, &node.children) {
            node = if row[s.feature] <= s.threshold { &c.0 } else { &c.1 };
        }
        node
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTreeModel {
    pub root: TreeNode,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub feature_names: Vec<String>,
}

impl DecisionTreeModel {
    pub fn num_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Self {
        assert_eq!(names.len(), self.feature_names.len(), "one name per feature");
        self.feature_names = names;
        self
    }
}

impl StageClassifier for DecisionTreeModel {
    fn num_features(&self) -> usize {
        self.feature_names.len()
    }

    fn predict_proba(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_width(x, self.num_features())?;
        let mut out = Array2::zeros((x.nrows(), NUM_STAGES));
        for (i, row) in x.rows().into_iter().enumerate() {
            let row = row.to_vec();
            let leaf = self.root.leaf_for(&row);
            for k in 0..NUM_STAGES {
                out[(i, k)] = leaf.ratios[k];
            }
        }
        Ok(out)
    }
}

/// Best split among one column's boundaries, scored by `SL/nL + SR/nR` as an
/// exact rational (`S` = sum of squared class counts). Larger is better.
#[derive(Clone, Copy)]
struct Candidate {
    num: u128,
    den: u128,
    feature: usize,
    threshold: f64,
}

impl Candidate {
    fn beats(&self, other: &Candidate) -> bool {
        self.num * other.den > other.num * self.den
    }
}

fn sum_sq(c: &[u64; NUM_STAGES]) -> u128 {
    c.iter().map(|&v| (v as u128) * (v as u128)).sum()
}

struct Builder<'a, 'x> {
    x: ArrayView2<'x, f64>,
    y: Vec<usize>,
    sorted: Presorted,
    total: usize,
    options: &'a TreeOptions,
}

impl Builder<'_, '_> {
    fn counts(&self, rows: &[u32]) -> [u64; NUM_STAGES] {
        let mut c = [0u64; NUM_STAGES];
        for &r in rows {
            c[self.y[r as usize]] += 1;
        }
        c
    }

    fn best_in_column(&self, j: usize, rows: &[u32], member: &[bool], parent: &[u64; NUM_STAGES]) -> Option<Candidate> {
        let order = self.sorted.node_order(self.x, j, rows, member);
        let col = self.x.column(j);
        let n = order.len();
        let min_leaf = self.options.min_samples_leaf.max(1);
        let mut left = [0u64; NUM_STAGES];
        let mut best: Option<Candidate> = None;
        for i in 0..n - 1 {
            left[self.y[order[i] as usize]] += 1;
            let a = col[order[i] as usize];
            let b = col[order[i + 1] as usize];
            let n_left = i + 1;
            let n_right = n - n_left;
            if a == b || n_left < min_leaf || n_right < min_leaf {
                continue;
            }
            let mut right = [0u64; NUM_STAGES];
            for k in 0..NUM_STAGES {
                right[k] = parent[k] - left[k];
            }
            let (nl, nr) = (n_left as u128, n_right as u128);
            let cand = Candidate {
                num: sum_sq(&left) * nr + sum_sq(&right) * nl,
                den: nl * nr,
                feature: j,
                threshold: midpoint(a, b),
            };
            if best.as_ref().map_or(true, |b| cand.beats(b)) {
                best = Some(cand);
            }
        }
        best
    }

    fn build(&self, rows: Vec<u32>, depth: usize, member: &mut Vec<bool>) -> TreeNode {
        let counts = self.counts(&rows);
        let n = rows.len();
        let mut ratios = [0.0; NUM_STAGES];
        for k in 0..NUM_STAGES {
            ratios[k] = counts[k] as f64 / n as f64;
        }
        let majority = StageLabel::argmax(&ratios);
        let mut node = TreeNode {
            split: None,
            children: None,
            samples: n,
            fraction: n as f64 / self.total as f64,
            ratios,
            majority,
            gain: 0.0,
        };
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        if depth >= self.options.max_depth || pure || n < 2 * self.options.min_samples_leaf.max(1) {
            return node;
        }

        for &r in &rows {
            member[r as usize] = true;
        }
        let candidates: Vec<Option<Candidate>> = {
            let member: &[bool] = member;
            (0..self.x.ncols())
                .into_par_iter()
                .map(|j| self.best_in_column(j, &rows, member, &counts))
                .collect()
        };
        for &r in &rows {
            member[r as usize] = false;
        }
        // strict improvement keeps the lower column on ties
        let mut best: Option<Candidate> = None;
        for c in candidates.into_iter().flatten() {
            if best.as_ref().map_or(true, |b| c.beats(b)) {
                best = Some(c);
            }
        }
        let Some(best) = best else {
            return node;
        };

        let col = self.x.column(best.feature);
        let (left, right): (Vec<u32>, Vec<u32>) = rows.iter().partition(|&&r| col[r as usize] <= best.threshold);
        let parent_score = sum_sq(&counts) as f64 / n as f64;
        let child_score = best.num as f64 / best.den as f64;
        node.gain = (child_score - parent_score).max(0.0) / self.total as f64;
        node.split = Some(Split { feature: best.feature, threshold: best.threshold });
        let l = self.build(left, depth + 1, member);
        let r = self.build(right, depth + 1, member);
        node.children = Some(Box::new((l, r)));
        node
    }
}

/// Greedy CART on Gini impurity.
pub fn fit_tree(x: ArrayView2<f64>, y: &[StageLabel], options: &TreeOptions) -> Result<DecisionTreeModel> {
    check_inputs(x, y)?;
    let builder = Builder {
        x,
        y: y.iter().map(|s| s.index()).collect(),
        sorted: Presorted::new(x),
        total: y.len(),
        options,
    };
    let mut member = vec![false; y.len()];
    let root = builder.build((0..y.len() as u32).collect(), 0, &mut member);
    Ok(DecisionTreeModel {
        root,
        max_depth: options.max_depth,
        min_samples_leaf: options.min_samples_leaf,
        feature_names: (0..x.ncols()).map(|j| format!("x{j}")).collect(),
    })
}
