use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::split::{midpoint, Presorted};
use super::tree::Split;
use super::{check_inputs, check_width, softmax, ClfError, Result, StageClassifier};
use crate::stage::{StageLabel, NUM_STAGES};

/// Added to the hessian sum of every leaf.
pub const NEWTON_DAMPING: f64 = 1.0;
const PRIOR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostOptions {
    pub rounds: usize,
    pub learning_rate: f64,
    pub tree_depth: usize,
    pub min_samples_leaf: usize,
    /// Probability of dropping each earlier round (DART); 0 disables it.
    pub dart_dropout: f64,
    pub seed: u64,
}

impl Default for BoostOptions {
    fn default() -> Self {
        BoostOptions { rounds: 100, learning_rate: 0.1, tree_depth: 3, min_samples_leaf: 1, dart_dropout: 0.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionNode {
    pub split: Option<Split>,
    pub children: Option<Box<(RegressionNode, RegressionNode)>>,
    pub value: f64,
    pub samples: usize,
    /// Squared-error reduction of the split; 0 at leaves.
    pub gain: f64,
}

impl RegressionNode {
    fn eval(&self, row: ArrayView1<f64>) -> f64 {
        let mut node = self;
        while let (Some(s), Some(c)) = (&node.split, &node.children) {
            node = if row[s.feature] <= s.threshold { &c.0 } else { &c.1 };
        }
        node.value
    }

    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a RegressionNode)) {
        f(self);
        if let Some(c) = &self.children {
            c.0.walk(f);
            c.1.walk(f);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub root: RegressionNode,
}

/// One boosting round: a tree per class and the round's weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostRound {
    pub trees: Vec<RegressionTree>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostedEnsemble {
    pub base_score: [f64; NUM_STAGES],
    pub rounds: Vec<BoostRound>,
    pub learning_rate: f64,
    pub dart_dropout: f64,
    pub tree_depth: usize,
    pub num_features: usize,
}

impl BoostedEnsemble {
    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn tree_count(&self) -> usize {
        self.rounds.iter().map(|r| r.trees.len()).sum()
    }

    fn round_scores(round: &BoostRound, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((x.nrows(), NUM_STAGES));
        for (i, row) in x.rows().into_iter().enumerate() {
            for (k, t) in round.trees.iter().enumerate() {
                out[(i, k)] = t.root.eval(row);
            }
        }
        out
    }

    /// Summed leaf values per class.
    pub fn decision_function(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_width(x, self.num_features)?;
        let mut z = Array2::zeros((x.nrows(), NUM_STAGES));
        for mut row in z.rows_mut() {
            for k in 0..NUM_STAGES {
                row[k] = self.base_score[k];
            }
        }
        for round in &self.rounds {
            z.scaled_add(round.weight, &Self::round_scores(round, x));
        }
        Ok(z)
    }
}

fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut p = Array2::zeros(z.dim());
    for (i, row) in z.rows().into_iter().enumerate() {
        let mut a = [0.0; NUM_STAGES];
        for k in 0..NUM_STAGES {
            a[k] = row[k];
        }
        let s = softmax(&a);
        for k in 0..NUM_STAGES {
            p[(i, k)] = s[k];
        }
    }
    p
}

impl StageClassifier for BoostedEnsemble {
    fn num_features(&self) -> usize {
        self.num_features
    }

    fn predict_proba(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(softmax_rows(&self.decision_function(x)?))
    }
}

struct RegBuilder<'a, 'x> {
    x: ArrayView2<'x, f64>,
    sorted: &'a Presorted,
    depth: usize,
    min_leaf: usize,
    scale: f64,
}

#[derive(Clone, Copy)]
struct RegCandidate {
    score: f64,
    feature: usize,
    threshold: f64,
}

impl RegBuilder<'_, '_> {
    fn best_in_column(&self, j: usize, rows: &[u32], member: &[bool], g: &[f64], total: f64) -> Option<RegCandidate> {
        let order = self.sorted.node_order(self.x, j, rows, member);
        let col = self.x.column(j);
        let n = order.len();
        let mut left = 0.0;
        let mut best: Option<RegCandidate> = None;
        for i in 0..n - 1 {
            left += g[order[i] as usize];
            let a = col[order[i] as usize];
            let b = col[order[i + 1] as usize];
            let (nl, nr) = (i + 1, n - i - 1);
            if a == b || nl < self.min_leaf || nr < self.min_leaf {
                continue;
            }
            let right = total - left;
            let score = left * left / nl as f64 + right * right / nr as f64;
            if best.map_or(true, |b| score > b.score) {
                best = Some(RegCandidate { score, feature: j, threshold: midpoint(a, b) });
            }
        }
        best
    }

    fn leaf_value(&self, rows: &[u32], g: &[f64], h: &[f64]) -> f64 {
        let sg: f64 = rows.iter().map(|&r| g[r as usize]).sum();
        let sh: f64 = rows.iter().map(|&r| h[r as usize]).sum();
        self.scale * sg / (sh + NEWTON_DAMPING)
    }

    fn build(&self, rows: Vec<u32>, depth: usize, g: &[f64], h: &[f64], member: &mut Vec<bool>) -> RegressionNode {
        let n = rows.len();
        let mut node = RegressionNode { split: None, children: None, value: self.leaf_value(&rows, g, h), samples: n, gain: 0.0 };
        if depth >= self.depth || n < 2 * self.min_leaf {
            return node;
        }
        let total: f64 = rows.iter().map(|&r| g[r as usize]).sum();
        for &r in &rows {
            member[r as usize] = true;
        }
        let candidates: Vec<Option<RegCandidate>> = {
            let member: &[bool] = member;
            (0..self.x.ncols())
                .into_par_iter()
                .map(|j| self.best_in_column(j, &rows, member, g, total))
                .collect()
        };
        for &r in &rows {
            member[r as usize] = false;
        }
        let mut best: Option<RegCandidate> = None;
        for c in candidates.into_iter().flatten() {
            if best.map_or(true, |b| c.score > b.score) {
                best = Some(c);
            }
        }
        let Some(best) = best else { return node };
        let gain = best.score - total * total / n as f64;
        let sse: f64 = rows.iter().map(|&r| g[r as usize].powi(2)).sum();
        if !(gain > 1e-12 * sse.max(f64::MIN_POSITIVE)) {
            return node;
        }
        let col = self.x.column(best.feature);
        let (l, r): (Vec<u32>, Vec<u32>) = rows.iter().partition(|&&i| col[i as usize] <= best.threshold);
        node.split = Some(Split { feature: best.feature, threshold: best.threshold });
        node.gain = gain;
        let left = self.build(l, depth + 1, g, h, member);
        let right = self.build(r, depth + 1, g, h, member);
        node.children = Some(Box::new((left, right)));
        node
    }
}

/// Multiclass gradient boosting on softmax cross-entropy, optionally with
/// DART round dropout.
pub fn fit_boosted(x: ArrayView2<f64>, y: &[StageLabel], options: &BoostOptions) -> Result<BoostedEnsemble> {
    check_inputs(x, y)?;
    if options.rounds == 0 {
        return Err(ClfError::InvalidOption("boosting needs at least one round".into()));
    }
    if !(0.0..1.0).contains(&options.dart_dropout) || !(options.learning_rate >= 0.0) {
        return Err(ClfError::InvalidOption(format!(
            "dropout {} / learning rate {}",
            options.dart_dropout, options.learning_rate
        )));
    }
    let n = y.len();
    let mut counts = [0usize; NUM_STAGES];
    for s in y {
        counts[s.index()] += 1;
    }
    let mut base_score = [0.0; NUM_STAGES];
    for k in 0..NUM_STAGES {
        base_score[k] = (counts[k] as f64 / n as f64).max(PRIOR_FLOOR).ln();
    }
    let mut ensemble = BoostedEnsemble {
        base_score,
        rounds: Vec::with_capacity(options.rounds),
        learning_rate: options.learning_rate,
        dart_dropout: options.dart_dropout,
        tree_depth: options.tree_depth,
        num_features: x.ncols(),
    };

    let sorted = Presorted::new(x);
    let builder = RegBuilder {
        x,
        sorted: &sorted,
        depth: options.tree_depth,
        min_leaf: options.min_samples_leaf.max(1),
        scale: options.learning_rate,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut scores = Array2::zeros((n, NUM_STAGES));
    for mut row in scores.rows_mut() {
        for k in 0..NUM_STAGES {
            row[k] = base_score[k];
        }
    }
    let mut member = vec![false; n];

    for t in 0..options.rounds {
        let dropped: Vec<usize> = if options.dart_dropout > 0.0 {
            (0..t).filter(|_| rng.gen::<f64>() < options.dart_dropout).collect()
        } else {
            Vec::new()
        };
        let dropped_scores: Vec<Array2<f64>> =
            dropped.iter().map(|&r| BoostedEnsemble::round_scores(&ensemble.rounds[r], x)).collect();
        let mut working = scores.clone();
        for (&r, s) in dropped.iter().zip(&dropped_scores) {
            working.scaled_add(-ensemble.rounds[r].weight, s);
        }
        let p = softmax_rows(&working);
        if p.iter().any(|v| !v.is_finite()) {
            return Err(ClfError::NonFiniteGradient { round: t });
        }

        let trees: Vec<RegressionTree> = (0..NUM_STAGES)
            .map(|k| {
                let g: Vec<f64> = (0..n).map(|i| if y[i].index() == k { 1.0 } else { 0.0 } - p[(i, k)]).collect();
                let h: Vec<f64> = (0..n).map(|i| p[(i, k)] * (1.0 - p[(i, k)])).collect();
                RegressionTree { root: builder.build((0..n as u32).collect(), 0, &g, &h, &mut member) }
            })
            .collect();
        let k = dropped.len() as f64;
        let weight = 1.0 / (k + 1.0);
        for (&r, s) in dropped.iter().zip(&dropped_scores) {
            let old = ensemble.rounds[r].weight;
            let new = old * k / (k + 1.0);
            ensemble.rounds[r].weight = new;
            scores.scaled_add(new - old, s);
        }
        let round = BoostRound { trees, weight };
        scores.scaled_add(weight, &BoostedEnsemble::round_scores(&round, x));
        ensemble.rounds.push(round);
    }
    Ok(ensemble)
}
