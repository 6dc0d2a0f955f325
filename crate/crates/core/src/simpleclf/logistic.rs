use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{check_inputs, check_width, softmax, Result, StageClassifier};
use crate::stage::{StageLabel, NUM_STAGES};

const ARMIJO_C: f64 = 1e-4;
const MAX_STEP: f64 = 1e4;
/// Fixed score of stages absent from training; their probability underflows
/// to exactly 0 and their gradient vanishes.
const ABSENT_STAGE_BIAS: f64 = -1e3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogisticOptions {
    pub l2_penalty: f64,
    pub max_iters: usize,
    /// Stop when the gradient norm falls to this value.
    pub tol: f64,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        LogisticOptions { l2_penalty: 1e-3, max_iters: 2000, tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    /// M×5.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub l2_penalty: f64,
    /// False when the iteration budget ran out before the gradient tolerance.
    pub converged: bool,
    pub iterations: usize,
    pub objective: f64,
}

impl LogisticModel {
    pub fn zeros(num_features: usize, l2_penalty: f64) -> Self {
        LogisticModel {
            weights: Array2::zeros((num_features, NUM_STAGES)),
            bias: Array1::zeros(NUM_STAGES),
            l2_penalty,
            converged: false,
            iterations: 0,
            objective: f64::NAN,
        }
    }

    pub fn num_features(&self) -> usize {
        self.weights.nrows()
    }

    fn scores(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weights) + &self.bias
    }
}

fn probabilities(z: &Array2<f64>) -> Array2<f64> {
    let mut p = z.clone();
    for mut row in p.rows_mut() {
        let mut a = [0.0; NUM_STAGES];
        for k in 0..NUM_STAGES {
            a[k] = row[k];
        }
        let s = softmax(&a);
        for k in 0..NUM_STAGES {
            row[k] = s[k];
        }
    }
    p
}

impl StageClassifier for LogisticModel {
    fn num_features(&self) -> usize {
        self.weights.nrows()
    }

    fn predict_proba(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_width(x, self.num_features())?;
        Ok(probabilities(&self.scores(x)))
    }
}

/// Mean cross-entropy plus `(l2/2)‖W‖²`.
pub fn objective(model: &LogisticModel, x: ArrayView2<f64>, y: &[StageLabel]) -> f64 {
    let z = model.scores(x);
    let mut ce = 0.0;
    for (row, s) in z.rows().into_iter().zip(y) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        ce += lse - row[s.index()];
    }
    ce / y.len() as f64 + 0.5 * model.l2_penalty * model.weights.mapv(|w| w * w).sum()
}

fn gradient(model: &LogisticModel, x: ArrayView2<f64>, y: &[StageLabel]) -> (Array2<f64>, Array1<f64>) {
    let mut residual = probabilities(&model.scores(x));
    for (i, s) in y.iter().enumerate() {
        residual[(i, s.index())] -= 1.0;
    }
    residual /= y.len() as f64;
    let gw = x.t().dot(&residual) + &(&model.weights * model.l2_penalty);
    let gb = residual.sum_axis(Axis(0));
    (gw, gb)
}

/// Gradient descent with Armijo backtracking from `init`. Returns the model
/// and the objective after every accepted step (starting value first).
pub fn fit_logistic_from(
    x: ArrayView2<f64>,
    y: &[StageLabel],
    options: &LogisticOptions,
    init: LogisticModel,
) -> Result<(LogisticModel, Vec<f64>)> {
    check_inputs(x, y)?;
    check_width(x, init.num_features())?;
    let mut model = LogisticModel { l2_penalty: options.l2_penalty, converged: false, iterations: 0, ..init };
    let mut present = [false; NUM_STAGES];
    for s in y {
        present[s.index()] = true;
    }
    for k in (0..NUM_STAGES).filter(|&k| !present[k]) {
        model.weights.column_mut(k).fill(0.0);
        model.bias[k] = ABSENT_STAGE_BIAS;
    }
    let mut f = objective(&model, x, y);
    let mut trace = vec![f];
    let mut step = 1.0;
    for it in 0..options.max_iters {
        let (gw, gb) = gradient(&model, x, y);
        let g2 = gw.mapv(|v| v * v).sum() + gb.mapv(|v| v * v).sum();
        if g2.sqrt() <= options.tol {
            model.converged = true;
            model.iterations = it;
            model.objective = f;
            return Ok((model, trace));
        }
        let mut accepted = false;
        while step > 1e-20 {
            let candidate = LogisticModel {
                weights: &model.weights - &(&gw * step),
                bias: &model.bias - &(&gb * step),
                ..model.clone()
            };
            let fc = objective(&candidate, x, y);
            if fc <= f - ARMIJO_C * step * g2 {
                model = candidate;
                f = fc;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        trace.push(f);
        step = (step * 2.0).min(MAX_STEP);
        model.iterations = it + 1;
    }
    let (gw, gb) = gradient(&model, x, y);
    let gnorm = (gw.mapv(|v| v * v).sum() + gb.mapv(|v| v * v).sum()).sqrt();
    model.converged = gnorm <= options.tol;
    if !model.converged {
        log::warn!("logistic regression stopped after {} iterations with gradient norm {gnorm:.3e}", model.iterations);
    }
    model.objective = f;
    Ok((model, trace))
}

/// Multinomial logistic regression from zero weights.
pub fn fit_logistic(x: ArrayView2<f64>, y: &[StageLabel], options: &LogisticOptions) -> Result<LogisticModel> {
    let init = LogisticModel::zeros(x.ncols(), options.l2_penalty);
    fit_logistic_from(x, y, options, init).map(|(m, _)| m)
}
