//! Ridge map from expert features to embedding space.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

pub const DEFAULT_LAMBDA: f64 = 1.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MapError {
    #[error("normal equations are singular (pivot {pivot} at row {row})")]
    SingularSystem { row: usize, pivot: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("lambda must be finite and non-negative, got {0}")]
    InvalidLambda(f64),
}

/// Per-column z-score parameters fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Columns that were constant in training; their std is stored as 1.
    pub constant: Vec<bool>,
}

impl Standardization {
    pub fn fit(x: ArrayView2<f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mut mean = Vec::with_capacity(x.ncols());
        let mut std = Vec::with_capacity(x.ncols());
        let mut constant = Vec::with_capacity(x.ncols());
        for col in x.axis_iter(Axis(1)) {
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            let s = var.sqrt();
            let flat = !(s > 1e-12 * m.abs().max(1e-300)) || x.nrows() == 0;
            mean.push(m);
            std.push(if flat { 1.0 } else { s });
            constant.push(flat);
        }
        Standardization { mean, std, constant }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, MapError> {
        if x.ncols() != self.width() {
            return Err(MapError::ShapeMismatch(format!("{} columns, statistics for {}", x.ncols(), self.width())));
        }
        let mut out = x.to_owned();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (self.mean[j], self.std[j]);
            col.mapv_inplace(|v| if self.constant[j] { 0.0 } else { (v - m) / s });
        }
        Ok(out)
    }
}

/// Z-score `x` with `stats`, or with statistics fitted on `x` itself.
pub fn standardize(
    x: ArrayView2<f64>,
    stats: Option<&Standardization>,
) -> Result<(Array2<f64>, Standardization), MapError> {
    let stats = match stats {
        Some(s) => s.clone(),
        None => Standardization::fit(x),
    };
    Ok((stats.apply(x)?, stats))
}

/// `T` (M×D) with the standardization its inputs used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearMap {
    pub t: Array2<f64>,
    pub lambda: f64,
    pub standardization: Option<Standardization>,
}

/// In-place Cholesky factor of a symmetric positive-definite matrix (lower).
fn cholesky(mut a: Array2<f64>, rank_tol: f64) -> Result<Array2<f64>, MapError> {
    let n = a.nrows();
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= a[(j, k)] * a[(j, k)];
        }
        if !(d > rank_tol) {
            return Err(MapError::SingularSystem { row: j, pivot: d });
        }
        let d = d.sqrt();
        a[(j, j)] = d;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= a[(i, k)] * a[(j, k)];
            }
            a[(i, j)] = s / d;
        }
        for k in j + 1..n {
            a[(j, k)] = 0.0;
        }
    }
    Ok(a)
}

fn cholesky_solve(l: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for mut col in x.axis_iter_mut(Axis(1)) {
        for i in 0..n {
            let mut s = col[i];
            for k in 0..i {
                s -= l[(i, k)] * col[k];
            }
            col[i] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = col[i];
            for k in i + 1..n {
                s -= l[(k, i)] * col[k];
            }
            col[i] = s / l[(i, i)];
        }
    }
    x
}

/// `T = (FᵀF + λI)⁻¹ FᵀH`.
pub fn fit_map(features: ArrayView2<f64>, embeddings: ArrayView2<f64>, lambda: f64) -> Result<LinearMap, MapError> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(MapError::InvalidLambda(lambda));
    }
    if features.nrows() != embeddings.nrows() || features.nrows() == 0 {
        return Err(MapError::ShapeMismatch(format!(
            "{} feature rows, {} embedding rows",
            features.nrows(),
            embeddings.nrows()
        )));
    }
    let mut gram = features.t().dot(&features);
    let scale = gram.diag().iter().fold(0.0f64, |a, v| a.max(*v));
    for i in 0..gram.nrows() {
        gram[(i, i)] += lambda;
    }
    let rank_tol = if lambda > 0.0 { 0.0 } else { 1e-12 * scale.max(f64::MIN_POSITIVE) };
    let l = cholesky(gram, rank_tol)?;
    let rhs = features.t().dot(&embeddings);
    Ok(LinearMap { t: cholesky_solve(&l, &rhs), lambda, standardization: None })
}

impl LinearMap {
    pub fn features(&self) -> usize {
        self.t.nrows()
    }

    pub fn embedding_dim(&self) -> usize {
        self.t.ncols()
    }

    /// `S = H Tᵀ`.
    pub fn represent(&self, embeddings: ArrayView2<f64>) -> Result<Array2<f64>, MapError> {
        if embeddings.ncols() != self.embedding_dim() {
            return Err(MapError::ShapeMismatch(format!(
                "embedding width {} but map expects {}",
                embeddings.ncols(),
                self.embedding_dim()
            )));
        }
        Ok(embeddings.dot(&self.t.t()))
    }

    /// Relative residual `‖(FᵀF + λI)T − FᵀH‖ / ‖FᵀH‖` of the normal equations.
    pub fn normal_residual(&self, features: ArrayView2<f64>, embeddings: ArrayView2<f64>) -> f64 {
        let rhs = features.t().dot(&embeddings);
        let lhs = features.t().dot(&features.dot(&self.t)) + &(&self.t * self.lambda);
        let num = (&lhs - &rhs).mapv(|v| v * v).sum().sqrt();
        let den = rhs.mapv(|v| v * v).sum().sqrt();
        if den == 0.0 {
            num
        } else {
            num / den
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array};

    #[test]
    fn identity_examples() {
        let f = Array2::<f64>::eye(2);
        let h = Array2::<f64>::eye(2) * 2.0;
        assert_eq!(fit_map(f.view(), h.view(), 0.0).unwrap().t, h);
        let m = fit_map(f.view(), h.view(), 1.0).unwrap();
        assert!((m.t - Array2::<f64>::eye(2)).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn rank_deficient_without_ridge_is_singular() {
        let f = arr2(&[[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]]);
        let h = arr2(&[[1.0], [2.0], [3.0]]);
        assert!(matches!(fit_map(f.view(), h.view(), 0.0), Err(MapError::SingularSystem { .. })));
        assert!(fit_map(f.view(), h.view(), 1.0).is_ok());
    }

    #[test]
    fn represent_examples() {
        let map = LinearMap { t: arr2(&[[1.0, 0.0], [0.0, 2.0]]), lambda: 1.0, standardization: None };
        let s = map.represent(arr2(&[[3.0, 5.0]]).view()).unwrap();
        assert_eq!(s, arr2(&[[3.0, 10.0]]));
        assert_eq!(map.represent(Array2::zeros((4, 2)).view()).unwrap(), Array2::<f64>::zeros((4, 2)));
        let id = LinearMap { t: Array2::eye(3), lambda: 1.0, standardization: None };
        let h = Array::from_shape_fn((2, 3), |(i, j)| (i * 3 + j) as f64);
        assert_eq!(id.represent(h.view()).unwrap(), h);
        assert!(matches!(map.represent(Array2::zeros((1, 3)).view()), Err(MapError::ShapeMismatch(_))));
    }

    #[test]
    fn standardize_examples() {
        let x = arr2(&[[1.0, 7.0], [3.0, 7.0]]);
        let (z, stats) = standardize(x.view(), None).unwrap();
        assert_eq!(z, arr2(&[[-1.0, 0.0], [1.0, 0.0]]));
        assert!(stats.constant[1] && stats.std[1] == 1.0);
        let (zt, _) = standardize(arr2(&[[5.0, 9.0]]).view(), Some(&stats)).unwrap();
        assert_eq!(zt, arr2(&[[3.0, 0.0]]));
    }

    #[test]
    fn larger_lambda_shrinks_the_map() {
        let f = Array::from_shape_fn((30, 4), |(i, j)| ((i * 7 + j * 13) % 17) as f64 - 8.0);
        let h = Array::from_shape_fn((30, 3), |(i, j)| ((i * 5 + j * 3) % 11) as f64);
        let mut prev = f64::INFINITY;
        for lambda in [0.0, 0.1, 1.0, 10.0, 100.0] {
            let norm = fit_map(f.view(), h.view(), lambda).unwrap().t.mapv(|v| v * v).sum().sqrt();
            assert!(norm <= prev + 1e-12);
            prev = norm;
        }
    }
}
