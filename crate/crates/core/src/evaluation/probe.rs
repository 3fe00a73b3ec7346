//! Linear probes: stratified k-fold logistic regression on frozen features.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::nn::{sigmoid, Matrix};
use crate::world::stream_rng;
use crate::{par, CaError, Result};

pub const PROBE_ITERATIONS: usize = 500;
pub const PROBE_L2: f64 = 1e-4;
const MIN_PER_CLASS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSpace {
    Common,
    Salient,
    Salient1,
    Salient2,
}

impl FeatureSpace {
    pub fn symbol(self) -> &'static str {
        match self {
            FeatureSpace::Common => "c",
            FeatureSpace::Salient => "s",
            FeatureSpace::Salient1 => "s1",
            FeatureSpace::Salient2 => "s2",
        }
    }
}

/// Held-out accuracies of one probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeFit {
    pub fold_accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub space: FeatureSpace,
    pub attribute: String,
    pub fold_accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl ProbeResult {
    pub fn new(space: FeatureSpace, attribute: &str, fit: ProbeFit) -> Self {
        Self { space, attribute: attribute.into(), fold_accuracies: fit.fold_accuracies, mean: fit.mean, std: fit.std }
    }
}

/// Assigns each sample a fold so every fold gets a near-equal share of both classes.
pub fn stratified_folds(labels: &[u8], folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = stream_rng(seed, 0);
    let mut out = vec![0; labels.len()];
    let mut next = 0;
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            out[i] = next % folds;
            next += 1;
        }
    }
    out
}

/// Stratified `folds`-fold logistic-regression probe. Features are standardized with
/// training-fold statistics; folds are fitted concurrently and reported in fold order.
pub fn fit_probe(features: &Matrix, labels: &[u8], folds: usize, seed: u64) -> Result<ProbeFit> {
    let n = features.rows();
    if labels.len() != n {
        return Err(CaError::Contract(format!("{n} feature rows but {} labels", labels.len())));
    }
    if folds < 2 {
        return Err(CaError::Contract("a probe needs at least two folds".into()));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(CaError::Contract("probe labels must be binary".into()));
    }
    let ones = labels.iter().filter(|&&l| l == 1).count();
    if ones.min(n - ones) < MIN_PER_CLASS.max(folds) {
        return Err(CaError::Contract(format!("probe needs >= {MIN_PER_CLASS} samples per class, got {ones}/{}", n - ones)));
    }
    let assignment = stratified_folds(labels, folds, seed);
    let fold_accuracies = par::map_range(folds, |f| {
        let train: Vec<usize> = (0..n).filter(|&i| assignment[i] != f).collect();
        let test: Vec<usize> = (0..n).filter(|&i| assignment[i] == f).collect();
        fold_accuracy(features, labels, &train, &test)
    });
    let mean = fold_accuracies.iter().sum::<f64>() / folds as f64;
    let var = fold_accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / folds as f64;
    Ok(ProbeFit { fold_accuracies, mean, std: var.sqrt() })
}

fn fold_accuracy(x: &Matrix, labels: &[u8], train: &[usize], test: &[usize]) -> f64 {
    let xt = x.select_rows(train);
    let mu = xt.column_means();
    let sd: Vec<f64> = (0..x.cols())
        .map(|j| {
            let v = (0..xt.rows()).map(|r| (xt.get(r, j) - mu[j]).powi(2)).sum::<f64>() / xt.rows() as f64;
            if v > 0.0 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let standardize = |m: &Matrix| augmented(m, &mu, &sd);
    let y: Vec<f64> = train.iter().map(|&i| f64::from(labels[i])).collect();
    let theta = logistic_gd(&standardize(&xt), &y, PROBE_ITERATIONS, PROBE_L2);
    let z = standardize(&x.select_rows(test)).matmul(&theta).expect("probe dims");
    let correct = test.iter().zip(z.data()).filter(|(&i, &zi)| u8::from(zi > 0.0) == labels[i]).count();
    correct as f64 / test.len() as f64
}

/// Standardized features with a trailing column of ones.
fn augmented(m: &Matrix, mu: &[f64], sd: &[f64]) -> Matrix {
    let d = m.cols();
    let mut out = Matrix::zeros(m.rows(), d + 1);
    for r in 0..m.rows() {
        let row = out.row_mut(r);
        for j in 0..d {
            row[j] = (m.get(r, j) - mu[j]) / sd[j];
        }
        row[d] = 1.0;
    }
    out
}

/// Full-batch gradient descent on the mean logistic loss plus `l2/2·‖w‖²` (bias unpenalized).
/// Step size is the inverse smoothness bound `1 / (λ_max(XᵀX/n)/4 + l2)`.
pub fn logistic_gd(xa: &Matrix, y: &[f64], iterations: usize, l2: f64) -> Matrix {
    let (n, d) = xa.shape();
    let gram = xa.t_matmul(xa).expect("gram").scale(1.0 / n as f64);
    let lr = 1.0 / (0.25 * top_eigenvalue(&gram) + l2);
    let mut theta = Matrix::zeros(d, 1);
    for _ in 0..iterations {
        let z = xa.matmul(&theta).expect("probe dims");
        let resid: Vec<f64> = z.data().iter().zip(y).map(|(&zi, &yi)| sigmoid(zi) - yi).collect();
        let resid = Matrix::from_vec(n, 1, resid).expect("residual shape");
        let mut g = xa.t_matmul(&resid).expect("grad dims").scale(1.0 / n as f64);
        for j in 0..d - 1 {
            let v = g.get(j, 0) + l2 * theta.get(j, 0);
            g.set(j, 0, v);
        }
        theta = theta.sub(&g.scale(lr)).expect("theta dims");
    }
    theta
}

/// Largest eigenvalue of a symmetric positive semi-definite matrix.
fn top_eigenvalue(m: &Matrix) -> f64 {
    let d = m.rows();
    let dm = nalgebra::DMatrix::from_row_slice(d, d, m.data());
    let ev = nalgebra::SymmetricEigen::new(dm).eigenvalues;
    ev.iter().copied().fold(0.0, f64::max).max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn folds_are_stratified() {
        let labels: Vec<u8> = (0..50).map(|i| u8::from(i < 20)).collect();
        let f = stratified_folds(&labels, 5, 3);
        for k in 0..5 {
            let ones = (0..50).filter(|&i| f[i] == k && labels[i] == 1).count();
            let zeros = (0..50).filter(|&i| f[i] == k && labels[i] == 0).count();
            assert_eq!((ones, zeros), (4, 6));
        }
    }

    #[test]
    fn rejects_tiny_classes() {
        let x = Matrix::zeros(30, 2);
        let labels: Vec<u8> = (0..30).map(|i| u8::from(i < 5)).collect();
        assert!(fit_probe(&x, &labels, 5, 0).is_err());
    }
}
