//! Principal directions of learned salient features.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::nn::Matrix;
use crate::{CaError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    /// Unit-norm components, largest variance first.
    pub components: Vec<Vec<f64>>,
    pub explained_variances: Vec<f64>,
    pub mean: Vec<f64>,
    /// Set when the input has no variance at all; the components are then arbitrary.
    pub degenerate: bool,
}

/// Top `m` principal components of `features`. Each component is signed so that its
/// largest-magnitude coordinate is positive.
pub fn pca_salient(features: &Matrix, m: usize) -> Result<PcaBasis> {
    let (n, d) = features.shape();
    if m == 0 || m > d || n <= m {
        return Err(CaError::Contract(format!("pca needs n > m >= 1 and m <= dim (n = {n}, m = {m}, dim = {d})")));
    }
    let mean = features.column_means();
    let mut centered = features.clone();
    for r in 0..n {
        for (v, mu) in centered.row_mut(r).iter_mut().zip(&mean) {
            *v -= mu;
        }
    }
    let cov = centered.t_matmul(&centered)?.scale(1.0 / (n - 1) as f64);
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, cov.data()));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut components = Vec::with_capacity(m);
    let mut explained_variances = Vec::with_capacity(m);
    for &k in order.iter().take(m) {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        explained_variances.push(eig.eigenvalues[k].max(0.0));
    }
    let degenerate = cov.data().iter().all(|&c| c == 0.0);
    Ok(PcaBasis { components, explained_variances, mean, degenerate })
}
