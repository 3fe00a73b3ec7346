//! Kraskov–Stögbauer–Grassberger k-nearest-neighbour MI estimator (first variant).

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::digamma::digamma;
use super::{Estimator, MiEstimate};
use crate::nn::Matrix;
use crate::world::stream_rng;
use crate::{par, CaError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnnNorm {
    /// Max-norm in every space; the joint distance is the larger of the two marginal distances.
    Chebyshev,
    /// Euclidean in every space; the joint distance is `sqrt(d_c² + d_s²)`.
    Euclidean,
}

const JITTER: f64 = 1e-10;

fn dist(a: &[f64], b: &[f64], norm: KnnNorm) -> f64 {
    match norm {
        KnnNorm::Chebyshev => a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max),
        KnnNorm::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
    }
}

/// `ψ(k) − mean[ψ(n_c+1) + ψ(n_s+1)] + ψ(N)` with strict marginal counts inside ε_i.
pub fn knn_mi_estimate(c: &Matrix, s: &Matrix, k: usize, norm: KnnNorm) -> Result<MiEstimate> {
    let n = c.rows();
    if s.rows() != n {
        return Err(CaError::Contract(format!("unpaired samples: {n} vs {}", s.rows())));
    }
    if k == 0 || n <= k {
        return Err(CaError::Contract(format!("knn MI needs n > k >= 1 (n = {n}, k = {k})")));
    }
    let (value, ties) = ksg(c, s, k, norm);
    if !ties {
        return Ok(MiEstimate { estimator: Estimator::Knn, value_nats: value, n, param: k, jittered: false });
    }
    let mut rng = stream_rng(0x6b6e6e, 0);
    let mut jitter = |m: &Matrix| {
        let data = m.data().iter().map(|&v| v + JITTER * (rng.random::<f64>() - 0.5) * 2.0).collect();
        Matrix::from_vec(m.rows(), m.cols(), data).expect("same shape")
    };
    let (cj, sj) = (jitter(c), jitter(s));
    let (value, _) = ksg(&cj, &sj, k, norm);
    Ok(MiEstimate { estimator: Estimator::Knn, value_nats: value, n, param: k, jittered: true })
}

/// Returns the estimate and whether any sample had a zero k-NN radius.
fn ksg(c: &Matrix, s: &Matrix, k: usize, norm: KnnNorm) -> (f64, bool) {
    let n = c.rows();
    let per_point = par::map_range(n, |i| {
        let ci = c.row(i);
        let si = s.row(i);
        let mut dc = Vec::with_capacity(n - 1);
        let mut ds = Vec::with_capacity(n - 1);
        let mut dj = Vec::with_capacity(n - 1);
        for j in 0..n {
            if j == i {
                continue;
            }
            let a = dist(ci, c.row(j), norm);
            let b = dist(si, s.row(j), norm);
            dc.push(a);
            ds.push(b);
            dj.push(match norm {
                KnnNorm::Chebyshev => a.max(b),
                KnnNorm::Euclidean => (a * a + b * b).sqrt(),
            });
        }
        let mut sorted = dj.clone();
        let (_, eps, _) = sorted.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
        let eps = *eps;
        let nc = dc.iter().filter(|&&d| d < eps).count();
        let ns = ds.iter().filter(|&&d| d < eps).count();
        (digamma(nc as f64 + 1.0) + digamma(ns as f64 + 1.0), eps == 0.0)
    });
    let ties = per_point.iter().any(|p| p.1);
    let terms: Vec<f64> = per_point.iter().map(|p| p.0).collect();
    let mean = crate::nn::pairwise_sum(&terms) / n as f64;
    (digamma(k as f64) - mean + digamma(n as f64), ties)
}

/// Centers a block and rescales it to unit mean squared row norm.
pub fn normalize_block(m: &Matrix) -> Matrix {
    let mu = m.column_means();
    let mut out = m.clone();
    for r in 0..out.rows() {
        for (v, u) in out.row_mut(r).iter_mut().zip(&mu) {
            *v -= u;
        }
    }
    let ms = out.sq_norm() / out.rows().max(1) as f64;
    if ms > 0.0 {
        out = out.scale(1.0 / ms.sqrt());
    }
    out
}
