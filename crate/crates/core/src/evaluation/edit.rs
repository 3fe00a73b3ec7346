//! Salient editing: swaps scored against the world's oracle, PCA traversal and interpolation.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::pca::PcaBasis;
use super::Factorize;
use crate::container::write_atomic;
use crate::nn::Matrix;
use crate::world::{LabeledDataset, World};
use crate::{CaError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwapScore {
    /// `mean ‖G*(ĉ_x + ŝ_y) − oracle_swap(x, y)‖²`
    pub swap_mse: f64,
    /// `mean ‖G*(ĉ_x + ŝ_x) − clean(x)‖²`
    pub recon_mse: f64,
    /// `mean ‖G*(w_x) − oracle_swap(x, y)‖²`: leaving x unedited.
    pub baseline_mse: f64,
}

impl SwapScore {
    pub fn ratio(&self) -> f64 {
        self.swap_mse / self.baseline_mse
    }
}

fn mean_sq_rows(a: &Matrix, b: &Matrix) -> Result<f64> {
    let d = a.sub(b)?;
    Ok(crate::nn::pairwise_sum(&d.row_sq_norms()) / a.rows().max(1) as f64)
}

/// Observations `G*(ĉ_x + ŝ_y)` for paired latent rows.
pub fn swap_observations<F: Factorize + ?Sized>(sep: &F, world: &World, w_x: &Matrix, w_y: &Matrix) -> Result<Matrix> {
    let fx = sep.factors(w_x)?;
    let fy = sep.factors(w_y)?;
    let (xy, _) = crate::separator::swap(&fx, &fy)?;
    Ok(world.observe(&xy))
}

/// Observations `G*(ĉ)`: what remains once the salient part is dropped.
pub fn common_reconstruction<F: Factorize + ?Sized>(sep: &F, world: &World, w: &Matrix) -> Result<Matrix> {
    Ok(world.observe(&sep.factors(w)?.c))
}

pub fn swap_score<F: Factorize + ?Sized>(sep: &F, world: &World, x: &LabeledDataset, y: &LabeledDataset) -> Result<SwapScore> {
    if x.len() != y.len() {
        return Err(CaError::Contract(format!("swap needs paired sets, got {} and {}", x.len(), y.len())));
    }
    let oracle = world.oracle_swap_batch(x, y)?;
    let (w_x, w_y) = (&x.data.latents, &y.data.latents);
    let fx = sep.factors(w_x)?;
    let swapped = swap_observations(sep, world, w_x, w_y)?;
    let recon = world.observe(&fx.c.add(&fx.salient_total()?)?);
    Ok(SwapScore {
        swap_mse: mean_sq_rows(&swapped, &oracle)?,
        recon_mse: mean_sq_rows(&recon, &world.clean_observations(x))?,
        baseline_mse: mean_sq_rows(&world.observe(w_x), &oracle)?,
    })
}

/// `G*(ĉ_x + α·σ_j·v_j)` for each α, one row per α.
pub fn traverse_salient<F: Factorize + ?Sized>(
    sep: &F,
    world: &World,
    x_sample: &[f64],
    basis: &PcaBasis,
    direction: usize,
    alphas: &[f64],
) -> Result<Matrix> {
    let v = basis.components.get(direction).ok_or_else(|| {
        CaError::Contract(format!("direction {direction} is outside the {} computed components", basis.components.len()))
    })?;
    if alphas.iter().any(|a| !a.is_finite()) {
        return Err(CaError::Contract("traversal grid must be finite".into()));
    }
    let sigma = basis.explained_variances[direction].sqrt();
    let c = sep.factors(&Matrix::row_vector(x_sample))?.c;
    if c.cols() != v.len() {
        return Err(CaError::Compat(format!("basis has dim {}, factors have {}", v.len(), c.cols())));
    }
    let mut lat = Matrix::zeros(alphas.len(), c.cols());
    for (r, &a) in alphas.iter().enumerate() {
        for (k, out) in lat.row_mut(r).iter_mut().enumerate() {
            *out = c.get(0, k) + a * sigma * v[k];
        }
    }
    Ok(world.observe(&lat))
}

/// `G*(ĉ_x + α·ŝ_y)` for each α in `[0, 1]`.
pub fn interpolate_salient<F: Factorize + ?Sized>(
    sep: &F,
    world: &World,
    x_sample: &[f64],
    y_sample: &[f64],
    alphas: &[f64],
) -> Result<Matrix> {
    if alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(CaError::Contract("interpolation weights must lie in [0, 1]".into()));
    }
    let c = sep.factors(&Matrix::row_vector(x_sample))?.c;
    let s = sep.factors(&Matrix::row_vector(y_sample))?.salient_total()?;
    let mut lat = Matrix::zeros(alphas.len(), c.cols());
    for (r, &a) in alphas.iter().enumerate() {
        for (k, out) in lat.row_mut(r).iter_mut().enumerate() {
            *out = c.get(0, k) + a * s.get(0, k);
        }
    }
    Ok(world.observe(&lat))
}

/// Largest residual of a per-coordinate least-squares line `obs ≈ a + b·α`.
pub fn affine_residual(alphas: &[f64], rows: &Matrix) -> f64 {
    let n = alphas.len() as f64;
    let ma = alphas.iter().sum::<f64>() / n;
    let saa: f64 = alphas.iter().map(|a| (a - ma) * (a - ma)).sum();
    let mut worst = 0.0f64;
    for k in 0..rows.cols() {
        let mo = (0..rows.rows()).map(|r| rows.get(r, k)).sum::<f64>() / n;
        let sao: f64 = alphas.iter().enumerate().map(|(r, a)| (a - ma) * (rows.get(r, k) - mo)).sum();
        let slope = if saa > 0.0 { sao / saa } else { 0.0 };
        for (r, a) in alphas.iter().enumerate() {
            worst = worst.max((rows.get(r, k) - (mo + slope * (a - ma))).abs());
        }
    }
    worst
}

/// Writes rows as `alpha,obs_0,…,obs_{d−1}`.
pub fn write_alpha_csv(path: &Path, alphas: &[f64], rows: &Matrix) -> Result<()> {
    write_atomic(path, alpha_csv(alphas, rows).as_bytes())
}

pub fn alpha_csv(alphas: &[f64], rows: &Matrix) -> String {
    alpha_csv_rows("alpha", alphas, rows)
}

/// Rows as `key,obs_0,…`, one key per row.
pub fn alpha_csv_rows(key: &str, alphas: &[f64], rows: &Matrix) -> String {
    let mut s = String::from(key);
    for k in 0..rows.cols() {
        let _ = write!(s, ",obs_{k}");
    }
    s.push('\n');
    for (r, a) in alphas.iter().enumerate() {
        let _ = write!(s, "{a}");
        for v in rows.row(r) {
            let _ = write!(s, ",{v:e}");
        }
        s.push('\n');
    }
    s
}

/// Parses `a:b:step` into an inclusive grid.
pub fn parse_alpha_range(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || CaError::Config(format!("alpha range {spec:?} is not of the form start:end:step"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let p: Vec<f64> = parts.iter().map(|p| p.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
    let (a, b, step) = (p[0], p[1], p[2]);
    if !(step > 0.0) || !a.is_finite() || !b.is_finite() || b < a {
        return Err(bad());
    }
    let count = ((b - a) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|i| a + i as f64 * step).collect())
}
