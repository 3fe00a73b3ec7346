//! Common-consistency discriminator and independence regressor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Activation, Bind, Matrix, Mlp, MlpSpec, Parameters, Tape, Var};
use crate::{CaError, Result};

/// One-hidden-layer ReLU classifier with a scalar logit output.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub net: Mlp,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, width: usize, rng: &mut R) -> Result<Self> {
        Ok(Self { net: Mlp::kaiming(MlpSpec::dense(2, width, Activation::Relu), in_dim, 1, rng)? })
    }

    /// Logits `n × 1`.
    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.net.predict(x)?)
    }

    /// `D(x) ∈ (0, 1)` per row.
    pub fn probabilities(&self, x: &Matrix) -> Result<Vec<f64>> {
        Ok(self.logits(x)?.data().iter().map(|&z| crate::nn::sigmoid(z)).collect())
    }
}

impl Parameters for Discriminator {
    fn tensors(&self) -> Vec<&Matrix> {
        self.net.tensors()
    }
    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.net.tensors_mut()
    }
}

/// Predicts salient factors from common ones.
#[derive(Clone, Debug, PartialEq)]
pub struct Regressor {
    pub net: Mlp,
}

impl Regressor {
    pub fn new<R: Rng + ?Sized>(d_w: usize, depth: usize, width: usize, rng: &mut R) -> Result<Self> {
        Ok(Self { net: Mlp::kaiming(MlpSpec::dense(depth, width, Activation::LeakyRelu(0.2)), d_w, d_w, rng)? })
    }
}

impl Parameters for Regressor {
    fn tensors(&self) -> Vec<&Matrix> {
        self.net.tensors()
    }
    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.net.tensors_mut()
    }
}

/// How the separator tries to fool the discriminator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoolD {
    /// BCE with swapped labels: c_x should look like Y and c_y like X.
    LabelFlip,
    /// BCE toward 1/2 on both domains, minus ln 2 so the optimum is 0.
    Confusion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiscSide {
    TrainD,
    FoolD(FoolD),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegressorSide {
    TrainR,
    FoolR,
}

/// How the separator tries to fool the regressor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoolR {
    /// Maximize the regression error.
    Negate,
    /// Pull predictions toward the batch-mean target, so they carry no per-sample information.
    Confusion,
}

fn non_empty(t: &Tape, v: Var) -> Result<()> {
    if t.value(v).rows() == 0 {
        return Err(CaError::Contract("empty batch".into()));
    }
    Ok(())
}

/// Discriminator objective on common factors. Training labels: Y → 1, X → 0.
/// Returns the average of the two per-domain batch means.
pub fn disc_adversarial_loss(
    t: &mut Tape,
    d: &Discriminator,
    d_vars: &[Var],
    c_x: Var,
    c_y: Var,
    side: DiscSide,
) -> Result<Var> {
    non_empty(t, c_x)?;
    non_empty(t, c_y)?;
    let zx = d.net.forward(t, c_x, d_vars)?;
    let zy = d.net.forward(t, c_y, d_vars)?;
    let (nx, ny) = (t.value(zx).rows(), t.value(zy).rows());
    let (tx, ty) = match side {
        DiscSide::TrainD => (0.0, 1.0),
        DiscSide::FoolD(FoolD::LabelFlip) => (1.0, 0.0),
        DiscSide::FoolD(FoolD::Confusion) => (0.5, 0.5),
    };
    let lx = t.bce_with_logits(zx, &vec![tx; nx])?;
    let ly = t.bce_with_logits(zy, &vec![ty; ny])?;
    let sum = t.add(lx, ly)?;
    let mut out = t.scale(sum, 0.5);
    if side == DiscSide::FoolD(FoolD::Confusion) {
        let shift = t.constant(Matrix::filled(1, 1, std::f64::consts::LN_2));
        out = t.sub(out, shift)?;
    }
    Ok(out)
}

/// `E‖R(c_y) − s_y‖² + E‖R(c_x)‖²` for training R; its negation for the separator.
pub fn regressor_adversarial_loss(
    t: &mut Tape,
    r: &Regressor,
    r_vars: &[Var],
    c_x: Var,
    c_y: Var,
    s_y: Var,
    side: RegressorSide,
) -> Result<Var> {
    non_empty(t, c_x)?;
    non_empty(t, c_y)?;
    let py = r.net.forward(t, c_y, r_vars)?;
    let px = r.net.forward(t, c_x, r_vars)?;
    let ey = t.sub(py, s_y)?;
    let ey = t.sq_norm_rows(ey);
    let ey = t.mean(ey)?;
    let ex = t.sq_norm_rows(px);
    let ex = t.mean(ex)?;
    let total = t.add(ey, ex)?;
    Ok(match side {
        RegressorSide::TrainR => total,
        RegressorSide::FoolR => t.scale(total, -1.0),
    })
}

/// `E‖R(c_x) − t_x‖² + E‖R(c_y) − t_y‖²`: each domain's common part regressed onto its own salient target.
#[allow(clippy::too_many_arguments)]
pub fn regressor_pair_loss(
    t: &mut Tape,
    r: &Regressor,
    r_vars: &[Var],
    c_x: Var,
    t_x: Var,
    c_y: Var,
    t_y: Var,
    side: RegressorSide,
) -> Result<Var> {
    non_empty(t, c_x)?;
    non_empty(t, c_y)?;
    let mut parts = Vec::with_capacity(2);
    for (c, target) in [(c_x, t_x), (c_y, t_y)] {
        let p = r.net.forward(t, c, r_vars)?;
        let e = t.sub(p, target)?;
        let e = t.sq_norm_rows(e);
        parts.push(t.mean(e)?);
    }
    let total = t.add(parts[0], parts[1])?;
    Ok(match side {
        RegressorSide::TrainR => total,
        RegressorSide::FoolR => t.scale(total, -1.0),
    })
}

/// `E‖R(c_x) − μ_x‖² + E‖R(c_y) − μ_y‖²` with `μ` the column means of each target batch, held constant.
pub fn regressor_confusion_loss(
    t: &mut Tape,
    r: &Regressor,
    r_vars: &[Var],
    c_x: Var,
    t_x: &Matrix,
    c_y: Var,
    t_y: &Matrix,
) -> Result<Var> {
    non_empty(t, c_x)?;
    non_empty(t, c_y)?;
    let mut parts = Vec::with_capacity(2);
    for (c, target) in [(c_x, t_x), (c_y, t_y)] {
        let mu = target.column_means();
        let rows = t.value(c).rows();
        let mu = t.constant(Matrix::from_vec(rows, mu.len(), mu.repeat(rows))?);
        let p = r.net.forward(t, c, r_vars)?;
        let e = t.sub(p, mu)?;
        let e = t.sq_norm_rows(e);
        parts.push(t.mean(e)?);
    }
    Ok(t.add(parts[0], parts[1])?)
}

/// Value of [`disc_adversarial_loss`] with every network frozen.
pub fn disc_loss_value(d: &Discriminator, c_x: &Matrix, c_y: &Matrix, side: DiscSide) -> Result<f64> {
    let mut t = Tape::new();
    let vars = t.bind(d, Bind::Frozen);
    let (x, y) = (t.constant(c_x.clone()), t.constant(c_y.clone()));
    let l = disc_adversarial_loss(&mut t, d, &vars, x, y, side)?;
    Ok(t.scalar(l))
}

/// Value of [`regressor_adversarial_loss`] with every network frozen.
pub fn regressor_loss_value(r: &Regressor, c_x: &Matrix, c_y: &Matrix, s_y: &Matrix, side: RegressorSide) -> Result<f64> {
    let mut t = Tape::new();
    let vars = t.bind(r, Bind::Frozen);
    let (x, y, s) = (t.constant(c_x.clone()), t.constant(c_y.clone()), t.constant(s_y.clone()));
    let l = regressor_adversarial_loss(&mut t, r, &vars, x, y, s, side)?;
    Ok(t.scalar(l))
}

/// A random cyclic permutation (Sattolo), so no row keeps its partner when n ≥ 2.
pub fn derangement<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    p
}

/// Re-pairs `s_batch` with `c_batch` by a seeded derangement of the rows of `s`.
pub fn shuffle_pairs(c_batch: &Matrix, s_batch: &Matrix, seed: u64) -> Result<Matrix> {
    if c_batch.rows() != s_batch.rows() {
        return Err(CaError::Contract("shuffle_pairs needs equally long batches".into()));
    }
    if s_batch.rows() < 2 {
        return Err(CaError::Contract("shuffle_pairs needs at least two rows".into()));
    }
    let perm = derangement(s_batch.rows(), &mut ChaCha8Rng::seed_from_u64(seed));
    Ok(s_batch.select_rows(&perm))
}
