//! Donsker–Varadhan lower bound with a learned critic.

use rand::Rng;

use super::adversary::derangement;
use super::{fit_steps, Estimator, FitConfig, MiEstimate};
use crate::nn::{Activation, AdamState, Bind, Matrix, Mlp, MlpSpec, Parameters, Tape, Var};
use crate::world::stream_rng;
use crate::{CaError, Result};

/// Scalar critic `T(c, s)` over the concatenation `[c ⊕ s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MineCritic {
    pub net: Mlp,
}

impl MineCritic {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, width: usize, rng: &mut R) -> Result<Self> {
        Ok(Self { net: Mlp::kaiming(MlpSpec::dense(2, width, Activation::Relu), in_dim, 1, rng)? })
    }

    pub fn zeros(in_dim: usize, width: usize) -> Result<Self> {
        Ok(Self { net: Mlp::zeros(MlpSpec::dense(2, width, Activation::Relu), in_dim, 1)? })
    }
}

impl Parameters for MineCritic {
    fn tensors(&self) -> Vec<&Matrix> {
        self.net.tensors()
    }
    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.net.tensors_mut()
    }
}

/// `mean T(c, s) − ln mean exp T(c, s[perm])`.
pub fn mine_objective(
    t: &mut Tape,
    critic: &MineCritic,
    vars: &[Var],
    c: Var,
    s: Var,
    perm: &[usize],
) -> Result<Var> {
    let joint = t.concat_cols(c, s)?;
    let tj = critic.net.forward(t, joint, vars)?;
    let tj = t.mean(tj)?;
    let shuffled = t.permute_rows(s, perm)?;
    let marg = t.concat_cols(c, shuffled)?;
    let tm = critic.net.forward(t, marg, vars)?;
    let lme = t.log_mean_exp(tm)?;
    Ok(t.sub(tj, lme)?)
}

/// DV bound of `critic` on the full sample, re-paired by a seeded derangement.
pub fn mine_value(critic: &MineCritic, c: &Matrix, s: &Matrix, seed: u64) -> Result<f64> {
    let perm = derangement(c.rows(), &mut stream_rng(seed, 1));
    let mut t = Tape::new();
    let vars = t.bind(critic, Bind::Frozen);
    let (cv, sv) = (t.constant(c.clone()), t.constant(s.clone()));
    let v = mine_objective(&mut t, critic, &vars, cv, sv, &perm)?;
    Ok(t.scalar(v))
}

/// Trains `critic` to maximize the DV bound for `train_steps` batches, then reports the bound.
pub fn mine_estimate(
    c: &Matrix,
    s: &Matrix,
    critic: &mut MineCritic,
    train_steps: usize,
    fit: FitConfig,
    seed: u64,
) -> Result<MiEstimate> {
    let n = c.rows();
    if s.rows() != n {
        return Err(CaError::Contract("unpaired samples".into()));
    }
    if fit.batch < 16 {
        return Err(CaError::Contract(format!("MINE batch size {} is below 16", fit.batch)));
    }
    let mut rng = stream_rng(seed, 0);
    let mut adam = AdamState::new(fit.lr, &critic.shapes());
    let perm_seed: u64 = rng.random();
    fit_steps(critic, &mut adam, n, fit.batch, train_steps, &mut rng, |t, net, vars, idx| {
        let perm = derangement(idx.len(), &mut stream_rng(perm_seed, idx[0] as u64));
        let cb = t.constant(c.select_rows(idx));
        let sb = t.constant(s.select_rows(idx));
        let v = mine_objective(t, net, vars, cb, sb, &perm)?;
        Ok(t.scale(v, -1.0))
    })?;
    let value = mine_value(critic, c, s, seed)?;
    Ok(MiEstimate { estimator: Estimator::Mine, value_nats: value, n, param: fit.batch, jittered: false })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_critic_gives_zero() {
        let critic = MineCritic::zeros(2, 8).unwrap();
        let c = Matrix::from_rows(&[[1.0], [2.0], [3.0]]).unwrap();
        assert_eq!(mine_value(&critic, &c, &c, 0).unwrap(), 0.0);
    }

    #[test]
    fn small_batch_rejected() {
        let mut critic = MineCritic::zeros(2, 8).unwrap();
        let c = Matrix::zeros(40, 1);
        let fit = FitConfig { lr: 1e-3, batch: 8 };
        assert!(mine_estimate(&c, &c, &mut critic, 1, fit, 0).is_err());
    }
}
