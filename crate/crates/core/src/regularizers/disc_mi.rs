//! MI from a joint-vs-shuffled discriminator's clamped log-odds.

use rand::Rng;

use super::adversary::{derangement, Discriminator};
use super::{fit_steps, Estimator, FitConfig, MiEstimate};
use crate::nn::{AdamState, Bind, Matrix, Parameters, Tape, Var};
use crate::world::stream_rng;
use crate::{CaError, Result};

/// Logit bound matching a probability clamp of `[1e-7, 1 − 1e-7]`.
pub fn logit_bound() -> f64 {
    ((1.0 - 1e-7) / 1e-7f64).ln()
}

/// `0.5·BCE(D([c ⊕ s]), 1) + 0.5·BCE(D([c ⊕ s[perm]]), 0)`
pub fn disc_mi_train_loss(t: &mut Tape, d: &Discriminator, vars: &[Var], c: Var, s: Var, perm: &[usize]) -> Result<Var> {
    let joint = t.concat_cols(c, s)?;
    let zj = d.net.forward(t, joint, vars)?;
    let shuffled = t.permute_rows(s, perm)?;
    let marg = t.concat_cols(c, shuffled)?;
    let zm = d.net.forward(t, marg, vars)?;
    let n = perm.len();
    let lj = t.bce_with_logits(zj, &vec![1.0; n])?;
    let lm = t.bce_with_logits(zm, &vec![0.0; n])?;
    let sum = t.add(lj, lm)?;
    Ok(t.scale(sum, 0.5))
}

/// Mean over joint samples of `ReLU(ln(D / (1 − D)))` with `D` clamped.
pub fn disc_mi_value(t: &mut Tape, d: &Discriminator, vars: &[Var], c: Var, s: Var) -> Result<Var> {
    let joint = t.concat_cols(c, s)?;
    let z = d.net.forward(t, joint, vars)?;
    let b = logit_bound();
    let z = t.clamp(z, -b, b);
    let z = t.relu(z);
    Ok(t.mean(z)?)
}

/// Trains `d` joint-vs-shuffled for `train_steps` batches, then reports the clamped log-odds estimate.
pub fn disc_mi_estimate(
    c: &Matrix,
    s: &Matrix,
    d: &mut Discriminator,
    train_steps: usize,
    fit: FitConfig,
    seed: u64,
) -> Result<MiEstimate> {
    let n = c.rows();
    if s.rows() != n || n < 2 {
        return Err(CaError::Contract("disc-MI needs at least two paired samples".into()));
    }
    let mut rng = stream_rng(seed, 0);
    let mut adam = AdamState::new(fit.lr, &d.shapes());
    let perm_seed: u64 = rng.random();
    fit_steps(d, &mut adam, n, fit.batch.min(n), train_steps, &mut rng, |t, net, vars, idx| {
        let perm = derangement(idx.len(), &mut stream_rng(perm_seed, idx[0] as u64));
        let cb = t.constant(c.select_rows(idx));
        let sb = t.constant(s.select_rows(idx));
        disc_mi_train_loss(t, net, vars, cb, sb, &perm)
    })?;
    let mut t = Tape::new();
    let vars = t.bind(d, Bind::Frozen);
    let (cv, sv) = (t.constant(c.clone()), t.constant(s.clone()));
    let v = disc_mi_value(&mut t, d, &vars, cv, sv)?;
    Ok(MiEstimate { estimator: Estimator::Disc, value_nats: t.scalar(v), n, param: fit.batch, jittered: false })
}
