use super::matrix::Matrix;
use super::tape::{Tape, Var};
use super::NnError;
use crate::par;

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub passed: bool,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates whose ±h probes straddle an activation kink.
    pub skipped: usize,
}

/// Relative error with a floor so exactly-zero gradients do not blow up the ratio.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Compares reverse-mode gradients of the scalar built by `loss` against
/// central differences over every coordinate of every tensor in `params`.
///
/// `loss` receives the parameter handles in the same order as `params`.
pub fn finite_difference_check<F>(params: &[Matrix], loss: F, h: f64, tolerance: f64) -> Result<FdReport, NnError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NnError> + Sync,
{
    let eval = |ps: &[Matrix]| -> Result<(Tape, Var), NnError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().enumerate().map(|(i, p)| tape.param(i, p.clone())).collect();
        let out = loss(&mut tape, &vars)?;
        Ok((tape, out))
    };
    let (tape, out) = eval(params)?;
    let grads = tape.backward(out)?;
    let analytic = grads.collect(0, &params.iter().map(|p| p.shape()).collect::<Vec<_>>());
    let base_sig = tape.kink_signature().to_vec();

    let coords: Vec<(usize, usize)> =
        params.iter().enumerate().flat_map(|(i, p)| (0..p.len()).map(move |j| (i, j))).collect();

    let results = par::map(&coords, |&(i, j)| -> Result<Option<(f64, f64)>, NnError> {
        let mut ps = params.to_vec();
        let x0 = ps[i].data()[j];
        ps[i].data_mut()[j] = x0 + h;
        let (tp, op) = eval(&ps)?;
        ps[i].data_mut()[j] = x0 - h;
        let (tm, om) = eval(&ps)?;
        if tp.kink_signature() != tm.kink_signature() || tp.kink_signature() != base_sig.as_slice() {
            return Ok(None);
        }
        let numeric = (tp.scalar(op) - tm.scalar(om)) / (2.0 * h);
        let a = analytic[i].data()[j];
        Ok(Some((rel_err(a, numeric), (a - numeric).abs())))
    });

    let mut report = FdReport { passed: true, max_rel_err: 0.0, max_abs_err: 0.0, checked: 0, skipped: 0 };
    for r in results {
        match r? {
            Some((rel, abs)) => {
                report.checked += 1;
                report.max_rel_err = report.max_rel_err.max(rel);
                report.max_abs_err = report.max_abs_err.max(abs);
            }
            None => report.skipped += 1,
        }
    }
    report.passed = report.max_rel_err <= tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Mlp, MlpSpec, Parameters, Weight};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn x_input() -> Matrix {
        Matrix::from_rows(&[[0.4, -1.1, 0.7], [1.3, 0.2, -0.6]]).unwrap()
    }

    fn check_net(net: &Mlp, tol: f64) -> FdReport {
        let params: Vec<Matrix> = net.tensors().into_iter().cloned().collect();
        let x = x_input();
        finite_difference_check(
            &params,
            |t, vars| {
                let xv = t.constant(x.clone());
                let y = net.forward(t, xv, vars)?;
                let n = t.sq_norm_rows(y);
                t.mean(n)
            },
            1e-5,
            tol,
        )
        .unwrap()
    }

    #[test]
    fn linear_net_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::kaiming(MlpSpec::dense(2, 4, Activation::Identity), 3, 2, &mut rng).unwrap();
        let r = check_net(&net, 1e-8);
        assert!(r.passed, "{r:?}");
        assert_eq!(r.skipped, 0);
    }

    #[test]
    fn deep_leaky_net_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::kaiming(MlpSpec::dense(4, 5, Activation::LeakyRelu(0.2)), 3, 2, &mut rng).unwrap();
        let r = check_net(&net, 1e-6);
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn kink_is_skipped() {
        // Single hidden unit with pre-activation exactly 0 on the only sample.
        let mut net = Mlp::zeros(MlpSpec::dense(2, 1, Activation::LeakyRelu(0.2)), 1, 1).unwrap();
        net.layers_mut()[0].weight = Weight::Dense(Matrix::filled(1, 1, 1.0));
        net.layers_mut()[1].weight = Weight::Dense(Matrix::filled(1, 1, 1.0));
        let params: Vec<Matrix> = net.tensors().into_iter().cloned().collect();
        let r = finite_difference_check(
            &params,
            |t, vars| {
                let xv = t.constant(Matrix::filled(1, 1, 0.0));
                let y = net.forward(t, xv, vars)?;
                Ok(t.sum(y))
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(r.skipped > 0, "{r:?}");
    }
}
