mod common;

use ca_core::nn::{finite_difference_check, Activation, Matrix, Mlp, MlpSpec, Tape};
use common::{fd_checks, run_fd, FD_INSTANCES, FD_TOL};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_loss_matches_finite_differences() {
    let mut failures = Vec::new();
    for (name, check) in fd_checks() {
        let s = run_fd(name, check);
        println!("{name}: {} instances, {} coords, {} skipped, worst rel {:.2e}", s.instances, s.checked, s.skipped, s.worst_rel);
        assert_eq!(s.instances, FD_INSTANCES);
        if !s.passed() {
            failures.push(format!("{name}: {:.3e}", s.worst_rel));
        }
    }
    assert!(failures.is_empty(), "over {FD_TOL}: {failures:?}");
}

#[test]
fn linear_net_is_exact_to_fd_precision() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let net = Mlp::kaiming(MlpSpec::dense(1, 4, Activation::Identity), 3, 2, &mut rng).unwrap();
    let x = common::gaussian(&mut rng, 5, 3);
    let params: Vec<Matrix> = ca_core::nn::Parameters::tensors(&net).into_iter().cloned().collect();
    let r = finite_difference_check(
        &params,
        |t: &mut Tape, vars| {
            let xv = t.constant(x.clone());
            let y = net.forward(t, xv, vars)?;
            let sq = t.sq_norm_rows(y);
            t.mean(sq)
        },
        1e-5,
        1e-8,
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}
