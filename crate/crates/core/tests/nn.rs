mod common;

use ca_core::nn::{finite_difference_check, Activation, AdamState, Matrix, Mlp, MlpSpec, Parameters, Tape, WeightMode};
use common::{gaussian, FD_H, FD_TOL};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CONFIGS: u64 = 100;

fn random_spec(rng: &mut ChaCha8Rng) -> (MlpSpec, usize, usize) {
    let activation = match rng.random_range(0..3) {
        0 => Activation::LeakyRelu(rng.random_range(0.05..0.5)),
        1 => Activation::Relu,
        _ => Activation::Identity,
    };
    let styles = if rng.random_bool(0.3) { 2 } else { 1 };
    let weight_mode = if styles == 1 { WeightMode::Dense } else { WeightMode::PerStyle(styles) };
    let spec = MlpSpec { depth: rng.random_range(1..=4), width: rng.random_range(1..=6), activation, weight_mode };
    (spec, styles * rng.random_range(1..=3), styles * rng.random_range(1..=3))
}

#[test]
fn random_networks_match_finite_differences() {
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..CONFIGS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (spec, din, dout) = random_spec(&mut rng);
        let net = Mlp::kaiming(spec, din, dout, &mut rng).unwrap();
        let n = rng.random_range(1..=4);
        let mut params: Vec<Matrix> = net.tensors().into_iter().cloned().collect();
        for p in &mut params {
            for v in p.data_mut() {
                *v += 0.1 * rng.random_range(-1.0..1.0);
            }
        }
        params.push(gaussian(&mut rng, n, din));
        let k = params.len() - 1;
        let r = finite_difference_check(
            &params,
            |t, vars| {
                let y = net.forward(t, vars[k], &vars[..k])?;
                let y = t.tanh(y);
                let sq = t.sq_norm_rows(y);
                t.mean(sq)
            },
            FD_H,
            FD_TOL,
        )
        .unwrap();
        assert!(r.passed, "seed {seed} {spec:?}: {r:?}");
        worst = worst.max(r.max_rel_err);
        checked += r.checked;
    }
    assert!(checked > 1000, "only {checked} coordinates compared");
    println!("mlp fd: {CONFIGS} configs, {checked} coordinates, worst rel err {worst:.2e}");
}

#[test]
fn random_primitive_chains_match_finite_differences() {
    for seed in 0..CONFIGS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n = rng.random_range(2..=5);
        let a = gaussian(&mut rng, n, 3);
        let b = gaussian(&mut rng, n, 2);
        let targets: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let perm: Vec<usize> = (0..n).rev().collect();
        let (lo, hi) = (-0.7, 0.9);
        let r = finite_difference_check(
            &[a, b],
            |t, v| {
                let ab = t.concat_cols(v[0], v[1])?;
                let sh = t.permute_rows(ab, &perm)?;
                let d = t.sub(ab, sh)?;
                let c = t.clamp(d, lo, hi);
                let th = t.tanh(ab);
                let s = t.add(c, th)?;
                let rows = t.sq_norm_rows(s);
                let z = t.scale(rows, -0.3);
                let bce = t.bce_with_logits(z, &targets)?;
                let lme = t.log_mean_exp(s)?;
                let total = t.add(bce, lme)?;
                let extra = t.sum(th);
                let extra = t.scale(extra, 0.01);
                t.add(total, extra)
            },
            FD_H,
            FD_TOL,
        )
        .unwrap();
        assert!(r.passed, "seed {seed}: {r:?}");
    }
}

#[test]
fn adam_converges_on_a_quadratic() {
    let target = Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0]]).unwrap();
    let mut p = Matrix::zeros(2, 2);
    let mut adam = AdamState::new(0.05, &[(2, 2)]);
    for _ in 0..2000 {
        let g = p.sub(&target).unwrap().scale(2.0);
        adam.step(&mut [&mut p], &[g]).unwrap();
    }
    assert!(p.max_abs_diff(&target) < 1e-3, "{p:?}");
}

#[test]
fn repeated_backward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let net = Mlp::kaiming(MlpSpec::dense(3, 8, Activation::LeakyRelu(0.2)), 4, 3, &mut rng).unwrap();
    let x = gaussian(&mut rng, 16, 4);
    let run = || {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let y = net.bind_forward(&mut t, xv, ca_core::nn::Bind::Train(0)).unwrap();
        let sq = t.sq_norm_rows(y);
        let l = t.mean(sq).unwrap();
        t.backward(l).unwrap().collect(0, &net.shapes())
    };
    assert_eq!(run(), run());
}

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

proptest! {
    #[test]
    fn matmul_agrees_with_nalgebra(r in 1usize..9, k in 1usize..9, c in 1usize..9, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = gaussian(&mut rng, r, k);
        let b = gaussian(&mut rng, k, c);
        let bt = b.transpose();
        let at = a.transpose();
        let want = to_na(&a) * to_na(&b);
        for got in [a.matmul(&b).unwrap(), a.matmul_t(&bt).unwrap(), at.t_matmul(&b).unwrap()] {
            prop_assert!((to_na(&got) - &want).amax() < 1e-12);
        }
    }

    #[test]
    fn zero_network_predicts_zero(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (spec, din, dout) = random_spec(&mut rng);
        let net = Mlp::zeros(spec, din, dout).unwrap();
        let y = net.predict(&gaussian(&mut rng, 3, din)).unwrap();
        prop_assert_eq!(y.sq_norm(), 0.0);
    }

    #[test]
    fn predict_matches_tape_forward(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (spec, din, dout) = random_spec(&mut rng);
        let net = Mlp::kaiming(spec, din, dout, &mut rng).unwrap();
        let x = gaussian(&mut rng, 5, din);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let y = net.bind_forward(&mut t, xv, ca_core::nn::Bind::Frozen).unwrap();
        prop_assert!(t.value(y).max_abs_diff(&net.predict(&x).unwrap()) < 1e-12);
    }
}
