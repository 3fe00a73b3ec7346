use ca_core::nn::Matrix;
use ca_core::world::{streams, Domain, GroundTruth, Mixing, World, WorldConfig};
use ca_core::CaError;
use proptest::prelude::*;

fn col_means(m: &Matrix) -> Vec<f64> {
    m.column_means()
}

#[test]
fn background_common_factor_is_centered() {
    let w = World::build(&WorldConfig::default()).unwrap();
    let n = 4000;
    let x = w.sample_background(n, streams::TRAIN_X).unwrap();
    assert_eq!(x.domain(), Domain::X);
    assert!(x.oracle().s.data().iter().all(|&v| v == 0.0));
    let bound = 4.0 / (n as f64).sqrt();
    for m in col_means(&x.oracle().c) {
        assert!(m.abs() <= bound, "mean {m}");
    }
}

#[test]
fn target_salient_is_bounded_away_from_zero_and_common_matches_background() {
    let w = World::build(&WorldConfig::default()).unwrap();
    let n = 4000;
    let x = w.sample_background(n, streams::TRAIN_X).unwrap();
    let y = w.sample_target(n, streams::TRAIN_Y).unwrap();
    assert_eq!(y.domain(), Domain::Y);
    let min_norm = y.oracle().s.row_sq_norms().into_iter().map(f64::sqrt).fold(f64::INFINITY, f64::min);
    assert!(min_norm > 0.1, "min ‖s‖ = {min_norm}");
    assert!(y.oracle().attr_salient.iter().all(|&a| a == 1));
    let bound = 4.0 / (n as f64).sqrt();
    for (a, b) in col_means(&x.oracle().c).iter().zip(col_means(&y.oracle().c)) {
        assert!((a - b).abs() <= bound, "{a} vs {b}");
    }
}

#[test]
fn noiseless_background_lies_in_common_span() {
    let cfg = WorldConfig { noise_std: 0.0, mixing: Mixing::Linear, ..WorldConfig::default() };
    let w = World::build(&cfg).unwrap();
    let x = w.sample_background(100, 9).unwrap();
    let proj = x.data.latents.matmul(w.a_c()).unwrap().matmul_t(w.a_c()).unwrap();
    assert!(proj.max_abs_diff(&x.data.latents) <= 1e-10);
}

#[test]
fn multi_salient_domains_and_cross_gram() {
    let w = World::build(&WorldConfig { d_s2_true: 3, ..WorldConfig::default() }).unwrap();
    let (x, y) = w.sample_multi_salient(500, 1).unwrap();
    assert!(x.oracle().s2.as_ref().unwrap().data().iter().all(|&v| v == 0.0));
    assert!(x.oracle().s.row_sq_norms().iter().all(|&n| n > 0.0));
    assert!(y.oracle().s.data().iter().all(|&v| v == 0.0));
    let cross = w.a_s().t_matmul(w.a_s2().unwrap()).unwrap();
    assert!(cross.data().iter().all(|v| v.abs() <= 1e-10));
    let cross_c = w.a_c().t_matmul(w.a_s2().unwrap()).unwrap();
    assert!(cross_c.data().iter().all(|v| v.abs() <= 1e-10));
}

#[test]
fn hand_built_world_swaps_to_the_expected_code() {
    let cfg = WorldConfig { d_w: 3, d_c_true: 1, d_s_true: 1, obs_dim: 3, noise_std: 0.0, ..WorldConfig::default() };
    let a_c = Matrix::from_rows(&[[1.0], [0.0], [0.0]]).unwrap();
    let a_s = Matrix::from_rows(&[[0.0], [1.0], [0.0]]).unwrap();
    let w = World::from_subspaces(&cfg, a_c, a_s, None).unwrap();
    let tx = GroundTruth { c_true: vec![1.0], s_true: vec![0.0], s2_true: vec![], attr_common: 1, attr_salient: 0, attr_salient2: 0 };
    let ty = GroundTruth { c_true: vec![3.0], s_true: vec![2.0], s2_true: vec![], attr_common: 1, attr_salient: 1, attr_salient2: 0 };
    assert_eq!(w.oracle_swap(&tx, &ty), vec![1.0, 2.0, 0.0]);
}

#[test]
fn from_subspaces_rejects_non_orthonormal_bases() {
    let cfg = WorldConfig { d_w: 3, d_c_true: 1, d_s_true: 1, obs_dim: 3, ..WorldConfig::default() };
    let a_c = Matrix::from_rows(&[[1.0], [0.0], [0.0]]).unwrap();
    let a_s = Matrix::from_rows(&[[1.0], [1.0], [0.0]]).unwrap();
    assert!(matches!(World::from_subspaces(&cfg, a_c, a_s, None), Err(CaError::Config(_))));
}

#[test]
fn constraint_violation_is_a_config_error() {
    let cfg = WorldConfig { d_w: 10, d_c_true: 8, d_s_true: 4, ..WorldConfig::default() };
    match World::build(&cfg) {
        Err(e @ CaError::Config(_)) => {
            assert_eq!(e.exit_code(), 2);
            assert!(e.to_string().contains("exceeds d_w = 10"), "{e}");
        }
        other => panic!("expected config error, got {other:?}"),
    }
}

#[test]
fn nonlinear_worlds_are_deterministic_too() {
    let cfg = WorldConfig { mixing: Mixing::MlpNonlinear, obs_dim: 16, ..WorldConfig::default() };
    let a = World::build(&cfg).unwrap().sample_target(50, streams::TEST_Y).unwrap();
    let b = World::build(&cfg).unwrap().sample_target(50, streams::TEST_Y).unwrap();
    assert_eq!(a, b);
}

fn truth(c: Vec<f64>, s: Vec<f64>) -> GroundTruth {
    GroundTruth { c_true: c, s_true: s, s2_true: vec![], attr_common: 0, attr_salient: 0, attr_salient2: 0 }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn subspace_bases_are_orthonormal(seed in 0u64..1000, d_c in 1usize..6, d_s in 1usize..5, d_s2 in 0usize..3) {
        let cfg = WorldConfig { d_w: 12, d_c_true: d_c, d_s_true: d_s, d_s2_true: d_s2, seed, ..WorldConfig::default() };
        let w = World::build(&cfg).unwrap();
        let mut all = w.a_c().hstack(w.a_s()).unwrap();
        if let Some(a2) = w.a_s2() {
            all = all.hstack(a2).unwrap();
        }
        let gram = all.t_matmul(&all).unwrap();
        prop_assert!(gram.max_abs_diff(&Matrix::identity(all.cols())) <= 1e-10);
    }

    #[test]
    fn sampling_is_a_pure_function_of_seed_and_stream(seed in 0u64..1000, stream in 0u64..8, n in 1usize..20) {
        let cfg = WorldConfig { d_w: 8, d_c_true: 3, d_s_true: 2, obs_dim: 5, seed, ..WorldConfig::default() };
        let a = World::build(&cfg).unwrap().sample_target(n, stream).unwrap();
        let b = World::build(&cfg).unwrap().sample_target(n, stream).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn oracle_swap_is_an_involution(
        seed in 0u64..500,
        cx in prop::collection::vec(-3.0f64..3.0, 2),
        sx in prop::collection::vec(-3.0f64..3.0, 2),
        cy in prop::collection::vec(-3.0f64..3.0, 2),
        sy in prop::collection::vec(-3.0f64..3.0, 2),
    ) {
        let cfg = WorldConfig { d_w: 6, d_c_true: 2, d_s_true: 2, obs_dim: 4, seed, ..WorldConfig::default() };
        let w = World::build(&cfg).unwrap();
        let (x, y) = (truth(cx.clone(), sx.clone()), truth(cy, sy.clone()));
        // swapping (c_x, s_y) back with s_x recovers the clean x
        let once = truth(cx.clone(), sy);
        let twice = w.oracle_swap(&once, &x);
        let clean = w.oracle_swap(&x, &x);
        for (a, b) in twice.iter().zip(&clean) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        prop_assert_eq!(w.oracle_swap(&x, &y), w.oracle_swap(&x, &once));
    }
}
