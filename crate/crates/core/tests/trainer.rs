use ca_core::evaluation::{mi_report, LeakSeparator};
use ca_core::nn::Parameters;
use ca_core::separator::{CommonInit, LossWeights, SeparatorConfig, SeparatorParams};
use ca_core::trainer::{
    fit_steps, schedule_events, train_stage1, warmup_adversaries, Adversaries, RegularizerMode, ScheduleEvent,
    TrainConfig,
};
use ca_core::world::{streams, World, WorldConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn schedule(warmup: usize, interval: usize, total: usize) -> TrainConfig {
    TrainConfig { warmup_steps: warmup, adversary_retrain_interval: interval, total_steps: total, ..TrainConfig::default() }
}

fn world() -> World {
    World::build(&WorldConfig::default()).unwrap()
}

#[test]
fn refit_schedule_examples() {
    assert_eq!(fit_steps(&schedule(2000, 500, 4000)), vec![2000, 2500, 3000, 3500, 4000]);
    assert_eq!(fit_steps(&schedule(130_000, 5_000, 150_000)), vec![130_000, 135_000, 140_000, 145_000, 150_000]);
    assert_eq!(fit_steps(&schedule(0, 10, 25)), vec![0, 10, 20]);
    let events = schedule_events(&schedule(2000, 500, 4000));
    assert_eq!(events[0], ScheduleEvent::TrainSeparator { start: 0, end: 2000, adversarial: false });
    assert_eq!(events[1], ScheduleEvent::FitAdversaries { step: 2000, epochs: 8, initial: true });
}

fn pools(world: &World, n: usize) -> (ca_core::nn::Matrix, ca_core::nn::Matrix) {
    let x = world.sample_background(n, streams::TRAIN_X).unwrap();
    let y = world.sample_target(n, streams::TRAIN_Y).unwrap();
    (x.data.latents, y.data.latents)
}

fn leaking_separator(d_w: usize) -> SeparatorParams {
    let cfg = SeparatorConfig { depth: 2, width: 2 * d_w, init_noise: 0.0, ..SeparatorConfig::default() };
    SeparatorParams::init(&cfg, d_w, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
}

#[test]
fn zero_epoch_warmup_leaves_adversaries_unchanged() {
    let w = world();
    let (wx, wy) = pools(&w, 256);
    let cfg = TrainConfig::default();
    let sep = leaking_separator(32);
    let mut adv = Adversaries::new(&cfg, 32, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let before = adv.clone();
    let fit = warmup_adversaries(&wx, &wy, &sep, &mut adv, 0, &cfg, 0).unwrap();
    assert!(fit.d_history.is_empty());
    assert_eq!(adv, before);
}

#[test]
fn discriminator_detects_a_leaking_separator_and_refits_leave_it_alone() {
    let w = world();
    let (wx, wy) = pools(&w, 2048);
    let cfg = TrainConfig::default();
    let sep = leaking_separator(32);
    let snapshot = sep.clone();
    let mut adv = Adversaries::new(&cfg, 32, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let idx: Vec<usize> = (0..1024).collect();
    let fit = warmup_adversaries(&wx.select_rows(&idx), &wy.select_rows(&idx), &sep, &mut adv, 8, &cfg, 0).unwrap();
    assert_eq!(sep, snapshot);
    for pair in fit.d_history.windows(2) {
        assert!(pair[1] <= pair[0] * 1.02, "{:?}", fit.d_history);
    }
    assert!(fit.d_history.last().unwrap() < &fit.d_history[0]);
    let held: Vec<usize> = (1024..2048).collect();
    let px = adv.discriminator.probabilities(&wx.select_rows(&held)).unwrap();
    let py = adv.discriminator.probabilities(&wy.select_rows(&held)).unwrap();
    let correct = px.iter().filter(|&&p| p < 0.5).count() + py.iter().filter(|&&p| p >= 0.5).count();
    let acc = correct as f64 / 2048.0;
    assert!(acc > 0.9, "held-out accuracy {acc}");
}

#[test]
fn none_mode_drives_down_the_latent_loss() {
    let cfg = TrainConfig {
        regularizer_mode: RegularizerMode::None,
        total_steps: 3000,
        separator: SeparatorConfig { common_init: CommonInit::Kaiming, ..SeparatorConfig::default() },
        ..TrainConfig::default()
    };
    let w = world();
    let out = train_stage1(&w, &cfg).unwrap();
    let s = &out.summary;
    assert!(s.final_l_lat <= 0.05 * s.initial_l_lat, "{} vs {}", s.final_l_lat, s.initial_l_lat);
    let x = w.sample_background(1000, streams::TEST_X).unwrap();
    let f = out.separator.split(&x.data.latents).unwrap();
    let ratio = f.s.sq_norm() / x.data.latents.sq_norm();
    assert!(ratio <= 0.05, "salient energy on background {ratio}");
    assert_eq!(s.adversary_fits, 0);
}

#[test]
fn log_rows_are_every_tenth_step() {
    let cfg = TrainConfig { total_steps: 120, warmup_steps: 60, adversary_retrain_epochs: 1, ..TrainConfig::default() };
    let out = train_stage1(&world(), &cfg).unwrap();
    let steps: Vec<usize> = out.log.rows.iter().map(|r| r.step).collect();
    assert_eq!(steps, (0..12).map(|k| 10 * k).collect::<Vec<_>>());
    assert!(out.log.to_csv().starts_with(ca_core::trainer::LOG_HEADER));
}

#[test]
fn identical_configs_train_bit_identically() {
    let cfg = TrainConfig { total_steps: 100, warmup_steps: 40, adversary_retrain_epochs: 1, ..TrainConfig::default() };
    let a = train_stage1(&world(), &cfg).unwrap();
    let b = train_stage1(&world(), &cfg).unwrap();
    assert_eq!(a.separator, b.separator);
    assert_eq!(a.log.to_csv(), b.log.to_csv());
    let c = train_stage1(&world(), &TrainConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.separator, c.separator);
}

#[test]
fn adversarial_weights_do_not_act_during_warmup() {
    let base = TrainConfig { total_steps: 80, warmup_steps: 80, adversary_retrain_epochs: 1, ..TrainConfig::default() };
    let a = train_stage1(&world(), &base).unwrap();
    let weights = LossWeights { lambda3: 5.0, lambda4: 3.0, ..base.weights };
    let b = train_stage1(&world(), &TrainConfig { weights, ..base }).unwrap();
    assert_eq!(a.separator.tensors(), b.separator.tensors());
}

#[test]
fn adversarial_training_removes_common_salient_dependence() {
    let w = world();
    let test_y = w.sample_target(1000, streams::TEST_Y).unwrap();
    let none = train_stage1(&w, &TrainConfig { regularizer_mode: RegularizerMode::None, ..TrainConfig::default() }).unwrap();
    let adv = train_stage1(&w, &TrainConfig::default()).unwrap();
    let mi_none = mi_report(&none.separator, &test_y, 5).unwrap().knn_nats;
    let mi_adv = mi_report(&adv.separator, &test_y, 5).unwrap().knn_nats;
    let mi_leak = mi_report(&LeakSeparator, &test_y, 5).unwrap().knn_nats;
    println!("knn MI: none {mi_none:.4}, adv {mi_adv:.4}, leak {mi_leak:.4}");
    assert!(mi_adv <= 0.1, "{mi_adv}");
    assert!(mi_adv <= mi_none / 3.0, "{mi_adv} vs {mi_none}");
}
