#![allow(dead_code)]

use ca_core::nn::{finite_difference_check, Activation, Bind, Matrix, NnError, Parameters, Tape, Var, WeightMode};
use ca_core::regularizers::{
    disc_adversarial_loss, disc_mi_train_loss, disc_mi_value, mine_objective, regressor_adversarial_loss,
    regressor_confusion_loss, regressor_pair_loss, DiscSide, Discriminator, FoolD, MineCritic, Regressor, RegressorSide,
};
use ca_core::separator::{
    latent_loss_total, latent_loss_x, latent_loss_y, multi_salient_losses, observation_recon_loss,
    salient_norm_penalty, total_separation_loss, CommonInit, LossTerms, LossWeights, SeparatorConfig, SeparatorParams,
};
use ca_core::world::{Mixing, ObservationMap, World, WorldConfig};
use ca_core::CaError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_H: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
pub const FD_INSTANCES: usize = 20;

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

/// `(c, s)` with unit variances and correlation `rho`.
pub fn correlated(n: usize, rho: f64, seed: u64) -> (Matrix, Matrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    for _ in 0..n {
        let a: f64 = StandardNormal.sample(&mut rng);
        let b: f64 = StandardNormal.sample(&mut rng);
        c.push(a);
        s.push(rho * a + (1.0 - rho * rho).sqrt() * b);
    }
    (Matrix::from_vec(n, 1, c).unwrap(), Matrix::from_vec(n, 1, s).unwrap())
}

/// Closed-form MI of a bivariate Gaussian: `−½ ln(1 − ρ²)`.
pub fn analytic(rho: f64) -> f64 {
    -0.5 * (1.0 - rho * rho).ln()
}

fn nn(e: CaError) -> NnError {
    NnError::Contract(e.to_string())
}

#[derive(Clone, Debug)]
pub struct FdSummary {
    pub name: &'static str,
    pub instances: usize,
    pub worst_rel: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl FdSummary {
    pub fn passed(&self) -> bool {
        self.instances >= FD_INSTANCES && self.worst_rel <= FD_TOL && self.checked > 0
    }
}

/// Small random separator with every tensor jittered so no head starts at zero.
fn random_separator(rng: &mut ChaCha8Rng, d_w: usize, multi: bool) -> SeparatorParams {
    let depth = 2 + rng.random_range(0..2);
    let weight_mode = if d_w % 2 == 0 && rng.random_bool(0.5) { WeightMode::PerStyle(2) } else { WeightMode::Dense };
    let shared = if weight_mode == WeightMode::Dense && depth == 3 { rng.random_range(0..2) } else { 0 };
    let cfg = SeparatorConfig {
        depth,
        width: 5,
        activation: Activation::LeakyRelu(0.2),
        weight_mode,
        shared_prefix_depth: shared,
        multi_salient: multi,
        common_init: CommonInit::Kaiming,
        init_noise: 0.0,
    };
    let mut sep = SeparatorParams::init(&cfg, d_w, rng).unwrap();
    for t in sep.tensors_mut() {
        for v in t.data_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += 0.3 * z;
        }
    }
    sep
}

fn small_world(rng: &mut ChaCha8Rng, d_w: usize, multi: bool) -> World {
    let cfg = WorldConfig {
        d_w,
        d_c_true: 1,
        d_s_true: 1,
        d_s2_true: usize::from(multi),
        mixing: Mixing::Linear,
        obs_dim: 3,
        seed: rng.random(),
        ..WorldConfig::default()
    };
    World::build(&cfg).unwrap()
}

struct SepCase {
    sep: SeparatorParams,
    obs: ObservationMap,
    w_x: Matrix,
    w_y: Matrix,
    o_x: Matrix,
    o_y: Matrix,
}

fn sep_case(seed: u64, multi: bool) -> SepCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_w = 4 + (seed as usize % 3);
    let n = 3 + (seed as usize % 4);
    let sep = random_separator(&mut rng, d_w, multi);
    let world = small_world(&mut rng, d_w, multi);
    let (w_x, w_y) = (gaussian(&mut rng, n, d_w), gaussian(&mut rng, n, d_w));
    let (o_x, o_y) = (gaussian(&mut rng, n, 3), gaussian(&mut rng, n, 3));
    SepCase { sep, obs: world.observation_map().clone(), w_x, w_y, o_x, o_y }
}

/// Checks a separator-side loss with respect to every separator tensor.
fn check_separator_loss<F>(seed: u64, multi: bool, build: F) -> ca_core::nn::FdReport
where
    F: Fn(&mut Tape, &SeparatorParams, &SepCase) -> Result<Var, CaError> + Sync,
{
    let case = sep_case(seed, multi);
    let params: Vec<Matrix> = case.sep.tensors().into_iter().cloned().collect();
    let cfg = case.sep.config().clone();
    let d_w = case.sep.d_w();
    finite_difference_check(
        &params,
        |t, vars| {
            let ps: Vec<Matrix> = vars.iter().map(|v| t.value(*v).clone()).collect();
            let sep = SeparatorParams::from_tensors(&cfg, d_w, &ps).map_err(nn)?;
            build(t, &sep, &case).map_err(nn)
        },
        FD_H,
        FD_TOL,
    )
    .unwrap()
}

fn factors(t: &mut Tape, sep: &SeparatorParams, w: &Matrix) -> Result<(ca_core::separator::FactorVars, Var), CaError> {
    let b = sep.bind(t, Bind::Train(0));
    let wv = t.constant(w.clone());
    Ok((sep.forward(t, &b, wv)?, wv))
}

/// Two forward passes sharing one binding, as the trainer records them.
fn both(
    t: &mut Tape,
    sep: &SeparatorParams,
    c: &SepCase,
) -> Result<(ca_core::separator::FactorVars, Var, ca_core::separator::FactorVars, Var), CaError> {
    let b = sep.bind(t, Bind::Train(0));
    let wx = t.constant(c.w_x.clone());
    let wy = t.constant(c.w_y.clone());
    let fx = sep.forward(t, &b, wx)?;
    let fy = sep.forward(t, &b, wy)?;
    Ok((fx, wx, fy, wy))
}

struct AdvCase {
    d: Discriminator,
    r: Regressor,
    mine: MineCritic,
    dmi: Discriminator,
    c_x: Matrix,
    c_y: Matrix,
    s_x: Matrix,
    s_y: Matrix,
    perm: Vec<usize>,
}

fn adv_case(seed: u64) -> AdvCase {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let d_w = 3 + (seed as usize % 3);
    let n = 3 + (seed as usize % 4);
    let d = Discriminator::new(d_w, 6, &mut rng).unwrap();
    let r = Regressor::new(d_w, 2 + (seed as usize % 2), 5, &mut rng).unwrap();
    let mine = MineCritic::new(2 * d_w, 6, &mut rng).unwrap();
    let dmi = Discriminator::new(2 * d_w, 6, &mut rng).unwrap();
    let perm = ca_core::regularizers::derangement(n, &mut rng);
    AdvCase {
        d,
        r,
        mine,
        dmi,
        c_x: gaussian(&mut rng, n, d_w),
        c_y: gaussian(&mut rng, n, d_w),
        s_x: gaussian(&mut rng, n, d_w),
        s_y: gaussian(&mut rng, n, d_w),
        perm,
    }
}

/// Checks a regularizer loss with respect to the network's tensors and the factor inputs.
fn check_network_loss<N, F>(net: &N, inputs: &[&Matrix], build: F) -> ca_core::nn::FdReport
where
    N: Parameters + Sync,
    F: Fn(&mut Tape, &[Var], &[Var]) -> Result<Var, CaError> + Sync,
{
    let k = net.num_tensors();
    let mut params: Vec<Matrix> = net.tensors().into_iter().cloned().collect();
    params.extend(inputs.iter().map(|m| (*m).clone()));
    finite_difference_check(&params, |t, vars| build(t, &vars[..k], &vars[k..]).map_err(nn), FD_H, FD_TOL).unwrap()
}

type Check = fn(u64) -> ca_core::nn::FdReport;

pub fn fd_checks() -> Vec<(&'static str, Check)> {
    vec![
        ("latent_loss_x", |s| {
            check_separator_loss(s, false, |t, sep, c| {
                let (f, w) = factors(t, sep, &c.w_x)?;
                latent_loss_x(t, f, w)
            })
        }),
        ("latent_loss_y", |s| {
            check_separator_loss(s, false, |t, sep, c| {
                let (f, w) = factors(t, sep, &c.w_y)?;
                latent_loss_y(t, f, w)
            })
        }),
        ("salient_norm_penalty", |s| {
            check_separator_loss(s, false, |t, sep, c| {
                let (f, _) = factors(t, sep, &c.w_x)?;
                salient_norm_penalty(t, f)
            })
        }),
        ("latent_loss_total", |s| {
            check_separator_loss(s, false, |t, sep, c| {
                let (fx, wx, fy, wy) = both(t, sep, c)?;
                latent_loss_total(t, fx, wx, fy, wy)
            })
        }),
        ("observation_recon_loss", |s| {
            check_separator_loss(s, false, |t, sep, c| {
                let (fx, _, fy, _) = both(t, sep, c)?;
                let (ox, oy) = (t.constant(c.o_x.clone()), t.constant(c.o_y.clone()));
                observation_recon_loss(t, fx, ox, fy, oy, &c.obs)
            })
        }),
        ("multi_salient_losses.latent", |s| {
            check_separator_loss(s, true, |t, sep, c| {
                let (fx, wx, fy, wy) = both(t, sep, c)?;
                let (ox, oy) = (t.constant(c.o_x.clone()), t.constant(c.o_y.clone()));
                Ok(multi_salient_losses(t, fx, wx, ox, fy, wy, oy, &c.obs)?.0)
            })
        }),
        ("multi_salient_losses.observation", |s| {
            check_separator_loss(s, true, |t, sep, c| {
                let (fx, wx, fy, wy) = both(t, sep, c)?;
                let (ox, oy) = (t.constant(c.o_x.clone()), t.constant(c.o_y.clone()));
                Ok(multi_salient_losses(t, fx, wx, ox, fy, wy, oy, &c.obs)?.1)
            })
        }),
        ("total_separation_loss", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let weights = LossWeights {
                lambda1: rng.random_range(0.1..2.0),
                lambda2: rng.random_range(0.1..2.0),
                lambda3: rng.random_range(0.1..2.0),
                lambda4: rng.random_range(0.1..2.0),
            };
            check_separator_loss(s, false, move |t, sep, c| {
                let d_w = sep.d_w();
                let d = Discriminator::new(d_w, 6, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
                let r = Regressor::new(d_w, 2, 5, &mut ChaCha8Rng::seed_from_u64(s + 1)).unwrap();
                let (fx, wx, fy, wy) = both(t, sep, c)?;
                let (ox, oy) = (t.constant(c.o_x.clone()), t.constant(c.o_y.clone()));
                let img = observation_recon_loss(t, fx, ox, fy, oy, &c.obs)?;
                let lat = latent_loss_total(t, fx, wx, fy, wy)?;
                let dv = t.bind(&d, Bind::Frozen);
                let rv = t.bind(&r, Bind::Frozen);
                let flip = if s % 2 == 0 { FoolD::LabelFlip } else { FoolD::Confusion };
                let adv_d = disc_adversarial_loss(t, &d, &dv, fx.c, fy.c, DiscSide::FoolD(flip))?;
                let adv_r = regressor_adversarial_loss(t, &r, &rv, fx.c, fy.c, fy.s, RegressorSide::FoolR)?;
                total_separation_loss(t, &LossTerms { img, lat, adv_r: Some(adv_r), adv_d: Some(adv_d) }, &weights)
            })
        }),
        ("disc_adversarial_loss.train_d", |s| {
            let a = adv_case(s);
            check_network_loss(&a.d, &[&a.c_x, &a.c_y], |t, p, x| {
                disc_adversarial_loss(t, &a.d, p, x[0], x[1], DiscSide::TrainD)
            })
        }),
        ("disc_adversarial_loss.fool_d_label_flip", |s| {
            let a = adv_case(s);
            check_network_loss(&a.d, &[&a.c_x, &a.c_y], |t, p, x| {
                disc_adversarial_loss(t, &a.d, p, x[0], x[1], DiscSide::FoolD(FoolD::LabelFlip))
            })
        }),
        ("disc_adversarial_loss.fool_d_confusion", |s| {
            let a = adv_case(s);
            check_network_loss(&a.d, &[&a.c_x, &a.c_y], |t, p, x| {
                disc_adversarial_loss(t, &a.d, p, x[0], x[1], DiscSide::FoolD(FoolD::Confusion))
            })
        }),
        ("regressor_adversarial_loss.train_r", |s| {
            let a = adv_case(s);
            check_network_loss(&a.r, &[&a.c_x, &a.c_y, &a.s_y], |t, p, x| {
                regressor_adversarial_loss(t, &a.r, p, x[0], x[1], x[2], RegressorSide::TrainR)
            })
        }),
        ("regressor_adversarial_loss.fool_r", |s| {
            let a = adv_case(s);
            check_network_loss(&a.r, &[&a.c_x, &a.c_y, &a.s_y], |t, p, x| {
                regressor_adversarial_loss(t, &a.r, p, x[0], x[1], x[2], RegressorSide::FoolR)
            })
        }),
        ("regressor_pair_loss", |s| {
            let a = adv_case(s);
            check_network_loss(&a.r, &[&a.c_x, &a.s_x, &a.c_y, &a.s_y], |t, p, x| {
                let side = if s % 2 == 0 { RegressorSide::TrainR } else { RegressorSide::FoolR };
                regressor_pair_loss(t, &a.r, p, x[0], x[1], x[2], x[3], side)
            })
        }),
        ("regressor_confusion_loss", |s| {
            let a = adv_case(s);
            check_network_loss(&a.r, &[&a.c_x, &a.c_y], |t, p, x| {
                regressor_confusion_loss(t, &a.r, p, x[0], &a.s_x, x[1], &a.s_y)
            })
        }),
        ("disc_mi_train_loss", |s| {
            let a = adv_case(s);
            check_network_loss(&a.dmi, &[&a.c_y, &a.s_y], |t, p, x| {
                disc_mi_train_loss(t, &a.dmi, p, x[0], x[1], &a.perm)
            })
        }),
        ("disc_mi_value", |s| {
            let a = adv_case(s);
            check_network_loss(&a.dmi, &[&a.c_y, &a.s_y], |t, p, x| disc_mi_value(t, &a.dmi, p, x[0], x[1]))
        }),
        ("mine_objective", |s| {
            let a = adv_case(s);
            check_network_loss(&a.mine, &[&a.c_y, &a.s_y], |t, p, x| mine_objective(t, &a.mine, p, x[0], x[1], &a.perm))
        }),
    ]
}

/// Runs one named check over `FD_INSTANCES` seeds.
pub fn run_fd(name: &'static str, check: Check) -> FdSummary {
    let mut out = FdSummary { name, instances: 0, worst_rel: 0.0, checked: 0, skipped: 0 };
    for seed in 0..FD_INSTANCES as u64 {
        let r = check(seed);
        out.instances += 1;
        out.worst_rel = out.worst_rel.max(r.max_rel_err);
        out.checked += r.checked;
        out.skipped += r.skipped;
    }
    out
}
