//! Stage-1 training: an adversary-free warm-up, then separator steps interleaved
//! with adversary refits on frozen factors.

use std::cell::Cell;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{decode_tensors, encode_tensors, read_file, write_atomic};
use crate::nn::{AdamState, Bind, Matrix, Parameters, Tape, Var};
use crate::regularizers::{
    derangement, disc_adversarial_loss, disc_mi_train_loss, disc_mi_value, fit_epochs, knn_mi_estimate,
    mine_objective, regressor_adversarial_loss, regressor_pair_loss, regressor_confusion_loss, DiscSide, Discriminator, FoolD, FoolR, KnnNorm,
    MineCritic, Regressor, RegressorSide,
};
use crate::separator::{
    latent_loss_total, multi_salient_losses, observation_recon_loss, total_separation_loss, FactorVars, LossTerms,
    LossWeights, SeparatorConfig, SeparatorParams,
};
use crate::world::{streams, ObservedDataset, World};
use crate::{CaError, Result};

pub const LOG_EVERY: usize = 10;
pub const LOG_HEADER: &str = "step,L_lat,L_img,L_advD,L_advR,grad_norm,wall_ms";

// Trainer rng streams, keyed off `TrainConfig::seed`.
const STREAM_INIT: u64 = 100;
const STREAM_BATCH_X: u64 = 101;
const STREAM_BATCH_Y: u64 = 102;
const STREAM_ADV: u64 = 103;
const STREAM_PERM: u64 = 104;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerMode {
    None,
    /// Discriminator on common factors plus the independence regressor.
    Adv,
    /// Discriminator plus a Disc-MI critic in place of the regressor.
    DiscMi,
    /// Discriminator plus a logged kNN-MI value (the estimate carries no gradient).
    KnnMi,
    /// Discriminator plus a MINE critic in place of the regressor.
    Mine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub adversary_retrain_interval: usize,
    pub adversary_retrain_epochs: usize,
    pub batch_size: usize,
    pub lr_separator_phase1: f64,
    pub lr_separator_phase2: f64,
    pub lr_discriminator: f64,
    pub lr_regressor: f64,
    pub weights: LossWeights,
    pub regularizer_mode: RegularizerMode,
    pub seed: u64,
    pub separator: SeparatorConfig,
    /// Training samples drawn per domain by [`train_stage1`].
    pub train_size: usize,
    /// Samples per domain that adversaries see at each refit.
    pub adversary_pool: usize,
    pub adversary_batch: usize,
    pub adversary_width: usize,
    pub regressor_depth: usize,
    pub fool_d: FoolD,
    pub fool_r: FoolR,
    /// Linearly decays the phase-2 separator rate to zero by the last step.
    pub lr_decay: bool,
    /// Refits continue from the previous adversary weights; otherwise they are re-initialized.
    pub warm_restart: bool,
    /// Writes measured `wall_ms`; when off the column is 0 and logs are byte-reproducible.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 6000,
            warmup_steps: 2000,
            adversary_retrain_interval: 20,
            adversary_retrain_epochs: 8,
            batch_size: 64,
            lr_separator_phase1: 0.01,
            lr_separator_phase2: 0.003,
            lr_discriminator: 1e-3,
            lr_regressor: 1e-3,
            weights: LossWeights { lambda1: 1.0, lambda2: 1.0, lambda3: 0.0, lambda4: 1.0 },
            regularizer_mode: RegularizerMode::Adv,
            seed: 0,
            separator: SeparatorConfig::default(),
            train_size: 4000,
            adversary_pool: 1024,
            adversary_batch: 64,
            adversary_width: 64,
            regressor_depth: 3,
            fool_d: FoolD::Confusion,
            fool_r: FoolR::Confusion,
            lr_decay: true,
            warm_restart: true,
            log_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CaError::Config(m));
        if self.warmup_steps > self.total_steps {
            return bad(format!("warmup_steps {} exceeds total_steps {}", self.warmup_steps, self.total_steps));
        }
        if self.adversary_retrain_interval == 0 {
            return bad("adversary_retrain_interval must be >= 1".into());
        }
        for (name, lr) in [
            ("lr_separator_phase1", self.lr_separator_phase1),
            ("lr_separator_phase2", self.lr_separator_phase2),
            ("lr_discriminator", self.lr_discriminator),
            ("lr_regressor", self.lr_regressor),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be > 0, got {lr}"));
            }
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2".into());
        }
        if self.train_size < self.batch_size {
            return bad(format!("train_size {} is below batch_size {}", self.train_size, self.batch_size));
        }
        if self.regularizer_mode != RegularizerMode::None {
            if self.adversary_pool < 2 || self.adversary_pool > self.train_size {
                return bad(format!("adversary_pool must lie in [2, train_size], got {}", self.adversary_pool));
            }
            let min_batch = if self.regularizer_mode == RegularizerMode::Mine { 16 } else { 2 };
            if self.adversary_batch < min_batch || self.adversary_batch > self.adversary_pool {
                return bad(format!("adversary_batch must lie in [{min_batch}, adversary_pool]"));
            }
            if self.adversary_width == 0 || self.regressor_depth == 0 {
                return bad("adversary_width and regressor_depth must be >= 1".into());
            }
        }
        self.weights.validate()
    }

    pub fn adversarial(&self) -> bool {
        self.regularizer_mode != RegularizerMode::None
    }

    /// Separator learning rate in effect at `step`.
    pub fn separator_lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps || !self.adversarial() {
            return self.lr_separator_phase1;
        }
        if !self.lr_decay {
            return self.lr_separator_phase2;
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        self.lr_separator_phase2 * (1.0 - (step - self.warmup_steps) as f64 / span)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "event")]
pub enum ScheduleEvent {
    /// Separator steps `start..end`.
    TrainSeparator { start: usize, end: usize, adversarial: bool },
    /// Adversaries (re)fitted on the separator as it stands before `step`.
    FitAdversaries { step: usize, epochs: usize, initial: bool },
}

/// Ordered plan of the run. Fits happen at `warmup + k·interval` for every such value up to and
/// including `total_steps`.
pub fn schedule_events(cfg: &TrainConfig) -> Vec<ScheduleEvent> {
    let mut out = Vec::new();
    if !cfg.adversarial() {
        if cfg.total_steps > 0 {
            out.push(ScheduleEvent::TrainSeparator { start: 0, end: cfg.total_steps, adversarial: false });
        }
        return out;
    }
    if cfg.warmup_steps > 0 {
        out.push(ScheduleEvent::TrainSeparator { start: 0, end: cfg.warmup_steps, adversarial: false });
    }
    let interval = cfg.adversary_retrain_interval.max(1);
    let mut step = cfg.warmup_steps;
    while step <= cfg.total_steps {
        out.push(ScheduleEvent::FitAdversaries {
            step,
            epochs: cfg.adversary_retrain_epochs,
            initial: step == cfg.warmup_steps,
        });
        let end = (step + interval).min(cfg.total_steps);
        if end > step {
            out.push(ScheduleEvent::TrainSeparator { start: step, end, adversarial: true });
        }
        step += interval;
    }
    out
}

/// Steps at which adversaries are fitted.
pub fn fit_steps(cfg: &TrainConfig) -> Vec<usize> {
    schedule_events(cfg)
        .into_iter()
        .filter_map(|e| match e {
            ScheduleEvent::FitAdversaries { step, .. } => Some(step),
            _ => None,
        })
        .collect()
}

/// Networks that police the split, plus their optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Adversaries {
    pub mode: RegularizerMode,
    pub discriminator: Discriminator,
    pub regressor: Option<Regressor>,
    pub mine: Option<MineCritic>,
    pub disc_mi: Option<Discriminator>,
    adam_d: AdamState,
    adam_aux: Option<AdamState>,
}

impl Adversaries {
    pub fn new<R: Rng + ?Sized>(cfg: &TrainConfig, d_w: usize, rng: &mut R) -> Result<Self> {
        let width = cfg.adversary_width;
        let discriminator = Discriminator::new(d_w, width, rng)?;
        let (mut regressor, mut mine, mut disc_mi) = (None, None, None);
        match cfg.regularizer_mode {
            RegularizerMode::Adv => regressor = Some(Regressor::new(d_w, cfg.regressor_depth, width, rng)?),
            RegularizerMode::Mine => mine = Some(MineCritic::new(2 * d_w, width, rng)?),
            RegularizerMode::DiscMi => disc_mi = Some(Discriminator::new(2 * d_w, width, rng)?),
            RegularizerMode::KnnMi | RegularizerMode::None => {}
        }
        let adam_d = AdamState::new(cfg.lr_discriminator, &discriminator.shapes());
        let mut out = Self { mode: cfg.regularizer_mode, discriminator, regressor, mine, disc_mi, adam_d, adam_aux: None };
        let aux_shapes = out.aux_shapes();
        out.adam_aux = aux_shapes.map(|s| AdamState::new(cfg.lr_regressor, &s));
        Ok(out)
    }

    fn aux_shapes(&self) -> Option<Vec<(usize, usize)>> {
        if let Some(r) = &self.regressor {
            return Some(r.shapes());
        }
        if let Some(m) = &self.mine {
            return Some(m.shapes());
        }
        self.disc_mi.as_ref().map(|d| d.shapes())
    }
}

impl Parameters for Adversaries {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut v = self.discriminator.tensors();
        if let Some(r) = &self.regressor {
            v.extend(r.tensors());
        }
        if let Some(m) = &self.mine {
            v.extend(m.tensors());
        }
        if let Some(d) = &self.disc_mi {
            v.extend(d.tensors());
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = self.discriminator.tensors_mut();
        if let Some(r) = &mut self.regressor {
            v.extend(r.tensors_mut());
        }
        if let Some(m) = &mut self.mine {
            v.extend(m.tensors_mut());
        }
        if let Some(d) = &mut self.disc_mi {
            v.extend(d.tensors_mut());
        }
        v
    }
}

/// Per-epoch losses from one adversary fit.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdversaryFit {
    pub d_history: Vec<f64>,
    pub aux_history: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Frozen factors used to fit adversaries.
struct Pool {
    c_x: Matrix,
    c_y: Matrix,
    /// Salient target per domain: zero for background X, `s` (or `s1`) otherwise.
    t_x: Matrix,
    t_y: Matrix,
}

fn pool_factors(sep: &SeparatorParams, w_x: &Matrix, w_y: &Matrix) -> Result<Pool> {
    let fx = sep.split(w_x)?;
    let fy = sep.split(w_y)?;
    let (t_x, t_y) = if sep.is_multi_salient() {
        (fx.s, fy.s2.expect("multi-salient separator has s2"))
    } else {
        (Matrix::zeros(fx.s.rows(), fx.s.cols()), fy.s)
    };
    Ok(Pool { c_x: fx.c, c_y: fy.c, t_x, t_y })
}

fn all_rows_equal(m: &Matrix) -> bool {
    m.rows() > 1 && (1..m.rows()).all(|r| m.row(r) == m.row(0))
}

/// Fits the adversaries for `epochs` passes on factors of `w_x`, `w_y` produced by the frozen separator.
pub fn warmup_adversaries(
    w_x: &Matrix,
    w_y: &Matrix,
    sep: &SeparatorParams,
    adv: &mut Adversaries,
    epochs: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<AdversaryFit> {
    let pool = pool_factors(sep, w_x, w_y)?;
    let mut rng = crate::world::stream_rng(seed, STREAM_ADV);
    fit_on_pool(&pool, adv, epochs, cfg, &mut rng)
}

fn fit_on_pool(pool: &Pool, adv: &mut Adversaries, epochs: usize, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<AdversaryFit> {
    let n = pool.c_x.rows().min(pool.c_y.rows());
    let mut fit = AdversaryFit::default();
    if epochs == 0 {
        return Ok(fit);
    }
    if all_rows_equal(&pool.c_x) && all_rows_equal(&pool.c_y) {
        fit.warnings.push("common factors are identical across the pool".into());
    }
    let batch = cfg.adversary_batch.min(n);
    fit.d_history = fit_epochs(&mut adv.discriminator, &mut adv.adam_d, n, batch, epochs, rng, |t, d, vars, idx| {
        let cx = t.constant(pool.c_x.select_rows(idx));
        let cy = t.constant(pool.c_y.select_rows(idx));
        disc_adversarial_loss(t, d, vars, cx, cy, DiscSide::TrainD)
    })?;
    let adam = match adv.adam_aux.as_mut() {
        Some(a) => a,
        None => return Ok(fit),
    };
    let perm_seed: u64 = rng.random();
    let counter = Cell::new(0u64);
    let next_perm = |len: usize| {
        let k = counter.get();
        counter.set(k + 1);
        derangement(len, &mut crate::world::stream_rng(perm_seed, k))
    };
    if let Some(r) = adv.regressor.as_mut() {
        fit.aux_history = fit_epochs(r, adam, n, batch, epochs, rng, |t, r, vars, idx| {
            let cx = t.constant(pool.c_x.select_rows(idx));
            let cy = t.constant(pool.c_y.select_rows(idx));
            let tx = t.constant(pool.t_x.select_rows(idx));
            let ty = t.constant(pool.t_y.select_rows(idx));
            regressor_pair_loss(t, r, vars, cx, tx, cy, ty, RegressorSide::TrainR)
        })?;
    } else if let Some(m) = adv.mine.as_mut() {
        fit.aux_history = fit_epochs(m, adam, n, batch, epochs, rng, |t, m, vars, idx| {
            let c = t.constant(pool.c_y.select_rows(idx));
            let s = t.constant(pool.t_y.select_rows(idx));
            let obj = mine_objective(t, m, vars, c, s, &next_perm(idx.len()))?;
            Ok(t.scale(obj, -1.0))
        })?;
    } else if let Some(d) = adv.disc_mi.as_mut() {
        fit.aux_history = fit_epochs(d, adam, n, batch, epochs, rng, |t, d, vars, idx| {
            let c = t.constant(pool.c_y.select_rows(idx));
            let s = t.constant(pool.t_y.select_rows(idx));
            disc_mi_train_loss(t, d, vars, c, s, &next_perm(idx.len()))
        })?;
    }
    Ok(fit)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub l_lat: f64,
    pub l_img: f64,
    pub l_adv_d: f64,
    /// Regressor loss, or the MI term in MI modes.
    pub l_adv_r: f64,
    pub grad_norm: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        self.tail_csv(self.rows.len())
    }

    /// Header plus the last `n` rows.
    pub fn tail_csv(&self, n: usize) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for r in &self.rows[self.rows.len().saturating_sub(n)..] {
            let _ = writeln!(
                s,
                "{},{:e},{:e},{:e},{:e},{:e},{}",
                r.step, r.l_lat, r.l_img, r.l_adv_d, r.l_adv_r, r.grad_norm, r.wall_ms
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }
}

/// Scalar summary of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub initial_l_lat: f64,
    pub final_l_lat: f64,
    pub final_l_img: f64,
    pub adversary_fits: usize,
    pub final_d_loss: Option<f64>,
    pub final_aux_loss: Option<f64>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub separator: SeparatorParams,
    pub adversaries: Option<Adversaries>,
    pub log: TrainLog,
    pub summary: TrainSummary,
}

/// Shuffled passes over `0..n`, reshuffled when fewer than a batch remain.
struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        Self { order: (0..n).collect(), pos: n, rng }
    }

    fn next(&mut self, batch: usize) -> &[usize] {
        if self.pos + batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = &self.order[self.pos..self.pos + batch];
        self.pos += batch;
        out
    }
}

/// Samples training data from `world` and runs [`train_on`].
pub fn train_stage1(world: &World, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let (x, y) = sample_training_data(world, cfg)?;
    train_on(world, &x, &y, cfg)
}

pub fn sample_training_data(world: &World, cfg: &TrainConfig) -> Result<(ObservedDataset, ObservedDataset)> {
    if cfg.separator.multi_salient {
        let (x, y) = world.sample_multi_salient(cfg.train_size, streams::TRAIN_X)?;
        Ok((x.data, y.data))
    } else {
        let x = world.sample_background(cfg.train_size, streams::TRAIN_X)?;
        let y = world.sample_target(cfg.train_size, streams::TRAIN_Y)?;
        Ok((x.data, y.data))
    }
}

/// Per-step loss values before weighting.
struct StepValues {
    lat: f64,
    img: f64,
    adv_d: f64,
    adv_r: f64,
    total: f64,
}

/// Trains a fresh separator on the given background and target datasets.
pub fn train_on(world: &World, x: &ObservedDataset, y: &ObservedDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let d_w = world.config().d_w;
    if x.latents.cols() != d_w || y.latents.cols() != d_w {
        return Err(CaError::Compat(format!("datasets have width {}, world expects {d_w}", x.latents.cols())));
    }
    if cfg.separator.multi_salient && !world.has_second_salient() {
        return Err(CaError::Config("multi_salient separator needs a world with d_s2_true > 0".into()));
    }
    for ds in [x, y] {
        if ds.len() < cfg.batch_size {
            return Err(CaError::Config(format!("dataset of {} rows is smaller than a batch", ds.len())));
        }
    }
    let seed = cfg.seed;
    let mut init_rng = crate::world::stream_rng(seed, STREAM_INIT);
    let mut sep = SeparatorParams::init(&cfg.separator, d_w, &mut init_rng)?;
    let mut adv = if cfg.adversarial() { Some(Adversaries::new(cfg, d_w, &mut init_rng)?) } else { None };
    let mut adam = AdamState::new(cfg.lr_separator_phase1, &sep.shapes());
    let mut sx = EpochSampler::new(x.len(), crate::world::stream_rng(seed, STREAM_BATCH_X));
    let mut sy = EpochSampler::new(y.len(), crate::world::stream_rng(seed, STREAM_BATCH_Y));
    let mut adv_rng = crate::world::stream_rng(seed, STREAM_ADV);
    let mut perm_rng = crate::world::stream_rng(seed, STREAM_PERM);
    let clock = Instant::now();
    let mut log = TrainLog::default();
    let mut initial_l_lat = None;
    let mut last = None;
    let mut fits = 0;
    let mut last_fit = AdversaryFit::default();
    let mut warnings = Vec::new();

    let abort = |log: &TrainLog, step: usize, what: &str| {
        CaError::Numeric(format!("{what} at step {step}; last log rows:\n{}", log.tail_csv(10)))
    };

    for event in schedule_events(cfg) {
        match event {
            ScheduleEvent::FitAdversaries { epochs, initial, step } => {
                let adv = adv.as_mut().expect("adversarial schedule has adversaries");
                if !initial && !cfg.warm_restart {
                    *adv = Adversaries::new(cfg, d_w, &mut adv_rng)?;
                }
                let n = cfg.adversary_pool;
                let ix = rand::seq::index::sample(&mut adv_rng, x.len(), n).into_vec();
                let iy = rand::seq::index::sample(&mut adv_rng, y.len(), n).into_vec();
                let pool = pool_factors(&sep, &x.latents.select_rows(&ix), &y.latents.select_rows(&iy))?;
                last_fit = fit_on_pool(&pool, adv, epochs, cfg, &mut adv_rng).map_err(|e| match e {
                    CaError::Numeric(m) => abort(&log, step, &format!("adversary fit failed ({m})")),
                    other => other,
                })?;
                warnings.extend(last_fit.warnings.iter().map(|w| format!("step {step}: {w}")));
                fits += 1;
            }
            ScheduleEvent::TrainSeparator { start, end, adversarial } => {
                for step in start..end {
                    let bx = sx.next(cfg.batch_size).to_vec();
                    let by = sy.next(cfg.batch_size).to_vec();
                    let batch = Batch {
                        w_x: x.latents.select_rows(&bx),
                        o_x: x.observations.select_rows(&bx),
                        w_y: y.latents.select_rows(&by),
                        o_y: y.observations.select_rows(&by),
                    };
                    let adv_ref = if adversarial { adv.as_ref() } else { None };
                    let perm = derangement(cfg.batch_size, &mut perm_rng);
                    let logging = step % LOG_EVERY == 0;
                    let mut tape = Tape::new();
                    let (total, values) = record_step(&mut tape, world, &sep, adv_ref, &batch, cfg, &perm, logging)?;
                    if !values.total.is_finite() {
                        return Err(abort(&log, step, &format!("non-finite loss {}", values.total)));
                    }
                    let grads = tape.backward(total)?.collect(0, &sep.shapes());
                    let grad_norm = grads.iter().map(Matrix::sq_norm).sum::<f64>().sqrt();
                    if !grad_norm.is_finite() {
                        return Err(abort(&log, step, "non-finite gradient"));
                    }
                    initial_l_lat.get_or_insert(values.lat);
                    if logging {
                        log.rows.push(TrainLogRow {
                            step,
                            l_lat: values.lat,
                            l_img: values.img,
                            l_adv_d: values.adv_d,
                            l_adv_r: values.adv_r,
                            grad_norm,
                            wall_ms: if cfg.log_wall_time { clock.elapsed().as_millis() as u64 } else { 0 },
                        });
                    }
                    adam.lr = cfg.separator_lr(step);
                    adam.step(&mut sep.tensors_mut(), &grads)?;
                    last = Some(values);
                }
            }
        }
    }

    let last_fit_d = last_fit.d_history.last().copied();
    let last_fit_aux = last_fit.aux_history.last().copied();
    let summary = TrainSummary {
        steps: cfg.total_steps,
        initial_l_lat: initial_l_lat.unwrap_or(f64::NAN),
        final_l_lat: last.as_ref().map_or(f64::NAN, |v| v.lat),
        final_l_img: last.as_ref().map_or(f64::NAN, |v| v.img),
        adversary_fits: fits,
        final_d_loss: last_fit_d,
        final_aux_loss: last_fit_aux,
        warnings,
    };
    Ok(TrainOutcome { separator: sep, adversaries: adv, log, summary })
}

struct Batch {
    w_x: Matrix,
    o_x: Matrix,
    w_y: Matrix,
    o_y: Matrix,
}

/// Records the weighted separator objective for one batch; adversaries are frozen.
#[allow(clippy::too_many_arguments)]
fn record_step(
    t: &mut Tape,
    world: &World,
    sep: &SeparatorParams,
    adv: Option<&Adversaries>,
    b: &Batch,
    cfg: &TrainConfig,
    perm: &[usize],
    logging: bool,
) -> Result<(Var, StepValues)> {
    let bound = sep.bind(t, Bind::Train(0));
    let wx = t.constant(b.w_x.clone());
    let wy = t.constant(b.w_y.clone());
    let ox = t.constant(b.o_x.clone());
    let oy = t.constant(b.o_y.clone());
    let fx = sep.forward(t, &bound, wx)?;
    let fy = sep.forward(t, &bound, wy)?;
    let obs = world.observation_map();
    let (lat, img) = if sep.is_multi_salient() {
        multi_salient_losses(t, fx, wx, ox, fy, wy, oy, obs)?
    } else {
        (latent_loss_total(t, fx, wx, fy, wy)?, observation_recon_loss(t, fx, ox, fy, oy, obs)?)
    };
    let mut terms = LossTerms { img, lat, adv_r: None, adv_d: None };
    let mut logged_r = None;
    if let Some(adv) = adv {
        let d_vars = t.bind(&adv.discriminator, Bind::Frozen);
        terms.adv_d = Some(disc_adversarial_loss(t, &adv.discriminator, &d_vars, fx.c, fy.c, DiscSide::FoolD(cfg.fool_d))?);
        let s_own = own_salient(sep, fx, fy);
        match adv.mode {
            RegularizerMode::Adv => {
                let r = adv.regressor.as_ref().expect("adv mode has a regressor");
                let r_vars = t.bind(r, Bind::Frozen);
                let multi = sep.is_multi_salient();
                terms.adv_r = Some(match cfg.fool_r {
                    FoolR::Negate if multi => {
                        regressor_pair_loss(t, r, &r_vars, fx.c, fx.s, fy.c, s_own, RegressorSide::FoolR)?
                    }
                    FoolR::Negate => regressor_adversarial_loss(t, r, &r_vars, fx.c, fy.c, s_own, RegressorSide::FoolR)?,
                    FoolR::Confusion => {
                        let (sx, sy) = (t.value(fx.s), t.value(s_own));
                        let t_x = if multi { sx.clone() } else { Matrix::zeros(sx.rows(), sx.cols()) };
                        let t_y = sy.clone();
                        regressor_confusion_loss(t, r, &r_vars, fx.c, &t_x, fy.c, &t_y)?
                    }
                });
            }
            RegularizerMode::Mine => {
                let m = adv.mine.as_ref().expect("mine mode has a critic");
                let vars = t.bind(m, Bind::Frozen);
                terms.adv_r = Some(mine_objective(t, m, &vars, fy.c, s_own, perm)?);
            }
            RegularizerMode::DiscMi => {
                let d = adv.disc_mi.as_ref().expect("disc-mi mode has a critic");
                let vars = t.bind(d, Bind::Frozen);
                terms.adv_r = Some(disc_mi_value(t, d, &vars, fy.c, s_own)?);
            }
            RegularizerMode::KnnMi => {
                if logging {
                    let k = 5.min(perm.len() - 1);
                    logged_r = Some(knn_mi_estimate(t.value(fy.c), t.value(s_own), k, KnnNorm::Chebyshev)?.value_nats);
                }
            }
            RegularizerMode::None => {}
        }
    }
    let total = total_separation_loss(t, &terms, &cfg.weights)?;
    let value = |v: Option<Var>| v.map_or(0.0, |v| t.scalar(v));
    let values = StepValues {
        lat: t.scalar(lat),
        img: t.scalar(img),
        adv_d: value(terms.adv_d),
        adv_r: logged_r.unwrap_or_else(|| value(terms.adv_r)),
        total: t.scalar(total),
    };
    Ok((total, values))
}

/// The salient output of the target domain: `s_y`, or `s2_y` with two salient branches.
fn own_salient(sep: &SeparatorParams, _fx: FactorVars, fy: FactorVars) -> Var {
    if sep.is_multi_salient() {
        fy.s2.expect("multi-salient separator has s2")
    } else {
        fy.s
    }
}

/// Hex SHA-256 of the compact JSON encoding of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// JSON header stored inside the checkpoint container and mirrored by the sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub d_w: usize,
    pub step: usize,
    pub config_hash: String,
    pub separator: SeparatorConfig,
    pub regularizer_mode: RegularizerMode,
    pub separator_tensors: usize,
    pub adversary_tensors: usize,
}

pub const CHECKPOINT_FORMAT: &str = "ca-separator-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub config_hash: String,
    pub step: usize,
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the separator (followed by any adversary tensors) and its sidecar, each atomically.
pub fn save_checkpoint(
    path: &Path,
    sep: &SeparatorParams,
    adv: Option<&Adversaries>,
    mode: RegularizerMode,
    step: usize,
    config_hash: &str,
) -> Result<()> {
    let mut tensors = sep.tensors();
    let n_adv = adv.map_or(0, |a| a.num_tensors());
    if let Some(a) = adv {
        tensors.extend(a.tensors());
    }
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        d_w: sep.d_w(),
        step,
        config_hash: config_hash.into(),
        separator: sep.config().clone(),
        regularizer_mode: mode,
        separator_tensors: sep.num_tensors(),
        adversary_tensors: n_adv,
    };
    let json = serde_json::to_string(&header).expect("header serializes");
    write_atomic(path, &encode_tensors(&json, &tensors))?;
    let side = Sidecar { config_hash: config_hash.into(), step };
    let side = serde_json::to_string_pretty(&side).expect("sidecar serializes");
    write_atomic(&sidecar_path(path), side.as_bytes())
}

/// Reads a checkpoint back into a separator.
pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, SeparatorParams)> {
    let bytes = read_file(path)?;
    let (json, tensors) = decode_tensors(&bytes)?;
    let header: CheckpointHeader =
        serde_json::from_str(&json).map_err(|e| CaError::Compat(format!("checkpoint header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(CaError::Compat(format!("unknown checkpoint format {:?}", header.format)));
    }
    if tensors.len() != header.separator_tensors + header.adversary_tensors {
        return Err(CaError::Compat("checkpoint tensor count does not match its header".into()));
    }
    let sep = SeparatorParams::from_tensors(&header.separator, header.d_w, &tensors[..header.separator_tensors])?;
    Ok((header, sep))
}
