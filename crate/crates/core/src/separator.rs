//! The separating network and its reconstruction losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Activation, Bind, Matrix, Mlp, MlpSpec, Parameters, Tape, Var, WeightMode};
use crate::world::ObservationMap;
use crate::{CaError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommonInit {
    /// Paired-unit construction that makes the branch an exact identity map, plus noise.
    ExactIdentity,
    /// Every layer an identity matrix plus noise.
    LayerIdentity,
    Kaiming,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeparatorConfig {
    pub depth: usize,
    pub width: usize,
    pub activation: Activation,
    pub weight_mode: WeightMode,
    /// Number of leading layers shared by all branches (0 = independent).
    pub shared_prefix_depth: usize,
    /// Adds the second salient branch.
    pub multi_salient: bool,
    pub common_init: CommonInit,
    pub init_noise: f64,
}

impl Default for SeparatorConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            width: 64,
            activation: Activation::LeakyRelu(0.2),
            weight_mode: WeightMode::Dense,
            shared_prefix_depth: 0,
            multi_salient: false,
            common_init: CommonInit::ExactIdentity,
            init_noise: 1e-3,
        }
    }
}

impl SeparatorConfig {
    pub fn validate(&self, d_w: usize) -> Result<()> {
        if self.shared_prefix_depth >= self.depth {
            return Err(CaError::Config(format!(
                "shared_prefix_depth {} must be below depth {}",
                self.shared_prefix_depth, self.depth
            )));
        }
        if let WeightMode::PerStyle(k) = self.weight_mode {
            if k == 0 || d_w % k != 0 {
                return Err(CaError::Config(format!("d_w {d_w} is not divisible into {k} styles")));
            }
            if self.shared_prefix_depth > 0 {
                return Err(CaError::Config("a shared prefix is only supported with dense weights".into()));
            }
        }
        if !(self.init_noise >= 0.0) {
            return Err(CaError::Config("init_noise must be >= 0".into()));
        }
        self.branch_spec(self.depth).validate()?;
        Ok(())
    }

    fn branch_spec(&self, depth: usize) -> MlpSpec {
        MlpSpec { depth, width: self.width, activation: self.activation, weight_mode: self.weight_mode }
    }
}

/// Learned factors for a batch (rows are samples).
#[derive(Clone, Debug, PartialEq)]
pub struct FactorPair {
    pub c: Matrix,
    pub s: Matrix,
    /// Second salient output in the multiple-salient setting.
    pub s2: Option<Matrix>,
}

impl FactorPair {
    /// `s`, plus `s2` when present.
    pub fn salient_total(&self) -> Result<Matrix> {
        match &self.s2 {
            Some(s2) => Ok(self.s.add(s2)?),
            None => Ok(self.s.clone()),
        }
    }
}

/// Factor nodes recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct FactorVars {
    pub c: Var,
    pub s: Var,
    pub s2: Option<Var>,
}

/// Parameter handles of a separator bound on a tape.
#[derive(Clone, Debug)]
pub struct BoundSeparator {
    shared: Vec<Var>,
    c: Vec<Var>,
    s: Vec<Var>,
    s2: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeparatorParams {
    cfg: SeparatorConfig,
    d_w: usize,
    shared: Option<Mlp>,
    branch_c: Mlp,
    branch_s: Mlp,
    branch_s2: Option<Mlp>,
}

impl Parameters for SeparatorParams {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut v = Vec::new();
        if let Some(m) = &self.shared {
            v.extend(m.tensors());
        }
        v.extend(self.branch_c.tensors());
        v.extend(self.branch_s.tensors());
        if let Some(m) = &self.branch_s2 {
            v.extend(m.tensors());
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = Vec::new();
        if let Some(m) = &mut self.shared {
            v.extend(m.tensors_mut());
        }
        v.extend(self.branch_c.tensors_mut());
        v.extend(self.branch_s.tensors_mut());
        if let Some(m) = &mut self.branch_s2 {
            v.extend(m.tensors_mut());
        }
        v
    }
}

impl SeparatorParams {
    /// Freshly initialized separator: near-identity common branch, zero-output salient heads.
    pub fn init<R: Rng + ?Sized>(cfg: &SeparatorConfig, d_w: usize, rng: &mut R) -> Result<Self> {
        cfg.validate(d_w)?;
        let p = cfg.shared_prefix_depth;
        let branch_depth = cfg.depth - p;
        let (shared, branch_in) = if p > 0 {
            let spec = MlpSpec::dense(p, cfg.width, cfg.activation);
            (Some(Mlp::kaiming(spec, d_w, cfg.width, rng)?), cfg.width)
        } else {
            (None, d_w)
        };
        let spec = cfg.branch_spec(branch_depth);
        let branch_c = if branch_in != d_w {
            Mlp::kaiming(spec, branch_in, d_w, rng)?
        } else {
            match cfg.common_init {
                CommonInit::ExactIdentity => Mlp::exact_identity(spec, d_w, cfg.init_noise, rng)?,
                CommonInit::LayerIdentity => Mlp::layer_identity(spec, d_w, cfg.init_noise, rng)?,
                CommonInit::Kaiming => Mlp::kaiming(spec, d_w, d_w, rng)?,
            }
        };
        let salient = |rng: &mut R| -> Result<Mlp> {
            let mut m = Mlp::kaiming(spec, branch_in, d_w, rng)?;
            m.zero_output_layer();
            Ok(m)
        };
        let branch_s = salient(rng)?;
        let branch_s2 = if cfg.multi_salient { Some(salient(rng)?) } else { None };
        Ok(Self { cfg: cfg.clone(), d_w, shared, branch_c, branch_s, branch_s2 })
    }

    /// Rebuilds a separator from tensors in [`Parameters::tensors`] order.
    pub fn from_tensors(cfg: &SeparatorConfig, d_w: usize, tensors: &[Matrix]) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut sep = Self::init(cfg, d_w, &mut rng)?;
        let mut slots = sep.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(CaError::Compat(format!(
                "separator expects {} tensors, file has {}",
                slots.len(),
                tensors.len()
            )));
        }
        for (i, (slot, t)) in slots.iter_mut().zip(tensors).enumerate() {
            if slot.shape() != t.shape() {
                return Err(CaError::Compat(format!(
                    "tensor {i}: expected {:?}, found {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            **slot = t.clone();
        }
        Ok(sep)
    }

    pub fn config(&self) -> &SeparatorConfig {
        &self.cfg
    }

    pub fn d_w(&self) -> usize {
        self.d_w
    }

    pub fn is_multi_salient(&self) -> bool {
        self.branch_s2.is_some()
    }

    pub fn branch_c(&self) -> &Mlp {
        &self.branch_c
    }

    pub fn branch_s(&self) -> &Mlp {
        &self.branch_s
    }

    pub fn branch_s_mut(&mut self) -> &mut Mlp {
        &mut self.branch_s
    }

    pub fn branch_c_mut(&mut self) -> &mut Mlp {
        &mut self.branch_c
    }

    pub fn branch_s2(&self) -> Option<&Mlp> {
        self.branch_s2.as_ref()
    }

    pub fn bind(&self, tape: &mut Tape, bind: Bind) -> BoundSeparator {
        let mut offset = match bind {
            Bind::Train(o) => o,
            Bind::Frozen => 0,
        };
        let mut next = |tape: &mut Tape, m: &Mlp| {
            let b = match bind {
                Bind::Train(_) => Bind::Train(offset),
                Bind::Frozen => Bind::Frozen,
            };
            offset += m.num_tensors();
            tape.bind(m, b)
        };
        let shared = self.shared.as_ref().map(|m| next(tape, m)).unwrap_or_default();
        let c = next(tape, &self.branch_c);
        let s = next(tape, &self.branch_s);
        let s2 = self.branch_s2.as_ref().map(|m| next(tape, m)).unwrap_or_default();
        BoundSeparator { shared, c, s, s2 }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &BoundSeparator, w: Var) -> Result<FactorVars> {
        let cols = tape.value(w).cols();
        if cols != self.d_w {
            return Err(CaError::Compat(format!("latent width {cols} does not match separator d_w {}", self.d_w)));
        }
        let h = match &self.shared {
            Some(m) => {
                let h = m.forward(tape, w, &bound.shared)?;
                match self.cfg.activation {
                    Activation::LeakyRelu(a) => tape.leaky_relu(h, a),
                    Activation::Relu => tape.relu(h),
                    Activation::Identity => h,
                }
            }
            None => w,
        };
        let c = self.branch_c.forward(tape, h, &bound.c)?;
        let s = self.branch_s.forward(tape, h, &bound.s)?;
        let s2 = match &self.branch_s2 {
            Some(m) => Some(m.forward(tape, h, &bound.s2)?),
            None => None,
        };
        Ok(FactorVars { c, s, s2 })
    }

    /// `w ↦ (𝒮_c(w), 𝒮_s(w))` for a batch of latent codes.
    pub fn split(&self, w: &Matrix) -> Result<FactorPair> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, Bind::Frozen);
        let wv = tape.constant(w.clone());
        let f = self.forward(&mut tape, &bound, wv)?;
        Ok(FactorPair {
            c: tape.value(f.c).clone(),
            s: tape.value(f.s).clone(),
            s2: f.s2.map(|v| tape.value(v).clone()),
        })
    }

    /// Evaluates a loss recorded by `build` with this separator frozen.
    fn eval_loss(&self, build: impl FnOnce(&mut Tape, &BoundSeparator) -> Result<Var>) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, Bind::Frozen);
        let v = build(&mut tape, &bound)?;
        Ok(tape.scalar(v))
    }

    /// Batch mean of `‖𝒮_c(w_x) − w_x‖²`.
    pub fn latent_loss_x(&self, w_x: &Matrix) -> Result<f64> {
        self.eval_loss(|t, b| {
            let w = t.constant(w_x.clone());
            let f = self.forward(t, b, w)?;
            latent_loss_x(t, f, w)
        })
    }

    /// Batch mean of `‖𝒮_c(w_y) + 𝒮_s(w_y) − w_y‖²`.
    pub fn latent_loss_y(&self, w_y: &Matrix) -> Result<f64> {
        self.eval_loss(|t, b| {
            let w = t.constant(w_y.clone());
            let f = self.forward(t, b, w)?;
            latent_loss_y(t, f, w)
        })
    }

    /// Batch mean of `‖𝒮_s(w_x)‖²`.
    pub fn salient_norm_penalty(&self, w_x: &Matrix) -> Result<f64> {
        self.eval_loss(|t, b| {
            let w = t.constant(w_x.clone());
            let f = self.forward(t, b, w)?;
            salient_norm_penalty(t, f)
        })
    }

    pub fn latent_loss_total(&self, w_x: &Matrix, w_y: &Matrix) -> Result<f64> {
        self.eval_loss(|t, b| {
            let wx = t.constant(w_x.clone());
            let wy = t.constant(w_y.clone());
            let fx = self.forward(t, b, wx)?;
            let fy = self.forward(t, b, wy)?;
            latent_loss_total(t, fx, wx, fy, wy)
        })
    }

    pub fn observation_recon_loss(
        &self,
        w_x: &Matrix,
        o_x: &Matrix,
        w_y: &Matrix,
        o_y: &Matrix,
        obs: &ObservationMap,
    ) -> Result<f64> {
        self.eval_loss(|t, b| {
            let wx = t.constant(w_x.clone());
            let wy = t.constant(w_y.clone());
            let fx = self.forward(t, b, wx)?;
            let fy = self.forward(t, b, wy)?;
            let ox = t.constant(o_x.clone());
            let oy = t.constant(o_y.clone());
            observation_recon_loss(t, fx, ox, fy, oy, obs)
        })
    }

    pub fn multi_salient_losses(
        &self,
        w_x: &Matrix,
        o_x: &Matrix,
        w_y: &Matrix,
        o_y: &Matrix,
        obs: &ObservationMap,
    ) -> Result<f64> {
        self.eval_loss(|t, b| {
            let wx = t.constant(w_x.clone());
            let wy = t.constant(w_y.clone());
            let fx = self.forward(t, b, wx)?;
            let fy = self.forward(t, b, wy)?;
            let ox = t.constant(o_x.clone());
            let oy = t.constant(o_y.clone());
            let (lat, img) = multi_salient_losses(t, fx, wx, ox, fy, wy, oy, obs)?;
            Ok(t.add(lat, img)?)
        })
    }
}

fn require_rows(t: &Tape, v: Var) -> Result<()> {
    if t.value(v).rows() == 0 {
        return Err(CaError::Contract("empty batch".into()));
    }
    Ok(())
}

fn mean_sq(t: &mut Tape, v: Var) -> Result<Var> {
    require_rows(t, v)?;
    let n = t.sq_norm_rows(v);
    Ok(t.mean(n)?)
}

/// Batch mean of `‖a − b‖²`.
fn mean_sq_diff(t: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = t.sub(a, b)?;
    mean_sq(t, d)
}

pub fn latent_loss_x(t: &mut Tape, fx: FactorVars, w_x: Var) -> Result<Var> {
    mean_sq_diff(t, fx.c, w_x)
}

pub fn latent_loss_y(t: &mut Tape, fy: FactorVars, w_y: Var) -> Result<Var> {
    let sum = t.add(fy.c, fy.s)?;
    mean_sq_diff(t, sum, w_y)
}

pub fn salient_norm_penalty(t: &mut Tape, fx: FactorVars) -> Result<Var> {
    mean_sq(t, fx.s)
}

pub fn latent_loss_total(t: &mut Tape, fx: FactorVars, w_x: Var, fy: FactorVars, w_y: Var) -> Result<Var> {
    let a = latent_loss_x(t, fx, w_x)?;
    let b = latent_loss_y(t, fy, w_y)?;
    let c = salient_norm_penalty(t, fx)?;
    let ab = t.add(a, b)?;
    Ok(t.add(ab, c)?)
}

/// `‖o_x − G(c_x + s_x)‖² + ‖o_y − G(c_y + s_y)‖²`, batch means.
pub fn observation_recon_loss(
    t: &mut Tape,
    fx: FactorVars,
    o_x: Var,
    fy: FactorVars,
    o_y: Var,
    obs: &ObservationMap,
) -> Result<Var> {
    let rx = t.add(fx.c, fx.s)?;
    let gx = obs.record(t, rx)?;
    let lx = mean_sq_diff(t, o_x, gx)?;
    let ry = t.add(fy.c, fy.s)?;
    let gy = obs.record(t, ry)?;
    let ly = mean_sq_diff(t, o_y, gy)?;
    Ok(t.add(lx, ly)?)
}

/// Multiple-salient objective split into (latent part, observation part).
#[allow(clippy::too_many_arguments)]
pub fn multi_salient_losses(
    t: &mut Tape,
    fx: FactorVars,
    w_x: Var,
    o_x: Var,
    fy: FactorVars,
    w_y: Var,
    o_y: Var,
    obs: &ObservationMap,
) -> Result<(Var, Var)> {
    let (sx2, sy2) = match (fx.s2, fy.s2) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(CaError::Config("multiple-salient losses need the second salient branch".into())),
    };
    let rx = t.add(fx.c, fx.s)?;
    let ry = t.add(fy.c, sy2)?;
    let lx = mean_sq_diff(t, rx, w_x)?;
    let ly = mean_sq_diff(t, ry, w_y)?;
    let px = mean_sq(t, sx2)?;
    let py = mean_sq(t, fy.s)?;
    let a = t.add(lx, ly)?;
    let b = t.add(px, py)?;
    let lat = t.add(a, b)?;
    let gx = obs.record(t, rx)?;
    let gy = obs.record(t, ry)?;
    let ix = mean_sq_diff(t, o_x, gx)?;
    let iy = mean_sq_diff(t, o_y, gy)?;
    let img = t.add(ix, iy)?;
    Ok((lat, img))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Observation reconstruction.
    pub lambda1: f64,
    /// Latent reconstruction.
    pub lambda2: f64,
    /// Regressor adversary (or MI term).
    pub lambda3: f64,
    /// Discriminator adversary.
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 1.0, lambda3: 1.0, lambda4: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3), ("lambda4", self.lambda4)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CaError::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Recorded loss terms; adversarial terms are absent when not in use.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub img: Var,
    pub lat: Var,
    pub adv_r: Option<Var>,
    pub adv_d: Option<Var>,
}

/// `λ1·L_img + λ2·L_lat + λ3·L_adv-R + λ4·L_adv-D`.
pub fn total_separation_loss(t: &mut Tape, terms: &LossTerms, w: &LossWeights) -> Result<Var> {
    w.validate()?;
    let a = t.scale(terms.img, w.lambda1);
    let b = t.scale(terms.lat, w.lambda2);
    let mut total = t.add(a, b)?;
    if let Some(r) = terms.adv_r {
        let r = t.scale(r, w.lambda3);
        total = t.add(total, r)?;
    }
    if let Some(d) = terms.adv_d {
        let d = t.scale(d, w.lambda4);
        total = t.add(total, d)?;
    }
    Ok(total)
}

/// `(c_x + s_y, c_y + s_x)`; with a second salient branch both salient parts move.
pub fn swap(fx: &FactorPair, fy: &FactorPair) -> Result<(Matrix, Matrix)> {
    let xy = fx.c.add(&fy.salient_total()?)?;
    let yx = fy.c.add(&fx.salient_total()?)?;
    Ok((xy, yx))
}
