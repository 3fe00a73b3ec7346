//! Synthetic generative worlds with known common and salient factors.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::nn::{Matrix, Tape, Var};
use crate::{CaError, Result};

/// RNG stream ids; every dataset draws from its own stream of the world seed.
pub mod streams {
    pub const WORLD: u64 = 0;
    pub const TRAIN_X: u64 = 1;
    pub const TRAIN_Y: u64 = 2;
    pub const TEST_X: u64 = 3;
    pub const TEST_Y: u64 = 4;
    pub const GRID: u64 = 5;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mixing {
    Linear,
    MlpNonlinear,
}

/// Per-coordinate two-mode Gaussian mixture for non-zero salient factors:
/// `offset ± half_gap + std·N(0,1)`, each sign with probability 1/2.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SalientDistribution {
    pub offset: f64,
    pub half_gap: f64,
    pub std: f64,
}

impl Default for SalientDistribution {
    fn default() -> Self {
        Self { offset: 2.0, half_gap: 1.0, std: 0.3 }
    }
}

impl SalientDistribution {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let z: f64 = StandardNormal.sample(rng);
        self.offset + sign * self.half_gap + self.std * z
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub d_w: usize,
    pub d_c_true: usize,
    pub d_s_true: usize,
    /// Second salient subspace for the multiple-salient setting; 0 disables it.
    pub d_s2_true: usize,
    pub mixing: Mixing,
    pub noise_std: f64,
    pub salient_distribution: SalientDistribution,
    /// Distribution of the second salient factor.
    pub salient2_distribution: SalientDistribution,
    pub obs_dim: usize,
    pub seed: u64,
    /// Coordinate of `c_true` whose sign defines the common attribute.
    pub common_attr_index: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            d_w: 32,
            d_c_true: 8,
            d_s_true: 4,
            d_s2_true: 0,
            mixing: Mixing::Linear,
            noise_std: 0.1,
            salient_distribution: SalientDistribution::default(),
            salient2_distribution: SalientDistribution { offset: 2.0, half_gap: 0.0, std: 0.5 },
            obs_dim: 32,
            seed: 0,
            common_attr_index: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let used = self.d_c_true + self.d_s_true + self.d_s2_true;
        if used > self.d_w {
            return Err(CaError::Config(format!(
                "d_c_true + d_s_true + d_s2_true = {used} exceeds d_w = {}",
                self.d_w
            )));
        }
        if self.d_c_true == 0 || self.d_s_true == 0 {
            return Err(CaError::Config("d_c_true and d_s_true must be at least 1".into()));
        }
        if self.common_attr_index >= self.d_c_true {
            return Err(CaError::Config(format!(
                "common_attr_index {} must be below d_c_true {}",
                self.common_attr_index, self.d_c_true
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(CaError::Config("noise_std must be finite and >= 0".into()));
        }
        for sd in [&self.salient_distribution, &self.salient2_distribution] {
            if !(sd.std >= 0.0 && sd.offset.is_finite() && sd.half_gap.is_finite() && sd.std.is_finite()) {
                return Err(CaError::Config("salient distributions must be finite with std >= 0".into()));
            }
        }
        if self.obs_dim == 0 || self.d_w == 0 {
            return Err(CaError::Config("d_w and obs_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    X,
    Y,
    /// Attribute grid with independently present salient patterns.
    Mixed,
}

impl Domain {
    pub fn code(self) -> u8 {
        match self {
            Domain::X => 0,
            Domain::Y => 1,
            Domain::Mixed => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Domain::X),
            1 => Some(Domain::Y),
            2 => Some(Domain::Mixed),
            _ => None,
        }
    }
}

/// The part of a dataset that training may see.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservedDataset {
    pub domain: Domain,
    /// `n × d_w`
    pub latents: Matrix,
    /// `n × obs_dim`
    pub observations: Matrix,
}

impl ObservedDataset {
    pub fn len(&self) -> usize {
        self.latents.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ground-truth factors for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub c_true: Vec<f64>,
    pub s_true: Vec<f64>,
    /// Empty unless the world has a second salient subspace.
    pub s2_true: Vec<f64>,
    pub attr_common: u8,
    /// 1 iff the (first) salient pattern is present; for background/target data this is Y membership.
    pub attr_salient: u8,
    pub attr_salient2: u8,
}

/// Ground truth for a whole dataset, stored column-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct Truths {
    pub c: Matrix,
    pub s: Matrix,
    pub s2: Option<Matrix>,
    pub attr_common: Vec<u8>,
    pub attr_salient: Vec<u8>,
    pub attr_salient2: Vec<u8>,
}

impl Truths {
    pub fn get(&self, i: usize) -> GroundTruth {
        GroundTruth {
            c_true: self.c.row(i).to_vec(),
            s_true: self.s.row(i).to_vec(),
            s2_true: self.s2.as_ref().map_or_else(Vec::new, |m| m.row(i).to_vec()),
            attr_common: self.attr_common[i],
            attr_salient: self.attr_salient[i],
            attr_salient2: self.attr_salient2[i],
        }
    }
}

/// Observed data plus quarantined ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub data: ObservedDataset,
    truth: Truths,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn domain(&self) -> Domain {
        self.data.domain
    }

    /// Ground truth, for evaluation code only.
    pub fn oracle(&self) -> &Truths {
        &self.truth
    }
}

/// Fixed map from latent space to observation space.
#[derive(Clone, Debug, PartialEq)]
pub enum ObservationMap {
    Identity,
    /// `o = tanh(w·Uᵀ)·Vᵀ`
    TwoLayer { u: Matrix, v: Matrix },
}

impl ObservationMap {
    pub fn apply(&self, w: &Matrix) -> Matrix {
        match self {
            ObservationMap::Identity => w.clone(),
            ObservationMap::TwoLayer { u, v } => {
                let h = w.matmul_t(u).expect("observation map shape").map(f64::tanh);
                h.matmul_t(v).expect("observation map shape")
            }
        }
    }

    /// Differentiable application on a tape.
    pub fn record(&self, tape: &mut Tape, w: Var) -> Result<Var> {
        Ok(match self {
            ObservationMap::Identity => w,
            ObservationMap::TwoLayer { u, v } => {
                let uv = tape.constant(u.clone());
                let ub = tape.constant(Matrix::zeros(1, u.rows()));
                let h = tape.linear(w, uv, ub)?;
                let h = tape.tanh(h);
                let vv = tape.constant(v.clone());
                let vb = tape.constant(Matrix::zeros(1, v.rows()));
                tape.linear(h, vv, vb)?
            }
        })
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, ObservationMap::Identity)
    }
}

/// An immutable generative world.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    cfg: WorldConfig,
    a_c: Matrix,
    a_s: Matrix,
    a_s2: Option<Matrix>,
    mix: Option<Matrix>,
    obs: ObservationMap,
}

pub fn build_world(cfg: &WorldConfig) -> Result<World> {
    World::build(cfg)
}

impl World {
    pub fn build(cfg: &WorldConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(cfg.seed, streams::WORLD);
        let k = cfg.d_c_true + cfg.d_s_true + cfg.d_s2_true;
        let g = DMatrix::<f64>::from_fn(cfg.d_w, k, |_, _| StandardNormal.sample(&mut rng));
        let q = g.qr().q();
        let cols = |from: usize, to: usize| {
            Matrix::from_vec(
                cfg.d_w,
                to - from,
                (0..cfg.d_w).flat_map(|r| (from..to).map(move |c| (r, c))).map(|(r, c)| q[(r, c)]).collect(),
            )
            .expect("subspace shape")
        };
        let a_c = cols(0, cfg.d_c_true);
        let a_s = cols(cfg.d_c_true, cfg.d_c_true + cfg.d_s_true);
        let a_s2 = (cfg.d_s2_true > 0).then(|| cols(cfg.d_c_true + cfg.d_s_true, k));
        let mix = match cfg.mixing {
            Mixing::Linear => None,
            Mixing::MlpNonlinear => Some(gaussian(&mut rng, cfg.d_w, cfg.d_w, 1.0 / (cfg.d_w as f64).sqrt())),
        };
        let obs = if cfg.obs_dim == cfg.d_w {
            ObservationMap::Identity
        } else {
            ObservationMap::TwoLayer {
                u: gaussian(&mut rng, cfg.obs_dim, cfg.d_w, 1.0 / (cfg.d_w as f64).sqrt()),
                v: gaussian(&mut rng, cfg.obs_dim, cfg.obs_dim, 1.0 / (cfg.obs_dim as f64).sqrt()),
            }
        };
        Ok(Self { cfg: cfg.clone(), a_c, a_s, a_s2, mix, obs })
    }

    /// Linear world with hand-chosen subspaces and an identity observation map.
    /// `cfg.mixing` must be linear, `cfg.obs_dim` must equal `cfg.d_w`, and the columns of
    /// `[A_c | A_s | A_s2]` must be orthonormal.
    pub fn from_subspaces(cfg: &WorldConfig, a_c: Matrix, a_s: Matrix, a_s2: Option<Matrix>) -> Result<Self> {
        cfg.validate()?;
        if cfg.mixing != Mixing::Linear || cfg.obs_dim != cfg.d_w {
            return Err(CaError::Config("hand-built worlds are linear with obs_dim = d_w".into()));
        }
        let widths = (a_c.cols(), a_s.cols(), a_s2.as_ref().map_or(0, Matrix::cols));
        if widths != (cfg.d_c_true, cfg.d_s_true, cfg.d_s2_true) {
            return Err(CaError::Config(format!("subspace widths {widths:?} do not match the config")));
        }
        let blocks: Vec<&Matrix> = [Some(&a_c), Some(&a_s), a_s2.as_ref()].into_iter().flatten().collect();
        if blocks.iter().any(|b| b.rows() != cfg.d_w) {
            return Err(CaError::Config("subspace bases must have d_w rows".into()));
        }
        let cols: Vec<Vec<f64>> =
            blocks.iter().flat_map(|b| (0..b.cols()).map(move |j| (0..b.rows()).map(|r| b.get(r, j)).collect())).collect();
        for (i, u) in cols.iter().enumerate() {
            for (j, v) in cols.iter().enumerate() {
                let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
                if (dot - f64::from(u8::from(i == j))).abs() > 1e-10 {
                    return Err(CaError::Config("subspace columns are not orthonormal".into()));
                }
            }
        }
        Ok(Self { cfg: cfg.clone(), a_c, a_s, a_s2, mix: None, obs: ObservationMap::Identity })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    /// `d_w × d_c_true`, orthonormal columns.
    pub fn a_c(&self) -> &Matrix {
        &self.a_c
    }

    pub fn a_s(&self) -> &Matrix {
        &self.a_s
    }

    pub fn a_s2(&self) -> Option<&Matrix> {
        self.a_s2.as_ref()
    }

    pub fn observation_map(&self) -> &ObservationMap {
        &self.obs
    }

    pub fn has_second_salient(&self) -> bool {
        self.a_s2.is_some()
    }

    /// Noise-free latent codes for the given factors (rows are samples).
    pub fn compose(&self, c: &Matrix, s: &Matrix, s2: Option<&Matrix>) -> Matrix {
        let mut z = c.matmul_t(&self.a_c).expect("c dims");
        z.add_assign(&s.matmul_t(&self.a_s).expect("s dims")).expect("latent dims");
        if let (Some(s2), Some(a)) = (s2, &self.a_s2) {
            z.add_assign(&s2.matmul_t(a).expect("s2 dims")).expect("latent dims");
        }
        self.warp(z)
    }

    fn warp(&self, z: Matrix) -> Matrix {
        match &self.mix {
            None => z,
            Some(m) => {
                let t = z.matmul_t(m).expect("mix dims").map(|v| 0.5 * v.tanh());
                z.add(&t).expect("mix dims")
            }
        }
    }

    pub fn observe(&self, w: &Matrix) -> Matrix {
        self.obs.apply(w)
    }

    /// Noise-free observations implied by a dataset's ground truth.
    pub fn clean_observations(&self, ds: &LabeledDataset) -> Matrix {
        let t = ds.oracle();
        self.observe(&self.compose(&t.c, &t.s, t.s2.as_ref()))
    }

    fn finish(
        &self,
        rng: &mut ChaCha8Rng,
        domain: Domain,
        c: Matrix,
        s: Matrix,
        s2: Option<Matrix>,
        attr_salient: Vec<u8>,
        attr_salient2: Vec<u8>,
    ) -> LabeledDataset {
        let n = c.rows();
        let mut latents = self.compose(&c, &s, s2.as_ref());
        if self.cfg.noise_std > 0.0 {
            for v in latents.data_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += self.cfg.noise_std * z;
            }
        }
        let observations = self.observe(&latents);
        let idx = self.cfg.common_attr_index;
        let attr_common = (0..n).map(|i| u8::from(c.get(i, idx) > 0.0)).collect();
        LabeledDataset {
            data: ObservedDataset { domain, latents, observations },
            truth: Truths { c, s, s2, attr_common, attr_salient, attr_salient2 },
        }
    }

    fn common<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Matrix {
        gaussian(rng, n, self.cfg.d_c_true, 1.0)
    }

    fn salient<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        n: usize,
        d: usize,
        sd: SalientDistribution,
        present: impl Fn(usize) -> bool,
    ) -> Matrix {
        let mut m = Matrix::zeros(n, d);
        for i in 0..n {
            if present(i) {
                for v in m.row_mut(i) {
                    *v = sd.sample(rng);
                }
            }
        }
        m
    }

    /// Background samples: `s_true = 0` exactly.
    pub fn sample_background(&self, n: usize, stream: u64) -> Result<LabeledDataset> {
        require_samples(n)?;
        let mut rng = stream_rng(self.cfg.seed, stream);
        let c = self.common(&mut rng, n);
        let s = Matrix::zeros(n, self.cfg.d_s_true);
        let s2 = self.a_s2.as_ref().map(|a| Matrix::zeros(n, a.cols()));
        Ok(self.finish(&mut rng, Domain::X, c, s, s2, vec![0; n], vec![0; n]))
    }

    /// Target samples: non-zero salient factor from the two-mode distribution.
    pub fn sample_target(&self, n: usize, stream: u64) -> Result<LabeledDataset> {
        require_samples(n)?;
        let mut rng = stream_rng(self.cfg.seed, stream);
        let c = self.common(&mut rng, n);
        let s = self.salient(&mut rng, n, self.cfg.d_s_true, self.cfg.salient_distribution, |_| true);
        let s2 = self.a_s2.as_ref().map(|a| Matrix::zeros(n, a.cols()));
        Ok(self.finish(&mut rng, Domain::Y, c, s, s2, vec![1; n], vec![0; n]))
    }

    /// Multiple-salient pair: X carries only pattern 1, Y carries only pattern 2.
    /// Both draw from `stream` (X first, then Y).
    pub fn sample_multi_salient(&self, n: usize, stream: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        require_samples(n)?;
        let d2 = self.require_second()?;
        let mut rng = stream_rng(self.cfg.seed, stream);
        let c = self.common(&mut rng, n);
        let s1 = self.salient(&mut rng, n, self.cfg.d_s_true, self.cfg.salient_distribution, |_| true);
        let x = self.finish(&mut rng, Domain::X, c, s1, Some(Matrix::zeros(n, d2)), vec![1; n], vec![0; n]);
        let c = self.common(&mut rng, n);
        let s2 = self.salient(&mut rng, n, d2, self.cfg.salient2_distribution, |_| true);
        let y = self.finish(&mut rng, Domain::Y, c, Matrix::zeros(n, self.cfg.d_s_true), Some(s2), vec![0; n], vec![1; n]);
        Ok((x, y))
    }

    /// Evaluation grid for the multiple-salient setting: the two patterns are
    /// present independently, cycling through the four combinations.
    pub fn sample_attribute_grid(&self, n: usize, stream: u64) -> Result<LabeledDataset> {
        require_samples(n)?;
        let d2 = self.require_second()?;
        let mut rng = stream_rng(self.cfg.seed, stream);
        let has1 = |i: usize| i % 2 == 1;
        let has2 = |i: usize| (i / 2) % 2 == 1;
        let c = self.common(&mut rng, n);
        let s1 = self.salient(&mut rng, n, self.cfg.d_s_true, self.cfg.salient_distribution, has1);
        let s2 = self.salient(&mut rng, n, d2, self.cfg.salient2_distribution, has2);
        let a1 = (0..n).map(|i| u8::from(has1(i))).collect();
        let a2 = (0..n).map(|i| u8::from(has2(i))).collect();
        Ok(self.finish(&mut rng, Domain::Mixed, c, s1, Some(s2), a1, a2))
    }

    fn require_second(&self) -> Result<usize> {
        self.a_s2
            .as_ref()
            .map(|a| a.cols())
            .ok_or_else(|| CaError::Config("multiple-salient sampling needs d_s2_true > 0".into()))
    }

    /// Ground-truth observation with the common factor of `x` and the salient factor of `y`.
    pub fn oracle_swap(&self, truth_x: &GroundTruth, truth_y: &GroundTruth) -> Vec<f64> {
        let c = Matrix::row_vector(&truth_x.c_true);
        let s = Matrix::row_vector(&truth_y.s_true);
        let s2 = (!truth_y.s2_true.is_empty()).then(|| Matrix::row_vector(&truth_y.s2_true));
        self.observe(&self.compose(&c, &s, s2.as_ref())).into_vec()
    }

    /// Row-wise [`World::oracle_swap`] over paired datasets.
    pub fn oracle_swap_batch(&self, x: &LabeledDataset, y: &LabeledDataset) -> Result<Matrix> {
        if x.len() != y.len() {
            return Err(CaError::Contract(format!("unpaired datasets: {} vs {}", x.len(), y.len())));
        }
        let (tx, ty) = (x.oracle(), y.oracle());
        Ok(self.observe(&self.compose(&tx.c, &ty.s, ty.s2.as_ref())))
    }
}

fn require_samples(n: usize) -> Result<()> {
    if n == 0 {
        return Err(CaError::Contract("sample count must be at least 1".into()));
    }
    Ok(())
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("gaussian shape")
}

/// Writes a human-readable preview: `domain,w_0..,o_0..`, at most `max_rows` rows.
pub fn write_csv(ds: &ObservedDataset, path: &Path, max_rows: usize) -> Result<()> {
    let mut out = String::from("domain");
    for j in 0..ds.latents.cols() {
        out.push_str(&format!(",w_{j}"));
    }
    for j in 0..ds.observations.cols() {
        out.push_str(&format!(",o_{j}"));
    }
    out.push('\n');
    let tag = match ds.domain {
        Domain::X => "X",
        Domain::Y => "Y",
        Domain::Mixed => "mixed",
    };
    for i in 0..ds.len().min(max_rows) {
        out.push_str(tag);
        for v in ds.latents.row(i).iter().chain(ds.observations.row(i)) {
            out.push_str(&format!(",{v:e}"));
        }
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| CaError::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| CaError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless() -> WorldConfig {
        WorldConfig { noise_std: 0.0, ..WorldConfig::default() }
    }

    #[test]
    fn same_seed_same_world() {
        let a = World::build(&WorldConfig::default()).unwrap();
        let b = World::build(&WorldConfig::default()).unwrap();
        assert_eq!(a, b);
        let c = World::build(&WorldConfig { seed: 1, ..WorldConfig::default() }).unwrap();
        assert_ne!(a.a_c(), c.a_c());
    }

    #[test]
    fn mixing_columns_are_orthonormal() {
        let w = World::build(&WorldConfig { d_s2_true: 4, ..WorldConfig::default() }).unwrap();
        let all = w.a_c().hstack(w.a_s()).unwrap().hstack(w.a_s2().unwrap()).unwrap();
        let gram = all.t_matmul(&all).unwrap();
        assert!(gram.max_abs_diff(&Matrix::identity(all.cols())) <= 1e-10);
        let cross = w.a_s().t_matmul(w.a_s2().unwrap()).unwrap();
        assert!(cross.data().iter().all(|v| v.abs() <= 1e-10));
    }

    #[test]
    fn background_lives_in_common_span() {
        let w = World::build(&noiseless()).unwrap();
        let x = w.sample_background(200, streams::TRAIN_X).unwrap();
        let proj = x.data.latents.matmul(w.a_s()).unwrap();
        assert!(proj.row_sq_norms().iter().all(|n| n.sqrt() <= 1e-10));
        assert!(x.oracle().s.data().iter().all(|&v| v == 0.0));
        // in span(A_c): w = A_c A_cᵀ w
        let back = x.data.latents.matmul(w.a_c()).unwrap().matmul_t(w.a_c()).unwrap();
        assert!(back.max_abs_diff(&x.data.latents) <= 1e-10);
    }

    #[test]
    fn overconstrained_dims_rejected() {
        let cfg = WorldConfig { d_c_true: 30, d_s_true: 4, ..WorldConfig::default() };
        let err = World::build(&cfg).unwrap_err();
        assert!(matches!(err, CaError::Config(ref m) if m.contains("exceeds d_w")));
    }

    #[test]
    fn hand_built_swap() {
        let cfg = WorldConfig { d_w: 3, d_c_true: 1, d_s_true: 1, obs_dim: 3, noise_std: 0.0, ..WorldConfig::default() };
        let mut w = World::build(&cfg).unwrap();
        w.a_c = Matrix::from_rows(&[[1.0], [0.0], [0.0]]).unwrap();
        w.a_s = Matrix::from_rows(&[[0.0], [1.0], [0.0]]).unwrap();
        let tx = GroundTruth { c_true: vec![1.0], s_true: vec![0.0], s2_true: vec![], attr_common: 1, attr_salient: 0, attr_salient2: 0 };
        let ty = GroundTruth { c_true: vec![-5.0], s_true: vec![2.0], s2_true: vec![], attr_common: 0, attr_salient: 1, attr_salient2: 0 };
        assert_eq!(w.oracle_swap(&tx, &ty), vec![1.0, 2.0, 0.0]);
    }

    #[test]
    fn swap_with_zero_salient_is_clean_reconstruction() {
        let w = World::build(&noiseless()).unwrap();
        let x = w.sample_background(5, 10).unwrap();
        let clean = w.clean_observations(&x);
        for i in 0..5 {
            let t = x.oracle().get(i);
            assert_eq!(w.oracle_swap(&t, &t), clean.row(i).to_vec());
        }
    }

    #[test]
    fn multi_salient_supports() {
        let w = World::build(&WorldConfig { d_s2_true: 4, ..WorldConfig::default() }).unwrap();
        let (x, y) = w.sample_multi_salient(300, 7).unwrap();
        assert!(x.oracle().s2.as_ref().unwrap().data().iter().all(|&v| v == 0.0));
        assert!(y.oracle().s.data().iter().all(|&v| v == 0.0));
        assert!(World::build(&WorldConfig::default()).unwrap().sample_multi_salient(10, 7).is_err());
        let g = w.sample_attribute_grid(8, 9).unwrap();
        assert_eq!(g.oracle().attr_salient, vec![0, 1, 0, 1, 0, 1, 0, 1]);
        assert_eq!(g.oracle().attr_salient2, vec![0, 0, 1, 1, 0, 0, 1, 1]);
    }

    #[test]
    fn nonidentity_observation_map_records_same_values() {
        let cfg = WorldConfig { obs_dim: 10, ..WorldConfig::default() };
        let w = World::build(&cfg).unwrap();
        let x = w.sample_background(4, 1).unwrap();
        let mut t = Tape::new();
        let v = t.constant(x.data.latents.clone());
        let o = w.observation_map().record(&mut t, v).unwrap();
        assert!(t.value(o).max_abs_diff(&x.data.observations) < 1e-12);
    }
}
