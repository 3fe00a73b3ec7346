//! Scoring a separator: latent probes, the Δ metric, oracle-scored swaps, MI and edits.

pub mod edit;
pub mod pca;
pub mod probe;

pub use edit::{
    affine_residual, alpha_csv, alpha_csv_rows, common_reconstruction, interpolate_salient, parse_alpha_range, swap_observations, swap_score,
    traverse_salient, write_alpha_csv, SwapScore,
};
pub use pca::{pca_salient, PcaBasis};
pub use probe::{fit_probe, stratified_folds, FeatureSpace, ProbeFit, ProbeResult};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::write_atomic;
use crate::nn::Matrix;
use crate::regularizers::{knn_mi_estimate, normalize_block, KnnNorm};
use crate::separator::{FactorPair, SeparatorParams};
use crate::world::{streams, LabeledDataset, Mixing, World};
use crate::{CaError, Result};

/// Anything that splits latent rows into common and salient parts.
pub trait Factorize {
    fn factors(&self, w: &Matrix) -> Result<FactorPair>;
}

impl Factorize for SeparatorParams {
    fn factors(&self, w: &Matrix) -> Result<FactorPair> {
        self.split(w)
    }
}

/// Projects onto the world's true salient subspaces; the common part is the remainder.
#[derive(Clone, Debug)]
pub struct OracleSeparator {
    p_s: Matrix,
    p_s2: Option<Matrix>,
}

impl OracleSeparator {
    pub fn new(world: &World) -> Result<Self> {
        if world.config().mixing != Mixing::Linear {
            return Err(CaError::Config("the oracle separator needs linear mixing".into()));
        }
        let proj = |a: &Matrix| a.matmul_t(a);
        Ok(Self { p_s: proj(world.a_s())?, p_s2: world.a_s2().map(proj).transpose()? })
    }
}

impl Factorize for OracleSeparator {
    fn factors(&self, w: &Matrix) -> Result<FactorPair> {
        let s = w.matmul(&self.p_s)?;
        let mut c = w.sub(&s)?;
        let s2 = match &self.p_s2 {
            Some(p) => {
                let s2 = w.matmul(p)?;
                c = c.sub(&s2)?;
                Some(s2)
            }
            None => None,
        };
        Ok(FactorPair { c, s, s2 })
    }
}

/// `c = w`, `s = 0`: performs no edit at all.
#[derive(Clone, Copy, Debug, Default)]
pub struct LeakSeparator;

impl Factorize for LeakSeparator {
    fn factors(&self, w: &Matrix) -> Result<FactorPair> {
        Ok(FactorPair { c: w.clone(), s: Matrix::zeros(w.rows(), w.cols()), s2: None })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeltaMode {
    /// Attribute that only the target carries: expects C = 0.5, S = 1.
    SalientAttribute,
    /// Attribute shared by both sets: expects C = 1, S = 0.5.
    CommonAttribute,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaMetric {
    pub value: f64,
    pub mode: DeltaMode,
}

pub fn delta_metric(c: f64, s: f64, mode: DeltaMode) -> DeltaMetric {
    let (ec, es) = match mode {
        DeltaMode::SalientAttribute => (0.5, 1.0),
        DeltaMode::CommonAttribute => (1.0, 0.5),
    };
    DeltaMetric { value: (ec - c).abs() + (es - s).abs(), mode }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Assumption {
    BackgroundTarget,
    MultipleSalient,
}

/// Held-out data for scoring.
#[derive(Clone, Debug)]
pub enum TestSets {
    BackgroundTarget { x: LabeledDataset, y: LabeledDataset },
    /// `grid` carries both patterns independently; `x`, `y` are paired single-pattern sets.
    MultipleSalient { grid: LabeledDataset, x: LabeledDataset, y: LabeledDataset },
}

impl TestSets {
    pub fn sample(world: &World, assumption: Assumption, n: usize) -> Result<Self> {
        Ok(match assumption {
            Assumption::BackgroundTarget => TestSets::BackgroundTarget {
                x: world.sample_background(n, streams::TEST_X)?,
                y: world.sample_target(n, streams::TEST_Y)?,
            },
            Assumption::MultipleSalient => {
                let (x, y) = world.sample_multi_salient(n, streams::TEST_X)?;
                TestSets::MultipleSalient { grid: world.sample_attribute_grid(2 * n, streams::GRID)?, x, y }
            }
        })
    }

    pub fn pair(&self) -> (&LabeledDataset, &LabeledDataset) {
        match self {
            TestSets::BackgroundTarget { x, y } | TestSets::MultipleSalient { x, y, .. } => (x, y),
        }
    }
}

/// Probes of one attribute across feature spaces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationRow {
    pub attribute: String,
    pub probes: Vec<ProbeResult>,
    pub delta: DeltaMetric,
}

impl SeparationRow {
    pub fn accuracy(&self, space: FeatureSpace) -> Option<f64> {
        self.probes.iter().find(|p| p.space == space).map(|p| p.mean)
    }
}

fn stack(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    Ok(a.vstack(b)?)
}

pub fn separation_report<F: Factorize + ?Sized>(
    sep: &F,
    test: &TestSets,
    folds: usize,
    seed: u64,
) -> Result<Vec<SeparationRow>> {
    match test {
        TestSets::BackgroundTarget { x, y } => {
            let fx = sep.factors(&x.data.latents)?;
            let fy = sep.factors(&y.data.latents)?;
            let c = stack(&fx.c, &fy.c)?;
            let s = stack(&fx.s, &fy.s)?;
            let concat = |f: fn(&crate::world::Truths) -> &Vec<u8>| {
                let mut v = f(x.oracle()).clone();
                v.extend(f(y.oracle()));
                v
            };
            let salient = concat(|t| &t.attr_salient);
            let common = concat(|t| &t.attr_common);
            let mut rows = Vec::new();
            for (name, labels, mode) in
                [("salient", salient, DeltaMode::SalientAttribute), ("common", common, DeltaMode::CommonAttribute)]
            {
                let pc = ProbeResult::new(FeatureSpace::Common, name, fit_probe(&c, &labels, folds, seed)?);
                let ps = ProbeResult::new(FeatureSpace::Salient, name, fit_probe(&s, &labels, folds, seed)?);
                let delta = delta_metric(pc.mean, ps.mean, mode);
                rows.push(SeparationRow { attribute: name.into(), probes: vec![pc, ps], delta });
            }
            Ok(rows)
        }
        TestSets::MultipleSalient { grid, .. } => {
            let f = sep.factors(&grid.data.latents)?;
            let s2 = f.s2.ok_or_else(|| CaError::Config("multiple-salient scoring needs a second salient output".into()))?;
            let t = grid.oracle();
            let mut rows = Vec::new();
            for (name, labels, own) in [
                ("x_pattern", &t.attr_salient, FeatureSpace::Salient1),
                ("y_pattern", &t.attr_salient2, FeatureSpace::Salient2),
            ] {
                let mut probes = Vec::new();
                for (space, feats) in
                    [(FeatureSpace::Common, &f.c), (FeatureSpace::Salient1, &f.s), (FeatureSpace::Salient2, &s2)]
                {
                    probes.push(ProbeResult::new(space, name, fit_probe(feats, labels, folds, seed)?));
                }
                let row_c = probes[0].mean;
                let row_s = probes.iter().find(|p| p.space == own).map_or(0.0, |p| p.mean);
                let delta = delta_metric(row_c, row_s, DeltaMode::SalientAttribute);
                rows.push(SeparationRow { attribute: name.into(), probes, delta });
            }
            Ok(rows)
        }
    }
}

/// kNN-MI between learned common and salient factors of the target test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiReport {
    pub k: usize,
    /// On block-normalized factors (each block centered, unit mean squared norm).
    pub knn_nats: f64,
    /// On the raw factors.
    pub knn_raw_nats: f64,
    pub jittered: bool,
}

pub fn mi_report<F: Factorize + ?Sized>(sep: &F, y: &LabeledDataset, k: usize) -> Result<MiReport> {
    let f = sep.factors(&y.data.latents)?;
    let s = match f.s2 {
        Some(s2) => s2,
        None => f.s,
    };
    let norm = knn_mi_estimate(&normalize_block(&f.c), &normalize_block(&s), k, KnnNorm::Chebyshev)?;
    let raw = knn_mi_estimate(&f.c, &s, k, KnnNorm::Chebyshev)?;
    Ok(MiReport { k, knn_nats: norm.value_nats, knn_raw_nats: raw.value_nats, jittered: norm.jittered || raw.jittered })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub probe_folds: usize,
    pub pca_components: usize,
    pub alpha_grid: Vec<f64>,
    /// Samples per test set.
    pub test_size: usize,
    pub probe_seed: u64,
    pub knn_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            probe_folds: 5,
            pca_components: 3,
            alpha_grid: vec![-2.0, -1.0, 0.0, 1.0, 2.0],
            test_size: 1000,
            probe_seed: 0,
            knn_k: 5,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.probe_folds < 2 {
            return Err(CaError::Config("probe_folds must be >= 2".into()));
        }
        if self.pca_components == 0 {
            return Err(CaError::Config("pca_components must be >= 1".into()));
        }
        if self.alpha_grid.is_empty() || self.alpha_grid.iter().any(|a| !a.is_finite()) {
            return Err(CaError::Config("alpha_grid must be a non-empty list of finite numbers".into()));
        }
        if self.test_size < 10 * self.probe_folds || self.test_size <= self.knn_k || self.knn_k == 0 {
            return Err(CaError::Config("test_size is too small for the probes or kNN-MI".into()));
        }
        Ok(())
    }
}

/// Everything `metrics.json` holds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub assumption: Assumption,
    pub separator: String,
    pub separation: Vec<SeparationRow>,
    pub swap: SwapScore,
    pub mi: MiReport,
}

impl MetricsReport {
    pub fn row(&self, attribute: &str) -> Option<&SeparationRow> {
        self.separation.iter().find(|r| r.attribute == attribute)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = self.to_json();
        s.push('\n');
        write_atomic(path, s.as_bytes())
    }
}

/// Runs the full scoring protocol on fresh test sets.
pub fn evaluate<F: Factorize + ?Sized>(
    sep: &F,
    label: &str,
    world: &World,
    test: &TestSets,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    cfg.validate()?;
    let assumption = match test {
        TestSets::BackgroundTarget { .. } => Assumption::BackgroundTarget,
        TestSets::MultipleSalient { .. } => Assumption::MultipleSalient,
    };
    let separation = separation_report(sep, test, cfg.probe_folds, cfg.probe_seed)?;
    let (x, y) = test.pair();
    let swap = swap_score(sep, world, x, y)?;
    let mi = mi_report(sep, y, cfg.knn_k)?;
    Ok(MetricsReport { assumption, separator: label.into(), separation, swap, mi })
}
