//! Experiment configuration, run directories and the commands behind the `ca` binary.
//!
//! A run directory holds:
//!
//! | file | written by |
//! |---|---|
//! | `config.json` | every command |
//! | `manifest_<command>.json` | every command, first and last |
//! | `data/x.caw`, `data/y.caw`, `data/*_preview.csv` | `gen` |
//! | `checkpoint.casp`, `checkpoint.casp.json`, `train_log.csv`, `train_summary.json` | `train` |
//! | `nan_abort.txt` | `train`, on a numeric abort |
//! | `metrics.json`, `reconstruction.csv` | `eval` |
//! | `traversal.csv`, `interpolation.csv` | `traverse` |
//! | `report.md` | `report` |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::container::{load_dataset, read_file, save_dataset, write_atomic};
use crate::evaluation::{
    alpha_csv_rows, common_reconstruction, evaluate, interpolate_salient, pca_salient, swap_observations,
    traverse_salient, write_alpha_csv, Assumption, EvalConfig, Factorize, MetricsReport, OracleSeparator, TestSets,
};
use crate::nn::Matrix;
use crate::trainer::{config_hash, load_checkpoint, sample_training_data, save_checkpoint, train_on, TrainConfig};
use crate::world::{write_csv, Domain, World, WorldConfig};
use crate::{CaError, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
const PREVIEW_ROWS: usize = 20;
const RECONSTRUCTION_ROWS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub out_dir: PathBuf,
    #[serde(default = "default_assumption")]
    pub assumption: Assumption,
}

fn default_assumption() -> Assumption {
    Assumption::BackgroundTarget
}

impl ExperimentConfig {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            world: WorldConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            out_dir: out_dir.into(),
            assumption: Assumption::BackgroundTarget,
        }
    }

    /// Parses and validates a JSON config. Parse errors carry line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CaError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| CaError::Config(format!("{}: not UTF-8", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.train.validate()?;
        self.train.separator.validate(self.world.d_w)?;
        self.eval.validate()?;
        let multi = self.assumption == Assumption::MultipleSalient;
        if multi && self.world.d_s2_true == 0 {
            return Err(CaError::Config("assumption multiple-salient needs world.d_s2_true > 0".into()));
        }
        if multi != self.train.separator.multi_salient {
            return Err(CaError::Config(format!(
                "train.separator.multi_salient = {} does not match assumption {:?}",
                self.train.separator.multi_salient, self.assumption
            )));
        }
        Ok(())
    }

    /// Hash over everything except `out_dir`, so moved runs stay comparable.
    pub fn hash(&self) -> String {
        config_hash(&(&self.world, &self.train, &self.eval, self.assumption))
    }

    pub fn paths(&self) -> RunPaths {
        RunPaths::new(&self.out_dir)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// File locations inside a run directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn manifest(&self, command: &str) -> PathBuf {
        self.root.join(format!("manifest_{command}.json"))
    }
    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn x_data(&self) -> PathBuf {
        self.data_dir().join("x.caw")
    }
    pub fn y_data(&self) -> PathBuf {
        self.data_dir().join("y.caw")
    }
    pub fn x_preview(&self) -> PathBuf {
        self.data_dir().join("x_preview.csv")
    }
    pub fn y_preview(&self) -> PathBuf {
        self.data_dir().join("y_preview.csv")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint.casp")
    }
    pub fn train_log(&self) -> PathBuf {
        self.root.join("train_log.csv")
    }
    pub fn train_summary(&self) -> PathBuf {
        self.root.join("train_summary.json")
    }
    pub fn diagnostic(&self) -> PathBuf {
        self.root.join("nan_abort.txt")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }
    pub fn reconstruction(&self) -> PathBuf {
        self.root.join("reconstruction.csv")
    }
    pub fn traversal(&self) -> PathBuf {
        self.root.join("traversal.csv")
    }
    pub fn interpolation(&self) -> PathBuf {
        self.root.join("interpolation.csv")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.md")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub tool_version: String,
    /// Milliseconds since the Unix epoch.
    pub started_at_ms: u64,
    /// Unset while the command is running; a manifest left without it marks a crashed run.
    pub finished_at_ms: Option<u64>,
    pub seed: u64,
    /// Paths relative to the run directory.
    pub outputs: Vec<String>,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

/// Writes the opening manifest and the config copy; [`Run::finish`] closes it.
struct Run<'a> {
    cfg: &'a ExperimentConfig,
    manifest: RunManifest,
}

impl<'a> Run<'a> {
    fn begin(cfg: &'a ExperimentConfig, command: &str) -> Result<Self> {
        std::fs::create_dir_all(&cfg.out_dir).map_err(|e| CaError::io(&cfg.out_dir, e))?;
        let manifest = RunManifest {
            command: command.into(),
            config_hash: cfg.hash(),
            tool_version: TOOL_VERSION.into(),
            started_at_ms: now_ms(),
            finished_at_ms: None,
            seed: cfg.train.seed,
            outputs: Vec::new(),
        };
        let run = Self { cfg, manifest };
        run.save()?;
        write_atomic(&cfg.paths().config(), format!("{}\n", cfg.to_json()).as_bytes())?;
        Ok(run)
    }

    fn save(&self) -> Result<()> {
        write_json(&self.cfg.paths().manifest(&self.manifest.command), &self.manifest)
    }

    fn output(&mut self, path: &Path) {
        let rel = path.strip_prefix(&self.cfg.out_dir).unwrap_or(path);
        self.manifest.outputs.push(rel.to_string_lossy().replace('\\', "/"));
    }

    fn finish(mut self) -> Result<RunManifest> {
        self.manifest.finished_at_ms = Some(now_ms());
        self.save()?;
        Ok(self.manifest)
    }
}

fn build(cfg: &ExperimentConfig) -> Result<World> {
    cfg.validate()?;
    World::build(&cfg.world)
}

/// Samples the training datasets and writes them with CSV previews.
pub fn cmd_gen(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let world = build(cfg)?;
    let mut run = Run::begin(cfg, "gen")?;
    let p = cfg.paths();
    std::fs::create_dir_all(p.data_dir()).map_err(|e| CaError::io(&p.data_dir(), e))?;
    let (x, y) = sample_training_data(&world, &cfg.train)?;
    for (ds, bin, csv) in [(&x, p.x_data(), p.x_preview()), (&y, p.y_data(), p.y_preview())] {
        save_dataset(ds, &bin)?;
        write_csv(ds, &csv, PREVIEW_ROWS)?;
        run.output(&bin);
        run.output(&csv);
    }
    run.finish()
}

/// Trains on the run's datasets. Missing datasets are an I/O error unless `generate` is set,
/// in which case they are sampled inline (and not written).
pub fn cmd_train(cfg: &ExperimentConfig, generate: bool) -> Result<RunManifest> {
    let world = build(cfg)?;
    let p = cfg.paths();
    let have_data = p.x_data().exists() && p.y_data().exists();
    if !have_data && !generate {
        return Err(CaError::Io(format!("datasets missing under {}; run `ca gen` first", p.data_dir().display())));
    }
    let mut run = Run::begin(cfg, "train")?;
    let (x, y) = if have_data {
        (load_dataset(&p.x_data())?, load_dataset(&p.y_data())?)
    } else {
        sample_training_data(&world, &cfg.train)?
    };
    if x.domain == Domain::Y || y.domain == Domain::X {
        return Err(CaError::Compat("data/x.caw and data/y.caw hold the wrong domains".into()));
    }
    let outcome = match train_on(&world, &x, &y, &cfg.train) {
        Ok(o) => o,
        Err(CaError::Numeric(msg)) => {
            let diag = p.diagnostic();
            write_atomic(&diag, format!("{msg}\n").as_bytes())?;
            run.output(&diag);
            run.save()?;
            return Err(CaError::Numeric(format!("{msg}\ndiagnostic written to {}", diag.display())));
        }
        Err(e) => return Err(e),
    };
    let ckpt = p.checkpoint();
    save_checkpoint(
        &ckpt,
        &outcome.separator,
        outcome.adversaries.as_ref(),
        cfg.train.regularizer_mode,
        outcome.summary.steps,
        &cfg.hash(),
    )?;
    run.output(&ckpt);
    run.output(&crate::trainer::sidecar_path(&ckpt));
    outcome.log.write_csv(&p.train_log())?;
    run.output(&p.train_log());
    write_json(&p.train_summary(), &outcome.summary)?;
    run.output(&p.train_summary());
    run.finish()
}

/// Which separator `eval` and `traverse` score.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SeparatorChoice {
    /// Defaults to the run's `checkpoint.casp`.
    pub checkpoint: Option<PathBuf>,
    /// Uses the world's ground-truth projections instead of a checkpoint.
    pub oracle: bool,
}

/// Loads the chosen separator with a label for reports.
fn load_separator(cfg: &ExperimentConfig, world: &World, choice: &SeparatorChoice) -> Result<(Box<dyn Factorize>, String)> {
    if choice.oracle {
        return Ok((Box::new(OracleSeparator::new(world)?), "oracle".into()));
    }
    let path = choice.checkpoint.clone().unwrap_or_else(|| cfg.paths().checkpoint());
    let (header, sep) = load_checkpoint(&path)?;
    if header.d_w != cfg.world.d_w {
        return Err(CaError::Compat(format!(
            "checkpoint has d_w = {}, config has d_w = {}",
            header.d_w, cfg.world.d_w
        )));
    }
    if header.separator.multi_salient != (cfg.assumption == Assumption::MultipleSalient) {
        return Err(CaError::Compat(format!("checkpoint separator does not fit assumption {:?}", cfg.assumption)));
    }
    if header.config_hash != cfg.hash() {
        eprintln!("warning: checkpoint was trained under a different config ({})", header.config_hash);
    }
    let label = serde_json::to_value(header.regularizer_mode)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_else(|| "trained".into());
    Ok((Box::new(sep), label))
}

/// Scores the separator on fresh test sets: `metrics.json` plus `G*(ĉ)` rows of the first X test samples.
pub fn cmd_eval(cfg: &ExperimentConfig, choice: &SeparatorChoice) -> Result<(MetricsReport, RunManifest)> {
    let world = build(cfg)?;
    let (sep, label) = load_separator(cfg, &world, choice)?;
    let mut run = Run::begin(cfg, "eval")?;
    let test = TestSets::sample(&world, cfg.assumption, cfg.eval.test_size)?;
    let report = evaluate(sep.as_ref(), &label, &world, &test, &cfg.eval)?;
    let p = cfg.paths();
    report.write(&p.metrics())?;
    run.output(&p.metrics());
    let (x, _) = test.pair();
    let head: Vec<usize> = (0..x.len().min(RECONSTRUCTION_ROWS)).collect();
    let recon = common_reconstruction(sep.as_ref(), &world, &x.data.latents.select_rows(&head))?;
    write_atomic(&p.reconstruction(), alpha_csv_rows("index", &head.iter().map(|&i| i as f64).collect::<Vec<_>>(), &recon).as_bytes())?;
    run.output(&p.reconstruction());
    Ok((report, run.finish()?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraverseOptions {
    pub separator: SeparatorChoice,
    pub direction: usize,
    pub alphas: Vec<f64>,
    pub interpolation_alphas: Vec<f64>,
}

impl Default for TraverseOptions {
    fn default() -> Self {
        Self {
            separator: SeparatorChoice::default(),
            direction: 0,
            alphas: vec![-2.0, -1.0, 0.0, 1.0, 2.0],
            interpolation_alphas: (0..=10).map(|i| f64::from(i) / 10.0).collect(),
        }
    }
}

/// PCA on the target test salients, then a traversal of the first X test sample along one
/// component and an interpolation toward the first Y test sample's salient part.
pub fn cmd_traverse(cfg: &ExperimentConfig, opts: &TraverseOptions) -> Result<RunManifest> {
    let world = build(cfg)?;
    if opts.direction >= cfg.eval.pca_components {
        return Err(CaError::Compat(format!(
            "direction {} is out of range: only {} PCA components are computed",
            opts.direction, cfg.eval.pca_components
        )));
    }
    if opts.alphas.is_empty() || opts.alphas.iter().any(|a| !a.is_finite()) {
        return Err(CaError::Config("traversal alphas must be a non-empty finite grid".into()));
    }
    let (sep, _) = load_separator(cfg, &world, &opts.separator)?;
    let mut run = Run::begin(cfg, "traverse")?;
    let test = TestSets::sample(&world, cfg.assumption, cfg.eval.test_size)?;
    let (x, y) = test.pair();
    let salients = sep.factors(&y.data.latents)?.salient_total()?;
    let basis = pca_salient(&salients, cfg.eval.pca_components)?;
    if basis.degenerate {
        eprintln!("warning: target salients have no variance; traversal directions are arbitrary");
    }
    let x0 = x.data.latents.row(0).to_vec();
    let y0 = y.data.latents.row(0).to_vec();
    let p = cfg.paths();
    let rows = traverse_salient(sep.as_ref(), &world, &x0, &basis, opts.direction, &opts.alphas)?;
    write_alpha_csv(&p.traversal(), &opts.alphas, &rows)?;
    run.output(&p.traversal());
    let rows = interpolate_salient(sep.as_ref(), &world, &x0, &y0, &opts.interpolation_alphas)?;
    write_alpha_csv(&p.interpolation(), &opts.interpolation_alphas, &rows)?;
    run.output(&p.interpolation());
    run.finish()
}

/// `G*(ĉ_x + ŝ_y)` for the first test pair; exposed for endpoint checks.
pub fn first_pair_swap(cfg: &ExperimentConfig, choice: &SeparatorChoice) -> Result<Vec<f64>> {
    let world = build(cfg)?;
    let (sep, _) = load_separator(cfg, &world, choice)?;
    let test = TestSets::sample(&world, cfg.assumption, cfg.eval.test_size)?;
    let (x, y) = test.pair();
    let one = |m: &Matrix| m.select_rows(&[0]);
    Ok(swap_observations(sep.as_ref(), &world, &one(&x.data.latents), &one(&y.data.latents))?.into_vec())
}

/// `metrics.json` files directly in `dir` or one level below, sorted by path.
pub fn find_metrics(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| CaError::io(dir, e))?;
    let direct = dir.join("metrics.json");
    if direct.is_file() {
        found.push(direct);
    }
    for entry in entries {
        let path = entry.map_err(|e| CaError::io(dir, e))?.path();
        let nested = path.join("metrics.json");
        if path.is_dir() && nested.is_file() {
            found.push(nested);
        }
    }
    found.sort();
    Ok(found)
}

/// Collects every `metrics.json` under `out_dir` into `report.md`.
pub fn cmd_report(out_dir: &Path) -> Result<PathBuf> {
    let files = find_metrics(out_dir)?;
    if files.is_empty() {
        return Err(CaError::Io(format!("no metrics.json found under {}", out_dir.display())));
    }
    let mut runs = Vec::new();
    for f in &files {
        let text = String::from_utf8_lossy(&read_file(f)?).into_owned();
        let m: MetricsReport =
            serde_json::from_str(&text).map_err(|e| CaError::Compat(format!("{}: {e}", f.display())))?;
        let name = f
            .parent()
            .and_then(|d| d.strip_prefix(out_dir).ok())
            .map(|d| d.to_string_lossy().into_owned())
            .filter(|d| !d.is_empty())
            .unwrap_or_else(|| ".".into());
        runs.push((name, m));
    }
    let path = out_dir.join("report.md");
    write_atomic(&path, render_report(&runs).as_bytes())?;
    Ok(path)
}

/// Markdown for a set of `(run name, metrics)` pairs.
pub fn render_report(runs: &[(String, MetricsReport)]) -> String {
    let mut s = String::from("# Separation report\n");
    for (name, m) in runs {
        let _ = writeln!(s, "\n## {name} ({})\n", m.separator);
        let spaces: Vec<_> = m.separation.first().map(|r| r.probes.iter().map(|p| p.space).collect()).unwrap_or_default();
        s.push_str("| attribute |");
        for sp in &spaces {
            let _ = write!(s, " {} |", sp.symbol().to_uppercase());
        }
        s.push_str(" Δ |\n|---|");
        for _ in &spaces {
            s.push_str("---|");
        }
        s.push_str("---|\n");
        for row in &m.separation {
            let _ = write!(s, "| {} |", row.attribute);
            for p in &row.probes {
                let _ = write!(s, " {:.2} ± {:.3} |", p.mean, p.std);
            }
            let _ = writeln!(s, " {:.2} |", row.delta.value);
        }
    }
    s.push_str("\n## Summary\n\n| run | separator | kNN-MI(ĉ, ŝ) nats | swap / baseline |\n|---|---|---|---|\n");
    for (name, m) in runs {
        let _ = writeln!(s, "| {name} | {} | {:.4} | {:.3} |", m.separator, m.mi.knn_nats, m.swap.ratio());
    }
    let drops = mi_drops(runs);
    if !drops.is_empty() {
        s.push_str("\n## MI drop\n\n| assumption | without regularizer | with regularizer | kNN-MI before → after |\n|---|---|---|---|\n");
        for (assumption, before, after) in drops {
            let _ = writeln!(
                s,
                "| {assumption} | {} | {} | {:.3} → {:.1e} |",
                before.0, after.0, before.1, after.1
            );
        }
    }
    s
}

type Named = (String, f64);

/// Pairs each regularizer-free run with every regularized run of the same assumption.
fn mi_drops(runs: &[(String, MetricsReport)]) -> Vec<(String, Named, Named)> {
    let mut out = Vec::new();
    for (name_a, a) in runs.iter().filter(|(_, m)| m.separator == "none") {
        for (name_b, b) in runs.iter().filter(|(_, m)| m.separator != "none" && m.separator != "oracle") {
            if a.assumption == b.assumption {
                let label = serde_json::to_value(a.assumption).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
                out.push((label, (name_a.clone(), a.mi.knn_nats), (name_b.clone(), b.mi.knn_nats)));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"out_dir": "runs/a"}"#).unwrap();
        assert_eq!(cfg, ExperimentConfig::new("runs/a"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = ExperimentConfig::from_json(r#"{"out_dir": "a", "train": {"lamda3": 1}}"#).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("lamda3"));
    }

    #[test]
    fn parse_errors_name_the_position() {
        let e = ExperimentConfig::from_json("{\n  \"out_dir\": ,\n}").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
    }

    #[test]
    fn assumption_must_match_world() {
        let mut cfg = ExperimentConfig::new("a");
        cfg.assumption = Assumption::MultipleSalient;
        assert!(cfg.validate().is_err());
        cfg.world.d_s2_true = 4;
        assert!(cfg.validate().is_err());
        cfg.train.separator.multi_salient = true;
        cfg.validate().unwrap();
    }

    #[test]
    fn hash_ignores_out_dir() {
        assert_eq!(ExperimentConfig::new("a").hash(), ExperimentConfig::new("b").hash());
    }
}
