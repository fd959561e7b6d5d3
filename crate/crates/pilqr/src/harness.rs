//! Configuration-driven experiment runner.
//!
//! An experiment is a JSON config naming an environment (with one or more
//! task conditions), an algorithm, and the iteration/episode budget. Running
//! it produces, inside an output directory:
//!
//! - `condition_{c}.csv` — one learning-curve row per iteration and
//!   condition,
//! - `curve.csv` — the same schema averaged across conditions,
//! - `policy_{c}.json` — the latest per-condition policy checkpoint
//!   (rewritten atomically after every iteration, so a numerical abort
//!   leaves the last good policy on disk),
//! - `global_policy.json` — the distilled policy (distillation runs only),
//! - `manifest.json` — the fully resolved config, the seed, and a content
//!   hash. A manifest can be passed back to `run` in place of a config and
//!   reproduces all CSV artifacts byte for byte.
//!
//! The CSV schema is the stability contract of this crate's output:
//! `iteration, episodes_cumulative, mean_cost, std_cost, residual_ratio,
//! mean_eps, mean_eta_lqr, mean_eta_pi2`. Columns that do not apply to an
//! algorithm hold `NaN`. Floats are written with Rust's shortest-roundtrip
//! formatting, which is locale-independent and deterministic.

use crate::envs::lq::{LqCondition, LqEnv, LqParams};
use crate::envs::pusher::{PusherCondition, PusherEnv, PusherParams};
use crate::envs::reacher::{ReacherCondition, ReacherEnv, ReacherParams};
use crate::envs::Environment;
use crate::error::{PilqrError, Result};
use crate::mdgps::{Architecture, FitOptions, GlobalPolicy, MdgpsConfig, MdgpsRunner};
use crate::pilqr::{Algorithm, IterationReport, Optimizer, PilqrConfig};
use crate::policy::TvlgPolicy;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

pub const CSV_HEADER: &str = "iteration,episodes_cumulative,mean_cost,std_cost,residual_ratio,mean_eps,mean_eta_lqr,mean_eta_pi2";
pub const MANIFEST_SCHEMA: &str = "pilqr-manifest-v1";

/// Which optimizer drives the experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmId {
    Pi2,
    LqrFlm,
    Pilqr,
    Mdgps,
}

/// LQ environment description: the system is generated deterministically
/// from `system_seed`, conditions pick initial states.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LqEnvSpec {
    pub state_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
    pub process_noise_std: f64,
    pub system_seed: u64,
    pub conditions: Vec<LqCondition>,
    pub condition_files: Vec<String>,
}

impl Default for LqEnvSpec {
    fn default() -> Self {
        LqEnvSpec {
            state_dim: 3,
            action_dim: 2,
            horizon: 20,
            process_noise_std: 0.01,
            system_seed: 0,
            conditions: Vec::new(),
            condition_files: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReacherEnvSpec {
    pub params: ReacherParams,
    pub conditions: Vec<ReacherCondition>,
    pub condition_files: Vec<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PusherEnvSpec {
    pub params: PusherParams,
    pub conditions: Vec<PusherCondition>,
    pub condition_files: Vec<String>,
}

/// Environment selector: `{"lq": {...}}`, `{"reacher": {...}}` or
/// `{"pusher": {...}}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvSpec {
    Lq(LqEnvSpec),
    Reacher(ReacherEnvSpec),
    Pusher(PusherEnvSpec),
}

/// Distillation settings (used when `algorithm` is `"mdgps"`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MdgpsSettings {
    /// Which update the local policies take.
    pub local_algorithm: Algorithm,
    pub fit: FitOptions,
    pub arch: Architecture,
    pub lin_reg: f64,
}

impl Default for MdgpsSettings {
    fn default() -> Self {
        MdgpsSettings {
            local_algorithm: Algorithm::Pilqr,
            fit: FitOptions::default(),
            arch: Architecture::Affine,
            lin_reg: 0.0,
        }
    }
}

/// One experiment, as written in a config file. Unknown keys are rejected
/// everywhere; every tuning knob has a default.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Experiment name; becomes part of file names in comparisons.
    pub name: String,
    pub algorithm: AlgorithmId,
    pub env: EnvSpec,
    /// Iterations to run (K).
    pub iterations: usize,
    /// Per-condition optimizer settings. Its `algorithm` field is
    /// overridden by the top-level `algorithm`; episodes per iteration is
    /// `optimizer.n_rollouts`.
    #[serde(default)]
    pub optimizer: PilqrConfig,
    #[serde(default)]
    pub mdgps: MdgpsSettings,
    /// Seeds evaluated by `compare`. `run` takes a single seed directly.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

fn config_error(path: &Path, err: impl std::fmt::Display) -> PilqrError {
    PilqrError::config(format!("{}: {err}", path.display()))
}

fn load_condition_file<C: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<C>> {
    let text = fs::read_to_string(path).map_err(|e| config_error(path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| config_error(path, e))?;
    if value.is_array() {
        serde_json::from_value(value).map_err(|e| config_error(path, e))
    } else {
        Ok(vec![serde_json::from_value(value).map_err(|e| config_error(path, e))?])
    }
}

fn resolve_files<C: serde::de::DeserializeOwned>(
    conditions: &mut Vec<C>,
    files: &mut Vec<String>,
    base: &Path,
) -> Result<()> {
    for f in files.drain(..) {
        let path = base.join(&f);
        conditions.extend(load_condition_file::<C>(&path)?);
    }
    Ok(())
}

impl ExperimentConfig {
    /// Parses a config file without resolving or validating it.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).map_err(|e| config_error(path, e))?;
        serde_json::from_str(&text).map_err(|e| config_error(path, e))
    }

    /// Inlines every `condition_files` entry (relative paths are taken from
    /// `base`) and validates the result. The returned config is
    /// self-contained: it can be embedded in a manifest and re-run without
    /// the original files.
    pub fn resolved(mut self, base: &Path) -> Result<ExperimentConfig> {
        match &mut self.env {
            EnvSpec::Lq(s) => resolve_files(&mut s.conditions, &mut s.condition_files, base)?,
            EnvSpec::Reacher(s) => resolve_files(&mut s.conditions, &mut s.condition_files, base)?,
            EnvSpec::Pusher(s) => resolve_files(&mut s.conditions, &mut s.condition_files, base)?,
        }
        self.validate()?;
        Ok(self)
    }

    /// Full validation; assumes condition files are already inlined.
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return Err(PilqrError::config(
                "config: name must be non-empty and use only [A-Za-z0-9_-]",
            ));
        }
        if self.iterations == 0 {
            return Err(PilqrError::config("config: iterations must be at least 1"));
        }
        self.optimizer_config().validate()?;
        if self.algorithm == AlgorithmId::Mdgps {
            self.mdgps_config().validate()?;
        }
        let n_conditions = match &self.env {
            EnvSpec::Lq(s) => {
                if s.state_dim == 0 || s.action_dim == 0 || s.horizon < 2 {
                    return Err(PilqrError::config(
                        "config: lq env needs positive dims and horizon >= 2",
                    ));
                }
                s.conditions.len()
            }
            EnvSpec::Reacher(s) => s.conditions.len(),
            EnvSpec::Pusher(s) => s.conditions.len(),
        };
        if n_conditions == 0 {
            return Err(PilqrError::config("config: no conditions given"));
        }
        // Environment constructors run their own parameter checks.
        self.build_envs()?;
        Ok(())
    }

    /// The per-condition optimizer settings with the top-level algorithm
    /// applied. For distillation runs this is the local update.
    pub fn optimizer_config(&self) -> PilqrConfig {
        let mut cfg = self.optimizer.clone();
        cfg.algorithm = match self.algorithm {
            AlgorithmId::Pi2 => Algorithm::Pi2,
            AlgorithmId::LqrFlm => Algorithm::LqrFlm,
            AlgorithmId::Pilqr => Algorithm::Pilqr,
            AlgorithmId::Mdgps => self.mdgps.local_algorithm,
        };
        cfg
    }

    pub fn mdgps_config(&self) -> MdgpsConfig {
        MdgpsConfig {
            local: self.optimizer_config(),
            fit: self.mdgps.fit.clone(),
            arch: self.mdgps.arch,
            lin_reg: self.mdgps.lin_reg,
        }
    }

    /// Constructs one environment per condition.
    pub fn build_envs(&self) -> Result<Vec<Box<dyn Environment>>> {
        match &self.env {
            EnvSpec::Lq(s) => {
                let base = LqParams::random(
                    s.state_dim,
                    s.action_dim,
                    s.horizon,
                    s.process_noise_std,
                    s.system_seed,
                );
                s.conditions
                    .iter()
                    .map(|c| {
                        let env = LqEnv::from_params(base.clone())?
                            .with_x0(nalgebra::DVector::from_row_slice(&c.x0))?;
                        Ok(Box::new(env) as Box<dyn Environment>)
                    })
                    .collect()
            }
            EnvSpec::Reacher(s) => s
                .conditions
                .iter()
                .map(|c| {
                    Ok(Box::new(ReacherEnv::new(s.params.clone(), c.clone())?)
                        as Box<dyn Environment>)
                })
                .collect(),
            EnvSpec::Pusher(s) => s
                .conditions
                .iter()
                .map(|c| {
                    Ok(Box::new(PusherEnv::new(s.params.clone(), c.clone())?)
                        as Box<dyn Environment>)
                })
                .collect(),
        }
    }
}

/// The record that makes a run reproducible: the resolved config, the seed,
/// and a hash binding them.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema: String,
    pub crate_version: String,
    pub seed: u64,
    pub config_hash: String,
    pub experiment: ExperimentConfig,
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hash of the resolved config and the seed, as recorded in manifests.
pub fn config_hash(config: &ExperimentConfig, seed: u64) -> Result<String> {
    let canonical = serde_json::to_string(config)?;
    let mut bytes = canonical.into_bytes();
    bytes.extend_from_slice(&seed.to_le_bytes());
    Ok(format!("fnv1a64:{:016x}", fnv1a64(&bytes)))
}

/// Loads a `run` input, which may be either an experiment config or a
/// manifest from an earlier run. Returns the resolved config and, for
/// manifests, the recorded seed.
pub fn load_run_input(path: &Path) -> Result<(ExperimentConfig, Option<u64>)> {
    let text = fs::read_to_string(path).map_err(|e| config_error(path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| config_error(path, e))?;
    let is_manifest = value
        .as_object()
        .and_then(|o| o.get("schema"))
        .and_then(|s| s.as_str())
        == Some(MANIFEST_SCHEMA);
    if is_manifest {
        let manifest: Manifest =
            serde_json::from_value(value).map_err(|e| config_error(path, e))?;
        manifest.experiment.validate()?;
        Ok((manifest.experiment, Some(manifest.seed)))
    } else {
        let config: ExperimentConfig =
            serde_json::from_value(value).map_err(|e| config_error(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Ok((config.resolved(base)?, None))
    }
}

/// One CSV row.
#[derive(Debug, Clone, Copy)]
pub struct CurvePoint {
    pub iteration: usize,
    pub episodes_cumulative: usize,
    pub mean_cost: f64,
    pub std_cost: f64,
    pub residual_ratio: f64,
    pub mean_eps: f64,
    pub mean_eta_lqr: f64,
    pub mean_eta_pi2: f64,
}

impl CurvePoint {
    fn from_report(r: &IterationReport, episodes_cumulative: usize) -> Self {
        CurvePoint {
            iteration: r.iteration,
            episodes_cumulative,
            mean_cost: r.mean_cost,
            std_cost: r.std_cost,
            residual_ratio: r.residual_ratio,
            mean_eps: r.mean_eps,
            mean_eta_lqr: r.mean_eta_lqr,
            mean_eta_pi2: r.mean_eta_pi2,
        }
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iteration,
            self.episodes_cumulative,
            self.mean_cost,
            self.std_cost,
            self.residual_ratio,
            self.mean_eps,
            self.mean_eta_lqr,
            self.mean_eta_pi2
        )
    }
}

/// Everything a finished run leaves behind.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub manifest_path: PathBuf,
    pub curve_path: PathBuf,
    pub condition_paths: Vec<PathBuf>,
    /// Aggregate learning curve (mean across conditions).
    pub curve: Vec<CurvePoint>,
    /// Per-condition learning curves, `[condition][iteration]`.
    pub per_condition: Vec<Vec<CurvePoint>>,
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn policy_path(out: &Path, c: usize) -> PathBuf {
    out.join(format!("policy_{c}.json"))
}

fn checkpoint_policy(out: &Path, c: usize, policy: &TvlgPolicy) -> Result<()> {
    let json = serde_json::to_string_pretty(&policy.to_json())?;
    write_atomic(&policy_path(out, c), json.as_bytes())
}

fn checkpoint_global(out: &Path, policy: &GlobalPolicy) -> Result<()> {
    write_atomic(&out.join("global_policy.json"), policy.to_json()?.as_bytes())
}

struct ConditionLog {
    file: std::io::BufWriter<fs::File>,
    episodes: usize,
    rows: Vec<CurvePoint>,
}

impl ConditionLog {
    fn create(path: &Path) -> Result<Self> {
        let mut file = std::io::BufWriter::new(fs::File::create(path)?);
        writeln!(file, "{CSV_HEADER}")?;
        file.flush()?;
        Ok(ConditionLog {
            file,
            episodes: 0,
            rows: Vec::new(),
        })
    }

    fn append(&mut self, report: &IterationReport) -> Result<CurvePoint> {
        self.episodes += report.episodes;
        let point = CurvePoint::from_report(report, self.episodes);
        writeln!(self.file, "{}", point.csv_line())?;
        self.file.flush()?;
        self.rows.push(point);
        Ok(point)
    }
}

fn nan_mean(values: impl Iterator<Item = f64>) -> f64 {
    let finite: Vec<f64> = values.filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        f64::NAN
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    }
}

/// Mean across conditions, per iteration. `episodes_cumulative` is the
/// per-condition budget (identical across conditions by construction).
fn aggregate_curves(per_condition: &[Vec<CurvePoint>]) -> Vec<CurvePoint> {
    let iterations = per_condition.first().map_or(0, Vec::len);
    (0..iterations)
        .map(|k| {
            let col = |f: fn(&CurvePoint) -> f64| {
                nan_mean(per_condition.iter().map(|rows| f(&rows[k])))
            };
            CurvePoint {
                iteration: per_condition[0][k].iteration,
                episodes_cumulative: per_condition[0][k].episodes_cumulative,
                mean_cost: col(|p| p.mean_cost),
                std_cost: col(|p| p.std_cost),
                residual_ratio: col(|p| p.residual_ratio),
                mean_eps: col(|p| p.mean_eps),
                mean_eta_lqr: col(|p| p.mean_eta_lqr),
                mean_eta_pi2: col(|p| p.mean_eta_pi2),
            }
        })
        .collect()
}

fn write_curve_csv(path: &Path, rows: &[CurvePoint]) -> Result<()> {
    let mut text = String::from(CSV_HEADER);
    text.push('\n');
    for row in rows {
        text.push_str(&row.csv_line());
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

fn run_per_condition(
    config: &ExperimentConfig,
    envs: &[Box<dyn Environment>],
    seed: u64,
    out: &Path,
) -> Result<Vec<Vec<CurvePoint>>> {
    let results: Vec<Result<Vec<CurvePoint>>> = envs
        .par_iter()
        .enumerate()
        .map(|(c, env)| {
            let mut opt = Optimizer::new(env.as_ref(), config.optimizer_config(), seed, c as u64)?;
            checkpoint_policy(out, c, opt.policy())?;
            let mut log = ConditionLog::create(&out.join(format!("condition_{c}.csv")))?;
            for _ in 0..config.iterations {
                let report = opt.iterate(env.as_ref())?;
                log.append(&report)?;
                checkpoint_policy(out, c, opt.policy())?;
            }
            Ok(log.rows)
        })
        .collect();
    results.into_iter().collect()
}

fn run_mdgps(
    config: &ExperimentConfig,
    envs: &[Box<dyn Environment>],
    seed: u64,
    out: &Path,
) -> Result<Vec<Vec<CurvePoint>>> {
    let env_refs: Vec<&dyn Environment> = envs.iter().map(|b| b.as_ref()).collect();
    let mut runner = MdgpsRunner::new(&env_refs, config.mdgps_config(), seed)?;
    let mut logs = Vec::with_capacity(envs.len());
    for c in 0..envs.len() {
        checkpoint_policy(out, c, &runner.locals()[c])?;
        logs.push(ConditionLog::create(&out.join(format!("condition_{c}.csv")))?);
    }
    checkpoint_global(out, runner.global())?;
    for _ in 0..config.iterations {
        let report = runner.iterate(&env_refs)?;
        for (c, r) in report.per_condition.iter().enumerate() {
            logs[c].append(r)?;
            checkpoint_policy(out, c, &runner.locals()[c])?;
        }
        checkpoint_global(out, runner.global())?;
    }
    Ok(logs.into_iter().map(|l| l.rows).collect())
}

/// Runs one experiment end to end and writes all artifacts into `out_dir`
/// (created if missing). Deterministic: the same config and seed produce
/// byte-identical CSV files.
pub fn run_experiment(
    config: &ExperimentConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<RunArtifacts> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let envs = config.build_envs()?;

    let per_condition = match config.algorithm {
        AlgorithmId::Mdgps => run_mdgps(config, &envs, seed, out_dir)?,
        _ => run_per_condition(config, &envs, seed, out_dir)?,
    };

    let curve = aggregate_curves(&per_condition);
    let curve_path = out_dir.join("curve.csv");
    write_curve_csv(&curve_path, &curve)?;

    let manifest = Manifest {
        schema: MANIFEST_SCHEMA.to_string(),
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        config_hash: config_hash(config, seed)?,
        experiment: config.clone(),
    };
    let manifest_path = out_dir.join("manifest.json");
    write_atomic(&manifest_path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;

    Ok(RunArtifacts {
        out_dir: out_dir.to_path_buf(),
        manifest_path,
        curve_path,
        condition_paths: (0..per_condition.len())
            .map(|c| out_dir.join(format!("condition_{c}.csv")))
            .collect(),
        curve,
        per_condition,
    })
}

/// Cross-seed, cross-config comparison table.
#[derive(Debug, Clone)]
pub struct CompareOutcome {
    pub table_path: PathBuf,
    /// Aggregate curves indexed `[config][seed][iteration]`.
    pub curves: Vec<Vec<Vec<CurvePoint>>>,
}

/// Runs every config at each of its seeds and writes `comparison.csv`: per
/// iteration, each experiment's episode budget and the mean ± std of its
/// mean cost across seeds. All configs must agree on the iteration count
/// (the shared x-axis); episode budgets may differ and are reported.
pub fn compare(configs: &[ExperimentConfig], out_dir: &Path) -> Result<CompareOutcome> {
    if configs.is_empty() {
        return Err(PilqrError::config("compare: no configs given"));
    }
    for config in configs {
        config.validate()?;
        if config.seeds.is_empty() {
            return Err(PilqrError::config(format!(
                "compare: config '{}' lists no seeds",
                config.name
            )));
        }
    }
    let iterations = configs[0].iterations;
    for config in &configs[1..] {
        if config.iterations != iterations {
            return Err(PilqrError::config(format!(
                "compare: iteration axes differ ('{}' has {}, '{}' has {})",
                configs[0].name, iterations, config.name, config.iterations
            )));
        }
    }
    let mut names = std::collections::HashSet::new();
    for config in configs {
        if !names.insert(config.name.clone()) {
            return Err(PilqrError::config(format!(
                "compare: duplicate experiment name '{}'",
                config.name
            )));
        }
    }

    fs::create_dir_all(out_dir)?;
    let mut curves: Vec<Vec<Vec<CurvePoint>>> = Vec::with_capacity(configs.len());
    for config in configs {
        let mut per_seed = Vec::with_capacity(config.seeds.len());
        for &seed in &config.seeds {
            let run_dir = out_dir.join(&config.name).join(format!("seed_{seed}"));
            let artifacts = run_experiment(config, seed, &run_dir)?;
            per_seed.push(artifacts.curve);
        }
        curves.push(per_seed);
    }

    let mut header = String::from("iteration");
    for config in configs {
        header.push_str(&format!(
            ",{0}_episodes,{0}_mean_cost,{0}_std_cost",
            config.name
        ));
    }
    let mut text = header;
    text.push('\n');
    for k in 0..iterations {
        let mut line = format!("{k}");
        for per_seed in &curves {
            let costs: Vec<f64> = per_seed.iter().map(|rows| rows[k].mean_cost).collect();
            let mean = costs.iter().sum::<f64>() / costs.len() as f64;
            let var = costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / costs.len() as f64;
            line.push_str(&format!(
                ",{},{},{}",
                per_seed[0][k].episodes_cumulative,
                mean,
                var.sqrt()
            ));
        }
        text.push_str(&line);
        text.push('\n');
    }
    let table_path = out_dir.join("comparison.csv");
    write_atomic(&table_path, text.as_bytes())?;

    Ok(CompareOutcome { table_path, curves })
}

/// Applies the `PILQR_THREADS` cap to the global worker pool. Returns the
/// applied thread count, `None` when the variable is unset. Unparseable
/// values are a config error.
pub fn init_thread_pool() -> Result<Option<usize>> {
    match std::env::var("PILQR_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => {
            let n: usize = v.parse().map_err(|_| {
                PilqrError::config(format!(
                    "PILQR_THREADS must be a positive integer, got {v:?}"
                ))
            })?;
            if n == 0 {
                return Err(PilqrError::config("PILQR_THREADS must be at least 1"));
            }
            // Ignore AlreadyInitialized: the cap applies to the first caller.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            Ok(Some(n))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn lq_config(name: &str, iterations: usize, n_rollouts: usize) -> ExperimentConfig {
        ExperimentConfig {
            name: name.to_string(),
            algorithm: AlgorithmId::Pilqr,
            env: EnvSpec::Lq(LqEnvSpec {
                state_dim: 2,
                action_dim: 1,
                horizon: 10,
                process_noise_std: 0.0,
                system_seed: 7,
                conditions: vec![LqCondition { x0: vec![1.0, -0.5] }],
                condition_files: Vec::new(),
            }),
            iterations,
            optimizer: PilqrConfig {
                n_rollouts,
                ..PilqrConfig::default()
            },
            mdgps: MdgpsSettings::default(),
            seeds: Vec::new(),
        }
    }

    #[test]
    fn smoke_run_emits_one_row_and_all_artifacts() {
        let dir = TempDir::new().unwrap();
        let config = lq_config("smoke", 1, 2);
        let artifacts = run_experiment(&config, 1, dir.path()).unwrap();
        assert_eq!(artifacts.curve.len(), 1);
        let curve = fs::read_to_string(&artifacts.curve_path).unwrap();
        let lines: Vec<&str> = curve.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], CSV_HEADER);
        assert!(artifacts.manifest_path.exists());
        assert!(artifacts.condition_paths[0].exists());
        assert!(policy_path(dir.path(), 0).exists());
    }

    #[test]
    fn identical_config_and_seed_reproduce_csv_bytes() {
        let dir_a = TempDir::new().unwrap();
        let dir_b = TempDir::new().unwrap();
        let config = lq_config("det", 3, 4);
        let a = run_experiment(&config, 99, dir_a.path()).unwrap();
        let b = run_experiment(&config, 99, dir_b.path()).unwrap();
        assert_eq!(
            fs::read(&a.curve_path).unwrap(),
            fs::read(&b.curve_path).unwrap()
        );
        assert_eq!(
            fs::read(&a.condition_paths[0]).unwrap(),
            fs::read(&b.condition_paths[0]).unwrap()
        );
    }

    #[test]
    fn rerun_from_manifest_reproduces_csv_bytes() {
        let dir_a = TempDir::new().unwrap();
        let dir_b = TempDir::new().unwrap();
        let config = lq_config("manifest", 2, 3);
        let a = run_experiment(&config, 5, dir_a.path()).unwrap();
        let (loaded, seed) = load_run_input(&a.manifest_path).unwrap();
        let b = run_experiment(&loaded, seed.unwrap(), dir_b.path()).unwrap();
        assert_eq!(
            fs::read(&a.curve_path).unwrap(),
            fs::read(&b.curve_path).unwrap()
        );
    }

    #[test]
    fn episodes_accumulate_to_the_budget() {
        let dir = TempDir::new().unwrap();
        let config = lq_config("budget", 3, 4);
        let artifacts = run_experiment(&config, 2, dir.path()).unwrap();
        assert_eq!(artifacts.curve.last().unwrap().episodes_cumulative, 12);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let err = serde_json::from_str::<ExperimentConfig>(
            r#"{"name":"x","algorithm":"pilqr","env":{"lq":{}},"iterations":1,"typo_field":3}"#,
        );
        assert!(err.is_err());
        let err2 = serde_json::from_str::<ExperimentConfig>(
            r#"{"name":"x","algorithm":"pilqr","env":{"lq":{"bogus":1}},"iterations":1}"#,
        );
        assert!(err2.is_err());
    }

    #[test]
    fn condition_files_are_inlined_on_resolve() {
        let dir = TempDir::new().unwrap();
        fs::write(
            dir.path().join("conds.json"),
            r#"[{"x0":[1.0,0.0]},{"x0":[0.0,1.0]}]"#,
        )
        .unwrap();
        let mut config = lq_config("files", 1, 2);
        if let EnvSpec::Lq(s) = &mut config.env {
            s.conditions.clear();
            s.condition_files.push("conds.json".to_string());
        }
        let resolved = config.resolved(dir.path()).unwrap();
        if let EnvSpec::Lq(s) = &resolved.env {
            assert_eq!(s.conditions.len(), 2);
            assert!(s.condition_files.is_empty());
        } else {
            panic!("env changed kind");
        }
    }

    #[test]
    fn missing_condition_file_is_a_config_error() {
        let dir = TempDir::new().unwrap();
        let mut config = lq_config("missing", 1, 2);
        if let EnvSpec::Lq(s) = &mut config.env {
            s.condition_files.push("nope.json".to_string());
        }
        match config.resolved(dir.path()) {
            Err(PilqrError::Config(msg)) => assert!(msg.contains("nope.json")),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn numerical_abort_keeps_the_initial_checkpoint() {
        // Two rollouts cannot identify the dynamics regression with reg = 0,
        // so the first iteration aborts — after the initial policy
        // checkpoint was written.
        let dir = TempDir::new().unwrap();
        let mut config = lq_config("abort", 1, 2);
        config.optimizer.dyn_reg = 0.0;
        if let EnvSpec::Lq(s) = &mut config.env {
            s.state_dim = 3;
            s.action_dim = 2;
            s.conditions = vec![LqCondition {
                x0: vec![1.0, 0.0, 0.0],
            }];
        }
        let err = run_experiment(&config, 3, dir.path());
        assert!(err.is_err());
        assert!(!matches!(err, Err(PilqrError::Config(_))));
        let checkpoint = fs::read_to_string(policy_path(dir.path(), 0)).unwrap();
        let json: crate::policy::PolicyJson = serde_json::from_str(&checkpoint).unwrap();
        assert!(TvlgPolicy::from_json(&json).is_ok());
    }

    #[test]
    fn pure_model_free_runs_log_nan_model_columns() {
        let dir = TempDir::new().unwrap();
        let mut config = lq_config("mf", 1, 6);
        config.algorithm = AlgorithmId::Pi2;
        let artifacts = run_experiment(&config, 11, dir.path()).unwrap();
        let row = &artifacts.curve[0];
        assert!(row.residual_ratio.is_nan());
        assert!(row.mean_eta_lqr.is_nan());
        assert!(row.mean_eta_pi2.is_finite());
        let text = fs::read_to_string(&artifacts.curve_path).unwrap();
        assert!(text.lines().nth(1).unwrap().contains("NaN"));
    }

    #[test]
    fn compare_runs_all_seeds_and_aligns_iterations() {
        let dir = TempDir::new().unwrap();
        let mut a = lq_config("alg-a", 2, 3);
        a.seeds = vec![1, 2];
        let mut b = lq_config("alg-b", 2, 3);
        b.algorithm = AlgorithmId::LqrFlm;
        b.seeds = vec![1, 2];
        let outcome = compare(&[a, b], dir.path()).unwrap();
        let text = fs::read_to_string(&outcome.table_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(
            lines[0],
            "iteration,alg-a_episodes,alg-a_mean_cost,alg-a_std_cost,alg-b_episodes,alg-b_mean_cost,alg-b_std_cost"
        );
        assert!(dir.path().join("alg-a/seed_1/curve.csv").exists());
        assert!(dir.path().join("alg-b/seed_2/curve.csv").exists());
    }

    #[test]
    fn compare_rejects_mismatched_iteration_axes() {
        let dir = TempDir::new().unwrap();
        let mut a = lq_config("one", 2, 3);
        a.seeds = vec![1];
        let mut b = lq_config("two", 3, 3);
        b.seeds = vec![1];
        match compare(&[a, b], dir.path()) {
            Err(PilqrError::Config(msg)) => assert!(msg.contains("iteration axes")),
            other => panic!("expected alignment error, got {other:?}"),
        }
    }

    #[test]
    fn mdgps_run_writes_the_global_checkpoint() {
        let dir = TempDir::new().unwrap();
        let mut config = lq_config("distill", 2, 6);
        config.algorithm = AlgorithmId::Mdgps;
        if let EnvSpec::Lq(s) = &mut config.env {
            s.conditions = vec![
                LqCondition { x0: vec![1.0, 0.0] },
                LqCondition { x0: vec![0.0, 1.0] },
            ];
        }
        let artifacts = run_experiment(&config, 21, dir.path()).unwrap();
        assert_eq!(artifacts.per_condition.len(), 2);
        let global = fs::read_to_string(dir.path().join("global_policy.json")).unwrap();
        assert!(GlobalPolicy::from_json(&global).is_ok());
    }

    #[test]
    fn config_hash_distinguishes_configs_and_seeds() {
        let a = lq_config("h", 1, 2);
        let mut b = lq_config("h", 1, 2);
        b.iterations = 2;
        let h_a1 = config_hash(&a, 1).unwrap();
        let h_a2 = config_hash(&a, 2).unwrap();
        let h_b1 = config_hash(&b, 1).unwrap();
        assert_ne!(h_a1, h_a2);
        assert_ne!(h_a1, h_b1);
        assert_eq!(h_a1, config_hash(&a, 1).unwrap());
    }
}
