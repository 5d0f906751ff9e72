//! Benchmark orchestration: configuration, per-cell fitting and scoring, the
//! parallel grid runner and result emission.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bnn::{bnn_irl, BnnIrlSettings, BnnRewardModel};
use crate::demos::{generate_demos, DemoSet, FeatureMap, DEFAULT_FEATURE_MAP};
use crate::env::{reward_vector, MdpConfig, TransitionModel};
use crate::error::{Error, Result};
use crate::gpirl::{dtc_extrapolate, fit_gpirl, GpirlModel, GpirlSettings};
use crate::maxent::{fit_linear, reward_from_linear, AscentSettings, LinearRewardModel, MaxEntObjective, TabularRewardModel};
use crate::numerics::RngStream;
use crate::solver::{expected_value_difference, monte_carlo_evd, soft_value_iteration, uniform_policy_gap, Policy};

/// Environment variable capping the grid's worker threads.
pub const WORKERS_ENV: &str = "LOB_IRL_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    MaxentLinear,
    Gpirl,
    Bnn,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::MaxentLinear, Method::Gpirl, Method::Bnn];

    pub fn name(self) -> &'static str {
        match self {
            Method::MaxentLinear => "maxent_linear",
            Method::Gpirl => "gpirl",
            Method::Bnn => "bnn",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::validation("method", format!("unknown method `{s}` (expected maxent_linear, gpirl or bnn)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvdMode {
    #[default]
    Exact,
    MonteCarlo,
    Both,
}

impl EvdMode {
    pub fn uses_monte_carlo(self) -> bool {
        !matches!(self, EvdMode::Exact)
    }
}

/// Optimizer settings for each method.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodSettings {
    pub maxent: AscentSettings,
    pub gpirl: GpirlSettings,
    pub bnn: BnnIrlSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mdp: MdpConfig,
    pub methods: Vec<Method>,
    pub demo_counts: Vec<usize>,
    pub num_seeds: usize,
    pub evd_mode: EvdMode,
    pub mc_trajectories: usize,
    pub output_path: PathBuf,
    pub master_seed: u64,
    pub feature_map: String,
    pub settings: MethodSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mdp: MdpConfig::default(),
            methods: Method::ALL.to_vec(),
            demo_counts: vec![512, 1024, 2048, 4096, 8192, 16384],
            num_seeds: 10,
            evd_mode: EvdMode::Exact,
            mc_trajectories: 100_000,
            output_path: PathBuf::from("results.csv"),
            master_seed: 0,
            feature_map: DEFAULT_FEATURE_MAP.to_string(),
            settings: MethodSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.mdp.validate()?;
        if self.methods.is_empty() {
            return Err(Error::validation("methods", "at least one method is required"));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(Error::validation("methods", format!("`{m}` is listed twice")));
            }
        }
        if self.demo_counts.is_empty() || self.demo_counts[0] == 0 {
            return Err(Error::validation("demo_counts", "must be a nonempty list of positive counts"));
        }
        if self.demo_counts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::validation("demo_counts", "must be strictly increasing"));
        }
        if self.num_seeds == 0 {
            return Err(Error::validation("num_seeds", "must be at least 1"));
        }
        if self.evd_mode.uses_monte_carlo() && self.mc_trajectories == 0 {
            return Err(Error::validation("mc_trajectories", "must be at least 1 when Monte Carlo EVD is enabled"));
        }
        FeatureMap::new(&self.mdp, &self.feature_map).map_err(|e| Error::validation("feature_map", e.to_string()))?;
        let s = &self.settings;
        if !(s.maxent.learning_rate > 0.0) || s.maxent.max_iterations == 0 {
            return Err(Error::validation("settings.maxent", "learning_rate and max_iterations must be positive"));
        }
        if !(s.gpirl.learning_rate > 0.0) || s.gpirl.max_iterations == 0 || s.gpirl.window == 0 {
            return Err(Error::validation("settings.gpirl", "learning_rate, max_iterations and window must be positive"));
        }
        s.bnn.bnn.validate()?;
        Ok(())
    }

    pub fn features(&self) -> Result<FeatureMap> {
        FeatureMap::new(&self.mdp, &self.feature_map)
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let config: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

/// Reads and validates a JSON experiment config; omitted fields take defaults.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text).map_err(|e| match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Any fitted reward, evaluable to a per-state vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardModel {
    Tabular(TabularRewardModel),
    Linear(LinearRewardModel),
    Gpirl(GpirlModel),
    Bnn(BnnRewardModel),
}

impl RewardModel {
    pub fn rewards(&self, features: &FeatureMap) -> Result<Vec<f64>> {
        match self {
            RewardModel::Tabular(m) => {
                if m.rewards.len() != features.num_states() {
                    return Err(Error::Compatibility("tabular reward does not match the state space".into()));
                }
                Ok(m.rewards.clone())
            }
            RewardModel::Linear(m) => reward_from_linear(m, features),
            RewardModel::Gpirl(m) => dtc_extrapolate(m, features),
            RewardModel::Bnn(m) => m.rewards(features),
        }
    }
}

/// A reward model with the environment it was fitted for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SavedModel {
    pub config_fingerprint: String,
    pub feature_map: String,
    pub method: Method,
    pub model: RewardModel,
}

pub fn save_model(path: &Path, model: &SavedModel) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(file, model).map_err(|e| Error::Io(e.into()))
}

pub fn load_model(path: &Path, expected: &MdpConfig) -> Result<SavedModel> {
    let text = std::fs::read_to_string(path)?;
    let model: SavedModel =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    if model.config_fingerprint != expected.fingerprint() {
        return Err(Error::Compatibility(format!(
            "model was fitted for config {} but the current config is {}",
            model.config_fingerprint,
            expected.fingerprint()
        )));
    }
    Ok(model)
}

/// Fits `method` to `demos`. `stream` drives any randomness in the method.
pub fn fit_method(
    method: Method,
    demos: &DemoSet,
    transition: &TransitionModel,
    config: &MdpConfig,
    features: &FeatureMap,
    settings: &MethodSettings,
    stream: RngStream,
) -> Result<RewardModel> {
    match method {
        Method::MaxentLinear => {
            let objective = MaxEntObjective::new(transition, config, demos)?;
            Ok(RewardModel::Linear(fit_linear(&objective, demos, features, &settings.maxent)?.model))
        }
        Method::Gpirl => {
            let objective = MaxEntObjective::new(transition, config, demos)?;
            Ok(RewardModel::Gpirl(fit_gpirl(&objective, demos, features, &settings.gpirl)?.model))
        }
        Method::Bnn => {
            let fit = bnn_irl(demos, transition, config, features, &settings.bnn, stream)?;
            Ok(RewardModel::Bnn(fit.model))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub method: Method,
    pub reward_kind: String,
    pub demo_count: usize,
    pub seed: usize,
    pub evd_exact: Option<f64>,
    pub evd_mc: Option<f64>,
    pub mc_stderr: Option<f64>,
    pub fit_seconds: f64,
    pub eval_seconds: f64,
    /// Diagnostic for a failed cell; absent on success.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Environment, expert and scoring state shared by every cell of a grid.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub transition: TransitionModel,
    pub features: FeatureMap,
    pub true_reward: Vec<f64>,
    pub expert: Policy,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let transition = TransitionModel::build(&config.mdp)?;
        let features = config.features()?;
        let true_reward = reward_vector(&config.mdp);
        let expert = soft_value_iteration(&transition, &true_reward, &config.mdp)?.into_policy();
        Ok(Self {
            config,
            transition,
            features,
            true_reward,
            expert,
        })
    }

    pub fn reward_kind(&self) -> &'static str {
        self.config.mdp.reward.name()
    }

    /// Demonstrations for one (demo count, seed) pair; shared by all methods.
    pub fn demos(&self, demo_count: usize, seed: usize) -> Result<DemoSet> {
        let label = format!("demos/{}/{demo_count}/{seed}", self.reward_kind());
        let stream = RngStream::labeled(self.config.master_seed, &label);
        generate_demos(&self.config.mdp, &self.transition, &self.expert, demo_count, stream)
    }

    fn cell_stream(&self, purpose: &str, method: Method, demo_count: usize, seed: usize) -> RngStream {
        let label = format!("{purpose}/{method}/{}/{demo_count}/{seed}", self.reward_kind());
        RngStream::labeled(self.config.master_seed, &label)
    }

    pub fn uniform_gap(&self) -> Result<f64> {
        uniform_policy_gap(&self.true_reward, &self.transition, &self.config.mdp)
    }

    /// Fits and scores one cell. Failures become error records.
    pub fn run_cell(&self, method: Method, demo_count: usize, seed: usize) -> ResultRecord {
        let mut record = ResultRecord {
            method,
            reward_kind: self.reward_kind().to_string(),
            demo_count,
            seed,
            evd_exact: None,
            evd_mc: None,
            mc_stderr: None,
            fit_seconds: 0.0,
            eval_seconds: 0.0,
            error: None,
        };
        if let Err(e) = self.score_cell(&mut record) {
            record.error = Some(e.to_string());
        }
        record
    }

    fn score_cell(&self, record: &mut ResultRecord) -> Result<()> {
        let (method, demo_count, seed) = (record.method, record.demo_count, record.seed);
        let demos = self.demos(demo_count, seed)?;
        let start = Instant::now();
        let model = fit_method(
            method,
            &demos,
            &self.transition,
            &self.config.mdp,
            &self.features,
            &self.config.settings,
            self.cell_stream("fit", method, demo_count, seed),
        )?;
        let rewards = model.rewards(&self.features)?;
        record.fit_seconds = start.elapsed().as_secs_f64();

        let start = Instant::now();
        let evd = expected_value_difference(&self.true_reward, &rewards, &self.transition, &self.config.mdp)?;
        if !evd.is_finite() {
            return Err(Error::numerical(format!("EVD is {evd}")));
        }
        record.evd_exact = Some(evd);
        if self.config.evd_mode.uses_monte_carlo() {
            let mc = monte_carlo_evd(
                &self.true_reward,
                &rewards,
                &self.transition,
                &self.config.mdp,
                self.config.mc_trajectories,
                self.cell_stream("mc", method, demo_count, seed),
            )?;
            record.evd_mc = Some(mc.estimate);
            record.mc_stderr = Some(mc.standard_error);
        }
        record.eval_seconds = start.elapsed().as_secs_f64();
        Ok(())
    }

    /// Every (method, demo count, seed) cell in canonical order.
    pub fn cells(&self) -> Vec<(Method, usize, usize)> {
        let mut cells = Vec::new();
        for &m in &self.config.methods {
            for &n in &self.config.demo_counts {
                for seed in 0..self.config.num_seeds {
                    cells.push((m, n, seed));
                }
            }
        }
        cells
    }

    /// Runs every cell on `workers` threads (or the default pool size).
    pub fn run_grid_with_workers(&self, workers: Option<usize>) -> Result<Vec<ResultRecord>> {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(w) = workers {
            builder = builder.num_threads(w.max(1));
        }
        let pool = builder
            .build()
            .map_err(|e| Error::State(format!("cannot start worker pool: {e}")))?;
        let cells = self.cells();
        Ok(pool.install(|| {
            cells
                .par_iter()
                .map(|&(m, n, seed)| self.run_cell(m, n, seed))
                .collect()
        }))
    }

    /// Runs every cell, capped by the worker environment variable when set.
    pub fn run_grid(&self) -> Result<Vec<ResultRecord>> {
        self.run_grid_with_workers(workers_from_env()?)
    }
}

pub fn workers_from_env() -> Result<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::validation(WORKERS_ENV, format!("expected a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(None),
    }
}

pub fn run_cell(config: &ExperimentConfig, method: Method, demo_count: usize, seed: usize) -> Result<ResultRecord> {
    Ok(Experiment::new(config.clone())?.run_cell(method, demo_count, seed))
}

pub fn run_grid(config: &ExperimentConfig) -> Result<Vec<ResultRecord>> {
    Experiment::new(config.clone())?.run_grid()
}

pub const CSV_HEADER: [&str; 9] = [
    "method",
    "reward_kind",
    "demo_count",
    "seed",
    "evd_exact",
    "evd_mc",
    "mc_stderr",
    "fit_seconds",
    "eval_seconds",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Jsonl,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes records as CSV (header always present) or one JSON object per line.
pub fn emit_results(records: &[ResultRecord], path: &Path, format: OutputFormat) -> Result<()> {
    let file = File::create(path)?;
    match format {
        OutputFormat::Csv => {
            let mut w = csv::Writer::from_writer(file);
            w.write_record(CSV_HEADER).map_err(csv_error)?;
            for r in records {
                w.write_record([
                    r.method.name().to_string(),
                    r.reward_kind.clone(),
                    r.demo_count.to_string(),
                    r.seed.to_string(),
                    opt(r.evd_exact),
                    opt(r.evd_mc),
                    opt(r.mc_stderr),
                    r.fit_seconds.to_string(),
                    r.eval_seconds.to_string(),
                ])
                .map_err(csv_error)?;
            }
            w.flush()?;
        }
        OutputFormat::Jsonl => {
            let mut w = BufWriter::new(file);
            for r in records {
                serde_json::to_writer(&mut w, r).map_err(|e| Error::Io(e.into()))?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse(format!("{other:?}")),
    }
}

/// Reads records back from either output format.
pub fn read_results(path: &Path, format: OutputFormat) -> Result<Vec<ResultRecord>> {
    match format {
        OutputFormat::Csv => {
            let mut reader = csv::Reader::from_path(path).map_err(csv_error)?;
            let header = reader.headers().map_err(csv_error)?.clone();
            if header.iter().ne(CSV_HEADER) {
                return Err(Error::Parse(format!("unexpected CSV header in {}", path.display())));
            }
            let parse_opt = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|e| Error::Parse(format!("`{s}`: {e}")))
                }
            };
            let parse = |s: &str| -> Result<f64> { s.parse().map_err(|e| Error::Parse(format!("`{s}`: {e}"))) };
            let parse_int = |s: &str| -> Result<usize> { s.parse().map_err(|e| Error::Parse(format!("`{s}`: {e}"))) };
            let mut out = Vec::new();
            for row in reader.records() {
                let row = row.map_err(csv_error)?;
                out.push(ResultRecord {
                    method: row[0].parse()?,
                    reward_kind: row[1].to_string(),
                    demo_count: parse_int(&row[2])?,
                    seed: parse_int(&row[3])?,
                    evd_exact: parse_opt(&row[4])?,
                    evd_mc: parse_opt(&row[5])?,
                    mc_stderr: parse_opt(&row[6])?,
                    fit_seconds: parse(&row[7])?,
                    eval_seconds: parse(&row[8])?,
                    error: None,
                });
            }
            Ok(out)
        }
        OutputFormat::Jsonl => {
            let reader = BufReader::new(File::open(path)?);
            let mut out = Vec::new();
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                out.push(serde_json::from_str(&line).map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?);
            }
            Ok(out)
        }
    }
}

/// The normalizing baseline written next to the results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub reward_kind: String,
    pub config_fingerprint: String,
    pub uniform_policy_gap: f64,
}

impl Baseline {
    pub fn compute(experiment: &Experiment) -> Result<Self> {
        Ok(Self {
            reward_kind: experiment.reward_kind().to_string(),
            config_fingerprint: experiment.config.mdp.fingerprint(),
            uniform_policy_gap: experiment.uniform_gap()?,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut file = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut file, self).map_err(|e| Error::Io(e.into()))?;
        file.write_all(b"\n")?;
        Ok(())
    }
}

/// Median exact EVD per (method, demo count) over successful cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub method: Method,
    pub demo_count: usize,
    pub median_evd: f64,
    pub num_records: usize,
    pub num_failures: usize,
}

pub fn summarize(records: &[ResultRecord]) -> Vec<CellSummary> {
    let mut keys: Vec<(Method, usize)> = Vec::new();
    for r in records {
        if !keys.contains(&(r.method, r.demo_count)) {
            keys.push((r.method, r.demo_count));
        }
    }
    keys.into_iter()
        .map(|(method, demo_count)| {
            let group: Vec<&ResultRecord> = records
                .iter()
                .filter(|r| r.method == method && r.demo_count == demo_count)
                .collect();
            let values: Vec<f64> = group.iter().filter_map(|r| r.evd_exact).collect();
            CellSummary {
                method,
                demo_count,
                median_evd: median(&values),
                num_records: group.len(),
                num_failures: group.len() - values.len(),
            }
        })
        .collect()
}

/// Median of the values; NaN when empty.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
