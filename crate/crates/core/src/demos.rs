//! Expert demonstrations, their statistics and the state feature maps.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{reward_vector, sample_step, MdpConfig, Next, TransitionModel};
use crate::error::{Error, Result};
use crate::numerics::RngStream;
use crate::solver::{sample_index, Policy};

/// One recorded decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Step {
    pub stage: usize,
    pub state: usize,
    pub action: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    /// The episode hit the terminal state before the horizon.
    pub terminated_early: bool,
}

/// A set of expert episodes together with the environment that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoSet {
    pub config: MdpConfig,
    pub seed: u64,
    pub trajectories: Vec<Trajectory>,
}

impl DemoSet {
    pub fn config_fingerprint(&self) -> String {
        self.config.fingerprint()
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn num_steps(&self) -> usize {
        self.trajectories.iter().map(|t| t.steps.len()).sum()
    }

    /// Deduplicated states appearing at any recorded step, ascending.
    pub fn visited_states(&self) -> Vec<usize> {
        let mut states: Vec<usize> = self
            .trajectories
            .iter()
            .flat_map(|t| t.steps.iter().map(|s| s.state))
            .collect();
        states.sort_unstable();
        states.dedup();
        states
    }
}

/// Samples `count` expert episodes. Episode `j` draws from `stream.child(j)`.
pub fn generate_demos(
    config: &MdpConfig,
    transition: &TransitionModel,
    policy: &Policy,
    count: usize,
    stream: RngStream,
) -> Result<DemoSet> {
    if count == 0 {
        return Err(Error::argument("demo count must be at least 1"));
    }
    if policy.horizon() != config.horizon || policy.num_states() != transition.num_states() {
        return Err(Error::argument("policy does not match the environment"));
    }
    let rewards = reward_vector(config);
    let actions = crate::env::enumerate_actions(config);
    let mut trajectories = Vec::with_capacity(count);
    for j in 0..count {
        let mut rng = stream.child(j as u64).rng();
        let mut index = sample_index(transition.initial_distribution(), &mut rng);
        let mut steps = Vec::with_capacity(config.horizon);
        let mut terminated_early = false;
        for stage in 0..config.horizon {
            let state = config
                .state_at(index)
                .ok_or_else(|| Error::State("episode continued past the terminal state".into()))?;
            let action = policy.sample_action(stage, index, &mut rng);
            steps.push(Step {
                stage,
                state: index,
                action,
            });
            let (next, _) = sample_step(Next::Grid(state), actions[action], config, &rewards, &mut rng)?;
            match next {
                Next::Grid(s) => index = config.state_index(s),
                Next::Terminal => {
                    terminated_early = stage + 1 < config.horizon;
                    break;
                }
            }
        }
        trajectories.push(Trajectory {
            steps,
            terminated_early,
        });
    }
    Ok(DemoSet {
        config: config.clone(),
        seed: stream.master_seed,
        trajectories,
    })
}

/// Weighting applied to state visits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Visitation {
    /// A visit at stage `t` counts `gamma^t`.
    #[default]
    Discounted,
    Raw,
}

/// Visit counts of the arrived-at states, i.e. recorded steps with `t >= 1`.
pub fn visitation_counts(demos: &DemoSet, num_states: usize, weighting: Visitation) -> Result<Vec<f64>> {
    let gamma = demos.config.discount;
    let terminal = demos.config.terminal_index();
    let mut counts = vec![0.0; num_states];
    for traj in &demos.trajectories {
        for step in traj.steps.iter().filter(|s| s.stage >= 1) {
            if step.state >= num_states || step.state == terminal {
                return Err(Error::Data(format!(
                    "state index {} is not a grid state",
                    step.state
                )));
            }
            counts[step.state] += match weighting {
                Visitation::Discounted => gamma.powi(step.stage as i32),
                Visitation::Raw => 1.0,
            };
        }
    }
    Ok(counts)
}

/// Demo step counts aggregated by `(stage, state, action)`.
///
/// The MaxEnt likelihood depends on the demonstrations only through these.
#[derive(Debug, Clone)]
pub struct DemoStats {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    counts: Vec<f64>,
    num_trajectories: usize,
}

impl DemoStats {
    pub fn new(demos: &DemoSet, transition: &TransitionModel) -> Result<Self> {
        let horizon = demos.config.horizon;
        let ns = transition.num_states();
        let na = transition.num_actions();
        let mut counts = vec![0.0; horizon * ns * na];
        for traj in &demos.trajectories {
            for step in &traj.steps {
                if step.stage >= horizon {
                    return Err(Error::Data(format!(
                        "demo stage {} is beyond the horizon {horizon}",
                        step.stage
                    )));
                }
                if step.state >= ns || step.action >= na {
                    return Err(Error::Data(format!(
                        "demo step ({}, {}) is out of range",
                        step.state, step.action
                    )));
                }
                counts[(step.stage * ns + step.state) * na + step.action] += 1.0;
            }
        }
        Ok(Self {
            horizon,
            num_states: ns,
            num_actions: na,
            counts,
            num_trajectories: demos.len(),
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_trajectories(&self) -> usize {
        self.num_trajectories
    }

    /// Counts of stage `t`, laid out `[state * num_actions + action]`.
    pub fn stage(&self, t: usize) -> &[f64] {
        let len = self.num_states * self.num_actions;
        &self.counts[t * len..(t + 1) * len]
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }
}

/// Per-state feature rows; the terminal row is all zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    name: String,
    dim: usize,
    rows: Vec<f64>,
}

pub const DEFAULT_FEATURE_MAP: &str = "normalized";

impl FeatureMap {
    /// Builds a named map:
    ///
    /// * `normalized`: `[v_b / N, v_a / N, i / I_max, 1]`
    /// * `raw`: `[v_b, v_a, i, 1]`
    pub fn new(config: &MdpConfig, name: &str) -> Result<Self> {
        let n = config.num_traders as f64;
        let imax = config.max_inventory as f64;
        let scale = match name {
            "normalized" => [n, n, imax],
            "raw" => [1.0, 1.0, 1.0],
            other => {
                return Err(Error::argument(format!(
                    "unknown feature map `{other}` (expected `normalized` or `raw`)"
                )))
            }
        };
        let dim = 4;
        let mut rows = Vec::with_capacity(config.num_states() * dim);
        for s in crate::env::enumerate_states(config) {
            rows.extend([
                s.bid_volume as f64 / scale[0],
                s.ask_volume as f64 / scale[1],
                s.inventory as f64 / scale[2],
                1.0,
            ]);
        }
        rows.extend(std::iter::repeat_n(0.0, dim));
        Ok(Self {
            name: name.to_string(),
            dim,
            rows,
        })
    }

    pub fn default_for(config: &MdpConfig) -> Self {
        Self::new(config, DEFAULT_FEATURE_MAP).expect("default map exists")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_states(&self) -> usize {
        self.rows.len() / self.dim
    }

    #[inline]
    pub fn row(&self, state: usize) -> &[f64] {
        &self.rows[state * self.dim..(state + 1) * self.dim]
    }

    /// `Phi^T v` for a per-state vector `v`.
    pub fn pull_back(&self, per_state: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (s, &v) in per_state.iter().enumerate() {
            if v != 0.0 {
                for (o, &x) in out.iter_mut().zip(self.row(s)) {
                    *o += v * x;
                }
            }
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DemoHeader {
    version: u32,
    config: MdpConfig,
    seed: u64,
    count: usize,
}

const DEMO_FORMAT_VERSION: u32 = 1;

/// Writes a JSON header line followed by one `[[t, state, action], ...]` line
/// per trajectory.
pub fn save_demos(demos: &DemoSet, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let header = DemoHeader {
        version: DEMO_FORMAT_VERSION,
        config: demos.config.clone(),
        seed: demos.seed,
        count: demos.len(),
    };
    serde_json::to_writer(&mut out, &header).map_err(|e| Error::Parse(e.to_string()))?;
    out.write_all(b"\n")?;
    for traj in &demos.trajectories {
        let triples: Vec<[usize; 3]> = traj.steps.iter().map(|s| [s.stage, s.state, s.action]).collect();
        serde_json::to_writer(&mut out, &triples).map_err(|e| Error::Parse(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a demo file and checks it was produced by `expected`.
pub fn load_demos(path: impl AsRef<Path>, expected: &MdpConfig) -> Result<DemoSet> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Parse("empty demo file".into()))??;
    let header: DemoHeader =
        serde_json::from_str(&header_line).map_err(|e| Error::Parse(format!("line 1: {e}")))?;
    if header.version != DEMO_FORMAT_VERSION {
        return Err(Error::Parse(format!("unsupported demo format version {}", header.version)));
    }
    if header.config.fingerprint() != expected.fingerprint() {
        return Err(Error::Compatibility(format!(
            "demos were generated for config {} but the environment is {}",
            header.config.fingerprint(),
            expected.fingerprint()
        )));
    }
    let config = header.config;
    let ns = config.num_grid_states();
    let na = config.num_actions();
    let mut trajectories = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 2;
        if line.is_empty() {
            continue;
        }
        let triples: Vec<[usize; 3]> =
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("line {lineno}: {e}")))?;
        if triples.len() > config.horizon {
            return Err(Error::Parse(format!("line {lineno}: trajectory longer than the horizon")));
        }
        let mut steps = Vec::with_capacity(triples.len());
        for (k, [stage, state, action]) in triples.into_iter().enumerate() {
            if stage != k || state >= ns || action >= na {
                return Err(Error::Parse(format!("line {lineno}: invalid step {k}")));
            }
            steps.push(Step { stage, state, action });
        }
        trajectories.push(Trajectory {
            terminated_early: steps.len() < config.horizon,
            steps,
        });
    }
    if trajectories.len() != header.count {
        return Err(Error::Parse(format!(
            "header announces {} trajectories, file holds {}",
            header.count,
            trajectories.len()
        )));
    }
    Ok(DemoSet {
        config,
        seed: header.seed,
        trajectories,
    })
}
