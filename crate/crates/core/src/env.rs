//! One-level limit order book as a finite MDP.
//!
//! `N` trading agents each place exactly one order per step, at the best bid
//! with a temperature-dependent logistic probability or else at the best ask.
//! The expert observes only the previous book snapshot and its own inventory,
//! and its market orders execute against the freshly placed trader orders.
//! Because every trader is an independent Bernoulli draw, the number of bids
//! follows a Poisson binomial law and the transition tensor is exact.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{logistic, stable_hash};

/// Shape of the expert's latent reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardSpec {
    /// Hit count: `N - v_b - v_a`.
    Linear,
    /// Risk-averse utility `1 - exp(-alpha * (hits - beta * |i|))`.
    Exponential {
        #[serde(default = "default_alpha")]
        alpha: f64,
        #[serde(default = "default_beta")]
        beta: f64,
    },
}

fn default_alpha() -> f64 {
    0.5
}

fn default_beta() -> f64 {
    0.5
}

impl RewardSpec {
    pub fn exponential() -> Self {
        RewardSpec::Exponential {
            alpha: default_alpha(),
            beta: default_beta(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RewardSpec::Linear => "linear",
            RewardSpec::Exponential { .. } => "exponential",
        }
    }
}

/// Environment constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MdpConfig {
    pub num_traders: usize,
    pub max_inventory: i32,
    pub horizon: usize,
    pub discount: f64,
    pub temperatures: Vec<f64>,
    pub reward: RewardSpec,
}

impl Default for MdpConfig {
    fn default() -> Self {
        Self {
            num_traders: 3,
            max_inventory: 5,
            horizon: 5,
            discount: 0.9,
            temperatures: vec![0.1, 0.5, 1.0],
            reward: RewardSpec::Linear,
        }
    }
}

impl MdpConfig {
    pub fn with_reward(mut self, reward: RewardSpec) -> Self {
        self.reward = reward;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_traders == 0 {
            return Err(Error::validation("num_traders", "must be at least 1"));
        }
        if self.max_inventory < 1 {
            return Err(Error::validation("max_inventory", "must be at least 1"));
        }
        if self.horizon == 0 {
            return Err(Error::validation("horizon", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return Err(Error::validation("discount", "must lie in [0, 1]"));
        }
        if self.temperatures.len() != self.num_traders {
            return Err(Error::validation(
                "temperatures",
                format!(
                    "expected {} entries (one per trader), found {}",
                    self.num_traders,
                    self.temperatures.len()
                ),
            ));
        }
        if let Some(t) = self.temperatures.iter().find(|t| !(**t > 0.0) || !t.is_finite()) {
            return Err(Error::validation(
                "temperatures",
                format!("every temperature must be positive and finite, found {t}"),
            ));
        }
        if let RewardSpec::Exponential { alpha, beta } = self.reward {
            if !(alpha > 0.0) || !alpha.is_finite() {
                return Err(Error::validation("reward.alpha", "must be positive"));
            }
            if !(beta >= 0.0) || !beta.is_finite() {
                return Err(Error::validation("reward.beta", "must be non-negative"));
            }
        }
        Ok(())
    }

    /// Short stable digest of the canonical JSON form of the config.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", stable_hash(json.as_bytes()))
    }

    fn side(&self) -> usize {
        self.num_traders + 1
    }

    fn inventory_levels(&self) -> usize {
        2 * self.max_inventory as usize + 1
    }

    /// Number of grid states, excluding the terminal state.
    pub fn num_grid_states(&self) -> usize {
        self.side() * self.side() * self.inventory_levels()
    }

    /// Grid states plus the absorbing terminal state.
    pub fn num_states(&self) -> usize {
        self.num_grid_states() + 1
    }

    pub fn terminal_index(&self) -> usize {
        self.num_grid_states()
    }

    pub fn num_actions(&self) -> usize {
        (self.num_traders + 1) * (self.num_traders + 2) / 2
    }

    pub fn state_index(&self, state: State) -> usize {
        let side = self.side();
        let inv = (state.inventory + self.max_inventory) as usize;
        (inv * side + state.bid_volume) * side + state.ask_volume
    }

    /// Inverse of [`MdpConfig::state_index`]; `None` for the terminal index.
    pub fn state_at(&self, index: usize) -> Option<State> {
        if index >= self.num_grid_states() {
            return None;
        }
        let side = self.side();
        Some(State {
            ask_volume: index % side,
            bid_volume: (index / side) % side,
            inventory: (index / (side * side)) as i32 - self.max_inventory,
        })
    }

    pub fn action_index(&self, action: Action) -> usize {
        // Actions with bid_take = b occupy a block of N + 1 - b entries.
        let n = self.num_traders;
        let b = action.bid_take;
        b * (n + 1) - b * (b.saturating_sub(1)) / 2 + action.ask_take
    }
}

/// Observed book snapshot plus the expert's inventory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct State {
    pub bid_volume: usize,
    pub ask_volume: usize,
    pub inventory: i32,
}

impl State {
    pub fn new(bid_volume: usize, ask_volume: usize, inventory: i32) -> Self {
        Self {
            bid_volume,
            ask_volume,
            inventory,
        }
    }

    /// Orders the expert matched when arriving in this state.
    pub fn hits(&self, num_traders: usize) -> f64 {
        num_traders as f64 - self.bid_volume as f64 - self.ask_volume as f64
    }
}

/// Expert market order: volume taken at the best bid and at the best ask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    pub bid_take: usize,
    pub ask_take: usize,
}

impl Action {
    pub fn new(bid_take: usize, ask_take: usize) -> Self {
        Self { bid_take, ask_take }
    }
}

/// Successor of a grid state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Next {
    Grid(State),
    Terminal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Execution {
    pub next: Next,
    pub matched_bids: usize,
    pub matched_asks: usize,
}

/// All grid states, inventory outermost, then bid volume, then ask volume.
pub fn enumerate_states(config: &MdpConfig) -> Vec<State> {
    (0..config.num_grid_states())
        .map(|i| config.state_at(i).expect("index within grid"))
        .collect()
}

/// All feasible actions in lexicographic `(bid_take, ask_take)` order.
pub fn enumerate_actions(config: &MdpConfig) -> Vec<Action> {
    let n = config.num_traders;
    (0..=n)
        .flat_map(|b| (0..=n - b).map(move |a| Action::new(b, a)))
        .collect()
}

/// Probability that a trader with temperature `temperature` bids, given the
/// volumes of the conditioning state.
pub fn trader_bid_probability(state: State, temperature: f64) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(Error::argument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let diff = state.bid_volume as f64 - state.ask_volume as f64;
    Ok(logistic(diff / temperature))
}

/// Exact PMF of a sum of independent Bernoulli variables, by iterative
/// convolution.
pub fn poisson_binomial_pmf(probabilities: &[f64]) -> Result<Vec<f64>> {
    let mut pmf = vec![0.0; probabilities.len() + 1];
    pmf[0] = 1.0;
    for (n, &p) in probabilities.iter().enumerate() {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::argument(format!(
                "probability {p} at position {n} is outside [0, 1]"
            )));
        }
        for k in (1..=n + 1).rev() {
            pmf[k] = pmf[k] * (1.0 - p) + pmf[k - 1] * p;
        }
        pmf[0] *= 1.0 - p;
    }
    Ok(pmf)
}

/// Distribution of the number of trader bids placed in the step after `state`.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefDistribution {
    pub bid_count_pmf: Vec<f64>,
}

pub fn belief_distribution(state: State, config: &MdpConfig) -> Result<BeliefDistribution> {
    let probs = config
        .temperatures
        .iter()
        .map(|&t| trader_bid_probability(state, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(BeliefDistribution {
        bid_count_pmf: poisson_binomial_pmf(&probs)?,
    })
}

/// Executes the expert's order against `bids` trader bids and `N - bids`
/// trader asks. Buying at the bid adds inventory, selling at the ask removes it.
pub fn apply_execution(bids: usize, state: State, action: Action, config: &MdpConfig) -> Result<Execution> {
    let n = config.num_traders;
    if bids > n {
        return Err(Error::argument(format!("{bids} bids exceed {n} traders")));
    }
    if action.bid_take + action.ask_take > n {
        return Err(Error::argument(format!(
            "action ({}, {}) takes more than {n} orders",
            action.bid_take, action.ask_take
        )));
    }
    let asks = n - bids;
    let matched_bids = action.bid_take.min(bids);
    let matched_asks = action.ask_take.min(asks);
    let inventory = state.inventory + matched_bids as i32 - matched_asks as i32;
    let next = if inventory.abs() > config.max_inventory {
        Next::Terminal
    } else {
        Next::Grid(State::new(bids - matched_bids, asks - matched_asks, inventory))
    };
    Ok(Execution {
        next,
        matched_bids,
        matched_asks,
    })
}

/// Exact sparse transition tensor `p(s'|s,a)` with an absorbing terminal state.
#[derive(Debug, Clone)]
pub struct TransitionModel {
    num_states: usize,
    num_actions: usize,
    terminal: usize,
    /// Row `s * num_actions + a` lists `(s', p)` with distinct `s'` in ascending order.
    rows: Vec<Vec<(usize, f64)>>,
    initial: Vec<f64>,
}

impl TransitionModel {
    pub fn build(config: &MdpConfig) -> Result<Self> {
        config.validate()?;
        let num_states = config.num_states();
        let num_actions = config.num_actions();
        let terminal = config.terminal_index();
        let actions = enumerate_actions(config);
        let mut rows = Vec::with_capacity(num_states * num_actions);
        for state in enumerate_states(config) {
            let belief = belief_distribution(state, config)?;
            for &action in &actions {
                let mut row: Vec<(usize, f64)> = Vec::with_capacity(config.num_traders + 1);
                for (bids, &p) in belief.bid_count_pmf.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let next = match apply_execution(bids, state, action, config)?.next {
                        Next::Grid(s) => config.state_index(s),
                        Next::Terminal => terminal,
                    };
                    match row.iter_mut().find(|(idx, _)| *idx == next) {
                        Some(entry) => entry.1 += p,
                        None => row.push((next, p)),
                    }
                }
                row.sort_by_key(|(idx, _)| *idx);
                rows.push(row);
            }
        }
        for _ in 0..num_actions {
            rows.push(vec![(terminal, 1.0)]);
        }
        let mut initial = vec![1.0 / config.num_grid_states() as f64; num_states];
        initial[terminal] = 0.0;
        Ok(Self {
            num_states,
            num_actions,
            terminal,
            rows,
            initial,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn terminal(&self) -> usize {
        self.terminal
    }

    /// Nonzero entries of `p(. | state, action)`.
    #[inline]
    pub fn row(&self, state: usize, action: usize) -> &[(usize, f64)] {
        &self.rows[state * self.num_actions + action]
    }

    pub fn prob(&self, state: usize, action: usize, next: usize) -> f64 {
        self.row(state, action)
            .iter()
            .find(|(idx, _)| *idx == next)
            .map_or(0.0, |(_, p)| *p)
    }

    pub fn dense_row(&self, state: usize, action: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.num_states];
        for &(idx, p) in self.row(state, action) {
            out[idx] = p;
        }
        out
    }

    /// Initial distribution: uniform over the grid, zero on the terminal state.
    pub fn initial_distribution(&self) -> &[f64] {
        &self.initial
    }

    /// Draws a successor index from the tensor row.
    pub fn sample_next<R: Rng + ?Sized>(&self, state: usize, action: usize, rng: &mut R) -> usize {
        let row = self.row(state, action);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for &(idx, p) in row {
            acc += p;
            if u < acc {
                return idx;
            }
        }
        row.last().expect("rows are never empty").0
    }
}

/// Reward of arriving in each state; the terminal state earns zero.
pub fn reward_vector(config: &MdpConfig) -> Vec<f64> {
    let n = config.num_traders;
    let mut rewards: Vec<f64> = enumerate_states(config)
        .into_iter()
        .map(|s| match config.reward {
            RewardSpec::Linear => s.hits(n),
            RewardSpec::Exponential { alpha, beta } => {
                1.0 - (-alpha * (s.hits(n) - beta * s.inventory.abs() as f64)).exp()
            }
        })
        .collect();
    rewards.push(0.0);
    rewards
}

/// Simulates one step by drawing every trader's order independently.
pub fn sample_step<R: Rng + ?Sized>(
    state: Next,
    action: Action,
    config: &MdpConfig,
    rewards: &[f64],
    rng: &mut R,
) -> Result<(Next, f64)> {
    let Next::Grid(state) = state else {
        return Err(Error::State("cannot step from the terminal state".into()));
    };
    let mut bids = 0;
    for &t in &config.temperatures {
        let p = trader_bid_probability(state, t)?;
        if rng.gen::<f64>() < p {
            bids += 1;
        }
    }
    let exec = apply_execution(bids, state, action, config)?;
    let reward = match exec.next {
        Next::Grid(s) => rewards[config.state_index(s)],
        Next::Terminal => rewards[config.terminal_index()],
    };
    Ok((exec.next, reward))
}
