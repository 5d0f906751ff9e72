//! Finite-horizon maximum causal entropy planning and exact policy evaluation.
//!
//! Rewards are earned on arrival: acting at stage `t` in `s` and landing in
//! `s'` earns `r(s')`. The terminal state is absorbing under every action and
//! keeps earning its own (zero) reward, so a constant shift of the whole reward
//! vector shifts every stage-`t` soft value by an action-independent constant.

use rand::Rng;

use crate::env::{MdpConfig, TransitionModel};
use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp_unchecked, RngStream};

/// Stage-indexed stochastic policy `pi_t(a|s)` for `t = 0..horizon`.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
}

impl Policy {
    pub fn uniform(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        Self {
            horizon,
            num_states,
            num_actions,
            probs: vec![1.0 / num_actions as f64; horizon * num_states * num_actions],
        }
    }

    /// Uniform over the maximizing actions of each `q_t(s, .)`.
    pub fn greedy(solution: &SoftSolution) -> Self {
        let (h, ns, na) = (solution.horizon, solution.num_states, solution.num_actions);
        let mut probs = vec![0.0; h * ns * na];
        for t in 0..h {
            for s in 0..ns {
                let q = solution.q_row(t, s);
                let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let tol = 1e-12 * (1.0 + best.abs());
                let ties = q.iter().filter(|&&v| v >= best - tol).count() as f64;
                let out = &mut probs[(t * ns + s) * na..(t * ns + s + 1) * na];
                for (p, &v) in out.iter_mut().zip(q) {
                    if v >= best - tol {
                        *p = 1.0 / ties;
                    }
                }
            }
        }
        Self {
            horizon: h,
            num_states: ns,
            num_actions: na,
            probs,
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    #[inline]
    pub fn row(&self, stage: usize, state: usize) -> &[f64] {
        let start = (stage * self.num_states + state) * self.num_actions;
        &self.probs[start..start + self.num_actions]
    }

    pub fn prob(&self, stage: usize, state: usize, action: usize) -> f64 {
        self.row(stage, state)[action]
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, stage: usize, state: usize, rng: &mut R) -> usize {
        let row = self.row(stage, state);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (a, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return a;
            }
        }
        // Round-off: fall back to the last action with positive mass.
        row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
    }
}

/// Soft Q and V tables of every stage together with the induced policy.
#[derive(Debug, Clone)]
pub struct SoftSolution {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    soft_q: Vec<f64>,
    soft_v: Vec<f64>,
    policy: Policy,
}

impl SoftSolution {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    #[inline]
    pub fn q_row(&self, stage: usize, state: usize) -> &[f64] {
        let start = (stage * self.num_states + state) * self.num_actions;
        &self.soft_q[start..start + self.num_actions]
    }

    pub fn q(&self, stage: usize, state: usize, action: usize) -> f64 {
        self.q_row(stage, state)[action]
    }

    /// Soft value; stage `horizon` is identically zero.
    pub fn v(&self, stage: usize, state: usize) -> f64 {
        self.soft_v[stage * self.num_states + state]
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn into_policy(self) -> Policy {
        self.policy
    }
}

/// Backward soft Bellman recursion from `V_T = 0`.
pub fn soft_value_iteration(
    transition: &TransitionModel,
    reward: &[f64],
    config: &MdpConfig,
) -> Result<SoftSolution> {
    let ns = transition.num_states();
    let na = transition.num_actions();
    if reward.len() != ns {
        return Err(Error::argument(format!(
            "reward has {} entries, the model has {ns} states",
            reward.len()
        )));
    }
    let h = config.horizon;
    let gamma = config.discount;
    let mut soft_q = vec![0.0; h * ns * na];
    let mut soft_v = vec![0.0; (h + 1) * ns];
    let mut probs = vec![0.0; h * ns * na];
    let mut backup = vec![0.0; ns];
    for t in (0..h).rev() {
        let (head, tail) = soft_v.split_at_mut((t + 1) * ns);
        let v_next = &tail[..ns];
        for (b, (&r, &v)) in backup.iter_mut().zip(reward.iter().zip(v_next)) {
            *b = r + gamma * v;
        }
        let v_now = &mut head[t * ns..];
        for s in 0..ns {
            let base = (t * ns + s) * na;
            let q = &mut soft_q[base..base + na];
            for (a, qa) in q.iter_mut().enumerate() {
                *qa = transition
                    .row(s, a)
                    .iter()
                    .map(|&(next, p)| p * backup[next])
                    .sum();
            }
            let v = log_sum_exp_unchecked(q);
            v_now[s] = v;
            for (p, &qa) in probs[base..base + na].iter_mut().zip(q.iter()) {
                *p = (qa - v).exp();
            }
        }
    }
    Ok(SoftSolution {
        horizon: h,
        num_states: ns,
        num_actions: na,
        soft_q,
        soft_v,
        policy: Policy {
            horizon: h,
            num_states: ns,
            num_actions: na,
            probs,
        },
    })
}

/// Stage-wise state and state-action distributions induced by a policy.
#[derive(Debug, Clone)]
pub struct OccupancyMeasure {
    num_states: usize,
    num_actions: usize,
    /// `d_t(s)` for `t = 0..=horizon`.
    state: Vec<f64>,
    /// `d_t(s) * pi_t(a|s)` for `t = 0..horizon`.
    state_action: Vec<f64>,
}

impl OccupancyMeasure {
    pub fn stage(&self, t: usize) -> &[f64] {
        &self.state[t * self.num_states..(t + 1) * self.num_states]
    }

    pub fn state_action(&self, t: usize, state: usize, action: usize) -> f64 {
        self.state_action[(t * self.num_states + state) * self.num_actions + action]
    }

    pub fn horizon(&self) -> usize {
        self.state.len() / self.num_states - 1
    }
}

/// Forward propagation of `P0` under `policy`.
pub fn occupancy(transition: &TransitionModel, policy: &Policy) -> Result<OccupancyMeasure> {
    let ns = transition.num_states();
    let na = transition.num_actions();
    if policy.num_states != ns || policy.num_actions != na {
        return Err(Error::argument("policy shape does not match the transition model"));
    }
    let h = policy.horizon;
    let mut state = vec![0.0; (h + 1) * ns];
    let mut state_action = vec![0.0; h * ns * na];
    state[..ns].copy_from_slice(transition.initial_distribution());
    for t in 0..h {
        let (head, tail) = state.split_at_mut((t + 1) * ns);
        let d_now = &head[t * ns..];
        let d_next = &mut tail[..ns];
        for s in 0..ns {
            let mass = d_now[s];
            if mass == 0.0 {
                continue;
            }
            let pi = policy.row(t, s);
            for a in 0..na {
                let w = mass * pi[a];
                state_action[(t * ns + s) * na + a] = w;
                if w == 0.0 {
                    continue;
                }
                for &(next, p) in transition.row(s, a) {
                    d_next[next] += w * p;
                }
            }
        }
    }
    Ok(OccupancyMeasure {
        num_states: ns,
        num_actions: na,
        state,
        state_action,
    })
}

/// Exact `sum_{t=1..T} gamma^t E[r(s_t)]` under `policy`.
pub fn expected_return(
    transition: &TransitionModel,
    policy: &Policy,
    reward: &[f64],
    config: &MdpConfig,
) -> Result<f64> {
    if reward.len() != transition.num_states() {
        return Err(Error::argument("reward length does not match the state count"));
    }
    if policy.horizon != config.horizon {
        return Err(Error::argument("policy horizon does not match the config"));
    }
    let occ = occupancy(transition, policy)?;
    let mut total = 0.0;
    let mut weight = 1.0;
    for t in 1..=policy.horizon {
        weight *= config.discount;
        let stage: f64 = occ.stage(t).iter().zip(reward).map(|(d, r)| d * r).sum();
        total += weight * stage;
    }
    Ok(total)
}

/// How the policy of an inferred reward is derived before evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EvdPolicy {
    /// Maximum causal entropy policy, the generative model of the expert.
    #[default]
    Soft,
    /// Argmax of the soft Q-function, ties split uniformly.
    Greedy,
}

/// Policy induced by `reward` under the given derivation rule.
pub fn induced_policy(
    transition: &TransitionModel,
    reward: &[f64],
    config: &MdpConfig,
    kind: EvdPolicy,
) -> Result<Policy> {
    let solution = soft_value_iteration(transition, reward, config)?;
    Ok(match kind {
        EvdPolicy::Soft => solution.into_policy(),
        EvdPolicy::Greedy => Policy::greedy(&solution),
    })
}

/// Expected value difference between the expert's soft policy and the soft
/// policy of `inferred_reward`, both scored on `true_reward`.
pub fn expected_value_difference(
    true_reward: &[f64],
    inferred_reward: &[f64],
    transition: &TransitionModel,
    config: &MdpConfig,
) -> Result<f64> {
    expected_value_difference_with(true_reward, inferred_reward, transition, config, EvdPolicy::Soft)
}

pub fn expected_value_difference_with(
    true_reward: &[f64],
    inferred_reward: &[f64],
    transition: &TransitionModel,
    config: &MdpConfig,
    kind: EvdPolicy,
) -> Result<f64> {
    let expert = soft_value_iteration(transition, true_reward, config)?.into_policy();
    let learner = induced_policy(transition, inferred_reward, config, kind)?;
    Ok(expected_return(transition, &expert, true_reward, config)?
        - expected_return(transition, &learner, true_reward, config)?)
}

/// EVD of the uniform random policy: the normalizer for relative thresholds.
pub fn uniform_policy_gap(true_reward: &[f64], transition: &TransitionModel, config: &MdpConfig) -> Result<f64> {
    let expert = soft_value_iteration(transition, true_reward, config)?.into_policy();
    let uniform = Policy::uniform(config.horizon, transition.num_states(), transition.num_actions());
    Ok(expected_return(transition, &expert, true_reward, config)?
        - expected_return(transition, &uniform, true_reward, config)?)
}

/// Discounted returns of `count` independent rollouts, trajectory `j` drawn
/// from `stream.child(j)`.
pub fn rollout_returns(
    transition: &TransitionModel,
    policy: &Policy,
    reward: &[f64],
    config: &MdpConfig,
    count: usize,
    stream: RngStream,
) -> Vec<f64> {
    let terminal = transition.terminal();
    (0..count)
        .map(|j| {
            let mut rng = stream.child(j as u64).rng();
            let mut state = sample_index(transition.initial_distribution(), &mut rng);
            let mut total = 0.0;
            let mut weight = 1.0;
            for t in 0..policy.horizon {
                weight *= config.discount;
                if state == terminal {
                    total += weight * reward[terminal];
                    continue;
                }
                let action = policy.sample_action(t, state, &mut rng);
                state = transition.sample_next(state, action, &mut rng);
                total += weight * reward[state];
            }
            total
        })
        .collect()
}

pub(crate) fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Sample mean and its standard error.
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloEvd {
    pub estimate: f64,
    pub standard_error: f64,
}

/// Sampled EVD: expert rollouts use the even children of `stream`, learner
/// rollouts the odd ones.
pub fn monte_carlo_evd(
    true_reward: &[f64],
    inferred_reward: &[f64],
    transition: &TransitionModel,
    config: &MdpConfig,
    num_trajectories: usize,
    stream: RngStream,
) -> Result<MonteCarloEvd> {
    if num_trajectories == 0 {
        return Err(Error::argument("need at least one trajectory"));
    }
    let expert = soft_value_iteration(transition, true_reward, config)?.into_policy();
    let learner = soft_value_iteration(transition, inferred_reward, config)?.into_policy();
    let a = rollout_returns(transition, &expert, true_reward, config, num_trajectories, stream.child(0));
    let b = rollout_returns(transition, &learner, true_reward, config, num_trajectories, stream.child(1));
    let (ma, sa) = mean_and_stderr(&a);
    let (mb, sb) = mean_and_stderr(&b);
    Ok(MonteCarloEvd {
        estimate: ma - mb,
        standard_error: (sa * sa + sb * sb).sqrt(),
    })
}
