//! Maximum causal entropy IRL: likelihood, gradients, and the tabular and
//! linear reward fits.

use serde::{Deserialize, Serialize};

use crate::demos::{DemoSet, DemoStats, FeatureMap};
use crate::env::{MdpConfig, TransitionModel};
use crate::error::{Error, Result};
use crate::numerics::AdamState;
use crate::solver::soft_value_iteration;

/// Log-likelihood of a fixed demo set as a function of the per-state reward.
#[derive(Debug, Clone)]
pub struct MaxEntObjective<'a> {
    transition: &'a TransitionModel,
    config: &'a MdpConfig,
    stats: DemoStats,
}

impl<'a> MaxEntObjective<'a> {
    pub fn new(transition: &'a TransitionModel, config: &'a MdpConfig, demos: &DemoSet) -> Result<Self> {
        if demos.config.horizon != config.horizon {
            return Err(Error::Data("demo horizon differs from the environment".into()));
        }
        Ok(Self {
            transition,
            config,
            stats: DemoStats::new(demos, transition)?,
        })
    }

    pub fn transition(&self) -> &TransitionModel {
        self.transition
    }

    pub fn config(&self) -> &MdpConfig {
        self.config
    }

    pub fn stats(&self) -> &DemoStats {
        &self.stats
    }

    pub fn num_states(&self) -> usize {
        self.transition.num_states()
    }

    /// `sum over demo steps of log pi_t(a_t | s_t)`.
    pub fn log_likelihood(&self, reward: &[f64]) -> Result<f64> {
        let sol = soft_value_iteration(self.transition, reward, self.config)?;
        let na = self.transition.num_actions();
        let mut total = 0.0;
        for t in 0..self.config.horizon {
            for (idx, &c) in self.stats.stage(t).iter().enumerate() {
                if c != 0.0 {
                    let (s, a) = (idx / na, idx % na);
                    total += c * (sol.q(t, s, a) - sol.v(t, s));
                }
            }
        }
        Ok(total)
    }

    /// Likelihood and its exact gradient with respect to every entry of
    /// `reward` (terminal included).
    ///
    /// Reverse-mode sweep: the adjoint of `Q_t(s,a)` is the demo count minus
    /// the policy-weighted adjoint of `V_t(s)`, and it flows into both the
    /// reward of each successor and, discounted, into `V_{t+1}`.
    pub fn value_and_gradient(&self, reward: &[f64]) -> Result<(f64, Vec<f64>)> {
        let sol = soft_value_iteration(self.transition, reward, self.config)?;
        let ns = self.transition.num_states();
        let na = self.transition.num_actions();
        let gamma = self.config.discount;
        let mut value = 0.0;
        let mut grad = vec![0.0; ns];
        let mut incoming = vec![0.0; ns];
        let mut outgoing = vec![0.0; ns];
        for t in 0..self.config.horizon {
            let counts = self.stats.stage(t);
            outgoing.iter_mut().for_each(|x| *x = 0.0);
            for s in 0..ns {
                let c_row = &counts[s * na..(s + 1) * na];
                let c_state: f64 = c_row.iter().sum();
                let adj_v = incoming[s] - c_state;
                if adj_v == 0.0 && c_state == 0.0 {
                    continue;
                }
                let pi = sol.policy().row(t, s);
                let v = sol.v(t, s);
                for a in 0..na {
                    if c_row[a] != 0.0 {
                        value += c_row[a] * (sol.q(t, s, a) - v);
                    }
                    let adj_q = c_row[a] + adj_v * pi[a];
                    if adj_q == 0.0 {
                        continue;
                    }
                    for &(next, p) in self.transition.row(s, a) {
                        grad[next] += adj_q * p;
                        outgoing[next] += gamma * adj_q * p;
                    }
                }
            }
            std::mem::swap(&mut incoming, &mut outgoing);
        }
        Ok((value, grad))
    }

    pub fn gradient_tabular(&self, reward: &[f64]) -> Result<Vec<f64>> {
        Ok(self.value_and_gradient(reward)?.1)
    }
}

/// Adam gradient-ascent settings shared by the MaxEnt fits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AscentSettings {
    pub learning_rate: f64,
    pub max_iterations: usize,
    /// Stop once the gradient max-norm drops below this.
    pub grad_tolerance: f64,
}

impl Default for AscentSettings {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            max_iterations: 2000,
            grad_tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub iterations: usize,
    pub evaluations: usize,
    pub objective: f64,
    pub grad_max_norm: f64,
    pub converged: bool,
}

const MAX_HALVINGS: usize = 30;

/// Adam ascent that only accepts non-decreasing iterates, halving the Adam
/// step until the objective does not drop.
pub(crate) fn maximize<F>(mut params: Vec<f64>, settings: &AscentSettings, mut f: F) -> Result<(Vec<f64>, FitDiagnostics)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut adam = AdamState::new(params.len(), settings.learning_rate);
    let (mut value, mut grad) = f(&params)?;
    let mut evaluations = 1;
    if !value.is_finite() {
        return Err(Error::numerical(format!("objective is {value} at the initial point")));
    }
    let mut iterations = 0;
    let mut converged = false;
    while iterations < settings.max_iterations {
        if max_norm(&grad) < settings.grad_tolerance {
            converged = true;
            break;
        }
        iterations += 1;
        let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
        let delta = adam.update(&neg)?;
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let candidate: Vec<f64> = params.iter().zip(&delta).map(|(p, d)| p + scale * d).collect();
            let (v, g) = f(&candidate)?;
            evaluations += 1;
            if v.is_finite() && v >= value {
                params = candidate;
                value = v;
                grad = g;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            // No ascent along the Adam direction at any scale: a numerical optimum.
            converged = true;
            break;
        }
    }
    if !value.is_finite() {
        return Err(Error::numerical(format!(
            "objective became {value} after {iterations} iterations"
        )));
    }
    Ok((
        params,
        FitDiagnostics {
            iterations,
            evaluations,
            objective: value,
            grad_max_norm: max_norm(&grad),
            converged,
        },
    ))
}

pub(crate) fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Point estimates of the reward of every state; the terminal entry is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularRewardModel {
    pub rewards: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TabularFit {
    pub model: TabularRewardModel,
    /// States reached at some recorded step with `t >= 1`.
    pub visited: Vec<bool>,
    pub diagnostics: FitDiagnostics,
}

/// Fits one free reward per grid state from a zero start.
pub fn fit_tabular(objective: &MaxEntObjective<'_>, demos: &DemoSet, settings: &AscentSettings) -> Result<TabularFit> {
    if demos.is_empty() {
        return Err(Error::argument("cannot fit a reward without demonstrations"));
    }
    let ns = objective.num_states();
    let terminal = objective.transition().terminal();
    let (params, diagnostics) = maximize(vec![0.0; ns - 1], settings, |p| {
        let mut reward = p.to_vec();
        reward.insert(terminal, 0.0);
        let (v, mut g) = objective.value_and_gradient(&reward)?;
        g.remove(terminal);
        Ok((v, g))
    })?;
    let mut rewards = params;
    rewards.insert(terminal, 0.0);
    let mut visited = vec![false; ns];
    for traj in &demos.trajectories {
        for step in traj.steps.iter().filter(|s| s.stage >= 1) {
            visited[step.state] = true;
        }
    }
    Ok(TabularFit {
        model: TabularRewardModel { rewards },
        visited,
        diagnostics,
    })
}

/// Weights of a reward linear in the state features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearRewardModel {
    pub weights: Vec<f64>,
}

/// `Phi w`; the terminal feature row is zero so its reward is zero.
pub fn reward_from_linear(model: &LinearRewardModel, features: &FeatureMap) -> Result<Vec<f64>> {
    if model.weights.len() != features.dim() {
        return Err(Error::argument(format!(
            "{} weights for {}-dimensional features",
            model.weights.len(),
            features.dim()
        )));
    }
    Ok((0..features.num_states())
        .map(|s| features.row(s).iter().zip(&model.weights).map(|(x, w)| x * w).sum())
        .collect())
}

/// Likelihood and its gradient in weight space.
pub fn linear_value_and_gradient(
    objective: &MaxEntObjective<'_>,
    features: &FeatureMap,
    weights: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let reward = reward_from_linear(
        &LinearRewardModel {
            weights: weights.to_vec(),
        },
        features,
    )?;
    let (v, g) = objective.value_and_gradient(&reward)?;
    Ok((v, features.pull_back(&g)))
}

#[derive(Debug, Clone)]
pub struct LinearFit {
    pub model: LinearRewardModel,
    pub diagnostics: FitDiagnostics,
}

pub fn fit_linear(
    objective: &MaxEntObjective<'_>,
    demos: &DemoSet,
    features: &FeatureMap,
    settings: &AscentSettings,
) -> Result<LinearFit> {
    if demos.is_empty() {
        return Err(Error::argument("cannot fit a reward without demonstrations"));
    }
    if features.num_states() != objective.num_states() {
        return Err(Error::argument("feature map does not cover the state space"));
    }
    let (weights, diagnostics) = maximize(vec![0.0; features.dim()], settings, |w| {
        linear_value_and_gradient(objective, features, w)
    })?;
    Ok(LinearFit {
        model: LinearRewardModel { weights },
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demos::{generate_demos, Step, Trajectory};
    use crate::env::reward_vector;
    use crate::numerics::{check_gradient_with_floor, RngStream};
    use crate::solver::{expected_value_difference, uniform_policy_gap};
    use rand::Rng;

    fn setup(count: usize, seed: u64) -> (MdpConfig, TransitionModel, DemoSet) {
        let cfg = MdpConfig::default();
        let model = TransitionModel::build(&cfg).unwrap();
        let sol = soft_value_iteration(&model, &reward_vector(&cfg), &cfg).unwrap();
        let demos = generate_demos(&cfg, &model, sol.policy(), count, RngStream::new(seed, 7)).unwrap();
        (cfg, model, demos)
    }

    #[test]
    fn zero_reward_likelihood_is_uniform() {
        let (cfg, model, demos) = setup(300, 1);
        let obj = MaxEntObjective::new(&model, &cfg, &demos).unwrap();
        let ll = obj.log_likelihood(&vec![0.0; 177]).unwrap();
        let expected = -(demos.num_steps() as f64) * 10f64.ln();
        assert!((ll - expected).abs() < 1e-9 * expected.abs());
    }

    #[test]
    fn likelihood_shift_invariance() {
        let (cfg, model, demos) = setup(300, 2);
        let obj = MaxEntObjective::new(&model, &cfg, &demos).unwrap();
        let r = reward_vector(&cfg);
        let shifted: Vec<f64> = r.iter().map(|x| x + 3.7).collect();
        let a = obj.log_likelihood(&r).unwrap();
        let b = obj.log_likelihood(&shifted).unwrap();
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }

    #[test]
    fn value_and_gradient_agrees_with_log_likelihood() {
        let (cfg, model, demos) = setup(100, 3);
        let obj = MaxEntObjective::new(&model, &cfg, &demos).unwrap();
        let r = reward_vector(&cfg);
        let (v, _) = obj.value_and_gradient(&r).unwrap();
        assert!((v - obj.log_likelihood(&r).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn tabular_gradient_matches_finite_differences() {
        let (cfg, model, demos) = setup(200, 4);
        let obj = MaxEntObjective::new(&model, &cfg, &demos).unwrap();
        let mut rng = RngStream::new(4, 4).rng();
        for _ in 0..3 {
            let mut r: Vec<f64> = (0..177).map(|_| rng.gen_range(-2.0..2.0)).collect();
            r[176] = 0.0;
            let g = obj.gradient_tabular(&r).unwrap();
            let scale = max_norm(&g);
            let err = check_gradient_with_floor(
                |x| obj.log_likelihood(x).unwrap(),
                |_| g.clone(),
                &r,
                1e-5,
                1e-3 * scale,
            )
            .unwrap();
            assert!(err < 1e-5, "relative error {err}");
        }
    }

    #[test]
    fn empty_demos_give_zero_gradient() {
        let cfg = MdpConfig::default();
        let model = TransitionModel::build(&cfg).unwrap();
        let demos = DemoSet {
            config: cfg.clone(),
            seed: 0,
            trajectories: vec![],
        };
        let obj = MaxEntObjective::new(&model, &cfg, &demos).unwrap();
        let g = obj.gradient_tabular(&reward_vector(&cfg)).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
        assert!(fit_tabular(&obj, &demos, &AscentSettings::default()).is_err());
    }

    #[test]
    fn stage_beyond_horizon_is_a_data_error() {
        let cfg = MdpConfig::default();
        let model = TransitionModel::build(&cfg).unwrap();
        let demos = DemoSet {
            config: cfg.clone(),
            seed: 0,
            trajectories: vec![Trajectory {
                steps: vec![Step { stage: 9, state: 1, action: 1 }],
                terminated_early: false,
            }],
        };
        assert!(matches!(MaxEntObjective::new(&model, &cfg, &demos), Err(Error::Data(_))));
    }

    #[test]
    fn reward_from_linear_examples() {
        let cfg = MdpConfig::default();
        let phi = FeatureMap::default_for(&cfg);
        let zero = reward_from_linear(&LinearRewardModel { weights: vec![0.0; 4] }, &phi).unwrap();
        assert!(zero.iter().all(|&x| x == 0.0));
        let lin = reward_from_linear(&LinearRewardModel { weights: vec![-3.0, -3.0, 0.0, 3.0] }, &phi).unwrap();
        for (a, b) in lin.iter().zip(reward_vector(&cfg)) {
            assert!((a - b).abs() < 1e-12);
        }
        let w1 = [0.3, -1.0, 2.0, 0.5];
        let w2 = [1.1, 0.4, -0.7, 2.0];
        let sum: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| a + b).collect();
        let r1 = reward_from_linear(&LinearRewardModel { weights: w1.to_vec() }, &phi).unwrap();
        let r2 = reward_from_linear(&LinearRewardModel { weights: w2.to_vec() }, &phi).unwrap();
        let r12 = reward_from_linear(&LinearRewardModel { weights: sum }, &phi).unwrap();
        for i in 0..177 {
            assert!((r12[i] - r1[i] - r2[i]).abs() < 1e-12);
        }
        assert!(reward_from_linear(&LinearRewardModel { weights: vec![1.0; 3] }, &phi).is_err());
    }

    #[test]
    fn linear_gradient_matches_finite_differences() {
        let (cfg, model, demos) = setup(200, 5);
        let obj = MaxEntObjective::new(&model, &cfg, &demos).unwrap();
        let phi = FeatureMap::default_for(&cfg);
        let w = [0.4, -1.3, 0.2, 0.8];
        let (_, g) = linear_value_and_gradient(&obj, &phi, &w).unwrap();
        let err = check_gradient_with_floor(
            |x| linear_value_and_gradient(&obj, &phi, x).unwrap().0,
            |_| g.clone(),
            &w,
            1e-5,
            1e-10,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn fits_are_monotone_and_deterministic() {
        let (cfg, model, demos) = setup(512, 6);
        let obj = MaxEntObjective::new(&model, &cfg, &demos).unwrap();
        let settings = AscentSettings {
            max_iterations: 200,
            ..Default::default()
        };
        let a = fit_tabular(&obj, &demos, &settings).unwrap();
        let b = fit_tabular(&obj, &demos, &settings).unwrap();
        assert_eq!(a.model, b.model);
        assert!(a.diagnostics.objective >= obj.log_likelihood(&vec![0.0; 177]).unwrap());
        assert_eq!(a.model.rewards[176], 0.0);
        // The initial stage-0 states with overfull books are never arrived at.
        assert!(!a.visited[cfg.state_index(crate::env::State::new(3, 3, 0))]);

        let phi = FeatureMap::default_for(&cfg);
        let lin = fit_linear(&obj, &demos, &phi, &settings).unwrap();
        assert!(lin.diagnostics.objective >= obj.log_likelihood(&vec![0.0; 177]).unwrap());
    }

    #[test]
    fn linear_fit_recovers_linear_expert() {
        let (cfg, model, demos) = setup(4096, 8);
        let obj = MaxEntObjective::new(&model, &cfg, &demos).unwrap();
        let phi = FeatureMap::default_for(&cfg);
        let fit = fit_linear(&obj, &demos, &phi, &AscentSettings::default()).unwrap();
        let truth = reward_vector(&cfg);
        let learned = reward_from_linear(&fit.model, &phi).unwrap();
        let evd = expected_value_difference(&truth, &learned, &model, &cfg).unwrap();
        let gap = uniform_policy_gap(&truth, &model, &cfg).unwrap();
        assert!(evd < 0.05 * gap, "evd {evd} vs gap {gap}: {:?}", fit.model.weights);
    }
}
