//! Gaussian-process IRL with the deterministic training conditional.
//!
//! The reward is a zero-mean GP over state features with an ARD squared
//! exponential kernel. Only its values `f` at the inducing states are free;
//! every other state receives the GP posterior mean `K_rf (K_ff + s2 I)^-1 f`.
//! `f` and the log-hyperparameters are fitted jointly by maximizing the MaxEnt
//! likelihood of the extrapolated reward plus the GP and hyperparameter priors.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::demos::{DemoSet, FeatureMap};
use crate::error::{Error, Result};
use crate::maxent::MaxEntObjective;
use crate::numerics::{AdamState, CholeskyFactor};

/// Log-parameterized ARD squared-exponential kernel with diagonal noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelHyperparams {
    pub log_amplitude: f64,
    pub log_length_scales: Vec<f64>,
    pub log_noise: f64,
}

impl KernelHyperparams {
    pub fn initial(dim: usize) -> Self {
        Self {
            log_amplitude: 0.0,
            log_length_scales: vec![0.0; dim],
            log_noise: -2.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.log_length_scales.len()
    }

    pub fn amplitude(&self) -> f64 {
        self.log_amplitude.exp()
    }

    pub fn noise(&self) -> f64 {
        self.log_noise.exp()
    }

    /// `[log_amplitude, log_length_scales.., log_noise]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim() + 2);
        v.push(self.log_amplitude);
        v.extend(&self.log_length_scales);
        v.push(self.log_noise);
        v
    }

    pub fn from_slice(v: &[f64]) -> Self {
        let m = v.len() - 2;
        Self {
            log_amplitude: v[0],
            log_length_scales: v[1..=m].to_vec(),
            log_noise: v[m + 1],
        }
    }

    fn inverse_sq_lengths(&self) -> Vec<f64> {
        self.log_length_scales.iter().map(|l| (-2.0 * l).exp()).collect()
    }

    /// Noise-free kernel value.
    pub fn kernel(&self, x: &[f64], y: &[f64]) -> f64 {
        let inv = self.inverse_sq_lengths();
        self.amplitude() * (-0.5 * weighted_sq_dist(x, y, &inv)).exp()
    }
}

#[inline]
fn weighted_sq_dist(x: &[f64], y: &[f64], inv_sq: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .zip(inv_sq)
        .map(|((a, b), w)| (a - b) * (a - b) * w)
        .sum()
}

/// Kernel matrix between two row sets; the noise variance is added to the
/// diagonal when both sets are the same.
pub fn kernel_matrix(hyper: &KernelHyperparams, rows_a: &[Vec<f64>], rows_b: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let m = hyper.dim();
    if rows_a.iter().chain(rows_b).any(|r| r.len() != m) {
        return Err(Error::argument(format!("feature rows must have dimension {m}")));
    }
    let inv = hyper.inverse_sq_lengths();
    let amp = hyper.amplitude();
    let mut k = DMatrix::from_fn(rows_a.len(), rows_b.len(), |i, j| {
        amp * (-0.5 * weighted_sq_dist(&rows_a[i], &rows_b[j], &inv)).exp()
    });
    if rows_a == rows_b {
        let noise = hyper.noise();
        for i in 0..rows_a.len() {
            k[(i, i)] += noise;
        }
    }
    Ok(k)
}

/// Fitted GP reward: inducing rows, their reward values and the kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpirlModel {
    pub inducing_states: Vec<usize>,
    pub inducing_features: Vec<Vec<f64>>,
    pub inducing_values: Vec<f64>,
    pub hyperparams: KernelHyperparams,
}

impl GpirlModel {
    pub fn validate(&self) -> Result<()> {
        if self.inducing_features.len() != self.inducing_values.len() || self.inducing_values.is_empty() {
            return Err(Error::argument("inducing rows and values must be nonempty and of equal length"));
        }
        Ok(())
    }
}

/// DTC posterior mean at every state; the terminal (last) state is zero.
pub fn dtc_extrapolate(model: &GpirlModel, features: &FeatureMap) -> Result<Vec<f64>> {
    model.validate()?;
    let k_ff = kernel_matrix(&model.hyperparams, &model.inducing_features, &model.inducing_features)?;
    let factor = CholeskyFactor::new(&k_ff, 0.0)?;
    let alpha = factor.solve_vector(&DVector::from_column_slice(&model.inducing_values));
    let all = all_rows(features);
    let k_rf = kernel_matrix(&model.hyperparams, &all, &model.inducing_features)?;
    let mut r: Vec<f64> = (&k_rf * &alpha).iter().copied().collect();
    *r.last_mut().expect("at least one state") = 0.0;
    Ok(r)
}

fn all_rows(features: &FeatureMap) -> Vec<Vec<f64>> {
    (0..features.num_states()).map(|s| features.row(s).to_vec()).collect()
}

/// Standard deviation of the Gaussian prior on each log-hyperparameter.
pub const HYPER_PRIOR_STD: f64 = 2.0;

/// Terms of the GPIRL objective at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpirlObjectiveValue {
    pub irl: f64,
    pub gp_prior: f64,
    pub hyper_prior: f64,
}

impl GpirlObjectiveValue {
    pub fn total(&self) -> f64 {
        self.irl + self.gp_prior + self.hyper_prior
    }
}

/// The GPIRL objective for one demo set and inducing set.
pub struct GpirlProblem<'a> {
    objective: &'a MaxEntObjective<'a>,
    inducing_states: Vec<usize>,
    inducing: Vec<Vec<f64>>,
    all: Vec<Vec<f64>>,
    terminal: usize,
}

/// `log N(x; 0, std^2)` summed over entries.
fn log_normal_prior(values: &[f64], std: f64) -> f64 {
    values
        .iter()
        .map(|v| -0.5 * (v / std).powi(2) - std.ln() - 0.5 * (2.0 * PI).ln())
        .sum()
}

impl<'a> GpirlProblem<'a> {
    /// Uses every state recorded in `demos` as an inducing point.
    pub fn new(objective: &'a MaxEntObjective<'a>, features: &FeatureMap, demos: &DemoSet) -> Result<Self> {
        Self::with_inducing(objective, features, demos.visited_states())
    }

    pub fn with_inducing(objective: &'a MaxEntObjective<'a>, features: &FeatureMap, inducing_states: Vec<usize>) -> Result<Self> {
        if inducing_states.is_empty() {
            return Err(Error::argument("GPIRL needs at least one inducing state"));
        }
        if features.num_states() != objective.num_states() {
            return Err(Error::argument("feature map does not cover the state space"));
        }
        let inducing = inducing_states.iter().map(|&s| features.row(s).to_vec()).collect();
        Ok(Self {
            objective,
            inducing_states,
            inducing,
            all: all_rows(features),
            terminal: objective.transition().terminal(),
        })
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.all[0].len()
    }

    /// Number of free parameters: `f` followed by the log-hyperparameters.
    pub fn num_params(&self) -> usize {
        self.num_inducing() + self.feature_dim() + 2
    }

    pub fn pack(&self, f: &[f64], hyper: &KernelHyperparams) -> Vec<f64> {
        let mut p = f.to_vec();
        p.extend(hyper.to_vec());
        p
    }

    pub fn model(&self, params: &[f64]) -> GpirlModel {
        let n = self.num_inducing();
        GpirlModel {
            inducing_states: self.inducing_states.clone(),
            inducing_features: self.inducing.clone(),
            inducing_values: params[..n].to_vec(),
            hyperparams: KernelHyperparams::from_slice(&params[n..]),
        }
    }

    fn check_len(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::argument(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        Ok(())
    }

    /// Objective terms, computed without gradients.
    pub fn evaluate(&self, params: &[f64]) -> Result<GpirlObjectiveValue> {
        self.check_len(params)?;
        let n = self.num_inducing();
        let hyper = KernelHyperparams::from_slice(&params[n..]);
        let f = DVector::from_column_slice(&params[..n]);
        let k_ff = kernel_matrix(&hyper, &self.inducing, &self.inducing)?;
        let factor = CholeskyFactor::new(&k_ff, 0.0)?;
        let alpha = factor.solve_vector(&f);
        let k_rf = kernel_matrix(&hyper, &self.all, &self.inducing)?;
        let mut r: Vec<f64> = (&k_rf * &alpha).iter().copied().collect();
        r[self.terminal] = 0.0;
        let irl = self.objective.log_likelihood(&r)?;
        Ok(GpirlObjectiveValue {
            irl,
            gp_prior: gp_log_density(&f, &alpha, &factor),
            hyper_prior: log_normal_prior(&params[n..], HYPER_PRIOR_STD),
        })
    }

    /// Objective terms and the gradient with respect to `[f, log-hyperparameters]`.
    pub fn value_and_gradient(&self, params: &[f64]) -> Result<(GpirlObjectiveValue, Vec<f64>)> {
        self.check_len(params)?;
        let n = self.num_inducing();
        let m = self.feature_dim();
        let hyper = KernelHyperparams::from_slice(&params[n..]);
        let f = DVector::from_column_slice(&params[..n]);
        let k_ff = kernel_matrix(&hyper, &self.inducing, &self.inducing)?;
        let factor = CholeskyFactor::new(&k_ff, 0.0)?;
        let alpha = factor.solve_vector(&f);
        let k_rf = kernel_matrix(&hyper, &self.all, &self.inducing)?;
        let mut r: Vec<f64> = (&k_rf * &alpha).iter().copied().collect();
        r[self.terminal] = 0.0;
        let (irl, mut g_r) = self.objective.value_and_gradient(&r)?;
        g_r[self.terminal] = 0.0;
        let g_r = DVector::from_vec(g_r);

        let value = GpirlObjectiveValue {
            irl,
            gp_prior: gp_log_density(&f, &alpha, &factor),
            hyper_prior: log_normal_prior(&params[n..], HYPER_PRIOR_STD),
        };

        // u = K^-1 K_fr g_r is the pull-back of the reward gradient to f.
        let u = factor.solve_vector(&(k_rf.transpose() * &g_r));
        let mut grad = Vec::with_capacity(self.num_params());
        grad.extend((&u - &alpha).iter());

        // d/dtheta of: g_r . (dK_rf alpha - K_rf K^-1 dK alpha)
        //            + 1/2 alpha' dK alpha - 1/2 tr(K^-1 dK)
        let k_inv = factor.inverse();
        let noise = hyper.noise();
        let inv_sq = hyper.inverse_sq_lengths();
        // Noise-free kernel parts; K_ff's diagonal carries noise + jitter.
        let mut k_ff_clean = k_ff.clone();
        for i in 0..n {
            k_ff_clean[(i, i)] -= noise;
        }
        let theta_grad = |dk_ff: &DMatrix<f64>, dk_rf: &DMatrix<f64>| -> f64 {
            let dk_alpha = dk_ff * &alpha;
            let irl_term = g_r.dot(&(dk_rf * &alpha)) - u.dot(&dk_alpha);
            let trace = k_inv.component_mul(dk_ff).sum();
            irl_term + 0.5 * alpha.dot(&dk_alpha) - 0.5 * trace
        };
        // Log amplitude scales every noise-free entry.
        grad.push(theta_grad(&k_ff_clean, &k_rf));
        for d in 0..m {
            let dk_ff = DMatrix::from_fn(n, n, |i, j| {
                let diff = self.inducing[i][d] - self.inducing[j][d];
                k_ff_clean[(i, j)] * diff * diff * inv_sq[d]
            });
            let dk_rf = DMatrix::from_fn(self.all.len(), n, |i, j| {
                let diff = self.all[i][d] - self.inducing[j][d];
                k_rf[(i, j)] * diff * diff * inv_sq[d]
            });
            grad.push(theta_grad(&dk_ff, &dk_rf));
        }
        let dk_noise = DMatrix::from_diagonal_element(n, n, noise);
        grad.push(theta_grad(&dk_noise, &DMatrix::zeros(self.all.len(), n)));

        for (g, th) in grad[n..].iter_mut().zip(&params[n..]) {
            *g -= th / (HYPER_PRIOR_STD * HYPER_PRIOR_STD);
        }
        Ok((value, grad))
    }
}

/// `log N(f; 0, K)` given `alpha = K^-1 f` and the factor of `K`.
fn gp_log_density(f: &DVector<f64>, alpha: &DVector<f64>, factor: &CholeskyFactor) -> f64 {
    let n = f.len() as f64;
    -0.5 * f.dot(alpha) - 0.5 * factor.log_det() - 0.5 * n * (2.0 * PI).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpirlSettings {
    pub learning_rate: f64,
    pub max_iterations: usize,
    /// Stop when the relative objective change over `window` iterations is below this.
    pub tolerance: f64,
    pub window: usize,
}

impl Default for GpirlSettings {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            max_iterations: 1500,
            tolerance: 1e-6,
            window: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GpirlFit {
    pub model: GpirlModel,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Joint Adam ascent on `(f, theta)` from `f = 0` and the default kernel.
/// Returns the best iterate seen.
pub fn fit_gpirl(
    objective: &MaxEntObjective<'_>,
    demos: &DemoSet,
    features: &FeatureMap,
    settings: &GpirlSettings,
) -> Result<GpirlFit> {
    if demos.is_empty() {
        return Err(Error::argument("cannot fit a reward without demonstrations"));
    }
    let problem = GpirlProblem::new(objective, features, demos)?;
    let mut params = problem.pack(&vec![0.0; problem.num_inducing()], &KernelHyperparams::initial(features.dim()));
    let mut adam = AdamState::new(params.len(), settings.learning_rate);
    let mut history: Vec<f64> = Vec::new();
    let mut best = (f64::NEG_INFINITY, params.clone());
    let mut converged = false;
    let mut iterations = 0;
    while iterations < settings.max_iterations {
        let (value, grad) = problem.value_and_gradient(&params)?;
        let total = value.total();
        if !total.is_finite() {
            return Err(Error::numerical(format!(
                "GPIRL objective is {total} at iteration {iterations} (irl {}, gp {}, hyper {})",
                value.irl, value.gp_prior, value.hyper_prior
            )));
        }
        if total > best.0 {
            best = (total, params.clone());
        }
        history.push(total);
        if history.len() > settings.window {
            let old = history[history.len() - 1 - settings.window];
            if (total - old).abs() <= settings.tolerance * total.abs().max(1.0) {
                converged = true;
                break;
            }
        }
        iterations += 1;
        let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
        adam.step(&mut params, &neg)?;
    }
    if !converged {
        let total = problem.evaluate(&params)?.total();
        if total > best.0 {
            best = (total, params);
        }
    }
    Ok(GpirlFit {
        model: problem.model(&best.1),
        objective: best.0,
        iterations,
        converged,
    })
}
