//! Two-step Bayesian neural network IRL.
//!
//! Tabular MaxEnt first produces point estimates of the reward at the states
//! the demonstrations reach. A feed-forward network with a mean-field Gaussian
//! posterior over its weights is then trained by variational inference to map
//! state features to those estimates, each weighted by its visitation count,
//! and its posterior-mean prediction fills in the whole state space.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::demos::{visitation_counts, DemoSet, FeatureMap, Visitation};
use crate::env::{MdpConfig, TransitionModel};
use crate::error::{Error, Result};
use crate::maxent::{fit_tabular, AscentSettings, MaxEntObjective};
use crate::numerics::{AdamState, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Fully connected layers; hidden layers use `activation`, the output is linear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BnnArchitecture {
    pub layer_sizes: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl BnnArchitecture {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        let arch = Self {
            layer_sizes,
            activation,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Two hidden layers of 16 tanh units.
    pub fn default_for(input_dim: usize) -> Self {
        Self {
            layer_sizes: vec![input_dim, 16, 16, 1],
            activation: Activation::Tanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = &self.layer_sizes;
        if sizes.len() < 3 {
            return Err(Error::argument("a BNN needs at least one hidden layer"));
        }
        if sizes.last() != Some(&1) {
            return Err(Error::argument("the BNN output layer must have one unit"));
        }
        if sizes.contains(&0) {
            return Err(Error::argument("BNN layers must be nonempty"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    /// Total number of weights and biases.
    pub fn num_params(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn check(&self, weights: &[f64], input: &[f64]) -> Result<()> {
        if weights.len() != self.num_params() {
            return Err(Error::argument(format!(
                "expected {} network weights, got {}",
                self.num_params(),
                weights.len()
            )));
        }
        if input.len() != self.input_dim() {
            return Err(Error::argument(format!(
                "expected input of dimension {}, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        Ok(())
    }
}

/// Evaluates the network. Weights are laid out layer by layer, each as a
/// row-major `out x in` matrix followed by the `out` biases.
pub fn forward(weights: &[f64], arch: &BnnArchitecture, input: &[f64]) -> Result<f64> {
    arch.check(weights, input)?;
    Ok(forward_unchecked(weights, arch, input, &mut Vec::new()))
}

/// Forward pass that keeps every layer's output in `activations` for backprop.
fn forward_unchecked(weights: &[f64], arch: &BnnArchitecture, input: &[f64], activations: &mut Vec<Vec<f64>>) -> f64 {
    activations.clear();
    activations.push(input.to_vec());
    let last = arch.layer_sizes.len() - 2;
    let mut offset = 0;
    for (l, w) in arch.layer_sizes.windows(2).enumerate() {
        let (n_in, n_out) = (w[0], w[1]);
        let x = &activations[l];
        let mat = &weights[offset..offset + n_in * n_out];
        let bias = &weights[offset + n_in * n_out..offset + n_in * n_out + n_out];
        let out: Vec<f64> = (0..n_out)
            .map(|j| {
                let z = bias[j] + mat[j * n_in..(j + 1) * n_in].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                if l == last {
                    z
                } else {
                    arch.activation.apply(z)
                }
            })
            .collect();
        activations.push(out);
        offset += n_in * n_out + n_out;
    }
    activations[last + 1][0]
}

/// Adds `scale * d output / d weights` into `grad`, given the activations of
/// the forward pass at `weights`.
fn backward(weights: &[f64], arch: &BnnArchitecture, activations: &[Vec<f64>], scale: f64, grad: &mut [f64]) {
    let sizes = &arch.layer_sizes;
    let num_layers = sizes.len() - 1;
    let mut offsets = Vec::with_capacity(num_layers);
    let mut offset = 0;
    for w in sizes.windows(2) {
        offsets.push(offset);
        offset += w[0] * w[1] + w[1];
    }
    let mut delta = vec![scale];
    for l in (0..num_layers).rev() {
        let (n_in, n_out) = (sizes[l], sizes[l + 1]);
        let base = offsets[l];
        let x = &activations[l];
        for j in 0..n_out {
            let row = base + j * n_in;
            for i in 0..n_in {
                grad[row + i] += delta[j] * x[i];
            }
            grad[base + n_in * n_out + j] += delta[j];
        }
        if l > 0 {
            delta = (0..n_in)
                .map(|i| {
                    let back: f64 = (0..n_out).map(|j| weights[base + j * n_in + i] * delta[j]).sum();
                    back * arch.activation.derivative_from_output(x[i])
                })
                .collect();
        }
    }
}

/// Mean-field Gaussian posterior over the flattened network weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalPosterior {
    pub mu: Vec<f64>,
    /// Log standard deviations.
    pub rho: Vec<f64>,
    pub prior_std: f64,
}

impl VariationalPosterior {
    /// Means drawn from `N(0, 1/fan_in)` for weights and zero for biases.
    pub fn initialize(arch: &BnnArchitecture, log_std: f64, prior_std: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut mu = Vec::with_capacity(arch.num_params());
        for w in arch.layer_sizes.windows(2) {
            let normal = Normal::new(0.0, 1.0 / (w[0] as f64).sqrt()).expect("positive std");
            mu.extend((0..w[0] * w[1]).map(|_| normal.sample(rng)));
            mu.extend(std::iter::repeat_n(0.0, w[1]));
        }
        let rho = vec![log_std; mu.len()];
        Self { mu, rho, prior_std }
    }

    pub fn validate(&self, arch: &BnnArchitecture) -> Result<()> {
        if self.mu.len() != arch.num_params() || self.rho.len() != self.mu.len() {
            return Err(Error::argument("posterior size does not match the architecture"));
        }
        if !(self.prior_std > 0.0) {
            return Err(Error::argument("prior_std must be positive"));
        }
        if self.mu.iter().chain(&self.rho).any(|v| !v.is_finite()) {
            return Err(Error::numerical("posterior parameters must be finite"));
        }
        Ok(())
    }

    fn sample_weights(&self, rng: &mut ChaCha8Rng, eps: &mut Vec<f64>, weights: &mut Vec<f64>) {
        eps.clear();
        weights.clear();
        for (m, r) in self.mu.iter().zip(&self.rho) {
            let e: f64 = StandardNormal.sample(rng);
            eps.push(e);
            weights.push(m + r.exp() * e);
        }
    }
}

/// Closed-form `KL(q || p)` against the isotropic prior `N(0, prior_std^2)`.
pub fn kl_diagonal_gaussians(posterior: &VariationalPosterior) -> f64 {
    let p = posterior.prior_std;
    let p2 = p * p;
    posterior
        .mu
        .iter()
        .zip(&posterior.rho)
        .map(|(m, r)| {
            let s2 = (2.0 * r).exp();
            p.ln() - r + (s2 + m * m) / (2.0 * p2) - 0.5
        })
        .sum()
}

/// One training example: a feature row, its target reward and its weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnnDatum {
    pub features: Vec<f64>,
    pub target: f64,
    pub weight: f64,
}

fn check_dataset(dataset: &[BnnDatum], arch: &BnnArchitecture) -> Result<()> {
    for d in dataset {
        if d.features.len() != arch.input_dim() {
            return Err(Error::argument("dataset feature dimension does not match the architecture"));
        }
        if !(d.weight >= 0.0) || !d.target.is_finite() {
            return Err(Error::argument("dataset weights must be nonnegative and targets finite"));
        }
    }
    Ok(())
}

/// Weighted Gaussian log-density of the targets under network outputs.
pub fn weighted_log_likelihood(dataset: &[BnnDatum], outputs: &[f64], noise_std: f64) -> f64 {
    let log_norm = -(noise_std * (2.0 * std::f64::consts::PI).sqrt()).ln();
    dataset
        .iter()
        .zip(outputs)
        .map(|(d, y)| {
            let z = (d.target - y) / noise_std;
            d.weight * (log_norm - 0.5 * z * z)
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboEstimate {
    pub expected_log_likelihood: f64,
    pub kl_term: f64,
    pub elbo: f64,
    pub num_mc_samples: usize,
}

impl ElboEstimate {
    fn new(expected_log_likelihood: f64, kl_term: f64, num_mc_samples: usize) -> Self {
        Self {
            expected_log_likelihood,
            kl_term,
            elbo: expected_log_likelihood - kl_term,
            num_mc_samples,
        }
    }
}

fn check_elbo_args(noise_std: f64, num_mc_samples: usize) -> Result<()> {
    if num_mc_samples == 0 {
        return Err(Error::argument("at least one Monte Carlo sample is required"));
    }
    if !(noise_std > 0.0) {
        return Err(Error::argument("noise_std must be positive"));
    }
    Ok(())
}

/// Reparameterized Monte Carlo ELBO.
pub fn elbo_estimate(
    posterior: &VariationalPosterior,
    arch: &BnnArchitecture,
    dataset: &[BnnDatum],
    noise_std: f64,
    num_mc_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ElboEstimate> {
    check_elbo_args(noise_std, num_mc_samples)?;
    posterior.validate(arch)?;
    check_dataset(dataset, arch)?;
    let (mut eps, mut weights, mut acts) = (Vec::new(), Vec::new(), Vec::new());
    let mut total = 0.0;
    for _ in 0..num_mc_samples {
        posterior.sample_weights(rng, &mut eps, &mut weights);
        let outputs: Vec<f64> = dataset
            .iter()
            .map(|d| forward_unchecked(&weights, arch, &d.features, &mut acts))
            .collect();
        total += weighted_log_likelihood(dataset, &outputs, noise_std);
    }
    Ok(ElboEstimate::new(
        total / num_mc_samples as f64,
        kl_diagonal_gaussians(posterior),
        num_mc_samples,
    ))
}

/// ELBO estimate and its gradient for the given standard-normal draws, one
/// slice per Monte Carlo sample. Returns `(estimate, d/dmu, d/drho)`.
pub fn elbo_with_noise(
    posterior: &VariationalPosterior,
    arch: &BnnArchitecture,
    dataset: &[BnnDatum],
    noise_std: f64,
    draws: &[Vec<f64>],
) -> Result<(ElboEstimate, Vec<f64>, Vec<f64>)> {
    check_elbo_args(noise_std, draws.len())?;
    posterior.validate(arch)?;
    check_dataset(dataset, arch)?;
    let np = arch.num_params();
    if draws.iter().any(|e| e.len() != np) {
        return Err(Error::argument("noise draws must match the parameter count"));
    }
    let s = draws.len() as f64;
    let sigma: Vec<f64> = posterior.rho.iter().map(|r| r.exp()).collect();
    let mut grad_mu = vec![0.0; np];
    let mut grad_rho = vec![0.0; np];
    let mut grad_w = vec![0.0; np];
    let mut acts = Vec::new();
    let mut total = 0.0;
    let inv_var = 1.0 / (noise_std * noise_std);
    for eps in draws {
        let weights: Vec<f64> = posterior.mu.iter().zip(&sigma).zip(eps).map(|((m, sd), e)| m + sd * e).collect();
        grad_w.iter_mut().for_each(|g| *g = 0.0);
        let mut outputs = Vec::with_capacity(dataset.len());
        for d in dataset {
            let y = forward_unchecked(&weights, arch, &d.features, &mut acts);
            outputs.push(y);
            let dl_dy = d.weight * (d.target - y) * inv_var;
            if dl_dy != 0.0 {
                backward(&weights, arch, &acts, dl_dy, &mut grad_w);
            }
        }
        total += weighted_log_likelihood(dataset, &outputs, noise_std);
        for j in 0..np {
            grad_mu[j] += grad_w[j] / s;
            grad_rho[j] += grad_w[j] * eps[j] * sigma[j] / s;
        }
    }
    let p2 = posterior.prior_std * posterior.prior_std;
    for j in 0..np {
        grad_mu[j] -= posterior.mu[j] / p2;
        grad_rho[j] -= sigma[j] * sigma[j] / p2 - 1.0;
    }
    let estimate = ElboEstimate::new(total / s, kl_diagonal_gaussians(posterior), draws.len());
    Ok((estimate, grad_mu, grad_rho))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BnnSettings {
    pub epochs: usize,
    pub learning_rate: f64,
    pub noise_std: f64,
    pub prior_std: f64,
    pub train_samples: usize,
    pub predict_samples: usize,
    pub init_log_std: f64,
}

impl Default for BnnSettings {
    fn default() -> Self {
        Self {
            epochs: 3000,
            learning_rate: 1e-3,
            noise_std: 0.1,
            prior_std: 1.0,
            train_samples: 4,
            predict_samples: 64,
            init_log_std: -5.0,
        }
    }
}

impl BnnSettings {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.train_samples == 0 || self.predict_samples == 0 {
            return Err(Error::validation("bnn", "epochs and sample counts must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.noise_std > 0.0 && self.prior_std > 0.0) {
            return Err(Error::validation("bnn", "learning_rate, noise_std and prior_std must be positive"));
        }
        if !self.init_log_std.is_finite() {
            return Err(Error::validation("bnn", "init_log_std must be finite"));
        }
        Ok(())
    }
}

/// Full-batch Adam ascent on the reparameterized ELBO for a fixed number of epochs.
pub fn fit_bnn(
    dataset: &[BnnDatum],
    arch: &BnnArchitecture,
    settings: &BnnSettings,
    stream: RngStream,
) -> Result<VariationalPosterior> {
    arch.validate()?;
    settings.validate()?;
    if dataset.is_empty() {
        return Err(Error::argument("cannot fit a BNN to an empty dataset"));
    }
    check_dataset(dataset, arch)?;
    let mut rng = stream.rng();
    let mut posterior = VariationalPosterior::initialize(arch, settings.init_log_std, settings.prior_std, &mut rng);
    let np = arch.num_params();
    let mut adam = AdamState::new(2 * np, settings.learning_rate);
    let mut params = Vec::with_capacity(2 * np);
    let mut neg_grad = Vec::with_capacity(2 * np);
    for epoch in 0..settings.epochs {
        let draws: Vec<Vec<f64>> = (0..settings.train_samples)
            .map(|_| (0..np).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let (estimate, g_mu, g_rho) = elbo_with_noise(&posterior, arch, dataset, settings.noise_std, &draws)?;
        if !estimate.elbo.is_finite() {
            return Err(Error::numerical(format!("ELBO is {} at epoch {epoch}", estimate.elbo)));
        }
        params.clear();
        params.extend(&posterior.mu);
        params.extend(&posterior.rho);
        neg_grad.clear();
        neg_grad.extend(g_mu.iter().chain(&g_rho).map(|g| -g));
        adam.step(&mut params, &neg_grad)?;
        posterior.mu.copy_from_slice(&params[..np]);
        posterior.rho.copy_from_slice(&params[np..]);
    }
    posterior.validate(arch)?;
    Ok(posterior)
}

/// Monte Carlo posterior-mean reward per state; the terminal (last) state is zero.
pub fn predict_reward_mean(
    posterior: &VariationalPosterior,
    arch: &BnnArchitecture,
    features: &FeatureMap,
    num_mc_samples: usize,
    stream: RngStream,
) -> Result<Vec<f64>> {
    if num_mc_samples == 0 {
        return Err(Error::argument("at least one Monte Carlo sample is required"));
    }
    posterior.validate(arch)?;
    if features.dim() != arch.input_dim() {
        return Err(Error::argument("feature map dimension does not match the architecture"));
    }
    let ns = features.num_states();
    let mut rng = stream.rng();
    let (mut eps, mut weights, mut acts) = (Vec::new(), Vec::new(), Vec::new());
    let mut mean = vec![0.0; ns];
    for _ in 0..num_mc_samples {
        posterior.sample_weights(&mut rng, &mut eps, &mut weights);
        for (s, m) in mean.iter_mut().enumerate().take(ns - 1) {
            *m += forward_unchecked(&weights, arch, features.row(s), &mut acts);
        }
    }
    for m in &mut mean {
        *m /= num_mc_samples as f64;
    }
    mean[ns - 1] = 0.0;
    Ok(mean)
}

/// Serializable BNN reward: network, posterior and prediction settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnnRewardModel {
    pub architecture: BnnArchitecture,
    pub posterior: VariationalPosterior,
    pub noise_std: f64,
    pub predict_samples: usize,
    pub predict_stream: RngStream,
}

impl BnnRewardModel {
    pub fn rewards(&self, features: &FeatureMap) -> Result<Vec<f64>> {
        predict_reward_mean(&self.posterior, &self.architecture, features, self.predict_samples, self.predict_stream)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BnnIrlSettings {
    pub tabular: AscentSettings,
    pub bnn: BnnSettings,
}

#[derive(Debug, Clone)]
pub struct BnnIrlFit {
    pub model: BnnRewardModel,
    pub rewards: Vec<f64>,
    /// Tabular point estimates from the first step.
    pub point_estimates: Vec<f64>,
    pub dataset: Vec<BnnDatum>,
}

/// Tabular MaxEnt point estimates at visited states, generalized by a BNN
/// trained with discounted visitation counts as weights.
pub fn bnn_irl(
    demos: &DemoSet,
    transition: &TransitionModel,
    config: &MdpConfig,
    features: &FeatureMap,
    settings: &BnnIrlSettings,
    stream: RngStream,
) -> Result<BnnIrlFit> {
    if demos.is_empty() {
        return Err(Error::argument("cannot fit a reward without demonstrations"));
    }
    let objective = MaxEntObjective::new(transition, config, demos)?;
    let tabular = fit_tabular(&objective, demos, &settings.tabular)?;
    let counts = visitation_counts(demos, transition.num_states(), Visitation::Discounted)?;
    let dataset: Vec<BnnDatum> = (0..transition.num_states())
        .filter(|&s| tabular.visited[s] && counts[s] > 0.0)
        .map(|s| BnnDatum {
            features: features.row(s).to_vec(),
            target: tabular.model.rewards[s],
            weight: counts[s],
        })
        .collect();
    if dataset.is_empty() {
        return Err(Error::Data("demonstrations never move past the initial state".into()));
    }
    let arch = BnnArchitecture::default_for(features.dim());
    let posterior = fit_bnn(&dataset, &arch, &settings.bnn, stream.child(0))?;
    let model = BnnRewardModel {
        architecture: arch,
        posterior,
        noise_std: settings.bnn.noise_std,
        predict_samples: settings.bnn.predict_samples,
        predict_stream: stream.child(1),
    };
    let rewards = model.rewards(features)?;
    Ok(BnnIrlFit {
        model,
        rewards,
        point_estimates: tabular.model.rewards,
        dataset,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::check_gradient_with_floor;
    use crate::solver::mean_and_stderr;

    fn arch(sizes: &[usize]) -> BnnArchitecture {
        BnnArchitecture::new(sizes.to_vec(), Activation::Tanh).unwrap()
    }

    fn random_posterior(arch: &BnnArchitecture, log_std: f64, seed: u64) -> VariationalPosterior {
        let mut rng = RngStream::new(seed, 0).rng();
        VariationalPosterior::initialize(arch, log_std, 1.0, &mut rng)
    }

    fn random_dataset(dim: usize, n: usize, seed: u64) -> Vec<BnnDatum> {
        let mut rng = RngStream::new(seed, 1).rng();
        (0..n)
            .map(|_| BnnDatum {
                features: (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                target: rng.gen_range(-2.0..2.0),
                weight: rng.gen_range(0.0..5.0),
            })
            .collect()
    }

    #[test]
    fn architecture_validation() {
        assert!(BnnArchitecture::new(vec![4, 1], Activation::Tanh).is_err());
        assert!(BnnArchitecture::new(vec![4, 8, 2], Activation::Tanh).is_err());
        assert!(BnnArchitecture::new(vec![4, 0, 1], Activation::Tanh).is_err());
        assert_eq!(BnnArchitecture::default_for(4).num_params(), 4 * 16 + 16 + 16 * 16 + 16 + 16 + 1);
    }

    #[test]
    fn forward_examples() {
        let a = arch(&[4, 16, 16, 1]);
        let zero = vec![0.0; a.num_params()];
        assert_eq!(forward(&zero, &a, &[1.0, -2.0, 3.0, 0.5]).unwrap(), 0.0);
        assert!(forward(&zero[1..], &a, &[0.0; 4]).is_err());
        assert!(forward(&zero, &a, &[0.0; 3]).is_err());

        // Layout: w1, b1, w2, b2.
        let small = arch(&[1, 1, 1]);
        let (w1, b1, w2, b2) = (0.7, -0.2, 1.9, 0.3);
        for x in [-1.5, 0.0, 0.4, 2.0] {
            let y = forward(&[w1, b1, w2, b2], &small, &[x]).unwrap();
            assert_eq!(y, w2 * (w1 * x + b1).tanh() + b2);
        }
        let w = random_posterior(&a, -5.0, 3).mu;
        let x = [0.1, 0.2, -0.3, 1.0];
        assert_eq!(forward(&w, &a, &x).unwrap(), forward(&w, &a, &x).unwrap());
    }

    #[test]
    fn backward_matches_finite_differences() {
        for act in [Activation::Tanh, Activation::Relu] {
            let a = BnnArchitecture::new(vec![3, 5, 4, 1], act).unwrap();
            let w = random_posterior(&a, -5.0, 11).mu;
            let x = [0.3, -0.8, 0.5];
            let mut acts = Vec::new();
            forward_unchecked(&w, &a, &x, &mut acts);
            let mut g = vec![0.0; w.len()];
            backward(&w, &a, &acts, 1.0, &mut g);
            let err = check_gradient_with_floor(|p| forward(p, &a, &x).unwrap(), |_| g.clone(), &w, 1e-6, 1e-8).unwrap();
            assert!(err < 1e-6, "{act:?}: {err}");
        }
    }

    #[test]
    fn kl_examples() {
        let same = VariationalPosterior {
            mu: vec![0.0; 5],
            rho: vec![2.0f64.ln(); 5],
            prior_std: 2.0,
        };
        assert!(kl_diagonal_gaussians(&same).abs() < 1e-14);
        let one = VariationalPosterior {
            mu: vec![1.0],
            rho: vec![0.0],
            prior_std: 1.0,
        };
        assert!((kl_diagonal_gaussians(&one) - 0.5).abs() < 1e-15);
        let mut rng = RngStream::new(1, 1).rng();
        for _ in 0..1000 {
            let n = rng.gen_range(1..6);
            let post = VariationalPosterior {
                mu: (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect(),
                rho: (0..n).map(|_| rng.gen_range(-4.0..2.0)).collect(),
                prior_std: rng.gen_range(0.1..3.0),
            };
            assert!(kl_diagonal_gaussians(&post) >= 0.0);
        }
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = RngStream::new(2, 2).rng();
        for _ in 0..5 {
            let n = 3;
            let post = VariationalPosterior {
                mu: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                rho: (0..n).map(|_| rng.gen_range(-1.0..0.5)).collect(),
                prior_std: rng.gen_range(0.5..2.0),
            };
            // log q(w) - log p(w) averaged over w ~ q.
            let samples: Vec<f64> = (0..200_000)
                .map(|_| {
                    (0..n)
                        .map(|j| {
                            let e: f64 = rng.sample(StandardNormal);
                            let sd = post.rho[j].exp();
                            let w = post.mu[j] + sd * e;
                            let log_q = -0.5 * e * e - sd.ln();
                            let log_p = -0.5 * (w / post.prior_std).powi(2) - post.prior_std.ln();
                            log_q - log_p
                        })
                        .sum()
                })
                .collect();
            let (mean, se) = mean_and_stderr(&samples);
            let kl = kl_diagonal_gaussians(&post);
            assert!((mean - kl).abs() < 3.0 * se, "{mean} vs {kl} (se {se})");
        }
    }

    #[test]
    fn elbo_identity_and_determinism() {
        let a = arch(&[3, 6, 1]);
        let post = random_posterior(&a, -1.0, 4);
        let data = random_dataset(3, 20, 4);
        let e1 = elbo_estimate(&post, &a, &data, 0.5, 8, &mut RngStream::new(9, 9).rng()).unwrap();
        let e2 = elbo_estimate(&post, &a, &data, 0.5, 8, &mut RngStream::new(9, 9).rng()).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(e1.elbo, e1.expected_log_likelihood - e1.kl_term);
        assert_eq!(e1.num_mc_samples, 8);
        assert!(e1.kl_term >= 0.0);
        assert!(elbo_estimate(&post, &a, &data, 0.0, 8, &mut RngStream::new(9, 9).rng()).is_err());
        assert!(elbo_estimate(&post, &a, &data, 0.5, 0, &mut RngStream::new(9, 9).rng()).is_err());
    }

    #[test]
    fn collapsed_posterior_is_deterministic() {
        let a = arch(&[3, 6, 1]);
        let post = random_posterior(&a, -40.0, 5);
        let mut data = random_dataset(3, 20, 5);
        let mut rng = RngStream::new(1, 2).rng();
        let draws: Vec<f64> = (0..50)
            .map(|_| elbo_estimate(&post, &a, &data, 0.3, 1, &mut rng).unwrap().expected_log_likelihood)
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / draws.len() as f64;
        assert!(var < 1e-12);

        // Perfect fit at zero residual leaves only the normalizer.
        for d in &mut data {
            d.target = forward(&post.mu, &a, &d.features).unwrap();
        }
        let noise = 0.3f64;
        let est = elbo_estimate(&post, &a, &data, noise, 4, &mut rng).unwrap();
        let total_weight: f64 = data.iter().map(|d| d.weight).sum();
        let oracle = total_weight * (1.0 / ((2.0 * std::f64::consts::PI).sqrt() * noise)).ln();
        assert!((est.expected_log_likelihood - oracle).abs() < 1e-9 * oracle.abs());
    }

    #[test]
    fn weights_replicate_data() {
        let a = arch(&[3, 6, 1]);
        let post = random_posterior(&a, -2.0, 6);
        let mut data = random_dataset(3, 6, 6);
        for (i, d) in data.iter_mut().enumerate() {
            d.weight = (i % 3 + 1) as f64;
        }
        let replicated: Vec<BnnDatum> = data
            .iter()
            .flat_map(|d| {
                std::iter::repeat(BnnDatum { weight: 1.0, ..d.clone() }).take(d.weight as usize)
            })
            .collect();
        let w = elbo_estimate(&post, &a, &data, 0.2, 3, &mut RngStream::new(4, 4).rng()).unwrap();
        let r = elbo_estimate(&post, &a, &replicated, 0.2, 3, &mut RngStream::new(4, 4).rng()).unwrap();
        assert!((w.elbo - r.elbo).abs() < 1e-9 * w.elbo.abs());
    }

    #[test]
    fn weight_scaling_matches_noise_rescaling() {
        let data = random_dataset(2, 10, 7);
        let outputs: Vec<f64> = (0..10).map(|i| i as f64 * 0.1 - 0.4).collect();
        let c = 4.0f64;
        let noise = 0.3;
        let scaled: Vec<BnnDatum> = data.iter().map(|d| BnnDatum { weight: c * d.weight, ..d.clone() }).collect();
        let quad = |ds: &[BnnDatum], s: f64| {
            let norm: f64 = ds.iter().map(|d| d.weight).sum::<f64>() * (s * (2.0 * std::f64::consts::PI).sqrt()).ln();
            weighted_log_likelihood(ds, &outputs, s) + norm
        };
        let lhs = quad(&scaled, noise);
        let rhs = quad(&data, noise / c.sqrt());
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs());
    }

    #[test]
    fn deterministic_limit_gradient_matches_weighted_mse() {
        let a = arch(&[4, 8, 8, 1]);
        let data = random_dataset(4, 25, 8);
        let noise = 0.5;
        for seed in 0..4 {
            let post = random_posterior(&a, -30.0, 20 + seed);
            let np = a.num_params();
            let draws = vec![vec![0.0; np]];
            let (_, g_mu, _) = elbo_with_noise(&post, &a, &data, noise, &draws).unwrap();
            // Drop the prior contribution to isolate the likelihood.
            let g_lik: Vec<f64> = g_mu.iter().zip(&post.mu).map(|(g, m)| g + m / (post.prior_std * post.prior_std)).collect();
            let mse = |w: &[f64]| {
                -data
                    .iter()
                    .map(|d| {
                        let r = d.target - forward(w, &a, &d.features).unwrap();
                        d.weight * r * r
                    })
                    .sum::<f64>()
                    / (2.0 * noise * noise)
            };
            let err = check_gradient_with_floor(mse, |_| g_lik.clone(), &post.mu, 1e-6, 1e-6).unwrap();
            assert!(err < 1e-4, "relative error {err}");
        }
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        let a = arch(&[3, 5, 1]);
        let data = random_dataset(3, 12, 9);
        let post = random_posterior(&a, -1.0, 9);
        let np = a.num_params();
        let mut rng = RngStream::new(3, 3).rng();
        let draws: Vec<Vec<f64>> = (0..3).map(|_| (0..np).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let (_, g_mu, g_rho) = elbo_with_noise(&post, &a, &data, 0.4, &draws).unwrap();
        let mut point = post.mu.clone();
        point.extend(&post.rho);
        let grad: Vec<f64> = g_mu.iter().chain(&g_rho).copied().collect();
        let f = |p: &[f64]| {
            let q = VariationalPosterior {
                mu: p[..np].to_vec(),
                rho: p[np..].to_vec(),
                prior_std: post.prior_std,
            };
            elbo_with_noise(&q, &a, &data, 0.4, &draws).unwrap().0.elbo
        };
        let err = check_gradient_with_floor(f, |_| grad.clone(), &point, 1e-6, 1e-6).unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn fit_bnn_regresses_linear_targets() {
        let a = arch(&[2, 16, 16, 1]);
        let mut rng = RngStream::new(10, 10).rng();
        let data: Vec<BnnDatum> = (0..60)
            .map(|_| {
                let x = vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                BnnDatum {
                    target: 1.5 * x[0],
                    features: x,
                    weight: rng.gen_range(0.5..3.0),
                }
            })
            .collect();
        let post = fit_bnn(&data, &a, &BnnSettings::default(), RngStream::new(1, 1)).unwrap();
        let total: f64 = data.iter().map(|d| d.weight).sum();
        let mse: f64 = data
            .iter()
            .map(|d| d.weight * (d.target - forward(&post.mu, &a, &d.features).unwrap()).powi(2))
            .sum::<f64>()
            / total;
        assert!(mse < 1e-2, "weighted mse {mse}");
        let again = fit_bnn(&data, &a, &BnnSettings::default(), RngStream::new(1, 1)).unwrap();
        assert_eq!(post, again);
        assert!(fit_bnn(&[], &a, &BnnSettings::default(), RngStream::new(1, 1)).is_err());
    }

    #[test]
    fn fit_bnn_captures_exponential_reward_shape() {
        use crate::env::{reward_vector, MdpConfig, RewardSpec};
        let cfg = MdpConfig::default().with_reward(RewardSpec::exponential());
        let phi = FeatureMap::default_for(&cfg);
        let truth = reward_vector(&cfg);
        let data: Vec<BnnDatum> = (0..cfg.num_grid_states())
            .map(|s| BnnDatum {
                features: phi.row(s).to_vec(),
                target: truth[s],
                weight: 1.0,
            })
            .collect();
        let a = BnnArchitecture::default_for(phi.dim());
        let post = fit_bnn(&data, &a, &BnnSettings::default(), RngStream::new(2, 2)).unwrap();
        let pred: Vec<f64> = data.iter().map(|d| forward(&post.mu, &a, &d.features).unwrap()).collect();
        let targets: Vec<f64> = data.iter().map(|d| d.target).collect();
        let corr = correlation(&pred, &targets);
        assert!(corr > 0.99, "correlation {corr}");
    }

    #[test]
    fn pipeline_tracks_point_estimates_at_visited_states() {
        use crate::demos::generate_demos;
        use crate::env::{reward_vector, MdpConfig, RewardSpec};
        use crate::solver::soft_value_iteration;
        let cfg = MdpConfig::default().with_reward(RewardSpec::exponential());
        let model = TransitionModel::build(&cfg).unwrap();
        let expert = soft_value_iteration(&model, &reward_vector(&cfg), &cfg).unwrap().into_policy();
        let demos = generate_demos(&cfg, &model, &expert, 16384, RngStream::new(4, 4)).unwrap();
        let phi = FeatureMap::default_for(&cfg);
        let fit = bnn_irl(&demos, &model, &cfg, &phi, &BnnIrlSettings::default(), RngStream::new(4, 5)).unwrap();
        let counts = visitation_counts(&demos, model.num_states(), Visitation::Discounted).unwrap();
        let visited: Vec<usize> = (0..cfg.num_grid_states()).filter(|&s| counts[s] > 0.0).collect();
        assert_eq!(visited.len(), fit.dataset.len());
        let w: Vec<f64> = visited.iter().map(|&s| counts[s]).collect();
        let pred: Vec<f64> = visited.iter().map(|&s| fit.rewards[s]).collect();
        let target: Vec<f64> = visited.iter().map(|&s| fit.point_estimates[s]).collect();
        let corr = weighted_correlation(&pred, &target, &w);
        assert!(corr > 0.9, "weighted correlation {corr}");
        assert_eq!(fit.rewards[176], 0.0);
    }

    fn weighted_correlation(x: &[f64], y: &[f64], w: &[f64]) -> f64 {
        let tw: f64 = w.iter().sum();
        let mx = x.iter().zip(w).map(|(a, k)| a * k).sum::<f64>() / tw;
        let my = y.iter().zip(w).map(|(b, k)| b * k).sum::<f64>() / tw;
        let cov: f64 = x.iter().zip(y).zip(w).map(|((a, b), k)| k * (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().zip(w).map(|(a, k)| k * (a - mx).powi(2)).sum();
        let vy: f64 = y.iter().zip(w).map(|(b, k)| k * (b - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    fn correlation(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn prediction_examples() {
        use crate::env::MdpConfig;
        let cfg = MdpConfig::default();
        let phi = FeatureMap::default_for(&cfg);
        let a = BnnArchitecture::default_for(phi.dim());
        let collapsed = random_posterior(&a, -60.0, 12);
        let mean = predict_reward_mean(&collapsed, &a, &phi, 5, RngStream::new(0, 0)).unwrap();
        for s in 0..phi.num_states() - 1 {
            assert!((mean[s] - forward(&collapsed.mu, &a, phi.row(s)).unwrap()).abs() < 1e-12);
        }
        assert_eq!(mean[176], 0.0);

        let wide = random_posterior(&a, -1.0, 12);
        let p1 = predict_reward_mean(&wide, &a, &phi, 16, RngStream::new(3, 3)).unwrap();
        let p2 = predict_reward_mean(&wide, &a, &phi, 16, RngStream::new(3, 3)).unwrap();
        assert_eq!(p1, p2);

        // The spread of repeated S-sample means shrinks like 1/sqrt(S).
        let spread = |samples: usize| {
            let vals: Vec<f64> = (0..400)
                .map(|i| predict_reward_mean(&wide, &a, &phi, samples, RngStream::new(100 + i, 0)).unwrap()[7])
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt()
        };
        let ratio = spread(4) / spread(16);
        assert!((ratio - 2.0).abs() < 0.4, "ratio {ratio}");
    }
}
