//! Small numerical toolkit shared by the solvers and the IRL fitters.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Numerically stable `log(sum(exp(v)))`.
///
/// Returns `-inf` when every entry is `-inf`.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::argument("log_sum_exp of an empty slice"));
    }
    Ok(log_sum_exp_unchecked(values))
}

/// `log_sum_exp` for callers that already guarantee a nonempty slice.
#[inline]
pub(crate) fn log_sum_exp_unchecked(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Numerically stable logistic function.
#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Relative diagonal jitter tried first when a factorization fails.
pub const JITTER_START: f64 = 1e-8;
/// Largest relative diagonal jitter before giving up.
pub const JITTER_MAX: f64 = 1e-4;

/// Cholesky factor of a symmetric positive definite matrix, plus the jitter
/// that was actually needed to obtain it.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    lower: DMatrix<f64>,
    jitter: f64,
}

impl CholeskyFactor {
    /// Factorizes `matrix + jitter * I`.
    ///
    /// On failure the jitter escalates by factors of ten starting from
    /// `max(jitter, 1e-8 * mean_diag)` until it exceeds `1e-4 * mean_diag`.
    pub fn new(matrix: &DMatrix<f64>, jitter: f64) -> Result<Self> {
        let n = matrix.nrows();
        if n != matrix.ncols() {
            return Err(Error::argument(format!(
                "cholesky of non-square {}x{} matrix",
                n,
                matrix.ncols()
            )));
        }
        if !(jitter >= 0.0) {
            return Err(Error::argument("jitter must be non-negative"));
        }
        for i in 0..n {
            for j in 0..i {
                let (a, b) = (matrix[(i, j)], matrix[(j, i)]);
                if (a - b).abs() > 1e-10 * (1.0 + a.abs().max(b.abs())) {
                    return Err(Error::argument(format!(
                        "matrix is not symmetric at ({i}, {j}): {a} vs {b}"
                    )));
                }
            }
        }
        let mean_diag = if n == 0 {
            1.0
        } else {
            (matrix.diagonal().sum() / n as f64).abs().max(f64::MIN_POSITIVE)
        };
        let max_jitter = JITTER_MAX * mean_diag;
        let mut current = jitter;
        loop {
            let mut shifted = matrix.clone();
            for i in 0..n {
                shifted[(i, i)] += current;
            }
            if let Some(chol) = shifted.cholesky() {
                return Ok(Self {
                    lower: chol.unpack(),
                    jitter: current,
                });
            }
            current = (current * 10.0).max(JITTER_START * mean_diag);
            if current > max_jitter * (1.0 + 1e-12) {
                return Err(Error::numerical(format!(
                    "matrix of size {n} is not positive definite even with jitter {max_jitter:e}"
                )));
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let y = self
            .lower
            .solve_lower_triangular(rhs)
            .expect("cholesky factor has a positive diagonal");
        self.lower
            .tr_solve_lower_triangular(&y)
            .expect("cholesky factor has a positive diagonal")
    }

    pub fn solve_vector(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let y = self
            .lower
            .solve_lower_triangular(rhs)
            .expect("cholesky factor has a positive diagonal");
        self.lower
            .tr_solve_lower_triangular(&y)
            .expect("cholesky factor has a positive diagonal")
    }

    /// `log det(matrix + jitter * I)`.
    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Explicit inverse, for the few places that need every entry.
    pub fn inverse(&self) -> DMatrix<f64> {
        self.solve(&DMatrix::identity(self.dim(), self.dim()))
    }
}

/// Solves `(matrix + jitter * I) X = rhs` with the escalating jitter schedule
/// of [`CholeskyFactor::new`].
pub fn cholesky_solve(matrix: &DMatrix<f64>, rhs: &DMatrix<f64>, jitter: f64) -> Result<DMatrix<f64>> {
    if rhs.nrows() != matrix.nrows() {
        return Err(Error::argument(format!(
            "right-hand side has {} rows, matrix has {}",
            rhs.nrows(),
            matrix.nrows()
        )));
    }
    Ok(CholeskyFactor::new(matrix, jitter)?.solve(rhs))
}

/// Moment estimates and hyperparameters of the Adam optimizer.
///
/// [`AdamState::step`] performs a descent step; ascent callers pass the
/// negated gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step_count: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(dim: usize, learning_rate: f64) -> Self {
        Self {
            step_count: 0,
            first_moment: vec![0.0; dim],
            second_moment: vec![0.0; dim],
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// Advances the moments with `gradient` and returns the parameter update
    /// (to be added to the parameters).
    pub fn update(&mut self, gradient: &[f64]) -> Result<Vec<f64>> {
        if gradient.len() != self.first_moment.len() {
            return Err(Error::argument(format!(
                "gradient has length {}, optimizer tracks {}",
                gradient.len(),
                self.first_moment.len()
            )));
        }
        self.step_count += 1;
        let bias1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bias2 = 1.0 - self.beta2.powi(self.step_count as i32);
        let mut delta = Vec::with_capacity(gradient.len());
        for ((m, v), &g) in self
            .first_moment
            .iter_mut()
            .zip(self.second_moment.iter_mut())
            .zip(gradient)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            delta.push(-self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon));
        }
        Ok(delta)
    }

    pub fn step(&mut self, params: &mut [f64], gradient: &[f64]) -> Result<()> {
        if params.len() != gradient.len() {
            return Err(Error::argument(format!(
                "params have length {}, gradient {}",
                params.len(),
                gradient.len()
            )));
        }
        let delta = self.update(gradient)?;
        for (p, d) in params.iter_mut().zip(delta) {
            *p += d;
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step(state: &AdamState, params: &[f64], gradient: &[f64]) -> Result<(AdamState, Vec<f64>)> {
    let mut next = state.clone();
    let mut out = params.to_vec();
    next.step(&mut out, gradient)?;
    Ok((next, out))
}

/// Below this magnitude a gradient coordinate is compared absolutely.
pub const GRADIENT_ABS_FLOOR: f64 = 1e-10;

/// Maximum per-coordinate relative error between `grad_f(point)` and central
/// finite differences of `f`.
pub fn check_gradient<F, G>(f: F, grad_f: G, point: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
    G: FnOnce(&[f64]) -> Vec<f64>,
{
    check_gradient_with_floor(f, grad_f, point, step, GRADIENT_ABS_FLOOR)
}

/// [`check_gradient`] with a caller-chosen denominator floor: each coordinate's
/// error is `|a - fd| / max(|a|, |fd|, floor)`.
pub fn check_gradient_with_floor<F, G>(
    mut f: F,
    grad_f: G,
    point: &[f64],
    step: f64,
    floor: f64,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
    G: FnOnce(&[f64]) -> Vec<f64>,
{
    if !(step > 0.0) {
        return Err(Error::argument("finite-difference step must be positive"));
    }
    let analytic = grad_f(point);
    if analytic.len() != point.len() {
        return Err(Error::argument("gradient length differs from point length"));
    }
    let mut x = point.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        x[i] = point[i] + step;
        let up = f(&x);
        x[i] = point[i] - step;
        let down = f(&x);
        x[i] = point[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::numerical(format!(
                "objective is not finite around coordinate {i}"
            )));
        }
        let fd = (up - down) / (2.0 * step);
        let a = analytic[i];
        let scale = a.abs().max(fd.abs());
        let err = if scale < floor {
            (a - fd).abs()
        } else {
            (a - fd).abs() / scale
        };
        worst = worst.max(err);
    }
    Ok(worst)
}

/// A reproducible random stream identified by `(master_seed, stream_id)`.
///
/// Streams are ChaCha8 generators keyed by the master seed and positioned on
/// the ChaCha stream `stream_id`, so distinct ids never share a keystream and
/// child streams can be derived without consuming draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub master_seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        Self {
            master_seed,
            stream_id,
        }
    }

    /// Stream whose id is a stable hash of `label`.
    pub fn labeled(master_seed: u64, label: &str) -> Self {
        Self::new(master_seed, stable_hash(label.as_bytes()))
    }

    /// Derives the `index`-th child stream.
    pub fn child(&self, index: u64) -> Self {
        Self::new(
            self.master_seed,
            splitmix64(self.stream_id ^ splitmix64(index.wrapping_add(0x9E37_79B9_7F4A_7C15))),
        )
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// First eight bytes of the SHA-256 digest, as a little-endian integer.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}
