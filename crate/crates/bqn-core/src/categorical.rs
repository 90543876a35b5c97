//! Factorized categorical distributions over a quantization grid.
//!
//! Parameters are stored in log-space (one logit row per variable) and
//! normalized with max-subtraction whenever probabilities are needed. All
//! entropy/log-likelihood quantities are in nats.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{BqnError, Result};
use crate::grid::QuantizationGrid;
use crate::moments::MomentSummary;

/// Probability floor applied only where a log of a probability is taken,
/// never inside normalization.
pub const PROB_FLOOR: f64 = 1e-30;

/// Stabilized softmax of one logit row into `out`.
pub fn softmax_row(logits: &[f64], out: &mut [f64]) {
    debug_assert_eq!(logits.len(), out.len());
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        let e = (l - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    debug_assert!(
        (out.iter().sum::<f64>() - 1.0).abs() < 1e-12,
        "softmax row must sum to 1"
    );
}

/// Mean and variance of one probability row over the grid values.
pub fn row_moments(probs: &[f64], grid: &[f64]) -> (f64, f64) {
    let mut m = 0.0;
    let mut s = 0.0;
    for (&p, &q) in probs.iter().zip(grid) {
        m += p * q;
        s += p * q * q;
    }
    (m, (s - m * m).max(0.0))
}

/// Entropy of one probability row in nats, with the 0 * ln 0 = 0 convention.
pub fn entropy_row(probs: &[f64]) -> f64 {
    probs
        .iter()
        .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
        .sum()
}

/// Vector-Jacobian product through the softmax: maps a gradient w.r.t.
/// probabilities to a gradient w.r.t. the logits of the same row.
pub fn softmax_vjp_row(probs: &[f64], grad_probs: &[f64], grad_logits: &mut [f64]) {
    let dot: f64 = probs.iter().zip(grad_probs).map(|(&p, &g)| p * g).sum();
    for ((gl, &p), &g) in grad_logits.iter_mut().zip(probs).zip(grad_probs) {
        *gl = p * (g - dot);
    }
}

/// Gradient of the row entropy w.r.t. the row logits:
/// dH/dphi_d = -p_d (ln p_d + H).
pub fn entropy_grad_row(probs: &[f64], grad_logits: &mut [f64]) {
    let h = entropy_row(probs);
    for (gl, &p) in grad_logits.iter_mut().zip(probs) {
        let lp = if p > PROB_FLOOR { p.ln() } else { PROB_FLOOR.ln() };
        *gl = -p * (lp + h);
    }
}

/// A batch of independent categorical variables over a shared grid.
/// Row `i` of `logits` holds the log-space parameters of variable `i`.
#[derive(Debug, Clone)]
pub struct CategoricalVector {
    logits: Vec<f64>,
    n_vars: usize,
    grid: Arc<QuantizationGrid>,
}

impl CategoricalVector {
    pub fn new(logits: Vec<f64>, grid: Arc<QuantizationGrid>) -> Result<Self> {
        let d = grid.len();
        if logits.is_empty() || logits.len() % d != 0 {
            return Err(BqnError::InvalidParameter(format!(
                "logits length {} is not a multiple of grid size {}",
                logits.len(),
                d
            )));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(BqnError::InvalidParameter("non-finite logit".into()));
        }
        let n_vars = logits.len() / d;
        Ok(Self { logits, n_vars, grid })
    }

    /// Builds the vector from per-variable probability rows (taking logs).
    pub fn from_probabilities(probs: &[f64], grid: Arc<QuantizationGrid>) -> Result<Self> {
        let logits = probs.iter().map(|&p| p.max(PROB_FLOOR).ln()).collect();
        Self::new(logits, grid)
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn d(&self) -> usize {
        self.grid.len()
    }

    pub fn grid(&self) -> &Arc<QuantizationGrid> {
        &self.grid
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Row-normalized probabilities, n_vars x D row-major.
    pub fn probabilities(&self) -> Vec<f64> {
        let d = self.d();
        let mut out = vec![0.0; self.logits.len()];
        for i in 0..self.n_vars {
            softmax_row(&self.logits[i * d..(i + 1) * d], &mut out[i * d..(i + 1) * d]);
        }
        out
    }

    /// Per-variable mean and variance.
    pub fn moments(&self) -> MomentSummary {
        let probs = self.probabilities();
        let d = self.d();
        let grid = self.grid.values();
        let mut mu = Vec::with_capacity(self.n_vars);
        let mut nu = Vec::with_capacity(self.n_vars);
        for i in 0..self.n_vars {
            let (m, v) = row_moments(&probs[i * d..(i + 1) * d], grid);
            mu.push(m);
            nu.push(v);
        }
        MomentSummary::new(mu, nu)
    }

    /// Mean, variance, and normalized skewness/kurtosis per variable.
    /// Degenerate variables (variance ~ 0) report gamma = 0, kappa = 3 so the
    /// regression head's correction terms vanish.
    pub fn moments_with_higher(&self) -> MomentSummary {
        let probs = self.probabilities();
        let d = self.d();
        let grid = self.grid.values();
        let n = self.n_vars;
        let (mut mu, mut nu) = (Vec::with_capacity(n), Vec::with_capacity(n));
        let (mut gamma, mut kappa) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for i in 0..n {
            let row = &probs[i * d..(i + 1) * d];
            let (m, v) = row_moments(row, grid);
            let mut c3 = 0.0;
            let mut c4 = 0.0;
            for (&p, &q) in row.iter().zip(grid) {
                let dq = q - m;
                c3 += p * dq * dq * dq;
                c4 += p * dq * dq * dq * dq;
            }
            mu.push(m);
            nu.push(v);
            if v > 1e-300 {
                gamma.push(c3 / v.powf(1.5));
                kappa.push(c4 / (v * v));
            } else {
                gamma.push(0.0);
                kappa.push(3.0);
            }
        }
        MomentSummary::with_higher(mu, nu, gamma, kappa)
    }

    /// Total entropy (nats) summed over variables.
    pub fn entropy(&self) -> f64 {
        let probs = self.probabilities();
        let d = self.d();
        (0..self.n_vars)
            .map(|i| entropy_row(&probs[i * d..(i + 1) * d]))
            .sum()
    }

    /// One independent realization per variable by inverse-CDF, returned as
    /// grid values. Reproducible for a given RNG state.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let probs = self.probabilities();
        let d = self.d();
        let grid = self.grid.values();
        let mut out = Vec::with_capacity(self.n_vars);
        for i in 0..self.n_vars {
            let row = &probs[i * d..(i + 1) * d];
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut picked = d - 1;
            for (k, &p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    picked = k;
                    break;
                }
            }
            out.push(grid[picked]);
        }
        out
    }

    /// Seeded convenience wrapper around [`CategoricalVector::sample`].
    pub fn sample_seeded(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample(&mut rng)
    }

    /// Per-variable argmax of the probabilities, ties broken toward the
    /// lowest grid index.
    pub fn map_select(&self) -> Vec<f64> {
        let probs = self.probabilities();
        let d = self.d();
        let grid = self.grid.values();
        (0..self.n_vars)
            .map(|i| {
                let row = &probs[i * d..(i + 1) * d];
                let mut best = 0;
                for (k, &p) in row.iter().enumerate().skip(1) {
                    if p > row[best] {
                        best = k;
                    }
                }
                grid[best]
            })
            .collect()
    }
}
