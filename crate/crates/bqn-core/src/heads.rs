//! Analytic alternative-ELBO output heads.
//!
//! Classification: a softmax layer with learnable scale s whose expected
//! log-likelihood is lower-bounded in closed form from the pre-activation
//! means and variances; prediction uses a second-order Taylor expansion of
//! the softmax around the mean. Regression: a Gaussian layer with continuous
//! weights w and noise variance s whose expected log-likelihood is exact
//! under the factorized hidden distribution.
//!
//! Both scales are optimized in log-space to preserve positivity.

use crate::categorical;
use crate::error::{BqnError, Result};
use crate::moments::MomentSummary;

/// Softmax classification head: scale s (stored as log s) and class count.
#[derive(Debug, Clone)]
pub struct SoftmaxHead {
    pub log_s: f64,
    pub n_classes: usize,
}

/// Gradients of the classification bound.
#[derive(Debug, Clone)]
pub struct SoftmaxGrads {
    pub grad_mu: Vec<f64>,
    pub grad_nu: Vec<f64>,
    pub grad_s: f64,
}

impl SoftmaxHead {
    pub fn new(n_classes: usize) -> Result<Self> {
        if n_classes < 2 {
            return Err(BqnError::Argument("need at least 2 classes".into()));
        }
        Ok(Self { log_s: 0.0, n_classes })
    }

    pub fn scale(&self) -> f64 {
        self.log_s.exp()
    }

    fn check(&self, moments: &MomentSummary, label: usize) -> Result<()> {
        if moments.len() != self.n_classes {
            return Err(BqnError::Wiring(format!(
                "head expects {} logits, got {}",
                self.n_classes,
                moments.len()
            )));
        }
        if label >= self.n_classes {
            return Err(BqnError::Argument(format!(
                "label {} out of range for {} classes",
                label, self.n_classes
            )));
        }
        Ok(())
    }

    /// Analytic lower bound of the expected log-likelihood:
    /// mu_c/s - log sum_k exp(mu_k/s + nu_k/2s^2), in nats. Equals the exact
    /// log-softmax when nu = 0.
    pub fn bound(&self, moments: &MomentSummary, label: usize) -> Result<f64> {
        self.check(moments, label)?;
        let s = self.scale();
        let z: Vec<f64> = moments
            .mu
            .iter()
            .zip(&moments.nu)
            .map(|(&m, &v)| m / s + v / (2.0 * s * s))
            .collect();
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        Ok(moments.mu[label] / s - lse)
    }

    /// Closed-form gradients of the bound w.r.t. the pre-activation moments
    /// and the scale.
    pub fn bound_grads(&self, moments: &MomentSummary, label: usize) -> Result<SoftmaxGrads> {
        self.check(moments, label)?;
        let s = self.scale();
        let z: Vec<f64> = moments
            .mu
            .iter()
            .zip(&moments.nu)
            .map(|(&m, &v)| m / s + v / (2.0 * s * s))
            .collect();
        let mut soft = vec![0.0; z.len()];
        categorical::softmax_row(&z, &mut soft);

        let grad_mu: Vec<f64> = soft
            .iter()
            .enumerate()
            .map(|(k, &l)| -(l - if k == label { 1.0 } else { 0.0 }) / s)
            .collect();
        let grad_nu: Vec<f64> = soft.iter().map(|&l| -l / (2.0 * s * s)).collect();
        let grad_s = -moments.mu[label] / (s * s)
            + soft
                .iter()
                .zip(moments.mu.iter().zip(&moments.nu))
                .map(|(&l, (&m, &v))| l * (m / (s * s) + v / (s * s * s)))
                .sum::<f64>();
        Ok(SoftmaxGrads { grad_mu, grad_nu, grad_s })
    }

    /// Taylor-expansion prediction of the class probabilities. Order 1 is the
    /// softmax of the means; order 2 adds the diagonal-Hessian variance
    /// correction (which preserves the simplex to second order), then clips
    /// negatives and renormalizes.
    pub fn predict(&self, moments: &MomentSummary, order: u8) -> Vec<f64> {
        let s = self.scale();
        let z: Vec<f64> = moments.mu.iter().map(|&m| m / s).collect();
        let mut l = vec![0.0; z.len()];
        categorical::softmax_row(&z, &mut l);
        if order <= 1 {
            return l;
        }
        // sum_k (2 l_k^2 - l_k) nu_k, shared across classes
        let t: f64 = l
            .iter()
            .zip(&moments.nu)
            .map(|(&lk, &vk)| (2.0 * lk * lk - lk) * vk)
            .sum();
        let mut out: Vec<f64> = l
            .iter()
            .zip(&moments.nu)
            .map(|(&lc, &vc)| {
                (lc + lc / (2.0 * s * s) * ((1.0 - 2.0 * lc) * vc + t)).max(0.0)
            })
            .collect();
        let sum: f64 = out.iter().sum();
        for p in out.iter_mut() {
            *p /= sum;
        }
        out
    }
}

/// Gaussian regression head: continuous weights w and noise variance s
/// (stored as log s).
#[derive(Debug, Clone)]
pub struct GaussianHead {
    pub weights: Vec<f64>,
    pub log_s: f64,
}

/// Gradients of the regression bound.
#[derive(Debug, Clone)]
pub struct GaussianGrads {
    pub grad_mu: Vec<f64>,
    pub grad_nu: Vec<f64>,
    pub grad_w: Vec<f64>,
    pub grad_s: f64,
}

impl GaussianHead {
    pub fn new(weights: Vec<f64>) -> Self {
        Self { weights, log_s: 0.0 }
    }

    pub fn scale(&self) -> f64 {
        self.log_s.exp()
    }

    fn check(&self, hidden: &MomentSummary) -> Result<()> {
        if hidden.len() != self.weights.len() {
            return Err(BqnError::Wiring(format!(
                "head expects {} hidden units, got {}",
                self.weights.len(),
                hidden.len()
            )));
        }
        Ok(())
    }

    /// Exact expected log-likelihood under the factorized hidden
    /// distribution (no further bounding):
    /// -[(y - w^T mu)^2 + (w^o2)^T nu]/2s - log(2 pi s)/2.
    pub fn bound(&self, hidden: &MomentSummary, y: f64) -> Result<f64> {
        self.check(hidden)?;
        let s = self.scale();
        let resid = y - dot(&self.weights, &hidden.mu);
        let wsq_nu: f64 = self
            .weights
            .iter()
            .zip(&hidden.nu)
            .map(|(&w, &v)| w * w * v)
            .sum();
        Ok(-(resid * resid + wsq_nu) / (2.0 * s)
            - (2.0 * std::f64::consts::PI * s).ln() / 2.0)
    }

    pub fn bound_grads(&self, hidden: &MomentSummary, y: f64) -> Result<GaussianGrads> {
        self.check(hidden)?;
        let s = self.scale();
        let resid = y - dot(&self.weights, &hidden.mu);
        let wsq_nu: f64 = self
            .weights
            .iter()
            .zip(&hidden.nu)
            .map(|(&w, &v)| w * w * v)
            .sum();
        let grad_mu: Vec<f64> = self.weights.iter().map(|&w| resid * w / s).collect();
        let grad_nu: Vec<f64> = self.weights.iter().map(|&w| -w * w / (2.0 * s)).collect();
        let grad_w: Vec<f64> = self
            .weights
            .iter()
            .zip(hidden.mu.iter().zip(&hidden.nu))
            .map(|(&w, (&m, &v))| (resid * m - w * v) / s)
            .collect();
        let grad_s = -1.0 / (2.0 * s) + (resid * resid + wsq_nu) / (2.0 * s * s);
        Ok(GaussianGrads { grad_mu, grad_nu, grad_w, grad_s })
    }

    /// Central moments of the predictive distribution y = w^T h + eps,
    /// eps ~ N(0, s): mean, variance (always >= s), and normalized
    /// skewness/kurtosis composed from the hidden units' higher moments.
    pub fn predict(&self, hidden: &MomentSummary) -> Result<MomentSummary> {
        self.check(hidden)?;
        let gamma = hidden
            .gamma
            .as_ref()
            .ok_or_else(|| BqnError::Argument("prediction needs skewness".into()))?;
        let kappa = hidden
            .kappa
            .as_ref()
            .ok_or_else(|| BqnError::Argument("prediction needs kurtosis".into()))?;
        let s = self.scale();
        let mean = dot(&self.weights, &hidden.mu);
        let var: f64 = self
            .weights
            .iter()
            .zip(&hidden.nu)
            .map(|(&w, &v)| w * w * v)
            .sum::<f64>()
            + s;
        // third central moment: sum of the summands' third moments
        let m3: f64 = self
            .weights
            .iter()
            .zip(gamma.iter().zip(&hidden.nu))
            .map(|(&w, (&g, &v))| w * w * w * g * v.powf(1.5))
            .sum();
        // excess kurtosis composes additively in the fourth cumulant
        let c4: f64 = self
            .weights
            .iter()
            .zip(kappa.iter().zip(&hidden.nu))
            .map(|(&w, (&k, &v))| w.powi(4) * (k - 3.0) * v * v)
            .sum();
        let skew = m3 / var.powf(1.5);
        let kurt = 3.0 + c4 / (var * var);
        Ok(MomentSummary::with_higher(
            vec![mean],
            vec![var],
            vec![skew],
            vec![kurt],
        ))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}
