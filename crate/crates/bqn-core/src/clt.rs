//! Large fan-in linear layers (fully connected, convolutional) via the
//! Lyapunov CLT: the pre-activation of each output unit is the sum of many
//! independent products theta_ji * h_i, treated as Gaussian with exactly
//! computed mean and variance. The moment formulas are exact; only the
//! Gaussian shape is an approximation.

use std::sync::Arc;

use crate::categorical::{self, CategoricalVector};
use crate::error::{BqnError, Result};
use crate::grid::QuantizationGrid;
use crate::moments::MomentSummary;

/// Variance floor inside square roots and the nu^{3/2} denominator; units at
/// or below the floor are deterministic and receive zero variance-gradient.
pub const EPS_VAR: f64 = 1e-12;

/// Bernoulli clip so downstream logs stay finite.
pub const EPS_P: f64 = 1e-7;

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal density.
pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Geometry of a 2-d convolution with square kernel, no padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2dSpec {
    pub fn out_h(&self) -> usize {
        (self.in_h - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w - self.kernel) / self.stride + 1
    }
}

/// The connectivity set of a linear layer: which inputs feed each output and
/// through which (possibly index-shared) weight.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Connectivity {
    Dense { inputs: usize, outputs: usize },
    Conv2d(Conv2dSpec),
}

impl Connectivity {
    pub fn n_inputs(&self) -> usize {
        match self {
            Connectivity::Dense { inputs, .. } => *inputs,
            Connectivity::Conv2d(c) => c.in_channels * c.in_h * c.in_w,
        }
    }

    pub fn n_outputs(&self) -> usize {
        match self {
            Connectivity::Dense { outputs, .. } => *outputs,
            Connectivity::Conv2d(c) => c.out_channels * c.out_h() * c.out_w(),
        }
    }

    /// Number of distinct weight indices (shared across conv positions).
    pub fn n_weights(&self) -> usize {
        match self {
            Connectivity::Dense { inputs, outputs } => inputs * outputs,
            Connectivity::Conv2d(c) => c.out_channels * c.in_channels * c.kernel * c.kernel,
        }
    }

    /// Fan-in of each output unit.
    pub fn fan_in(&self) -> usize {
        match self {
            Connectivity::Dense { inputs, .. } => *inputs,
            Connectivity::Conv2d(c) => c.in_channels * c.kernel * c.kernel,
        }
    }

    /// Visits (input index, weight index) for every edge into output `j`.
    pub fn for_each_edge(&self, j: usize, mut f: impl FnMut(usize, usize)) {
        match self {
            Connectivity::Dense { inputs, .. } => {
                for i in 0..*inputs {
                    f(i, j * inputs + i);
                }
            }
            Connectivity::Conv2d(c) => {
                let (oh, ow) = (c.out_h(), c.out_w());
                let oc = j / (oh * ow);
                let oy = (j / ow) % oh;
                let ox = j % ow;
                for ic in 0..c.in_channels {
                    for ky in 0..c.kernel {
                        for kx in 0..c.kernel {
                            let iy = oy * c.stride + ky;
                            let ix = ox * c.stride + kx;
                            let i = ic * c.in_h * c.in_w + iy * c.in_w + ix;
                            let w = ((oc * c.in_channels + ic) * c.kernel + ky) * c.kernel + kx;
                            f(i, w);
                        }
                    }
                }
            }
        }
    }
}

/// Categorical posterior over the weights of one linear layer, with the
/// derived mean/variance always recomputed from the logits (the logits are
/// the single source of truth; no bias terms).
#[derive(Debug, Clone)]
pub struct LinearPosterior {
    pub connectivity: Connectivity,
    pub weight_logits: Vec<f64>,
    pub grid: Arc<QuantizationGrid>,
}

impl LinearPosterior {
    pub fn new(
        connectivity: Connectivity,
        weight_logits: Vec<f64>,
        grid: Arc<QuantizationGrid>,
    ) -> Result<Self> {
        let expect = connectivity.n_weights() * grid.len();
        if weight_logits.len() != expect {
            return Err(BqnError::Wiring(format!(
                "expected {} logits, got {}",
                expect,
                weight_logits.len()
            )));
        }
        Ok(Self { connectivity, weight_logits, grid })
    }

    /// Per-weight mean and variance from the current logits.
    pub fn weight_mean_var(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.grid.len();
        let n = self.connectivity.n_weights();
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        let mut probs = vec![0.0; d];
        for w in 0..n {
            categorical::softmax_row(&self.weight_logits[w * d..(w + 1) * d], &mut probs);
            let (mw, vw) = categorical::row_moments(&probs, self.grid.values());
            m.push(mw);
            v.push(vw);
        }
        (m, v)
    }

    /// Exact first and second moments of the pre-activations.
    pub fn clt_forward(&self, input: &MomentSummary) -> Result<MomentSummary> {
        let (m, v) = self.weight_mean_var();
        clt_forward_raw(&self.connectivity, &m, &v, input)
    }

    /// Backward pass through the moment formulas, with conv weight sharing
    /// already accumulated into per-weight-index gradients.
    pub fn clt_backward(
        &self,
        input: &MomentSummary,
        grad_mu_tilde: &[f64],
        grad_nu_tilde: &[f64],
    ) -> Result<CltBackward> {
        let (m, v) = self.weight_mean_var();
        clt_backward_raw(&self.connectivity, &m, &v, input, grad_mu_tilde, grad_nu_tilde)
    }

    /// Chains per-weight mean/variance gradients through the categorical
    /// moments and the softmax Jacobian to logit gradients. Shared conv
    /// weights arrive here already summed over positions.
    pub fn logits_gradient(&self, grad_m: &[f64], grad_v: &[f64]) -> Vec<f64> {
        let d = self.grid.len();
        let n = self.connectivity.n_weights();
        debug_assert_eq!(grad_m.len(), n);
        debug_assert_eq!(grad_v.len(), n);
        let mut grad_logits = vec![0.0; n * d];
        let mut probs = vec![0.0; d];
        let mut grad_q = vec![0.0; d];
        for w in 0..n {
            categorical::softmax_row(&self.weight_logits[w * d..(w + 1) * d], &mut probs);
            let (mw, _) = categorical::row_moments(&probs, self.grid.values());
            for (dd, gq) in grad_q.iter_mut().enumerate() {
                let q = self.grid.value(dd);
                // d m / d Q(d) = q; d v / d Q(d) = (q - m)^2 up to a shift
                // the softmax Jacobian annihilates
                *gq = q * grad_m[w] + (q - mw) * (q - mw) * grad_v[w];
            }
            categorical::softmax_vjp_row(&probs, &grad_q, &mut grad_logits[w * d..(w + 1) * d]);
        }
        grad_logits
    }
}

/// Gradients returned by the CLT backward pass.
#[derive(Debug, Clone)]
pub struct CltBackward {
    /// d L / d m_w, accumulated over shared positions.
    pub grad_m: Vec<f64>,
    /// d L / d v_w, accumulated over shared positions.
    pub grad_v: Vec<f64>,
    /// d L / d mu_i.
    pub grad_mu: Vec<f64>,
    /// d L / d nu_i.
    pub grad_nu: Vec<f64>,
}

/// mu~_j = sum_i m_ji mu_i;  nu~_j = sum_i (m_ji^2 nu_i + v_ji mu_i^2 + v_ji nu_i).
/// For dense connectivity these are the matrix forms mu~ = M mu and
/// nu~ = (M^o2) nu + V (mu^o2 + nu).
pub fn clt_forward_raw(
    conn: &Connectivity,
    m: &[f64],
    v: &[f64],
    input: &MomentSummary,
) -> Result<MomentSummary> {
    if input.len() != conn.n_inputs() {
        return Err(BqnError::Wiring(format!(
            "layer expects {} inputs, got {}",
            conn.n_inputs(),
            input.len()
        )));
    }
    let n_out = conn.n_outputs();
    let mut mu_t = vec![0.0; n_out];
    let mut nu_t = vec![0.0; n_out];
    for j in 0..n_out {
        let (mut s_mu, mut s_nu) = (0.0, 0.0);
        conn.for_each_edge(j, |i, w| {
            let (mi, ni) = (input.mu[i], input.nu[i]);
            s_mu += m[w] * mi;
            s_nu += m[w] * m[w] * ni + v[w] * (mi * mi + ni);
        });
        mu_t[j] = s_mu;
        nu_t[j] = s_nu;
    }
    debug_assert!(nu_t.iter().all(|&x| x >= 0.0), "pre-activation variance must be >= 0");
    Ok(MomentSummary::new(mu_t, nu_t))
}

pub fn clt_backward_raw(
    conn: &Connectivity,
    m: &[f64],
    v: &[f64],
    input: &MomentSummary,
    grad_mu_tilde: &[f64],
    grad_nu_tilde: &[f64],
) -> Result<CltBackward> {
    let n_out = conn.n_outputs();
    if grad_mu_tilde.len() != n_out || grad_nu_tilde.len() != n_out {
        return Err(BqnError::Wiring("output gradient shape mismatch".into()));
    }
    if input.len() != conn.n_inputs() {
        return Err(BqnError::Wiring("input shape mismatch".into()));
    }
    let mut grad_m = vec![0.0; conn.n_weights()];
    let mut grad_v = vec![0.0; conn.n_weights()];
    let mut grad_mu = vec![0.0; input.len()];
    let mut grad_nu = vec![0.0; input.len()];
    for j in 0..n_out {
        let (gm_t, gn_t) = (grad_mu_tilde[j], grad_nu_tilde[j]);
        conn.for_each_edge(j, |i, w| {
            let (mi, ni) = (input.mu[i], input.nu[i]);
            grad_m[w] += gm_t * mi + gn_t * 2.0 * m[w] * ni;
            grad_v[w] += gn_t * (mi * mi + ni);
            grad_mu[i] += gm_t * m[w] + gn_t * 2.0 * v[w] * mi;
            grad_nu[i] += gn_t * (m[w] * m[w] + v[w]);
        });
    }
    Ok(CltBackward { grad_m, grad_v, grad_mu, grad_nu })
}

/// Bernoulli probability of the sign activation firing +1:
/// p = Phi(mu / sqrt(nu + EPS_VAR)), with deterministic units clipped to
/// {EPS_P, 1 - EPS_P} and every p clamped into that range.
pub fn sign_prob(mu: f64, nu: f64) -> f64 {
    let p = if nu <= EPS_VAR {
        if mu > 0.0 {
            1.0
        } else if mu < 0.0 {
            0.0
        } else {
            0.5
        }
    } else {
        std_normal_cdf(mu / (nu + EPS_VAR).sqrt())
    };
    p.clamp(EPS_P, 1.0 - EPS_P)
}

/// Bernoulli p(+1) per unit, the raw form of [`sign_activation`].
pub fn sign_activation_probs(pre: &MomentSummary) -> Vec<f64> {
    pre.mu
        .iter()
        .zip(&pre.nu)
        .map(|(&m, &v)| sign_prob(m, v))
        .collect()
}

/// Sign activation over the binary grid {-1, 1}.
pub fn sign_activation(pre: &MomentSummary) -> CategoricalVector {
    let grid = Arc::new(QuantizationGrid::binary());
    let mut probs = Vec::with_capacity(pre.len() * 2);
    for j in 0..pre.len() {
        let p = sign_prob(pre.mu[j], pre.nu[j]);
        probs.push(1.0 - p);
        probs.push(p);
    }
    CategoricalVector::from_probabilities(&probs, grid).expect("valid Bernoulli rows")
}

/// Gradients of p through the sign activation:
/// dp/dmu = pdf(z)/sqrt(nu), dp/dnu = -mu pdf(z) / (2 nu^{3/2}),
/// z = mu/sqrt(nu); deterministic units (nu <= EPS_VAR) get zero gradient
/// because the variance rule is singular at nu = 0.
pub fn sign_backward(pre: &MomentSummary, grad_p: &[f64]) -> (Vec<f64>, Vec<f64>) {
    debug_assert_eq!(grad_p.len(), pre.len());
    let mut grad_mu = vec![0.0; pre.len()];
    let mut grad_nu = vec![0.0; pre.len()];
    for j in 0..pre.len() {
        let nu = pre.nu[j];
        if nu <= EPS_VAR {
            continue;
        }
        let safe = nu + EPS_VAR;
        let sd = safe.sqrt();
        let z = pre.mu[j] / sd;
        let pdf = std_normal_pdf(z);
        grad_mu[j] = grad_p[j] * pdf / sd;
        grad_nu[j] = grad_p[j] * (-pre.mu[j] / (2.0 * safe * sd)) * pdf;
    }
    (grad_mu, grad_nu)
}
