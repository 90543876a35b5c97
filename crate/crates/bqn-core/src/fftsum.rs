//! Medium fan-in summation of integer-valued discrete random variables via
//! the DFT (summation of independent variables multiplies characteristic
//! functions), with its backpropagation rule, plus max / probabilistic /
//! average pooling.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::categorical::CategoricalVector;
use crate::error::{BqnError, Result};
use crate::moments::MomentSummary;

/// Entries in (-CLAMP_TOL, 0) after the inverse transform are round-off and
/// set to zero; anything more negative is a consistency violation.
const CLAMP_TOL: f64 = 1e-12;

/// Spectral magnitudes below this trigger the exact adjoint-convolution
/// fallback instead of spectral division in the backward pass.
const DIVISION_FLOOR: f64 = 1e-8;

/// PMF of an integer-valued variable supported on {lower, ..., lower+len-1}.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegerPmf {
    pub lower: i64,
    pub mass: Vec<f64>,
}

impl IntegerPmf {
    pub fn new(lower: i64, mass: Vec<f64>) -> Result<Self> {
        if mass.is_empty() {
            return Err(BqnError::Argument("empty PMF".into()));
        }
        if mass.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(BqnError::InvalidParameter("PMF entries must be >= 0".into()));
        }
        let sum: f64 = mass.iter().sum();
        if (sum - 1.0).abs() > 1e-10 {
            return Err(BqnError::InvalidParameter(format!(
                "PMF sums to {sum}, expected 1"
            )));
        }
        Ok(Self { lower, mass })
    }

    pub fn upper(&self) -> i64 {
        self.lower + self.mass.len() as i64 - 1
    }

    pub fn point(value: i64) -> Self {
        Self { lower: value, mass: vec![1.0] }
    }

    /// Bernoulli over {0, 1} with P(1) = p.
    pub fn bernoulli(p: f64) -> Self {
        Self { lower: 0, mass: vec![1.0 - p, p] }
    }

    /// Mean and variance of the variable after rescaling its support by
    /// `scale` (values become scale * (lower + k)).
    pub fn scaled_moments(&self, scale: f64) -> (f64, f64) {
        let mut m = 0.0;
        let mut s = 0.0;
        for (k, &p) in self.mass.iter().enumerate() {
            let v = scale * (self.lower + k as i64) as f64;
            m += p * v;
            s += p * v * v;
        }
        (m, (s - m * m).max(0.0))
    }
}

/// Characteristic function of a PMF: the DFT of the mass vector zero-padded
/// to the given resolution, with phases relative to the PMF's own lower
/// bound. coeffs[0] is 1 for a normalized PMF.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub coeffs: Vec<Complex64>,
}

impl Spectrum {
    pub fn resolution(&self) -> usize {
        self.coeffs.len()
    }
}

fn fft(values: &mut [Complex64], inverse: bool) {
    let mut planner = FftPlanner::new();
    let plan = if inverse {
        planner.plan_fft_inverse(values.len())
    } else {
        planner.plan_fft_forward(values.len())
    };
    plan.process(values);
    if inverse {
        let scale = 1.0 / values.len() as f64;
        for v in values.iter_mut() {
            *v *= scale;
        }
    }
}

/// Forward transform of a PMF at the given resolution.
pub fn spectrum(pmf: &IntegerPmf, resolution: usize) -> Spectrum {
    debug_assert!(resolution >= pmf.mass.len());
    let mut buf: Vec<Complex64> = pmf
        .mass
        .iter()
        .map(|&p| Complex64::new(p, 0.0))
        .chain(std::iter::repeat(Complex64::new(0.0, 0.0)))
        .take(resolution)
        .collect();
    fft(&mut buf, false);
    debug_assert!(
        (buf[0] - Complex64::new(1.0, 0.0)).norm() < 1e-10,
        "DC coefficient of a normalized PMF must be 1"
    );
    Spectrum { coeffs: buf }
}

/// Inverse transform back to a PMF of length `len` at lower bound `lower`.
/// Small negative round-off is clamped to zero and the mass renormalized.
fn inverse_to_pmf(mut coeffs: Vec<Complex64>, lower: i64, len: usize) -> Result<IntegerPmf> {
    fft(&mut coeffs, true);
    let mut mass = Vec::with_capacity(len);
    for c in coeffs.into_iter().take(len) {
        let p = c.re;
        if p < -CLAMP_TOL {
            return Err(BqnError::Internal(format!(
                "IFFT produced negative mass {p}"
            )));
        }
        mass.push(p.max(0.0));
    }
    let sum: f64 = mass.iter().sum();
    for p in mass.iter_mut() {
        *p /= sum;
    }
    debug_assert!((mass.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    Ok(IntegerPmf { lower, mass })
}

/// Resolution for summing these inputs: the size of the result's support.
fn sum_resolution(inputs: &[IntegerPmf]) -> usize {
    inputs.iter().map(|p| p.mass.len() - 1).sum::<usize>() + 1
}

/// PMF of the sum of independent integer variables, computed by multiplying
/// their characteristic functions. Equals exact iterated convolution;
/// O(E R log R) with R = B - b + 1.
pub fn sum_via_fft(inputs: &[IntegerPmf]) -> Result<IntegerPmf> {
    if inputs.is_empty() {
        return Err(BqnError::Argument("sum of zero PMFs".into()));
    }
    if inputs.len() == 1 {
        return Ok(inputs[0].clone());
    }
    let resolution = sum_resolution(inputs);
    let lower: i64 = inputs.iter().map(|p| p.lower).sum();
    let mut product = vec![Complex64::new(1.0, 0.0); resolution];
    for pmf in inputs {
        let s = spectrum(pmf, resolution);
        for (acc, c) in product.iter_mut().zip(&s.coeffs) {
            *acc *= c;
        }
    }
    inverse_to_pmf(product, lower, resolution)
}

/// Direct iterated convolution; the oracle counterpart of [`sum_via_fft`].
pub fn sum_direct(inputs: &[IntegerPmf]) -> Result<IntegerPmf> {
    if inputs.is_empty() {
        return Err(BqnError::Argument("sum of zero PMFs".into()));
    }
    let mut acc = inputs[0].mass.clone();
    for pmf in &inputs[1..] {
        let mut next = vec![0.0; acc.len() + pmf.mass.len() - 1];
        for (i, &a) in acc.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (j, &b) in pmf.mass.iter().enumerate() {
                next[i + j] += a * b;
            }
        }
        acc = next;
    }
    Ok(IntegerPmf { lower: inputs.iter().map(|p| p.lower).sum(), mass: acc })
}

/// Backpropagates a gradient w.r.t. the summed PMF to gradients w.r.t. each
/// input PMF. The fast path divides the total spectrum by each input's
/// spectrum (conjugated, since the backward map is the adjoint of the
/// convolution); inputs whose spectrum comes within [`DIVISION_FLOOR`] of
/// zero anywhere fall back to the exact leave-one-out adjoint convolution.
pub fn sum_backward_fft(inputs: &[IntegerPmf], grad_out: &[f64]) -> Result<Vec<Vec<f64>>> {
    if inputs.is_empty() {
        return Err(BqnError::Argument("sum of zero PMFs".into()));
    }
    if inputs.len() == 1 {
        return Ok(vec![grad_out[..inputs[0].mass.len()].to_vec()]);
    }
    let resolution = sum_resolution(inputs);
    if grad_out.len() != resolution {
        return Err(BqnError::Wiring(format!(
            "grad_out has {} entries, expected {}",
            grad_out.len(),
            resolution
        )));
    }
    let spectra: Vec<Spectrum> = inputs.iter().map(|p| spectrum(p, resolution)).collect();
    let mut total = vec![Complex64::new(1.0, 0.0); resolution];
    for s in &spectra {
        for (acc, c) in total.iter_mut().zip(&s.coeffs) {
            *acc *= c;
        }
    }
    let mut grad_spec: Vec<Complex64> = grad_out
        .iter()
        .map(|&g| Complex64::new(g, 0.0))
        .collect();
    fft(&mut grad_spec, false);

    let mut grads = Vec::with_capacity(inputs.len());
    for (i, pmf) in inputs.iter().enumerate() {
        let len = pmf.mass.len();
        let degenerate = spectra[i].coeffs.iter().any(|c| c.norm() < DIVISION_FLOOR);
        if degenerate {
            grads.push(adjoint_direct(inputs, i, grad_out));
            continue;
        }
        let mut buf: Vec<Complex64> = (0..resolution)
            .map(|f| (total[f] / spectra[i].coeffs[f]).conj() * grad_spec[f])
            .collect();
        fft(&mut buf, true);
        grads.push(buf.into_iter().take(len).map(|c| c.re).collect());
    }
    Ok(grads)
}

/// Exact adjoint for input `hold`: correlate grad_out with the convolution of
/// the remaining inputs.
fn adjoint_direct(inputs: &[IntegerPmf], hold: usize, grad_out: &[f64]) -> Vec<f64> {
    let mut rest = vec![1.0];
    for (k, pmf) in inputs.iter().enumerate() {
        if k == hold {
            continue;
        }
        let mut next = vec![0.0; rest.len() + pmf.mass.len() - 1];
        for (i, &a) in rest.iter().enumerate() {
            for (j, &b) in pmf.mass.iter().enumerate() {
                next[i + j] += a * b;
            }
        }
        rest = next;
    }
    let len = inputs[hold].mass.len();
    let mut grad = vec![0.0; len];
    for (m, g) in grad.iter_mut().enumerate() {
        for (k, &go) in grad_out.iter().enumerate() {
            if k >= m && k - m < rest.len() {
                *g += go * rest[k - m];
            }
        }
    }
    grad
}

fn check_common_grid(inputs: &[&CategoricalVector]) -> Result<(usize, usize)> {
    let first = inputs
        .first()
        .ok_or_else(|| BqnError::Argument("empty pooling window".into()))?;
    for cv in &inputs[1..] {
        if cv.grid().values() != first.grid().values() {
            return Err(BqnError::Grid("pooling inputs must share a grid".into()));
        }
        if cv.n_vars() != first.n_vars() {
            return Err(BqnError::Wiring("pooling inputs must have equal arity".into()));
        }
    }
    Ok((first.n_vars(), first.d()))
}

/// Max pooling across the window: the output CDF is the product of input
/// CDFs, the PMF follows by differencing. O(I D).
pub fn max_pool(inputs: &[&CategoricalVector]) -> Result<CategoricalVector> {
    let (n_vars, d) = check_common_grid(inputs)?;
    let probs: Vec<Vec<f64>> = inputs.iter().map(|cv| cv.probabilities()).collect();
    let mut out = vec![0.0; n_vars * d];
    for v in 0..n_vars {
        let mut prev = 0.0;
        let mut cdfs = vec![0.0; inputs.len()];
        for q in 0..d {
            let mut prod = 1.0;
            for (k, p) in probs.iter().enumerate() {
                cdfs[k] += p[v * d + q];
                prod *= cdfs[k];
            }
            out[v * d + q] = (prod - prev).max(0.0);
            prev = prod;
        }
    }
    CategoricalVector::from_probabilities(&out, Arc::clone(inputs[0].grid()))
}

/// Analytic differentiation of the CDF-product formula (product rule over
/// CDFs); validated by finite differences.
pub fn max_pool_backward(
    inputs: &[&CategoricalVector],
    grad_out: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let (n_vars, d) = check_common_grid(inputs)?;
    if grad_out.len() != n_vars * d {
        return Err(BqnError::Wiring("grad_out shape mismatch".into()));
    }
    let probs: Vec<Vec<f64>> = inputs.iter().map(|cv| cv.probabilities()).collect();
    let n_in = inputs.len();
    let mut grads = vec![vec![0.0; n_vars * d]; n_in];
    for v in 0..n_vars {
        // cumulative CDFs per input
        let mut cdfs = vec![vec![0.0; d]; n_in];
        for (k, p) in probs.iter().enumerate() {
            let mut acc = 0.0;
            for q in 0..d {
                acc += p[v * d + q];
                cdfs[k][q] = acc;
            }
        }
        // out[q] = G(q) - G(q-1) with G(q) = prod_k F_k(q);
        // dG(q)/dp_i(e) = [e <= q] * prod_{k != i} F_k(q)
        for i in 0..n_in {
            for q in 0..d {
                let mut loo = 1.0;
                for (k, cdf) in cdfs.iter().enumerate() {
                    if k != i {
                        loo *= cdf[q];
                    }
                }
                // dL/dG(q) = grad_out[q] - grad_out[q+1]
                let dg = grad_out[v * d + q]
                    - if q + 1 < d { grad_out[v * d + q + 1] } else { 0.0 };
                if dg == 0.0 || loo == 0.0 {
                    continue;
                }
                for e in 0..=q {
                    grads[i][v * d + e] += dg * loo;
                }
            }
        }
    }
    Ok(grads)
}

/// Probabilistic pooling: a fixed mixture of the window's PMFs. O(I D).
pub fn prob_pool(inputs: &[&CategoricalVector], weights: &[f64]) -> Result<CategoricalVector> {
    let (n_vars, d) = check_common_grid(inputs)?;
    if weights.len() != inputs.len() {
        return Err(BqnError::Argument("one weight per input required".into()));
    }
    if weights.iter().any(|&w| w < 0.0)
        || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-8
    {
        return Err(BqnError::Argument(
            "pooling weights must be nonnegative and sum to 1".into(),
        ));
    }
    let mut out = vec![0.0; n_vars * d];
    for (cv, &w) in inputs.iter().zip(weights) {
        for (o, p) in out.iter_mut().zip(cv.probabilities()) {
            *o += w * p;
        }
    }
    CategoricalVector::from_probabilities(&out, Arc::clone(inputs[0].grid()))
}

/// The mixture is linear in each input PMF.
pub fn prob_pool_backward(weights: &[f64], grad_out: &[f64]) -> Vec<Vec<f64>> {
    weights
        .iter()
        .map(|&w| grad_out.iter().map(|&g| w * g).collect())
        .collect()
}

/// Result of average pooling one window: the summed PMF (kept for backward)
/// and the moments of the rescaled average.
#[derive(Debug, Clone)]
pub struct AvgPoolResult {
    pub sum_pmf: IntegerPmf,
    pub window: usize,
    pub moments: MomentSummary,
}

/// Average pooling: the window sum is computed by [`sum_via_fft`], the
/// average is the deterministic rescale of the support by 1/window, and
/// downstream consumers read moments from the rescaled PMF.
pub fn avg_pool(inputs: &[IntegerPmf], window: usize) -> Result<AvgPoolResult> {
    if window == 0 {
        return Err(BqnError::Argument("window must be positive".into()));
    }
    let sum_pmf = sum_via_fft(inputs)?;
    let (m, v) = sum_pmf.scaled_moments(1.0 / window as f64);
    Ok(AvgPoolResult {
        sum_pmf,
        window,
        moments: MomentSummary::new(vec![m], vec![v]),
    })
}

/// Chains moment gradients of the rescaled average back to each input PMF.
pub fn avg_pool_backward(
    inputs: &[IntegerPmf],
    result: &AvgPoolResult,
    grad_mu: f64,
    grad_nu: f64,
) -> Result<Vec<Vec<f64>>> {
    let scale = 1.0 / result.window as f64;
    let (mu, _) = result.sum_pmf.scaled_moments(scale);
    let grad_pmf: Vec<f64> = (0..result.sum_pmf.mass.len())
        .map(|k| {
            let val = scale * (result.sum_pmf.lower + k as i64) as f64;
            grad_mu * val + grad_nu * (val * val - 2.0 * mu * val)
        })
        .collect();
    sum_backward_fft(inputs, &grad_pmf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::QuantizationGrid;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn uniform(len: usize) -> IntegerPmf {
        IntegerPmf::new(0, vec![1.0 / len as f64; len]).unwrap()
    }

    fn random_pmf(rng: &mut ChaCha8Rng, len: usize, lower: i64) -> IntegerPmf {
        let mut mass: Vec<f64> = (0..len).map(|_| rng.gen_range(0.01..1.0)).collect();
        let s: f64 = mass.iter().sum();
        mass.iter_mut().for_each(|m| *m /= s);
        IntegerPmf::new(lower, mass).unwrap()
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(sum_via_fft(&[]), Err(BqnError::Argument(_))));
    }

    #[test]
    fn single_input_unchanged() {
        let p = random_pmf(&mut ChaCha8Rng::seed_from_u64(1), 4, -2);
        assert_eq!(sum_via_fft(&[p.clone()]).unwrap(), p);
    }

    #[test]
    fn two_uniform_bits_convolve() {
        let out = sum_via_fft(&[uniform(2), uniform(2)]).unwrap();
        assert_eq!(out.lower, 0);
        for (got, want) in out.mass.iter().zip([0.25, 0.5, 0.25]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn six_uniform_bits_are_binomial() {
        let inputs: Vec<IntegerPmf> = (0..6).map(|_| uniform(2)).collect();
        let out = sum_via_fft(&inputs).unwrap();
        let coeff = [1.0, 6.0, 15.0, 20.0, 15.0, 6.0, 1.0];
        for (got, want) in out.mass.iter().zip(coeff) {
            assert!((got - want / 64.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fft_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let e = rng.gen_range(2..=6);
            let inputs: Vec<IntegerPmf> = (0..e)
                .map(|_| {
                    let d = rng.gen_range(2..=5);
                    let lower = rng.gen_range(-3..3);
                    random_pmf(&mut rng, d, lower)
                })
                .collect();
            let fast = sum_via_fft(&inputs).unwrap();
            let slow = sum_direct(&inputs).unwrap();
            assert_eq!(fast.lower, slow.lower);
            for (a, b) in fast.mass.iter().zip(&slow.mass) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn transform_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_pmf(&mut rng, 5, 1);
        let s = spectrum(&p, 5);
        let back = inverse_to_pmf(s.coeffs, p.lower, 5).unwrap();
        for (a, b) in p.mass.iter().zip(&back.mass) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_single_input_is_passthrough() {
        let p = uniform(3);
        let g = [0.3, -0.5, 0.2];
        let grads = sum_backward_fft(&[p], &g).unwrap();
        assert_eq!(grads[0], g.to_vec());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = random_pmf(&mut rng, 3, 0);
        let b = random_pmf(&mut rng, 3, -1);
        let inputs = [a, b];
        let r = sum_resolution(&inputs);
        let dir: Vec<f64> = (0..r).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let grads = sum_backward_fft(&inputs, &dir).unwrap();

        let h = 1e-6;
        for which in 0..2 {
            for k in 0..inputs[which].mass.len() {
                let eval = |delta: f64| {
                    let mut probe = inputs.clone();
                    probe[which].mass[k] += delta;
                    // raw (unnormalized) convolution: the sum map is linear
                    let out = sum_direct(&probe).unwrap();
                    out.mass.iter().zip(&dir).map(|(p, g)| p * g).sum::<f64>()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let got = grads[which][k];
                let rel = (got - fd).abs() / got.abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-5, "input {which} entry {k}: {got} vs {fd}");
            }
        }
    }

    #[test]
    fn backward_with_point_mass_shifts_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let point = IntegerPmf::point(2);
        let other = random_pmf(&mut rng, 4, 0);
        let inputs = [point, other];
        let r = sum_resolution(&inputs);
        let dir: Vec<f64> = (0..r).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let grads = sum_backward_fft(&inputs, &dir).unwrap();
        // the other input's gradient is grad_out shifted by the point mass:
        // d out[k] / d other[m] = 1 at k = m (supports already absorb lower bounds)
        for (m, &g) in grads[1].iter().enumerate() {
            assert!((g - dir[m]).abs() < 1e-10);
        }
    }

    #[test]
    fn backward_fallback_on_degenerate_spectrum() {
        // uniform over 2 padded to R = 4 has a spectral zero at f = 2, which
        // must trigger the exact adjoint path and still match FD
        let a = uniform(2);
        let b = uniform(3);
        let inputs = [a, b];
        let r = sum_resolution(&inputs);
        assert_eq!(r, 4);
        let s = spectrum(&inputs[0], r);
        assert!(s.coeffs.iter().any(|c| c.norm() < DIVISION_FLOOR));

        let dir = [0.7, -0.1, 0.4, 0.2];
        let grads = sum_backward_fft(&inputs, &dir).unwrap();
        let h = 1e-6;
        for which in 0..2 {
            for k in 0..inputs[which].mass.len() {
                let eval = |delta: f64| {
                    let mut probe = inputs.clone();
                    probe[which].mass[k] += delta;
                    let out = sum_direct(&probe).unwrap();
                    out.mass.iter().zip(&dir).map(|(p, g)| p * g).sum::<f64>()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let got = grads[which][k];
                assert!((got - fd).abs() < 1e-6, "{got} vs {fd}");
            }
        }
    }

    fn binary_cv(probs: &[f64]) -> CategoricalVector {
        CategoricalVector::from_probabilities(probs, Arc::new(QuantizationGrid::binary()))
            .unwrap()
    }

    #[test]
    fn max_pool_single_input_unchanged() {
        let a = binary_cv(&[0.3, 0.7]);
        let out = max_pool(&[&a]).unwrap();
        for (x, y) in out.probabilities().iter().zip(a.probabilities()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn max_pool_two_fair_bits() {
        let a = binary_cv(&[0.5, 0.5]);
        let b = binary_cv(&[0.5, 0.5]);
        let out = max_pool(&[&a, &b]).unwrap();
        let p = out.probabilities();
        assert!((p[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn max_pool_absorbing_top() {
        let top = binary_cv(&[0.0, 1.0]);
        let other = binary_cv(&[0.6, 0.4]);
        let out = max_pool(&[&top, &other]).unwrap();
        let p = out.probabilities();
        assert!(p[0] < 1e-12 && (p[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn max_pool_stochastically_dominates_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let grid = Arc::new(QuantizationGrid::new(vec![-1.0, 0.0, 1.0]).unwrap());
        for _ in 0..20 {
            let mk = |rng: &mut ChaCha8Rng| {
                let mut p: Vec<f64> = (0..3).map(|_| rng.gen_range(0.01..1.0)).collect();
                let s: f64 = p.iter().sum();
                p.iter_mut().for_each(|x| *x /= s);
                CategoricalVector::from_probabilities(&p, Arc::clone(&grid)).unwrap()
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let out = max_pool(&[&a, &b]).unwrap();
            let po = out.probabilities();
            for cv in [&a, &b] {
                let pi = cv.probabilities();
                let mut cdf_o = 0.0;
                let mut cdf_i = 0.0;
                for q in 0..3 {
                    cdf_o += po[q];
                    cdf_i += pi[q];
                    assert!(cdf_o <= cdf_i + 1e-9);
                }
            }
        }
    }

    #[test]
    fn max_pool_backward_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let grid = Arc::new(QuantizationGrid::new(vec![-1.0, 0.0, 1.0]).unwrap());
        let d = 3;
        let mk = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let mut p: Vec<f64> = (0..d).map(|_| rng.gen_range(0.05..1.0)).collect();
            let s: f64 = p.iter().sum();
            p.iter_mut().for_each(|x| *x /= s);
            p
        };
        let pa = mk(&mut rng);
        let pb = mk(&mut rng);
        let dir: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let build = |p: &[f64]| {
            CategoricalVector::from_probabilities(p, Arc::clone(&grid)).unwrap()
        };
        let a = build(&pa);
        let b = build(&pb);
        let grads = max_pool_backward(&[&a, &b], &dir).unwrap();

        // raw CDF-product evaluation for FD (no renormalization)
        let eval = |pa: &[f64], pb: &[f64]| -> f64 {
            let mut total = 0.0;
            let mut prev = 0.0;
            let (mut ca, mut cb) = (0.0, 0.0);
            for q in 0..d {
                ca += pa[q];
                cb += pb[q];
                total += dir[q] * (ca * cb - prev);
                prev = ca * cb;
            }
            total
        };
        let h = 1e-6;
        for which in 0..2 {
            for k in 0..d {
                let (mut qa, mut qb) = (pa.clone(), pb.clone());
                let target = if which == 0 { &mut qa } else { &mut qb };
                target[k] += h;
                let up = eval(&qa, &qb);
                let (mut qa, mut qb) = (pa.clone(), pb.clone());
                let target = if which == 0 { &mut qa } else { &mut qb };
                target[k] -= h;
                let down = eval(&qa, &qb);
                let fd = (up - down) / (2.0 * h);
                let got = grads[which][k];
                assert!(
                    (got - fd).abs() / got.abs().max(fd.abs()).max(1e-6) < 1e-5,
                    "{got} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn prob_pool_one_hot_selects_input() {
        let a = binary_cv(&[0.2, 0.8]);
        let b = binary_cv(&[0.9, 0.1]);
        let out = prob_pool(&[&a, &b], &[0.0, 1.0]).unwrap();
        for (x, y) in out.probabilities().iter().zip(b.probabilities()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn prob_pool_mixture_oracle() {
        let a = binary_cv(&[0.2, 0.8]);
        let b = binary_cv(&[0.9, 0.1]);
        let out = prob_pool(&[&a, &b], &[0.3, 0.7]).unwrap();
        let p = out.probabilities();
        assert!((p[0] - (0.3 * 0.2 + 0.7 * 0.9)).abs() < 1e-9);
        assert!((p[1] - (0.3 * 0.8 + 0.7 * 0.1)).abs() < 1e-9);

        // identical inputs are a fixed point regardless of weights
        let same = prob_pool(&[&a, &a], &[0.5, 0.5]).unwrap();
        for (x, y) in same.probabilities().iter().zip(a.probabilities()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn prob_pool_rejects_off_simplex_weights() {
        let a = binary_cv(&[0.5, 0.5]);
        assert!(matches!(
            prob_pool(&[&a, &a], &[0.5, 0.6]),
            Err(BqnError::Argument(_))
        ));
        assert!(matches!(
            prob_pool(&[&a, &a], &[-0.1, 1.1]),
            Err(BqnError::Argument(_))
        ));
    }

    #[test]
    fn avg_pool_point_masses() {
        let inputs = vec![IntegerPmf::point(3); 4];
        let r = avg_pool(&inputs, 4).unwrap();
        assert!((r.moments.mu[0] - 3.0).abs() < 1e-12);
        assert!(r.moments.nu[0] < 1e-12);
    }

    #[test]
    fn avg_pool_window_of_uniform_bits() {
        // 2x2 window of uniforms on {0,1}: binomial(4, 1/2) / 4
        let inputs = vec![uniform(2); 4];
        let r = avg_pool(&inputs, 4).unwrap();
        assert!((r.moments.mu[0] - 0.5).abs() < 1e-12);
        assert!((r.moments.nu[0] - 1.0 / 16.0).abs() < 1e-12);
    }

    #[test]
    fn avg_pool_mean_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let inputs: Vec<IntegerPmf> = (0..3).map(|_| random_pmf(&mut rng, 3, 0)).collect();
        let r = avg_pool(&inputs, 3).unwrap();
        let mean_of_means: f64 = inputs
            .iter()
            .map(|p| p.scaled_moments(1.0).0)
            .sum::<f64>()
            / 3.0;
        assert!((r.moments.mu[0] - mean_of_means).abs() < 1e-12);
    }

    #[test]
    fn avg_pool_backward_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let inputs: Vec<IntegerPmf> = (0..3).map(|_| random_pmf(&mut rng, 2, 0)).collect();
        let r = avg_pool(&inputs, 3).unwrap();
        let (gm, gn) = (0.8, -0.3);
        let grads = avg_pool_backward(&inputs, &r, gm, gn).unwrap();

        let eval = |probe: &[IntegerPmf]| -> f64 {
            let sum = sum_direct(probe).unwrap();
            let scale = 1.0 / 3.0;
            let mut m = 0.0;
            let mut s = 0.0;
            for (k, &p) in sum.mass.iter().enumerate() {
                let v = scale * (sum.lower + k as i64) as f64;
                m += p * v;
                s += p * v * v;
            }
            gm * m + gn * (s - m * m)
        };
        let h = 1e-6;
        for which in 0..3 {
            for k in 0..2 {
                let mut up = inputs.clone();
                up[which].mass[k] += h;
                let mut down = inputs.clone();
                down[which].mass[k] -= h;
                let fd = (eval(&up) - eval(&down)) / (2.0 * h);
                let got = grads[which][k];
                assert!((got - fd).abs() < 1e-5, "{got} vs {fd}");
            }
        }
    }
}
