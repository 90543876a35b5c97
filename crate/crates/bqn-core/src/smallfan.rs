//! Exact mean-field propagation for small fan-in layers by direct tensor
//! contraction: one contraction engine serves shortcut additions, depthwise
//! parameterized transforms, and deterministic elementwise nonlinearities
//! (stored as 0/1 kernels rather than special-cased code paths).

use std::sync::Arc;

use crate::categorical::CategoricalVector;
use crate::error::{BqnError, Result};
use crate::grid::QuantizationGrid;

/// Conditional distribution table Pr[h' | h, theta] for one output unit.
///
/// `table` is laid out [d_out x d_in^in_arity x d_param^param_arity] with the
/// output index slowest. Every (h, theta) slice sums to 1 over h'.
#[derive(Debug, Clone)]
pub struct ConditionalKernel {
    table: Vec<f64>,
    out_grid: Arc<QuantizationGrid>,
    in_grid: Arc<QuantizationGrid>,
    param_grid: Option<Arc<QuantizationGrid>>,
    in_arity: usize,
    param_arity: usize,
}

impl ConditionalKernel {
    pub fn new(
        table: Vec<f64>,
        out_grid: Arc<QuantizationGrid>,
        in_grid: Arc<QuantizationGrid>,
        param_grid: Option<Arc<QuantizationGrid>>,
        in_arity: usize,
        param_arity: usize,
    ) -> Result<Self> {
        if in_arity == 0 {
            return Err(BqnError::InvalidParameter("kernel needs at least one input".into()));
        }
        if param_arity > 0 && param_grid.is_none() {
            return Err(BqnError::InvalidParameter(
                "param_arity > 0 requires a parameter grid".into(),
            ));
        }
        let d_out = out_grid.len();
        let n_in = in_grid.len().pow(in_arity as u32);
        let n_param = param_grid.as_ref().map_or(1, |g| g.len().pow(param_arity as u32));
        if table.len() != d_out * n_in * n_param {
            return Err(BqnError::Wiring(format!(
                "kernel table has {} entries, expected {}",
                table.len(),
                d_out * n_in * n_param
            )));
        }
        if table.iter().any(|&t| !(0.0..=1.0).contains(&t)) {
            return Err(BqnError::InvalidParameter(
                "kernel entries must lie in [0, 1]".into(),
            ));
        }
        for cond in 0..n_in * n_param {
            let sum: f64 = (0..d_out).map(|o| table[o * n_in * n_param + cond]).sum();
            if (sum - 1.0).abs() > 1e-10 {
                return Err(BqnError::InvalidParameter(format!(
                    "kernel slice {cond} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(Self { table, out_grid, in_grid, param_grid, in_arity, param_arity })
    }

    /// Identity transform on a grid.
    pub fn identity(grid: Arc<QuantizationGrid>) -> Self {
        Self::elementwise(Arc::clone(&grid), grid, |v| v)
    }

    /// Deterministic elementwise nonlinearity sigma: in value -> nearest out
    /// grid value of sigma(v).
    pub fn elementwise(
        in_grid: Arc<QuantizationGrid>,
        out_grid: Arc<QuantizationGrid>,
        sigma: impl Fn(f64) -> f64,
    ) -> Self {
        let (di, do_) = (in_grid.len(), out_grid.len());
        let mut table = vec![0.0; do_ * di];
        for i in 0..di {
            let target = sigma(in_grid.value(i));
            let o = nearest_index(out_grid.values(), target);
            table[o * di + i] = 1.0;
        }
        Self {
            table,
            out_grid,
            in_grid,
            param_grid: None,
            in_arity: 1,
            param_arity: 0,
        }
    }

    /// sign(.) on a grid; sign(0) maps to the smallest positive level.
    pub fn sign(grid: Arc<QuantizationGrid>) -> Self {
        let lo = grid.value(0);
        let hi = grid.value(grid.len() - 1);
        Self::elementwise(Arc::clone(&grid), grid, move |v| if v >= 0.0 { hi } else { lo })
    }

    /// Deterministic two-input operation (a, b) -> out grid value.
    pub fn binary_op(
        in_grid: Arc<QuantizationGrid>,
        out_grid: Arc<QuantizationGrid>,
        op: impl Fn(f64, f64) -> f64,
    ) -> Self {
        let (di, do_) = (in_grid.len(), out_grid.len());
        let mut table = vec![0.0; do_ * di * di];
        for a in 0..di {
            for b in 0..di {
                let target = op(in_grid.value(a), in_grid.value(b));
                let o = nearest_index(out_grid.values(), target);
                table[o * di * di + a * di + b] = 1.0;
            }
        }
        Self {
            table,
            out_grid,
            in_grid,
            param_grid: None,
            in_arity: 2,
            param_arity: 0,
        }
    }

    /// Deterministic depthwise transform h' = f(h, theta).
    pub fn parameterized(
        in_grid: Arc<QuantizationGrid>,
        param_grid: Arc<QuantizationGrid>,
        out_grid: Arc<QuantizationGrid>,
        f: impl Fn(f64, f64) -> f64,
    ) -> Self {
        let (di, dp, do_) = (in_grid.len(), param_grid.len(), out_grid.len());
        let mut table = vec![0.0; do_ * di * dp];
        for i in 0..di {
            for k in 0..dp {
                let target = f(in_grid.value(i), param_grid.value(k));
                let o = nearest_index(out_grid.values(), target);
                table[o * di * dp + i * dp + k] = 1.0;
            }
        }
        Self {
            table,
            out_grid,
            in_grid,
            param_grid: Some(param_grid),
            in_arity: 1,
            param_arity: 1,
        }
    }

    pub fn in_arity(&self) -> usize {
        self.in_arity
    }

    pub fn param_arity(&self) -> usize {
        self.param_arity
    }

    pub fn out_grid(&self) -> &Arc<QuantizationGrid> {
        &self.out_grid
    }

    fn n_joint_in(&self) -> usize {
        self.in_grid.len().pow(self.in_arity as u32)
    }

    fn n_joint_param(&self) -> usize {
        self.param_grid
            .as_ref()
            .map_or(1, |g| g.len().pow(self.param_arity as u32))
    }
}

fn nearest_index(values: &[f64], target: f64) -> usize {
    let mut best = 0;
    let mut dist = (values[0] - target).abs();
    for (k, &v) in values.iter().enumerate().skip(1) {
        let d = (v - target).abs();
        if d < dist {
            dist = d;
            best = k;
        }
    }
    best
}

fn check_wiring(
    kernel: &ConditionalKernel,
    input: &CategoricalVector,
    params: Option<&CategoricalVector>,
) -> Result<usize> {
    if input.n_vars() % kernel.in_arity != 0 {
        return Err(BqnError::Wiring(format!(
            "{} input variables do not split into groups of {}",
            input.n_vars(),
            kernel.in_arity
        )));
    }
    if input.d() != kernel.in_grid.len() {
        return Err(BqnError::Wiring("input grid size mismatch".into()));
    }
    let n_out = input.n_vars() / kernel.in_arity;
    match (kernel.param_arity, params) {
        (0, None) => {}
        (0, Some(_)) => {
            return Err(BqnError::Wiring("kernel takes no parameters".into()));
        }
        (_, None) => {
            return Err(BqnError::Wiring("kernel requires parameters".into()));
        }
        (pa, Some(p)) => {
            if p.n_vars() != n_out * pa {
                return Err(BqnError::Wiring(format!(
                    "expected {} parameter variables, got {}",
                    n_out * pa,
                    p.n_vars()
                )));
            }
            if p.d() != kernel.param_grid.as_ref().unwrap().len() {
                return Err(BqnError::Wiring("parameter grid size mismatch".into()));
            }
        }
    }
    Ok(n_out)
}

/// Decodes flat index `idx` in base `d` into `digits` (most significant first).
fn decode(mut idx: usize, d: usize, digits: &mut [usize]) {
    for slot in digits.iter_mut().rev() {
        *slot = idx % d;
        idx /= d;
    }
}

/// Tucker contraction of the kernel with the per-variable marginals:
/// out(j, o) = sum_{h, theta} Pr[o | h, theta] * prod_k Q(theta_k) * prod_i P(h_i).
pub fn contract_forward(
    kernel: &ConditionalKernel,
    input: &CategoricalVector,
    params: Option<&CategoricalVector>,
) -> Result<CategoricalVector> {
    let n_out = check_wiring(kernel, input, params)?;
    let in_probs = input.probabilities();
    let param_probs = params.map(|p| p.probabilities());
    let (di, dp) = (
        kernel.in_grid.len(),
        kernel.param_grid.as_ref().map_or(1, |g| g.len()),
    );
    let d_out = kernel.out_grid.len();
    let (nji, njp) = (kernel.n_joint_in(), kernel.n_joint_param());

    let mut out = vec![0.0; n_out * d_out];
    let mut in_digits = vec![0usize; kernel.in_arity];
    let mut par_digits = vec![0usize; kernel.param_arity.max(1)];
    for j in 0..n_out {
        for ji in 0..nji {
            decode(ji, di, &mut in_digits);
            let mut p_in = 1.0;
            for (slot, &dgt) in in_digits.iter().enumerate() {
                p_in *= in_probs[(j * kernel.in_arity + slot) * di + dgt];
            }
            if p_in == 0.0 {
                continue;
            }
            for jp in 0..njp {
                let mut weight = p_in;
                if let Some(pp) = &param_probs {
                    decode(jp, dp, &mut par_digits[..kernel.param_arity]);
                    for (slot, &dgt) in par_digits[..kernel.param_arity].iter().enumerate() {
                        weight *= pp[(j * kernel.param_arity + slot) * dp + dgt];
                    }
                }
                if weight == 0.0 {
                    continue;
                }
                let cond = ji * njp + jp;
                for o in 0..d_out {
                    out[j * d_out + o] += weight * kernel.table[o * nji * njp + cond];
                }
            }
        }
        let sum: f64 = out[j * d_out..(j + 1) * d_out].iter().sum();
        debug_assert!(
            (sum - 1.0).abs() < 1e-12,
            "contracted row must stay normalized, got {sum}"
        );
    }
    CategoricalVector::from_probabilities(&out, Arc::clone(&kernel.out_grid))
}

/// Gradients of a scalar loss w.r.t. the input and parameter probabilities,
/// given the gradient w.r.t. the output probabilities. The contraction is a
/// multilinear form, so each gradient is the partial contraction holding the
/// other factors fixed.
pub fn contract_backward(
    kernel: &ConditionalKernel,
    input: &CategoricalVector,
    params: Option<&CategoricalVector>,
    grad_out: &[f64],
) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    let n_out = check_wiring(kernel, input, params)?;
    let d_out = kernel.out_grid.len();
    if grad_out.len() != n_out * d_out {
        return Err(BqnError::Wiring(format!(
            "grad_out has {} entries, expected {}",
            grad_out.len(),
            n_out * d_out
        )));
    }
    let in_probs = input.probabilities();
    let param_probs = params.map(|p| p.probabilities());
    let (di, dp) = (
        kernel.in_grid.len(),
        kernel.param_grid.as_ref().map_or(1, |g| g.len()),
    );
    let (nji, njp) = (kernel.n_joint_in(), kernel.n_joint_param());

    let mut grad_in = vec![0.0; in_probs.len()];
    let mut grad_par = param_probs.as_ref().map(|p| vec![0.0; p.len()]);
    let mut in_digits = vec![0usize; kernel.in_arity];
    let mut par_digits = vec![0usize; kernel.param_arity.max(1)];

    for j in 0..n_out {
        for ji in 0..nji {
            decode(ji, di, &mut in_digits);
            for jp in 0..njp {
                if kernel.param_arity > 0 {
                    decode(jp, dp, &mut par_digits[..kernel.param_arity]);
                }
                // kernel mass reaching this joint configuration, weighted by
                // the downstream gradient
                let cond = ji * njp + jp;
                let mut gk = 0.0;
                for o in 0..d_out {
                    gk += grad_out[j * d_out + o] * kernel.table[o * nji * njp + cond];
                }
                if gk == 0.0 {
                    continue;
                }
                // product over all factors, with one held out at a time
                for hold in 0..kernel.in_arity + kernel.param_arity {
                    let mut prod = gk;
                    for (slot, &dgt) in in_digits.iter().enumerate() {
                        if hold != slot {
                            prod *= in_probs[(j * kernel.in_arity + slot) * di + dgt];
                        }
                    }
                    if let Some(pp) = &param_probs {
                        for (slot, &dgt) in par_digits[..kernel.param_arity].iter().enumerate() {
                            if hold != kernel.in_arity + slot {
                                prod *= pp[(j * kernel.param_arity + slot) * dp + dgt];
                            }
                        }
                    }
                    if hold < kernel.in_arity {
                        grad_in[(j * kernel.in_arity + hold) * di + in_digits[hold]] += prod;
                    } else {
                        let slot = hold - kernel.in_arity;
                        grad_par.as_mut().unwrap()
                            [(j * kernel.param_arity + slot) * dp + par_digits[slot]] += prod;
                    }
                }
            }
        }
    }
    Ok((grad_in, grad_par))
}

/// Exact PMF of the sum of two independent variables over integer-affine
/// grids: the support is the Minkowski sum, the mass the convolution.
pub fn shortcut_add(a: &CategoricalVector, b: &CategoricalVector) -> Result<CategoricalVector> {
    if a.n_vars() != b.n_vars() {
        return Err(BqnError::Wiring(format!(
            "shortcut inputs have {} vs {} variables",
            a.n_vars(),
            b.n_vars()
        )));
    }
    let (oa, sa) = a
        .grid()
        .integer_affine()
        .ok_or_else(|| BqnError::Grid("left grid is not integer-affine".into()))?;
    let (ob, sb) = b
        .grid()
        .integer_affine()
        .ok_or_else(|| BqnError::Grid("right grid is not integer-affine".into()))?;
    if (sa - sb).abs() > 1e-12 * sa.abs().max(1.0) {
        return Err(BqnError::Grid(format!(
            "incompatible affine grids: steps {sa} vs {sb}"
        )));
    }
    let (da, db) = (a.d(), b.d());
    let d_out = da + db - 1;
    let out_values: Vec<f64> = (0..d_out).map(|k| oa + ob + sa * k as f64).collect();
    let out_grid = Arc::new(QuantizationGrid::new(out_values)?);

    let (pa, pb) = (a.probabilities(), b.probabilities());
    let mut out = vec![0.0; a.n_vars() * d_out];
    for v in 0..a.n_vars() {
        for i in 0..da {
            let pai = pa[v * da + i];
            if pai == 0.0 {
                continue;
            }
            for j in 0..db {
                out[v * d_out + i + j] += pai * pb[v * db + j];
            }
        }
    }
    CategoricalVector::from_probabilities(&out, out_grid)
}
