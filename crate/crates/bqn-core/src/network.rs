//! Sequential network graphs and the analytic forward/backward pipeline.
//!
//! A graph is a chain of typed layers (linear, conv2d, sign, avgpool2d)
//! ending in a softmax or Gaussian head. The analytic pass propagates
//! moments through linear layers (CLT), Bernoulli probabilities through
//! sign activations, and summed PMFs through average pooling; the backward
//! pass reverses each step with its closed-form rule and accumulates
//! per-weight mean/variance gradients that the trainer turns into logit
//! gradients.

use std::sync::Arc;

use rand::Rng;

use crate::categorical::CategoricalVector;
use crate::clt::{
    clt_backward_raw, clt_forward_raw, sign_activation_probs, sign_backward_probs,
    Connectivity, Conv2dSpec,
};
use crate::error::{BqnError, Result};
use crate::fftsum::{avg_pool, avg_pool_backward, AvgPoolResult, IntegerPmf};
use crate::grid::QuantizationGrid;
use crate::heads::{GaussianHead, SoftmaxHead};
use crate::moments::MomentSummary;

/// Value shape flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Flat(usize),
    Image { channels: usize, h: usize, w: usize },
}

impl Shape {
    pub fn units(&self) -> usize {
        match *self {
            Shape::Flat(n) => n,
            Shape::Image { channels, h, w } => channels * h * w,
        }
    }
}

/// Declarative layer description; geometry is resolved at build time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Linear { outputs: usize },
    Conv2d { out_channels: usize, kernel: usize, stride: usize },
    Sign,
    AvgPool2d { window: usize, stride: usize },
}

/// Output head description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HeadSpec {
    Softmax { classes: usize },
    Gaussian,
}

/// A resolved layer with its connectivity or pooling geometry.
#[derive(Debug, Clone)]
pub enum BuiltLayer {
    Linear(Connectivity),
    Sign { units: usize },
    AvgPool {
        in_shape: (usize, usize, usize),
        window: usize,
        stride: usize,
    },
}

impl BuiltLayer {
    fn is_trainable(&self) -> bool {
        matches!(self, BuiltLayer::Linear(_))
    }
}

/// Head parameters live at the tail of the flattened parameter vector:
/// softmax stores [log_s]; Gaussian stores [w_1..w_I, log_s].
#[derive(Debug, Clone)]
pub struct NetworkGraph {
    pub input_shape: Shape,
    pub layers: Vec<BuiltLayer>,
    pub head: HeadSpec,
    pub grid: Arc<QuantizationGrid>,
    shapes: Vec<Shape>,
    trainable: Vec<usize>,
    head_inputs: usize,
}

/// All learnable parameters as groups: one logits group per linear/conv
/// layer (n_weights x D, row-major), then one head group.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub groups: Vec<Vec<f64>>,
}

impl ParamVector {
    pub fn zeros_like(&self) -> Self {
        Self {
            groups: self.groups.iter().map(|g| vec![0.0; g.len()]).collect(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.groups.iter().map(|g| g.len()).sum()
    }
}

/// Target for one training example.
#[derive(Debug, Clone, Copy)]
pub enum Target {
    Class(usize),
    Value(f64),
}

/// Analytic prediction emitted by the head.
#[derive(Debug, Clone)]
pub enum Prediction {
    /// Class probabilities (second-order Taylor by default).
    Class(Vec<f64>),
    /// Predictive moments (mean, variance, skewness, kurtosis).
    Regression(MomentSummary),
}

/// Per-stage values recorded during the analytic forward pass.
#[derive(Debug, Clone)]
enum StageRecord {
    Linear {
        /// Moments fed to the layer.
        input: MomentSummary,
        /// Bernoulli p(+1) per input unit when the input came from a sign
        /// activation (needed to chain moment gradients back to p).
        input_p: Option<Vec<f64>>,
        output: MomentSummary,
    },
    Sign {
        pre: MomentSummary,
        p: Vec<f64>,
    },
    AvgPool {
        input_p: Vec<f64>,
        windows: Vec<Vec<usize>>,
        results: Vec<AvgPoolResult>,
    },
}

/// Everything the backward pass needs from one example's forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    stages: Vec<StageRecord>,
    /// Moments entering the head: final pre-activations for softmax, final
    /// hidden moments for the Gaussian head.
    pub head_input: MomentSummary,
    /// Bernoulli p of the final hidden layer (Gaussian head only).
    head_input_p: Option<Vec<f64>>,
}

/// Per-layer weight moments computed once from the logits and shared across
/// a batch; the logits remain the single source of truth.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub layer_m: Vec<Vec<f64>>,
    pub layer_v: Vec<Vec<f64>>,
}

/// Gradient accumulator over a batch: per-weight mean/variance gradients per
/// trainable layer plus the flattened head gradient.
#[derive(Debug, Clone)]
pub struct BatchGrads {
    pub layer_m: Vec<Vec<f64>>,
    pub layer_v: Vec<Vec<f64>>,
    pub head: Vec<f64>,
}

impl BatchGrads {
    pub fn scale(&mut self, factor: f64) {
        for g in self
            .layer_m
            .iter_mut()
            .chain(self.layer_v.iter_mut())
            .chain(std::iter::once(&mut self.head))
        {
            for x in g.iter_mut() {
                *x *= factor;
            }
        }
    }
}

/// One quantized-weight realization per trainable layer (grid values).
#[derive(Debug, Clone, PartialEq)]
pub struct DrawnWeights {
    pub layers: Vec<Vec<f64>>,
}

/// Deterministic network output before the head's probability map.
#[derive(Debug, Clone)]
pub enum DetOutput {
    /// Raw class logits (divide by s and softmax for probabilities).
    Logits(Vec<f64>),
    /// Regression mean w^T h; the predictive variance is the head's s.
    Value(f64),
}

impl NetworkGraph {
    pub fn new(
        input_shape: Shape,
        specs: Vec<LayerSpec>,
        head: HeadSpec,
        grid: Arc<QuantizationGrid>,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        let mut shapes = vec![input_shape];
        let mut shape = input_shape;
        // whether the current value is a Bernoulli sign output
        let mut bernoulli = false;
        for (idx, spec) in specs.iter().enumerate() {
            let built = match *spec {
                LayerSpec::Linear { outputs } => {
                    let conn = Connectivity::Dense { inputs: shape.units(), outputs };
                    shape = Shape::Flat(outputs);
                    bernoulli = false;
                    BuiltLayer::Linear(conn)
                }
                LayerSpec::Conv2d { out_channels, kernel, stride } => {
                    let (c, h, w) = match shape {
                        Shape::Image { channels, h, w } => (channels, h, w),
                        Shape::Flat(_) => {
                            return Err(BqnError::Wiring(format!(
                                "layer {idx}: conv2d needs an image input"
                            )));
                        }
                    };
                    if kernel > h || kernel > w || stride == 0 {
                        return Err(BqnError::Wiring(format!(
                            "layer {idx}: kernel {kernel}/stride {stride} does not fit {h}x{w}"
                        )));
                    }
                    let spec = Conv2dSpec {
                        in_channels: c,
                        in_h: h,
                        in_w: w,
                        out_channels,
                        kernel,
                        stride,
                    };
                    shape = Shape::Image {
                        channels: out_channels,
                        h: spec.out_h(),
                        w: spec.out_w(),
                    };
                    bernoulli = false;
                    BuiltLayer::Linear(Connectivity::Conv2d(spec))
                }
                LayerSpec::Sign => {
                    if bernoulli {
                        return Err(BqnError::Wiring(format!(
                            "layer {idx}: sign after sign has no effect on a binary grid"
                        )));
                    }
                    bernoulli = true;
                    BuiltLayer::Sign { units: shape.units() }
                }
                LayerSpec::AvgPool2d { window, stride } => {
                    let (c, h, w) = match shape {
                        Shape::Image { channels, h, w } => (channels, h, w),
                        Shape::Flat(_) => {
                            return Err(BqnError::Wiring(format!(
                                "layer {idx}: avgpool2d needs an image input"
                            )));
                        }
                    };
                    if !bernoulli {
                        return Err(BqnError::Wiring(format!(
                            "layer {idx}: avgpool2d must follow a sign activation"
                        )));
                    }
                    if window == 0 || stride == 0 || window > h || window > w {
                        return Err(BqnError::Wiring(format!(
                            "layer {idx}: pooling window {window}/stride {stride} does not fit"
                        )));
                    }
                    let out_h = (h - window) / stride + 1;
                    let out_w = (w - window) / stride + 1;
                    shape = Shape::Image { channels: c, h: out_h, w: out_w };
                    bernoulli = false;
                    BuiltLayer::AvgPool { in_shape: (c, h, w), window, stride }
                }
            };
            layers.push(built);
            shapes.push(shape);
        }
        match head {
            HeadSpec::Softmax { classes } => {
                if bernoulli || shape.units() != classes {
                    return Err(BqnError::Wiring(format!(
                        "softmax head needs {} pre-activations from a linear layer, got {} (bernoulli: {})",
                        classes,
                        shape.units(),
                        bernoulli
                    )));
                }
            }
            HeadSpec::Gaussian => {
                if !bernoulli {
                    return Err(BqnError::Wiring(
                        "gaussian head consumes a sign-activated hidden layer".into(),
                    ));
                }
            }
        }
        let trainable = layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_trainable())
            .map(|(i, _)| i)
            .collect();
        let head_inputs = shape.units();
        Ok(Self { input_shape, layers, head, grid, shapes, trainable, head_inputs })
    }

    pub fn n_trainable_layers(&self) -> usize {
        self.trainable.len()
    }

    pub fn head_inputs(&self) -> usize {
        self.head_inputs
    }

    /// Shape after each layer (index 0 is the input shape).
    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    /// Connectivity of the k-th trainable layer.
    pub fn trainable_connectivity(&self, k: usize) -> &Connectivity {
        match &self.layers[self.trainable[k]] {
            BuiltLayer::Linear(conn) => conn,
            _ => unreachable!("trainable index always points at a linear layer"),
        }
    }

    /// Length of the flattened head parameter group.
    pub fn head_param_len(&self) -> usize {
        match self.head {
            HeadSpec::Softmax { .. } => 1,
            HeadSpec::Gaussian => self.head_inputs + 1,
        }
    }

    pub fn softmax_head(&self, head_params: &[f64]) -> SoftmaxHead {
        match self.head {
            HeadSpec::Softmax { classes } => {
                SoftmaxHead { log_s: head_params[0], n_classes: classes }
            }
            HeadSpec::Gaussian => unreachable!("not a classification head"),
        }
    }

    pub fn gaussian_head(&self, head_params: &[f64]) -> GaussianHead {
        match self.head {
            HeadSpec::Gaussian => GaussianHead {
                weights: head_params[..self.head_inputs].to_vec(),
                log_s: head_params[self.head_inputs],
            },
            HeadSpec::Softmax { .. } => unreachable!("not a regression head"),
        }
    }

    /// Weight mean/variance per trainable layer, recomputed from the logits.
    pub fn prepare(&self, params: &ParamVector) -> Result<Prepared> {
        if params.groups.len() != self.trainable.len() + 1 {
            return Err(BqnError::Wiring(format!(
                "expected {} parameter groups, got {}",
                self.trainable.len() + 1,
                params.groups.len()
            )));
        }
        let d = self.grid.len();
        let mut layer_m = Vec::with_capacity(self.trainable.len());
        let mut layer_v = Vec::with_capacity(self.trainable.len());
        for (k, &idx) in self.trainable.iter().enumerate() {
            let conn = match &self.layers[idx] {
                BuiltLayer::Linear(c) => c,
                _ => unreachable!(),
            };
            let logits = &params.groups[k];
            if logits.len() != conn.n_weights() * d {
                return Err(BqnError::Wiring(format!(
                    "layer {idx}: expected {} logits, got {}",
                    conn.n_weights() * d,
                    logits.len()
                )));
            }
            let n = conn.n_weights();
            let mut m = Vec::with_capacity(n);
            let mut v = Vec::with_capacity(n);
            let mut probs = vec![0.0; d];
            for w in 0..n {
                crate::categorical::softmax_row(&logits[w * d..(w + 1) * d], &mut probs);
                let (mw, vw) = crate::categorical::row_moments(&probs, self.grid.values());
                m.push(mw);
                v.push(vw);
            }
            layer_m.push(m);
            layer_v.push(v);
        }
        if params.groups[self.trainable.len()].len() != self.head_param_len() {
            return Err(BqnError::Wiring("head parameter group length mismatch".into()));
        }
        Ok(Prepared { layer_m, layer_v })
    }

    pub fn zero_grads(&self) -> BatchGrads {
        BatchGrads {
            layer_m: self
                .trainable
                .iter()
                .map(|&i| match &self.layers[i] {
                    BuiltLayer::Linear(c) => vec![0.0; c.n_weights()],
                    _ => unreachable!(),
                })
                .collect(),
            layer_v: self
                .trainable
                .iter()
                .map(|&i| match &self.layers[i] {
                    BuiltLayer::Linear(c) => vec![0.0; c.n_weights()],
                    _ => unreachable!(),
                })
                .collect(),
            head: vec![0.0; self.head_param_len()],
        }
    }

    /// Analytic (moment/PMF) forward pass for one example.
    pub fn analytic_forward(&self, prepared: &Prepared, x: &[f64]) -> Result<ForwardTrace> {
        if x.len() != self.input_shape.units() {
            return Err(BqnError::Wiring(format!(
                "input has {} values, expected {}",
                x.len(),
                self.input_shape.units()
            )));
        }
        let mut stages = Vec::with_capacity(self.layers.len());
        let mut moments = MomentSummary::deterministic(x);
        // p(+1) per unit when the current value is a sign output
        let mut bernoulli: Option<Vec<f64>> = None;
        let mut train_idx = 0usize;

        for (idx, layer) in self.layers.iter().enumerate() {
            match layer {
                BuiltLayer::Linear(conn) => {
                    let input = moments;
                    let input_p = bernoulli.take();
                    let out = clt_forward_raw(
                        conn,
                        &prepared.layer_m[train_idx],
                        &prepared.layer_v[train_idx],
                        &input,
                    )?;
                    check_finite(&out, idx)?;
                    stages.push(StageRecord::Linear {
                        input,
                        input_p,
                        output: out.clone(),
                    });
                    moments = out;
                    train_idx += 1;
                }
                BuiltLayer::Sign { .. } => {
                    let p = sign_activation_probs(&moments);
                    stages.push(StageRecord::Sign { pre: moments, p: p.clone() });
                    moments = bernoulli_moments(&p);
                    bernoulli = Some(p);
                }
                BuiltLayer::AvgPool { in_shape, window, stride } => {
                    let p = bernoulli.take().expect("validated at build time");
                    let windows = pool_windows(*in_shape, *window, *stride);
                    let mut mu = Vec::with_capacity(windows.len());
                    let mut nu = Vec::with_capacity(windows.len());
                    let mut results = Vec::with_capacity(windows.len());
                    for win in &windows {
                        let pmfs: Vec<IntegerPmf> =
                            win.iter().map(|&u| IntegerPmf::bernoulli(p[u])).collect();
                        let r = avg_pool(&pmfs, win.len())?;
                        // map the {0,1} lattice average back to the +-1 scale
                        mu.push(2.0 * r.moments.mu[0] - 1.0);
                        nu.push(4.0 * r.moments.nu[0]);
                        results.push(r);
                    }
                    let out = MomentSummary::new(mu, nu);
                    check_finite(&out, idx)?;
                    stages.push(StageRecord::AvgPool { input_p: p, windows, results });
                    moments = out;
                }
            }
        }
        let head_input_p = bernoulli;
        Ok(ForwardTrace { stages, head_input: moments, head_input_p })
    }

    /// The per-example likelihood bound at the head.
    pub fn head_bound(
        &self,
        params: &ParamVector,
        trace: &ForwardTrace,
        target: Target,
    ) -> Result<f64> {
        let head_params = &params.groups[self.trainable.len()];
        match (&self.head, target) {
            (HeadSpec::Softmax { .. }, Target::Class(c)) => {
                self.softmax_head(head_params).bound(&trace.head_input, c)
            }
            (HeadSpec::Gaussian, Target::Value(y)) => {
                self.gaussian_head(head_params).bound(&trace.head_input, y)
            }
            _ => Err(BqnError::Argument("target kind does not match head".into())),
        }
    }

    /// Computes the bound for one example and accumulates its gradients
    /// (per-weight mean/variance and head parameters) into `grads`.
    pub fn backward_into(
        &self,
        prepared: &Prepared,
        params: &ParamVector,
        trace: &ForwardTrace,
        target: Target,
        grads: &mut BatchGrads,
    ) -> Result<f64> {
        let head_params = &params.groups[self.trainable.len()];
        // gradient wrt the value flowing out of the last layer
        let mut grad_mu: Vec<f64>;
        let mut grad_nu: Vec<f64>;
        let mut grad_p: Option<Vec<f64>> = None;
        let bound;
        match (&self.head, target) {
            (HeadSpec::Softmax { .. }, Target::Class(c)) => {
                let head = self.softmax_head(head_params);
                bound = head.bound(&trace.head_input, c)?;
                let g = head.bound_grads(&trace.head_input, c)?;
                // log-space chain rule for s
                grads.head[0] += g.grad_s * head.scale();
                grad_mu = g.grad_mu;
                grad_nu = g.grad_nu;
            }
            (HeadSpec::Gaussian, Target::Value(y)) => {
                let head = self.gaussian_head(head_params);
                bound = head.bound(&trace.head_input, y)?;
                let g = head.bound_grads(&trace.head_input, y)?;
                for (acc, gw) in grads.head.iter_mut().zip(&g.grad_w) {
                    *acc += gw;
                }
                grads.head[self.head_inputs] += g.grad_s * head.scale();
                // the head consumes Bernoulli moments: fold back to p
                let p = trace
                    .head_input_p
                    .as_ref()
                    .expect("gaussian head input is a sign output");
                grad_p = Some(moment_grads_to_p(p, &g.grad_mu, &g.grad_nu));
                grad_mu = Vec::new();
                grad_nu = Vec::new();
            }
            _ => return Err(BqnError::Argument("target kind does not match head".into())),
        }

        let mut train_idx = self.trainable.len();
        for stage in trace.stages.iter().rev() {
            match stage {
                StageRecord::Linear { input, input_p, .. } => {
                    train_idx -= 1;
                    let conn = self.trainable_connectivity(train_idx);
                    let back = clt_backward_raw(
                        conn,
                        &prepared.layer_m[train_idx],
                        &prepared.layer_v[train_idx],
                        input,
                        &grad_mu,
                        &grad_nu,
                    )?;
                    for (acc, g) in grads.layer_m[train_idx].iter_mut().zip(&back.grad_m) {
                        *acc += g;
                    }
                    for (acc, g) in grads.layer_v[train_idx].iter_mut().zip(&back.grad_v) {
                        *acc += g;
                    }
                    match input_p {
                        Some(p) => {
                            grad_p =
                                Some(moment_grads_to_p(p, &back.grad_mu, &back.grad_nu));
                        }
                        None => {
                            // deterministic input or pooled moments; the
                            // pool stage below consumes moment gradients
                            grad_mu = back.grad_mu;
                            grad_nu = back.grad_nu;
                            grad_p = None;
                        }
                    }
                }
                StageRecord::Sign { pre, p: _ } => {
                    let gp = grad_p.take().expect("sign output gradient is wrt p");
                    let (gm, gn) = sign_backward_probs(pre, &gp);
                    grad_mu = gm;
                    grad_nu = gn;
                }
                StageRecord::AvgPool { input_p, windows, results } => {
                    // incoming gradient is wrt pooled +-1 moments
                    let mut gp = vec![0.0; input_p.len()];
                    for (w, (win, r)) in windows.iter().zip(results).enumerate() {
                        // chain through the affine map back to the lattice
                        let gm_u = 2.0 * grad_mu[w];
                        let gn_u = 4.0 * grad_nu[w];
                        let pmfs: Vec<IntegerPmf> =
                            win.iter().map(|&u| IntegerPmf::bernoulli(input_p[u])).collect();
                        let per_input = avg_pool_backward(&pmfs, r, gm_u, gn_u)?;
                        for (&u, g) in win.iter().zip(&per_input) {
                            // d/dp of a {0,1} PMF [1-p, p]
                            gp[u] += g[1] - g[0];
                        }
                    }
                    grad_p = Some(gp);
                }
            }
        }
        Ok(bound)
    }

    /// Converts accumulated per-weight mean/variance gradients into logit
    /// gradients (a linear map, so batch sums pass through unchanged) and
    /// copies the head gradient, yielding a gradient with the same group
    /// layout as the parameters.
    pub fn grads_to_param_vector(
        &self,
        params: &ParamVector,
        grads: &BatchGrads,
    ) -> ParamVector {
        let d = self.grid.len();
        let mut groups = Vec::with_capacity(self.trainable.len() + 1);
        for k in 0..self.trainable.len() {
            let logits = &params.groups[k];
            let n = grads.layer_m[k].len();
            let mut out = vec![0.0; logits.len()];
            let mut probs = vec![0.0; d];
            let mut grad_q = vec![0.0; d];
            for w in 0..n {
                crate::categorical::softmax_row(&logits[w * d..(w + 1) * d], &mut probs);
                let (mw, _) = crate::categorical::row_moments(&probs, self.grid.values());
                for (dd, gq) in grad_q.iter_mut().enumerate() {
                    let q = self.grid.value(dd);
                    *gq = q * grads.layer_m[k][w]
                        + (q - mw) * (q - mw) * grads.layer_v[k][w];
                }
                crate::categorical::softmax_vjp_row(
                    &probs,
                    &grad_q,
                    &mut out[w * d..(w + 1) * d],
                );
            }
            groups.push(out);
        }
        groups.push(grads.head.clone());
        ParamVector { groups }
    }

    /// Analytic prediction for one example.
    pub fn predict_analytic(&self, params: &ParamVector, x: &[f64]) -> Result<Prediction> {
        let prepared = self.prepare(params)?;
        let trace = self.analytic_forward(&prepared, x)?;
        let head_params = &params.groups[self.trainable.len()];
        match self.head {
            HeadSpec::Softmax { .. } => {
                let head = self.softmax_head(head_params);
                Ok(Prediction::Class(head.predict(&trace.head_input, 2)))
            }
            HeadSpec::Gaussian => {
                let head = self.gaussian_head(head_params);
                let p = trace.head_input_p.as_ref().expect("sign output");
                let hidden = bernoulli_moments_with_higher(p);
                Ok(Prediction::Regression(head.predict(&hidden)?))
            }
        }
    }

    /// Draws one independent weight realization per trainable layer.
    pub fn sample_weights<R: Rng>(
        &self,
        params: &ParamVector,
        rng: &mut R,
    ) -> Result<DrawnWeights> {
        let mut layers = Vec::with_capacity(self.trainable.len());
        for k in 0..self.trainable.len() {
            let cv =
                CategoricalVector::new(params.groups[k].clone(), Arc::clone(&self.grid))?;
            layers.push(cv.sample(rng));
        }
        Ok(DrawnWeights { layers })
    }

    /// Per-weight MAP selection (argmax, ties toward the lowest grid index).
    pub fn map_weights(&self, params: &ParamVector) -> Result<DrawnWeights> {
        let mut layers = Vec::with_capacity(self.trainable.len());
        for k in 0..self.trainable.len() {
            let cv =
                CategoricalVector::new(params.groups[k].clone(), Arc::clone(&self.grid))?;
            layers.push(cv.map_select());
        }
        Ok(DrawnWeights { layers })
    }

    /// Standard deterministic quantized forward pass for a drawn weight
    /// realization: linear sums, sign activations (sign(0) = +1), window
    /// averages, and the head's final linear map.
    pub fn deterministic_forward(
        &self,
        params: &ParamVector,
        weights: &DrawnWeights,
        x: &[f64],
    ) -> Result<DetOutput> {
        if x.len() != self.input_shape.units() {
            return Err(BqnError::Wiring("input size mismatch".into()));
        }
        let mut act = x.to_vec();
        let mut train_idx = 0usize;
        for layer in &self.layers {
            match layer {
                BuiltLayer::Linear(conn) => {
                    let w = &weights.layers[train_idx];
                    let mut out = vec![0.0; conn.n_outputs()];
                    for (j, o) in out.iter_mut().enumerate() {
                        let mut sum = 0.0;
                        conn.for_each_edge(j, |i, wi| {
                            sum += w[wi] * act[i];
                        });
                        *o = sum;
                    }
                    act = out;
                    train_idx += 1;
                }
                BuiltLayer::Sign { .. } => {
                    for a in act.iter_mut() {
                        *a = if *a >= 0.0 { 1.0 } else { -1.0 };
                    }
                }
                BuiltLayer::AvgPool { in_shape, window, stride } => {
                    let windows = pool_windows(*in_shape, *window, *stride);
                    act = windows
                        .iter()
                        .map(|win| {
                            win.iter().map(|&u| act[u]).sum::<f64>() / win.len() as f64
                        })
                        .collect();
                }
            }
        }
        let head_params = &params.groups[self.trainable.len()];
        match self.head {
            HeadSpec::Softmax { .. } => Ok(DetOutput::Logits(act)),
            HeadSpec::Gaussian => {
                let head = self.gaussian_head(head_params);
                let mean = head
                    .weights
                    .iter()
                    .zip(&act)
                    .map(|(&w, &h)| w * h)
                    .sum::<f64>();
                Ok(DetOutput::Value(mean))
            }
        }
    }
}

fn check_finite(m: &MomentSummary, layer: usize) -> Result<()> {
    for (k, (&mu, &nu)) in m.mu.iter().zip(&m.nu).enumerate() {
        if !mu.is_finite() || !nu.is_finite() {
            return Err(BqnError::NonFinite {
                layer,
                what: format!("unit {k}: mu={mu}, nu={nu}"),
            });
        }
    }
    Ok(())
}

/// Moments of +-1 Bernoulli units: mu = 2p - 1, nu = 4p(1-p).
pub fn bernoulli_moments(p: &[f64]) -> MomentSummary {
    let mu: Vec<f64> = p.iter().map(|&p| 2.0 * p - 1.0).collect();
    let nu: Vec<f64> = p.iter().map(|&p| 4.0 * p * (1.0 - p)).collect();
    MomentSummary::new(mu, nu)
}

/// Bernoulli moments including normalized skewness and kurtosis, for the
/// regression head's predictive moments.
pub fn bernoulli_moments_with_higher(p: &[f64]) -> MomentSummary {
    let mut mu = Vec::with_capacity(p.len());
    let mut nu = Vec::with_capacity(p.len());
    let mut gamma = Vec::with_capacity(p.len());
    let mut kappa = Vec::with_capacity(p.len());
    for &p in p {
        let m = 2.0 * p - 1.0;
        let v = 4.0 * p * (1.0 - p);
        mu.push(m);
        nu.push(v);
        if v > 1e-300 {
            let c3 = p * (1.0 - m).powi(3) + (1.0 - p) * (-1.0 - m).powi(3);
            let c4 = p * (1.0 - m).powi(4) + (1.0 - p) * (-1.0 - m).powi(4);
            gamma.push(c3 / v.powf(1.5));
            kappa.push(c4 / (v * v));
        } else {
            gamma.push(0.0);
            kappa.push(3.0);
        }
    }
    MomentSummary::with_higher(mu, nu, gamma, kappa)
}

/// Chain rule from Bernoulli moment gradients back to p:
/// d mu/d p = 2, d nu/d p = 4 - 8p.
fn moment_grads_to_p(p: &[f64], grad_mu: &[f64], grad_nu: &[f64]) -> Vec<f64> {
    p.iter()
        .zip(grad_mu.iter().zip(grad_nu))
        .map(|(&p, (&gm, &gn))| 2.0 * gm + (4.0 - 8.0 * p) * gn)
        .collect()
}

/// Flat input indices of each pooling window, channel by channel.
fn pool_windows(
    (c, h, w): (usize, usize, usize),
    window: usize,
    stride: usize,
) -> Vec<Vec<usize>> {
    let out_h = (h - window) / stride + 1;
    let out_w = (w - window) / stride + 1;
    let mut windows = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut win = Vec::with_capacity(window * window);
                for ky in 0..window {
                    for kx in 0..window {
                        let iy = oy * stride + ky;
                        let ix = ox * stride + kx;
                        win.push(ch * h * w + iy * w + ix);
                    }
                }
                windows.push(win);
            }
        }
    }
    windows
}
