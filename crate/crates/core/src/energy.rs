//! Model parameters and the layered regression/reconstruction energy
//!
//! ```text
//! E(z; x) = 1/2 Σ_k g_k ( |z_{k+1} - W_k z_k - b_k|² + β_k |W_k^T z_{k+1} - z_k - c_k|² )
//! ```
//!
//! with `z_0 = x`, `z_k ∈ C_k` and discount `g_k` derived from the feedback
//! parameter γ.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LrrnError, Result};
use crate::linalg::{axpy, norm_sq, Matrix};

/// Slack allowed when checking that an activation lies in its constraint set.
pub const FEASIBILITY_TOL: f64 = 1e-12;

/// Closed convex set an activation vector is confined to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ConstraintKind {
    /// The whole space (linear activation).
    Linear,
    /// The nonnegative orthant (ReLU-like activation).
    NonNeg,
    /// A coordinate box `[lo, hi]`; `Box(-1, 1)` gives a hard sigmoid.
    Box { lo: f64, hi: f64 },
}

impl ConstraintKind {
    pub fn validate(&self) -> Result<()> {
        if let ConstraintKind::Box { lo, hi } = *self {
            if !(lo < hi) || lo.is_nan() || hi.is_nan() {
                return Err(LrrnError::InvalidConfig(format!("box constraint needs lo < hi, got [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    /// Euclidean projection of a scalar onto the set.
    #[inline]
    pub fn project(&self, v: f64) -> f64 {
        match *self {
            ConstraintKind::Linear => v,
            ConstraintKind::NonNeg => v.max(0.0),
            ConstraintKind::Box { lo, hi } => v.clamp(lo, hi),
        }
    }

    pub fn project_vec(&self, v: &mut [f64]) {
        if *self != ConstraintKind::Linear {
            v.iter_mut().for_each(|x| *x = self.project(*x));
        }
    }

    pub fn contains(&self, v: f64, tol: f64) -> bool {
        match *self {
            ConstraintKind::Linear => v.is_finite(),
            ConstraintKind::NonNeg => v >= -tol,
            ConstraintKind::Box { lo, hi } => v >= lo - tol && v <= hi + tol,
        }
    }
}

impl fmt::Display for ConstraintKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConstraintKind::Linear => write!(f, "linear"),
            ConstraintKind::NonNeg => write!(f, "nonneg"),
            ConstraintKind::Box { lo, hi } => write!(f, "box({lo},{hi})"),
        }
    }
}

impl FromStr for ConstraintKind {
    type Err = LrrnError;

    /// Accepts `linear`, `nonneg`/`relu`, `hardsigmoid` and `box(lo,hi)`.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        let kind = match t.as_str() {
            "linear" | "identity" => ConstraintKind::Linear,
            "nonneg" | "relu" => ConstraintKind::NonNeg,
            "hardsigmoid" | "hard_sigmoid" => ConstraintKind::Box { lo: -1.0, hi: 1.0 },
            _ => {
                let inner = t
                    .strip_prefix("box(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(|| LrrnError::InvalidConfig(format!("unknown constraint '{s}'")))?;
                let (lo, hi) =
                    inner.split_once(',').ok_or_else(|| LrrnError::InvalidConfig(format!("malformed box '{s}'")))?;
                let parse = |v: &str| {
                    v.trim().parse::<f64>().map_err(|_| LrrnError::InvalidConfig(format!("malformed box '{s}'")))
                };
                ConstraintKind::Box { lo: parse(lo)?, hi: parse(hi)? }
            }
        };
        kind.validate()?;
        Ok(kind)
    }
}

/// One layer: forward weights `w` (d_out × d_in), forward bias `b` (d_out),
/// reconstruction bias `c` (d_in) and reconstruction weight `beta`. The
/// reconstruction weights are tied to `w^T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub w: Matrix,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub beta: f64,
}

impl LayerParams {
    pub fn new(w: Matrix, b: Vec<f64>, c: Vec<f64>, beta: f64) -> Self {
        LayerParams { w, b, c, beta }
    }

    /// Zero biases.
    pub fn from_weights(w: Matrix, beta: f64) -> Self {
        let (d_out, d_in) = (w.rows(), w.cols());
        LayerParams { w, b: vec![0.0; d_out], c: vec![0.0; d_in], beta }
    }

    #[inline]
    pub fn d_out(&self) -> usize {
        self.w.rows()
    }

    #[inline]
    pub fn d_in(&self) -> usize {
        self.w.cols()
    }

    pub fn validate(&self, index: usize) -> Result<()> {
        if self.b.len() != self.d_out() {
            return Err(LrrnError::dim(
                index,
                format!("forward bias has length {}, expected {}", self.b.len(), self.d_out()),
            ));
        }
        if self.c.len() != self.d_in() {
            return Err(LrrnError::dim(
                index,
                format!("reconstruction bias has length {}, expected {}", self.c.len(), self.d_in()),
            ));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(LrrnError::InvalidParameter {
                layer: index,
                detail: format!("beta must be finite and >= 0, got {}", self.beta),
            });
        }
        if !self.w.is_finite() || !self.b.iter().all(|v| v.is_finite()) || !self.c.iter().all(|v| v.is_finite()) {
            return Err(LrrnError::InvalidParameter { layer: index, detail: "non-finite weight or bias".into() });
        }
        Ok(())
    }
}

/// How the feedback parameter γ turns into per-term discounts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscountConvention {
    /// `g_k = γ^k`: the input-facing term has weight 1.
    #[default]
    Shifted,
    /// `g_k = γ^(k-1)`: every term carries an extra factor `1/γ`.
    AsPrinted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<LayerParams>,
    /// Constraint set of each layer's output activation, `z_1 .. z_L`.
    pub constraints: Vec<ConstraintKind>,
    pub gamma: f64,
    #[serde(default)]
    pub discount: DiscountConvention,
}

impl ModelParams {
    pub fn new(layers: Vec<LayerParams>, constraints: Vec<ConstraintKind>, gamma: f64) -> Result<Self> {
        let params = ModelParams { layers, constraints, gamma, discount: DiscountConvention::Shifted };
        params.validate()?;
        Ok(params)
    }

    pub fn with_discount(mut self, discount: DiscountConvention) -> Self {
        self.discount = discount;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(LrrnError::EmptyModel);
        }
        if self.constraints.len() != self.layers.len() {
            return Err(LrrnError::InvalidConfig(format!(
                "{} constraints for {} layers",
                self.constraints.len(),
                self.layers.len()
            )));
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(LrrnError::InvalidConfig(format!("gamma must be finite and > 0, got {}", self.gamma)));
        }
        for (k, layer) in self.layers.iter().enumerate() {
            layer.validate(k)?;
            self.constraints[k].validate()?;
            if k > 0 && layer.d_in() != self.layers[k - 1].d_out() {
                return Err(LrrnError::dim(
                    k,
                    format!(
                        "input dimension {} does not match previous output dimension {}",
                        layer.d_in(),
                        self.layers[k - 1].d_out()
                    ),
                ));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].d_out()
    }

    /// Layer widths `d_0, d_1, .., d_L`.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim()).chain(self.layers.iter().map(|l| l.d_out())).collect()
    }

    /// Discount applied to the terms of layer `k` (0-based).
    #[inline]
    pub fn discount_factor(&self, k: usize) -> f64 {
        match self.discount {
            DiscountConvention::Shifted => self.gamma.powi(k as i32),
            DiscountConvention::AsPrinted => self.gamma.powi(k as i32 - 1),
        }
    }

    pub fn output_constraint(&self) -> ConstraintKind {
        self.constraints[self.constraints.len() - 1]
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.w.rows() * l.w.cols() + l.b.len() + l.c.len()).sum()
    }

    pub(crate) fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(LrrnError::dim(0, format!("input has dimension {}, expected {}", x.len(), self.input_dim())));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(LrrnError::NonFinite("input".into()));
        }
        Ok(())
    }

    /// All trainable parameters, layer by layer as `W` (row-major), `b`, `c`.
    pub fn flat_params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.w.as_slice().iter().chain(&l.b).chain(&l.c).copied()).collect()
    }

    /// Mutable access to the `index`-th entry of [`ModelParams::flat_params`].
    pub fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for layer in &mut self.layers {
            let nw = layer.w.rows() * layer.w.cols();
            if index < nw {
                return &mut layer.w.as_mut_slice()[index];
            }
            index -= nw;
            if index < layer.b.len() {
                return &mut layer.b[index];
            }
            index -= layer.b.len();
            if index < layer.c.len() {
                return &mut layer.c[index];
            }
            index -= layer.c.len();
        }
        panic!("parameter index out of range");
    }

    /// Applies `θ ← θ + alpha · g` to every parameter.
    pub fn apply_update(&mut self, alpha: f64, grads: &Gradients) {
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            layer.w.add_scaled(alpha, &g.w);
            axpy(alpha, &g.b, &mut layer.b);
            axpy(alpha, &g.c, &mut layer.c);
        }
    }
}

/// Activations `z_1 .. z_L` for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationState {
    pub z: Vec<Vec<f64>>,
}

impl ActivationState {
    pub fn zeros(params: &ModelParams) -> Self {
        ActivationState { z: params.layers.iter().map(|l| vec![0.0; l.d_out()]).collect() }
    }

    pub fn output(&self) -> &[f64] {
        self.z.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn check_dims(&self, params: &ModelParams) -> Result<()> {
        if self.z.len() != params.depth() {
            return Err(LrrnError::dim(
                self.z.len().min(params.depth()),
                format!("state has {} layers, model has {}", self.z.len(), params.depth()),
            ));
        }
        for (k, (z, layer)) in self.z.iter().zip(&params.layers).enumerate() {
            if z.len() != layer.d_out() {
                return Err(LrrnError::dim(
                    k,
                    format!("activation has dimension {}, expected {}", z.len(), layer.d_out()),
                ));
            }
            if !z.iter().all(|v| v.is_finite()) {
                return Err(LrrnError::NonFinite(format!("activation of layer {k}")));
            }
        }
        Ok(())
    }

    pub fn check_feasible(&self, params: &ModelParams) -> Result<()> {
        for (k, (z, cons)) in self.z.iter().zip(&params.constraints).enumerate() {
            if let Some(unit) = z.iter().position(|&v| !cons.contains(v, FEASIBILITY_TOL)) {
                return Err(LrrnError::Infeasible { layer: k, unit });
            }
        }
        Ok(())
    }
}

/// Residuals of layer `k`: forward `z_{k+1} - W z_k - b` and reconstruction
/// `W^T z_{k+1} - z_k - c`.
pub(crate) fn layer_residuals(layer: &LayerParams, z_in: &[f64], z_out: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut fwd = layer.w.matvec(z_in);
    for ((f, &zo), &b) in fwd.iter_mut().zip(z_out).zip(&layer.b) {
        *f = zo - *f - b;
    }
    let mut rec = layer.w.matvec_t(z_out);
    for ((r, &zi), &c) in rec.iter_mut().zip(z_in).zip(&layer.c) {
        *r -= zi + c;
    }
    (fwd, rec)
}

fn check_all(params: &ModelParams, x: &[f64], state: &ActivationState) -> Result<()> {
    params.validate()?;
    params.check_input(x)?;
    state.check_dims(params)?;
    state.check_feasible(params)
}

/// Input of layer `k`: `x` for the first layer, `z_k` otherwise.
#[inline]
pub(crate) fn layer_input<'a>(x: &'a [f64], state: &'a ActivationState, k: usize) -> &'a [f64] {
    if k == 0 {
        x
    } else {
        &state.z[k - 1]
    }
}

pub fn energy(params: &ModelParams, x: &[f64], state: &ActivationState) -> Result<f64> {
    check_all(params, x, state)?;
    Ok(energy_unchecked(params, x, state))
}

pub(crate) fn energy_unchecked(params: &ModelParams, x: &[f64], state: &ActivationState) -> f64 {
    let mut total = 0.0;
    for (k, layer) in params.layers.iter().enumerate() {
        let (fwd, rec) = layer_residuals(layer, layer_input(x, state, k), &state.z[k]);
        total += params.discount_factor(k) * (norm_sq(&fwd) + layer.beta * norm_sq(&rec));
    }
    0.5 * total
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub w: Matrix,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

/// Gradient of a scalar objective with respect to every `W_k`, `b_k`, `c_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Gradients {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGradient {
                    w: Matrix::zeros(l.d_out(), l.d_in()),
                    b: vec![0.0; l.d_out()],
                    c: vec![0.0; l.d_in()],
                })
                .collect(),
        }
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w.add_scaled(alpha, &b.w);
            axpy(alpha, &b.b, &mut a.b);
            axpy(alpha, &b.c, &mut a.c);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for g in &mut self.layers {
            g.w.scale(alpha);
            g.b.iter_mut().for_each(|v| *v *= alpha);
            g.c.iter_mut().for_each(|v| *v *= alpha);
        }
    }

    /// Same ordering as [`ModelParams::flat_params`].
    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|g| g.w.as_slice().iter().chain(&g.b).chain(&g.c).copied()).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.layers.iter().flat_map(|g| g.w.as_slice().iter().chain(&g.b).chain(&g.c)).fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Parameter gradients of the energy at fixed activations.
pub fn energy_gradients(params: &ModelParams, x: &[f64], state: &ActivationState) -> Result<Gradients> {
    check_all(params, x, state)?;
    let mut grads = Gradients::zeros_like(params);
    accumulate_energy_gradients(params, x, state, 1.0, &mut grads);
    Ok(grads)
}

/// `grads += alpha * ∇_θ E(state; x)`, activations held fixed.
///
/// For layer k with forward residual `f` and reconstruction residual `r`:
/// `∂E/∂W = g_k (β z_{k+1} r^T - f z_k^T)`, `∂E/∂b = -g_k f`, `∂E/∂c = -g_k β r`.
pub fn accumulate_energy_gradients(
    params: &ModelParams,
    x: &[f64],
    state: &ActivationState,
    alpha: f64,
    grads: &mut Gradients,
) {
    for (k, (layer, g)) in params.layers.iter().zip(grads.layers.iter_mut()).enumerate() {
        let z_in = layer_input(x, state, k);
        let z_out = &state.z[k];
        let (fwd, rec) = layer_residuals(layer, z_in, z_out);
        let scale = alpha * params.discount_factor(k);
        g.w.add_outer(-scale, &fwd, z_in);
        axpy(-scale, &fwd, &mut g.b);
        if layer.beta != 0.0 {
            g.w.add_outer(scale * layer.beta, z_out, &rec);
            axpy(-scale * layer.beta, &rec, &mut g.c);
        }
    }
}
