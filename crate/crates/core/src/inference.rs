//! Activation inference by exact block-coordinate descent.
//!
//! Every scalar activation `z_{k,j}` enters the energy quadratically, so each
//! update is the closed-form minimizer along that coordinate followed by the
//! projection onto the layer's constraint set. Residual vectors are cached
//! and patched after every update, which makes one full sweep cost about two
//! passes over the weights.

use serde::{Deserialize, Serialize};

use crate::energy::{energy_unchecked, layer_residuals, ActivationState, ModelParams, FEASIBILITY_TOL};
use crate::error::{LrrnError, Result};
use crate::linalg::{axpy, cholesky_solve, dot, norm_sq, Matrix};

/// Residual caches are rebuilt from scratch this often to flush rounding drift.
const RESIDUAL_REFRESH: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    /// Maximum number of full coordinate passes.
    pub sweeps: usize,
    /// Stop once a sweep lowers the energy by less than `tolerance * (1 + |E|)`;
    /// zero disables early stopping.
    pub tolerance: f64,
    /// Fixes the output activation `z_L` when present.
    #[serde(default)]
    pub clamp_output: Option<Vec<f64>>,
}

impl InferenceConfig {
    pub fn new(sweeps: usize, tolerance: f64) -> Self {
        InferenceConfig { sweeps, tolerance, clamp_output: None }
    }

    /// 20 sweeps, as used inside training.
    pub fn training() -> Self {
        InferenceConfig::new(20, 1e-10)
    }

    /// Up to 200 sweeps with early stopping; the default for evaluation.
    pub fn evaluation() -> Self {
        InferenceConfig::new(200, 1e-10)
    }

    /// Runs exactly `sweeps` passes (no early stopping).
    pub fn fixed(sweeps: usize) -> Self {
        InferenceConfig::new(sweeps, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sweeps == 0 {
            return Err(LrrnError::InvalidConfig("inference sweeps must be >= 1".into()));
        }
        if !(self.tolerance >= 0.0) {
            return Err(LrrnError::InvalidConfig(format!("inference tolerance must be >= 0, got {}", self.tolerance)));
        }
        Ok(())
    }
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig::evaluation()
    }
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub state: ActivationState,
    /// Energy of `state`, evaluated from scratch.
    pub energy: f64,
    /// Energy of the starting point.
    pub initial_energy: f64,
    /// Energy after each completed sweep.
    pub sweep_energies: Vec<f64>,
}

impl Inference {
    pub fn output(&self) -> &[f64] {
        self.state.output()
    }
}

/// Per-model data reused across many inference calls: transposed weights and
/// the diagonal curvature of the energy along every activation coordinate.
#[derive(Debug, Clone)]
pub struct Solver<'a> {
    params: &'a ModelParams,
    w_t: Vec<Matrix>,
    discount: Vec<f64>,
    curvature: Vec<Vec<f64>>,
}

impl<'a> Solver<'a> {
    pub fn new(params: &'a ModelParams) -> Result<Self> {
        params.validate()?;
        let depth = params.depth();
        let discount: Vec<f64> = (0..depth).map(|k| params.discount_factor(k)).collect();
        let w_t = params.layers.iter().map(|l| l.w.transpose()).collect();
        let mut curvature = Vec::with_capacity(depth);
        for (k, layer) in params.layers.iter().enumerate() {
            let row_sq = layer.w.row_norms_sq();
            let mut coef: Vec<f64> = row_sq.iter().map(|r| discount[k] * (1.0 + layer.beta * r)).collect();
            if let Some(next) = params.layers.get(k + 1) {
                let col_sq = next.w.col_norms_sq();
                for (a, c) in coef.iter_mut().zip(col_sq) {
                    *a += discount[k + 1] * (c + next.beta);
                }
            }
            // The forward term alone contributes g_k > 0.
            debug_assert!(coef.iter().all(|&a| a >= discount[k]));
            curvature.push(coef);
        }
        Ok(Solver { params, w_t, discount, curvature })
    }

    pub fn params(&self) -> &ModelParams {
        self.params
    }

    /// Forward-pass warm start `z_{k+1} = Π_{C_{k+1}}(W_k z_k + b_k)`, with the
    /// output replaced by `clamp` when given.
    pub fn warm_start(&self, x: &[f64], clamp: Option<&[f64]>) -> ActivationState {
        let mut z: Vec<Vec<f64>> = Vec::with_capacity(self.params.depth());
        for (k, layer) in self.params.layers.iter().enumerate() {
            let input = if k == 0 { x } else { &z[k - 1] };
            let mut out = layer.w.matvec(input);
            for (o, b) in out.iter_mut().zip(&layer.b) {
                *o += b;
            }
            self.params.constraints[k].project_vec(&mut out);
            z.push(out);
        }
        if let Some(y) = clamp {
            *z.last_mut().expect("non-empty model") = y.to_vec();
        }
        ActivationState { z }
    }

    pub fn infer_free(&self, x: &[f64], cfg: &InferenceConfig) -> Result<Inference> {
        if cfg.clamp_output.is_some() {
            return Err(LrrnError::InvalidConfig("free inference called with a clamped output".into()));
        }
        self.params.check_input(x)?;
        cfg.validate()?;
        let init = self.warm_start(x, None);
        self.run(x, init, false, cfg)
    }

    pub fn infer_clamped(&self, x: &[f64], y: &[f64], cfg: &InferenceConfig) -> Result<Inference> {
        self.params.check_input(x)?;
        cfg.validate()?;
        self.check_clamp(y)?;
        let init = self.warm_start(x, Some(y));
        self.run(x, init, true, cfg)
    }

    /// Dispatches on `cfg.clamp_output`.
    pub fn infer(&self, x: &[f64], cfg: &InferenceConfig) -> Result<Inference> {
        match &cfg.clamp_output {
            Some(y) => {
                let free_cfg = InferenceConfig::new(cfg.sweeps, cfg.tolerance);
                self.infer_clamped(x, y, &free_cfg)
            }
            None => self.infer_free(x, cfg),
        }
    }

    /// Coordinate descent from a caller-supplied feasible starting point. When
    /// `cfg.clamp_output` is set the output layer of `init` is overwritten.
    pub fn infer_from(&self, x: &[f64], mut init: ActivationState, cfg: &InferenceConfig) -> Result<Inference> {
        self.params.check_input(x)?;
        cfg.validate()?;
        init.check_dims(self.params)?;
        let clamped = match &cfg.clamp_output {
            Some(y) => {
                self.check_clamp(y)?;
                *init.z.last_mut().expect("non-empty model") = y.clone();
                true
            }
            None => false,
        };
        init.check_feasible(self.params)?;
        self.run(x, init, clamped, cfg)
    }

    fn check_clamp(&self, y: &[f64]) -> Result<()> {
        let last = self.params.depth() - 1;
        if y.len() != self.params.output_dim() {
            return Err(LrrnError::dim(
                last,
                format!("clamped output has dimension {}, expected {}", y.len(), self.params.output_dim()),
            ));
        }
        let cons = self.params.output_constraint();
        if let Some(unit) = y.iter().position(|&v| !cons.contains(v, FEASIBILITY_TOL)) {
            return Err(LrrnError::Infeasible { layer: last, unit });
        }
        Ok(())
    }

    fn residuals(&self, x: &[f64], state: &ActivationState) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        self.params
            .layers
            .iter()
            .enumerate()
            .map(|(k, layer)| {
                let z_in = if k == 0 { x } else { &state.z[k - 1] };
                layer_residuals(layer, z_in, &state.z[k])
            })
            .unzip()
    }

    fn energy_from_residuals(&self, fwd: &[Vec<f64>], rec: &[Vec<f64>]) -> f64 {
        let mut total = 0.0;
        for (k, layer) in self.params.layers.iter().enumerate() {
            let mut term = norm_sq(&fwd[k]);
            if layer.beta != 0.0 {
                term += layer.beta * norm_sq(&rec[k]);
            }
            total += self.discount[k] * term;
        }
        0.5 * total
    }

    fn run(&self, x: &[f64], mut state: ActivationState, clamped: bool, cfg: &InferenceConfig) -> Result<Inference> {
        let depth = self.params.depth();
        let active_layers = if clamped { depth - 1 } else { depth };
        let (mut fwd, mut rec) = self.residuals(x, &state);
        let initial_energy = self.energy_from_residuals(&fwd, &rec);
        if !initial_energy.is_finite() {
            return Err(LrrnError::Diverged { sweep: 0 });
        }
        let mut sweep_energies = Vec::new();
        if active_layers > 0 {
            let mut previous = initial_energy;
            for sweep in 0..cfg.sweeps {
                for k in 0..active_layers {
                    self.sweep_layer(k, &mut state, &mut fwd, &mut rec);
                }
                if (sweep + 1) % RESIDUAL_REFRESH == 0 {
                    (fwd, rec) = self.residuals(x, &state);
                }
                let e = self.energy_from_residuals(&fwd, &rec);
                if !e.is_finite() {
                    return Err(LrrnError::Diverged { sweep });
                }
                sweep_energies.push(e);
                if cfg.tolerance > 0.0 && previous - e < cfg.tolerance * (1.0 + e.abs()) {
                    break;
                }
                previous = e;
            }
        }
        let energy = energy_unchecked(self.params, x, &state);
        Ok(Inference { state, energy, initial_energy, sweep_energies })
    }

    /// Updates every unit of activation `z_{k+1}` (output of layer `k`) once.
    fn sweep_layer(&self, k: usize, state: &mut ActivationState, fwd: &mut [Vec<f64>], rec: &mut [Vec<f64>]) {
        let layer = &self.params.layers[k];
        let cons = self.params.constraints[k];
        let g_here = self.discount[k];
        let beta_here = layer.beta;
        let next = self.params.layers.get(k + 1);
        let (fwd_here, fwd_rest) = fwd.split_at_mut(k + 1);
        let (rec_here, rec_rest) = rec.split_at_mut(k + 1);
        let fwd_here = &mut fwd_here[k];
        let rec_here = &mut rec_here[k];
        let z = &mut state.z[k];
        let curvature = &self.curvature[k];

        for j in 0..z.len() {
            let w_row = layer.w.row(j);
            let mut grad = fwd_here[j];
            if beta_here != 0.0 {
                grad += beta_here * dot(w_row, rec_here);
            }
            grad *= g_here;
            if let Some(next_layer) = next {
                let w_col = self.w_t[k + 1].row(j);
                let mut g_next = -dot(w_col, &fwd_rest[0]);
                if next_layer.beta != 0.0 {
                    g_next -= next_layer.beta * rec_rest[0][j];
                }
                grad += self.discount[k + 1] * g_next;
            }
            let old = z[j];
            let new = cons.project(old - grad / curvature[j]);
            let delta = new - old;
            if delta == 0.0 {
                continue;
            }
            z[j] = new;
            fwd_here[j] += delta;
            if beta_here != 0.0 {
                axpy(delta, w_row, rec_here);
            }
            if let Some(next_layer) = next {
                axpy(-delta, self.w_t[k + 1].row(j), &mut fwd_rest[0]);
                if next_layer.beta != 0.0 {
                    rec_rest[0][j] -= delta;
                }
            }
        }
    }
}

/// `z*(x) = argmin_z E(z; x)` with the output free.
pub fn infer_free(params: &ModelParams, x: &[f64], cfg: &InferenceConfig) -> Result<Inference> {
    Solver::new(params)?.infer_free(x, cfg)
}

/// `ẑ(x, y) = argmin_{z : z_L = y} E(z; x)`.
pub fn infer_clamped(params: &ModelParams, x: &[f64], y: &[f64], cfg: &InferenceConfig) -> Result<Inference> {
    Solver::new(params)?.infer_clamped(x, y, cfg)
}

/// Exact minimizer of a single unconstrained layer,
/// `(I + β W W^T)^{-1} ((1+β) W x + b + β W c)`.
pub fn closed_form_single_layer(w: &Matrix, b: &[f64], c: &[f64], beta: f64, x: &[f64]) -> Result<Vec<f64>> {
    let (d_out, d_in) = (w.rows(), w.cols());
    if b.len() != d_out || c.len() != d_in || x.len() != d_in {
        return Err(LrrnError::dim(
            0,
            format!("closed form: W is {d_out}x{d_in}, b {}, c {}, x {}", b.len(), c.len(), x.len()),
        ));
    }
    if !(beta >= 0.0) {
        return Err(LrrnError::InvalidParameter { layer: 0, detail: format!("beta must be >= 0, got {beta}") });
    }
    let mut system = w.matmul(&w.transpose());
    system.scale(beta);
    for i in 0..d_out {
        system[(i, i)] += 1.0;
    }
    let wx = w.matvec(x);
    let wc = w.matvec(c);
    let rhs: Vec<f64> = (0..d_out).map(|i| (1.0 + beta) * wx[i] + b[i] + beta * wc[i]).collect();
    cholesky_solve(&system, &rhs).ok_or_else(|| LrrnError::NonFinite("closed-form system".into()))
}
