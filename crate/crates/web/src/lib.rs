//! Browser bindings for a small interactive LRRN demo.
//!
//! Three operations are exposed to the page:
//!
//! - the single-layer gain curve `f_β(σ)` next to its bound `ρ(β)`;
//! - a 2-D → 2-D toy network whose input/output map can be probed point by
//!   point, with the observed distance ratio compared to the certified bound;
//! - the per-sweep energy trace of block-coordinate descent for one input.
//!
//! All functions are plain Rust as well, so the demo logic is tested natively.

use lrrn::cert::{layer_rho as rho_of_layer, network_lipschitz_bound, single_layer_gain};
use lrrn::linalg::{norm, sub};
use lrrn::selfcheck::random_model;
use lrrn::{ActivationState, ConstraintKind, InferenceConfig, LayerParams, Matrix, ModelParams, Solver};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

const TOY_HIDDEN: usize = 12;
const TOY_GAMMA: f64 = 0.5;
const TOY_SWEEPS: usize = 400;
const TOY_TOLERANCE: f64 = 1e-13;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// `ρ(β) = (√β + 1/√β) / 2`, the Lipschitz constant of a layer with `β > 0`.
#[wasm_bindgen]
pub fn layer_rho(beta: f64) -> f64 {
    rho_of_layer(&LayerParams::from_weights(Matrix::identity(1), beta))
}

/// `f_β(σ)` sampled at `n` evenly spaced points on `[0, sigma_max]`.
#[wasm_bindgen]
pub fn gain_curve(beta: f64, sigma_max: f64, n: usize) -> Vec<f64> {
    let step = if n > 1 { sigma_max / (n - 1) as f64 } else { 0.0 };
    (0..n).map(|i| single_layer_gain(beta, i as f64 * step)).collect()
}

/// A 2 → hidden → 2 network with a ReLU hidden layer and a linear output.
#[wasm_bindgen]
pub struct ToyNetwork {
    params: ModelParams,
}

#[wasm_bindgen]
impl ToyNetwork {
    /// Random weights from `seed`; `beta_out = 0` drops the output layer's
    /// reconstruction term, so its constant becomes the weight spectral norm.
    #[wasm_bindgen(constructor)]
    pub fn new(beta_hidden: f64, beta_out: f64, seed: u64) -> Result<ToyNetwork, JsError> {
        if !(beta_hidden >= 0.0 && beta_out >= 0.0) {
            return Err(JsError::new("betas must be non-negative"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = random_model(
            &mut rng,
            &[2, TOY_HIDDEN, 2],
            &[beta_hidden, beta_out],
            &[ConstraintKind::NonNeg, ConstraintKind::Linear],
            TOY_GAMMA,
        )
        .map_err(js_err)?;
        Ok(ToyNetwork { params })
    }

    /// Certified bound `∏ ρ_k` on the input-to-output Lipschitz constant.
    pub fn bound(&self) -> f64 {
        network_lipschitz_bound(&self.params)
    }

    /// Output `z_L*(x)` for the input `(x0, x1)`.
    pub fn output(&self, x0: f64, x1: f64) -> Result<Vec<f64>, JsError> {
        let solver = Solver::new(&self.params).map_err(js_err)?;
        let inf = solver.infer_free(&[x0, x1], &toy_config()).map_err(js_err)?;
        Ok(inf.output().to_vec())
    }

    /// Outputs for an `n × n` grid over `[lo, hi]²`, row-major, two values per
    /// point.
    pub fn map_grid(&self, lo: f64, hi: f64, n: usize) -> Result<Vec<f64>, JsError> {
        let solver = Solver::new(&self.params).map_err(js_err)?;
        let step = if n > 1 { (hi - lo) / (n - 1) as f64 } else { 0.0 };
        let mut out = Vec::with_capacity(2 * n * n);
        for r in 0..n {
            for c in 0..n {
                let x = [lo + c as f64 * step, lo + r as f64 * step];
                out.extend_from_slice(solver.infer_free(&x, &toy_config()).map_err(js_err)?.output());
            }
        }
        Ok(out)
    }

    /// `‖z_L*(a) - z_L*(b)‖ / ‖a - b‖`; zero when the inputs coincide.
    pub fn lipschitz_ratio(&self, a0: f64, a1: f64, b0: f64, b1: f64) -> Result<f64, JsError> {
        let dx = norm(&sub(&[a0, a1], &[b0, b1]));
        if dx == 0.0 {
            return Ok(0.0);
        }
        let za = self.output(a0, a1)?;
        let zb = self.output(b0, b1)?;
        Ok(norm(&sub(&za, &zb)) / dx)
    }

    /// Energy at the start and after each of `sweeps` descent passes for the
    /// input `(x0, x1)`, starting from all-zero activations.
    pub fn energy_trace(&self, x0: f64, x1: f64, sweeps: usize) -> Result<Vec<f64>, JsError> {
        let solver = Solver::new(&self.params).map_err(js_err)?;
        let start = ActivationState::zeros(&self.params);
        let inf = solver.infer_from(&[x0, x1], start, &InferenceConfig::fixed(sweeps.max(1))).map_err(js_err)?;
        let mut trace = vec![inf.initial_energy];
        trace.extend(inf.sweep_energies);
        Ok(trace)
    }
}

fn toy_config() -> InferenceConfig {
    InferenceConfig::new(TOY_SWEEPS, TOY_TOLERANCE)
}
