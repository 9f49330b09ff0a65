//! Built-in oracle suite: each check compares the implementation against an
//! independent route to the same quantity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::cert::{empirical_lipschitz_probe, network_lipschitz_bound, single_layer_gain};
use crate::energy::{energy_gradients, energy_unchecked, ActivationState, ConstraintKind, LayerParams, ModelParams};
use crate::error::Result;
use crate::inference::{closed_form_single_layer, InferenceConfig, Solver};
use crate::linalg::{max_abs_diff, Matrix};

#[derive(Debug, Clone, Default)]
pub struct SelfCheckOptions {
    pub seed: u64,
    /// Negative control: perturbs the analytic gradient so the gradient
    /// oracle must fail.
    pub corrupt_gradient: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed discrepancy (or ratio, for the Lipschitz probe).
    pub observed: f64,
    /// Value the observation must not exceed.
    pub threshold: f64,
    pub detail: String,
}

/// Random model with Gaussian weights of variance `1/d_in` and small random biases.
pub fn random_model(
    rng: &mut impl Rng,
    dims: &[usize],
    betas: &[f64],
    constraints: &[ConstraintKind],
    gamma: f64,
) -> Result<ModelParams> {
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for k in 0..dims.len() - 1 {
        let (d_in, d_out) = (dims[k], dims[k + 1]);
        let s = 1.0 / (d_in as f64).sqrt();
        let w = Matrix::from_fn(d_out, d_in, |_, _| s * rng.sample::<f64, _>(StandardNormal));
        let b = (0..d_out).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
        let c = (0..d_in).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
        layers.push(LayerParams::new(w, b, c, betas[k]));
    }
    ModelParams::new(layers, constraints.to_vec(), gamma)
}

pub fn random_vector(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Random activations projected onto each layer's constraint set.
pub fn random_feasible_state(rng: &mut impl Rng, params: &ModelParams) -> ActivationState {
    ActivationState {
        z: params
            .layers
            .iter()
            .zip(&params.constraints)
            .map(|(l, c)| {
                let mut v = random_vector(rng, l.d_out());
                c.project_vec(&mut v);
                v
            })
            .collect(),
    }
}

/// Central differences of the energy in every parameter, activations fixed.
pub fn finite_difference_gradient(params: &ModelParams, x: &[f64], state: &ActivationState, step: f64) -> Vec<f64> {
    let n = params.flat_params().len();
    let mut probe = params.clone();
    (0..n)
        .map(|i| {
            let orig = *probe.param_mut(i);
            *probe.param_mut(i) = orig + step;
            let plus = energy_unchecked(&probe, x, state);
            *probe.param_mut(i) = orig - step;
            let minus = energy_unchecked(&probe, x, state);
            *probe.param_mut(i) = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Largest violation of `|a - b| ≤ max(abs_tol, rel_tol·max(|a|,|b|))`,
/// reported as the ratio of the error to its allowance (≤ 1 passes).
pub fn gradient_agreement(analytic: &[f64], numeric: &[f64], abs_tol: f64, rel_tol: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let allowed = abs_tol.max(rel_tol * a.abs().max(n.abs()));
            (a - n).abs() / allowed
        })
        .fold(0.0, f64::max)
}

fn check_closed_form(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let mut worst: f64 = 0.0;
    for trial in 0..12 {
        let d_in = 2 + trial % 7;
        let d_out = 1 + (trial * 5) % 8;
        let beta = [0.0, 0.5, 1.0, 4.0][trial % 4];
        let params = random_model(rng, &[d_in, d_out], &[beta], &[ConstraintKind::Linear], 1.0)?;
        let x = random_vector(rng, d_in);
        let l = &params.layers[0];
        let exact = closed_form_single_layer(&l.w, &l.b, &l.c, beta, &x)?;
        let bcd = Solver::new(&params)?.infer_free(&x, &InferenceConfig::fixed(3000))?;
        worst = worst.max(max_abs_diff(bcd.output(), &exact));
    }
    Ok(CheckOutcome {
        name: "closed-form vs coordinate descent",
        passed: worst <= 1e-8,
        observed: worst,
        threshold: 1e-8,
        detail: "12 unconstrained single-layer models, max-norm error".into(),
    })
}

fn check_gradients(rng: &mut ChaCha8Rng, corrupt: bool) -> Result<CheckOutcome> {
    let configs: [(&[usize], &[f64], &[ConstraintKind]); 3] = [
        (&[5, 4], &[0.7], &[ConstraintKind::Linear]),
        (&[6, 5, 3], &[1.0, 0.0], &[ConstraintKind::NonNeg, ConstraintKind::Linear]),
        (
            &[4, 6, 5, 3],
            &[2.0, 1.0, 0.0],
            &[ConstraintKind::Box { lo: -1.0, hi: 1.0 }, ConstraintKind::NonNeg, ConstraintKind::Linear],
        ),
    ];
    let mut worst: f64 = 0.0;
    for (dims, betas, cons) in configs {
        let params = random_model(rng, dims, betas, cons, 0.5)?;
        let x = random_vector(rng, dims[0]);
        let state = random_feasible_state(rng, &params);
        let mut analytic = energy_gradients(&params, &x, &state)?.flatten();
        if corrupt {
            analytic.iter_mut().for_each(|g| *g *= 1.01);
            analytic[0] += 1e-3;
        }
        let numeric = finite_difference_gradient(&params, &x, &state, 1e-5);
        worst = worst.max(gradient_agreement(&analytic, &numeric, 1e-6, 1e-5));
    }
    Ok(CheckOutcome {
        name: "parameter gradients vs finite differences",
        passed: worst <= 1.0,
        observed: worst,
        threshold: 1.0,
        detail: "error / max(1e-6, 1e-5·|g|), worst entry over 3 models".into(),
    })
}

fn check_gain_maximum() -> CheckOutcome {
    let mut worst: f64 = 0.0;
    for beta in [0.1f64, 0.5, 1.0, 2.0, 4.0] {
        let rho = 0.5 * (beta.sqrt() + 1.0 / beta.sqrt());
        let grid_max = (1..=100_000).map(|i| single_layer_gain(beta, i as f64 * 1e-4)).fold(0.0, f64::max);
        let at_peak = single_layer_gain(beta, 1.0 / beta.sqrt());
        worst = worst.max((at_peak - rho).abs()).max((grid_max - rho).max(0.0));
    }
    CheckOutcome {
        name: "single-layer gain peaks at (√β+1/√β)/2",
        passed: worst <= 1e-9,
        observed: worst,
        threshold: 1e-9,
        detail: "β ∈ {0.1,0.5,1,2,4}, σ grid (0,10] step 1e-4".into(),
    }
}

fn check_lipschitz_probe(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let relu = ConstraintKind::NonNeg;
    let models: [(&[usize], &[f64]); 3] =
        [(&[6, 8, 4], &[1.0, 1.0]), (&[6, 8, 4], &[1.0, 0.0]), (&[6, 5, 4], &[0.0, 0.0])];
    let mut worst = f64::NEG_INFINITY;
    for (dims, betas) in models {
        let params = random_model(rng, dims, betas, &[relu, relu], 1.0)?;
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..100)
            .map(|_| {
                let a = random_vector(rng, dims[0]);
                let b: Vec<f64> = a.iter().map(|v| v + 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
                (a, b)
            })
            .collect();
        let probe = empirical_lipschitz_probe(&params, &pairs, &InferenceConfig::new(5000, 1e-15))?;
        worst = worst.max(probe.max_ratio - network_lipschitz_bound(&params));
    }
    Ok(CheckOutcome {
        name: "empirical Lipschitz ratio within product bound",
        passed: worst <= 1e-4,
        observed: worst,
        threshold: 1e-4,
        detail: "max ratio minus bound over 3 ReLU models, 100 pairs each".into(),
    })
}

/// Runs every oracle; deterministic for a given seed.
pub fn run_selfcheck(opts: &SelfCheckOptions) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    Ok(vec![
        check_closed_form(&mut rng)?,
        check_gradients(&mut rng, opts.corrupt_gradient)?,
        check_gain_maximum(),
        check_lipschitz_probe(&mut rng)?,
    ])
}
