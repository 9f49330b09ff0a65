//! Lipschitz certification.
//!
//! Layer `k` of an LRRN maps its input to its activation with Lipschitz
//! constant `ρ_k = (√β_k + 1/√β_k)/2` when `β_k > 0` and `‖W_k‖₂` when
//! `β_k = 0`; the end-to-end map `x ↦ z_L*(x)` is bounded by the product.
//! A prediction with margin `m` is stable under any perturbation of norm at
//! most `m / (√2 ρ)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::energy::{LayerParams, ModelParams};
use crate::error::{LrrnError, Result};
use crate::inference::{InferenceConfig, Solver};
use crate::linalg::{norm, sub, Matrix};
use crate::par;

pub const POWER_ITERATION_TOL: f64 = 1e-10;
pub const POWER_ITERATION_MAX_ITERS: usize = 10_000;
const POWER_ITERATION_SEED: u64 = 0x5eed_1a2b;

/// Per-layer Lipschitz constant.
pub fn layer_rho(layer: &LayerParams) -> f64 {
    if layer.beta > 0.0 {
        let s = layer.beta.sqrt();
        0.5 * (s + 1.0 / s)
    } else {
        spectral_norm(&layer.w, POWER_ITERATION_TOL)
    }
}

/// `(1+β)σ / (1+βσ²)`: the gain of an unconstrained single layer along a
/// singular direction with singular value `σ`.
pub fn single_layer_gain(beta: f64, sigma: f64) -> f64 {
    (1.0 + beta) * sigma / (1.0 + beta * sigma * sigma)
}

/// Largest singular value by power iteration on `W^T W`, started from a fixed
/// pseudo-random unit vector. Stops when successive estimates agree to `tol`
/// (relative) or after [`POWER_ITERATION_MAX_ITERS`] iterations.
pub fn spectral_norm(w: &Matrix, tol: f64) -> f64 {
    if w.rows() == 0 || w.cols() == 0 || w.as_slice().iter().all(|&v| v == 0.0) {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_ITERATION_SEED);
    let mut v: Vec<f64> = (0..w.cols()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);

    let mut u = vec![0.0; w.rows()];
    let mut estimate = 0.0;
    for _ in 0..POWER_ITERATION_MAX_ITERS {
        w.matvec_into(&v, &mut u);
        let sigma = norm(&u);
        w.matvec_t_into(&u, &mut v);
        let n = norm(&v);
        if n == 0.0 {
            // Start vector orthogonal to the row space; restart on a basis vector.
            v.iter_mut().for_each(|x| *x = 0.0);
            v[0] = 1.0;
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        if (sigma - estimate).abs() <= tol * sigma {
            estimate = sigma;
            break;
        }
        estimate = sigma;
    }
    // Final Rayleigh estimate with the converged direction.
    w.matvec_into(&v, &mut u);
    norm(&u).max(estimate)
}

/// `∏_k ρ_k`: certified Lipschitz constant of `x ↦ z_L*(x)`.
pub fn network_lipschitz_bound(params: &ModelParams) -> f64 {
    params.layers.iter().map(layer_rho).product()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Margin {
    pub predicted: usize,
    /// Top activation minus the runner-up; never negative.
    pub margin: f64,
    /// Certified safe perturbation radius `margin / (√2 ρ)`.
    pub radius: f64,
    /// Whether `predicted` matches the label, when one was supplied.
    pub correct: Option<bool>,
}

/// Margin of the predicted label (lowest index on ties) and its safe radius.
pub fn margin_and_radius(output: &[f64], true_label: Option<usize>, rho: f64) -> Margin {
    assert!(output.len() >= 2, "margin needs at least two outputs");
    let mut predicted = 0;
    for (j, &v) in output.iter().enumerate().skip(1) {
        if v > output[predicted] {
            predicted = j;
        }
    }
    let runner_up =
        output.iter().enumerate().filter(|&(j, _)| j != predicted).map(|(_, &v)| v).fold(f64::NEG_INFINITY, f64::max);
    let margin = output[predicted] - runner_up;
    Margin { predicted, margin, radius: safe_radius(margin, rho), correct: true_label.map(|l| l == predicted) }
}

#[inline]
pub fn safe_radius(margin: f64, rho: f64) -> f64 {
    margin.max(0.0) / (std::f64::consts::SQRT_2 * rho)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub max_ratio: f64,
    pub pairs_evaluated: usize,
    /// Pairs skipped because the two inputs coincide.
    pub skipped: usize,
}

/// Largest observed `‖z_L*(x₁) - z_L*(x₂)‖ / ‖x₁ - x₂‖` over the given pairs.
pub fn empirical_lipschitz_probe(
    params: &ModelParams,
    pairs: &[(Vec<f64>, Vec<f64>)],
    cfg: &InferenceConfig,
) -> Result<ProbeResult> {
    let solver = Solver::new(params)?;
    let ratios = par::map_indexed(pairs.len(), |i| -> Result<Option<f64>> {
        let (a, b) = &pairs[i];
        let dx = norm(&sub(a, b));
        if dx == 0.0 {
            return Ok(None);
        }
        let za = solver.infer_free(a, cfg).map_err(|e| e.at_sample(i))?;
        let zb = solver.infer_free(b, cfg).map_err(|e| e.at_sample(i))?;
        Ok(Some(norm(&sub(za.output(), zb.output())) / dx))
    });
    let mut max_ratio: f64 = 0.0;
    let mut evaluated = 0;
    let mut skipped = 0;
    for r in ratios {
        match r? {
            Some(r) => {
                max_ratio = max_ratio.max(r);
                evaluated += 1;
            }
            None => skipped += 1,
        }
    }
    Ok(ProbeResult { max_ratio, pairs_evaluated: evaluated, skipped })
}

/// Which samples enter the margin statistics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginFilter {
    #[default]
    All,
    CorrectOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertSummary {
    pub mean_margin: f64,
    pub median_margin: f64,
    /// Population standard deviation.
    pub std_margin: f64,
    /// `median_margin / (√2 ρ)`.
    pub median_radius: f64,
    pub accuracy: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertReport {
    pub rho_per_layer: Vec<f64>,
    pub rho_product: f64,
    pub margins: Vec<f64>,
    pub safe_radii: Vec<f64>,
    pub predicted: Vec<usize>,
    pub filter: MarginFilter,
    pub summary: CertSummary,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Infers `z_L*(x)` for every test sample and assembles the certificate.
pub fn certify(
    params: &ModelParams,
    dataset: &Dataset,
    cfg: &InferenceConfig,
    filter: MarginFilter,
) -> Result<CertReport> {
    let labels = dataset.labels.as_ref().ok_or(LrrnError::Unlabeled)?;
    if dataset.is_empty() {
        return Err(LrrnError::EmptyDataset);
    }
    if params.output_dim() < 2 {
        return Err(LrrnError::InvalidConfig("certification needs at least two output units".into()));
    }
    let rho_per_layer: Vec<f64> = params.layers.iter().map(layer_rho).collect();
    let rho_product: f64 = rho_per_layer.iter().product();
    let solver = Solver::new(params)?;
    let results = par::map_indexed(dataset.len(), |i| -> Result<Margin> {
        let inf = solver.infer_free(&dataset.images[i], cfg).map_err(|e| e.at_sample(i))?;
        Ok(margin_and_radius(inf.output(), Some(labels[i] as usize), rho_product))
    });
    let results: Vec<Margin> = results.into_iter().collect::<Result<_>>()?;

    let correct = results.iter().filter(|m| m.correct == Some(true)).count();
    let accuracy = correct as f64 / results.len() as f64;
    let kept: Vec<&Margin> =
        results.iter().filter(|m| filter == MarginFilter::All || m.correct == Some(true)).collect();
    let margins: Vec<f64> = kept.iter().map(|m| m.margin).collect();
    let safe_radii: Vec<f64> = kept.iter().map(|m| m.radius).collect();
    let predicted: Vec<usize> = kept.iter().map(|m| m.predicted).collect();
    let (mean_margin, std_margin) = mean_std(&margins);
    let median_margin = median(&margins);
    Ok(CertReport {
        rho_per_layer,
        rho_product,
        summary: CertSummary {
            mean_margin,
            median_margin,
            std_margin,
            median_radius: safe_radius(median_margin, rho_product),
            accuracy,
            samples: margins.len(),
        },
        margins,
        safe_radii,
        predicted,
        filter,
    })
}

pub const TABLE_COLUMNS: [&str; 6] = ["ρ", "mean(m)", "median(m)", "std(m)", "median δ", "accuracy"];

impl CertReport {
    /// Aligned plain-text table, one row per named report.
    pub fn render_table(rows: &[(&str, &CertReport)]) -> String {
        let name_width = rows.iter().map(|(n, _)| n.chars().count()).max().unwrap_or(0).max(5);
        let mut out = String::new();
        let _ = write!(out, "{:<name_width$}", "model");
        for col in TABLE_COLUMNS {
            let _ = write!(out, "  {col:>10}");
        }
        out.push('\n');
        for (name, r) in rows {
            let s = &r.summary;
            let _ = writeln!(
                out,
                "{:<name_width$}  {:>10.4}  {:>10.4}  {:>10.4}  {:>10.4}  {:>10.4}  {:>9.2}%",
                name,
                r.rho_product,
                s.mean_margin,
                s.median_margin,
                s.std_margin,
                s.median_radius,
                100.0 * s.accuracy
            );
        }
        out
    }

    /// Machine-readable `key=value` lines; floats use shortest round-trip form.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "rho={:?}", self.rho_product);
        for (k, r) in self.rho_per_layer.iter().enumerate() {
            let _ = writeln!(out, "rho_layer_{k}={r:?}");
        }
        let s = &self.summary;
        let _ = writeln!(out, "mean_margin={:?}", s.mean_margin);
        let _ = writeln!(out, "median_margin={:?}", s.median_margin);
        let _ = writeln!(out, "std_margin={:?}", s.std_margin);
        let _ = writeln!(out, "median_radius={:?}", s.median_radius);
        let _ = writeln!(out, "accuracy={:?}", s.accuracy);
        let _ = writeln!(out, "samples={}", s.samples);
        let _ = writeln!(
            out,
            "margin_filter={}",
            match self.filter {
                MarginFilter::All => "all",
                MarginFilter::CorrectOnly => "correct_only",
            }
        );
        out
    }
}

/// Parses the output of [`CertReport::to_key_values`].
pub fn parse_key_values(text: &str) -> BTreeMap<String, String> {
    text.lines().filter_map(|l| l.split_once('=')).map(|(k, v)| (k.trim().to_string(), v.trim().to_string())).collect()
}
