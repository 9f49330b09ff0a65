//! Stochastic-gradient training.
//!
//! Activations are inferred first; the parameter gradient of the energy is
//! then taken with the activations held fixed, which is exact at the optimum
//! by the envelope theorem.
//!
//! - supervised: contrastive loss `E(ẑ(x,y); x) - E(z*(x); x)`
//! - unsupervised: mean free energy `E(z*(x); x)`
//! - class-clamped: mean clamped energy `E(ẑ(x,y); x)`
//!
//! An optional Frobenius penalty `λ‖W_{L-1}‖²` acts on the last weight matrix.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::datasets::{one_hot, Dataset};
use crate::energy::{accumulate_energy_gradients, ConstraintKind, Gradients, LayerParams, ModelParams};
use crate::error::{LrrnError, Result};
use crate::inference::{InferenceConfig, Solver};
use crate::linalg::Matrix;
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Supervised,
    Unsupervised,
    ClassClamped,
}

/// Weight initialization: entries uniform in `±scale·√(6/(d_in+d_out))`,
/// layer `k` additionally multiplied by `γ^(k·depth_exponent)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    #[serde(default = "default_init_scale")]
    pub scale: f64,
    #[serde(default = "default_depth_exponent")]
    pub depth_exponent: f64,
}

fn default_init_scale() -> f64 {
    1.0
}

fn default_depth_exponent() -> f64 {
    0.5
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig { scale: default_init_scale(), depth_exponent: default_depth_exponent() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// λ of the `λ‖W_{L-1}‖_F²` penalty.
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "InferenceConfig::training")]
    pub inference: InferenceConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub init: InitConfig,
}

impl TrainConfig {
    pub fn new(mode: TrainMode, learning_rate: f64, epochs: usize, batch_size: usize) -> Self {
        TrainConfig {
            mode,
            learning_rate,
            epochs,
            batch_size,
            weight_decay: 0.0,
            inference: InferenceConfig::training(),
            seed: 0,
            init: InitConfig::default(),
        }
    }

    /// Every violated constraint, one message per field.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            v.push(format!("learning_rate must be > 0 (got {})", self.learning_rate));
        }
        if self.epochs == 0 {
            v.push("epochs must be >= 1 (got 0)".to_string());
        }
        if self.batch_size == 0 {
            v.push("batch_size must be >= 1 (got 0)".to_string());
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            v.push(format!("weight_decay must be >= 0 (got {})", self.weight_decay));
        }
        if let Err(e) = self.inference.validate() {
            v.push(e.to_string());
        }
        if !(self.init.scale > 0.0) {
            v.push(format!("init.scale must be > 0 (got {})", self.init.scale));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(LrrnError::InvalidConfig(v.join("; ")))
        }
    }
}

/// Random weights, zero biases.
pub fn init_params(
    dims: &[usize],
    betas: &[f64],
    constraints: &[ConstraintKind],
    gamma: f64,
    init: &InitConfig,
    seed: u64,
) -> Result<ModelParams> {
    if dims.len() < 2 {
        return Err(LrrnError::EmptyModel);
    }
    let depth = dims.len() - 1;
    if betas.len() != depth || constraints.len() != depth {
        return Err(LrrnError::InvalidConfig(format!(
            "{depth} layers need {depth} betas and constraints, got {} and {}",
            betas.len(),
            constraints.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(depth);
    for k in 0..depth {
        let (d_in, d_out) = (dims[k], dims[k + 1]);
        let bound = init.scale * (6.0 / (d_in + d_out) as f64).sqrt() * gamma.powf(k as f64 * init.depth_exponent);
        let w = Matrix::from_fn(d_out, d_in, |_, _| rng.gen_range(-bound..=bound));
        layers.push(LayerParams::from_weights(w, betas[k]));
    }
    ModelParams::new(layers, constraints.to_vec(), gamma)
}

/// One training example; `target` is the one-hot clamp for supervised modes.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub x: &'a [f64],
    pub target: Option<&'a [f64]>,
}

/// Averaged parameter gradient and mean loss of one batch.
pub fn batch_gradient(
    params: &ModelParams,
    mode: TrainMode,
    batch: &[Example<'_>],
    weight_decay: f64,
    inference: &InferenceConfig,
) -> Result<(Gradients, f64)> {
    if batch.is_empty() {
        return Err(LrrnError::EmptyDataset);
    }
    let solver = Solver::new(params)?;
    let per_sample = par::map_indexed(batch.len(), |i| -> Result<(Gradients, f64)> {
        let ex = batch[i];
        let mut g = Gradients::zeros_like(params);
        let target = || ex.target.ok_or_else(|| LrrnError::InvalidConfig("supervised example without target".into()));
        let loss = match mode {
            TrainMode::Supervised => {
                let clamped = solver.infer_clamped(ex.x, target()?, inference)?;
                let free = solver.infer_free(ex.x, inference)?;
                accumulate_energy_gradients(params, ex.x, &clamped.state, 1.0, &mut g);
                accumulate_energy_gradients(params, ex.x, &free.state, -1.0, &mut g);
                clamped.energy - free.energy
            }
            TrainMode::Unsupervised => {
                let free = solver.infer_free(ex.x, inference)?;
                accumulate_energy_gradients(params, ex.x, &free.state, 1.0, &mut g);
                free.energy
            }
            TrainMode::ClassClamped => {
                let clamped = solver.infer_clamped(ex.x, target()?, inference)?;
                accumulate_energy_gradients(params, ex.x, &clamped.state, 1.0, &mut g);
                clamped.energy
            }
        };
        Ok((g, loss))
    });

    let inv = 1.0 / batch.len() as f64;
    let mut total = Gradients::zeros_like(params);
    let mut loss = 0.0;
    for (i, r) in per_sample.into_iter().enumerate() {
        let (g, l) = r.map_err(|e| e.at_sample(i))?;
        total.add_scaled(inv, &g);
        loss += l * inv;
    }
    if weight_decay > 0.0 {
        let last = params.depth() - 1;
        total.layers[last].w.add_scaled(2.0 * weight_decay, &params.layers[last].w);
    }
    Ok((total, loss))
}

fn sgd_step(params: &mut ModelParams, mode: TrainMode, batch: &[Example<'_>], cfg: &TrainConfig) -> Result<f64> {
    let (grad, loss) = batch_gradient(params, mode, batch, cfg.weight_decay, &cfg.inference)?;
    params.apply_update(-cfg.learning_rate, &grad);
    Ok(loss)
}

/// Contrastive update; returns the mean batch loss before the update.
pub fn contrastive_step(params: &mut ModelParams, batch: &[(&[f64], &[f64])], cfg: &TrainConfig) -> Result<f64> {
    let ex: Vec<Example<'_>> = batch.iter().map(|&(x, y)| Example { x, target: Some(y) }).collect();
    sgd_step(params, TrainMode::Supervised, &ex, cfg)
}

/// Free-energy update; returns the mean free energy before the update.
pub fn unsupervised_step(params: &mut ModelParams, batch: &[&[f64]], cfg: &TrainConfig) -> Result<f64> {
    let ex: Vec<Example<'_>> = batch.iter().map(|&x| Example { x, target: None }).collect();
    sgd_step(params, TrainMode::Unsupervised, &ex, cfg)
}

/// Clamped-energy update; returns the mean clamped energy before the update.
pub fn class_clamped_step(params: &mut ModelParams, batch: &[(&[f64], &[f64])], cfg: &TrainConfig) -> Result<f64> {
    let ex: Vec<Example<'_>> = batch.iter().map(|&(x, y)| Example { x, target: Some(y) }).collect();
    sgd_step(params, TrainMode::ClassClamped, &ex, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// `None` for unlabeled data.
    pub accuracy: Option<f64>,
    pub mean_free_energy: f64,
}

/// Accuracy of `argmax z_L*(x)` and mean free energy over a dataset.
pub fn evaluate(params: &ModelParams, dataset: &Dataset, cfg: &InferenceConfig) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(LrrnError::EmptyDataset);
    }
    let solver = Solver::new(params)?;
    let results = par::map_indexed(dataset.len(), |i| -> Result<(usize, f64)> {
        let inf = solver.infer_free(&dataset.images[i], cfg).map_err(|e| e.at_sample(i))?;
        Ok((argmax(inf.output()), inf.energy))
    });
    let mut correct = 0usize;
    let mut energy = 0.0;
    for (i, r) in results.into_iter().enumerate() {
        let (pred, e) = r?;
        energy += e;
        if dataset.label(i) == Some(pred as u8) {
            correct += 1;
        }
    }
    let n = dataset.len() as f64;
    Ok(Evaluation { accuracy: dataset.labels.as_ref().map(|_| correct as f64 / n), mean_free_energy: energy / n })
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = j;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub mean_free_energy: Option<f64>,
    pub wall_time: f64,
}

pub const LOG_HEADER: &str = "epoch,split,loss,accuracy,mean_free_energy,wall_time";

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        format!(
            "{},{},{:?},{},{},{:.3}",
            self.epoch,
            self.split,
            self.loss,
            opt(self.accuracy),
            opt(self.mean_free_energy),
            self.wall_time
        )
    }
}

/// Where and how often [`Trainer::fit`] writes checkpoints and evaluates.
#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Evaluate on the held-out set every this many epochs (0 = only at the end).
    pub eval_every: usize,
    /// Write a checkpoint every this many epochs (0 = never).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// Inference settings for held-out evaluation.
    pub eval_inference: InferenceConfig,
}

/// Owns the parameters and the data-order RNG of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub params: ModelParams,
    pub config: TrainConfig,
    rng: ChaCha8Rng,
    epochs_done: usize,
}

impl Trainer {
    pub fn new(params: ModelParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        params.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        // Data order uses its own stream so it does not depend on how many
        // draws initialization consumed.
        rng.set_stream(1);
        Ok(Trainer { params, config, rng, epochs_done: 0 })
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    /// One pass over `data` in a freshly shuffled order; returns the mean batch loss.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(LrrnError::EmptyDataset);
        }
        let mode = self.config.mode;
        if mode != TrainMode::Unsupervised && data.labels.is_none() {
            return Err(LrrnError::Unlabeled);
        }
        let classes = self.params.output_dim();
        if let Some(max) = data.labels.as_ref().and_then(|l| l.iter().max()) {
            if mode != TrainMode::Unsupervised && *max as usize >= classes {
                return Err(LrrnError::InvalidConfig(format!(
                    "label {max} does not fit an output layer of width {classes}"
                )));
            }
        }
        let targets: Vec<Vec<f64>> = match (&data.labels, mode) {
            (Some(_), TrainMode::Supervised | TrainMode::ClassClamped) => {
                (0..classes).map(|c| one_hot(c as u8, classes)).collect()
            }
            _ => Vec::new(),
        };
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<Example<'_>> = chunk
                .iter()
                .map(|&i| Example {
                    x: &data.images[i],
                    target: data.label(i).filter(|_| !targets.is_empty()).map(|l| targets[l as usize].as_slice()),
                })
                .collect();
            loss_sum += sgd_step(&mut self.params, mode, &batch, &self.config)?;
            batches += 1;
        }
        self.epochs_done += 1;
        Ok(loss_sum / batches as f64)
    }

    /// Runs `config.epochs` epochs, writing one CSV log line per epoch (train
    /// loss) and per evaluation (held-out accuracy and free energy).
    pub fn fit(
        &mut self,
        train: &Dataset,
        held_out: Option<&Dataset>,
        opts: &FitOptions,
        log: &mut dyn Write,
    ) -> Result<Vec<EpochRecord>> {
        let start = Instant::now();
        let mut records = Vec::new();
        writeln!(log, "{LOG_HEADER}")?;
        for _ in 0..self.config.epochs {
            let loss = self.train_epoch(train)?;
            let epoch = self.epochs_done;
            let rec = EpochRecord {
                epoch,
                split: "train".into(),
                loss,
                accuracy: None,
                mean_free_energy: None,
                wall_time: start.elapsed().as_secs_f64(),
            };
            writeln!(log, "{}", rec.csv_line())?;
            records.push(rec);

            let last = epoch == self.config.epochs;
            if let Some(test) = held_out {
                if last || (opts.eval_every > 0 && epoch % opts.eval_every == 0) {
                    let ev = evaluate(&self.params, test, &opts.eval_inference)?;
                    let rec = EpochRecord {
                        epoch,
                        split: "test".into(),
                        loss: f64::NAN,
                        // Unsupervised outputs are not class scores.
                        accuracy: ev.accuracy.filter(|_| self.config.mode != TrainMode::Unsupervised),
                        mean_free_energy: Some(ev.mean_free_energy),
                        wall_time: start.elapsed().as_secs_f64(),
                    };
                    writeln!(log, "{}", rec.csv_line())?;
                    records.push(rec);
                }
            }
            if let Some(dir) = &opts.checkpoint_dir {
                if opts.checkpoint_every > 0 && epoch % opts.checkpoint_every == 0 {
                    checkpoint::save(&self.params, &dir.join(format!("epoch-{epoch:04}.lrrn")))?;
                }
            }
            log.flush()?;
        }
        Ok(records)
    }
}
