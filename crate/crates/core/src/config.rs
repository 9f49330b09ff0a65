//! Experiment recipes as JSON documents.
//!
//! ```json
//! {
//!   "architecture": [784, 64, 64, 10],
//!   "betas": [1.0, 1.0, 0.0],
//!   "gamma": 0.125,
//!   "constraints": ["nonneg", "nonneg", "linear"],
//!   "train": { "mode": "supervised", "learning_rate": 0.4, "epochs": 100,
//!              "batch_size": 10, "weight_decay": 5e-5, "seed": 1 },
//!   "data": { "dir": "data/mnist", "train_limit": null, "test_limit": null },
//!   "output_dir": "runs/mnist-supervised"
//! }
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::energy::{ConstraintKind, DiscountConvention, ModelParams};
use crate::error::{LrrnError, Result};
use crate::inference::InferenceConfig;
use crate::training::{init_params, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Directory holding `<split>-images-idx3-ubyte` / `<split>-labels-idx1-ubyte`.
    pub dir: PathBuf,
    #[serde(default = "default_train_split")]
    pub train_split: String,
    #[serde(default = "default_test_split")]
    pub test_split: String,
    /// Use only the first `n` training samples.
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
}

fn default_train_split() -> String {
    "train".into()
}

fn default_test_split() -> String {
    "t10k".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Layer widths `d_0 - d_1 - ... - d_L`.
    pub architecture: Vec<usize>,
    pub betas: Vec<f64>,
    pub gamma: f64,
    /// Constraint of each layer output, e.g. `"nonneg"`, `"linear"`, `"box(-1,1)"`.
    pub constraints: Vec<String>,
    #[serde(default)]
    pub discount: DiscountConvention,
    pub train: TrainConfig,
    pub data: DataConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Held-out evaluation cadence in epochs (0 = final epoch only).
    #[serde(default)]
    pub eval_every: usize,
    /// Checkpoint cadence in epochs (0 = final checkpoint only).
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub eval_inference: InferenceConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| LrrnError::InvalidConfig(format!("config JSON: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn parsed_constraints(&self) -> Result<Vec<ConstraintKind>> {
        self.constraints.iter().map(|c| c.parse()).collect()
    }

    /// Every violated field; empty when the config is valid.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let layers = self.architecture.len().saturating_sub(1);
        if self.architecture.len() < 2 {
            v.push(format!("architecture must list at least input and output widths (got {:?})", self.architecture));
        }
        if self.architecture.iter().any(|&d| d == 0) {
            v.push("architecture widths must be >= 1".to_string());
        }
        if self.betas.len() != layers {
            v.push(format!("betas has {} entries, architecture has {layers} layers", self.betas.len()));
        }
        if let Some(b) = self.betas.iter().find(|b| !(**b >= 0.0) || !b.is_finite()) {
            v.push(format!("betas must be finite and >= 0 (got {b})"));
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            v.push(format!("gamma must be > 0 (got {})", self.gamma));
        }
        if self.constraints.len() != layers {
            v.push(format!("constraints has {} entries, architecture has {layers} layers", self.constraints.len()));
        }
        for c in &self.constraints {
            if let Err(e) = c.parse::<ConstraintKind>() {
                v.push(format!("constraints: {e}"));
            }
        }
        v.extend(self.train.violations().into_iter().map(|m| format!("train.{m}")));
        if let Err(e) = self.eval_inference.validate() {
            v.push(format!("eval_inference: {e}"));
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

    /// Checks the architecture against the data's input dimension.
    pub fn check_input_dim(&self, dim: usize) -> Result<()> {
        match self.architecture.first() {
            Some(&d) if d == dim => Ok(()),
            Some(&d) => Err(LrrnError::InvalidConfig(format!(
                "architecture input width {d} does not match data dimension {dim}"
            ))),
            None => Err(LrrnError::EmptyModel),
        }
    }

    /// Freshly initialized parameters for this recipe.
    pub fn init_model(&self) -> Result<ModelParams> {
        self.validate()?;
        let params = init_params(
            &self.architecture,
            &self.betas,
            &self.parsed_constraints()?,
            self.gamma,
            &self.train.init,
            self.train.seed,
        )?;
        Ok(params.with_discount(self.discount))
    }
}
