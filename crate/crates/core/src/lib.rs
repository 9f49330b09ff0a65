//! Lifted regression/reconstruction networks (LRRNs).
//!
//! An LRRN does not compute its activations with a forward pass. Each layer
//! contributes a regression term and a tied-weight reconstruction term to a
//! convex energy, and the activations are the constrained minimizer of that
//! energy. The reconstruction weight `β_k` bounds how much each layer can
//! expand distances, which yields a certified Lipschitz constant for the whole
//! input-to-output map.
//!
//! - [`energy`]: parameters, the energy and its parameter gradients
//! - [`inference`]: block-coordinate descent and the single-layer closed form
//! - [`cert`]: per-layer Lipschitz constants, margins and safe radii
//! - [`training`]: contrastive, free-energy and class-clamped SGD
//! - [`datasets`]: IDX loading, mirrored/Gaussian control sets, energy tables
//! - [`checkpoint`], [`pgm`], [`config`], [`selfcheck`]: files and tooling

pub mod cert;
pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod energy;
pub mod error;
pub mod inference;
pub mod linalg;
mod par;
pub mod pgm;
pub mod selfcheck;
pub mod training;

pub use cert::{
    certify, empirical_lipschitz_probe, layer_rho, margin_and_radius, network_lipschitz_bound, spectral_norm,
    CertReport, MarginFilter,
};
pub use energy::{
    energy, energy_gradients, ActivationState, ConstraintKind, DiscountConvention, Gradients, LayerParams, ModelParams,
};
pub use error::{LrrnError, Result};
pub use inference::{closed_form_single_layer, infer_clamped, infer_free, Inference, InferenceConfig, Solver};
pub use linalg::Matrix;
pub use training::{evaluate, TrainConfig, TrainMode, Trainer};
