//! Factor-aware latent world model over ordered CT slice sequences.
//!
//! The crate is organized bottom-up:
//!
//! - [`phantom`]: synthetic slice studies, HU windowing, slice labels, template reports
//! - [`diffcore`]: tensors, reverse-mode tape, parameter stores, checkpoints
//! - [`model`]: slice encoder, causal prefix encoder, factor heads, world tokens, decoder
//! - [`objectives`]: predictive, factor-aware, counterfactual and report losses
//! - [`trainer`]: two-stage optimization with AdamW
//! - [`eval`]: baselines, probes, interventions, robustness, significance

pub mod diffcore;
pub mod error;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod phantom;
pub mod trainer;

pub use error::{Error, Result};
