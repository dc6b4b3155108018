//! Diagnostics toolkit for small CNNs built around channel-contribution
//! decision patterns.
//!
//! The crate trains tiny conv nets with exact hand-written gradients,
//! extracts per-sample decision patterns (how target-layer channels
//! support a class logit), measures how far test-time patterns drift from
//! their class's training reference, and relates that drift to the
//! per-sample generalization gap. A scenario harness generates synthetic
//! datasets covering ideal generalization through domain shift, OOD,
//! shortcut learning, and label noise, and emits plot-ready reports.

pub mod engine;
pub mod error;
pub mod io;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod pattern;
pub mod report;
pub mod rng;
pub mod scenario;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{DpsError, Result};
pub use model::{LayerSpec, ModelCheckpoint};
pub use pattern::{ActivationBaseline, ClassReference, DecisionPattern, Split};
pub use tensor::{Batch, Tensor};
