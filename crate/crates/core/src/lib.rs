//! Decoder-only transformer whose layers drop low-contribution hidden
//! activations at a preservation rate chosen at inference time.
//!
//! The pieces, bottom-up:
//!
//! * [`tensor`]: row-major tensors on a reverse-mode autodiff tape.
//! * [`policy`]: per-layer budgets and contribution-ranked selection.
//! * [`attention`]: causal attention that also reports per-position contributions.
//! * [`model`]: the pruning decoder, generation and checkpoints.
//! * [`trainer`]: uniform-rate fine-tuning and evaluation sweeps.
//! * [`cost`]: MAC counting, closed-form cost presets and rate calibration.
//! * [`trace`]: per-layer keep masks and their CSV/PGM/SVG exports.

pub mod attention;
pub mod cost;
pub mod error;
pub mod model;
pub mod par;
pub mod policy;
pub mod tasks;
pub mod tensor;
pub mod trace;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{ForwardOptions, ForwardResult, Head, Model, ModelConfig};
pub use par::Execution;
pub use policy::{PreservationPolicy, PruneMode};
pub use tensor::{Element, Graph, Mode, Precision, Var};
pub use trace::PreservationTrace;
