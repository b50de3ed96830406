//! Differentiable building blocks and the Adam optimizer.

mod adam;
mod gradcheck;
mod layers;
mod params;
mod tape;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{gradient_check, relative_error};
pub use layers::{bilstm, cross_entropy, linear, lstm, softmax_rows, LstmVars, LEAKY_SLOPE};
pub use params::{Initializer, ModelParams, NamedTensor};
pub use tape::{BatchStats, Gradients, Tape, Var};

/// Batch-norm behaviour for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated by the caller.
    Train,
    /// Running statistics.
    Eval,
}

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running statistics.
pub const BN_MOMENTUM: f64 = 0.1;
