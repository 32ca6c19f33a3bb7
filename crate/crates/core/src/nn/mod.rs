//! Differentiable-computation substrate: a matrix tape with exact reverse-mode
//! gradients, the layer primitives the forecaster needs, and an optimizer.

mod layers;
mod optim;
mod params;
mod tape;

pub use layers::{random_orthogonal, Activation, AdditiveAttention, BiLstm, Conv2d, Dense, Gru, Lstm, ParamBuilder};
pub use optim::{optimizer_step, AdamConfig, AdamState, StepOutcome};
pub use params::{GradRecord, GroupLabel, Matrix, ParamEntry, ParamId, ParamStore};
pub use tape::{logsumexp, sigmoid, ConvGeometry, Tape, Var};
