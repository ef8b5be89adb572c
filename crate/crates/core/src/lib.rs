//! Online-scaled delta-rule fast-weight kernels.
//!
//! The layer keeps a matrix memory `S` written by a delta-rule step whose
//! write-side key is rescaled by a diagonal preconditioner `d`. The
//! preconditioner is learned online from a closed-form hypergradient that
//! depends only on keys and gates, so it runs as a separate `O(K)` sweep
//! (phase 1) ahead of the state-side pass (phase 2).
//!
//! Modules:
//! - [`types`]: validated inputs and states.
//! - [`precond`]: hypergradient, preconditioner step, phase-1 sweep.
//! - [`recurrent`]: exact token-by-token recurrences for all backbones.
//! - [`chunk`]: chunkwise WY forward kernels (64- and 32-bit).
//! - [`backward`]: reverse-mode gradients through the recurrent layer.
//! - [`theory`]: residual-contraction audits on quadratic problems and traces.
//! - [`diag`]: synthetic replay, equivalence grid, benchmarks and reports.
//! - [`container`]: on-disk tensor container and CSV/JSON helpers.

pub mod backward;
pub mod chunk;
pub mod container;
pub mod diag;
pub mod error;
pub mod precond;
pub mod recurrent;
pub mod theory;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    Dims, FastWeightState, GateSequence, Orientation, PrecondConfig, PreconditionerState,
    ResidualRecord, ResidualTrace, RetentionMode, TokenStream, WriteKeySequence,
};
