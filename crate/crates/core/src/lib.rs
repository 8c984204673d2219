//! Reconstruction of unreported per-record allocations from sparse
//! administrative tables.
//!
//! Records with an observed target train a regularized second-order
//! gradient-boosted tree regressor ([`gbt`]), tuned by a TPE search over
//! cross-validated RMSE ([`tune`]). Records that flag the activity but omit
//! the amount are then imputed with residual-sigma ranges ([`impute`]).

pub mod gbt;
pub mod impute;
pub mod metrics;
pub mod pipeline;
pub mod synth;
pub mod tabular;
pub mod tune;
