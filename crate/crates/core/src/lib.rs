//! Streaming sketches of spatio-temporal count tensors.
//!
//! The toolkit samples time slices of a `time × space × space` tensor with a
//! forecast-driven PID controller, then recovers the dropped slices and the
//! latent factors through a weighted CP factorization whose temporal mode is
//! regularized by aggregated autoregressive coefficients.
//!
//! Module map:
//!
//! * [`tensor`]: dense/sparse tensors, matricization, Khatri-Rao, MTTKRP.
//! * [`arima`]: per-fiber ARIMA fitting and forecasting, slice feedback error.
//! * [`projection`]: random model training, fiber bucketing, coefficient aggregation.
//! * [`sketcher`]: the adaptive sampler and the fixed/random baselines.
//! * [`skesmooth`]: AR regularizer, objective, gradients and L-BFGS factorization.
//! * [`metrics`]: factor match score, tensor completion score, RMSE.
//! * [`synth`] and [`ingest`]: synthetic streams and CSV event rasterization.
//! * [`pipeline`]: end-to-end runs, θ calibration and the experiment grid.
//!
//! Data-parallel inner loops run on rayon when the `parallel` feature is on
//! (the default). Every parallel path has a sequential twin selected through
//! [`Exec`], and both produce bit-identical results.

pub mod arima;
pub mod error;
pub mod exec;
pub mod ingest;
pub mod metrics;
pub mod pipeline;
pub mod projection;
pub mod sketcher;
pub mod skesmooth;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use exec::Exec;
