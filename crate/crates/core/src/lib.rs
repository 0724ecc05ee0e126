//! Grid-based ride-hailing demand forecasting with spatiotemporal external
//! factors: trip rasterization, factor encoding, a CNN + LSTM forecaster
//! trained with MAE and Adam, and a rolling evaluation harness in which
//! predictions are fed back as inputs.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod evaluation;
pub mod grid;
pub mod model;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
