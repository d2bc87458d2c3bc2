//! Federated averaging over synthetic, selection-biased users, with the
//! parameter-delta log exposed to re-identification and matching attacks and
//! to device-side mitigations.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which is what the harness uses.

pub mod attacks;
pub mod data;
pub mod error;
pub mod fed;
pub mod harness;
pub mod metrics;
pub mod mitigation;
pub mod nn;
pub mod scalar;
pub mod store;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Params = nn::ParamVector<f64>;
pub type World = data::DatasetBundle<f64>;
pub type Device = fed::DeviceState<f64>;
pub type Delta = fed::DeltaRecord<f64>;
pub type Attack = attacks::AttackDataset<f64>;
pub type Reid = attacks::ReidModel<f64>;
pub type Matcher = attacks::MatchModel<f64>;
