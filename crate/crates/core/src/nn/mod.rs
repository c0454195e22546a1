//! Dense layers, batch containers, parameters and the optimiser.

pub mod adam;
pub mod frames;
pub mod init;
pub mod layers;
pub mod ops;
pub mod param;

#[cfg(test)]
pub(crate) mod testutil;

pub use adam::{Adam, AdamConfig};
pub use frames::Frames;
pub use layers::{BatchNorm1d, Conv1d, Linear, TdnnBlock};
pub use ops::{Activation, Mode};
pub use param::{ParamRole, Parameter, ParameterSet, Params};
