//! Joint trajectory and beamforming design for a UAV that serves ground
//! users while sensing targets.

// `!(x > 0.0)` rejects NaN along with non-positive values; index loops
// mirror the slot/user/antenna subscripts of the models.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod ao;
pub mod audit;
pub mod beamforming;
pub mod channel;
pub mod conic;
pub mod error;
pub mod plan;
pub mod power;
pub mod scalar;
pub mod scenario;
pub mod trajectory;

pub use scalar::{Scalar, Vec2};
pub use scenario::{default_scenario, load_scenario, smoke_scenario, Scenario};

pub type PowerParams = power::PowerParams<f64>;
pub type ArrayGeometry = channel::ArrayGeometry<f64>;
