//! Modeling, analysis and control of actuators under power-supply limits.

pub mod bandwidth;
pub mod clfqp;
pub mod descfun;
pub mod error;
pub mod lincontrol;
pub mod model;
pub mod mpc;
pub mod nlcontrol;
pub mod optim;
pub mod par;
pub mod powerlim;
pub mod servo;
pub mod sim;
pub mod verify;

pub use error::{Error, Result};
