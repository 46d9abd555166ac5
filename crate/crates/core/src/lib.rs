//! Simulation and attack-detection toolkit for islanded inverter-based
//! microgrids with distributed secondary control.

pub mod attack;
pub mod cli;
pub mod detector;
pub mod error;
pub mod dg;
pub mod microgrid;
pub mod numerics;
pub mod observer;
pub mod stability;

pub use error::{Error, Result};
