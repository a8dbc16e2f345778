//! Numerical laboratory for stochastic optimal control of fully coupled
//! forward-backward SDEs whose diffusion depends on `Z` and the control.

pub mod algebraic;
pub mod assumptions;
pub mod bench;
pub mod dpp;
pub mod exprdsl;
pub mod fbsde;
pub mod hjb;
pub mod io;
pub mod model;
pub mod regularity;
pub mod rng;
pub mod viscosity;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
