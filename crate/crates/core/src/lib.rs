//! Stability, Gaussian-fluctuation and cut-off analysis for the underdamped
//! Langevin dynamics
//!
//! ```text
//! dq = p dt
//! dp = -F(q) dt - gamma p dt + sqrt(2 eps) dB
//! ```
//!
//! in the small-noise regime.

pub mod covflow;
pub mod cutoff;
pub mod error;
pub mod gaussian;
pub mod harness;
pub mod linalg;
pub mod lyapunov;
pub mod model;
pub mod ode;
pub mod simulate;
pub mod stability;

pub use error::{Error, Result};
pub use model::{builtin_force, make_gradient_force, make_linear_force, ForceField, ModelSpec};
