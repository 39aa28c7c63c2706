//! Numerical laboratory for the two-dimensional logistic Keller–Segel system
//!
//! ```text
//! u_t = Δu − χ∇·(u∇v) + κu − μu²,   v_t = Δv − v + u/(1 + εu)
//! ```
//!
//! with homogeneous Neumann data on a rectangle, started from integrable but
//! not square-integrable initial densities. The crate integrates the
//! ε-regularised system, builds a superlinear convex weight Φ adapted to the
//! initial family, and evaluates the a priori functionals of the system
//! against their bounds.

pub mod convergence;
pub mod error;
pub mod estimates;
pub mod grid;
pub mod harness;
pub mod quadrature;
pub mod rough_data;
pub mod solver;
pub mod weight_phi;

pub use error::{Error, Result};
pub use grid::{Field, GridSpec};
