//! Orbital stabilization of periodic motions of control-affine systems.
//!
//! The crate works along a user-supplied periodic orbit `s ↦ x_s(s)` of
//! `ẋ = f(x) + g(x)u`:
//!
//! * [`projection`] builds the orthogonal projection operator `p(x)` and the
//!   frame `Γ(s)`, `Ω(s)`, `ρ(s)` along the orbit;
//! * [`transverse`] assembles transverse linearizations (excessive, general and
//!   minimal coordinates), the comparison system and the reduced subsystem;
//! * [`floquet`] computes monodromy matrices, characteristic exponents and the
//!   associated stability verdicts;
//! * [`riccati`] synthesizes periodic gains from the periodic Riccati
//!   differential equation;
//! * [`sim`] closes the loop on the nonlinear system and on the linearization.
//!
//! [`systems`] ships the built-in example systems and the name-keyed registry.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynsys;
mod error;
pub mod floquet;
pub mod interp;
pub mod linalg;
pub mod ode;
pub mod plin;
pub mod projection;
pub mod riccati;
pub mod sim;
pub mod systems;
pub mod transverse;

pub use dynsys::{ControlAffineSystem, OrbitParameterization};
pub use error::{Error, Result};
pub use floquet::{Closure, FloquetSpectrum, Verdict};
pub use plin::PeriodicLinearSystem;
pub use projection::ProjectionFrame;
pub use riccati::{GainSchedule, RiccatiSolution, RiccatiWeights};
pub use sim::SimulationTrace;

/// Library version, embedded in reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Uniform grid `s0 + i·period/(size-1)`, `i = 0..size`, closing on `s0 + period`.
pub fn periodic_grid(s0: f64, period: f64, size: usize) -> Vec<f64> {
    let step = period / (size - 1) as f64;
    (0..size)
        .map(|i| if i + 1 == size { s0 + period } else { s0 + i as f64 * step })
        .collect()
}
