//! Structure-preserving integrators for Hamiltonian systems.
//!
//! The crate covers fixed-step variational schemes (Störmer, velocity
//! Verlet, Newmark, implicit midpoint) with an explicit RK4 baseline,
//! energy-conserving extended-phase-space variants, symplectic-defect and
//! generating-function diagnostics, discrete canonical transformations and
//! a discrete maximum principle solver for optimal control.
//!
//! Phase-space vectors are stacked as `z = (q, p)` throughout.

// `!(x > 0.0)` style checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dct;
pub mod diagnostics;
pub mod error;
pub mod extended;
pub mod genfun;
pub mod integrators;
pub mod linalg;
pub mod newton;
pub mod optctrl;
pub mod report;
pub mod systems;

pub use error::{Error, Result};
pub use integrators::{integrate, Scheme, StepMeta, StepperConfig, Trajectory};
pub use systems::{
    ExtendedPhaseState, Hamiltonian, PhaseState, Potential, SeparableSystem, SystemKind,
};

pub type Vector = nalgebra::DVector<f64>;
pub type Matrix = nalgebra::DMatrix<f64>;
