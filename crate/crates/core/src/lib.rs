//! Spectral analysis of Koopman operators from trajectory data.

pub mod dynamics;
pub mod error;
pub mod finite_section;
pub mod gla;
pub mod krylov;
pub mod numerics;
pub mod observables;
pub mod svd_dmd;
pub mod weak_eig;

pub use error::{KoopError, Result};
pub use numerics::{CMatrix, C64};
