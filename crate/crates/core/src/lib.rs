//! Simulation and optimization library for federated learning over the air
//! with an active reconfigurable intelligent surface (RIS).
//!
//! The crate is organized bottom-up:
//!
//! - [`linalg`]: a small dense complex linear-algebra kernel (Hermitian
//!   solves, LU, seeded complex-Gaussian sampling) that everything else
//!   builds on.
//! - [`channel`]: scenario geometry to per-round channel realizations
//!   (path loss, Rician fading, RIS self-interference).
//! - [`airlink`]: active-RIS reflection models, the AirComp transmit and
//!   receive chain, gradient normalization, and the closed-form error and
//!   power expressions.
//! - [`optimizer`]: the two-layer alternating optimization of the receive
//!   beamformer, transmit coefficients, and RIS configuration.
//! - [`fltrain`]: federated training loops over the simulated link, plus
//!   the convergence-bound checker.

pub mod airlink;
pub mod channel;
pub mod fltrain;
pub mod linalg;
pub mod optimizer;

pub use linalg::C64;
