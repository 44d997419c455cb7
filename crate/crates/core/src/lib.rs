//! Numerical toolkit for the operator-valued WKB correction of long-time Schrödinger
//! dynamics with slowly decaying, angularly rough potentials.
//!
//! * [`sphere`]: spherical-harmonic transforms, the Laplace–Beltrami operator and the
//!   exact free flow on the unit sphere.
//! * [`potentials`]: the potential families and a numerical audit of their decay bounds.
//! * [`propagator`]: the sphere evolution `ik y_tau = B y / tau^2 + V y`, its k-derivatives
//!   and the scalar phase modification.
//! * [`modified`]: the corrected free dynamics on `R^3`, the Dollard phase, Cook
//!   residuals and the intertwining check.
//! * [`schrodinger`]: split-step evolution of `d psi/dt = i H psi` on a periodic box.

pub mod modified;
pub mod potentials;
pub mod propagator;
pub mod schrodinger;
pub mod sphere;

pub use num_complex::Complex64;

/// Errors shared by every module.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("grid too coarse for l_max={l_max}: n_lat={n_lat}, n_lon={n_lon}")]
    GridTooCoarse { l_max: usize, n_lat: usize, n_lon: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid wavenumber k={0}")]
    InvalidWavenumber(f64),
    #[error("invalid tau={0}: the sphere flow requires tau > 0 (tau >= 1 for potentials)")]
    InvalidTau(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("step rejected at tau={tau}: unitarity drift {drift:e}")]
    StepRejected { tau: f64, drift: f64 },
    #[error("shell radius {radius} outside box half-width {half_width}")]
    ShellOutsideBox { radius: f64, half_width: f64 },
    #[error("shell quadrature insufficient: interpolation residual {0:e}")]
    ShellResolution(f64),
    #[error("time step rejected: phase per step {phase} exceeds pi/4")]
    Cfl { phase: f64 },
    #[error("box escape: tail mass {0:e}")]
    BoxEscape(f64),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, Error>;
