//! Simulation and verification library for a conservative quasilinear
//! diffusion with rough spatial noise on the one-dimensional torus.
//!
//! The equation is `dv/dt = Laplace(phi(v)) + d/dx (phi(v) xi)` for an
//! elliptic nonlinearity `phi` and a spatially rough field `xi` given through
//! its integral `eta`. The library builds the associated stationary weight
//! `theta` and drift constant `mu`, the mass-pinned stationary profiles,
//! the weighted Dirichlet energy with its Poincaré and decay constants, and
//! evolves the equation with conservative implicit-explicit and explicit
//! flux schemes, exposing all quantities needed to certify mass
//! conservation, maximum principles, and exponential relaxation numerically.
//!
//! Module map:
//! - [`grid`]: periodic grid functions, spectral calculus, norms, IO.
//! - [`noise`]: seeded rough-noise samples, mollification, reconstruction.
//! - [`coeff`]: elliptic nonlinearities with certified bounds and inverses.
//! - [`stationary`]: the weight `theta`, drift `mu`, levels `z_m`, profiles.
//! - [`energy`]: Dirichlet energy, Poincaré constant, decay-rate bounds.
//! - [`solver`]: time steppers, trajectories, diagnostics, artifacts.

pub mod coeff;
pub mod energy;
pub mod fit;
pub mod grid;
pub mod noise;
pub mod solver;
mod spectral;
pub mod stationary;

pub use coeff::{CoeffError, CoefficientFunction};
pub use energy::{
    decay_rate_bound, diagnostics, energy, energy_gradient, mu_smallness_threshold,
    norm_equivalence_constant, poincare_constant, verify_poincare, DecayBound, EnergyDiagnostics,
    EnergyError,
};
pub use fit::{fit_log_slope, linear_fit};
pub use grid::{GridError, GridFunction, NormKind};
pub use noise::{derive_seed, NoiseError, NoiseSample};
pub use solver::{
    drift_estimate, evolve, evolve_with_noise, initial_layer_probe, max_principle_check,
    recover_u, step_f, step_v, write_artifacts, CoeffSpec, InitialSpec, Scheme, SimConfig,
    SolverError, Trajectory,
};
pub use stationary::{
    build_theta, residual_theta, separable_stationary, solve_zm, stationary_profile,
    StationaryError, StationaryProfile, StationarySummary,
};
