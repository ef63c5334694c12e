//! Time evolution of the conservative quasilinear equation, in both the
//! transformed and the divergence-form representation, plus trajectory
//! diagnostics, integrated-solution recovery, and artifact output.
//!
//! Two schemes are provided.
//!
//! `f_imex` evolves the transformed field `f = phi(v)/theta` through the
//! equation `dv/dt = d/dx(theta f' + mu f)`. Each step freezes
//! `G_j = 1/phi'(v_j)`, solves the linearly-implicit cyclic tridiagonal
//! system
//!
//! ```text
//! G_j theta_j (f~_j - f_j) = dt/h^2 [theta_{j+1/2}(f~_{j+1}-f~_j)
//!                                  - theta_{j-1/2}(f~_j-f~_{j-1})]
//!                          + dt/h  [Fmu_{j+1/2} - Fmu_{j-1/2}],
//! ```
//!
//! with the drift flux `Fmu` taken explicitly and upwinded, then updates `v`
//! from the face fluxes (so the total mass telescopes to rounding) and
//! re-synchronises `f = phi(v)/theta`. The iteration matrix is an M-matrix
//! with exact row-sum preservation, hence constants are fixed points and the
//! implicit stage obeys a discrete maximum principle; only the quadratic
//! resynchronisation remainder can creep past the initial bounds, which the
//! maximum-principle monitor measures.
//!
//! `v_flux` is the explicit conservative finite-volume cross-check for
//! smooth (mollified or truncated) noise: face fluxes
//! `F_{j+1/2} = (phi_{j+1}-phi_j)/h + (phi_j+phi_{j+1})/2 * xi_{j+1/2}`,
//! stability guarded by the diffusive CFL condition `dt <= h^2/(2 c_plus)`.

use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::coeff::{CoeffError, CoefficientFunction};
use crate::energy::{self, EnergyError};
use crate::fit::FitError;
use crate::grid::{GridError, GridFunction, NormKind};
use crate::noise::{derive_seed, NoiseError, NoiseSample};
use crate::spectral;
use crate::stationary::{self, StationaryError};

/// Default ceiling on `sup |v|` before a run aborts with a blow-up report.
pub const DEFAULT_BLOWUP_CEILING: f64 = 1e6;

/// Tolerance of the discrete maximum-principle monitor.
pub const MAX_PRINCIPLE_TOLERANCE: f64 = 1e-8;

/// Seed-stream identifier for the noise sample of a run.
pub const NOISE_STREAM: u64 = 1;

/// Seed-stream identifier for rough initial data.
pub const INITIAL_STREAM: u64 = 2;

/// Errors from configuration, stepping, and artifact handling.
#[derive(Debug, Error)]
pub enum SolverError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Coeff(#[from] CoeffError),
    #[error(transparent)]
    Stationary(#[from] StationaryError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("explicit scheme violates the CFL bound: dt = {dt} > {limit}")]
    Cfl { dt: f64, limit: f64 },
    #[error("blow-up detected at step {step} (t = {time}): sup |v| = {sup}")]
    BlowUp { step: usize, time: f64, sup: f64 },
    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },
    #[error("requested window [{lo}, {hi}] not covered by the series")]
    Window { lo: f64, hi: f64 },
    #[error("snapshot data unavailable: {0}")]
    Snapshots(&'static str),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization failure: {0}")]
    Json(#[from] serde_json::Error),
}

/// Time-stepping scheme selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    FImex,
    VFlux,
}

/// Declarative coefficient choice for configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CoeffSpec {
    Linear,
    SinePerturbed { amplitude: f64, offset: f64 },
}

impl CoeffSpec {
    /// Materialises the coefficient function.
    pub fn build(&self) -> Result<CoefficientFunction, SolverError> {
        Ok(match self {
            CoeffSpec::Linear => CoefficientFunction::linear(),
            CoeffSpec::SinePerturbed { amplitude, offset } => {
                CoefficientFunction::sine_perturbed(*amplitude, *offset)?
            }
        })
    }
}

/// One sine term of a trigonometric initial profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SineTerm {
    pub amplitude: f64,
    pub mode: u32,
    #[serde(default)]
    pub phase: f64,
}

/// Declarative initial condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSpec {
    /// `v(0) = value`.
    Constant { value: f64 },
    /// `v(0) = mean + amplitude * sin(2 pi mode x)`.
    MeanPlusSine { mean: f64, amplitude: f64, mode: u32 },
    /// `v(0) = mean + sum_i a_i sin(2 pi k_i x + phase_i)`.
    Modes { mean: f64, terms: Vec<SineTerm> },
    /// The stationary profile of mass `m`.
    Stationary { m: f64 },
    /// Stationary profile plus a sine perturbation.
    StationaryPerturbed { m: f64, amplitude: f64, mode: u32 },
    /// Rough transformed field: `f(0) = level + amplitude * bridge path`
    /// (independent seed stream), `v(0) = phi^{-1}(f(0) theta)`.
    RoughF { level: f64, amplitude: f64, kl_modes: usize },
    /// `v(0)` read from a grid CSV file.
    FromCsv { path: String },
}

fn default_diagnostics_every() -> usize {
    1
}

fn default_blowup_ceiling() -> f64 {
    DEFAULT_BLOWUP_CEILING
}

/// Full description of a run; serialisable, echoed into run manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    pub dt: f64,
    pub t_end: f64,
    pub scheme: Scheme,
    #[serde(default)]
    pub eps: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub sigma: f64,
    /// Karhunen–Loève truncation of the noise; `None` means `n/2`.
    #[serde(default)]
    pub kl_modes: Option<usize>,
    pub coeff: CoeffSpec,
    pub initial: InitialSpec,
    /// Expected conserved mass; checked against `integral v(0)` if set.
    #[serde(default)]
    pub m: Option<f64>,
    #[serde(default = "default_diagnostics_every")]
    pub diagnostics_every: usize,
    #[serde(default)]
    pub snapshot_every: Option<usize>,
    #[serde(default = "default_blowup_ceiling")]
    pub blowup_ceiling: f64,
}

impl SimConfig {
    /// Number of time steps; `t_end` must be an integral multiple of `dt`.
    pub fn steps(&self) -> Result<usize, SolverError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SolverError::Config(format!("dt must be positive, got {}", self.dt)));
        }
        let raw = self.t_end / self.dt;
        let steps = raw.round();
        if steps < 1.0 || (steps * self.dt - self.t_end).abs() > 1e-9 * self.t_end.max(self.dt) {
            return Err(SolverError::Config(format!(
                "t_end = {} is not an integral multiple of dt = {}",
                self.t_end, self.dt
            )));
        }
        Ok(steps as usize)
    }

    /// Effective KL truncation.
    pub fn kl_modes_effective(&self) -> usize {
        self.kl_modes.unwrap_or(self.n / 2)
    }

    /// Structural validation (grid size, step counts, cadences, eps).
    pub fn validate(&self) -> Result<(), SolverError> {
        if self.n < 8 {
            return Err(SolverError::Config(format!("n must be at least 8, got {}", self.n)));
        }
        self.steps()?;
        if self.eps < 0.0 || !self.eps.is_finite() {
            return Err(SolverError::Config(format!("eps must be >= 0, got {}", self.eps)));
        }
        if self.diagnostics_every == 0 {
            return Err(SolverError::Config("diagnostics_every must be >= 1".into()));
        }
        if self.snapshot_every == Some(0) {
            return Err(SolverError::Config("snapshot_every must be >= 1".into()));
        }
        if !(self.blowup_ceiling > 0.0) {
            return Err(SolverError::Config("blowup_ceiling must be positive".into()));
        }
        if !self.sigma.is_finite() {
            return Err(SolverError::Config(format!("sigma must be finite, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// State snapshot stored along a trajectory.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub step: usize,
    pub time: f64,
    /// Accumulated `integral_0^t <phi(v(s)), xi> ds` at the snapshot time.
    pub chi_xi: f64,
    pub v: GridFunction,
    pub f: GridFunction,
}

/// Recorded output of one run.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub config: SimConfig,
    pub theta: GridFunction,
    pub mu: f64,
    pub m: f64,
    pub z_m: f64,
    pub v_bar: GridFunction,
    pub xi: GridFunction,
    /// Recorded times (strictly increasing; includes `t = 0` and `t_end`).
    pub times: Vec<f64>,
    pub mass: Vec<f64>,
    pub energy: Vec<f64>,
    /// `||f - z_m||_{H^1_theta}` per record.
    pub hnorm: Vec<f64>,
    /// `sup |v - v_bar|` per record.
    pub sup_dev: Vec<f64>,
    /// Accumulated `integral_0^t <phi(v), xi> ds` per record.
    pub chi_xi: Vec<f64>,
    pub snapshots: Vec<Snapshot>,
    pub final_v: GridFunction,
    pub final_f: GridFunction,
    pub f_initial_min: f64,
    pub f_initial_max: f64,
    pub f_running_min: f64,
    pub f_running_max: f64,
    /// Largest per-step energy increase, when diagnostics run every step.
    pub max_energy_step_increase: Option<f64>,
    pub steps: usize,
}

/// Paired `(v, f)` state for single-step use.
#[derive(Debug, Clone)]
pub struct FState {
    pub v: GridFunction,
    pub f: GridFunction,
}

impl FState {
    /// Builds the transformed field `f = phi(v)/theta` alongside `v`.
    pub fn from_v(
        v: GridFunction,
        coeff: &CoefficientFunction,
        theta: &GridFunction,
    ) -> Result<Self, SolverError> {
        let f = v.zip_with(theta, |vv, t| coeff.phi(vv) / t)?;
        Ok(Self { v, f })
    }
}

/// Solves the cyclic tridiagonal system `a_j x_{j-1} + b_j x_j + c_j x_{j+1}
/// = r_j` (indices mod `n`) by the Thomas algorithm with a Sherman–Morrison
/// correction for the periodic corner entries. Requires `n >= 3` and strict
/// diagonal dominance (guaranteed by the stepper's positive coefficients).
struct CyclicTridiag {
    n: usize,
    bb: Vec<f64>,
    cp: Vec<f64>,
    y: Vec<f64>,
    q: Vec<f64>,
    u: Vec<f64>,
}

impl CyclicTridiag {
    fn new(n: usize) -> Self {
        Self {
            n,
            bb: vec![0.0; n],
            cp: vec![0.0; n],
            y: vec![0.0; n],
            q: vec![0.0; n],
            u: vec![0.0; n],
        }
    }

    fn thomas(&mut self, a: &[f64], c: &[f64], rhs_into_y: bool, r: &[f64]) {
        // forward elimination on (a, bb, c); result into y or q
        let n = self.n;
        let out: &mut [f64] = if rhs_into_y { &mut self.y } else { &mut self.q };
        self.cp[0] = c[0] / self.bb[0];
        out[0] = r[0] / self.bb[0];
        for j in 1..n {
            let m = self.bb[j] - a[j] * self.cp[j - 1];
            self.cp[j] = if j + 1 < n { c[j] / m } else { 0.0 };
            out[j] = (r[j] - a[j] * out[j - 1]) / m;
        }
        for j in (0..n - 1).rev() {
            let next = out[j + 1];
            out[j] -= self.cp[j] * next;
        }
    }

    fn solve(&mut self, a: &[f64], b: &[f64], c: &[f64], r: &[f64], x: &mut [f64]) {
        let n = self.n;
        let gamma = -b[0];
        self.bb.copy_from_slice(b);
        self.bb[0] = b[0] - gamma;
        self.bb[n - 1] = b[n - 1] - a[0] * c[n - 1] / gamma;
        self.thomas(a, c, true, r);
        for v in self.u.iter_mut() {
            *v = 0.0;
        }
        self.u[0] = gamma;
        self.u[n - 1] = c[n - 1];
        let u = std::mem::take(&mut self.u);
        self.thomas(a, c, false, &u);
        self.u = u;
        let num = self.y[0] + a[0] * self.y[n - 1] / gamma;
        let den = 1.0 + self.q[0] + a[0] * self.q[n - 1] / gamma;
        let factor = num / den;
        for j in 0..n {
            x[j] = self.y[j] - factor * self.q[j];
        }
    }
}

/// Workspace for the linearly-implicit conservative scheme.
struct FImexStepper {
    n: usize,
    h: f64,
    dt: f64,
    mu: f64,
    theta: Vec<f64>,
    theta_face: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    r: Vec<f64>,
    f_new: Vec<f64>,
    flux: Vec<f64>,
    tri: CyclicTridiag,
}

impl FImexStepper {
    fn new(theta: &GridFunction, mu: f64, dt: f64) -> Self {
        let n = theta.n();
        let th = theta.values().to_vec();
        let mut theta_face = vec![0.0; n];
        for j in 0..n {
            theta_face[j] = 0.5 * (th[j] + th[(j + 1) % n]);
        }
        Self {
            n,
            h: 1.0 / n as f64,
            dt,
            mu,
            theta: th,
            theta_face,
            a: vec![0.0; n],
            b: vec![0.0; n],
            c: vec![0.0; n],
            r: vec![0.0; n],
            f_new: vec![0.0; n],
            flux: vec![0.0; n],
            tri: CyclicTridiag::new(n),
        }
    }

    /// Advances `(v, f)` by one step; `step` only labels error reports.
    fn step(
        &mut self,
        coeff: &CoefficientFunction,
        v: &mut [f64],
        f: &mut [f64],
        step: usize,
    ) -> Result<(), SolverError> {
        let n = self.n;
        let lam = self.dt / (self.h * self.h);
        let mu = self.mu;
        // explicit upwind drift flux at faces j+1/2
        for j in 0..n {
            let jp = (j + 1) % n;
            self.flux[j] = upwind_flux(mu, f[jp], f[j]);
        }
        for j in 0..n {
            let jm = (j + n - 1) % n;
            let g = 1.0 / coeff.dphi(v[j]);
            let gt = g * self.theta[j];
            self.a[j] = -lam * self.theta_face[jm];
            self.c[j] = -lam * self.theta_face[j];
            self.b[j] = gt + lam * (self.theta_face[jm] + self.theta_face[j]);
            self.r[j] = gt * f[j] + (self.dt / self.h) * (self.flux[j] - self.flux[jm]);
        }
        let (a, b, c, r) = (&self.a, &self.b, &self.c, &self.r);
        self.tri.solve(a, b, c, r, &mut self.f_new);
        // conservative v-update from the total face fluxes
        for j in 0..n {
            let jp = (j + 1) % n;
            let diffusive = self.theta_face[j] * (self.f_new[jp] - self.f_new[j]) / self.h;
            self.flux[j] += diffusive;
        }
        for j in 0..n {
            let jm = (j + n - 1) % n;
            v[j] += (self.dt / self.h) * (self.flux[j] - self.flux[jm]);
            if !v[j].is_finite() {
                return Err(SolverError::NonFinite { step });
            }
            f[j] = coeff.phi(v[j]) / self.theta[j];
        }
        Ok(())
    }
}

/// Upwind drift flux at a face: the transported field rides at speed
/// proportional to `mu`, so the face value comes from the upwind side.
fn upwind_flux(mu: f64, f_right: f64, f_left: f64) -> f64 {
    if mu >= 0.0 {
        mu * f_right
    } else {
        mu * f_left
    }
}

/// Workspace for the explicit conservative finite-volume scheme.
struct VFluxStepper {
    n: usize,
    h: f64,
    dt: f64,
    xi_face: Vec<f64>,
    phi: Vec<f64>,
    flux: Vec<f64>,
}

impl VFluxStepper {
    fn new(
        xi: &GridFunction,
        coeff: &CoefficientFunction,
        dt: f64,
    ) -> Result<Self, SolverError> {
        let n = xi.n();
        let h = 1.0 / n as f64;
        let limit = h * h / (2.0 * coeff.c_plus());
        if dt > limit * (1.0 + 1e-12) {
            return Err(SolverError::Cfl { dt, limit });
        }
        let xi_face = xi.half_shift()?.values().to_vec();
        Ok(Self {
            n,
            h,
            dt,
            xi_face,
            phi: vec![0.0; n],
            flux: vec![0.0; n],
        })
    }

    fn step(
        &mut self,
        coeff: &CoefficientFunction,
        v: &mut [f64],
        step: usize,
    ) -> Result<(), SolverError> {
        let n = self.n;
        for j in 0..n {
            self.phi[j] = coeff.phi(v[j]);
        }
        for j in 0..n {
            let jp = (j + 1) % n;
            self.flux[j] = (self.phi[jp] - self.phi[j]) / self.h
                + 0.5 * (self.phi[j] + self.phi[jp]) * self.xi_face[j];
        }
        for j in 0..n {
            let jm = (j + n - 1) % n;
            v[j] += (self.dt / self.h) * (self.flux[j] - self.flux[jm]);
            if !v[j].is_finite() {
                return Err(SolverError::NonFinite { step });
            }
        }
        Ok(())
    }
}

/// One linearly-implicit step of the transformed equation; returns the new
/// `(v, f)` pair. Convenience wrapper over the persistent stepper.
pub fn step_f(
    state: &FState,
    coeff: &CoefficientFunction,
    theta: &GridFunction,
    mu: f64,
    dt: f64,
) -> Result<FState, SolverError> {
    let mut stepper = FImexStepper::new(theta, mu, dt);
    let mut v = state.v.values().to_vec();
    let mut f = state.f.values().to_vec();
    stepper.step(coeff, &mut v, &mut f, 0)?;
    Ok(FState {
        v: GridFunction::new(v)?,
        f: GridFunction::new(f)?,
    })
}

/// One explicit conservative finite-volume step of the divergence form.
pub fn step_v(
    v: &GridFunction,
    coeff: &CoefficientFunction,
    xi_eps: &GridFunction,
    dt: f64,
) -> Result<GridFunction, SolverError> {
    if v.n() != xi_eps.n() {
        return Err(SolverError::Config(format!(
            "state has n = {} but noise has n = {}",
            v.n(),
            xi_eps.n()
        )));
    }
    let mut stepper = VFluxStepper::new(xi_eps, coeff, dt)?;
    let mut vals = v.values().to_vec();
    stepper.step(coeff, &mut vals, 0)?;
    Ok(GridFunction::new(vals)?)
}

/// Discrete flux divergence `d/dx[d/dx phi(v) + phi(v) xi]` of the
/// finite-volume scheme, independent of any time step. Evaluated on a
/// stationary profile this is the scheme's spatial truncation defect, and
/// `dt * sup |divergence|` is the one-step truncation estimate at step size
/// `dt` (no CFL constraint applies because no step is taken).
pub fn v_flux_divergence(
    v: &GridFunction,
    coeff: &CoefficientFunction,
    xi_eps: &GridFunction,
) -> Result<GridFunction, SolverError> {
    let n = v.n();
    if n != xi_eps.n() {
        return Err(SolverError::Config(format!(
            "state has n = {} but noise has n = {}",
            n,
            xi_eps.n()
        )));
    }
    let h = 1.0 / n as f64;
    let xi_face = xi_eps.half_shift()?;
    let phi: Vec<f64> = v.values().iter().map(|&x| coeff.phi(x)).collect();
    let mut flux = vec![0.0; n];
    for j in 0..n {
        let jp = (j + 1) % n;
        flux[j] = (phi[jp] - phi[j]) / h + 0.5 * (phi[j] + phi[jp]) * xi_face.values()[j];
    }
    let mut div = vec![0.0; n];
    for j in 0..n {
        let jm = (j + n - 1) % n;
        div[j] = (flux[j] - flux[jm]) / h;
    }
    Ok(GridFunction::new(div)?)
}

fn build_initial(
    config: &SimConfig,
    coeff: &CoefficientFunction,
    theta: &GridFunction,
) -> Result<GridFunction, SolverError> {
    let n = config.n;
    Ok(match &config.initial {
        InitialSpec::Constant { value } => GridFunction::constant(n, *value)?,
        InitialSpec::MeanPlusSine { mean, amplitude, mode } => {
            let (mean, amplitude, mode) = (*mean, *amplitude, f64::from(*mode));
            GridFunction::from_fn(n, |x| {
                mean + amplitude * (2.0 * std::f64::consts::PI * mode * x).sin()
            })?
        }
        InitialSpec::Modes { mean, terms } => {
            let terms = terms.clone();
            let mean = *mean;
            GridFunction::from_fn(n, |x| {
                let mut acc = mean;
                for t in &terms {
                    acc += t.amplitude
                        * (2.0 * std::f64::consts::PI * f64::from(t.mode) * x + t.phase).sin();
                }
                acc
            })?
        }
        InitialSpec::Stationary { m } => {
            let z = stationary::solve_zm(coeff, theta, *m)?;
            stationary::stationary_profile(coeff, theta, z)?
        }
        InitialSpec::StationaryPerturbed { m, amplitude, mode } => {
            let z = stationary::solve_zm(coeff, theta, *m)?;
            let base = stationary::stationary_profile(coeff, theta, z)?;
            let (amplitude, mode) = (*amplitude, f64::from(*mode));
            let pert = GridFunction::from_fn(n, |x| {
                amplitude * (2.0 * std::f64::consts::PI * mode * x).sin()
            })?;
            base.zip_with(&pert, |a, b| a + b)?
        }
        InitialSpec::RoughF { level, amplitude, kl_modes } => {
            let path = NoiseSample::sample_bridge(
                derive_seed(config.seed, INITIAL_STREAM),
                n,
                *kl_modes,
            )?;
            let f0 = path.eta_tilde().map(|w| level + amplitude * w)?;
            let mut v = Vec::with_capacity(n);
            for j in 0..n {
                v.push(coeff.inverse(f0.values()[j] * theta.values()[j])?);
            }
            GridFunction::new(v)?
        }
        InitialSpec::FromCsv { path } => {
            let g = GridFunction::read_csv(Path::new(path))?;
            if g.n() != n {
                return Err(SolverError::Config(format!(
                    "initial data file has n = {}, config says n = {}",
                    g.n(),
                    n
                )));
            }
            g
        }
    })
}

/// Builds the run's noise sample from the config seed (stream-separated from
/// any rough initial data).
pub fn build_noise(config: &SimConfig) -> Result<NoiseSample, SolverError> {
    let sample = NoiseSample::sample_bridge(
        derive_seed(config.seed, NOISE_STREAM),
        config.n,
        config.kl_modes_effective(),
    )?;
    Ok(sample.with_drift(config.sigma)?)
}

/// Runs a simulation, sampling the noise from the config seed.
pub fn evolve(config: &SimConfig) -> Result<Trajectory, SolverError> {
    let noise = build_noise(config)?;
    evolve_with_noise(config, &noise)
}

/// Runs a simulation against an externally supplied noise sample. The
/// config's `eps` governs the mollification applied to the sample before the
/// weight and `xi` are formed.
pub fn evolve_with_noise(
    config: &SimConfig,
    noise: &NoiseSample,
) -> Result<Trajectory, SolverError> {
    config.validate()?;
    let steps = config.steps()?;
    let coeff = config.coeff.build()?;
    if noise.n() != config.n {
        return Err(SolverError::Config(format!(
            "noise sample has n = {}, config says n = {}",
            noise.n(),
            config.n
        )));
    }
    let weight_sample = if config.eps > 0.0 {
        noise.mollified(config.eps)?
    } else {
        noise.clone()
    };
    let (theta, mu) = stationary::build_theta(&weight_sample)?;
    let xi = noise.mollified_xi(config.eps)?;

    let v0 = build_initial(config, &coeff, &theta)?;
    let m = v0.integrate();
    if let Some(mc) = config.m {
        if (mc - m).abs() > 1e-8 * mc.abs().max(1.0) {
            return Err(SolverError::Config(format!(
                "configured mass {mc} does not match integral of v(0) = {m}"
            )));
        }
    }
    let z_m = stationary::solve_zm(&coeff, &theta, m)?;
    let v_bar = stationary::stationary_profile(&coeff, &theta, z_m)?;

    let n = config.n;
    let h = 1.0 / n as f64;
    let dt = config.dt;

    // advective stability of the explicit drift flux in the implicit scheme
    if config.scheme == Scheme::FImex {
        let theta_min = theta.values().iter().cloned().fold(f64::INFINITY, f64::min);
        let limit = theta_min / coeff.c_plus() * h / dt;
        if mu.abs() > limit {
            return Err(SolverError::Config(format!(
                "drift mu = {mu} violates the advective bound |mu| <= {limit} at this dt"
            )));
        }
    }

    let mut v = v0.values().to_vec();
    let mut f: Vec<f64> = (0..n)
        .map(|j| coeff.phi(v[j]) / theta.values()[j])
        .collect();

    let f_initial_min = f.iter().cloned().fold(f64::INFINITY, f64::min);
    let f_initial_max = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut f_running_min = f_initial_min;
    let mut f_running_max = f_initial_max;

    let mut fimex = match config.scheme {
        Scheme::FImex => Some(FImexStepper::new(&theta, mu, dt)),
        Scheme::VFlux => None,
    };
    let mut vflux = match config.scheme {
        Scheme::VFlux => Some(VFluxStepper::new(&xi, &coeff, dt)?),
        Scheme::FImex => None,
    };

    let mut times = Vec::new();
    let mut mass_series = Vec::new();
    let mut energy_series = Vec::new();
    let mut hnorm_series = Vec::new();
    let mut sup_dev_series = Vec::new();
    let mut chi_xi_series = Vec::new();
    let mut snapshots = Vec::new();

    let xi_vals = xi.values().to_vec();
    let inner_chi_xi = |v: &[f64]| -> f64 {
        let mut s = 0.0;
        for j in 0..n {
            s += coeff.phi(v[j]) * xi_vals[j];
        }
        s * h
    };
    let mut chi_xi_acc = 0.0;
    let mut inner_prev = inner_chi_xi(&v);

    let per_step_energy = config.diagnostics_every == 1;
    let mut max_energy_step_increase: Option<f64> = if per_step_energy { Some(0.0) } else { None };

    let record = |k: usize,
                  v: &[f64],
                  f: &[f64],
                  chi_xi_acc: f64,
                  times: &mut Vec<f64>,
                  mass_series: &mut Vec<f64>,
                  energy_series: &mut Vec<f64>,
                  hnorm_series: &mut Vec<f64>,
                  sup_dev_series: &mut Vec<f64>,
                  chi_xi_series: &mut Vec<f64>|
     -> Result<f64, SolverError> {
        let fg = GridFunction::new(f.to_vec())?;
        let phi_f = energy::energy(&fg, &theta)?;
        let dev = fg.map(|x| x - z_m)?;
        let hn = dev.norm(NormKind::H1Weighted(&theta))?;
        let mut mass = 0.0;
        let mut sup = 0.0f64;
        for j in 0..n {
            mass += v[j];
            sup = sup.max((v[j] - v_bar.values()[j]).abs());
        }
        times.push(k as f64 * dt);
        mass_series.push(mass * h);
        energy_series.push(phi_f);
        hnorm_series.push(hn);
        sup_dev_series.push(sup);
        chi_xi_series.push(chi_xi_acc);
        Ok(phi_f)
    };

    let snap = |k: usize, v: &[f64], f: &[f64], chi_xi_acc: f64, snapshots: &mut Vec<Snapshot>| -> Result<(), SolverError> {
        snapshots.push(Snapshot {
            step: k,
            time: k as f64 * dt,
            chi_xi: chi_xi_acc,
            v: GridFunction::new(v.to_vec())?,
            f: GridFunction::new(f.to_vec())?,
        });
        Ok(())
    };

    let mut prev_energy = record(
        0,
        &v,
        &f,
        chi_xi_acc,
        &mut times,
        &mut mass_series,
        &mut energy_series,
        &mut hnorm_series,
        &mut sup_dev_series,
        &mut chi_xi_series,
    )?;
    snap(0, &v, &f, chi_xi_acc, &mut snapshots)?;

    for k in 1..=steps {
        match config.scheme {
            Scheme::FImex => fimex.as_mut().unwrap().step(&coeff, &mut v, &mut f, k)?,
            Scheme::VFlux => {
                vflux.as_mut().unwrap().step(&coeff, &mut v, k)?;
                for j in 0..n {
                    f[j] = coeff.phi(v[j]) / theta.values()[j];
                }
            }
        }
        let mut sup_v = 0.0f64;
        for j in 0..n {
            sup_v = sup_v.max(v[j].abs());
            f_running_min = f_running_min.min(f[j]);
            f_running_max = f_running_max.max(f[j]);
        }
        if !sup_v.is_finite() {
            return Err(SolverError::NonFinite { step: k });
        }
        if sup_v > config.blowup_ceiling {
            return Err(SolverError::BlowUp {
                step: k,
                time: k as f64 * dt,
                sup: sup_v,
            });
        }
        let inner = inner_chi_xi(&v);
        chi_xi_acc += 0.5 * dt * (inner_prev + inner);
        inner_prev = inner;

        if k % config.diagnostics_every == 0 || k == steps {
            let e = record(
                k,
                &v,
                &f,
                chi_xi_acc,
                &mut times,
                &mut mass_series,
                &mut energy_series,
                &mut hnorm_series,
                &mut sup_dev_series,
                &mut chi_xi_series,
            )?;
            if per_step_energy {
                let inc = e - prev_energy;
                if let Some(mx) = max_energy_step_increase.as_mut() {
                    *mx = mx.max(inc);
                }
            }
            prev_energy = e;
        }
        if let Some(every) = config.snapshot_every {
            if k % every == 0 && k != steps {
                snap(k, &v, &f, chi_xi_acc, &mut snapshots)?;
            }
        }
        if k == steps {
            snap(k, &v, &f, chi_xi_acc, &mut snapshots)?;
        }
    }

    // deduplicate a possible double record of the final step
    dedup_tail(&mut times, &mut mass_series, &mut energy_series, &mut hnorm_series, &mut sup_dev_series, &mut chi_xi_series);

    Ok(Trajectory {
        config: config.clone(),
        theta,
        mu,
        m,
        z_m,
        v_bar,
        xi,
        times,
        mass: mass_series,
        energy: energy_series,
        hnorm: hnorm_series,
        sup_dev: sup_dev_series,
        chi_xi: chi_xi_series,
        snapshots,
        final_v: GridFunction::new(v)?,
        final_f: GridFunction::new(f)?,
        f_initial_min,
        f_initial_max,
        f_running_min,
        f_running_max,
        max_energy_step_increase,
        steps,
    })
}

fn dedup_tail(
    times: &mut Vec<f64>,
    a: &mut Vec<f64>,
    b: &mut Vec<f64>,
    c: &mut Vec<f64>,
    d: &mut Vec<f64>,
    e: &mut Vec<f64>,
) {
    let n = times.len();
    if n >= 2 && times[n - 1] == times[n - 2] {
        times.pop();
        a.pop();
        b.pop();
        c.pop();
        d.pop();
        e.pop();
    }
}

/// Scans the running transformed-field bounds against the initial bounds.
/// Returns `(ok, worst_violation)` with tolerance
/// [`MAX_PRINCIPLE_TOLERANCE`].
pub fn max_principle_check(traj: &Trajectory) -> (bool, f64) {
    let over = (traj.f_running_max - traj.f_initial_max).max(0.0);
    let under = (traj.f_initial_min - traj.f_running_min).max(0.0);
    let worst = over.max(under);
    (worst <= MAX_PRINCIPLE_TOLERANCE, worst)
}

/// Integrated solution at snapshot times.
#[derive(Debug, Clone)]
pub struct USeries {
    pub times: Vec<f64>,
    pub snapshots: Vec<GridFunction>,
    /// Spatial mean of `u` per snapshot (the drift observable).
    pub means: Vec<f64>,
}

/// Recovers `u(t)` from a trajectory via
/// `u(t,x) = integral_0^x v(t) + integral u0 - integral (1-y) v(t,y) dy
///           + integral_0^t <phi(v(s)), xi> ds`.
///
/// The accumulated pairing is tracked per time step during the run, so the
/// snapshot density only limits how often `u` is materialised, not the
/// accuracy of the drift term. At `t = 0` the formula reproduces `u0`
/// exactly whenever `v(0)` is the spectral derivative of `u0`.
pub fn recover_u(traj: &Trajectory, u0: &GridFunction) -> Result<USeries, SolverError> {
    if u0.n() != traj.config.n {
        return Err(SolverError::Config(format!(
            "u0 has n = {}, trajectory has n = {}",
            u0.n(),
            traj.config.n
        )));
    }
    if traj.snapshots.is_empty() {
        return Err(SolverError::Snapshots("trajectory holds no snapshots"));
    }
    let a2 = u0.integrate();
    let mut times = Vec::with_capacity(traj.snapshots.len());
    let mut snaps = Vec::with_capacity(traj.snapshots.len());
    let mut means = Vec::with_capacity(traj.snapshots.len());
    for s in &traj.snapshots {
        let a1 = s.v.cumulative_integral()?;
        let a3 = one_minus_x_weighted_integral(s.v.values());
        let base = a2 - a3 + s.chi_xi;
        let u = a1.map(|val| val + base)?;
        times.push(s.time);
        means.push(u.mean());
        snaps.push(u);
    }
    Ok(USeries {
        times,
        snapshots: snaps,
        means,
    })
}

/// `integral_0^1 (1-y) v(y) dy` of the trigonometric interpolant:
/// `v_hat_0 / 2 - sum_{k != 0} v_hat_k / (2 pi i k)` (Nyquist weight zero).
fn one_minus_x_weighted_integral(values: &[f64]) -> f64 {
    let n = values.len();
    let coeffs = spectral::dft(values);
    let mut acc = 0.5 * coeffs[0].re;
    for (k, c) in coeffs.iter().enumerate().skip(1) {
        if n % 2 == 0 && 2 * k == n {
            continue;
        }
        let w = 2.0 * std::f64::consts::PI * spectral::signed_freq(k, n) as f64;
        // -c_k/(i w) = -(-i) c_k / w = i c_k / w; real part = -im(c)/w
        acc -= c.im / w;
    }
    acc
}

/// Pointwise residual of the integrated equation
/// `du/dt - phi'(u_x) u_xx - phi(u_x) xi` at snapshot index `i`, with a
/// centred time difference over the neighbouring snapshots.
pub fn u_pde_residual(
    series: &USeries,
    coeff: &CoefficientFunction,
    xi: &GridFunction,
    i: usize,
) -> Result<f64, SolverError> {
    if i == 0 || i + 1 >= series.snapshots.len() {
        return Err(SolverError::Snapshots("need interior snapshot index"));
    }
    let dt2 = series.times[i + 1] - series.times[i - 1];
    let u = &series.snapshots[i];
    let ux = u.derivative(1)?;
    let uxx = u.derivative(2)?;
    let mut worst = 0.0f64;
    for j in 0..u.n() {
        let dudt = (series.snapshots[i + 1].values()[j] - series.snapshots[i - 1].values()[j]) / dt2;
        let rhs = coeff.dphi(ux.values()[j]) * uxx.values()[j]
            + coeff.phi(ux.values()[j]) * xi.values()[j];
        worst = worst.max((dudt - rhs).abs());
    }
    Ok(worst)
}

/// Least-squares slope of the mean of `u` over the time window.
pub fn drift_estimate(series: &USeries, window: (f64, f64)) -> Result<f64, SolverError> {
    let (lo, hi) = window;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (t, m) in series.times.iter().zip(series.means.iter()) {
        if *t >= lo && *t <= hi {
            xs.push(*t);
            ys.push(*m);
        }
    }
    if xs.len() < 2 {
        return Err(SolverError::Window { lo, hi });
    }
    let (slope, _) = crate::fit::linear_fit(&xs, &ys)?;
    Ok(slope)
}

/// Per-grid numbers from the initial-layer refinement study.
#[derive(Debug, Clone, Serialize)]
pub struct LayerRow {
    pub n: usize,
    /// Discrete `H^1` norm of `f` at `t = 0`.
    pub h1_t0: f64,
    /// Discrete `H^1` norm of `f` at `t = delta`.
    pub h1_delta: f64,
    /// Discrete `H^1` norm of `f` at each multiple of `delta` (starting 0).
    pub h1_at_multiples: Vec<f64>,
    /// Energy at `t = delta`.
    pub phi_delta: f64,
    /// Largest energy increase per record after `delta`.
    pub max_post_delta_increase: f64,
}

/// Report of [`initial_layer_probe`].
#[derive(Debug, Clone, Serialize)]
pub struct InitialLayerReport {
    pub delta: f64,
    pub rows: Vec<LayerRow>,
}

/// Refinement study of the instantaneous-regularisation effect: a rough
/// transformed field (`f(0)` a scaled bridge path, truncation growing with
/// `n` unless `f0_kl` pins it) is evolved over `[0, 10*delta]` on each grid;
/// the report gathers the discrete `H^1` norms at every multiple of `delta`
/// and the energy behaviour after the layer. The noise truncation stays
/// fixed across grids so every run sees the same weight, and the rough-field
/// seed stream is also shared, so refinements extend the same path.
#[allow(clippy::too_many_arguments)]
pub fn initial_layer_probe(
    seed: u64,
    grids: &[usize],
    delta: f64,
    dt: f64,
    noise_kl: usize,
    coeff: &CoeffSpec,
    level: f64,
    amplitude: f64,
    f0_kl: Option<usize>,
) -> Result<InitialLayerReport, SolverError> {
    let layer_steps = (delta / dt).round();
    if layer_steps < 1.0 || (layer_steps * dt - delta).abs() > 1e-9 * delta {
        return Err(SolverError::Config(format!(
            "delta = {delta} is not an integral multiple of dt = {dt}"
        )));
    }
    let layer_steps = layer_steps as usize;
    let mut rows = Vec::new();
    for &n in grids {
        let config = SimConfig {
            n,
            dt,
            t_end: 10.0 * delta,
            scheme: Scheme::FImex,
            eps: 0.0,
            seed,
            sigma: 0.0,
            kl_modes: Some(noise_kl),
            coeff: coeff.clone(),
            initial: InitialSpec::RoughF {
                level,
                amplitude,
                kl_modes: f0_kl.unwrap_or(n / 2),
            },
            m: None,
            diagnostics_every: 1,
            snapshot_every: Some(layer_steps),
            blowup_ceiling: DEFAULT_BLOWUP_CEILING,
        };
        let traj = evolve(&config)?;
        let mut h1_at_multiples = Vec::new();
        for s in &traj.snapshots {
            if s.step % layer_steps == 0 {
                h1_at_multiples.push(s.f.norm(NormKind::H1)?);
            }
        }
        if h1_at_multiples.len() < 2 {
            return Err(SolverError::Snapshots("layer snapshot missing"));
        }
        let phi_delta = traj.energy[layer_steps];
        let mut max_inc = 0.0f64;
        for k in layer_steps..traj.energy.len() - 1 {
            max_inc = max_inc.max(traj.energy[k + 1] - traj.energy[k]);
        }
        rows.push(LayerRow {
            n,
            h1_t0: h1_at_multiples[0],
            h1_delta: h1_at_multiples[1],
            h1_at_multiples,
            phi_delta,
            max_post_delta_increase: max_inc,
        });
    }
    Ok(InitialLayerReport { delta, rows })
}

/// Checksum entry for one artifact file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub name: String,
    pub bytes: u64,
    pub fnv64: String,
}

/// Run manifest: config echo, code version, wall time, final diagnostics,
/// and checksums of the (deterministic) artifact files. The listed artifacts
/// regenerate bit-identically from the embedded config; the wall time is the
/// only volatile field.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: u32,
    pub tool_version: String,
    pub config: SimConfig,
    pub steps: usize,
    pub wall_secs: f64,
    pub final_mass: f64,
    pub final_energy: f64,
    pub final_sup_dev: f64,
    pub artifacts: Vec<ArtifactEntry>,
}

/// 64-bit FNV-1a checksum (content fingerprint for manifests).
pub fn fnv64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn push_artifact(dir: &Path, name: &str, artifacts: &mut Vec<ArtifactEntry>) -> Result<(), SolverError> {
    let data = std::fs::read(dir.join(name))?;
    artifacts.push(ArtifactEntry {
        name: name.to_string(),
        bytes: data.len() as u64,
        fnv64: format!("{:016x}", fnv64(&data)),
    });
    Ok(())
}

/// Writes the diagnostic series (one CSV per stream), profiles, snapshots,
/// and a manifest into `dir`. Every artifact file is deterministic for a
/// fixed config (shortest round-trip float formatting throughout), so
/// re-running the manifest's embedded config regenerates identical bytes.
pub fn write_artifacts(
    traj: &Trajectory,
    dir: &Path,
    wall_secs: f64,
) -> Result<Manifest, SolverError> {
    std::fs::create_dir_all(dir)?;
    let mut artifacts = Vec::new();

    let streams: [(&str, &[f64]); 5] = [
        ("mass.csv", &traj.mass),
        ("energy.csv", &traj.energy),
        ("hnorm.csv", &traj.hnorm),
        ("sup_dev.csv", &traj.sup_dev),
        ("chi_xi.csv", &traj.chi_xi),
    ];
    for (name, values) in streams {
        let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join(name))?);
        writeln!(w, "t,value")?;
        for (t, val) in traj.times.iter().zip(values.iter()) {
            writeln!(w, "{t},{val}")?;
        }
        w.flush()?;
        drop(w);
        push_artifact(dir, name, &mut artifacts)?;
    }

    for (name, g) in [
        ("theta.csv", &traj.theta),
        ("v_bar.csv", &traj.v_bar),
        ("xi.csv", &traj.xi),
        ("final_v.csv", &traj.final_v),
        ("final_f.csv", &traj.final_f),
    ] {
        g.write_csv(&dir.join(name))?;
        push_artifact(dir, name, &mut artifacts)?;
    }

    for s in &traj.snapshots {
        let vn = format!("v_step{:08}.csv", s.step);
        let fname = format!("f_step{:08}.csv", s.step);
        s.v.write_csv(&dir.join(&vn))?;
        s.f.write_csv(&dir.join(&fname))?;
        push_artifact(dir, &vn, &mut artifacts)?;
        push_artifact(dir, &fname, &mut artifacts)?;
    }

    let manifest = Manifest {
        format: 1,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: traj.config.clone(),
        steps: traj.steps,
        wall_secs,
        final_mass: *traj.mass.last().unwrap(),
        final_energy: *traj.energy.last().unwrap(),
        final_sup_dev: *traj.sup_dev.last().unwrap(),
        artifacts,
    };
    let mut file = std::fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut file, &manifest)?;
    writeln!(file)?;
    Ok(manifest)
}

/// Reads a run manifest back.
pub fn read_manifest(path: &Path) -> Result<Manifest, SolverError> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Convenience: the artifact paths a manifest refers to, relative to `dir`.
pub fn manifest_paths(manifest: &Manifest, dir: &Path) -> Vec<PathBuf> {
    manifest.artifacts.iter().map(|a| dir.join(&a.name)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn flat_theta(n: usize) -> GridFunction {
        GridFunction::constant(n, 1.0).unwrap()
    }

    fn base_config(n: usize, dt: f64, t_end: f64, scheme: Scheme) -> SimConfig {
        SimConfig {
            n,
            dt,
            t_end,
            scheme,
            eps: 0.0,
            seed: 0,
            sigma: 0.0,
            kl_modes: Some(0),
            coeff: CoeffSpec::Linear,
            initial: InitialSpec::Constant { value: 0.0 },
            m: None,
            diagnostics_every: 1,
            snapshot_every: None,
            blowup_ceiling: DEFAULT_BLOWUP_CEILING,
        }
    }

    #[test]
    fn cyclic_tridiag_solves_reference_system() {
        // random-ish diagonally dominant cyclic system vs direct residual
        let n = 16;
        let a: Vec<f64> = (0..n).map(|j| -0.3 - 0.01 * j as f64).collect();
        let c: Vec<f64> = (0..n).map(|j| -0.4 + 0.005 * j as f64).collect();
        let b: Vec<f64> = (0..n).map(|j| 2.0 + 0.1 * (j as f64).sin()).collect();
        let r: Vec<f64> = (0..n).map(|j| (j as f64 * 0.7).cos()).collect();
        let mut tri = CyclicTridiag::new(n);
        let mut x = vec![0.0; n];
        tri.solve(&a, &b, &c, &r, &mut x);
        for j in 0..n {
            let jm = (j + n - 1) % n;
            let jp = (j + 1) % n;
            let res = a[j] * x[jm] + b[j] * x[j] + c[j] * x[jp] - r[j];
            assert!(res.abs() < 1e-12, "row {j}: residual {res}");
        }
    }

    #[test]
    fn heat_step_decay_factor_first_order_in_dt() {
        // linear phi, flat theta, mu = 0: one step damps sin(2 pi x) by about
        // exp(-4 pi^2 dt), with O(dt^2) relative error per step.
        let n = 128;
        let lin = CoefficientFunction::linear();
        let theta = flat_theta(n);
        let err_at = |dt: f64| {
            let v = GridFunction::from_fn(n, |x| (2.0 * PI * x).sin()).unwrap();
            let state = FState::from_v(v, &lin, &theta).unwrap();
            let next = step_f(&state, &lin, &theta, 0.0, dt).unwrap();
            let j = n / 8;
            let rho = next.f.values()[j] / state.f.values()[j];
            (rho / (-4.0 * PI * PI * dt).exp() - 1.0).abs()
        };
        let e1 = err_at(1e-4);
        let e2 = err_at(5e-5);
        assert!(e1 < 3e-5, "one-step factor error {e1}");
        let ratio = e1 / e2;
        assert!((2.5..5.5).contains(&ratio), "dt-refinement ratio {ratio}");
    }

    #[test]
    fn constant_state_is_fixed_point_of_step_f() {
        let n = 64;
        let coeff = CoefficientFunction::sine_perturbed(0.5, 0.0).unwrap();
        let noise = NoiseSample::sample_bridge(9, n, 32).unwrap().with_drift(0.7).unwrap();
        let (theta, mu) = stationary::build_theta(&noise).unwrap();
        // f0 = z_m constant <=> v0 = stationary profile
        let z = stationary::solve_zm(&coeff, &theta, 0.8).unwrap();
        let v0 = stationary::stationary_profile(&coeff, &theta, z).unwrap();
        let state = FState::from_v(v0, &coeff, &theta).unwrap();
        let next = step_f(&state, &coeff, &theta, mu, 1e-3).unwrap();
        for j in 0..n {
            assert!(
                (next.f.values()[j] - state.f.values()[j]).abs() < 1e-12,
                "f moved at {j}"
            );
            assert!(
                (next.v.values()[j] - state.v.values()[j]).abs() < 1e-12,
                "v moved at {j}"
            );
        }
    }

    #[test]
    fn step_v_heat_decay_matches_exact_rate() {
        let n = 64;
        let lin = CoefficientFunction::linear();
        let xi = GridFunction::constant(n, 0.0).unwrap();
        let h = 1.0 / n as f64;
        let dt = h * h / 4.0;
        let steps = 400;
        let mut v = GridFunction::from_fn(n, |x| (2.0 * PI * x).sin()).unwrap();
        for _ in 0..steps {
            v = step_v(&v, &lin, &xi, dt).unwrap();
        }
        let t = steps as f64 * dt;
        let amp = v.values()[n / 4]; // x = 1/4 is the sine crest
        let exact = (-4.0 * PI * PI * t).exp();
        assert_relative_eq!(amp, exact, max_relative = 2e-2);
    }

    #[test]
    fn step_v_rejects_cfl_violation() {
        let n = 64;
        let lin = CoefficientFunction::linear();
        let xi = GridFunction::constant(n, 0.0).unwrap();
        let h: f64 = 1.0 / 64.0;
        match step_v(
            &GridFunction::constant(n, 0.0).unwrap(),
            &lin,
            &xi,
            h * h,
        ) {
            Err(SolverError::Cfl { .. }) => {}
            other => panic!("expected CFL rejection, got {other:?}"),
        }
    }

    #[test]
    fn stationary_profile_one_step_defect_small() {
        // v_bar built from the mollified weight against the matching xi_eps:
        // the one-step truncation estimate dt*sup|div F(v_bar)| at
        // (n, dt) = (512, 1e-5) sits below 1e-6, and a literal explicit step
        // at a CFL-compliant resolution moves v_bar by no more than that
        // resolution's own truncation.
        let eps = 1e-3;
        let coeff = CoefficientFunction::sine_perturbed(0.5, 0.0).unwrap();

        let n = 512;
        let noise = NoiseSample::sample_bridge(3, n, 64).unwrap();
        let smooth = noise.mollified(eps).unwrap();
        let (theta, _) = stationary::build_theta(&smooth).unwrap();
        let xi = noise.mollified_xi(eps).unwrap();
        let z = stationary::solve_zm(&coeff, &theta, 1.0).unwrap();
        let v_bar = stationary::stationary_profile(&coeff, &theta, z).unwrap();
        let dt = 1e-5;
        let defect = v_bar
            .zip_with(&v_flux_divergence(&v_bar, &coeff, &xi).unwrap(), |_, d| d)
            .unwrap()
            .norm(NormKind::LInf)
            .unwrap();
        assert!(dt * defect < 1e-6, "one-step estimate {}", dt * defect);

        let n = 128;
        let noise = NoiseSample::sample_bridge(3, n, 64).unwrap();
        let smooth = noise.mollified(eps).unwrap();
        let (theta, _) = stationary::build_theta(&smooth).unwrap();
        let xi = noise.mollified_xi(eps).unwrap();
        let z = stationary::solve_zm(&coeff, &theta, 1.0).unwrap();
        let v_bar = stationary::stationary_profile(&coeff, &theta, z).unwrap();
        let next = step_v(&v_bar, &coeff, &xi, dt).unwrap();
        let mut dev = 0.0f64;
        for j in 0..n {
            dev = dev.max((next.values()[j] - v_bar.values()[j]).abs());
        }
        assert!(dev < 1e-5, "one-step deviation {dev}");
    }

    #[test]
    fn step_v_mass_exact_over_many_steps() {
        let n = 128;
        let coeff = CoefficientFunction::sine_perturbed(0.5, 0.0).unwrap();
        let noise = NoiseSample::sample_bridge(17, n, 64).unwrap();
        let xi = noise.mollified_xi(1e-3).unwrap();
        let h = 1.0 / n as f64;
        let dt = h * h / 4.0;
        let mut v = GridFunction::from_fn(n, |x| {
            0.4 + 0.3 * (2.0 * PI * x).sin() + 0.1 * (6.0 * PI * x).cos()
        })
        .unwrap();
        let m0 = v.integrate();
        for _ in 0..10_000 {
            v = step_v(&v, &coeff, &xi, dt).unwrap();
        }
        assert!((v.integrate() - m0).abs() < 1e-12);
    }

    #[test]
    fn evolve_heat_decay_envelope() {
        let mut config = base_config(128, 1e-5, 0.05, Scheme::FImex);
        config.initial = InitialSpec::MeanPlusSine {
            mean: 0.7,
            amplitude: 1.0,
            mode: 1,
        };
        config.diagnostics_every = 100;
        let traj = evolve(&config).unwrap();
        for (t, d) in traj.times.iter().zip(traj.sup_dev.iter()) {
            let envelope = (-4.0 * PI * PI * t).exp() * 1.02 + 1e-12;
            assert!(*d <= envelope, "t = {t}: sup_dev {d} > envelope {envelope}");
        }
        // mass flat to rounding
        for m in &traj.mass {
            assert!((m - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn evolve_stationary_start_stays_flat() {
        let mut config = base_config(128, 1e-4, 0.1, Scheme::FImex);
        config.coeff = CoeffSpec::SinePerturbed {
            amplitude: 0.5,
            offset: 0.0,
        };
        config.seed = 21;
        config.kl_modes = Some(64);
        config.sigma = 0.6;
        config.initial = InitialSpec::Stationary { m: 1.0 };
        config.diagnostics_every = 50;
        let traj = evolve(&config).unwrap();
        for (t, e) in traj.times.iter().zip(traj.energy.iter()) {
            assert!(*e < 1e-12, "t = {t}: energy {e}");
        }
        for d in &traj.sup_dev {
            assert!(*d < 1e-9, "deviation {d}");
        }
    }

    #[test]
    fn evolve_dissipates_energy_and_converges_for_rough_noise() {
        // mu = 0 bridge noise, nonlinear phi: energy is nonincreasing and the
        // state approaches the stationary profile
        let mut config = base_config(128, 5e-4, 2.0, Scheme::FImex);
        config.coeff = CoeffSpec::SinePerturbed {
            amplitude: 0.5,
            offset: 0.0,
        };
        config.seed = 4;
        config.kl_modes = Some(64);
        config.initial = InitialSpec::Modes {
            mean: 0.5,
            terms: vec![
                SineTerm { amplitude: 0.4, mode: 1, phase: 0.0 },
                SineTerm { amplitude: 0.2, mode: 3, phase: 1.0 },
            ],
        };
        let traj = evolve(&config).unwrap();
        assert!(traj.mu.abs() < 1e-13, "sigma = 0 must give mu = 0");
        let max_inc = traj.max_energy_step_increase.unwrap();
        assert!(max_inc <= 1e-10, "energy increased by {max_inc}");
        assert!(*traj.sup_dev.last().unwrap() < 1e-6);
        let (ok, worst) = max_principle_check(&traj);
        assert!(ok, "max principle violated by {worst}");
    }

    #[test]
    fn schemes_cross_validate_under_joint_refinement() {
        let gap_at = |n: usize| {
            let h = 1.0 / n as f64;
            let dt = h * h / 4.0;
            let steps = (0.1 / dt).round() * dt;
            let mut cfg = base_config(n, dt, steps, Scheme::VFlux);
            cfg.coeff = CoeffSpec::SinePerturbed {
                amplitude: 0.5,
                offset: 0.0,
            };
            cfg.seed = 12;
            cfg.kl_modes = Some(16);
            cfg.eps = 1e-2;
            cfg.initial = InitialSpec::MeanPlusSine {
                mean: 0.5,
                amplitude: 0.5,
                mode: 1,
            };
            cfg.diagnostics_every = usize::MAX / 2; // final record only
            let t_v = evolve(&cfg).unwrap();
            let mut cfg_f = cfg.clone();
            cfg_f.scheme = Scheme::FImex;
            let t_f = evolve(&cfg_f).unwrap();
            let mut gap = 0.0f64;
            for j in 0..n {
                gap = gap.max((t_v.final_v.values()[j] - t_f.final_v.values()[j]).abs());
            }
            gap
        };
        let g64 = gap_at(64);
        let g128 = gap_at(128);
        let g256 = gap_at(256);
        assert!(g64 / g128 >= 1.8, "gap ratio {} not converging", g64 / g128);
        assert!(g128 / g256 >= 1.8, "gap ratio {} not converging", g128 / g256);
    }

    #[test]
    fn recover_u_is_exact_at_t_zero() {
        // v0 = spectral derivative of a band-limited u0: the four-term
        // formula returns u0 itself at t = 0
        let n = 128;
        let u0 = GridFunction::from_fn(n, |x| {
            0.3 + 0.5 * (2.0 * PI * x).sin() + 0.2 * (4.0 * PI * x).cos()
        })
        .unwrap();
        let v0 = u0.derivative(1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v0.csv");
        v0.write_csv(&path).unwrap();
        let mut config = base_config(n, 1e-4, 1e-4, Scheme::FImex);
        config.initial = InitialSpec::FromCsv {
            path: path.to_string_lossy().into_owned(),
        };
        let traj = evolve(&config).unwrap();
        let series = recover_u(&traj, &u0).unwrap();
        for j in 0..n {
            assert!(
                (series.snapshots[0].values()[j] - u0.values()[j]).abs() < 1e-12,
                "u(0) mismatch at node {j}"
            );
        }
    }

    #[test]
    fn recover_u_zero_solution_stays_zero() {
        let n = 64;
        let mut config = base_config(n, 1e-4, 0.01, Scheme::FImex);
        config.initial = InitialSpec::Constant { value: 0.0 };
        config.snapshot_every = Some(50);
        let traj = evolve(&config).unwrap();
        let u0 = GridFunction::constant(n, 0.0).unwrap();
        let series = recover_u(&traj, &u0).unwrap();
        for snap in &series.snapshots {
            for &val in snap.values() {
                assert!(val.abs() < 1e-13);
            }
        }
    }

    #[test]
    fn recover_u_residual_small_for_smooth_noise() {
        // single smooth mode, v_flux, dense snapshots: the recovered u
        // satisfies the integrated equation to truncation accuracy
        let n = 512;
        let h = 1.0 / n as f64;
        let dt = 1e-6;
        assert!(dt <= h * h / (2.0 * 1.5));
        let steps = 200;
        let mut config = base_config(n, dt, steps as f64 * dt, Scheme::VFlux);
        config.coeff = CoeffSpec::SinePerturbed { amplitude: 0.5, offset: 0.0 };
        // zero mass keeps the recovered u periodic, as the torus formula needs
        config.initial = InitialSpec::MeanPlusSine { mean: 0.0, amplitude: 0.1, mode: 1 };
        config.snapshot_every = Some(1);
        config.diagnostics_every = steps;
        // explicit smooth noise: a single sine mode in eta
        let eta = GridFunction::from_fn(n, |x| 0.2 * (2.0 * PI * x).sin()).unwrap();
        let noise = NoiseSample::from_parts(eta, 0.0).unwrap();
        let traj = evolve_with_noise(&config, &noise).unwrap();
        let u0 = GridFunction::from_fn(n, |x| -0.1 / (2.0 * PI) * (2.0 * PI * x).cos()).unwrap();
        let series = recover_u(&traj, &u0).unwrap();
        let mid = series.snapshots.len() / 2;
        let res = u_pde_residual(&series, &config.coeff.build().unwrap(), &traj.xi, mid).unwrap();
        assert!(res < 1e-4, "pde residual {res}");
    }

    #[test]
    fn drift_slope_vanishes_without_drift() {
        let mut config = base_config(128, 2e-4, 2.0, Scheme::FImex);
        config.coeff = CoeffSpec::SinePerturbed { amplitude: 0.5, offset: 0.0 };
        config.seed = 6;
        config.kl_modes = Some(32);
        config.eps = 1e-3;
        config.initial = InitialSpec::Modes {
            mean: 0.0,
            terms: vec![SineTerm { amplitude: 0.3, mode: 2, phase: 0.4 }],
        };
        config.diagnostics_every = 100;
        config.snapshot_every = Some(100);
        let traj = evolve(&config).unwrap();
        assert_eq!(traj.mu, 0.0);
        let u0 = GridFunction::constant(128, 0.0).unwrap();
        let series = recover_u(&traj, &u0).unwrap();
        let slope = drift_estimate(&series, (1.0, 2.0)).unwrap();
        assert!(slope.abs() < 1e-6, "slope {slope}");
    }

    #[test]
    fn max_principle_for_heat_run() {
        let mut config = base_config(128, 1e-4, 0.2, Scheme::FImex);
        config.initial = InitialSpec::MeanPlusSine {
            mean: 0.5,
            amplitude: 0.5,
            mode: 1,
        };
        config.diagnostics_every = 200;
        let traj = evolve(&config).unwrap();
        let (ok, worst) = max_principle_check(&traj);
        assert!(ok, "violation {worst}");
        assert!(traj.f_running_max <= 1.0 + MAX_PRINCIPLE_TOLERANCE);
        assert!(traj.f_running_min >= 0.0 - MAX_PRINCIPLE_TOLERANCE);
    }

    #[test]
    fn initial_layer_smooth_start_is_flat_across_grids() {
        // two-mode (hence smooth) f(0): the H^1 norms barely move with n
        let report = initial_layer_probe(
            11,
            &[64, 256],
            1e-3,
            1e-5,
            16,
            &CoeffSpec::SinePerturbed { amplitude: 0.5, offset: 0.0 },
            1.0,
            0.3,
            Some(2),
        )
        .unwrap();
        let r0 = &report.rows[0];
        let r1 = &report.rows[1];
        let ratio_t0 = r1.h1_t0 / r0.h1_t0;
        assert!(
            (0.9..1.1).contains(&ratio_t0),
            "smooth start should be refinement-stable, ratio {ratio_t0}"
        );
        assert!(r0.max_post_delta_increase <= 1e-10);
        assert!(r1.max_post_delta_increase <= 1e-10);
    }

    #[test]
    fn determinism_bitwise() {
        let mut config = base_config(64, 1e-4, 0.02, Scheme::FImex);
        config.coeff = CoeffSpec::SinePerturbed { amplitude: 0.5, offset: 0.0 };
        config.seed = 33;
        config.kl_modes = Some(32);
        config.sigma = 0.4;
        config.initial = InitialSpec::MeanPlusSine { mean: 0.3, amplitude: 0.2, mode: 2 };
        let a = evolve(&config).unwrap();
        let b = evolve(&config).unwrap();
        assert_eq!(a.final_v.values(), b.final_v.values());
        assert_eq!(a.energy, b.energy);
        assert_eq!(a.chi_xi, b.chi_xi);
    }

    #[test]
    fn artifacts_regenerate_bit_identically() {
        let mut config = base_config(64, 1e-4, 0.01, Scheme::FImex);
        config.coeff = CoeffSpec::SinePerturbed { amplitude: 0.5, offset: 0.0 };
        config.seed = 14;
        config.kl_modes = Some(32);
        config.initial = InitialSpec::MeanPlusSine { mean: 0.4, amplitude: 0.3, mode: 1 };
        config.snapshot_every = Some(50);
        let dir = tempfile::tempdir().unwrap();
        let d1 = dir.path().join("run1");
        let d2 = dir.path().join("run2");
        let traj = evolve(&config).unwrap();
        let manifest = write_artifacts(&traj, &d1, 0.0).unwrap();
        // regenerate from the manifest's config echo
        let loaded = read_manifest(&d1.join("manifest.json")).unwrap();
        assert_eq!(loaded.config, config);
        let traj2 = evolve(&loaded.config).unwrap();
        let manifest2 = write_artifacts(&traj2, &d2, 0.0).unwrap();
        assert_eq!(manifest.artifacts, manifest2.artifacts);
        for entry in &manifest.artifacts {
            let b1 = std::fs::read(d1.join(&entry.name)).unwrap();
            let b2 = std::fs::read(d2.join(&entry.name)).unwrap();
            assert_eq!(b1, b2, "artifact {} differs", entry.name);
            assert_eq!(format!("{:016x}", fnv64(&b1)), entry.fnv64);
        }
    }

    #[test]
    fn config_validation_rejects_bad_inputs() {
        let mut c = base_config(4, 1e-4, 0.01, Scheme::FImex);
        assert!(matches!(c.validate(), Err(SolverError::Config(_))));
        c = base_config(64, 1e-4, 2.5e-4, Scheme::FImex);
        assert!(matches!(c.steps(), Err(SolverError::Config(_))));
        c = base_config(64, -1.0, 1.0, Scheme::FImex);
        assert!(matches!(c.steps(), Err(SolverError::Config(_))));
        // unknown field in JSON config
        let text = r#"{"n":64,"dt":1e-4,"t_end":0.01,"scheme":"f_imex",
            "coeff":{"kind":"linear"},
            "initial":{"kind":"constant","value":0.0},
            "bogus": 1}"#;
        assert!(serde_json::from_str::<SimConfig>(text).is_err());
        // mass mismatch
        let mut c = base_config(64, 1e-4, 0.01, Scheme::FImex);
        c.initial = InitialSpec::Constant { value: 1.0 };
        c.m = Some(0.0);
        assert!(matches!(evolve(&c), Err(SolverError::Config(_))));
    }

    #[test]
    fn blow_up_guard_reports_step() {
        let mut config = base_config(64, 1e-4, 0.05, Scheme::FImex);
        config.initial = InitialSpec::MeanPlusSine { mean: 0.0, amplitude: 0.9, mode: 1 };
        config.blowup_ceiling = 0.5;
        match evolve(&config) {
            Err(SolverError::BlowUp { step, sup, .. }) => {
                assert!(step >= 1);
                assert!(sup > 0.5);
            }
            other => panic!("expected blow-up report, got {other:?}"),
        }
    }

    #[test]
    fn config_json_round_trip() {
        let mut config = base_config(128, 2e-4, 1.0, Scheme::VFlux);
        config.eps = 1e-3;
        config.sigma = 0.05;
        config.initial = InitialSpec::RoughF { level: 1.0, amplitude: 0.2, kl_modes: 64 };
        let text = serde_json::to_string_pretty(&config).unwrap();
        let back: SimConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, config);
    }
}
