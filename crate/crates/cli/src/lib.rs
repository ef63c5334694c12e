//! Batch experiment driver for the torus SPDE library: each subcommand reads
//! a JSON config, runs the corresponding library campaign, writes artifacts
//! plus a `report.json` into the output directory, and prints a PASS/FAIL
//! line per embedded assertion.
//!
//! Exit-code contract: 0 all checks pass, 1 an embedded assertion failed,
//! 2 configuration error, 3 numerical abort. Sweeps (seeds, mollification
//! scales) fan out to a bounded worker pool; setting the environment
//! variable `SPDE1D_DETERMINISTIC` to anything but `0` forces a single
//! worker.

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

use spde1d::energy;
use spde1d::fit;
use spde1d::grid::NormKind;
use spde1d::noise::{derive_seed, NoiseSample};
use spde1d::solver::{self, CoeffSpec, SimConfig, SolverError, Trajectory};
use spde1d::stationary::{self, StationaryProfile};

/// Name of the deterministic-mode environment toggle.
pub const DETERMINISTIC_ENV: &str = "SPDE1D_DETERMINISTIC";

/// Fatal driver errors (assertion failures are not errors; they show up as
/// FAIL checks in the report and exit code 1).
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

fn solver_err(e: SolverError) -> CliError {
    match e {
        SolverError::Config(_) | SolverError::Json(_) => CliError::Config(e.to_string()),
        other => CliError::Numerical(other.to_string()),
    }
}

fn num_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Numerical(e.to_string())
}

/// One assertion (or informational) line of a command report.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub status: String,
    pub detail: String,
}

impl Check {
    fn pass(name: impl Into<String>, detail: impl Into<String>) -> Self {
        Self { name: name.into(), status: "PASS".into(), detail: detail.into() }
    }
    fn fail(name: impl Into<String>, detail: impl Into<String>) -> Self {
        Self { name: name.into(), status: "FAIL".into(), detail: detail.into() }
    }
    fn skipped(name: impl Into<String>, detail: impl Into<String>) -> Self {
        Self { name: name.into(), status: "SKIPPED".into(), detail: detail.into() }
    }
    fn gate(name: impl Into<String>, ok: bool, detail: impl Into<String>) -> Self {
        if ok { Self::pass(name, detail) } else { Self::fail(name, detail) }
    }
}

/// Machine-readable command report; also rendered to stdout. Echoes the
/// effective config so a run regenerates from its report alone.
#[derive(Debug, Serialize)]
pub struct Report {
    pub command: String,
    pub ok: bool,
    pub config: serde_json::Value,
    pub checks: Vec<Check>,
    pub data: serde_json::Value,
}

impl Report {
    fn new<C: Serialize>(
        command: &str,
        config: &C,
        checks: Vec<Check>,
        data: serde_json::Value,
    ) -> Self {
        let ok = checks.iter().all(|c| c.status != "FAIL");
        let config = serde_json::to_value(config).unwrap_or(serde_json::Value::Null);
        Self { command: command.to_string(), ok, config, checks, data }
    }

    /// 0 when every embedded assertion passed, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.ok { 0 } else { 1 }
    }

    /// Prints the PASS/FAIL lines and a one-line verdict.
    pub fn print(&self) {
        for c in &self.checks {
            println!("{} {}: {}", c.status, c.name, c.detail);
        }
        println!(
            "{}: {} ({} checks, {} failed)",
            if self.ok { "OK" } else { "FAILED" },
            self.command,
            self.checks.len(),
            self.checks.iter().filter(|c| c.status == "FAIL").count()
        );
    }

    /// Writes `report.json` into the output directory.
    pub fn write(&self, out_dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(out_dir).map_err(num_err)?;
        let text = serde_json::to_string_pretty(self).map_err(num_err)?;
        std::fs::write(out_dir.join("report.json"), text + "\n").map_err(num_err)
    }
}

/// Effective worker count: the deterministic env toggle forces 1, otherwise
/// the requested count (or all available cores) with a floor of 1.
pub fn effective_workers(requested: Option<usize>) -> usize {
    let deterministic = std::env::var_os(DETERMINISTIC_ENV).is_some_and(|v| v != "0");
    if deterministic {
        return 1;
    }
    requested
        .unwrap_or_else(|| {
            std::thread::available_parallelism().map(|p| p.get()).unwrap_or(1)
        })
        .max(1)
}

/// Runs `count` independent jobs on a bounded pool, aggregating results in
/// input order (worker scheduling never affects the output).
fn run_parallel<T, F>(count: usize, workers: usize, job: F) -> Result<Vec<T>, CliError>
where
    T: Send,
    F: Fn(usize) -> Result<T, CliError> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.min(count).max(1))
        .build()
        .map_err(num_err)?;
    pool.install(|| (0..count).into_par_iter().map(|i| job(i)).collect())
}

fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn build_sample(n: usize, kl: usize, seed: u64, sigma: f64, eps: f64) -> Result<(NoiseSample, NoiseSample), CliError> {
    let raw = NoiseSample::sample_bridge(seed, n, kl)
        .and_then(|s| s.with_drift(sigma))
        .map_err(num_err)?;
    let effective = if eps > 0.0 { raw.mollified(eps).map_err(num_err)? } else { raw.clone() };
    Ok((raw, effective))
}

// ---------------------------------------------------------------------------
// noise

/// Config for the `noise` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub n: usize,
    pub kl_modes: usize,
    pub seed: u64,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub eps_list: Vec<f64>,
}

/// Samples a noise realization, writes the path and each requested
/// mollification, and reports summary statistics.
pub fn run_noise(cfg: &NoiseConfig, out: &Path) -> Result<Report, CliError> {
    std::fs::create_dir_all(out).map_err(num_err)?;
    let sample = NoiseSample::sample_bridge(cfg.seed, cfg.n, cfg.kl_modes)
        .and_then(|s| s.with_drift(cfg.sigma))
        .map_err(num_err)?;
    sample.write_eta_csv(&out.join("eta.csv")).map_err(num_err)?;
    sample
        .write_header_json(&out.join("noise.json"))
        .map_err(num_err)?;
    let mut xi_files = Vec::new();
    for (i, &eps) in cfg.eps_list.iter().enumerate() {
        if eps < 0.0 {
            return Err(CliError::Config(format!("eps_list[{i}] = {eps} must be >= 0")));
        }
        let xi = sample.mollified_xi(eps).map_err(num_err)?;
        let name = format!("xi_eps_{i}.csv");
        xi.write_csv(&out.join(&name)).map_err(num_err)?;
        xi_files.push(serde_json::json!({"eps": eps, "file": name, "sup": xi.norm(NormKind::LInf).map_err(num_err)?}));
    }
    let sup_eta = sample.eta_tilde().norm(NormKind::LInf).map_err(num_err)?;
    let data = serde_json::json!({
        "n": cfg.n,
        "kl_modes": cfg.kl_modes,
        "seed": cfg.seed,
        "sigma": sample.sigma(),
        "sup_eta_tilde": sup_eta,
        "xi": xi_files,
    });
    Ok(Report::new("noise", cfg, vec![], data))
}

// ---------------------------------------------------------------------------
// stationary

/// Config for the `stationary` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationaryConfig {
    pub n: usize,
    pub kl_modes: usize,
    pub seed: u64,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub eps: f64,
    pub coeff: CoeffSpec,
    pub m: f64,
}

/// Builds the stationary machinery for one noise sample and writes the
/// profile, summary JSON, and (for mollified noise) the defining-identity
/// residual.
pub fn run_stationary(cfg: &StationaryConfig, out: &Path) -> Result<Report, CliError> {
    std::fs::create_dir_all(out).map_err(num_err)?;
    let coeff = cfg.coeff.build().map_err(solver_err)?;
    let (raw, effective) = build_sample(cfg.n, cfg.kl_modes, cfg.seed, cfg.sigma, cfg.eps)?;
    let profile = StationaryProfile::build(&coeff, &effective, cfg.m).map_err(num_err)?;
    profile.write_csv(&out.join("profile.csv")).map_err(num_err)?;
    profile
        .write_json(&coeff, &out.join("summary.json"))
        .map_err(num_err)?;
    let summary = profile.summary(&coeff).map_err(num_err)?;
    let residual = if cfg.eps > 0.0 {
        let xi = raw.mollified_xi(cfg.eps).map_err(num_err)?;
        Some(
            stationary::residual_theta(&profile.theta, profile.mu, &xi).map_err(num_err)?,
        )
    } else {
        None
    };
    let theta_min = profile.theta.values().iter().cloned().fold(f64::INFINITY, f64::min);
    let theta_max = profile.theta.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let data = serde_json::json!({
        "mu": profile.mu,
        "z_m": profile.z_m,
        "m": profile.m,
        "theta_min": theta_min,
        "theta_max": theta_max,
        "c1": summary.c1,
        "c2": summary.c2,
        "C_theta": summary.c_theta,
        "mu_star": summary.mu_star,
        "residual_sup": residual,
    });
    Ok(Report::new("stationary", cfg, vec![], data))
}

// ---------------------------------------------------------------------------
// energy

/// Config for the `energy` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyConfig {
    pub n: usize,
    pub kl_modes: usize,
    pub seed: u64,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub eps: f64,
    pub coeff: CoeffSpec,
    #[serde(default = "default_poincare_samples")]
    pub poincare_samples: usize,
}

fn default_poincare_samples() -> usize {
    256
}

/// Reports the decay constants of a sampled weight and exercises the
/// weighted Poincaré inequality on rough sampled test functions.
pub fn run_energy(cfg: &EnergyConfig, out: &Path) -> Result<Report, CliError> {
    std::fs::create_dir_all(out).map_err(num_err)?;
    let coeff = cfg.coeff.build().map_err(solver_err)?;
    let (_, effective) = build_sample(cfg.n, cfg.kl_modes, cfg.seed, cfg.sigma, cfg.eps)?;
    let (theta, mu) = stationary::build_theta(&effective).map_err(num_err)?;
    let bound = energy::decay_rate_bound(&coeff, &theta, mu).map_err(num_err)?;
    let text = serde_json::to_string_pretty(&bound).map_err(num_err)?;
    std::fs::write(out.join("decay_bound.json"), text + "\n").map_err(num_err)?;

    let mut violations = 0usize;
    let mut worst_margin = f64::INFINITY;
    for k in 0..cfg.poincare_samples {
        let test_seed = derive_seed(cfg.seed, 1000 + k as u64);
        let path = NoiseSample::sample_bridge(test_seed, cfg.n, cfg.n / 4)
            .map_err(num_err)?;
        let f = path.eta_tilde().clone();
        let (phi, rhs) = energy::verify_poincare(&f, &theta).map_err(num_err)?;
        let margin = rhs - phi;
        worst_margin = worst_margin.min(margin);
        if phi > rhs * (1.0 + 1e-10) + 1e-14 {
            violations += 1;
        }
    }
    let data = serde_json::json!({
        "c_of_theta": bound.c_of_theta,
        "c1": bound.c1,
        "c2": bound.c2,
        "rate": bound.rate,
        "c_star_mu0": bound.c_star_mu0,
        "mu": mu,
        "poincare_samples": cfg.poincare_samples,
        "poincare_violations": violations,
        "poincare_worst_margin": worst_margin,
    });
    Ok(Report::new("energy", cfg, vec![], data))
}

// ---------------------------------------------------------------------------
// simulate

/// Runs one simulation and writes its full artifact set plus manifest.
pub fn run_simulate(cfg: &SimConfig, out: &Path) -> Result<Report, CliError> {
    let start = Instant::now();
    let traj = solver::evolve(cfg).map_err(solver_err)?;
    let wall = start.elapsed().as_secs_f64();
    let manifest = solver::write_artifacts(&traj, out, wall).map_err(num_err)?;
    let (mp_ok, worst) = solver::max_principle_check(&traj);
    let data = serde_json::json!({
        "steps": manifest.steps,
        "wall_secs": wall,
        "mu": traj.mu,
        "m": traj.m,
        "z_m": traj.z_m,
        "final_mass": manifest.final_mass,
        "final_energy": manifest.final_energy,
        "final_sup_dev": manifest.final_sup_dev,
        "max_principle_ok": mp_ok,
        "max_principle_worst": worst,
        "artifacts": manifest.artifacts.len(),
    });
    Ok(Report::new("simulate", cfg, vec![], data))
}

// ---------------------------------------------------------------------------
// decay

/// Config for the `decay` subcommand: a seed sweep of zero-drift runs with
/// energy-dissipation and decay-rate gates.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecayConfig {
    pub base: SimConfig,
    pub seeds: Vec<u64>,
    #[serde(default = "default_t_layer")]
    pub t_layer: f64,
    #[serde(default = "default_floor_relative")]
    pub floor_relative: f64,
    #[serde(default = "default_slope_margin")]
    pub slope_margin: f64,
}

fn default_t_layer() -> f64 {
    1e-2
}

fn default_floor_relative() -> f64 {
    1e-18
}

fn default_slope_margin() -> f64 {
    0.95
}

/// Outcome of the per-seed decay gates.
#[derive(Debug, Clone, Serialize)]
pub struct DecaySeedResult {
    pub seed: u64,
    pub mu: f64,
    pub max_energy_step_increase: f64,
    pub fitted_slope: f64,
    pub slope_bound: f64,
    pub envelope_ok: bool,
    pub final_sup_dev: f64,
}

fn decay_run_checks(
    traj: &Trajectory,
    t_layer: f64,
    floor_relative: f64,
    slope_margin: f64,
) -> Result<DecaySeedResult, CliError> {
    let max_inc = traj
        .max_energy_step_increase
        .ok_or_else(|| CliError::Config("decay runs need diagnostics_every = 1".into()))?;
    let coeff = traj.config.coeff.build().map_err(solver_err)?;
    let c2 = energy::poincare_constant(&traj.theta).map_err(num_err)?;
    let slope_bound = -slope_margin * coeff.c_minus() / c2;
    let (fitted_slope, _) =
        fit::fit_log_slope(&traj.times, &traj.energy, t_layer, floor_relative).map_err(num_err)?;
    // H^1 envelope anchored at the end of the initial layer
    let c_star = coeff.c_minus() / c2;
    let i0 = traj
        .times
        .iter()
        .position(|&t| t >= t_layer)
        .ok_or(CliError::Config("t_layer beyond the recorded window".into()))?;
    let anchor = traj.hnorm[i0] / (-0.5 * c_star * traj.times[i0]).exp();
    let mut envelope_ok = true;
    for i in i0..traj.times.len() {
        let bound = anchor * (-0.5 * c_star * traj.times[i]).exp();
        if traj.hnorm[i] > bound * (1.0 + 1e-9) + 1e-12 {
            envelope_ok = false;
            break;
        }
    }
    Ok(DecaySeedResult {
        seed: traj.config.seed,
        mu: traj.mu,
        max_energy_step_increase: max_inc,
        fitted_slope,
        slope_bound,
        envelope_ok,
        final_sup_dev: *traj.sup_dev.last().unwrap(),
    })
}

/// Runs the decay matrix and gates each run on energy monotonicity, fitted
/// log-energy slope, and the exponential envelope.
pub fn run_decay(cfg: &DecayConfig, out: &Path, workers: usize) -> Result<Report, CliError> {
    if cfg.seeds.is_empty() {
        return Err(CliError::Config("seeds list must be nonempty".into()));
    }
    if cfg.base.sigma != 0.0 {
        return Err(CliError::Config(
            "decay campaign requires sigma = 0 (zero-drift theory)".into(),
        ));
    }
    std::fs::create_dir_all(out).map_err(num_err)?;
    let results = run_parallel(cfg.seeds.len(), workers, |i| {
        let mut run_cfg = cfg.base.clone();
        run_cfg.seed = cfg.seeds[i];
        let traj = solver::evolve(&run_cfg).map_err(solver_err)?;
        let seed_dir = out.join(format!("seed_{}", cfg.seeds[i]));
        solver::write_artifacts(&traj, &seed_dir, 0.0).map_err(num_err)?;
        decay_run_checks(&traj, cfg.t_layer, cfg.floor_relative, cfg.slope_margin)
    })?;
    let mut checks = Vec::new();
    for r in &results {
        checks.push(Check::gate(
            format!("energy_monotone seed={}", r.seed),
            r.max_energy_step_increase <= 1e-10,
            format!("max step increase {:.3e} (slack 1e-10)", r.max_energy_step_increase),
        ));
        checks.push(Check::gate(
            format!("decay_slope seed={}", r.seed),
            r.fitted_slope <= r.slope_bound,
            format!("fitted {:.4} vs bound {:.4}", r.fitted_slope, r.slope_bound),
        ));
        checks.push(Check::gate(
            format!("h1_envelope seed={}", r.seed),
            r.envelope_ok,
            "post-layer H1 deviation under the exponential envelope".to_string(),
        ));
    }
    let data = serde_json::to_value(&results).map_err(num_err)?;
    Ok(Report::new("decay", cfg, checks, serde_json::json!({"runs": data})))
}

// ---------------------------------------------------------------------------
// drift

/// Config for the `drift` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftConfig {
    pub config: SimConfig,
    pub window_lo: f64,
    pub window_hi: f64,
    #[serde(default = "default_drift_tolerance")]
    pub tolerance_rel: f64,
    #[serde(default = "default_pairing_tolerance")]
    pub pairing_tolerance: f64,
}

fn default_drift_tolerance() -> f64 {
    0.10
}

fn default_pairing_tolerance() -> f64 {
    1e-8
}

/// Runs a drifted simulation, recovers the integrated solution, and gates
/// the fitted mean drift against the predicted `z_m * mu`, plus the
/// weight-noise pairing identity `<theta xi> = mu`.
pub fn run_drift(cfg: &DriftConfig, out: &Path) -> Result<Report, CliError> {
    std::fs::create_dir_all(out).map_err(num_err)?;
    if cfg.config.snapshot_every.is_none() {
        return Err(CliError::Config(
            "drift campaign needs snapshot_every set for the u-series".into(),
        ));
    }
    let start = Instant::now();
    let traj = solver::evolve(&cfg.config).map_err(solver_err)?;
    if traj.m.abs() > 1e-10 {
        return Err(CliError::Config(format!(
            "drift recovery requires zero mass (periodic u), got m = {}",
            traj.m
        )));
    }
    let wall = start.elapsed().as_secs_f64();
    solver::write_artifacts(&traj, out, wall).map_err(num_err)?;
    let u0 = traj.snapshots[0].v.cumulative_integral().map_err(num_err)?;
    let series = solver::recover_u(&traj, &u0).map_err(num_err)?;
    let slope = solver::drift_estimate(&series, (cfg.window_lo, cfg.window_hi)).map_err(solver_err)?;
    let predicted = traj.z_m * traj.mu;

    let h = 1.0 / traj.config.n as f64;
    let pairing: f64 = traj
        .theta
        .values()
        .iter()
        .zip(traj.xi.values().iter())
        .map(|(t, x)| t * x)
        .sum::<f64>()
        * h;
    let pairing_gap = (pairing - traj.mu).abs();

    let slope_ok = if predicted.abs() > 1e-12 {
        (slope - predicted).abs() <= cfg.tolerance_rel * predicted.abs()
    } else {
        slope.abs() <= 1e-6
    };
    let checks = vec![
        Check::gate(
            "drift_slope",
            slope_ok,
            format!("fitted {slope:.6e} vs predicted {predicted:.6e}"),
        ),
        Check::gate(
            "theta_xi_pairing",
            pairing_gap <= cfg.pairing_tolerance,
            format!("|<theta xi> - mu| = {pairing_gap:.3e}"),
        ),
    ];
    let data = serde_json::json!({
        "slope": slope,
        "predicted": predicted,
        "mu": traj.mu,
        "z_m": traj.z_m,
        "pairing_gap": pairing_gap,
        "window": [cfg.window_lo, cfg.window_hi],
    });
    Ok(Report::new("drift", cfg, checks, data))
}

// ---------------------------------------------------------------------------
// convergence

/// Config for the `convergence` subcommand (mollification Cauchy sweep).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceConfig {
    pub base: SimConfig,
    pub eps_list: Vec<f64>,
    #[serde(default = "default_min_gap_ratio")]
    pub min_gap_ratio: f64,
}

fn default_min_gap_ratio() -> f64 {
    1.0
}

/// Runs the same config (same raw noise sample, same initial data) at each
/// mollification scale and gates the sup-norm gaps between successive
/// solutions: they must decrease, each by at least `min_gap_ratio`.
pub fn run_convergence(
    cfg: &ConvergenceConfig,
    out: &Path,
    workers: usize,
) -> Result<Report, CliError> {
    if cfg.eps_list.len() < 2 {
        return Err(CliError::Config("eps_list needs at least two entries".into()));
    }
    for w in cfg.eps_list.windows(2) {
        if !(w[1] < w[0]) {
            return Err(CliError::Config(
                "eps_list must be strictly decreasing".into(),
            ));
        }
    }
    if cfg.eps_list.iter().any(|&e| e <= 0.0) {
        return Err(CliError::Config("eps_list entries must be positive".into()));
    }
    std::fs::create_dir_all(out).map_err(num_err)?;
    let noise = solver::build_noise(&cfg.base).map_err(solver_err)?;
    let finals = run_parallel(cfg.eps_list.len(), workers, |i| {
        let mut run_cfg = cfg.base.clone();
        run_cfg.eps = cfg.eps_list[i];
        let traj = solver::evolve_with_noise(&run_cfg, &noise).map_err(solver_err)?;
        let dir = out.join(format!("eps_{i}"));
        solver::write_artifacts(&traj, &dir, 0.0).map_err(num_err)?;
        Ok(traj.final_v)
    })?;
    let mut gaps = Vec::new();
    for w in finals.windows(2) {
        let gap = w[0]
            .zip_with(&w[1], |a, b| a - b)
            .map_err(num_err)?
            .norm(NormKind::LInf)
            .map_err(num_err)?;
        gaps.push(gap);
    }
    let mut checks = Vec::new();
    if gaps.len() < 2 {
        checks.push(Check::skipped(
            "gap_trend",
            "fewer than three mollification scales; no successive ratio to compare",
        ));
    }
    for i in 0..gaps.len().saturating_sub(1) {
        let ratio = gaps[i] / gaps[i + 1];
        checks.push(Check::gate(
            format!("gap_ratio {}", i),
            gaps[i + 1] < gaps[i] && ratio >= cfg.min_gap_ratio,
            format!(
                "gap(eps {} -> {}) = {:.3e}, gap(eps {} -> {}) = {:.3e}, ratio {:.2}",
                cfg.eps_list[i],
                cfg.eps_list[i + 1],
                gaps[i],
                cfg.eps_list[i + 1],
                cfg.eps_list[i + 2],
                gaps[i + 1],
                ratio
            ),
        ));
    }
    let data = serde_json::json!({
        "eps_list": cfg.eps_list,
        "gaps": gaps,
        "min_gap_ratio": cfg.min_gap_ratio,
    });
    Ok(Report::new("convergence", cfg, checks, data))
}

// ---------------------------------------------------------------------------
// initial-layer

/// Config for the `initial-layer` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub seed: u64,
    pub grids: Vec<usize>,
    pub delta: f64,
    pub dt: f64,
    pub noise_kl: usize,
    pub coeff: CoeffSpec,
    pub level: f64,
    pub amplitude: f64,
    #[serde(default)]
    pub f0_kl: Option<usize>,
    #[serde(default = "default_t0_bounds")]
    pub t0_ratio_bounds: [f64; 2],
    #[serde(default = "default_delta_bounds")]
    pub delta_ratio_bounds: [f64; 2],
}

fn default_t0_bounds() -> [f64; 2] {
    [1.7, 2.3]
}

fn default_delta_bounds() -> [f64; 2] {
    [0.8, 1.25]
}

/// Runs the initial-layer refinement study and gates the discrete `H^1`
/// growth ratio at `t = 0` and its stabilization at `t = delta` for every
/// 4x grid pair, plus post-layer energy monotonicity.
pub fn run_initial_layer(cfg: &LayerConfig, out: &Path) -> Result<Report, CliError> {
    std::fs::create_dir_all(out).map_err(num_err)?;
    let report = solver::initial_layer_probe(
        cfg.seed,
        &cfg.grids,
        cfg.delta,
        cfg.dt,
        cfg.noise_kl,
        &cfg.coeff,
        cfg.level,
        cfg.amplitude,
        cfg.f0_kl,
    )
    .map_err(solver_err)?;
    let text = serde_json::to_string_pretty(&report).map_err(num_err)?;
    std::fs::write(out.join("layer_report.json"), text + "\n").map_err(num_err)?;

    let mut checks = Vec::new();
    let mut quadruple_pairs = 0;
    for i in 0..report.rows.len() {
        for j in (i + 1)..report.rows.len() {
            if report.rows[j].n == 4 * report.rows[i].n {
                quadruple_pairs += 1;
                let coarse = &report.rows[i];
                let fine = &report.rows[j];
                let r0 = fine.h1_t0 / coarse.h1_t0;
                let rd = fine.h1_delta / coarse.h1_delta;
                checks.push(Check::gate(
                    format!("h1_growth_t0 n={}->{}", coarse.n, fine.n),
                    (cfg.t0_ratio_bounds[0]..=cfg.t0_ratio_bounds[1]).contains(&r0),
                    format!("ratio {r0:.3} expected in [{}, {}]", cfg.t0_ratio_bounds[0], cfg.t0_ratio_bounds[1]),
                ));
                checks.push(Check::gate(
                    format!("h1_stable_delta n={}->{}", coarse.n, fine.n),
                    (cfg.delta_ratio_bounds[0]..=cfg.delta_ratio_bounds[1]).contains(&rd),
                    format!("ratio {rd:.3} expected in [{}, {}]", cfg.delta_ratio_bounds[0], cfg.delta_ratio_bounds[1]),
                ));
            }
        }
    }
    if quadruple_pairs == 0 {
        checks.push(Check::skipped(
            "h1_growth_t0",
            "no 4x grid pair in the sweep; nothing to compare",
        ));
    }
    for row in &report.rows {
        checks.push(Check::gate(
            format!("post_layer_energy n={}", row.n),
            row.phi_delta.is_finite() && row.max_post_delta_increase <= 1e-10,
            format!(
                "phi(delta) = {:.4e}, max post-layer increase {:.3e}",
                row.phi_delta, row.max_post_delta_increase
            ),
        ));
    }
    let data = serde_json::to_value(&report).map_err(num_err)?;
    Ok(Report::new("initial-layer", cfg, checks, data))
}

// ---------------------------------------------------------------------------
// dispatcher

/// Subcommand selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Noise,
    Stationary,
    Energy,
    Simulate,
    Decay,
    Drift,
    Convergence,
    InitialLayer,
}

impl CommandKind {
    /// The subcommand's CLI name.
    pub fn name(self) -> &'static str {
        match self {
            CommandKind::Noise => "noise",
            CommandKind::Stationary => "stationary",
            CommandKind::Energy => "energy",
            CommandKind::Simulate => "simulate",
            CommandKind::Decay => "decay",
            CommandKind::Drift => "drift",
            CommandKind::Convergence => "convergence",
            CommandKind::InitialLayer => "initial-layer",
        }
    }
}

/// Parsed invocation: command, config path, output directory, overrides.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub command: CommandKind,
    pub config_path: PathBuf,
    pub out_dir: PathBuf,
    pub seed_override: Option<u64>,
    pub workers: Option<usize>,
}

/// Loads the config, runs the command, writes and prints the report.
/// Returns the process exit code per the documented contract.
pub fn execute(inv: &Invocation) -> i32 {
    match dispatch(inv) {
        Ok(report) => {
            report.print();
            if let Err(e) = report.write(&inv.out_dir) {
                eprintln!("error: cannot write report: {e}");
                return e.exit_code();
            }
            report.exit_code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            // best-effort failure manifest so aborted runs leave a record
            // of where they stopped
            let failure = serde_json::json!({
                "command": inv.command.name(),
                "ok": false,
                "error": e.to_string(),
                "exit_code": e.exit_code(),
                "config_path": inv.config_path.display().to_string(),
            });
            if std::fs::create_dir_all(&inv.out_dir).is_ok() {
                if let Ok(text) = serde_json::to_string_pretty(&failure) {
                    let _ = std::fs::write(inv.out_dir.join("report.json"), text + "\n");
                }
            }
            e.exit_code()
        }
    }
}

fn dispatch(inv: &Invocation) -> Result<Report, CliError> {
    let workers = effective_workers(inv.workers);
    let path = inv.config_path.as_path();
    match inv.command {
        CommandKind::Noise => {
            let mut cfg: NoiseConfig = load_config(path)?;
            if let Some(s) = inv.seed_override {
                cfg.seed = s;
            }
            run_noise(&cfg, &inv.out_dir)
        }
        CommandKind::Stationary => {
            let mut cfg: StationaryConfig = load_config(path)?;
            if let Some(s) = inv.seed_override {
                cfg.seed = s;
            }
            run_stationary(&cfg, &inv.out_dir)
        }
        CommandKind::Energy => {
            let mut cfg: EnergyConfig = load_config(path)?;
            if let Some(s) = inv.seed_override {
                cfg.seed = s;
            }
            run_energy(&cfg, &inv.out_dir)
        }
        CommandKind::Simulate => {
            let mut cfg: SimConfig = load_config(path)?;
            if let Some(s) = inv.seed_override {
                cfg.seed = s;
            }
            run_simulate(&cfg, &inv.out_dir)
        }
        CommandKind::Decay => {
            let mut cfg: DecayConfig = load_config(path)?;
            if let Some(s) = inv.seed_override {
                cfg.base.seed = s;
            }
            run_decay(&cfg, &inv.out_dir, workers)
        }
        CommandKind::Drift => {
            let mut cfg: DriftConfig = load_config(path)?;
            if let Some(s) = inv.seed_override {
                cfg.config.seed = s;
            }
            run_drift(&cfg, &inv.out_dir)
        }
        CommandKind::Convergence => {
            let mut cfg: ConvergenceConfig = load_config(path)?;
            if let Some(s) = inv.seed_override {
                cfg.base.seed = s;
            }
            run_convergence(&cfg, &inv.out_dir, workers)
        }
        CommandKind::InitialLayer => {
            let mut cfg: LayerConfig = load_config(path)?;
            if let Some(s) = inv.seed_override {
                cfg.seed = s;
            }
            run_initial_layer(&cfg, &inv.out_dir)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use spde1d::solver::{InitialSpec, Scheme};

    fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, serde_json::to_string_pretty(value).unwrap()).unwrap();
        p
    }

    #[test]
    fn stationary_zero_noise_pipeline() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = StationaryConfig {
            n: 64,
            kl_modes: 0,
            seed: 1,
            sigma: 0.0,
            eps: 0.0,
            coeff: CoeffSpec::Linear,
            m: 0.7,
        };
        let report = run_stationary(&cfg, dir.path()).unwrap();
        assert!(report.ok);
        assert_eq!(report.data["mu"].as_f64().unwrap(), 0.0);
        assert_eq!(report.data["theta_min"].as_f64().unwrap(), 1.0);
        assert_eq!(report.data["theta_max"].as_f64().unwrap(), 1.0);
        assert!((report.data["z_m"].as_f64().unwrap() - 0.7).abs() < 1e-12);
        assert!(dir.path().join("summary.json").exists());
        assert!(dir.path().join("profile.csv").exists());
    }

    #[test]
    fn energy_reports_no_poincare_violations() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = EnergyConfig {
            n: 64,
            kl_modes: 32,
            seed: 5,
            sigma: 0.0,
            eps: 0.0,
            coeff: CoeffSpec::SinePerturbed { amplitude: 0.5, offset: 0.0 },
            poincare_samples: 50,
        };
        let report = run_energy(&cfg, dir.path()).unwrap();
        assert_eq!(report.data["poincare_violations"].as_u64().unwrap(), 0);
        assert!(report.data["c2"].as_f64().unwrap() >= 0.5);
    }

    #[test]
    fn decay_campaign_passes_on_small_matrix() {
        let dir = tempfile::tempdir().unwrap();
        let base = SimConfig {
            n: 128,
            dt: 5e-4,
            t_end: 1.5,
            scheme: Scheme::FImex,
            eps: 0.0,
            seed: 0,
            sigma: 0.0,
            kl_modes: Some(64),
            coeff: CoeffSpec::SinePerturbed { amplitude: 0.5, offset: 0.0 },
            initial: InitialSpec::Modes {
                mean: 0.5,
                terms: vec![
                    solver::SineTerm { amplitude: 0.4, mode: 1, phase: 0.0 },
                    solver::SineTerm { amplitude: 0.2, mode: 3, phase: 1.0 },
                ],
            },
            m: None,
            diagnostics_every: 1,
            snapshot_every: None,
            blowup_ceiling: solver::DEFAULT_BLOWUP_CEILING,
        };
        let cfg = DecayConfig {
            base,
            seeds: vec![2, 7],
            t_layer: 0.05,
            floor_relative: 1e-18,
            slope_margin: 0.95,
        };
        let report = run_decay(&cfg, dir.path(), 2).unwrap();
        assert!(report.ok, "checks: {:?}", report.checks);
        assert!(dir.path().join("seed_2").join("energy.csv").exists());
        assert!(dir.path().join("seed_7").join("manifest.json").exists());
    }

    #[test]
    fn convergence_gaps_decrease() {
        let dir = tempfile::tempdir().unwrap();
        let base = SimConfig {
            n: 128,
            dt: 2e-4,
            t_end: 0.2,
            scheme: Scheme::FImex,
            eps: 0.0, // overridden per sweep entry
            seed: 3,
            sigma: 0.0,
            kl_modes: Some(64),
            coeff: CoeffSpec::SinePerturbed { amplitude: 0.5, offset: 0.0 },
            initial: InitialSpec::MeanPlusSine { mean: 0.5, amplitude: 0.3, mode: 1 },
            m: None,
            diagnostics_every: 100,
            snapshot_every: None,
            blowup_ceiling: solver::DEFAULT_BLOWUP_CEILING,
        };
        let cfg = ConvergenceConfig {
            base,
            eps_list: vec![1e-2, 1e-3, 1e-4],
            min_gap_ratio: 1.0,
        };
        let report = run_convergence(&cfg, dir.path(), 2).unwrap();
        assert!(report.ok, "checks: {:?}", report.checks);
        assert!(dir.path().join("eps_0").join("final_v.csv").exists());
    }

    #[test]
    fn drift_passes_against_prediction() {
        let dir = tempfile::tempdir().unwrap();
        let config = SimConfig {
            n: 128,
            dt: 5e-4,
            t_end: 4.0,
            scheme: Scheme::FImex,
            eps: 1e-3,
            seed: 9,
            sigma: 0.05,
            kl_modes: Some(32),
            coeff: CoeffSpec::SinePerturbed { amplitude: 0.5, offset: 0.5 },
            initial: InitialSpec::MeanPlusSine { mean: 0.0, amplitude: 0.3, mode: 1 },
            m: None,
            diagnostics_every: 40,
            snapshot_every: Some(40),
            blowup_ceiling: solver::DEFAULT_BLOWUP_CEILING,
        };
        let cfg = DriftConfig {
            config,
            window_lo: 2.0,
            window_hi: 4.0,
            tolerance_rel: 0.10,
            pairing_tolerance: 1e-8,
        };
        let report = run_drift(&cfg, dir.path()).unwrap();
        assert!(report.ok, "checks: {:?}", report.checks);
        let predicted = report.data["predicted"].as_f64().unwrap();
        assert!(predicted.abs() > 1e-3, "prediction should be nonzero");
    }

    #[test]
    fn config_errors_are_classified() {
        let dir = tempfile::tempdir().unwrap();
        // unknown field
        let bad = write_json(
            dir.path(),
            "bad.json",
            &serde_json::json!({"n": 64, "kl_modes": 8, "seed": 1, "bogus": true}),
        );
        let err = load_config::<NoiseConfig>(&bad).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("bogus"));
        // empty seeds
        let cfg = DecayConfig {
            base: SimConfig {
                n: 64,
                dt: 1e-3,
                t_end: 0.01,
                scheme: Scheme::FImex,
                eps: 0.0,
                seed: 0,
                sigma: 0.0,
                kl_modes: None,
                coeff: CoeffSpec::Linear,
                initial: InitialSpec::Constant { value: 0.0 },
                m: None,
                diagnostics_every: 1,
                snapshot_every: None,
                blowup_ceiling: 1e6,
            },
            seeds: vec![],
            t_layer: 0.0,
            floor_relative: 1e-18,
            slope_margin: 0.95,
        };
        let err = run_decay(&cfg, dir.path(), 1).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn deterministic_env_forces_single_worker() {
        // the env toggle dominates the request
        std::env::set_var(DETERMINISTIC_ENV, "1");
        assert_eq!(effective_workers(Some(8)), 1);
        std::env::set_var(DETERMINISTIC_ENV, "0");
        assert!(effective_workers(Some(8)) == 8);
        std::env::remove_var(DETERMINISTIC_ENV);
        assert!(effective_workers(Some(3)) == 3);
    }
}
