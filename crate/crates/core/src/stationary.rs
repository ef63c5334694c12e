//! Stationary machinery: the weight `theta`, drift constant `mu`, the level
//! `z_m` pinned by a mass constraint, and the stationary profile
//! `v_bar = phi^{-1}(z_m theta)`.
//!
//! For a noise sample with integrated field `eta` (so `eta(1) = sigma`) set
//!
//! ```text
//! mu     = (e^{eta(1)} - 1) / integral_0^1 e^{eta(y)} dy,
//! theta(x) = e^{-eta(x)} { mu * integral_0^x e^{eta(y)} dy + 1 }.
//! ```
//!
//! Then `theta > 0`, `theta(0) = theta(1) = 1`, and `theta' + xi theta = mu`
//! whenever `xi = eta'` makes classical sense. Given an elliptic coefficient
//! `phi` and a mass `m`, the scalar `z_m` is the unique root of
//! `m = integral phi^{-1}(z theta)`, and `v_bar_m = phi^{-1}(z_m theta)` is a
//! stationary state of the conservative evolution.
//!
//! The cumulative integrals of `e^{eta}` are evaluated per Fourier mode of
//! `e^{eta - sigma*x}` with the drift factor `e^{sigma*x}` integrated in
//! closed form, so constant and single-drift noises come out exact to
//! rounding rather than to a quadrature order.

use serde::Serialize;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

use crate::coeff::{CoeffError, CoefficientFunction};
use crate::energy;
use crate::grid::{GridError, GridFunction, NormKind};
use crate::noise::NoiseSample;
use crate::spectral;

/// Residual tolerance for the `z_m` root find, relative to `max(1, |m|)`.
pub const ZM_TOLERANCE: f64 = 1e-11;

/// Largest admissible `sup |eta|` before `e^{eta}` work is refused.
pub const ETA_OVERFLOW_LIMIT: f64 = 300.0;

/// Errors from the stationary constructions.
#[derive(Debug, Error)]
pub enum StationaryError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Coeff(#[from] CoeffError),
    #[error("sup |eta| = {0} exceeds the overflow guard {ETA_OVERFLOW_LIMIT}")]
    EtaOverflow(f64),
    #[error("constructed theta is not positive: min value {0}")]
    NonPositiveTheta(f64),
    #[error("weight must be strictly positive, min value {0}")]
    NonPositiveWeight(f64),
    #[error("root bracketing failed for target {target}: {detail}")]
    BracketFailure { target: f64, detail: &'static str },
    #[error("separable construction requires sigma = 0, got sigma = {0}")]
    NonzeroSigma(f64),
    #[error("psi = chi(phi^{{-1}}(.)) is not positive at {at} (value {value})")]
    NonPositivePsi { at: f64, value: f64 },
    #[error("adaptive quadrature failed to converge on [{a}, {b}]")]
    QuadratureFailure { a: f64, b: f64 },
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization failure: {0}")]
    Serialize(#[from] serde_json::Error),
}

fn min_value(g: &GridFunction) -> f64 {
    g.values().iter().cloned().fold(f64::INFINITY, f64::min)
}

fn ensure_positive(theta: &GridFunction) -> Result<(), StationaryError> {
    let min = min_value(theta);
    if min <= 0.0 {
        return Err(StationaryError::NonPositiveWeight(min));
    }
    Ok(())
}

/// Builds `(theta, mu)` from a noise sample.
///
/// `mu = expm1(sigma) / integral_0^1 e^{eta}` (so `sigma = 0` yields exactly
/// `mu = 0` and `theta = e^{-eta}`), and
/// `theta_j = e^{-eta_j} (mu * I_j + 1)` with `I_j = integral_0^{x_j} e^{eta}`
/// from the mode-exact drift quadrature.
pub fn build_theta(noise: &NoiseSample) -> Result<(GridFunction, f64), StationaryError> {
    let eta = noise.eta();
    let sup = eta.values().iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    if sup > ETA_OVERFLOW_LIMIT {
        return Err(StationaryError::EtaOverflow(sup));
    }
    let sigma = noise.sigma();
    let q: Vec<f64> = noise.eta_tilde().values().iter().map(|&e| e.exp()).collect();
    let (cumulative, total) = spectral::cumulative_with_drift(&q, sigma);
    let mu = sigma.exp_m1() / total;
    let n = eta.n();
    let theta: Vec<f64> = (0..n)
        .map(|j| (-eta.values()[j]).exp() * (mu * cumulative[j] + 1.0))
        .collect();
    let theta = GridFunction::new(theta)?;
    let min = min_value(&theta);
    if min <= 0.0 {
        return Err(StationaryError::NonPositiveTheta(min));
    }
    Ok((theta, mu))
}

/// Sup-norm of the defining identity's residual, `theta' + xi*theta - mu`,
/// with a spectral derivative. Exact (to rounding plus aliasing) when `theta`
/// was built from the same smoothed sample that produced `xi`; a refinement
/// trend only when `theta` comes from the raw sample.
pub fn residual_theta(
    theta: &GridFunction,
    mu: f64,
    xi: &GridFunction,
) -> Result<f64, StationaryError> {
    let dtheta = theta.derivative(1)?;
    let residual = theta
        .zip_with(xi, |t, x| t * x)?
        .zip_with(&dtheta, |tx, d| d + tx - mu)?;
    Ok(residual.norm(NormKind::LInf)?)
}

/// Mass functional `M(z) = integral phi^{-1}(z theta)` and its `z` derivative
/// `M'(z) = integral theta / phi'(phi^{-1}(z theta))`.
fn mass_and_slope(
    coeff: &CoefficientFunction,
    theta: &GridFunction,
    z: f64,
) -> Result<(f64, f64), StationaryError> {
    let n = theta.n();
    let mut mass = 0.0;
    let mut slope = 0.0;
    for j in 0..n {
        let t = theta.values()[j];
        let v = coeff.inverse(z * t)?;
        mass += v;
        slope += t / coeff.dphi(v);
    }
    let h = 1.0 / n as f64;
    Ok((mass * h, slope * h))
}

/// Solves `integral phi^{-1}(z theta) = m` for the unique level `z = z_m`.
///
/// The map `z -> M(z)` is strictly increasing with slope in
/// `[integral theta / c_plus, integral theta / c_minus]`, so a geometrically
/// expanded bracket always exists; inside it a Newton iteration with
/// bisection fallback drives the residual below `ZM_TOLERANCE * max(1, |m|)`.
pub fn solve_zm(
    coeff: &CoefficientFunction,
    theta: &GridFunction,
    m: f64,
) -> Result<f64, StationaryError> {
    ensure_positive(theta)?;
    let tol = ZM_TOLERANCE * m.abs().max(1.0);
    // exact for flat theta and linear phi; a sane scale otherwise
    let mut z = coeff.phi(m) / theta.integrate();
    let (mass, _) = mass_and_slope(coeff, theta, z)?;
    if (mass - m).abs() <= tol {
        return Ok(z);
    }
    // geometric bracket expansion guided by monotonicity
    let mut step = m.abs().max(1.0) * coeff.c_plus() / theta.integrate();
    let (mut lo, mut hi, mut f_lo, mut f_hi);
    if mass < m {
        lo = z;
        f_lo = mass - m;
        loop {
            let cand = lo + step;
            let (cm, _) = mass_and_slope(coeff, theta, cand)?;
            if cm - m >= 0.0 {
                hi = cand;
                f_hi = cm - m;
                break;
            }
            lo = cand;
            f_lo = cm - m;
            step *= 2.0;
            if !step.is_finite() {
                return Err(StationaryError::BracketFailure {
                    target: m,
                    detail: "upward expansion diverged",
                });
            }
        }
    } else {
        hi = z;
        f_hi = mass - m;
        loop {
            let cand = hi - step;
            let (cm, _) = mass_and_slope(coeff, theta, cand)?;
            if cm - m <= 0.0 {
                lo = cand;
                f_lo = cm - m;
                break;
            }
            hi = cand;
            f_hi = cm - m;
            step *= 2.0;
            if !step.is_finite() {
                return Err(StationaryError::BracketFailure {
                    target: m,
                    detail: "downward expansion diverged",
                });
            }
        }
    }
    if f_lo.abs() <= tol {
        return Ok(lo);
    }
    if f_hi.abs() <= tol {
        return Ok(hi);
    }
    z = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (mass, slope) = mass_and_slope(coeff, theta, z)?;
        let f = mass - m;
        if f.abs() <= tol {
            return Ok(z);
        }
        if f > 0.0 {
            hi = z;
        } else {
            lo = z;
        }
        let newton = z - f / slope;
        z = if newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo <= f64::EPSILON * z.abs().max(1.0) {
            return Ok(z);
        }
    }
    Err(StationaryError::BracketFailure {
        target: m,
        detail: "newton/bisection did not converge",
    })
}

/// Pointwise stationary profile `phi^{-1}(z theta)`.
pub fn stationary_profile(
    coeff: &CoefficientFunction,
    theta: &GridFunction,
    z: f64,
) -> Result<GridFunction, StationaryError> {
    ensure_positive(theta)?;
    let mut values = Vec::with_capacity(theta.n());
    for &t in theta.values() {
        values.push(coeff.inverse(z * t)?);
    }
    Ok(GridFunction::new(values)?)
}

/// Drift threshold `mu_star = c_minus / (c1(theta) sqrt(c2(theta)))` below
/// which the energy bound strictly decays.
pub fn mu_smallness_threshold(
    coeff: &CoefficientFunction,
    theta: &GridFunction,
) -> Result<f64, StationaryError> {
    energy::mu_smallness_threshold(coeff, theta).map_err(map_energy)
}

/// Adaptive Simpson quadrature of `f` over `[a, b]` (signed), absolute
/// tolerance `tol`; errors from the integrand propagate.
fn adaptive_simpson(
    f: &mut dyn FnMut(f64) -> Result<f64, StationaryError>,
    a: f64,
    b: f64,
    tol: f64,
) -> Result<f64, StationaryError> {
    if a == b {
        return Ok(0.0);
    }
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    struct Frame {
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    }
    let fa = f(a)?;
    let fb = f(b)?;
    let m0 = 0.5 * (a + b);
    let fm = f(m0)?;
    let mut stack = vec![Frame {
        a,
        b,
        fa,
        fm,
        fb,
        whole: simpson(fa, fm, fb, a, b),
        tol,
        depth: 0,
    }];
    let mut acc = 0.0;
    while let Some(fr) = stack.pop() {
        let m = 0.5 * (fr.a + fr.b);
        let lm = 0.5 * (fr.a + m);
        let rm = 0.5 * (m + fr.b);
        let flm = f(lm)?;
        let frm = f(rm)?;
        let left = simpson(fr.fa, flm, fr.fm, fr.a, m);
        let right = simpson(fr.fm, frm, fr.fb, m, fr.b);
        let delta = left + right - fr.whole;
        if delta.abs() <= 15.0 * fr.tol || (fr.b - fr.a).abs() < 1e-14 {
            acc += left + right + delta / 15.0;
        } else {
            if fr.depth >= 60 {
                return Err(StationaryError::QuadratureFailure { a: fr.a, b: fr.b });
            }
            stack.push(Frame {
                a: fr.a,
                b: m,
                fa: fr.fa,
                fm: flm,
                fb: fr.fm,
                whole: left,
                tol: 0.5 * fr.tol,
                depth: fr.depth + 1,
            });
            stack.push(Frame {
                a: m,
                b: fr.b,
                fa: fr.fm,
                fm: frm,
                fb: fr.fb,
                whole: right,
                tol: 0.5 * fr.tol,
                depth: fr.depth + 1,
            });
        }
    }
    Ok(acc)
}

/// Separable stationary weight for a general positive mobility `chi`:
/// solves `theta' + psi(theta) xi = 0` with `psi(t) = chi(phi^{-1}(t))` via
/// `Psi(theta) = -eta(x) + C`, where `Psi(t) = integral_1^t ds / psi(s)`
/// (base point 1 fixes the additive constant; for `chi = phi` this gives
/// `Psi = log` exactly). Requires `sigma = 0` so that the result is periodic.
/// Evaluator for `psi(t) = chi(phi^{-1}(t))` and increments of
/// `Psi(t) = integral_1^t ds/psi(s)`.
struct PsiEvaluator<'a> {
    chi: &'a dyn Fn(f64) -> f64,
    coeff: &'a CoefficientFunction,
}

impl PsiEvaluator<'_> {
    fn psi(&self, t: f64) -> Result<f64, StationaryError> {
        let v = self.coeff.inverse(t)?;
        let p = (self.chi)(v);
        if !(p > 0.0) {
            return Err(StationaryError::NonPositivePsi { at: t, value: p });
        }
        Ok(p)
    }

    fn psi_increment(&self, from: f64, to: f64) -> Result<f64, StationaryError> {
        // tighter than the target tolerance because increments accumulate
        // across the anchored sweep
        adaptive_simpson(&mut |s| self.psi(s).map(|p| 1.0 / p), from, to, 1e-13)
    }
}

pub fn separable_stationary(
    chi: &dyn Fn(f64) -> f64,
    coeff: &CoefficientFunction,
    noise: &NoiseSample,
    c: f64,
) -> Result<GridFunction, StationaryError> {
    if noise.sigma() != 0.0 {
        return Err(StationaryError::NonzeroSigma(noise.sigma()));
    }
    let eta = noise.eta();
    let ev = PsiEvaluator { chi, coeff };
    // running anchor (t, Psi(t)) so each evaluation integrates only an
    // increment; the accumulated drift stays below n * quadrature tolerance
    let mut anchor_t = 1.0f64;
    let mut anchor_val = 0.0f64;
    let mut out = Vec::with_capacity(eta.n());
    for j in 0..eta.n() {
        let target = -eta.values()[j] + c;
        // bracket [lo, hi] with Psi(lo) <= target <= Psi(hi)
        let mut lo = anchor_t;
        let mut f_lo = anchor_val;
        let mut hi = lo;
        if f_lo < target {
            let mut step = lo.abs().max(0.5);
            let mut f_hi = f_lo;
            let mut tries = 0;
            while f_hi < target {
                let cand = hi + step;
                step *= 2.0;
                let f_cand = f_hi + ev.psi_increment(hi, cand)?;
                lo = hi;
                f_lo = f_hi;
                hi = cand;
                f_hi = f_cand;
                tries += 1;
                if tries > 200 {
                    return Err(StationaryError::BracketFailure {
                        target,
                        detail: "target above the range of Psi",
                    });
                }
            }
        } else {
            let mut step = 0.25 * lo.abs().max(0.25);
            let mut tries = 0;
            while f_lo > target {
                // halve while positive (Psi may be singular at 0), then march
                // additively into negative territory if psi stays positive
                let cand = if lo > 1e-300 {
                    0.5 * lo
                } else {
                    let next = lo - step;
                    step *= 2.0;
                    next
                };
                let f_cand = f_lo + ev.psi_increment(lo, cand)?;
                hi = lo;
                lo = cand;
                f_lo = f_cand;
                tries += 1;
                if tries > 1500 {
                    return Err(StationaryError::BracketFailure {
                        target,
                        detail: "target below the range of Psi",
                    });
                }
            }
        }
        // safeguarded Newton on Psi(t) = target, using Psi' = 1/psi
        let mut t = lo;
        let mut val = f_lo;
        for _ in 0..100 {
            let err = val - target;
            if err.abs() <= 1e-11 {
                break;
            }
            if err > 0.0 {
                hi = t;
            } else {
                lo = t;
            }
            let newton = t - err * ev.psi(t)?;
            let next = if newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if (next - t).abs() <= f64::EPSILON * t.abs().max(1.0) {
                break;
            }
            val += ev.psi_increment(t, next)?;
            t = next;
        }
        anchor_t = t;
        anchor_val = val;
        out.push(t);
    }
    Ok(GridFunction::new(out)?)
}

/// A fully assembled stationary state for one mass value.
#[derive(Debug, Clone)]
pub struct StationaryProfile {
    pub theta: GridFunction,
    pub mu: f64,
    pub m: f64,
    pub z_m: f64,
    pub v_bar: GridFunction,
}

/// JSON summary of a stationary profile and its decay constants.
#[derive(Debug, Clone, Serialize)]
pub struct StationarySummary {
    pub mu: f64,
    pub z_m: f64,
    pub m: f64,
    pub c1: f64,
    pub c2: f64,
    #[serde(rename = "C_theta")]
    pub c_theta: f64,
    pub mu_star: f64,
}

impl StationaryProfile {
    /// Builds `theta`, `mu`, `z_m` and `v_bar` for the given mass `m`.
    pub fn build(
        coeff: &CoefficientFunction,
        noise: &NoiseSample,
        m: f64,
    ) -> Result<Self, StationaryError> {
        let (theta, mu) = build_theta(noise)?;
        let z_m = solve_zm(coeff, &theta, m)?;
        let v_bar = stationary_profile(coeff, &theta, z_m)?;
        Ok(Self {
            theta,
            mu,
            m,
            z_m,
            v_bar,
        })
    }

    /// Summary record with the energy constants attached.
    pub fn summary(
        &self,
        coeff: &CoefficientFunction,
    ) -> Result<StationarySummary, StationaryError> {
        let bound = energy::decay_rate_bound(coeff, &self.theta, self.mu).map_err(map_energy)?;
        let mu_star = energy::mu_smallness_threshold(coeff, &self.theta).map_err(map_energy)?;
        Ok(StationarySummary {
            mu: self.mu,
            z_m: self.z_m,
            m: self.m,
            c1: bound.c1,
            c2: bound.c2,
            c_theta: bound.rate,
            mu_star,
        })
    }

    /// Writes `x,theta,v_bar` rows.
    pub fn write_csv(&self, path: &Path) -> Result<(), StationaryError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "x,theta,v_bar")?;
        for j in 0..self.theta.n() {
            writeln!(
                w,
                "{},{},{}",
                self.theta.x(j),
                self.theta.values()[j],
                self.v_bar.values()[j]
            )?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes the JSON summary.
    pub fn write_json(
        &self,
        coeff: &CoefficientFunction,
        path: &Path,
    ) -> Result<(), StationaryError> {
        let summary = self.summary(coeff)?;
        let mut file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut file, &summary)?;
        writeln!(file)?;
        Ok(())
    }
}

fn map_energy(e: energy::EnergyError) -> StationaryError {
    match e {
        energy::EnergyError::NonPositiveWeight(v) => StationaryError::NonPositiveWeight(v),
        energy::EnergyError::Grid(g) => StationaryError::Grid(g),
        energy::EnergyError::Io(io) => StationaryError::Io(io),
    }
}

/// Sup-deviation of `f` from the constant `z` in the weighted `H^1` norm
/// sense used by the convergence diagnostics (helper shared with the solver).
pub fn h1_theta_deviation(
    f: &GridFunction,
    theta: &GridFunction,
    z: f64,
) -> Result<f64, StationaryError> {
    let dev = f.map(|v| v - z)?;
    Ok(dev.norm(NormKind::H1Weighted(theta))?)
}
