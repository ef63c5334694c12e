//! Weighted Dirichlet energy and the constants controlling its decay.
//!
//! For a positive weight `theta` on the torus the energy of a profile `f` is
//! `Phi(f) = 1/2 * integral (f')^2 theta dx`, with metric gradient
//! `DPhi(x, f) = -theta^{-1} (theta f')'` (so that
//! `d/dt Phi = <partial_t f, DPhi>_{L^2_theta}`). The weighted Poincaré
//! inequality `Phi(f) <= c2(theta) * ||DPhi||^2_{L^2_theta}` holds with
//! `c2(theta) = 1/2 * integral theta^{-1} * integral theta`, which yields the
//! exponential decay estimate `Phi(f(t)) <= Phi(f(0)) * exp(C(theta) t)` with
//! `C(theta) = -c_minus/(2 c2) + mu^2 c1(theta)^2/(2 c_minus)`,
//! `c1(theta) = c_plus * sqrt(2 c(theta))`, `c(theta) = (min theta)^{-2}`.
//! For `mu = 0` the decay rate is `c_star = c_minus/c2(theta)`.

use serde::Serialize;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

use crate::coeff::CoefficientFunction;
use crate::grid::{GridError, GridFunction, NormKind};

/// Errors from energy evaluations.
#[derive(Debug, Error)]
pub enum EnergyError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("weight must be strictly positive, min value {0}")]
    NonPositiveWeight(f64),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

fn ensure_positive(theta: &GridFunction) -> Result<(), EnergyError> {
    let min = theta.values().iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        return Err(EnergyError::NonPositiveWeight(min));
    }
    Ok(())
}

/// `Phi(f) = 1/2 * integral (f')^2 theta dx` (spectral derivative).
pub fn energy(f: &GridFunction, theta: &GridFunction) -> Result<f64, EnergyError> {
    ensure_positive(theta)?;
    let df = f.derivative(1)?;
    Ok(0.5 * df.zip_with(theta, |d, t| d * d * t)?.integrate())
}

/// Metric gradient `DPhi(x, f) = -theta^{-1} (theta f')'`.
pub fn energy_gradient(
    f: &GridFunction,
    theta: &GridFunction,
) -> Result<GridFunction, EnergyError> {
    ensure_positive(theta)?;
    let flux = f.derivative(1)?.zip_with(theta, |d, t| d * t)?;
    let div = flux.derivative(1)?;
    Ok(div.zip_with(theta, |d, t| -d / t)?)
}

/// Weighted Poincaré constant `c2(theta) = 1/2 * integral theta^{-1} * integral theta`.
///
/// Always `>= 1/2` by Cauchy–Schwarz, with equality exactly for constant
/// weights.
pub fn poincare_constant(theta: &GridFunction) -> Result<f64, EnergyError> {
    ensure_positive(theta)?;
    let int_inv = theta.map(|t| 1.0 / t)?.integrate();
    let int = theta.integrate();
    Ok(0.5 * int_inv * int)
}

/// Returns `(Phi(f), c2 * ||DPhi||^2_{L^2_theta})`; the Poincaré inequality
/// asserts the first is at most the second.
pub fn verify_poincare(
    f: &GridFunction,
    theta: &GridFunction,
) -> Result<(f64, f64), EnergyError> {
    let lhs = energy(f, theta)?;
    let grad = energy_gradient(f, theta)?;
    let grad_sq = grad.norm(NormKind::L2Weighted(theta))?.powi(2);
    Ok((lhs, poincare_constant(theta)? * grad_sq))
}

/// The constants of the exponential energy estimate.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DecayBound {
    /// `c(theta) = (min theta)^{-2}`.
    pub c_of_theta: f64,
    /// `c1(theta) = c_plus * sqrt(2 c(theta))`.
    pub c1: f64,
    /// Poincaré constant `c2(theta)`.
    pub c2: f64,
    /// Energy growth/decay exponent `C(theta)` at the given drift `mu`.
    pub rate: f64,
    /// Decay rate `c_star = c_minus / c2(theta)` for `mu = 0`.
    pub c_star_mu0: f64,
}

/// Evaluates the decay-bound constants for the coefficient `phi`, weight
/// `theta` and drift `mu`.
pub fn decay_rate_bound(
    coeff: &CoefficientFunction,
    theta: &GridFunction,
    mu: f64,
) -> Result<DecayBound, EnergyError> {
    ensure_positive(theta)?;
    let min = theta.values().iter().cloned().fold(f64::INFINITY, f64::min);
    let c_of_theta = 1.0 / (min * min);
    let c1 = coeff.c_plus() * (2.0 * c_of_theta).sqrt();
    let c2 = poincare_constant(theta)?;
    let cm = coeff.c_minus();
    let rate = -cm / (2.0 * c2) + mu * mu * c1 * c1 / (2.0 * cm);
    Ok(DecayBound {
        c_of_theta,
        c1,
        c2,
        rate,
        c_star_mu0: cm / c2,
    })
}

/// Drift threshold below which the energy estimate still decays:
/// `mu_star = c_minus / (c1(theta) * sqrt(c2(theta)))` (the root of
/// `C(theta) = 0` in `|mu|`).
pub fn mu_smallness_threshold(
    coeff: &CoefficientFunction,
    theta: &GridFunction,
) -> Result<f64, EnergyError> {
    let b = decay_rate_bound(coeff, theta, 0.0)?;
    Ok(coeff.c_minus() / (b.c1 * b.c2.sqrt()))
}

/// Equivalence constant: under the mass constraint linking `f` to its
/// stationary level, `||f - z||_{L^2_theta} <= C ||f'||_{L^2_theta}` with
/// `C = sqrt(max theta / min theta)`.
pub fn norm_equivalence_constant(theta: &GridFunction) -> Result<f64, EnergyError> {
    ensure_positive(theta)?;
    let min = theta.values().iter().cloned().fold(f64::INFINITY, f64::min);
    let max = theta.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok((max / min).sqrt())
}

/// One energy evaluation with all derived constants, serialisable to JSON.
#[derive(Debug, Clone, Serialize)]
pub struct EnergyDiagnostics {
    pub phi: f64,
    pub grad_norm_sq: f64,
    pub poincare_lhs: f64,
    pub poincare_rhs: f64,
    pub c_of_theta: f64,
    pub c1: f64,
    pub c2: f64,
    pub rate: f64,
    pub c_star_mu0: f64,
    pub mu_star: f64,
    pub norm_equivalence: f64,
}

/// Evaluates the full diagnostic record for `(f, theta, mu)`.
pub fn diagnostics(
    f: &GridFunction,
    theta: &GridFunction,
    coeff: &CoefficientFunction,
    mu: f64,
) -> Result<EnergyDiagnostics, EnergyError> {
    let (lhs, rhs) = verify_poincare(f, theta)?;
    let grad = energy_gradient(f, theta)?;
    let grad_norm_sq = grad.norm(NormKind::L2Weighted(theta))?.powi(2);
    let bound = decay_rate_bound(coeff, theta, mu)?;
    Ok(EnergyDiagnostics {
        phi: lhs,
        grad_norm_sq,
        poincare_lhs: lhs,
        poincare_rhs: rhs,
        c_of_theta: bound.c_of_theta,
        c1: bound.c1,
        c2: bound.c2,
        rate: bound.rate,
        c_star_mu0: bound.c_star_mu0,
        mu_star: mu_smallness_threshold(coeff, theta)?,
        norm_equivalence: norm_equivalence_constant(theta)?,
    })
}

/// Writes an energy time series as `t,phi,grad_norm_sq` CSV rows.
pub fn write_energy_series_csv(
    path: &Path,
    times: &[f64],
    phi: &[f64],
    grad_norm_sq: &[f64],
) -> Result<(), EnergyError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "t,phi,grad_norm_sq")?;
    for ((t, p), g) in times.iter().zip(phi.iter()).zip(grad_norm_sq.iter()) {
        writeln!(w, "{t},{p},{g}")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    #[test]
    fn energy_of_sine_with_unit_weight() {
        // Phi(sin(2 pi x)) = 1/2 * (2 pi)^2 * 1/2 = pi^2.
        let n = 256;
        let f = GridFunction::from_fn(n, |x| (2.0 * PI * x).sin()).unwrap();
        let one = GridFunction::constant(n, 1.0).unwrap();
        assert_relative_eq!(energy(&f, &one).unwrap(), PI * PI, epsilon = 1e-10);
    }

    #[test]
    fn energy_with_cosine_weight() {
        // theta = 1 + cos(2 pi x)/2: integral cos^2 (1 + cos/2) = 1/2, so
        // Phi = 1/2 * 4 pi^2 * 1/2 = pi^2 again (the odd part integrates out).
        let n = 256;
        let f = GridFunction::from_fn(n, |x| (2.0 * PI * x).sin()).unwrap();
        let theta = GridFunction::from_fn(n, |x| 1.0 + 0.5 * (2.0 * PI * x).cos()).unwrap();
        assert_relative_eq!(energy(&f, &theta).unwrap(), PI * PI, epsilon = 1e-10);
    }

    #[test]
    fn gradient_is_negative_laplacian_for_unit_weight() {
        let n = 128;
        let f = GridFunction::from_fn(n, |x| (2.0 * PI * x).sin()).unwrap();
        let one = GridFunction::constant(n, 1.0).unwrap();
        let g = energy_gradient(&f, &one).unwrap();
        for j in 0..n {
            let exact = 4.0 * PI * PI * (2.0 * PI * f.x(j)).sin();
            assert_relative_eq!(g.values()[j], exact, epsilon = 1e-8);
        }
    }

    #[test]
    fn gradient_is_frechet_derivative() {
        // <DPhi(f), psi>_{L^2_theta} must match (Phi(f + s psi) - Phi(f))/s.
        let n = 128;
        let f = GridFunction::from_fn(n, |x| (2.0 * PI * x).sin() + 0.3 * (4.0 * PI * x).cos())
            .unwrap();
        let psi = GridFunction::from_fn(n, |x| (6.0 * PI * x).sin()).unwrap();
        let theta = GridFunction::from_fn(n, |x| (0.4 * (2.0 * PI * x).cos()).exp()).unwrap();
        let grad = energy_gradient(&f, &theta).unwrap();
        let pairing = grad
            .zip_with(&psi, |a, b| a * b)
            .unwrap()
            .zip_with(&theta, |a, t| a * t)
            .unwrap()
            .integrate();
        let s = 1e-6;
        let fp = f.zip_with(&psi, |a, b| a + s * b).unwrap();
        let fm = f.zip_with(&psi, |a, b| a - s * b).unwrap();
        let fd = (energy(&fp, &theta).unwrap() - energy(&fm, &theta).unwrap()) / (2.0 * s);
        assert_relative_eq!(pairing, fd, max_relative = 1e-7);
    }

    #[test]
    fn poincare_constant_closed_forms() {
        let one = GridFunction::constant(64, 1.0).unwrap();
        assert_relative_eq!(poincare_constant(&one).unwrap(), 0.5, epsilon = 1e-14);
        // theta = exp(-sin(2 pi x)/(2 pi)): both integrals equal I_0(1/(2 pi)),
        // c2 = I_0(1/(2 pi))^2 / 2 = 0.50636272073580276 (Bessel oracle).
        let theta =
            GridFunction::from_fn(1024, |x| (-(2.0 * PI * x).sin() / (2.0 * PI)).exp()).unwrap();
        assert!((poincare_constant(&theta).unwrap() - 0.506_362_720_735_802_76).abs() < 1e-10);
    }

    #[test]
    fn poincare_verified_on_analytic_pair() {
        // f = sin(2 pi x), theta = 1: lhs = pi^2, rhs = c2 * ||4 pi^2 sin||^2
        //  = 1/2 * 16 pi^4 * 1/2 = 4 pi^4.
        let n = 256;
        let f = GridFunction::from_fn(n, |x| (2.0 * PI * x).sin()).unwrap();
        let one = GridFunction::constant(n, 1.0).unwrap();
        let (lhs, rhs) = verify_poincare(&f, &one).unwrap();
        assert!((lhs - PI * PI).abs() < 1e-9);
        assert!((rhs - 4.0 * PI.powi(4)).abs() < 1e-9);
        assert!(lhs <= rhs);
    }

    #[test]
    fn decay_bound_flat_case() {
        // theta = 1, c_minus = c_plus = 1, mu = 0: c = 1, c1 = sqrt(2),
        // c2 = 1/2, C(theta) = -1, c_star = 2, mu_star = 1.
        let one = GridFunction::constant(64, 1.0).unwrap();
        let lin = CoefficientFunction::linear();
        let b = decay_rate_bound(&lin, &one, 0.0).unwrap();
        assert_relative_eq!(b.c_of_theta, 1.0, epsilon = 1e-14);
        assert_relative_eq!(b.c1, std::f64::consts::SQRT_2, epsilon = 1e-14);
        assert_relative_eq!(b.c2, 0.5, epsilon = 1e-14);
        assert_relative_eq!(b.rate, -1.0, epsilon = 1e-13);
        assert_relative_eq!(b.c_star_mu0, 2.0, epsilon = 1e-13);
        assert_relative_eq!(
            mu_smallness_threshold(&lin, &one).unwrap(),
            1.0,
            epsilon = 1e-13
        );
        // at mu exactly mu_star the rate crosses zero
        let b2 = decay_rate_bound(&lin, &one, 1.0).unwrap();
        assert!(b2.rate.abs() < 1e-12);
    }

    #[test]
    fn mu_threshold_scales_linearly_in_c_minus() {
        // two coefficients sharing c_plus = 1.5 with c_minus 0.5 vs 1.0
        let theta = GridFunction::from_fn(128, |x| (0.3 * (2.0 * PI * x).sin()).exp()).unwrap();
        let a = CoefficientFunction::sine_perturbed(0.5, 0.0).unwrap();
        let b = CoefficientFunction::new(
            "stiffened",
            |v| 1.25 * v + 0.25 * v.sin(),
            |v| 1.25 + 0.25 * v.cos(),
            |v| -0.25 * v.sin(),
            1.0,
            1.5,
        )
        .unwrap();
        let ma = mu_smallness_threshold(&a, &theta).unwrap();
        let mb = mu_smallness_threshold(&b, &theta).unwrap();
        assert_relative_eq!(mb / ma, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn mu_threshold_brackets_the_rate_sign_change() {
        let theta = GridFunction::from_fn(256, |x| (-0.6 * (2.0 * PI * x).sin()).exp()).unwrap();
        let coeff = CoefficientFunction::sine_perturbed(0.5, 0.0).unwrap();
        let mu_star = mu_smallness_threshold(&coeff, &theta).unwrap();
        let below = decay_rate_bound(&coeff, &theta, 0.99 * mu_star).unwrap();
        let above = decay_rate_bound(&coeff, &theta, 1.01 * mu_star).unwrap();
        assert!(below.rate < 0.0, "rate {} should be negative", below.rate);
        assert!(above.rate > 0.0, "rate {} should be positive", above.rate);
    }

    #[test]
    fn norm_equivalence_constant_value() {
        let theta = GridFunction::from_fn(256, |x| (0.5 * (2.0 * PI * x).sin()).exp()).unwrap();
        let c = norm_equivalence_constant(&theta).unwrap();
        let max: f64 = theta.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min: f64 = theta.values().iter().cloned().fold(f64::INFINITY, f64::min);
        assert_relative_eq!(c, (max / min).sqrt(), epsilon = 1e-14);
        assert!(c >= 1.0);
    }

    #[test]
    fn rejects_non_positive_weight() {
        let f = GridFunction::from_fn(64, |x| (2.0 * PI * x).sin()).unwrap();
        let bad = GridFunction::from_fn(64, |x| (2.0 * PI * x).cos()).unwrap();
        assert!(energy(&f, &bad).is_err());
        assert!(poincare_constant(&bad).is_err());
    }
}
