//! Elliptic coefficient functions.
//!
//! A [`CoefficientFunction`] bundles a scalar nonlinearity `phi` with its
//! first two derivatives and certified ellipticity bounds
//! `0 < c_minus <= phi'(v) <= c_plus`. The bounds make `phi` a bijection of
//! the real line with a globally well-conditioned inverse, which is computed
//! by a bracketed Newton iteration: the ellipticity bounds give a rigorous
//! initial bracket `phi(0) + c_minus*v <= phi(v) <= phi(0) + c_plus*v`
//! (reversed for `v < 0`), and bisection guards every Newton step.

use std::sync::Arc;

use thiserror::Error;

/// Residual tolerance of [`CoefficientFunction::inverse`], relative to
/// `max(1, |y|)`.
pub const INVERSE_TOLERANCE: f64 = 1e-12;

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Errors from coefficient construction and inversion.
#[derive(Debug, Error)]
pub enum CoeffError {
    #[error("ellipticity bounds must satisfy 0 < c_minus <= c_plus, got [{0}, {1}]")]
    BadBounds(f64, f64),
    #[error("derivative {slope} at v = {v} escapes the declared bounds [{lo}, {hi}]")]
    EllipticityViolated { v: f64, slope: f64, lo: f64, hi: f64 },
    #[error("inverse did not converge for y = {y} (last iterate {last})")]
    NoConvergence { y: f64, last: f64 },
    #[error("inverse target must be finite, got {0}")]
    NonFiniteTarget(f64),
}

/// A nonlinearity `phi` with two derivatives and ellipticity bounds.
#[derive(Clone)]
pub struct CoefficientFunction {
    phi: ScalarFn,
    dphi: ScalarFn,
    d2phi: ScalarFn,
    c_minus: f64,
    c_plus: f64,
    name: String,
}

impl std::fmt::Debug for CoefficientFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CoefficientFunction")
            .field("name", &self.name)
            .field("c_minus", &self.c_minus)
            .field("c_plus", &self.c_plus)
            .finish()
    }
}

impl CoefficientFunction {
    /// Wraps closures for `phi`, `phi'`, `phi''` with declared bounds.
    /// The bounds are spot-checked on a sampling of `[-10, 10]`.
    pub fn new(
        name: impl Into<String>,
        phi: impl Fn(f64) -> f64 + Send + Sync + 'static,
        dphi: impl Fn(f64) -> f64 + Send + Sync + 'static,
        d2phi: impl Fn(f64) -> f64 + Send + Sync + 'static,
        c_minus: f64,
        c_plus: f64,
    ) -> Result<Self, CoeffError> {
        if !(c_minus > 0.0 && c_minus <= c_plus && c_plus.is_finite()) {
            return Err(CoeffError::BadBounds(c_minus, c_plus));
        }
        let out = Self {
            phi: Arc::new(phi),
            dphi: Arc::new(dphi),
            d2phi: Arc::new(d2phi),
            c_minus,
            c_plus,
            name: name.into(),
        };
        out.check_ellipticity(10.0, 4001)?;
        Ok(out)
    }

    /// The identity nonlinearity `phi(v) = v` (`c_minus = c_plus = 1`).
    pub fn linear() -> Self {
        Self::new("linear", |v| v, |_| 1.0, |_| 0.0, 1.0, 1.0)
            .expect("identity satisfies its own bounds")
    }

    /// `phi(v) = v + a*sin(v) + offset` with `|a| < 1`; bounds `1 -+ |a|`.
    pub fn sine_perturbed(a: f64, offset: f64) -> Result<Self, CoeffError> {
        if !(a.abs() < 1.0 && a.is_finite() && offset.is_finite()) {
            return Err(CoeffError::BadBounds(1.0 - a.abs(), 1.0 + a.abs()));
        }
        Self::new(
            format!("v + {a}*sin(v) + {offset}"),
            move |v| v + a * v.sin() + offset,
            move |v| 1.0 + a * v.cos(),
            move |v| -a * v.sin(),
            1.0 - a.abs(),
            1.0 + a.abs(),
        )
    }

    /// Evaluates `phi(v)`.
    pub fn phi(&self, v: f64) -> f64 {
        (self.phi)(v)
    }

    /// Evaluates `phi'(v)`.
    pub fn dphi(&self, v: f64) -> f64 {
        (self.dphi)(v)
    }

    /// Evaluates `phi''(v)`.
    pub fn d2phi(&self, v: f64) -> f64 {
        (self.d2phi)(v)
    }

    /// Lower ellipticity bound.
    pub fn c_minus(&self) -> f64 {
        self.c_minus
    }

    /// Upper ellipticity bound.
    pub fn c_plus(&self) -> f64 {
        self.c_plus
    }

    /// Human-readable label (used in manifests).
    pub fn name(&self) -> &str {
        &self.name
    }

    /// Verifies `c_minus <= phi'(v) <= c_plus` on a uniform sampling of
    /// `[-radius, radius]` (tolerance 1e-9 for rounding in the closures).
    pub fn check_ellipticity(&self, radius: f64, samples: usize) -> Result<(), CoeffError> {
        for i in 0..samples {
            let v = -radius + 2.0 * radius * i as f64 / (samples - 1) as f64;
            let slope = self.dphi(v);
            if !(slope >= self.c_minus - 1e-9 && slope <= self.c_plus + 1e-9) {
                return Err(CoeffError::EllipticityViolated {
                    v,
                    slope,
                    lo: self.c_minus,
                    hi: self.c_plus,
                });
            }
        }
        Ok(())
    }

    /// Solves `phi(v) = y` by bracketed Newton iteration.
    ///
    /// Terminates when `|phi(v) - y| <= INVERSE_TOLERANCE * max(1, |y|)`.
    /// For the identity this returns `y` bit-exactly (first Newton step).
    pub fn inverse(&self, y: f64) -> Result<f64, CoeffError> {
        if !y.is_finite() {
            return Err(CoeffError::NonFiniteTarget(y));
        }
        let tol = INVERSE_TOLERANCE * y.abs().max(1.0);
        let r0 = y - self.phi(0.0);
        let (mut lo, mut hi) = if r0 >= 0.0 {
            (r0 / self.c_plus, r0 / self.c_minus)
        } else {
            (r0 / self.c_minus, r0 / self.c_plus)
        };
        // widen fractionally against rounding in the bound arithmetic
        let pad = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
        lo -= pad;
        hi += pad;
        let mut v = r0 / self.dphi(0.0).max(self.c_minus);
        for _ in 0..200 {
            let res = self.phi(v) - y;
            if res.abs() <= tol {
                return Ok(v);
            }
            if res > 0.0 {
                hi = v;
            } else {
                lo = v;
            }
            let mut next = v - res / self.dphi(v);
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi); // bisection safeguard
            }
            if next == v {
                // bracket exhausted at floating-point resolution
                break;
            }
            v = next;
        }
        if (self.phi(v) - y).abs() <= tol {
            Ok(v)
        } else {
            Err(CoeffError::NoConvergence { y, last: v })
        }
    }
}
