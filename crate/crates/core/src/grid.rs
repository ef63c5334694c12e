//! Periodic grid functions on the unit torus.
//!
//! A [`GridFunction`] holds samples of a 1-periodic function at the uniform
//! nodes `x_j = j/n`, `j = 0..n-1`. Differentiation is spectral by default
//! (exact for trigonometric polynomials below the Nyquist frequency), with a
//! second-order central-difference alternative for cross-validation against an
//! independent discretisation. Quadrature is the rectangle rule, which on
//! periodic data coincides with the trapezoid rule and is spectrally accurate
//! for smooth integrands.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::spectral;

/// Minimum number of grid points accepted by constructors.
pub const MIN_GRID_POINTS: usize = 8;

/// Errors from grid construction, calculus and serialisation.
#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid needs at least {MIN_GRID_POINTS} points, got {0}")]
    TooSmall(usize),
    #[error("non-finite value at node {0}")]
    NonFinite(usize),
    #[error("grid sizes differ: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error("derivative order must be 1 or 2, got {0}")]
    BadDerivativeOrder(u32),
    #[error("Hölder exponent must lie in (0, 1], got {0}")]
    BadHolderExponent(f64),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed grid file: {0}")]
    Malformed(String),
}

/// Norms and seminorms measurable on a grid function.
///
/// Weighted variants carry the weight `theta > 0` sampled on the same grid.
/// `Holder(beta)` is the discrete Hölder quotient estimator: the maximum over
/// dyadic lags `L = 1, 2, 4, ... <= n/2` (lag distance `h = L/n`) of
/// `max_j |g(x_j + h) - g(x_j)| / h^beta`.
#[derive(Debug, Clone, Copy)]
pub enum NormKind<'a> {
    L2,
    L2Weighted(&'a GridFunction),
    H1,
    H1Weighted(&'a GridFunction),
    LInf,
    Holder(f64),
}

/// Samples of a 1-periodic function at the uniform nodes `j/n`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    values: Vec<f64>,
}

impl GridFunction {
    /// Wraps a sample vector, rejecting undersized grids and non-finite data.
    pub fn new(values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() < MIN_GRID_POINTS {
            return Err(GridError::TooSmall(values.len()));
        }
        if let Some(j) = values.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite(j));
        }
        Ok(Self { values })
    }

    /// Constant function `c` on `n` nodes.
    pub fn constant(n: usize, c: f64) -> Result<Self, GridError> {
        Self::new(vec![c; n])
    }

    /// Samples `f(x_j)` at the `n` uniform nodes.
    pub fn from_fn(n: usize, f: impl Fn(f64) -> f64) -> Result<Self, GridError> {
        Self::new((0..n).map(|j| f(j as f64 / n as f64)).collect())
    }

    /// Number of nodes.
    pub fn n(&self) -> usize {
        self.values.len()
    }

    /// Grid spacing `1/n`.
    pub fn dx(&self) -> f64 {
        1.0 / self.values.len() as f64
    }

    /// Node coordinate `x_j = j/n`.
    pub fn x(&self, j: usize) -> f64 {
        j as f64 / self.values.len() as f64
    }

    /// Sample values in node order.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Value at node `j mod n`.
    pub fn value(&self, j: usize) -> f64 {
        self.values[j % self.values.len()]
    }

    /// Rectangle-rule integral over the torus (spectrally accurate for smooth
    /// periodic integrands; exact for trigonometric polynomials below Nyquist).
    pub fn integrate(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.dx()
    }

    /// Mean value (same as [`integrate`](Self::integrate) on the unit torus).
    pub fn mean(&self) -> f64 {
        self.integrate()
    }

    /// Spectral derivative of the given order (1 or 2).
    ///
    /// Order 1 zeroes the Nyquist bin (its sine derivative vanishes at the
    /// nodes); order 2 keeps it with multiplier `-(pi*n)^2`.
    pub fn derivative(&self, order: u32) -> Result<Self, GridError> {
        if order != 1 && order != 2 {
            return Err(GridError::BadDerivativeOrder(order));
        }
        let mut coeffs = spectral::dft(&self.values);
        spectral::derivative_multiplier(&mut coeffs, order);
        Self::new(spectral::idft_real(&coeffs))
    }

    /// Second-order central-difference first derivative, the independent
    /// discretisation used to cross-validate the spectral one.
    pub fn derivative_fd(&self) -> Result<Self, GridError> {
        let n = self.n();
        let two_h = 2.0 * self.dx();
        let v = &self.values;
        Self::new(
            (0..n)
                .map(|j| (v[(j + 1) % n] - v[(j + n - 1) % n]) / two_h)
                .collect(),
        )
    }

    /// Cumulative integral `x_j -> integral_0^{x_j} g(y) dy` of the
    /// trigonometric interpolant (mode-exact; the mean contributes `mean*x`).
    pub fn cumulative_integral(&self) -> Result<Self, GridError> {
        Self::new(spectral::cumulative_with_drift(&self.values, 0.0).0)
    }

    /// Resamples the interpolant at the half-cell nodes `x_j + 1/(2n)`.
    pub fn half_shift(&self) -> Result<Self, GridError> {
        let mut coeffs = spectral::dft(&self.values);
        spectral::half_shift_multiplier(&mut coeffs);
        Self::new(spectral::idft_real(&coeffs))
    }

    /// Applies `f` nodewise.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self, GridError> {
        Self::new(self.values.iter().map(|&v| f(v)).collect())
    }

    /// Combines two functions nodewise.
    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self, GridError> {
        if self.n() != other.n() {
            return Err(GridError::SizeMismatch(self.n(), other.n()));
        }
        Self::new(
            self.values
                .iter()
                .zip(other.values.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    /// Measures the requested norm or seminorm.
    pub fn norm(&self, kind: NormKind) -> Result<f64, GridError> {
        match kind {
            NormKind::L2 => Ok(self.map(|v| v * v)?.integrate().sqrt()),
            NormKind::L2Weighted(theta) => {
                Ok(self.zip_with(theta, |v, t| v * v * t)?.integrate().sqrt())
            }
            NormKind::H1 => {
                let dv = self.derivative(1)?;
                let sq = self.map(|v| v * v)?.integrate() + dv.map(|v| v * v)?.integrate();
                Ok(sq.sqrt())
            }
            NormKind::H1Weighted(theta) => {
                let dv = self.derivative(1)?;
                let sq = self.zip_with(theta, |v, t| v * v * t)?.integrate()
                    + dv.zip_with(theta, |v, t| v * v * t)?.integrate();
                Ok(sq.sqrt())
            }
            NormKind::LInf => Ok(self.values.iter().fold(0.0f64, |m, &v| m.max(v.abs()))),
            NormKind::Holder(beta) => {
                if !(beta > 0.0 && beta <= 1.0) {
                    return Err(GridError::BadHolderExponent(beta));
                }
                Ok(self.holder_quotient(beta))
            }
        }
    }

    /// Discrete Hölder quotient over dyadic lags (see [`NormKind::Holder`]).
    fn holder_quotient(&self, beta: f64) -> f64 {
        let n = self.n();
        let mut worst = 0.0f64;
        let mut lag = 1usize;
        while 2 * lag <= n {
            let h = lag as f64 / n as f64;
            let scale = h.powf(beta);
            for j in 0..n {
                let diff = (self.values[(j + lag) % n] - self.values[j]).abs();
                worst = worst.max(diff / scale);
            }
            lag *= 2;
        }
        worst
    }

    /// Writes `x,value` CSV rows (shortest round-trip float formatting, so a
    /// read-back reproduces the samples bit-exactly).
    pub fn write_csv(&self, path: &Path) -> Result<(), GridError> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "x,value")?;
        for (j, v) in self.values.iter().enumerate() {
            writeln!(w, "{},{}", self.x(j), v)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a CSV produced by [`write_csv`](Self::write_csv).
    pub fn read_csv(path: &Path) -> Result<Self, GridError> {
        let reader = BufReader::new(File::open(path)?);
        let mut lines = reader.lines();
        match lines.next() {
            Some(header) => {
                let header = header?;
                if header.trim() != "x,value" {
                    return Err(GridError::Malformed(format!(
                        "expected header 'x,value', got '{header}'"
                    )));
                }
            }
            None => return Err(GridError::Malformed("empty file".into())),
        }
        let mut values = Vec::new();
        for (row, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.splitn(2, ',');
            let (xs, vs) = match (parts.next(), parts.next()) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(GridError::Malformed(format!("row {row}: expected 2 fields"))),
            };
            let _x: f64 = xs
                .trim()
                .parse()
                .map_err(|e| GridError::Malformed(format!("row {row}: bad x: {e}")))?;
            let v: f64 = vs
                .trim()
                .parse()
                .map_err(|e| GridError::Malformed(format!("row {row}: bad value: {e}")))?;
            values.push(v);
        }
        Self::new(values)
    }

    /// Writes the binary container: `u64` node count, then raw little-endian
    /// doubles. Bit-exact by construction.
    pub fn write_binary(&self, path: &Path) -> Result<(), GridError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&(self.n() as u64).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the binary container written by [`write_binary`](Self::write_binary).
    pub fn read_binary(path: &Path) -> Result<Self, GridError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut head = [0u8; 8];
        r.read_exact(&mut head)?;
        let n = u64::from_le_bytes(head) as usize;
        let mut values = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        if r.read(&mut buf)? != 0 {
            return Err(GridError::Malformed("trailing bytes after payload".into()));
        }
        Self::new(values)
    }
}
