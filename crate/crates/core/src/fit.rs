//! Least-squares fitting helpers for time-series diagnostics.

use thiserror::Error;

/// Errors from the fitting helpers.
#[derive(Debug, Error)]
pub enum FitError {
    #[error("need at least two usable samples, got {0}")]
    TooFewSamples(usize),
    #[error("samples must be finite")]
    NonFinite,
    #[error("abscissae are degenerate (zero variance)")]
    DegenerateAbscissae,
}

/// Ordinary least squares `y = slope * x + intercept`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64), FitError> {
    let n = x.len().min(y.len());
    if n < 2 {
        return Err(FitError::TooFewSamples(n));
    }
    if x[..n].iter().chain(y[..n].iter()).any(|v| !v.is_finite()) {
        return Err(FitError::NonFinite);
    }
    let nf = n as f64;
    let mx = x[..n].iter().sum::<f64>() / nf;
    let my = y[..n].iter().sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for i in 0..n {
        let dx = x[i] - mx;
        sxx += dx * dx;
        sxy += dx * (y[i] - my);
    }
    if sxx == 0.0 {
        return Err(FitError::DegenerateAbscissae);
    }
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// Fits `log(values)` against `times` over the window starting at `t_start`.
///
/// The window ends just before the first record smaller than
/// `floor_relative` times the first windowed value, so that a decay fit never
/// includes samples drowned in rounding noise. Non-positive records also end
/// the window. Returns `(slope, intercept)` of the fit to `log(value)`.
pub fn fit_log_slope(
    times: &[f64],
    values: &[f64],
    t_start: f64,
    floor_relative: f64,
) -> Result<(f64, f64), FitError> {
    let n = times.len().min(values.len());
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut reference = f64::NAN;
    for i in 0..n {
        if times[i] < t_start {
            continue;
        }
        let v = values[i];
        if !(v > 0.0) {
            break;
        }
        if reference.is_nan() {
            reference = v;
        } else if v < floor_relative * reference {
            break;
        }
        xs.push(times[i]);
        ys.push(v.ln());
    }
    if xs.len() < 2 {
        return Err(FitError::TooFewSamples(xs.len()));
    }
    linear_fit(&xs, &ys)
}
