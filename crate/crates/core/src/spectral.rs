//! Internal Fourier helpers for uniformly sampled 1-periodic data.
//!
//! Conventions: `n` samples at `x_j = j/n`, discrete Fourier coefficients
//! normalised so that `c_k = (1/n) * sum_j g_j exp(-2*pi*i*j*k/n)`, which makes
//! `c_k` the coefficient of `exp(2*pi*i*k*x)` in the trigonometric interpolant.
//! Signed frequencies run over `-n/2 < k <= n/2`; for even `n` the lone Nyquist
//! coefficient `c_{n/2}` represents the real mode `cos(pi*n*x)` and is treated
//! specially by each operation (zeroed for odd derivatives and half-cell
//! shifts, split across `+-n/2` for antiderivatives).

use std::cell::RefCell;
use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Forward DFT of real samples, normalised by `1/n`.
pub(crate) fn dft(values: &[f64]) -> Vec<Complex64> {
    let n = values.len();
    let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    PLANNER.with(|p| {
        let fft = p.borrow_mut().plan_fft_forward(n);
        fft.process(&mut buf);
    });
    let scale = 1.0 / n as f64;
    for c in &mut buf {
        *c *= scale;
    }
    buf
}

/// Inverse DFT back to real samples (imaginary residue discarded).
pub(crate) fn idft_real(coeffs: &[Complex64]) -> Vec<f64> {
    let mut buf = coeffs.to_vec();
    PLANNER.with(|p| {
        let fft = p.borrow_mut().plan_fft_inverse(coeffs.len());
        fft.process(&mut buf);
    });
    buf.iter().map(|c| c.re).collect()
}

/// Signed frequency of bin `k` (so `k > n/2` maps to `k - n`).
pub(crate) fn signed_freq(k: usize, n: usize) -> i64 {
    if 2 * k <= n {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

/// Multiply spectrum in place by `(2*pi*i*k)^order`; Nyquist bin is zeroed for
/// odd orders (its derivative is a sine that vanishes at every node).
pub(crate) fn derivative_multiplier(coeffs: &mut [Complex64], order: u32) {
    let n = coeffs.len();
    for (k, c) in coeffs.iter_mut().enumerate() {
        if n % 2 == 0 && 2 * k == n && order % 2 == 1 {
            *c = Complex64::new(0.0, 0.0);
            continue;
        }
        let ik = Complex64::new(0.0, 2.0 * PI * signed_freq(k, n) as f64);
        *c *= ik.powu(order);
    }
}

/// Damp spectrum by the periodic heat kernel `exp(-eps*(2*pi*k)^2)`.
pub(crate) fn heat_multiplier(coeffs: &mut [Complex64], eps: f64) {
    let n = coeffs.len();
    for (k, c) in coeffs.iter_mut().enumerate() {
        let w = 2.0 * PI * signed_freq(k, n) as f64;
        *c *= (-eps * w * w).exp();
    }
}

/// Shift spectrum by half a cell, i.e. resample the interpolant at
/// `x_j + 1/(2n)`. The Nyquist mode is zeroed: `cos(pi*n*x)` vanishes at
/// every half-integer node.
pub(crate) fn half_shift_multiplier(coeffs: &mut [Complex64]) {
    let n = coeffs.len();
    for (k, c) in coeffs.iter_mut().enumerate() {
        if n % 2 == 0 && 2 * k == n {
            *c = Complex64::new(0.0, 0.0);
            continue;
        }
        let phase = PI * signed_freq(k, n) as f64 / n as f64;
        *c *= Complex64::new(0.0, phase).exp();
    }
}

/// Cumulative integral with an exponential drift factor:
/// `J_j = integral_0^{x_j} Q(y) * exp(sigma*y) dy` where `Q` is the
/// trigonometric interpolant of `values`. Returns `(J, J(1))` with the full
/// period integral evaluated by the same closed form.
///
/// Each torus mode integrates in closed form,
/// `int_0^x e^{(2*pi*i*k + sigma) y} dy = (e^{(2*pi*i*k+sigma)x} - 1) / (2*pi*i*k + sigma)`,
/// so the result is exact for the interpolant (the only error is the
/// interpolation error of `Q` itself). The Nyquist coefficient is split evenly
/// across `+-n/2`, which at the nodes collapses to a real multiplier.
/// For `sigma = 0` the `k = 0` term degenerates to `c_0 * x`.
pub(crate) fn cumulative_with_drift(values: &[f64], sigma: f64) -> (Vec<f64>, f64) {
    let n = values.len();
    let coeffs = dft(values);
    let mut d: Vec<Complex64> = vec![Complex64::new(0.0, 0.0); n];
    let mut c0 = Complex64::new(0.0, 0.0);
    for (k, &c) in coeffs.iter().enumerate() {
        let nyquist = n % 2 == 0 && 2 * k == n;
        if k == 0 && sigma == 0.0 {
            c0 = c; // handled as a linear-in-x term below
            continue;
        }
        if nyquist {
            // average of 1/(sigma + i*pi*n) and 1/(sigma - i*pi*n)
            let w = PI * n as f64;
            d[k] = c * (sigma / (sigma * sigma + w * w));
        } else {
            let w = 2.0 * PI * signed_freq(k, n) as f64;
            d[k] = c / Complex64::new(sigma, w);
        }
    }
    let g = idft_real(&d);
    let g0 = g[0];
    let cumulative = (0..n)
        .map(|j| {
            let x = j as f64 / n as f64;
            (sigma * x).exp() * g[j] - g0 + c0.re * x
        })
        .collect();
    // At x = 1 every mode factor e^{2*pi*i*k} is 1, so J(1) = (e^sigma - 1)*g_0
    // plus the linear term; exp_m1 keeps sigma = 0 exact.
    let total = sigma.exp_m1() * g0 + c0.re;
    (cumulative, total)
}
