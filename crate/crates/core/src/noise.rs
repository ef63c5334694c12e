//! Rough spatial noise on the torus, represented through its antiderivative.
//!
//! The noise `xi` itself lives in a negative Hölder class and is never stored
//! directly. A [`NoiseSample`] holds the integrated path
//! `eta(x) = integral_0^x xi(y) dy`, split as `eta = eta_tilde + sigma*x`
//! where `eta_tilde` is 1-periodic with `eta_tilde(0) = 0` and
//! `sigma = eta(1)` is the non-periodic drift (the total mass of `xi`).
//!
//! Sampling uses the Karhunen–Loève sine expansion of a Brownian bridge,
//! `w(x) = sum_{k=1}^{K} Z_k * sqrt(2) * sin(k*pi*x) / (k*pi)`, `Z_k` i.i.d.
//! standard normal from a seeded ChaCha12 stream, so every sample is exactly
//! reproducible from `(seed, n, kl_modes)`. Mollification is the periodic heat
//! kernel acting as the Fourier multiplier `exp(-eps*(2*pi*k)^2)` on the
//! sampled periodic part, and `xi_eps` is its spectral derivative plus the
//! drift constant, which makes `integral xi_eps = sigma` hold exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridError, GridFunction};
use crate::spectral;

/// Errors from noise sampling, mollification and serialisation.
#[derive(Debug, Error)]
pub enum NoiseError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("drift must be finite, got {0}")]
    BadSigma(f64),
    #[error("mollification width must be finite and nonnegative, got {0}")]
    BadEps(f64),
    #[error("periodic part must vanish at x = 0, got {0}")]
    NonzeroBase(f64),
    #[error("only raw seeded samples can be serialised to a header (this sample is {0})")]
    NotReconstructible(&'static str),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed noise header: {0}")]
    Malformed(String),
}

/// Derives a per-purpose seed from a base seed and a stream identifier.
///
/// ChaCha12 acts as a PRF of its key, so XOR-distinct keys give independent
/// streams; every component that needs its own randomness documents a
/// distinct stream constant.
pub fn derive_seed(base: u64, stream_id: u64) -> u64 {
    base ^ stream_id
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Provenance {
    SeededBridge,
    Explicit,
}

impl Provenance {
    fn label(self) -> &'static str {
        match self {
            Provenance::SeededBridge => "seeded",
            Provenance::Explicit => "explicit",
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NoiseHeader {
    seed: u64,
    n: usize,
    kl_modes: usize,
    sigma: f64,
}

/// A realisation of the rough noise, stored through its integrated path.
#[derive(Debug, Clone)]
pub struct NoiseSample {
    eta_tilde: GridFunction,
    sigma: f64,
    seed: u64,
    kl_modes: usize,
    eps: f64,
    provenance: Provenance,
}

impl NoiseSample {
    /// Samples a Brownian bridge via its Karhunen–Loève sine expansion
    /// truncated at `kl_modes` terms, evaluated at the `n` grid nodes.
    ///
    /// `kl_modes = 0` yields the deterministic zero noise. Modes with
    /// `k >= 2n` fold onto their nodal aliases, so the grid samples equal the
    /// exact pointwise sum for every truncation level.
    pub fn sample_bridge(seed: u64, n: usize, kl_modes: usize) -> Result<Self, NoiseError> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let coeffs: Vec<f64> = (0..kl_modes)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Self::from_kl_raw(&coeffs, n, seed, kl_modes, Provenance::SeededBridge)
    }

    /// Builds the bridge sum with explicitly chosen KL coefficients `Z_k`
    /// (index 0 is `Z_1`). Useful for single-mode and deterministic noises.
    pub fn from_kl_coefficients(coeffs: &[f64], n: usize) -> Result<Self, NoiseError> {
        Self::from_kl_raw(coeffs, n, 0, coeffs.len(), Provenance::Explicit)
    }

    /// Wraps an externally supplied periodic part (admissible rough noises
    /// beyond the bridge family). Requires `eta_tilde(0) = 0`.
    pub fn from_parts(eta_tilde: GridFunction, sigma: f64) -> Result<Self, NoiseError> {
        if !sigma.is_finite() {
            return Err(NoiseError::BadSigma(sigma));
        }
        if eta_tilde.values()[0] != 0.0 {
            return Err(NoiseError::NonzeroBase(eta_tilde.values()[0]));
        }
        Ok(Self {
            eta_tilde,
            sigma,
            seed: 0,
            kl_modes: 0,
            eps: 0.0,
            provenance: Provenance::Explicit,
        })
    }

    fn from_kl_raw(
        coeffs: &[f64],
        n: usize,
        seed: u64,
        kl_modes: usize,
        provenance: Provenance,
    ) -> Result<Self, NoiseError> {
        let amps: Vec<f64> = coeffs
            .iter()
            .enumerate()
            .map(|(i, &z)| {
                let k = (i + 1) as f64;
                z * std::f64::consts::SQRT_2 / (k * std::f64::consts::PI)
            })
            .collect();
        let mut values = eval_sine_sum(&amps, n);
        values[0] = 0.0; // sin(k*pi*0) = 0 exactly; scrub FFT rounding residue
        Ok(Self {
            eta_tilde: GridFunction::new(values)?,
            sigma: 0.0,
            seed,
            kl_modes,
            eps: 0.0,
            provenance,
        })
    }

    /// Adds drift: returns the sample with `sigma` increased by `extra`.
    /// Two applications compose additively at the bit level because only the
    /// stored drift scalar changes.
    pub fn with_drift(&self, extra: f64) -> Result<Self, NoiseError> {
        let sigma = self.sigma + extra;
        if !sigma.is_finite() {
            return Err(NoiseError::BadSigma(sigma));
        }
        let mut out = self.clone();
        out.sigma = sigma;
        Ok(out)
    }

    /// Heat-mollified sample at width `eps`: the periodic part is damped by
    /// `exp(-eps*(2*pi*k)^2)` and re-based so that `eta(0) = 0` stays exact
    /// (the mollified path is the antiderivative of `xi_eps` from 0).
    pub fn mollified(&self, eps: f64) -> Result<Self, NoiseError> {
        if !eps.is_finite() || eps < 0.0 {
            return Err(NoiseError::BadEps(eps));
        }
        if eps == 0.0 {
            return Ok(self.clone());
        }
        let mut coeffs = spectral::dft(self.eta_tilde.values());
        spectral::heat_multiplier(&mut coeffs, eps);
        let mut values = spectral::idft_real(&coeffs);
        let base = values[0];
        for v in &mut values {
            *v -= base;
        }
        values[0] = 0.0;
        Ok(Self {
            eta_tilde: GridFunction::new(values)?,
            sigma: self.sigma,
            seed: self.seed,
            kl_modes: self.kl_modes,
            eps: self.eps + eps,
            provenance: self.provenance,
        })
    }

    /// The mollified noise itself: spectral derivative of the damped periodic
    /// part plus the drift constant. `eps = 0` returns the raw spectral
    /// derivative, valid because sampled paths are finite mode sums. The mean
    /// is `sigma` exactly (a spectral derivative has exact zero mean).
    pub fn mollified_xi(&self, eps: f64) -> Result<GridFunction, NoiseError> {
        if !eps.is_finite() || eps < 0.0 {
            return Err(NoiseError::BadEps(eps));
        }
        let mut coeffs = spectral::dft(self.eta_tilde.values());
        spectral::heat_multiplier(&mut coeffs, eps);
        spectral::derivative_multiplier(&mut coeffs, 1);
        let values: Vec<f64> = spectral::idft_real(&coeffs)
            .into_iter()
            .map(|v| v + self.sigma)
            .collect();
        Ok(GridFunction::new(values)?)
    }

    /// Integrated path `eta(x_j) = eta_tilde(x_j) + sigma*x_j` (so
    /// `eta(0) = 0` and, structurally, `eta(1) = sigma`).
    pub fn eta(&self) -> GridFunction {
        let n = self.n();
        let values: Vec<f64> = self
            .eta_tilde
            .values()
            .iter()
            .enumerate()
            .map(|(j, &w)| w + self.sigma * (j as f64 / n as f64))
            .collect();
        GridFunction::new(values).expect("eta inherits finiteness from its parts")
    }

    /// Periodic part of the path.
    pub fn eta_tilde(&self) -> &GridFunction {
        &self.eta_tilde
    }

    /// Drift `sigma = eta(1)`, the torus mean of the noise.
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Seed of the generating stream (0 for explicitly constructed samples).
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of KL modes in the expansion.
    pub fn kl_modes(&self) -> usize {
        self.kl_modes
    }

    /// Accumulated mollification width (0 for raw samples).
    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// Grid size.
    pub fn n(&self) -> usize {
        self.eta_tilde.n()
    }

    /// Writes the JSON header `{seed, n, kl_modes, sigma}`. Only raw seeded
    /// samples are serialisable: the header alone must regenerate the sample
    /// bit-exactly via [`NoiseSample::from_header_json`].
    pub fn write_header_json(&self, path: &Path) -> Result<(), NoiseError> {
        if self.provenance != Provenance::SeededBridge {
            return Err(NoiseError::NotReconstructible(self.provenance.label()));
        }
        if self.eps != 0.0 {
            return Err(NoiseError::NotReconstructible("mollified"));
        }
        let header = NoiseHeader {
            seed: self.seed,
            n: self.n(),
            kl_modes: self.kl_modes,
            sigma: self.sigma,
        };
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, &header)
            .map_err(|e| NoiseError::Malformed(e.to_string()))?;
        Ok(())
    }

    /// Regenerates a sample from its JSON header; bit-identical to the
    /// original because the construction path is the same.
    pub fn from_header_json(path: &Path) -> Result<Self, NoiseError> {
        let r = BufReader::new(File::open(path)?);
        let header: NoiseHeader =
            serde_json::from_reader(r).map_err(|e| NoiseError::Malformed(e.to_string()))?;
        Self::sample_bridge(header.seed, header.n, header.kl_modes)?.with_drift(header.sigma)
    }

    /// Writes the integrated path as a grid CSV.
    pub fn write_eta_csv(&self, path: &Path) -> Result<(), NoiseError> {
        self.eta().write_csv(path)?;
        Ok(())
    }
}

/// Evaluates `sum_k a_k sin(pi*k*j/n)` at `j = 0..n-1` through one inverse
/// DFT of length `2n` (the odd extension of the half-range sine basis).
/// Exact at the nodes for every truncation: bins fold modulo `2n`.
fn eval_sine_sum(amps: &[f64], n: usize) -> Vec<f64> {
    let m = 2 * n;
    let mut spectrum = vec![Complex64::new(0.0, 0.0); m];
    for (i, &a) in amps.iter().enumerate() {
        let k = (i + 1) % m;
        // sin(pi*k*j/n) = (w^{jk} - w^{-jk}) / (2i), w = exp(2*pi*i/m)
        let half = Complex64::new(0.0, -0.5 * a);
        spectrum[k] += half;
        spectrum[(m - k) % m] -= half;
    }
    let mut buf = spectrum;
    {
        use std::cell::RefCell;
        thread_local! {
            static PLANNER: RefCell<rustfft::FftPlanner<f64>> =
                RefCell::new(rustfft::FftPlanner::new());
        }
        PLANNER.with(|p| {
            let fft = p.borrow_mut().plan_fft_inverse(m);
            fft.process(&mut buf);
        });
    }
    buf[..n].iter().map(|c| c.re).collect()
}
