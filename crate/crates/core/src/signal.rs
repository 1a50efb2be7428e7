//! Evolutionary process model: amplitude presets with known log-spectra,
//! realizations by discretized spectral synthesis, and the exact covariance of
//! that discretization.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;

use crate::analytic::{Analytic, Jet};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Built-in processes with analytic log-spectrum `θ(f,t) = ln S(f,t)`.
///
/// Every preset is even in `f`, strictly positive, and infinitely smooth.
#[derive(Debug, Clone, PartialEq)]
pub enum Preset {
    /// `S ≡ level`.
    StationaryWhite { level: f64 },
    /// `A(f,t) = 1 + depth·cos(2πt/period)`, so `θ = 2 ln(1 + depth·cos(2πt/period))`.
    AmModulated { depth: f64, period: f64 },
    /// Gaussian spectral bump whose center drifts sinusoidally:
    /// `S = floor + peak·[G(f − c(t)) + G(f + c(t))]`,
    /// `G(x) = exp(−x²/2σ²)`, `c(t) = center + sweep·sin(2πt/period)`.
    Chirp {
        floor: f64,
        peak: f64,
        center: f64,
        sweep: f64,
        period: f64,
        width: f64,
    },
    /// A single time-frequency burst on a flat background:
    /// `S = 1 + peak·exp(−(t−t0)²/2s²)·[G(f − f0) + G(f + f0)]`.
    /// Curvature is concentrated near `(f0, t0)` and vanishes elsewhere.
    Burst {
        peak: f64,
        t0: f64,
        time_width: f64,
        f0: f64,
        width: f64,
    },
}

impl Preset {
    /// Chirp whose bump moves one spectral width per radian of the drift cycle.
    pub fn chirp(tau: f64, lambda_f: f64) -> Self {
        Preset::Chirp {
            floor: 1.0,
            peak: 9.0,
            center: 0.25,
            sweep: lambda_f,
            period: 2.0 * PI * tau,
            width: lambda_f,
        }
    }

    pub fn am(depth: f64, period: f64) -> Self {
        Preset::AmModulated { depth, period }
    }

    /// Characteristic time scale `τ` and frequency scalelength `λ_F`.
    pub fn scales(&self) -> (f64, f64) {
        match *self {
            Preset::StationaryWhite { .. } => (f64::INFINITY, f64::INFINITY),
            Preset::AmModulated { period, .. } => (period / (2.0 * PI), f64::INFINITY),
            Preset::Chirp { period, width, .. } => (period / (2.0 * PI), width),
            Preset::Burst {
                time_width, width, ..
            } => (time_width, width),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Preset::StationaryWhite { .. } => "stationary-white",
            Preset::AmModulated { .. } => "am",
            Preset::Chirp { .. } => "chirp",
            Preset::Burst { .. } => "burst",
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Preset::StationaryWhite { level } => level > 0.0,
            Preset::AmModulated { depth, period } => (0.0..1.0).contains(&depth) && period > 0.0,
            Preset::Chirp {
                floor,
                peak,
                period,
                width,
                ..
            } => floor > 0.0 && peak >= 0.0 && period > 0.0 && width > 0.0,
            Preset::Burst {
                peak,
                time_width,
                width,
                ..
            } => peak >= 0.0 && time_width > 0.0 && width > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("preset", format!("{self:?} has out-of-range parameters")))
        }
    }

    /// Log-spectrum evaluated over any [`Analytic`] number type.
    pub fn log_spectrum<S: Analytic>(&self, f: S, t: S) -> S {
        let proto = f.clone();
        let c = |v: f64| proto.constant_like(v);
        match *self {
            Preset::StationaryWhite { level } => c(level.ln()),
            Preset::AmModulated { depth, period } => {
                let g = c(1.0) + (t.scale(2.0 * PI / period)).cos().scale(depth);
                g.ln().scale(2.0)
            }
            Preset::Chirp {
                floor,
                peak,
                center,
                sweep,
                period,
                width,
            } => {
                let ctr = c(center) + t.scale(2.0 * PI / period).sin().scale(sweep);
                let inv = -0.5 / (width * width);
                let d1 = f.clone() - ctr.clone();
                let d2 = f + ctr;
                let g = (d1.clone() * d1).scale(inv).exp() + (d2.clone() * d2).scale(inv).exp();
                (c(floor) + g.scale(peak)).ln()
            }
            Preset::Burst {
                peak,
                t0,
                time_width,
                f0,
                width,
            } => {
                let dt = t - c(t0);
                let env = (dt.clone() * dt).scale(-0.5 / (time_width * time_width)).exp();
                let inv = -0.5 / (width * width);
                let d1 = f.clone() - c(f0);
                let d2 = f + c(f0);
                let g = (d1.clone() * d1).scale(inv).exp() + (d2.clone() * d2).scale(inv).exp();
                (c(1.0) + (env * g).scale(peak)).ln()
            }
        }
    }
}

/// Amplitude function `A(f,t)`.
#[derive(Clone)]
pub enum Amplitude {
    Preset(Preset),
    Custom(Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for Amplitude {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Amplitude::Preset(p) => f.debug_tuple("Preset").field(p).finish(),
            Amplitude::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// Ground-truth description of an evolutionary process.
#[derive(Debug, Clone)]
pub struct ProcessSpec {
    amplitude: Amplitude,
    tau: f64,
    lambda_f: f64,
    smoothness_order: usize,
}

impl ProcessSpec {
    /// Preset process; `τ`, `λ_F` are taken from the preset and unbounded
    /// scales are replaced by `fallback_scales`.
    pub fn from_preset(preset: Preset, fallback_scales: (f64, f64)) -> Result<Self> {
        preset.validate()?;
        let (mut tau, mut lambda_f) = preset.scales();
        if !tau.is_finite() {
            tau = fallback_scales.0;
        }
        if !lambda_f.is_finite() {
            lambda_f = fallback_scales.1;
        }
        Self::check_scales(tau, lambda_f)?;
        Ok(ProcessSpec {
            amplitude: Amplitude::Preset(preset),
            tau,
            lambda_f,
            smoothness_order: 8,
        })
    }

    pub fn custom(
        amplitude: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        tau: f64,
        lambda_f: f64,
        smoothness_order: usize,
    ) -> Result<Self> {
        Self::check_scales(tau, lambda_f)?;
        if smoothness_order < 2 {
            return Err(Error::invalid("smoothness_order", "must be at least 2"));
        }
        Ok(ProcessSpec {
            amplitude: Amplitude::Custom(Arc::new(amplitude)),
            tau,
            lambda_f,
            smoothness_order,
        })
    }

    fn check_scales(tau: f64, lambda_f: f64) -> Result<()> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::invalid("tau", format!("must be positive and finite, got {tau}")));
        }
        if !(lambda_f > 0.0 && lambda_f.is_finite()) {
            return Err(Error::invalid(
                "lambda_f",
                format!("must be positive and finite, got {lambda_f}"),
            ));
        }
        Ok(())
    }

    pub fn with_smoothness_order(mut self, p_bar: usize) -> Self {
        self.smoothness_order = p_bar.max(2);
        self
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn lambda_f(&self) -> f64 {
        self.lambda_f
    }

    pub fn smoothness_order(&self) -> usize {
        self.smoothness_order
    }

    pub fn preset(&self) -> Option<&Preset> {
        match &self.amplitude {
            Amplitude::Preset(p) => Some(p),
            Amplitude::Custom(_) => None,
        }
    }

    pub fn amplitude(&self, f: f64, t: f64) -> f64 {
        match &self.amplitude {
            Amplitude::Preset(p) => (0.5 * p.log_spectrum(f, t)).exp(),
            Amplitude::Custom(a) => a(f, t),
        }
    }

    pub fn spectrum(&self, f: f64, t: f64) -> f64 {
        let a = self.amplitude(f, t);
        a * a
    }

    /// `θ(f,t) = ln S(f,t)`; `None` for custom amplitudes.
    pub fn theta(&self, f: f64, t: f64) -> Option<f64> {
        self.preset().map(|p| p.log_spectrum(f, t))
    }

    /// Unnormalized mixed partial `∂_f^{kf} ∂_t^{kt} θ(f,t)`.
    pub fn theta_partial(&self, f: f64, t: f64, kf: usize, kt: usize) -> Option<f64> {
        let p = self.preset()?;
        let fj = Jet::variable(Jet::constant(f, kt), kf);
        let tj = Jet::constant(Jet::variable(t, kt), kf);
        let th = p.log_spectrum(fj, tj);
        Some(th.derivative(kf).derivative(kt))
    }

    /// Partial `∂_f̄^{kf} ∂_t̄^{kt} θ` in slow units `t̄ = t/τ`, `f̄ = f/λ_F`.
    pub fn theta_partial_normalized(&self, f: f64, t: f64, kf: usize, kt: usize) -> Option<f64> {
        self.theta_partial(f, t, kf, kt)
            .map(|v| v * self.lambda_f.powi(kf as i32) * self.tau.powi(kt as i32))
    }

    /// Time-only factorization `A(f,t) = a(f)·g(t)` when the preset admits one.
    fn separable(&self) -> Option<Separable<'_>> {
        match &self.amplitude {
            Amplitude::Preset(Preset::AmModulated { depth, period }) => {
                let (d, w) = (*depth, 2.0 * PI / *period);
                Some(Separable {
                    freq_amp: 1.0,
                    time_amp: Box::new(move |t| 1.0 + d * (w * t).cos()),
                })
            }
            Amplitude::Preset(Preset::StationaryWhite { level }) => Some(Separable {
                freq_amp: level.sqrt(),
                time_amp: Box::new(|_| 1.0),
            }),
            Amplitude::Preset(_) => None,
            Amplitude::Custom(_) => None,
        }
    }
}

struct Separable<'a> {
    freq_amp: f64,
    time_amp: Box<dyn Fn(f64) -> f64 + 'a>,
}

/// Real, uniformly sampled series `x_0 … x_{N_D−1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries<T> {
    samples: Vec<T>,
    sample_interval: T,
}

impl<T: Real> TimeSeries<T> {
    pub fn new(samples: Vec<T>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("samples", "a series needs at least one sample"));
        }
        Ok(TimeSeries {
            samples,
            sample_interval: T::one(),
        })
    }

    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_interval(&self) -> T {
        self.sample_interval
    }

    pub fn cast<U: Real>(&self) -> TimeSeries<U> {
        TimeSeries {
            samples: self.samples.iter().map(|&v| U::lit(v.as_f64())).collect(),
            sample_interval: U::lit(self.sample_interval.as_f64()),
        }
    }
}

/// How the spectral synthesis sum is evaluated for non-separable amplitudes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Synthesis {
    /// Pick the cheapest route that stays within interpolation error `1e−6`.
    Auto,
    /// Direct `O(N_D · n_freq_bins)` summation.
    Direct,
    /// Amplitude interpolated in time (cubic Lagrange) between knots spaced
    /// `spacing` samples apart; one FFT per knot.
    Knots { spacing: usize },
}

/// Midpoint frequency of bin `k` out of `n` on `[−1/2, 1/2]`.
#[inline]
fn bin_frequency(k: usize, n: usize) -> f64 {
    (k as f64 + 0.5) / n as f64 - 0.5
}

fn check_bins(n_freq_bins: usize) -> Result<()> {
    if n_freq_bins < 2 || n_freq_bins % 2 != 0 {
        return Err(Error::invalid(
            "n_freq_bins",
            format!("must be even and at least 2 to impose conjugate symmetry, got {n_freq_bins}"),
        ));
    }
    Ok(())
}

/// Conjugate-symmetric complex Gaussian increments with `E|dZ|² = 1/n`.
fn increments(n: usize, seed: u64) -> Vec<Complex64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = (0.5 / n as f64).sqrt();
    let mut dz = vec![Complex64::new(0.0, 0.0); n];
    for k in 0..n / 2 {
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        dz[k] = Complex64::new(re * sd, im * sd);
        dz[n - 1 - k] = dz[k].conj();
    }
    dz
}

/// `B(t) = Σ_k a_k e^{2πi f_k t}` for all `t` in `0..len`, via one inverse FFT.
fn synthesize(a: &[Complex64], len: usize, planner: &mut FftPlanner<f64>) -> Vec<Complex64> {
    let n = a.len();
    let mut buf = a.to_vec();
    planner.plan_fft_inverse(n).process(&mut buf);
    (0..len)
        .map(|t| {
            // e^{2πi f_k t} = e^{2πi k t/n} · e^{iπt/n} · (−1)^t
            let sign = if t % 2 == 0 { 1.0 } else { -1.0 };
            let phase = Complex64::from_polar(sign, PI * (t % (2 * n)) as f64 / n as f64);
            buf[t % n] * phase
        })
        .collect()
}

/// Output of [`simulate_detailed`].
#[derive(Debug, Clone)]
pub struct Simulation {
    pub series: TimeSeries<f64>,
    /// Largest `|Im x_t|` of the symmetrized sum before it is discarded.
    pub imaginary_residue: f64,
    pub synthesis: Synthesis,
}

/// One realization of the process on `n_samples` points.
pub fn simulate<T: Real>(
    spec: &ProcessSpec,
    n_samples: usize,
    n_freq_bins: usize,
    rng_seed: u64,
) -> Result<TimeSeries<T>> {
    simulate_detailed(spec, n_samples, n_freq_bins, rng_seed, Synthesis::Auto)
        .map(|s| s.series.cast())
}

pub fn simulate_detailed(
    spec: &ProcessSpec,
    n_samples: usize,
    n_freq_bins: usize,
    rng_seed: u64,
    synthesis: Synthesis,
) -> Result<Simulation> {
    if n_samples == 0 {
        return Err(Error::invalid("n_samples", "must be at least 1"));
    }
    check_bins(n_freq_bins)?;
    let n = n_freq_bins;
    let dz = increments(n, rng_seed);
    let mut planner = FftPlanner::new();

    let (values, used): (Vec<Complex64>, Synthesis) = if let Some(sep) = spec.separable() {
        let a: Vec<Complex64> = dz.iter().map(|z| z * sep.freq_amp).collect();
        let b = synthesize(&a, n_samples, &mut planner);
        let v = b
            .into_iter()
            .enumerate()
            .map(|(t, z)| z * (sep.time_amp)(t as f64))
            .collect();
        (v, synthesis)
    } else {
        let method = match synthesis {
            Synthesis::Auto => {
                let spacing = (spec.tau() / 24.0).floor() as usize;
                if spacing >= 4 && (n_samples as f64) * (n as f64) > 4.0e6 {
                    Synthesis::Knots { spacing }
                } else {
                    Synthesis::Direct
                }
            }
            m => m,
        };
        let v = match method {
            Synthesis::Knots { spacing } if spacing >= 1 => {
                synthesize_knots(spec, &dz, n_samples, spacing, &mut planner)
            }
            _ => synthesize_direct(spec, &dz, n_samples),
        };
        (v, method)
    };

    let imaginary_residue = values.iter().fold(0.0_f64, |m, z| m.max(z.im.abs()));
    let samples = values.into_iter().map(|z| z.re).collect();
    Ok(Simulation {
        series: TimeSeries::new(samples)?,
        imaginary_residue,
        synthesis: used,
    })
}

fn synthesize_direct(spec: &ProcessSpec, dz: &[Complex64], n_samples: usize) -> Vec<Complex64> {
    use rayon::prelude::*;
    let n = dz.len();
    let freqs: Vec<f64> = (0..n).map(|k| bin_frequency(k, n)).collect();
    (0..n_samples)
        .into_par_iter()
        .map(|t| {
            let tf = t as f64;
            let mut acc = Complex64::new(0.0, 0.0);
            let step = Complex64::from_polar(1.0, 2.0 * PI * tf / n as f64);
            let mut rot = Complex64::from_polar(1.0, 2.0 * PI * freqs[0] * tf);
            for k in 0..n {
                if k % 64 == 0 {
                    rot = Complex64::from_polar(1.0, 2.0 * PI * ((freqs[k] * tf) % 1.0));
                }
                acc += dz[k] * rot * spec.amplitude(freqs[k], tf);
                rot *= step;
            }
            acc
        })
        .collect()
}

fn synthesize_knots(
    spec: &ProcessSpec,
    dz: &[Complex64],
    n_samples: usize,
    spacing: usize,
    planner: &mut FftPlanner<f64>,
) -> Vec<Complex64> {
    let n = dz.len();
    let freqs: Vec<f64> = (0..n).map(|k| bin_frequency(k, n)).collect();
    let h = spacing as f64;
    let last_cell = (n_samples - 1) / spacing;
    let mut out = vec![Complex64::new(0.0, 0.0); n_samples];
    // knot c sits at t = c·h and contributes to cells c−2 ..= c+1
    for c in -1..=(last_cell as isize + 2) {
        let tc = c as f64 * h;
        let a: Vec<Complex64> = dz
            .iter()
            .zip(&freqs)
            .map(|(z, &f)| z * spec.amplitude(f, tc))
            .collect();
        let lo = ((c - 2).max(0) as usize) * spacing;
        let hi = (((c + 2).max(0) as usize) * spacing).min(n_samples);
        if lo >= hi {
            continue;
        }
        let b = synthesize(&a, hi, planner);
        for (t, bt) in b.iter().enumerate().take(hi).skip(lo) {
            let cell = (t / spacing) as isize;
            let u = (t - cell as usize * spacing) as f64 / h;
            let w = match c - cell {
                -1 => -u * (u - 1.0) * (u - 2.0) / 6.0,
                0 => (u + 1.0) * (u - 1.0) * (u - 2.0) / 2.0,
                1 => -(u + 1.0) * u * (u - 2.0) / 2.0,
                2 => (u + 1.0) * u * (u - 1.0) / 6.0,
                _ => 0.0,
            };
            out[t] += bt * w;
        }
    }
    out
}

/// Covariance `R(t,s)` of the discretized process, by the same midpoint rule
/// the simulator uses.
pub fn true_covariance(spec: &ProcessSpec, t: i64, s: i64, n_freq_bins: usize) -> Result<f64> {
    if n_freq_bins < 2 {
        return Err(Error::invalid("n_freq_bins", "must be at least 2"));
    }
    let n = n_freq_bins;
    let (tf, sf) = (t as f64, s as f64);
    let lag = tf - sf;
    let sum: f64 = (0..n)
        .map(|k| {
            let f = bin_frequency(k, n);
            spec.amplitude(f, tf) * spec.amplitude(f, sf) * (2.0 * PI * f * lag).cos()
        })
        .sum();
    Ok(sum / n as f64)
}
