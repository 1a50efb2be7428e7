//! Windowed transforms on the overlapping time-frequency lattice, log-spectral
//! point estimates, and the covariance model of those estimates.

use std::f64::consts::PI;
use std::str::FromStr;

use ndarray::Array2;
use num_complex::Complex;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::{Real, EULER_GAMMA, TRIGAMMA_ONE};
use crate::signal::TimeSeries;
use crate::taper::{Taper, TaperFamily};

/// Placement of lattice cells: rows are frequencies `m·δf ≥ 0`, columns are
/// window centers spaced `δt` apart.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeGeometry {
    pub df: f64,
    pub dt: f64,
    pub p_f: f64,
    pub p_t: f64,
    pub taper_family: TaperFamily,
    pub taper_len: usize,
    /// Sample index of each column's window center.
    pub centers: Vec<usize>,
    /// Number of frequency rows.
    pub n_f: usize,
}

impl LatticeGeometry {
    pub fn n_t(&self) -> usize {
        self.centers.len()
    }

    pub fn frequency(&self, row: usize) -> f64 {
        row as f64 * self.df
    }

    pub fn time(&self, col: usize) -> f64 {
        self.centers[col] as f64
    }

    /// The last row sits exactly on the Nyquist frequency.
    pub fn has_nyquist_row(&self) -> bool {
        ((self.n_f - 1) as f64 * self.df - 0.5).abs() < 1e-12
    }

    /// Rows whose point estimate variance carries the `(1 + δ_{f,0})` doubling
    /// (zero frequency and, when present, Nyquist).
    pub fn doubled_row(&self, row: usize) -> bool {
        row == 0 || (row + 1 == self.n_f && self.has_nyquist_row())
    }

    /// Build the geometry for a series of `n_data` samples.
    pub fn new(n_data: usize, family: TaperFamily, taper_len: usize, p_t: f64, p_f: f64) -> Result<Self> {
        if !(p_t > 0.0 && p_t <= 1.0) {
            return Err(Error::invalid("p_t", format!("must lie in (0,1], got {p_t}")));
        }
        if !(p_f > 0.0 && p_f <= 1.0) {
            return Err(Error::invalid("p_f", format!("must lie in (0,1], got {p_f}")));
        }
        if n_data < taper_len {
            return Err(Error::SeriesTooShort {
                len: n_data,
                min: taper_len,
            });
        }
        let n = taper_len as f64;
        let dt = n * p_t;
        let df = p_f / n;
        let half = (taper_len - 1) / 2;
        let centers: Vec<usize> = (0..)
            .map(|j: usize| half + (j as f64 * dt).round() as usize)
            .take_while(|&c| c + half < n_data)
            .collect();
        let n_f = (0.5 / df + 1e-9).floor() as usize + 1;
        Ok(LatticeGeometry {
            df,
            dt,
            p_f,
            p_t,
            taper_family: family,
            taper_len,
            centers,
            n_f,
        })
    }
}

/// Complex windowed transforms `y_ν(mδf, t_j)`, `N_f × N_t`.
#[derive(Debug, Clone)]
pub struct TFLattice<T> {
    pub values: Array2<Complex<T>>,
    pub geometry: LatticeGeometry,
    pub taper: Taper<T>,
}

impl<T: Real> TFLattice<T> {
    pub fn dims(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Point spectral estimates `|y|²`.
    pub fn power(&self) -> Array2<T> {
        self.values.mapv(|z| z.norm_sqr())
    }
}

/// `y_ν(f,t) = Σ_k x_{t+k} ν_k e^{−2πif(t+k)}`, `k ∈ [−(N−1)/2, (N−1)/2]`,
/// evaluated on the lattice. Every window lies inside the data.
pub fn windowed_transform<T: Real>(
    x: &TimeSeries<T>,
    taper: &Taper<T>,
    p_t: f64,
    p_f: f64,
) -> Result<TFLattice<T>> {
    let geometry = LatticeGeometry::new(x.len(), taper.family(), taper.len(), p_t, p_f)?;
    let half = taper.half_length();
    let (n_f, n_t) = (geometry.n_f, geometry.n_t());
    let data = x.samples();
    let df = geometry.df;

    let columns: Vec<Vec<Complex<T>>> = geometry
        .centers
        .par_iter()
        .map(|&c| {
            let start = c - half;
            let seg: Vec<f64> = taper
                .coeffs()
                .iter()
                .zip(&data[start..start + taper.len()])
                .map(|(&v, &xv)| (v * xv).as_f64())
                .collect();
            (0..n_f)
                .map(|m| {
                    let f = m as f64 * df;
                    // phase of the first sample, then a fixed rotation per sample
                    let mut rot = Complex::from_polar(1.0, -2.0 * PI * ((f * start as f64) % 1.0));
                    let step = Complex::from_polar(1.0, -2.0 * PI * f);
                    let mut acc = Complex::new(0.0, 0.0);
                    for &s in &seg {
                        acc += rot * s;
                        rot *= step;
                    }
                    Complex::new(T::lit(acc.re), T::lit(acc.im))
                })
                .collect()
        })
        .collect();

    let mut values = Array2::from_elem((n_f, n_t), Complex::new(T::zero(), T::zero()));
    for (j, col) in columns.into_iter().enumerate() {
        for (m, v) in col.into_iter().enumerate() {
            values[[m, j]] = v;
        }
    }
    Ok(TFLattice {
        values,
        geometry,
        taper: taper.clone(),
    })
}

/// Log-spectral field `θ̂(f,t)` on a lattice.
#[derive(Debug, Clone)]
pub struct LogSpectralField<T> {
    pub theta: Array2<T>,
    pub bias_corrected: bool,
    /// `ψ′(1)`: variance of each point estimate.
    pub variance_const: T,
    /// Cells where `|y|² = 0` was floored.
    pub degenerate: Vec<(usize, usize)>,
    pub geometry: LatticeGeometry,
}

impl<T: Real> LogSpectralField<T> {
    pub fn from_values(theta: Array2<T>, geometry: LatticeGeometry, bias_corrected: bool) -> Result<Self> {
        if theta.dim() != (geometry.n_f, geometry.n_t()) {
            return Err(Error::DimensionMismatch(format!(
                "field {:?} vs geometry ({}, {})",
                theta.dim(),
                geometry.n_f,
                geometry.n_t()
            )));
        }
        Ok(LogSpectralField {
            theta,
            bias_corrected,
            variance_const: T::lit(TRIGAMMA_ONE),
            degenerate: Vec::new(),
            geometry,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.theta.dim()
    }

    pub fn with_theta(&self, theta: Array2<T>) -> Self {
        LogSpectralField {
            theta,
            bias_corrected: self.bias_corrected,
            variance_const: self.variance_const,
            degenerate: Vec::new(),
            geometry: self.geometry.clone(),
        }
    }
}

/// Uncorrected `ln|y|²`; zero cells are floored at `ln ε` and reported.
pub fn raw_log_periodogram<T: Real>(lattice: &TFLattice<T>) -> (Array2<T>, Vec<(usize, usize)>) {
    let floor = T::epsilon().ln();
    let mut degenerate = Vec::new();
    let mut theta = Array2::zeros(lattice.dims());
    for ((m, j), z) in lattice.values.indexed_iter() {
        let p = z.norm_sqr();
        theta[[m, j]] = if p > T::zero() {
            p.ln()
        } else {
            degenerate.push((m, j));
            floor
        };
    }
    (theta, degenerate)
}

/// Bias-corrected log point estimate `θ̂ = ln|y|² + 0.5772`.
pub fn log_point_estimate<T: Real>(lattice: &TFLattice<T>) -> LogSpectralField<T> {
    let (raw, degenerate) = raw_log_periodogram(lattice);
    let gamma = T::lit(EULER_GAMMA);
    LogSpectralField {
        theta: raw.mapv(|v| v + gamma),
        bias_corrected: true,
        variance_const: T::lit(TRIGAMMA_ONE),
        degenerate,
        geometry: lattice.geometry.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovarianceKind {
    /// `ψ′(1)·I`.
    Diagonal,
    /// `ψ′(1)·|∫V(f₁−f′)V̄(f₂−f′)e^{2πif′(t₁−t₂)}df′|²` over lattice offsets.
    Windowed,
}

impl FromStr for CovarianceKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diagonal" => Ok(CovarianceKind::Diagonal),
            "windowed" => Ok(CovarianceKind::Windowed),
            other => Err(Error::invalid("covariance", format!("unknown kind `{other}`"))),
        }
    }
}

/// Stationary covariance of `θ̂` between cells separated by `(Δk, Δj)`.
#[derive(Debug, Clone)]
pub struct CovarianceModel<T> {
    pub kind: CovarianceKind,
    /// Indexed `[Δk + max_df, Δj + max_dt]`.
    table: Array2<T>,
    max_df: usize,
    max_dt: usize,
    pub variance_const: T,
}

impl<T: Real> CovarianceModel<T> {
    pub fn diagonal(variance_const: T) -> Self {
        CovarianceModel {
            kind: CovarianceKind::Diagonal,
            table: Array2::from_elem((1, 1), variance_const),
            max_df: 0,
            max_dt: 0,
            variance_const,
        }
    }

    /// Covariance at lattice offset; zero outside the tabulated range.
    pub fn at(&self, dk: isize, dj: isize) -> T {
        let (a, b) = (dk.unsigned_abs(), dj.unsigned_abs());
        if a > self.max_df || b > self.max_dt {
            return T::zero();
        }
        self.table[[(dk + self.max_df as isize) as usize, (dj + self.max_dt as isize) as usize]]
    }

    /// Largest tabulated offsets `(Δk, Δj)`.
    pub fn extent(&self) -> (usize, usize) {
        (self.max_df, self.max_dt)
    }

    /// Windowed model tabulated from the taper autocorrelation: for a time lag
    /// `L` samples and frequency offset `Δf`,
    /// `|∫V(f₁−f′)V̄(f₂−f′)e^{2πif′L}df′| = |Σ_i ν_i ν_{i+L} e^{−2πiiΔf}|`.
    pub fn windowed(taper: &Taper<T>, geometry: &LatticeGeometry, variance_const: T) -> Self {
        let nu: Vec<f64> = taper.coeffs().iter().map(|v| v.as_f64()).collect();
        let n = nu.len();
        let max_dt = ((n as f64 - 1.0) / geometry.dt).floor() as usize;
        let max_df = geometry.n_f.saturating_sub(1);
        let mut table = Array2::zeros((2 * max_df + 1, 2 * max_dt + 1));
        for dj in -(max_dt as isize)..=max_dt as isize {
            let lag = (dj.unsigned_abs() as f64 * geometry.dt).round() as usize;
            for dk in -(max_df as isize)..=max_df as isize {
                let rho = if lag >= n {
                    0.0
                } else {
                    let fr = dk as f64 * geometry.df;
                    let mut acc = Complex::new(0.0, 0.0);
                    for i in 0..n - lag {
                        acc += Complex::from_polar(nu[i] * nu[i + lag], -2.0 * PI * i as f64 * fr);
                    }
                    acc.norm_sqr()
                };
                table[[(dk + max_df as isize) as usize, (dj + max_dt as isize) as usize]] =
                    variance_const * T::lit(rho);
            }
        }
        CovarianceModel {
            kind: CovarianceKind::Windowed,
            table,
            max_df,
            max_dt,
            variance_const,
        }
    }
}

pub fn covariance_model<T: Real>(lattice: &TFLattice<T>, kind: CovarianceKind) -> CovarianceModel<T> {
    let c = T::lit(TRIGAMMA_ONE);
    match kind {
        CovarianceKind::Diagonal => CovarianceModel::diagonal(c),
        CovarianceKind::Windowed => CovarianceModel::windowed(&lattice.taper, &lattice.geometry, c),
    }
}
