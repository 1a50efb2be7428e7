//! Crossproduct kernel smoothing of lattice fields, with edge kernels at the
//! data boundaries and even reflection across `f = 0`.

use std::collections::HashMap;
use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::{edge_kernel, Kernel1D, KernelCache, KernelMoments, KernelShape};
use crate::lattice::{CovarianceModel, LogSpectralField};
use crate::loss::DerivativeBundle;
use crate::scalar::Real;

/// Treatment of the frequency axis at `f = 0` (and at Nyquist when the top
/// row sits exactly on `1/2`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FreqBoundary {
    /// Extend the field evenly, `θ(−f) = θ(f)`.
    #[default]
    Reflect,
    /// Moment-resolved edge kernels, as at every other boundary.
    Truncate,
}

impl FromStr for FreqBoundary {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reflect" => Ok(FreqBoundary::Reflect),
            "truncate" => Ok(FreqBoundary::Truncate),
            other => Err(Error::invalid("freq_boundary", format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Time,
    Freq,
}

/// Time kernel, frequency kernel and their normalized halfwidths
/// `h_t = H_T·δt/τ`, `h_f = H_F·δf/λ_F`.
#[derive(Debug, Clone)]
pub struct SmootherSpec<T> {
    pub time_kernel: Kernel1D<T>,
    pub freq_kernel: Kernel1D<T>,
    pub h_t: T,
    pub h_f: T,
    pub freq_boundary: FreqBoundary,
}

impl<T: Real> SmootherSpec<T> {
    /// Halfwidths normalized by the lattice spacings and scalelengths.
    pub fn new(
        time_kernel: Kernel1D<T>,
        freq_kernel: Kernel1D<T>,
        dt: f64,
        df: f64,
        tau: f64,
        lambda_f: f64,
    ) -> Result<Self> {
        if time_kernel.q > 0 && freq_kernel.q > 0 {
            return Err(Error::invalid(
                "kernels",
                "at most one axis may carry a derivative order".to_string(),
            ));
        }
        let h_t = T::lit(time_kernel.halfwidth.as_f64() * dt / tau);
        let h_f = T::lit(freq_kernel.halfwidth.as_f64() * df / lambda_f);
        Ok(SmootherSpec {
            time_kernel,
            freq_kernel,
            h_t,
            h_f,
            freq_boundary: FreqBoundary::Reflect,
        })
    }

    pub fn with_freq_boundary(mut self, b: FreqBoundary) -> Self {
        self.freq_boundary = b;
        self
    }
}

/// Weights actually applied at one output position: `w[i]` multiplies the
/// input at index `start + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisWeights<T> {
    pub start: usize,
    pub weights: Vec<T>,
}

impl<T: Real> AxisWeights<T> {
    pub fn apply(&self, f: impl Fn(usize) -> T) -> T {
        self.weights
            .iter()
            .enumerate()
            .map(|(i, &w)| w * f(self.start + i))
            .sum()
    }

    /// `a(d) = Σ_i w_i w_{i+d}` for `d = 0..len`.
    pub fn autocorrelation(&self) -> Vec<T> {
        let n = self.weights.len();
        (0..n)
            .map(|d| (0..n - d).map(|i| self.weights[i] * self.weights[i + d]).sum())
            .collect()
    }

    pub fn sum_sq(&self) -> T {
        self.weights.iter().map(|&w| w * w).sum()
    }
}

/// Cuts `(left, right)` of an index-bound-`m` support at position `i` of an
/// axis of length `n`, given which ends reflect.
fn cuts(i: usize, n: usize, m: usize, reflect_low: bool, reflect_high: bool) -> (usize, usize) {
    let mut left = m.saturating_sub(i);
    let mut right = (i + m).saturating_sub(n - 1);
    // a reflected index must land back inside the axis
    if reflect_low && m <= i + (n - 1) {
        left = 0;
    }
    if reflect_high && i + m <= 2 * (n - 1) {
        right = 0;
    }
    (left, right)
}

/// Fold kernel offsets `lo..` at position `i` into actual indices.
fn fold<T: Real>(coeffs: &[T], lo: isize, i: usize, n: usize) -> AxisWeights<T> {
    let last = (n - 1) as isize;
    let mut dense: HashMap<usize, T> = HashMap::new();
    for (k, &c) in coeffs.iter().enumerate() {
        let mut idx = i as isize + lo + k as isize;
        if idx < 0 {
            idx = -idx;
        }
        if idx > last {
            idx = 2 * last - idx;
        }
        let e = dense.entry(idx as usize).or_insert(T::zero());
        *e = *e + c;
    }
    let start = *dense.keys().min().expect("non-empty kernel");
    let end = *dense.keys().max().expect("non-empty kernel");
    let mut weights = vec![T::zero(); end - start + 1];
    for (idx, c) in dense {
        weights[idx - start] = c;
    }
    AxisWeights { start, weights }
}

/// Effective weights of `kernel` at every position of an axis of length `n`.
pub fn axis_weights<T: Real>(
    kernel: &Kernel1D<T>,
    n: usize,
    reflect_low: bool,
    reflect_high: bool,
) -> Result<Vec<AxisWeights<T>>> {
    if n == 0 {
        return Err(Error::invalid("axis", "empty axis".to_string()));
    }
    let m = kernel.index_bound;
    let mut edges: HashMap<(usize, usize), Kernel1D<T>> = HashMap::new();
    (0..n)
        .map(|i| {
            let (l, r) = if kernel.lo() == -(m as isize) && kernel.hi() == m as isize {
                cuts(i, n, m, reflect_low, reflect_high)
            } else {
                (0, 0)
            };
            if l == 0 && r == 0 {
                return Ok(fold(kernel.coeffs(), kernel.lo(), i, n));
            }
            if !edges.contains_key(&(l, r)) {
                edges.insert((l, r), edge_kernel(kernel, l, r)?);
            }
            let k = &edges[&(l, r)];
            Ok(fold(k.coeffs(), k.lo(), i, n))
        })
        .collect()
}

fn reflect_flags<T: Real>(field: &LogSpectralField<T>, mode: FreqBoundary) -> (bool, bool) {
    match mode {
        FreqBoundary::Reflect => (true, field.geometry.has_nyquist_row()),
        FreqBoundary::Truncate => (false, false),
    }
}

/// `Σ_k Σ_j μ_{F,k} μ_{T,j} θ(f+kδf, t+jδt)` with boundary substitution.
fn crossproduct<T: Real>(theta: &Array2<T>, wf: &[AxisWeights<T>], wt: &[AxisWeights<T>]) -> Array2<T> {
    let (nf, nt) = theta.dim();
    // time pass, row by row
    let rows: Vec<Vec<T>> = (0..nf)
        .into_par_iter()
        .map(|k| (0..nt).map(|j| wt[j].apply(|b| theta[[k, b]])).collect())
        .collect();
    let cols: Vec<Vec<T>> = (0..nt)
        .into_par_iter()
        .map(|j| (0..nf).map(|k| wf[k].apply(|a| rows[a][j])).collect())
        .collect();
    Array2::from_shape_fn((nf, nt), |(k, j)| cols[j][k])
}

fn check_fit<T: Real>(field: &LogSpectralField<T>, spec: &SmootherSpec<T>) -> Result<()> {
    let (nf, nt) = field.dims();
    let (mf, mt) = (spec.freq_kernel.index_bound, spec.time_kernel.index_bound);
    if nt < mt + 1 || nf < mf + 1 || nt < spec.time_kernel.p || nf < spec.freq_kernel.p {
        return Err(Error::DimensionMismatch(format!(
            "field {nf}x{nt} too small for kernel bounds (M_F={mf}, M_T={mt})"
        )));
    }
    Ok(())
}

/// Smoothed log-spectrum `θ̂_μ` with `(0,p)×(0,p)` kernels.
pub fn smooth<T: Real>(field: &LogSpectralField<T>, spec: &SmootherSpec<T>) -> Result<LogSpectralField<T>> {
    if spec.time_kernel.q != 0 || spec.freq_kernel.q != 0 {
        return Err(Error::invalid(
            "spec",
            "smooth() takes (0,p) kernels; use smooth_derivative for q > 0".to_string(),
        ));
    }
    check_fit(field, spec)?;
    let (nf, nt) = field.dims();
    let (lo, hi) = reflect_flags(field, spec.freq_boundary);
    let wt = axis_weights(&spec.time_kernel, nt, false, false)?;
    let wf = axis_weights(&spec.freq_kernel, nf, lo, hi)?;
    Ok(field.with_theta(crossproduct(&field.theta, &wf, &wt)))
}

/// Estimate of `∂^q θ` along `axis`, in unnormalized units (per sample or per
/// cycle/sample): the kernel sum divided by `(H·δ)^q`.
pub fn smooth_derivative<T: Real>(
    field: &LogSpectralField<T>,
    axis: Axis,
    q: usize,
    spec: &SmootherSpec<T>,
) -> Result<Array2<T>> {
    let (along, other) = match axis {
        Axis::Time => (&spec.time_kernel, &spec.freq_kernel),
        Axis::Freq => (&spec.freq_kernel, &spec.time_kernel),
    };
    if along.q != q || other.q != 0 {
        return Err(Error::invalid(
            "axis",
            format!(
                "derivative order {q} on {axis:?} needs kernels ({q},·) along and (0,·) across, got ({},·) and ({},·)",
                along.q, other.q
            ),
        ));
    }
    check_fit(field, spec)?;
    let (nf, nt) = field.dims();
    let (lo, hi) = reflect_flags(field, spec.freq_boundary);
    let wt = axis_weights(&spec.time_kernel, nt, false, false)?;
    let wf = axis_weights(&spec.freq_kernel, nf, lo, hi)?;
    let raw = crossproduct(&field.theta, &wf, &wt);
    let delta = match axis {
        Axis::Time => field.geometry.dt,
        Axis::Freq => field.geometry.df,
    };
    let scale = T::lit((along.halfwidth.as_f64() * delta).powi(q as i32));
    Ok(raw.mapv(|v| v / scale))
}

/// Variance of a crossproduct smoother under a stationary covariance model,
/// `Σ_{k,k′,j,j′} w^F_k w^T_j R(k−k′, j−j′) w^F_{k′} w^T_{j′}`.
pub fn weighted_variance<T: Real>(wf: &AxisWeights<T>, wt: &AxisWeights<T>, cov: &CovarianceModel<T>) -> T {
    let af = wf.autocorrelation();
    let at = wt.autocorrelation();
    let (ef, et) = cov.extent();
    let mut total = T::zero();
    for (dk, &a) in af.iter().enumerate().take(ef + 1) {
        for (dj, &b) in at.iter().enumerate().take(et + 1) {
            let (dk, dj) = (dk as isize, dj as isize);
            // autocorrelations are even; sum the four sign combinations once each
            let r = match (dk, dj) {
                (0, 0) => cov.at(0, 0),
                (0, _) => cov.at(0, dj) + cov.at(0, -dj),
                (_, 0) => cov.at(dk, 0) + cov.at(-dk, 0),
                _ => cov.at(dk, dj) + cov.at(dk, -dj) + cov.at(-dk, dj) + cov.at(-dk, -dj),
            };
            total = total + a * b * r;
        }
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmootherVariance<T> {
    /// Variance of the estimate in normalized derivative units.
    pub variance: T,
    /// `ρ = variance·h_F^{2q_F+1}·h_T^{2q_T+1}`.
    pub rho: T,
}

/// Interior variance of the smoothed estimate.
pub fn smoother_variance<T: Real>(spec: &SmootherSpec<T>, cov: &CovarianceModel<T>) -> SmootherVariance<T> {
    let as_weights = |k: &Kernel1D<T>| AxisWeights {
        start: 0,
        weights: k.coeffs().to_vec(),
    };
    let raw = weighted_variance(&as_weights(&spec.freq_kernel), &as_weights(&spec.time_kernel), cov);
    let (qt, qf) = (spec.time_kernel.q as i32, spec.freq_kernel.q as i32);
    let variance = raw / (spec.h_t.powi(2 * qt) * spec.h_f.powi(2 * qf));
    let rho = variance * spec.h_f.powi(2 * qf + 1) * spec.h_t.powi(2 * qt + 1);
    SmootherVariance { variance, rho }
}

/// Leading and next-order bias of the smoothed estimate: the six-term
/// expansion in the kernel moments, with the point-estimate bias (already
/// differentiated to the estimated order) added as given.
pub fn smoother_bias<T: Real>(spec: &SmootherSpec<T>, derivs: &DerivativeBundle, point_bias: f64) -> f64 {
    let (kt, kf) = (&spec.time_kernel, &spec.freq_kernel);
    let (mt, mf): (KernelMoments<T>, KernelMoments<T>) = (kt.moments(), kf.moments());
    let (ht, hf) = (spec.h_t.as_f64(), spec.h_f.as_f64());
    let (qt, qf) = (kt.q as i32, kf.q as i32);
    let (pt, pf) = (kt.p as i32, kf.p as i32);
    let denom = ht.powi(qt) * hf.powi(qf);
    let (ct, cf) = (mt.c_qp.as_f64(), mf.c_qp.as_f64());
    let (c2t, c2f) = (mt.c2_qp.as_f64(), mf.c2_qp.as_f64());
    let mut b = cf * derivs.dfp * hf.powi(pf) / denom + ct * derivs.dtp * ht.powi(pt) / denom + point_bias;
    if let Some(d) = derivs.dfp2 {
        b += c2f * d * hf.powi(pf + 2) / denom;
    }
    if let Some(d) = derivs.dtp2 {
        b += c2t * d * ht.powi(pt + 2) / denom;
    }
    if let Some(d) = derivs.mixed {
        b += ct * cf * d * hf.powi(pf) * ht.powi(pt) / denom;
    }
    b
}

/// Result of smoothing with a separate halfwidth at every cell.
#[derive(Debug, Clone)]
pub struct LocalSmoothing<T> {
    pub theta: Array2<T>,
    /// Variance of each smoothed value under the covariance model.
    pub variance: Array2<T>,
}

/// `(0,p)×(0,p)` smoothing where cell `(k,j)` uses index bounds
/// `m_f[[k,j]]`, `m_t[[k,j]]`.
#[allow(clippy::too_many_arguments)]
pub fn smooth_local<T: Real>(
    field: &LogSpectralField<T>,
    p: usize,
    shape: KernelShape,
    m_t: &Array2<usize>,
    m_f: &Array2<usize>,
    freq_boundary: FreqBoundary,
    cov: &CovarianceModel<T>,
    cache: &KernelCache,
) -> Result<LocalSmoothing<T>> {
    let (nf, nt) = field.dims();
    if m_t.dim() != (nf, nt) || m_f.dim() != (nf, nt) {
        return Err(Error::DimensionMismatch(format!(
            "halfwidth fields {:?}/{:?} vs field {:?}",
            m_t.dim(),
            m_f.dim(),
            (nf, nt)
        )));
    }
    let (lo, hi) = reflect_flags(field, freq_boundary);
    let weights = |i: usize, n: usize, m: usize, rl: bool, rh: bool| -> Result<AxisWeights<T>> {
        let m = m.min(n - 1).max(1);
        let (l, r) = cuts(i, n, m, rl, rh);
        let k = cache.get(0, p, m, l, r, shape)?;
        let c: Vec<T> = k.coeffs().iter().map(|&v| T::lit(v)).collect();
        Ok(fold(&c, k.lo(), i, n))
    };
    let cells: Vec<(T, T)> = (0..nf * nt)
        .into_par_iter()
        .map(|idx| {
            let (k, j) = (idx / nt, idx % nt);
            let wt = weights(j, nt, m_t[[k, j]], false, false)?;
            let wf = weights(k, nf, m_f[[k, j]], lo, hi)?;
            let v = wf.apply(|a| wt.apply(|b| field.theta[[a, b]]));
            Ok((v, weighted_variance(&wf, &wt, cov)))
        })
        .collect::<Result<_>>()?;
    Ok(LocalSmoothing {
        theta: Array2::from_shape_fn((nf, nt), |(k, j)| cells[k * nt + j].0),
        variance: Array2::from_shape_fn((nf, nt), |(k, j)| cells[k * nt + j].1),
    })
}
