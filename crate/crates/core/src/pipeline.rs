//! Multi-stage estimation: initial halfwidths, pilot derivative estimates,
//! locally optimal halfwidths and the final smoothed log-spectrum.

use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::kernel::{default_index_bound, make_kernel, Kernel1D, KernelCache, KernelShape};
use crate::lattice::{covariance_model, log_point_estimate, windowed_transform, CovarianceKind, CovarianceModel, LogSpectralField};
use crate::loss::{integrated_halfwidth, optimal_halfwidth, DerivativeBundle, HalfwidthLimits, LossSolution, MomentPair};
use crate::signal::TimeSeries;
use crate::smooth::{axis_weights, smooth, smooth_derivative, smooth_local, smoother_variance, Axis, FreqBoundary, SmootherSpec};
use crate::stats;
use crate::taper::{optimal_taper_params, Taper, TaperFamily, TaperParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stages {
    /// Pilot `p`-th derivatives, then the final smooth.
    #[default]
    TwoStage,
    /// `(p+2)`-th derivatives first, which set the pilot halfwidths.
    ThreeStage,
}

impl FromStr for Stages {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_stage" => Ok(Stages::TwoStage),
            "three_stage" => Ok(Stages::ThreeStage),
            other => Err(Error::invalid("stages", format!("unknown value `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Init {
    /// High derivatives replaced by `θ̄` in normalized units.
    #[default]
    Scalelength,
    /// Rice criterion over a halfwidth grid, rescaled by the factor method.
    RiceFactor,
    /// Reserved; always rejected.
    Parametric,
}

impl FromStr for Init {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scalelength" => Ok(Init::Scalelength),
            "rice_factor" => Ok(Init::RiceFactor),
            "parametric" => Ok(Init::Parametric),
            other => Err(Error::invalid("init", format!("unknown value `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Order `p` of the final `(0,p)` kernels.
    pub final_order: usize,
    pub stages: Stages,
    pub init: Init,
    pub tau_prior: f64,
    pub lambda_f_prior: f64,
    pub theta_scale_prior: f64,
    /// Declared number of continuous derivatives `p̄`.
    pub smoothness_order: usize,
    pub reg_b: f64,
    pub p_t: f64,
    pub p_f: f64,
    pub taper_family: TaperFamily,
    /// Overrides the length chosen from the priors.
    pub taper_length: Option<usize>,
    pub kernel_shape: KernelShape,
    pub covariance: CovarianceKind,
    pub freq_boundary: FreqBoundary,
    /// Candidate `(h_t, h_f)` pairs; a logarithmic grid when absent.
    pub rice_grid: Option<Vec<(f64, f64)>>,
    pub rice_points: usize,
    pub h_min: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            final_order: 2,
            stages: Stages::TwoStage,
            init: Init::Scalelength,
            tau_prior: 200.0,
            lambda_f_prior: 0.05,
            theta_scale_prior: 1.0,
            smoothness_order: 8,
            reg_b: 0.1,
            p_t: 0.5,
            p_f: 0.5,
            taper_family: TaperFamily::Sine,
            taper_length: None,
            kernel_shape: KernelShape::MinimalNorm,
            covariance: CovarianceKind::Diagonal,
            freq_boundary: FreqBoundary::Reflect,
            rice_grid: None,
            rice_points: 12,
            h_min: 1e-3,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.final_order < 1 {
            return Err(Error::invalid("final_order", "must be at least 1".to_string()));
        }
        if self.final_order > self.smoothness_order {
            return Err(Error::invalid(
                "final_order",
                format!(
                    "p={} exceeds the declared smoothness order {}",
                    self.final_order, self.smoothness_order
                ),
            ));
        }
        for (name, v) in [
            ("tau_prior", self.tau_prior),
            ("lambda_f_prior", self.lambda_f_prior),
            ("theta_scale_prior", self.theta_scale_prior),
            ("h_min", self.h_min),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, format!("must be positive and finite, got {v}")));
            }
        }
        if !(self.reg_b > 0.0 && self.reg_b <= 1.0) {
            return Err(Error::invalid("reg_b", format!("must lie in (0,1], got {}", self.reg_b)));
        }
        if self.init == Init::Parametric {
            return Err(Error::invalid(
                "init",
                "parametric initialization is not available; use scalelength or rice_factor".to_string(),
            ));
        }
        if let Some(grid) = &self.rice_grid {
            if grid.is_empty() {
                return Err(Error::invalid("rice_grid", "empty grid".to_string()));
            }
            if let Some(bad) = grid.iter().find(|(a, b)| !(*a >= self.h_min && *b >= self.h_min)) {
                return Err(Error::invalid(
                    "rice_grid",
                    format!("pair {bad:?} below h_min = {}", self.h_min),
                ));
            }
        }
        if self.rice_points < 1 {
            return Err(Error::invalid("rice_points", "must be at least 1".to_string()));
        }
        Ok(())
    }
}

/// Log-spectral field plus everything needed to map normalized halfwidths to
/// kernels on it.
#[derive(Debug, Clone)]
pub struct Setup {
    pub taper: TaperParams,
    pub field: LogSpectralField<f64>,
    pub cov: CovarianceModel<f64>,
    /// Correlation-aware model used for the Rice center weight.
    pub rice_cov: CovarianceModel<f64>,
    pub tau: f64,
    pub lambda_f: f64,
    pub shape: KernelShape,
    pub freq_boundary: FreqBoundary,
    /// Whether the taper's point-estimate bias enters the loss field.
    pub point_bias: bool,
}

impl Setup {
    pub fn new(series: &TimeSeries<f64>, config: &PipelineConfig) -> Result<Self> {
        let mut taper_params = optimal_taper_params(
            config.tau_prior,
            config.lambda_f_prior,
            config.taper_family,
            config.theta_scale_prior,
        )?;
        if let Some(n) = config.taper_length {
            taper_params.length = n;
            taper_params.bandwidth = config.taper_family.bandwidth_constant() / n as f64;
        }
        let taper = Taper::<f64>::new(config.taper_family, taper_params.length)?.with_bandwidth(taper_params.bandwidth);
        let lattice = windowed_transform(series, &taper, config.p_t, config.p_f)?;
        let field = log_point_estimate(&lattice);
        let cov = covariance_model(&lattice, config.covariance);
        let rice_cov = match config.covariance {
            CovarianceKind::Windowed => cov.clone(),
            CovarianceKind::Diagonal => covariance_model(&lattice, CovarianceKind::Windowed),
        };
        Ok(Setup {
            taper: taper_params,
            field,
            cov,
            rice_cov,
            tau: config.tau_prior,
            lambda_f: config.lambda_f_prior,
            shape: config.kernel_shape,
            freq_boundary: config.freq_boundary,
            point_bias: true,
        })
    }

    /// Setup for an arbitrary field with its own covariance model. The taper
    /// point-estimate bias is left out.
    pub fn from_field(field: LogSpectralField<f64>, cov: CovarianceModel<f64>, taper: TaperParams, config: &PipelineConfig) -> Self {
        Setup {
            taper,
            field,
            rice_cov: cov.clone(),
            cov,
            tau: config.tau_prior,
            lambda_f: config.lambda_f_prior,
            shape: config.kernel_shape,
            freq_boundary: config.freq_boundary,
            point_bias: false,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.field.dims()
    }

    /// Lattice units per normalized halfwidth along `axis`.
    pub fn scale(&self, axis: Axis) -> f64 {
        match axis {
            Axis::Time => self.tau / self.field.geometry.dt,
            Axis::Freq => self.lambda_f / self.field.geometry.df,
        }
    }

    fn axis_len(&self, axis: Axis) -> usize {
        let (nf, nt) = self.dims();
        match axis {
            Axis::Time => nt,
            Axis::Freq => nf,
        }
    }

    /// Normalized halfwidth range whose kernels fit the axis.
    pub fn limits(&self, h_min: f64) -> HalfwidthLimits {
        let lim = |axis| {
            let s = self.scale(axis);
            let n = self.axis_len(axis) as f64;
            let lo = (1.0 / s).max(h_min);
            let hi = ((n - 1.0) / 2.0 / s).max(lo);
            (lo, hi)
        };
        HalfwidthLimits {
            h_t: lim(Axis::Time),
            h_f: lim(Axis::Freq),
        }
    }

    /// Per-cell kernel index bounds for normalized halfwidths `h`.
    pub fn index_bounds(&self, h: &Array2<f64>, axis: Axis, p: usize) -> Array2<usize> {
        let s = self.scale(axis);
        let n = self.axis_len(axis);
        h.mapv(|v| default_index_bound(v * s).clamp(p.saturating_sub(1).max(1), n.saturating_sub(1).max(1)))
    }

    /// Kernel of type `(q,p)` along `axis` with normalized halfwidth `h`.
    pub fn kernel(&self, axis: Axis, q: usize, p: usize, h: f64) -> Result<Kernel1D<f64>> {
        let n = self.axis_len(axis);
        let mut hw = (h * self.scale(axis)).max(0.5);
        let m_max = n.saturating_sub(1);
        let m_min = p.saturating_sub(1).max(1);
        if m_min > m_max {
            return Err(Error::SeriesTooShort {
                len: n,
                min: m_min + 1,
            });
        }
        let m = default_index_bound(hw).clamp(m_min, m_max);
        hw = hw.min(m as f64);
        make_kernel(q, p, hw, m, self.shape)
    }

    /// Crossproduct smoother with derivative order `q` along `axis`.
    pub fn smoother(&self, axis: Axis, q: usize, p: usize, h_t: f64, h_f: f64) -> Result<SmootherSpec<f64>> {
        let (qt, qf) = match axis {
            Axis::Time => (q, 0),
            Axis::Freq => (0, q),
        };
        let kt = self.kernel(Axis::Time, qt, p, h_t)?;
        let kf = self.kernel(Axis::Freq, qf, p, h_f)?;
        let g = &self.field.geometry;
        Ok(SmootherSpec::new(kt, kf, g.dt, g.df, self.tau, self.lambda_f)?.with_freq_boundary(self.freq_boundary))
    }

    /// `∂^q θ` along `axis` in normalized units.
    pub fn derivative(&self, axis: Axis, q: usize, p: usize, h_t: f64, h_f: f64) -> Result<Array2<f64>> {
        let spec = self.smoother(axis, q, p, h_t, h_f)?;
        let d = smooth_derivative(&self.field, axis, q, &spec)?;
        let unit = match axis {
            Axis::Time => self.tau,
            Axis::Freq => self.lambda_f,
        };
        let s = unit.powi(q as i32);
        Ok(d.mapv(|v| v * s))
    }

    /// Moments `(C(0,p) across, C(q,p) along)` and `ρ` of a smoother.
    fn moments_and_rho(&self, spec: &SmootherSpec<f64>, axis: Axis) -> (MomentPair, f64) {
        let (along, across) = match axis {
            Axis::Time => (&spec.time_kernel, &spec.freq_kernel),
            Axis::Freq => (&spec.freq_kernel, &spec.time_kernel),
        };
        let m = MomentPair::from_kernels(&across.moments(), &along.moments());
        (m, smoother_variance(spec, &self.cov).rho)
    }

    /// Globally optimal halfwidths for estimating `∂^q θ` along `axis` with
    /// order-`p` kernels, from integrated squared `p`-th derivatives
    /// `(I_along, I_across, I_cross)`. `ρ` and the moments are refreshed
    /// from the kernels at each iterate.
    pub fn global_halfwidth(
        &self,
        axis: Axis,
        q: usize,
        p: usize,
        integrals: (f64, f64, f64),
        reg_b: f64,
        h_min: f64,
    ) -> Result<(f64, f64, LossSolution)> {
        let limits = self.limits(h_min);
        let (i_along, i_across, i_cross) = integrals;
        let swap = |l: HalfwidthLimits| HalfwidthLimits { h_t: l.h_f, h_f: l.h_t };
        let lim = match axis {
            Axis::Time => limits,
            Axis::Freq => swap(limits),
        };
        let (mut h_t, mut h_f) = (
            (4.0 / self.scale(Axis::Time)).clamp(limits.h_t.0, limits.h_t.1),
            (4.0 / self.scale(Axis::Freq)).clamp(limits.h_f.0, limits.h_f.1),
        );
        let mut sol = None;
        for _ in 0..4 {
            let spec = self.smoother(axis, q, p, h_t, h_f)?;
            let (m, rho) = self.moments_and_rho(&spec, axis);
            let s = integrated_halfwidth(i_along, i_across, i_cross, q, p, &m, rho, reg_b, &lim)?;
            (h_t, h_f) = match axis {
                Axis::Time => (s.h_t, s.h_f),
                Axis::Freq => (s.h_f, s.h_t),
            };
            sol = Some(s);
        }
        Ok((h_t, h_f, sol.expect("at least one iteration")))
    }
}

/// Rice criterion `σ̂²/(1 − 2μ₀)`: mean squared residual between point
/// estimates and their smooth, inflated by the smoother's effective center
/// weight `μ₀ = Cov(θ̂_μ, θ̂)/Var(θ̂)` averaged over the lattice.
pub fn rice_criterion(field: &LogSpectralField<f64>, cov: &CovarianceModel<f64>, spec: &SmootherSpec<f64>) -> Result<f64> {
    let smoothed = smooth(field, spec)?;
    let n = field.theta.len() as f64;
    let sigma2 = smoothed
        .theta
        .iter()
        .zip(field.theta.iter())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / n;
    if sigma2 == 0.0 {
        return Ok(0.0);
    }
    let mu0 = center_weight(field, cov, spec)?;
    let denom = 1.0 - 2.0 * mu0;
    Ok(if denom > 0.0 { sigma2 / denom } else { f64::INFINITY })
}

/// Lattice average of `Σ_{a,b} w^F(a) w^T(b) R(a−k, b−j) / R(0,0)`.
pub fn center_weight(field: &LogSpectralField<f64>, cov: &CovarianceModel<f64>, spec: &SmootherSpec<f64>) -> Result<f64> {
    let (nf, nt) = field.dims();
    let reflect_high = spec.freq_boundary == FreqBoundary::Reflect && field.geometry.has_nyquist_row();
    let reflect_low = spec.freq_boundary == FreqBoundary::Reflect;
    let wt = axis_weights(&spec.time_kernel, nt, false, false)?;
    let wf = axis_weights(&spec.freq_kernel, nf, reflect_low, reflect_high)?;
    let r0 = cov.at(0, 0);
    let (ef, et) = cov.extent();
    let (ef, et) = (ef as isize, et as isize);
    let mut total = 0.0;
    for (j, w_t) in wt.iter().enumerate() {
        // v(da) = Σ_b w^T(b) R(da, b − j)
        let v: Vec<f64> = (-ef..=ef)
            .map(|da| {
                w_t.weights
                    .iter()
                    .enumerate()
                    .filter_map(|(i, &w)| {
                        let db = (w_t.start + i) as isize - j as isize;
                        (db.abs() <= et).then(|| w * cov.at(da, db))
                    })
                    .sum()
            })
            .collect();
        for (k, w_f) in wf.iter().enumerate() {
            let s: f64 = w_f
                .weights
                .iter()
                .enumerate()
                .filter_map(|(i, &w)| {
                    let da = (w_f.start + i) as isize - k as isize;
                    (da.abs() <= ef).then(|| w * v[(da + ef) as usize])
                })
                .sum();
            total += s / r0;
        }
    }
    Ok(total / (nf * nt) as f64)
}

/// Factor `H` of the factor method converting an optimal `(0,p)` halfwidth
/// into one for `(q,p)` derivative estimation:
/// `H = [((4pq+2p)·C(0,p)²·m₂(μ_{q,p})) / (2(p−q)·C(q,p)²·m₂(μ_{0,p}))]^{1/(2p+1)}`.
pub fn factor(kq: &Kernel1D<f64>, k0: &Kernel1D<f64>) -> Result<f64> {
    let (q, p) = (kq.q, kq.p);
    if k0.q != 0 || k0.p != p || p <= q {
        return Err(Error::invalid(
            "kernels",
            format!("need (q,p) and (0,p) kernels, got ({},{}) and ({},{})", q, p, k0.q, k0.p),
        ));
    }
    if q == 0 {
        return Ok(1.0);
    }
    let (pf, qf) = (p as f64, q as f64);
    let (mq, m0) = (kq.moments(), k0.moments());
    let num = (4.0 * pf * qf + 2.0 * pf) * m0.c_qp.powi(2) * mq.m2;
    let den = 2.0 * (pf - qf) * mq.c_qp.powi(2) * m0.m2;
    Ok((num / den).powf(1.0 / (2.0 * pf + 1.0)))
}

/// Factor-method halfwidth `H·ĥ_{0,p}`.
pub fn factor_method(h_hat: f64, kq: &Kernel1D<f64>, k0: &Kernel1D<f64>) -> Result<f64> {
    if !(h_hat > 0.0) {
        return Err(Error::invalid("h_hat", format!("must be positive, got {h_hat}")));
    }
    Ok(factor(kq, k0)? * h_hat)
}

/// Pilot halfwidths `(h_t, h_f)` from the scalelength ansatz, for kernels of
/// order `p` estimating the `q`-th derivative along `axis`. All order-`p`
/// normalized derivatives are taken to be `θ̄`.
pub fn scalelength_init(setup: &Setup, axis: Axis, q: usize, p: usize, theta_scale: f64, reg_b: f64, h_min: f64) -> Result<(f64, f64)> {
    if !(theta_scale > 0.0) {
        return Err(Error::invalid("theta_scale", format!("must be positive, got {theta_scale}")));
    }
    let t2 = theta_scale * theta_scale;
    let (h_t, h_f, _) = setup.global_halfwidth(axis, q, p, (t2, t2, t2), reg_b, h_min)?;
    Ok((h_t, h_f))
}

/// Logarithmic Rice grid: `points` values per axis from the smallest
/// admissible halfwidth to a quarter of the lattice extent.
pub fn default_rice_grid(setup: &Setup, points: usize, h_min: f64) -> Vec<(f64, f64)> {
    let lim = setup.limits(h_min);
    let (nf, nt) = setup.dims();
    let ext_t = (nt as f64 - 1.0) / setup.scale(Axis::Time) / 4.0;
    let ext_f = (nf as f64 - 1.0) / setup.scale(Axis::Freq) / 4.0;
    let axis = |lo: f64, hi: f64| -> Vec<f64> {
        let hi = hi.max(lo);
        (0..points)
            .map(|i| {
                if points == 1 {
                    lo
                } else {
                    lo * (hi / lo).powf(i as f64 / (points - 1) as f64)
                }
            })
            .collect()
    };
    let ts = axis(lim.h_t.0, ext_t);
    let fs = axis(lim.h_f.0, ext_f);
    ts.iter().flat_map(|&t| fs.iter().map(move |&f| (t, f))).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiceResult {
    pub h_t: f64,
    pub h_f: f64,
    /// `(h_t, h_f, C_R)` for every grid pair.
    pub table: Vec<(f64, f64, f64)>,
}

/// Minimize the Rice criterion over `grid` with `(0,p)×(0,p)` kernels.
pub fn rice_select(setup: &Setup, p: usize, grid: &[(f64, f64)]) -> Result<RiceResult> {
    let mut table = Vec::with_capacity(grid.len());
    for &(h_t, h_f) in grid {
        let spec = setup.smoother(Axis::Time, 0, p, h_t, h_f)?;
        table.push((h_t, h_f, rice_criterion(&setup.field, &setup.rice_cov, &spec)?));
    }
    let best = table
        .iter()
        .filter(|e| e.2.is_finite())
        .min_by(|a, b| a.2.total_cmp(&b.2))
        .ok_or_else(|| Error::Numerical("Rice criterion is infinite on the whole grid".to_string()))?;
    Ok(RiceResult {
        h_t: best.0,
        h_f: best.1,
        table,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HalfwidthField {
    pub h_t: Array2<f64>,
    pub h_f: Array2<f64>,
    pub regularized: Array2<bool>,
    pub clamped: Array2<bool>,
}

impl HalfwidthField {
    pub fn regularized_count(&self) -> usize {
        self.regularized.iter().filter(|&&b| b).count()
    }

    pub fn clamped_count(&self) -> usize {
        self.clamped.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuityCheck {
    /// Largest adjacent-cell jump of each pilot derivative field.
    pub max_jump_t: f64,
    pub max_jump_f: f64,
    pub iqr_t: f64,
    pub iqr_f: f64,
    pub discontinuous: bool,
}

/// Flags a field whose largest adjacent-cell jump exceeds 5× its IQR.
pub fn continuity_check(dtp: &Array2<f64>, dfp: &Array2<f64>) -> ContinuityCheck {
    let max_jump = |a: &Array2<f64>| -> f64 {
        let (n0, n1) = a.dim();
        let mut m: f64 = 0.0;
        for i in 0..n0 {
            for j in 0..n1 {
                if i + 1 < n0 {
                    m = m.max((a[[i + 1, j]] - a[[i, j]]).abs());
                }
                if j + 1 < n1 {
                    m = m.max((a[[i, j + 1]] - a[[i, j]]).abs());
                }
            }
        }
        m
    };
    let iqr = |a: &Array2<f64>| stats::iqr(a.as_slice().expect("standard layout"));
    let (jt, jf, it, iff) = (max_jump(dtp), max_jump(dfp), iqr(dtp), iqr(dfp));
    ContinuityCheck {
        max_jump_t: jt,
        max_jump_f: jf,
        iqr_t: it,
        iqr_f: iff,
        discontinuous: jt > 5.0 * it || jf > 5.0 * iff,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageInfo {
    pub name: String,
    pub seconds: f64,
    /// `(axis, h_t, h_f)` used by the stage's smoothers.
    pub halfwidths: Vec<(String, f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct Diagnostics {
    pub taper: TaperParams,
    pub final_order: usize,
    pub stages: Vec<StageInfo>,
    pub rice: Option<RiceResult>,
    pub continuity: ContinuityCheck,
    /// Halfwidths of a single globally optimal smooth, for reference.
    pub global_h: (f64, f64),
    pub rho: f64,
    pub mean_point_bias: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct EstimateReport {
    /// Point estimates `θ̂_ν`.
    pub point: LogSpectralField<f64>,
    pub theta_hat: LogSpectralField<f64>,
    pub s_hat: Array2<f64>,
    /// `∂_t̄^pθ` and `∂_f̄^pθ` plug-ins.
    pub dtp: Array2<f64>,
    pub dfp: Array2<f64>,
    pub halfwidths: HalfwidthField,
    pub expected_loss: Array2<f64>,
    /// Two standard deviations of `θ̂_μ`.
    pub confidence_halfwidth: Array2<f64>,
    pub s_lower: Array2<f64>,
    pub s_upper: Array2<f64>,
    pub point_bias: Array2<f64>,
    pub diagnostics: Diagnostics,
}

impl EstimateReport {
    /// Mean expected loss over the lattice, used to compare schemes.
    pub fn mean_expected_loss(&self) -> f64 {
        stats::mean(self.expected_loss.as_slice().expect("standard layout"))
    }
}

fn mean_sq(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>() / a.len() as f64
}

/// Pilot halfwidths `[(h_t, h_f) for ∂_t, (h_t, h_f) for ∂_f]` for
/// estimating `q`-th derivatives with order-`p` kernels.
fn initial_halfwidths(setup: &Setup, config: &PipelineConfig, q: usize, p: usize) -> Result<([(f64, f64); 2], Option<RiceResult>)> {
    match config.init {
        Init::Scalelength => {
            let t = scalelength_init(setup, Axis::Time, q, p, config.theta_scale_prior, config.reg_b, config.h_min)?;
            let f = scalelength_init(setup, Axis::Freq, q, p, config.theta_scale_prior, config.reg_b, config.h_min)?;
            Ok(([t, f], None))
        }
        Init::RiceFactor => {
            let grid = match &config.rice_grid {
                Some(g) => g.clone(),
                None => default_rice_grid(setup, config.rice_points, config.h_min),
            };
            let rice = rice_select(setup, p, &grid)?;
            let (h_t0, h_f0) = (rice.h_t, rice.h_f);
            let lim = setup.limits(config.h_min);
            let kt_q = setup.kernel(Axis::Time, q, p, h_t0)?;
            let kt_0 = setup.kernel(Axis::Time, 0, p, h_t0)?;
            let kf_q = setup.kernel(Axis::Freq, q, p, h_f0)?;
            let kf_0 = setup.kernel(Axis::Freq, 0, p, h_f0)?;
            let ht = factor_method(h_t0, &kt_q, &kt_0)?.clamp(lim.h_t.0, lim.h_t.1);
            let hf = factor_method(h_f0, &kf_q, &kf_0)?.clamp(lim.h_f.0, lim.h_f.1);
            Ok(([(ht, h_f0), (h_t0, hf)], Some(rice)))
        }
        Init::Parametric => Err(Error::invalid(
            "init",
            "parametric initialization is not available".to_string(),
        )),
    }
}

/// Where the final stage takes its `p`-th derivative plug-ins from.
#[derive(Debug, Clone)]
pub enum PlugIn {
    Estimated,
    /// Normalized `(∂_t̄^pθ, ∂_f̄^pθ)` supplied on the lattice.
    Supplied(Array2<f64>, Array2<f64>),
}

/// Run the estimator on `series`.
pub fn run_pipeline(series: &TimeSeries<f64>, config: &PipelineConfig) -> Result<EstimateReport> {
    run_pipeline_with(series, config, PlugIn::Estimated)
}

pub fn run_pipeline_with(series: &TimeSeries<f64>, config: &PipelineConfig, plug_in: PlugIn) -> Result<EstimateReport> {
    config.validate()?;
    let t0 = Instant::now();
    let setup = Setup::new(series, config).map_err(|e| e.in_stage("lattice"))?;
    let lattice = StageInfo {
        name: "lattice".to_string(),
        seconds: t0.elapsed().as_secs_f64(),
        halfwidths: Vec::new(),
    };
    let mut report = estimate_field(&setup, config, plug_in)?;
    report.diagnostics.stages.insert(0, lattice);
    if setup.taper.clamped {
        report.diagnostics.warnings.insert(
            0,
            format!(
                "tau/lambda_f = {:.3} < 9: taper length clamped to 3",
                config.tau_prior / config.lambda_f_prior
            ),
        );
    }
    Ok(report)
}

/// Pilot, halfwidth and final stages on an already prepared field.
pub fn estimate_field(setup: &Setup, config: &PipelineConfig, plug_in: PlugIn) -> Result<EstimateReport> {
    config.validate()?;
    let mut stages = Vec::new();
    let mut warnings = Vec::new();
    let mut p = config.final_order;
    loop {
        let report = estimate_with_order(setup, config, p, &plug_in, &mut stages, &mut warnings)?;
        if report.diagnostics.continuity.discontinuous && p > 2 && matches!(plug_in, PlugIn::Estimated) {
            warnings.push(format!(
                "pilot derivatives of order {p} look discontinuous; retrying with p = {}",
                p - 2
            ));
            p -= 2;
            continue;
        }
        if report.diagnostics.continuity.discontinuous {
            warnings.push(format!("pilot derivatives of order {p} look discontinuous"));
        }
        let mut report = report;
        report.diagnostics.stages = stages;
        report.diagnostics.warnings = warnings;
        return Ok(report);
    }
}

fn estimate_with_order(
    setup: &Setup,
    config: &PipelineConfig,
    p: usize,
    plug_in: &PlugIn,
    stages: &mut Vec<StageInfo>,
    warnings: &mut Vec<String>,
) -> Result<EstimateReport> {
    let (nf, nt) = setup.dims();
    let pilot_order = p + 2;
    let mut rice = None;

    let (dtp, dfp) = match plug_in {
        PlugIn::Supplied(a, b) => {
            if a.dim() != (nf, nt) || b.dim() != (nf, nt) {
                return Err(Error::DimensionMismatch(format!(
                    "supplied derivative fields {:?}/{:?} vs lattice {:?}",
                    a.dim(),
                    b.dim(),
                    (nf, nt)
                )));
            }
            (a.clone(), b.clone())
        }
        PlugIn::Estimated => {
            let pilot = match config.stages {
                Stages::TwoStage => {
                    let t = Instant::now();
                    let (h, r) = initial_halfwidths(setup, config, p, pilot_order).map_err(|e| e.in_stage("init"))?;
                    rice = r;
                    stages.push(StageInfo {
                        name: "init".to_string(),
                        seconds: t.elapsed().as_secs_f64(),
                        halfwidths: vec![("time".into(), h[0].0, h[0].1), ("freq".into(), h[1].0, h[1].1)],
                    });
                    h
                }
                Stages::ThreeStage => {
                    let t = Instant::now();
                    let hi = p + 2;
                    let (h, r) = initial_halfwidths(setup, config, hi, hi + 2).map_err(|e| e.in_stage("init"))?;
                    rice = r;
                    stages.push(StageInfo {
                        name: "init".to_string(),
                        seconds: t.elapsed().as_secs_f64(),
                        halfwidths: vec![("time".into(), h[0].0, h[0].1), ("freq".into(), h[1].0, h[1].1)],
                    });
                    let t = Instant::now();
                    let d_t = setup
                        .derivative(Axis::Time, hi, hi + 2, h[0].0, h[0].1)
                        .map_err(|e| e.in_stage("stage1"))?;
                    let d_f = setup
                        .derivative(Axis::Freq, hi, hi + 2, h[1].0, h[1].1)
                        .map_err(|e| e.in_stage("stage1"))?;
                    let (itt, iff, ift) = (mean_sq(&d_t, &d_t), mean_sq(&d_f, &d_f), mean_sq(&d_t, &d_f));
                    let (a, b, _) = setup
                        .global_halfwidth(Axis::Time, p, pilot_order, (itt, iff, ift), config.reg_b, config.h_min)
                        .map_err(|e| e.in_stage("stage1"))?;
                    let (c, d, _) = setup
                        .global_halfwidth(Axis::Freq, p, pilot_order, (iff, itt, ift), config.reg_b, config.h_min)
                        .map_err(|e| e.in_stage("stage1"))?;
                    stages.push(StageInfo {
                        name: "stage1".to_string(),
                        seconds: t.elapsed().as_secs_f64(),
                        halfwidths: vec![("time".into(), a, b), ("freq".into(), c, d)],
                    });
                    [(a, b), (c, d)]
                }
            };
            let t = Instant::now();
            let dtp = setup
                .derivative(Axis::Time, p, pilot_order, pilot[0].0, pilot[0].1)
                .map_err(|e| e.in_stage("pilot"))?;
            let dfp = setup
                .derivative(Axis::Freq, p, pilot_order, pilot[1].0, pilot[1].1)
                .map_err(|e| e.in_stage("pilot"))?;
            stages.push(StageInfo {
                name: "pilot".to_string(),
                seconds: t.elapsed().as_secs_f64(),
                halfwidths: vec![
                    ("time".into(), pilot[0].0, pilot[0].1),
                    ("freq".into(), pilot[1].0, pilot[1].1),
                ],
            });
            (dtp, dfp)
        }
    };

    let t = Instant::now();
    let continuity = continuity_check(&dtp, &dfp);
    // global reference smooth: sets the moments and ρ used at every cell
    let integrals = (mean_sq(&dtp, &dtp), mean_sq(&dfp, &dfp), mean_sq(&dtp, &dfp));
    let (gh_t, gh_f, _) = setup
        .global_halfwidth(Axis::Time, 0, p, integrals, config.reg_b, config.h_min)
        .map_err(|e| e.in_stage("final"))?;
    let reference = setup.smoother(Axis::Time, 0, p, gh_t, gh_f)?;
    let moments = MomentPair::from_kernels(&reference.freq_kernel.moments(), &reference.time_kernel.moments());
    let rho = smoother_variance(&reference, &setup.cov).rho;
    let limits = setup.limits(config.h_min);

    let mut h_t = Array2::zeros((nf, nt));
    let mut h_f = Array2::zeros((nf, nt));
    let mut regularized = Array2::from_elem((nf, nt), false);
    let mut clamped = Array2::from_elem((nf, nt), false);
    let mut bias_field = Array2::zeros((nf, nt));
    for k in 0..nf {
        for j in 0..nt {
            let d = DerivativeBundle::new(dtp[[k, j]], dfp[[k, j]]);
            let s = optimal_halfwidth(&d, 0, p, &moments, rho, config.reg_b, &limits)
                .map_err(|e| e.in_stage("final"))?;
            h_t[[k, j]] = s.h_t;
            h_f[[k, j]] = s.h_f;
            regularized[[k, j]] = s.regularized;
            clamped[[k, j]] = s.clamped;
            bias_field[[k, j]] = moments.c0 * d.dfp * s.h_f.powi(p as i32) + moments.cq * d.dtp * s.h_t.powi(p as i32);
        }
    }
    let m_t = setup.index_bounds(&h_t, Axis::Time, p);
    let m_f = setup.index_bounds(&h_f, Axis::Freq, p);
    let cache = KernelCache::new();
    let local = smooth_local(
        &setup.field,
        p,
        setup.shape,
        &m_t,
        &m_f,
        setup.freq_boundary,
        &setup.cov,
        &cache,
    )
    .map_err(|e| e.in_stage("final"))?;

    let point_bias = if setup.point_bias {
        point_bias_field(setup, config, p)?
    } else {
        Array2::zeros((nf, nt))
    };
    let expected_loss = Array2::from_shape_fn((nf, nt), |(k, j)| {
        (bias_field[[k, j]] + point_bias[[k, j]]).powi(2) + local.variance[[k, j]]
    });
    let confidence_halfwidth = local.variance.mapv(|v| 2.0 * v.sqrt());
    let theta_hat = setup.field.with_theta(local.theta.clone());
    let s_hat = local.theta.mapv(f64::exp);
    let s_lower = Array2::from_shape_fn((nf, nt), |(k, j)| (local.theta[[k, j]] - confidence_halfwidth[[k, j]]).exp());
    let s_upper = Array2::from_shape_fn((nf, nt), |(k, j)| (local.theta[[k, j]] + confidence_halfwidth[[k, j]]).exp());
    stages.push(StageInfo {
        name: "final".to_string(),
        seconds: t.elapsed().as_secs_f64(),
        halfwidths: vec![("global".into(), gh_t, gh_f)],
    });
    let halfwidths = HalfwidthField {
        h_t,
        h_f,
        regularized,
        clamped,
    };
    if halfwidths.clamped_count() * 2 > nf * nt {
        warnings.push(format!(
            "{} of {} local halfwidths clamped to the lattice",
            halfwidths.clamped_count(),
            nf * nt
        ));
    }
    let mean_point_bias = stats::mean(point_bias.as_slice().expect("standard layout"));
    Ok(EstimateReport {
        point: setup.field.clone(),
        theta_hat,
        s_hat,
        dtp,
        dfp,
        halfwidths,
        expected_loss,
        confidence_halfwidth,
        s_lower,
        s_upper,
        point_bias,
        diagnostics: Diagnostics {
            taper: setup.taper,
            final_order: p,
            stages: Vec::new(),
            rice,
            continuity,
            global_h: (gh_t, gh_f),
            rho,
            mean_point_bias,
            warnings: Vec::new(),
        },
    })
}

/// Point-estimate bias of `θ̂_ν` from smoothed first and second derivatives:
/// `[∂²_f̄θ + (∂_f̄θ)²]·B̄·(w/λ_F)² + (∂_t̄θ)²·D̄/(2τw)²`.
fn point_bias_field(setup: &Setup, config: &PipelineConfig, p: usize) -> Result<Array2<f64>> {
    let w = setup.taper.bandwidth;
    let taper = Taper::<f64>::new(config.taper_family, setup.taper.length)?.with_bandwidth(w);
    let mom = taper.bias_moments();
    let order = (p + 2).max(4);
    let mut h = scalelength_init(setup, Axis::Time, 0, order, config.theta_scale_prior, config.reg_b, config.h_min)?;
    h = (h.0.max(h.1), h.0.max(h.1));
    let lim = setup.limits(config.h_min);
    let (ht, hf) = (h.0.clamp(lim.h_t.0, lim.h_t.1), h.1.clamp(lim.h_f.0, lim.h_f.1));
    let d1t = setup.derivative(Axis::Time, 1, order, ht, hf)?;
    let d1f = setup.derivative(Axis::Freq, 1, order, ht, hf)?;
    let d2f = setup.derivative(Axis::Freq, 2, order, ht, hf)?;
    let (tau, lam) = (setup.tau, setup.lambda_f);
    Ok(Array2::from_shape_fn(d1t.dim(), |(k, j)| {
        (d2f[[k, j]] + d1f[[k, j]].powi(2)) * mom.b_bar * (w / lam).powi(2)
            + d1t[[k, j]].powi(2) * mom.d_bar / (2.0 * tau * w).powi(2)
    }))
}

/// Smooth with one pair of halfwidths everywhere.
pub fn smooth_global(setup: &Setup, p: usize, h_t: f64, h_f: f64) -> Result<LogSpectralField<f64>> {
    let spec = setup.smoother(Axis::Time, 0, p, h_t, h_f)?;
    smooth(&setup.field, &spec)
}
