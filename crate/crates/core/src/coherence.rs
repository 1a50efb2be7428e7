//! Two-channel coherence and phase on a shared lattice.

use ndarray::{Array2, Zip};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::kernel::KernelCache;
use crate::lattice::{windowed_transform, CovarianceModel, LatticeGeometry, LogSpectralField};
use crate::pipeline::{estimate_field, EstimateReport, PipelineConfig, PlugIn, Setup};
use crate::signal::TimeSeries;
use crate::smooth::{smooth, smooth_local, Axis, SmootherSpec};
use crate::taper::{optimal_taper_params, Taper};

/// Coherence magnitudes are clipped to `1 − EPS_C` before `arctanh`.
pub const EPS_C: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct CrossField {
    pub s11: Array2<f64>,
    pub s22: Array2<f64>,
    pub s12: Array2<Complex64>,
    pub coherence_mag: Array2<f64>,
    /// `√(4K−2)·arctanh|C₁₂|`; empty until [`stabilize`] runs.
    pub q_field: Array2<f64>,
    /// Unit-modulus phase factors `C₁₂/|C₁₂|`.
    pub gamma: Array2<Complex64>,
    pub k_tapers: usize,
    /// Cells with `S₁₂ = 0`, where the phase is undefined (`gamma` is set to 1).
    pub phase_undefined: Vec<(usize, usize)>,
    pub geometry: LatticeGeometry,
}

impl CrossField {
    pub fn dims(&self) -> (usize, usize) {
        self.s11.dim()
    }

    /// `E Q̂ − Q = 1/√(4K−2)`.
    pub fn q_bias(&self) -> f64 {
        q_bias(self.k_tapers)
    }
}

pub fn q_bias(k: usize) -> f64 {
    1.0 / q_scale(k)
}

fn q_scale(k: usize) -> f64 {
    ((4 * k) as f64 - 2.0).sqrt()
}

/// `S₁₂ = y₁ȳ₂`, `S₁₁ = |y₁|²`, `S₂₂ = |y₂|²` and `C₁₂ = S₁₂/√(S₁₁S₂₂)`
/// from single-taper transforms (`K = 1`).
pub fn cross_point_estimates(
    x1: &TimeSeries<f64>,
    x2: &TimeSeries<f64>,
    taper: &Taper<f64>,
    p_t: f64,
    p_f: f64,
) -> Result<CrossField> {
    if x1.len() != x2.len() {
        return Err(Error::DimensionMismatch(format!(
            "channels have lengths {} and {}",
            x1.len(),
            x2.len()
        )));
    }
    let y1 = windowed_transform(x1, taper, p_t, p_f)?;
    let y2 = windowed_transform(x2, taper, p_t, p_f)?;
    let s11 = y1.power();
    let s22 = y2.power();
    let s12 = Zip::from(&y1.values).and(&y2.values).map_collect(|a, b| a * b.conj());
    let dims = s11.dim();
    let mut coherence_mag = Array2::zeros(dims);
    let mut gamma = Array2::from_elem(dims, Complex64::new(1.0, 0.0));
    let mut phase_undefined = Vec::new();
    for ((k, j), z) in s12.indexed_iter() {
        let denom = (s11[[k, j]] * s22[[k, j]]).sqrt();
        let c = if denom > 0.0 { z.norm() / denom } else { 0.0 };
        coherence_mag[[k, j]] = c.min(1.0 - EPS_C);
        if z.norm() > 0.0 {
            gamma[[k, j]] = z / z.norm();
        } else {
            phase_undefined.push((k, j));
        }
    }
    Ok(CrossField {
        s11,
        s22,
        s12,
        coherence_mag,
        q_field: Array2::zeros((0, 0)),
        gamma,
        k_tapers: 1,
        phase_undefined,
        geometry: y1.geometry,
    })
}

/// Fill `q_field = √(4K−2)·arctanh|C₁₂|`.
pub fn stabilize(mut field: CrossField) -> CrossField {
    let s = q_scale(field.k_tapers);
    field.q_field = field.coherence_mag.mapv(|c| s * c.atanh());
    field
}

#[derive(Debug, Clone)]
pub struct SmoothedCoherence {
    /// Smoothed bias-corrected `Q`.
    pub q: Array2<f64>,
    /// Variance of the smoothed `Q` under unit-variance point estimates.
    pub q_variance: Array2<f64>,
    pub coherence: Array2<f64>,
    pub coherence_lower: Array2<f64>,
    pub coherence_upper: Array2<f64>,
    pub gamma: Array2<Complex64>,
    /// Cells where the smoothed phase factor vanished.
    pub phase_undefined: Vec<(usize, usize)>,
}

impl SmoothedCoherence {
    pub fn phase(&self) -> Array2<f64> {
        self.gamma.mapv(|z| z.arg())
    }
}

fn back_transform(q: f64, k: usize) -> f64 {
    (q.max(0.0) / q_scale(k)).tanh()
}

fn q_values(field: &CrossField) -> Result<Array2<f64>> {
    if field.q_field.dim() != field.dims() {
        return Err(Error::invalid("field", "q_field is empty; call stabilize first"));
    }
    let b = field.q_bias();
    Ok(field.q_field.mapv(|q| q - b))
}

fn with_values(geometry: &LatticeGeometry, values: Array2<f64>) -> Result<LogSpectralField<f64>> {
    LogSpectralField::from_values(values, geometry.clone(), true)
}

fn finish(
    field: &CrossField,
    q: Array2<f64>,
    q_variance: Array2<f64>,
    re: Array2<f64>,
    im: Array2<f64>,
) -> SmoothedCoherence {
    let k = field.k_tapers;
    let coherence = q.mapv(|v| back_transform(v, k));
    let band = |sign: f64| Zip::from(&q).and(&q_variance).map_collect(|&v, &s2| back_transform(v + sign * 2.0 * s2.sqrt(), k));
    let mut gamma = Array2::from_elem(q.dim(), Complex64::new(1.0, 0.0));
    let mut phase_undefined = Vec::new();
    for ((k, j), g) in gamma.indexed_iter_mut() {
        let z = Complex64::new(re[[k, j]], im[[k, j]]);
        if z.norm() > 0.0 {
            *g = z / z.norm();
        } else {
            phase_undefined.push((k, j));
        }
    }
    SmoothedCoherence {
        coherence_lower: band(-1.0),
        coherence_upper: band(1.0),
        q,
        q_variance,
        coherence,
        gamma,
        phase_undefined,
    }
}

/// Smooth the bias-corrected `Q` and both parts of `γ̂` with one fixed
/// smoother, then back-transform and renormalize.
pub fn smooth_coherence(field: &CrossField, spec: &SmootherSpec<f64>) -> Result<SmoothedCoherence> {
    let g = &field.geometry;
    let q = smooth(&with_values(g, q_values(field)?)?, spec)?.theta;
    let re = smooth(&with_values(g, field.gamma.mapv(|z| z.re))?, spec)?.theta;
    let im = smooth(&with_values(g, field.gamma.mapv(|z| z.im))?, spec)?.theta;
    let unit = CovarianceModel::diagonal(1.0);
    let (nf, nt) = field.dims();
    let wt = crate::smooth::axis_weights(&spec.time_kernel, nt, false, false)?;
    let reflect_low = spec.freq_boundary == crate::smooth::FreqBoundary::Reflect;
    let reflect_high = reflect_low && g.has_nyquist_row();
    let wf = crate::smooth::axis_weights(&spec.freq_kernel, nf, reflect_low, reflect_high)?;
    let var = Array2::from_shape_fn((nf, nt), |(k, j)| crate::smooth::weighted_variance(&wf[k], &wt[j], &unit));
    Ok(finish(field, q, var, re, im))
}

#[derive(Debug, Clone)]
pub struct CoherenceEstimate {
    pub raw: CrossField,
    pub smoothed: SmoothedCoherence,
    /// Halfwidth selection on the `Q` field.
    pub report: EstimateReport,
}

/// Locally adaptive coherence: halfwidths are chosen on the bias-corrected
/// `Q` field by the usual plug-in stages with unit-variance diagonal
/// covariance, and the same local smoothers are applied to `Re γ̂`, `Im γ̂`.
pub fn estimate_coherence(x1: &TimeSeries<f64>, x2: &TimeSeries<f64>, config: &PipelineConfig) -> Result<CoherenceEstimate> {
    config.validate()?;
    let mut params = optimal_taper_params(
        config.tau_prior,
        config.lambda_f_prior,
        config.taper_family,
        config.theta_scale_prior,
    )?;
    if let Some(n) = config.taper_length {
        params.length = n;
        params.bandwidth = config.taper_family.bandwidth_constant() / n as f64;
    }
    let taper = Taper::<f64>::new(config.taper_family, params.length)?.with_bandwidth(params.bandwidth);
    let raw = stabilize(cross_point_estimates(x1, x2, &taper, config.p_t, config.p_f)?);
    let g = raw.geometry.clone();
    let unit = CovarianceModel::diagonal(1.0);
    let setup = Setup::from_field(with_values(&g, q_values(&raw)?)?, unit.clone(), params, config);
    let report = estimate_field(&setup, config, PlugIn::Estimated)?;
    let p = report.diagnostics.final_order;
    let m_t = setup.index_bounds(&report.halfwidths.h_t, Axis::Time, p);
    let m_f = setup.index_bounds(&report.halfwidths.h_f, Axis::Freq, p);
    let cache = KernelCache::new();
    let local = |values: Array2<f64>| -> Result<Array2<f64>> {
        let f = with_values(&g, values)?;
        Ok(smooth_local(&f, p, setup.shape, &m_t, &m_f, setup.freq_boundary, &unit, &cache)?.theta)
    };
    let re = local(raw.gamma.mapv(|z| z.re))?;
    let im = local(raw.gamma.mapv(|z| z.im))?;
    let q = report.theta_hat.theta.clone();
    let q_variance = report.confidence_halfwidth.mapv(|c| (c / 2.0).powi(2));
    let smoothed = finish(&raw, q, q_variance, re, im);
    Ok(CoherenceEstimate { raw, smoothed, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{make_kernel, KernelShape};
    use crate::taper::TaperFamily;

    fn noise(n: usize, seed: u64) -> TimeSeries<f64> {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        TimeSeries::new((0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
    }

    fn taper() -> Taper<f64> {
        Taper::new(TaperFamily::Sine, 33).unwrap()
    }

    #[test]
    fn identical_channels_are_fully_coherent() {
        let x = noise(2000, 1);
        let f = stabilize(cross_point_estimates(&x, &x, &taper(), 0.5, 0.5).unwrap());
        assert!(f.coherence_mag.iter().all(|&c| c == 1.0 - EPS_C));
        assert!(f.gamma.iter().all(|z| (z - Complex64::new(1.0, 0.0)).norm() < 1e-12));
        assert!(f.q_field.iter().all(|q| q.is_finite()));
    }

    #[test]
    fn sign_flip_gives_phase_minus_one() {
        let x = noise(2000, 2);
        let neg = TimeSeries::new(x.samples().iter().map(|v| -v).collect()).unwrap();
        let f = cross_point_estimates(&x, &neg, &taper(), 0.5, 0.5).unwrap();
        assert!(f.gamma.iter().all(|z| (z + Complex64::new(1.0, 0.0)).norm() < 1e-12));
        assert!(f.coherence_mag.iter().all(|&c| c == 1.0 - EPS_C));
    }

    #[test]
    fn q_transform_values() {
        assert!((q_bias(1) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(back_transform(0.0, 1), 0.0);
        // arctanh(x) = Σ x^{2k+1}/(2k+1)
        let series: f64 = (0..60).map(|k| 0.5f64.powi(2 * k + 1) / (2 * k + 1) as f64).sum();
        let q = q_scale(1) * 0.5f64.atanh();
        assert!((q - 2f64.sqrt() * series).abs() < 1e-14, "{q}");
        assert!((q - 0.7768).abs() < 5e-5);
    }

    #[test]
    fn mismatched_lengths() {
        assert!(cross_point_estimates(&noise(100, 1), &noise(101, 1), &taper(), 0.5, 0.5).is_err());
    }

    #[test]
    fn smoothed_phase_has_unit_modulus_and_bands_are_ordered() {
        let x1 = noise(3000, 3);
        let x2 = noise(3000, 4);
        let f = stabilize(cross_point_estimates(&x1, &x2, &taper(), 0.5, 0.5).unwrap());
        let kt = make_kernel(0, 2, 3.0, 6, KernelShape::MinimalNorm).unwrap();
        let kf = make_kernel(0, 2, 3.0, 6, KernelShape::MinimalNorm).unwrap();
        let g = &f.geometry;
        let spec = SmootherSpec::new(kt, kf, g.dt, g.df, 100.0, 0.05).unwrap();
        let s = smooth_coherence(&f, &spec).unwrap();
        for ((k, j), z) in s.gamma.indexed_iter() {
            if !s.phase_undefined.contains(&(k, j)) {
                assert!((z.norm() - 1.0).abs() < 1e-12);
            }
        }
        for ((lo, c), hi) in s.coherence_lower.iter().zip(s.coherence.iter()).zip(s.coherence_upper.iter()) {
            assert!(0.0 <= *lo && lo <= c && c <= hi && *hi <= 1.0);
        }
    }
}
