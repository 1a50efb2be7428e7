//! Mean squared error against the analytic log-spectrum over a range of
//! lattice scales `τλ_F`.

use std::f64::consts::PI;
use std::fmt::Write as _;

use ndarray::Array2;
use rayon::prelude::*;

use crate::config::SweepConfig;
use crate::error::{Error, Result};
use crate::lattice::LatticeGeometry;
use crate::pipeline::{run_pipeline, smooth_global, PipelineConfig, Setup};
use crate::signal::{simulate, Preset, ProcessSpec};
use crate::stats;

/// Process and series length for one value of `τλ_F`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleSetting {
    pub scale: f64,
    pub tau: f64,
    pub lambda_f: f64,
    pub n_samples: usize,
    pub preset: Preset,
}

pub fn scale_setting(cfg: &SweepConfig, scale: f64) -> Result<ScaleSetting> {
    let lambda_f = cfg.lambda_f;
    let tau = scale / lambda_f;
    let n_samples = (cfg.periods * 2.0 * PI * tau).round() as usize;
    let preset = match cfg.preset.as_str() {
        "chirp" => Preset::chirp(tau, lambda_f),
        "burst" => Preset::Burst {
            peak: 9.0,
            t0: n_samples as f64 / 2.0,
            time_width: tau,
            f0: 0.25,
            width: lambda_f,
        },
        "am" => Preset::am(0.5, 2.0 * PI * tau),
        other => return Err(Error::invalid("preset", format!("no sweep mapping for `{other}`"))),
    };
    Ok(ScaleSetting {
        scale,
        tau,
        lambda_f,
        n_samples,
        preset,
    })
}

/// `θ(f_k, t_j)` at every lattice cell.
pub fn truth_grid(spec: &ProcessSpec, g: &LatticeGeometry) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((g.n_f, g.n_t()));
    for ((k, j), v) in out.indexed_iter_mut() {
        *v = spec
            .theta(g.frequency(k), g.time(j))
            .ok_or_else(|| Error::invalid("spec", "process has no analytic log-spectrum"))?;
    }
    Ok(out)
}

pub fn mse(estimate: &Array2<f64>, truth: &Array2<f64>) -> f64 {
    estimate.iter().zip(truth.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / truth.len() as f64
}

/// Squared errors of one realization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RealizationMse {
    pub point: f64,
    pub global: f64,
    pub local: f64,
}

/// Point, global-halfwidth and local-halfwidth MSE of one realization.
pub fn realization_mse(setting: &ScaleSetting, pipeline: &PipelineConfig, seed: u64) -> Result<RealizationMse> {
    let spec = ProcessSpec::from_preset(setting.preset.clone(), (setting.tau, setting.lambda_f))?;
    let x = simulate::<f64>(&spec, setting.n_samples, 2 * setting.n_samples, seed)?;
    let config = PipelineConfig {
        tau_prior: setting.tau,
        lambda_f_prior: setting.lambda_f,
        ..pipeline.clone()
    };
    let report = run_pipeline(&x, &config)?;
    let truth = truth_grid(&spec, &report.point.geometry)?;
    let setup = Setup::new(&x, &config)?;
    let (h_t, h_f) = report.diagnostics.global_h;
    let global = smooth_global(&setup, report.diagnostics.final_order, h_t, h_f)?;
    Ok(RealizationMse {
        point: mse(&report.point.theta, &truth),
        global: mse(&global.theta, &truth),
        local: mse(&report.theta_hat.theta, &truth),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanSe {
    pub mean: f64,
    /// Monte Carlo standard error; NaN for a single realization.
    pub se: f64,
}

impl MeanSe {
    pub fn of(x: &[f64]) -> Self {
        let se = if x.len() > 1 {
            (stats::variance(x) / x.len() as f64).sqrt()
        } else {
            f64::NAN
        };
        MeanSe { mean: stats::mean(x), se }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub setting: ScaleSetting,
    pub point: MeanSe,
    pub global: MeanSe,
    pub local: MeanSe,
    /// Paired per-realization `local − global`.
    pub local_minus_global: MeanSe,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub realizations: usize,
    /// Least-squares slope of `ln MSE_local` against `ln τλ_F`.
    pub slope: f64,
    /// Two standard errors of the slope from the Monte Carlo errors of each
    /// row; NaN when they are unavailable.
    pub slope_ci: f64,
    pub slope_ci_undefined: bool,
}

pub fn run_sweep(cfg: &SweepConfig, pipeline: &PipelineConfig) -> Result<SweepTable> {
    let mut rows = Vec::with_capacity(cfg.scales.len());
    for (i, &scale) in cfg.scales.iter().enumerate() {
        let setting = scale_setting(cfg, scale)?;
        let base = cfg.seed.wrapping_add(1_000_003 * i as u64);
        let runs: Vec<RealizationMse> = (0..cfg.realizations)
            .into_par_iter()
            .map(|r| realization_mse(&setting, pipeline, base.wrapping_add(r as u64)))
            .collect::<Result<_>>()?;
        let col = |f: fn(&RealizationMse) -> f64| -> Vec<f64> { runs.iter().map(f).collect() };
        rows.push(SweepRow {
            setting,
            point: MeanSe::of(&col(|r| r.point)),
            global: MeanSe::of(&col(|r| r.global)),
            local: MeanSe::of(&col(|r| r.local)),
            local_minus_global: MeanSe::of(&col(|r| r.local - r.global)),
        });
    }
    let x: Vec<f64> = rows.iter().map(|r| r.setting.scale.ln()).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.local.mean.ln()).collect();
    let slope = if rows.len() >= 2 {
        stats::linear_fit(&x, &y).slope
    } else {
        f64::NAN
    };
    // slope = Σ w_i y_i with w_i = (x_i − x̄)/Sxx; Var(y_i) ≈ (se_i/mean_i)²
    let mx = stats::mean(&x);
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let var: f64 = rows
        .iter()
        .zip(&x)
        .map(|(r, xi)| ((xi - mx) / sxx).powi(2) * (r.local.se / r.local.mean).powi(2))
        .sum();
    let slope_ci = 2.0 * var.sqrt();
    Ok(SweepTable {
        rows,
        realizations: cfg.realizations,
        slope,
        slope_ci,
        slope_ci_undefined: !slope_ci.is_finite(),
    })
}

pub fn format_table(t: &SweepTable) -> String {
    let mut out = format!("# realizations={}\n", t.realizations);
    out.push_str("# scale tau lambda_f n_samples mse_point se_point mse_global se_global mse_local se_local\n");
    for r in &t.rows {
        let s = &r.setting;
        let _ = writeln!(
            out,
            "{} {} {} {} {:.6e} {:.3e} {:.6e} {:.3e} {:.6e} {:.3e}",
            s.scale, s.tau, s.lambda_f, s.n_samples, r.point.mean, r.point.se, r.global.mean, r.global.se, r.local.mean, r.local.se
        );
    }
    let _ = writeln!(out, "# slope={:.6} slope_ci={:.6}", t.slope, t.slope_ci);
    if t.slope_ci_undefined {
        out.push_str("# slope_ci_undefined: fewer than two realizations per scale\n");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn settings_follow_scale() {
        let cfg = SweepConfig::default();
        let s = scale_setting(&cfg, 50.0).unwrap();
        assert_eq!(s.tau, 1000.0);
        assert_eq!(s.n_samples, (2000.0 * PI).round() as usize);
        assert_eq!(s.preset, Preset::chirp(1000.0, 0.05));
    }

    #[test]
    fn single_realization_flags_ci() {
        let cfg = SweepConfig {
            scales: vec![10.0, 20.0],
            realizations: 1,
            lambda_f: 0.1,
            ..Default::default()
        };
        let t = run_sweep(&cfg, &PipelineConfig::default()).unwrap();
        assert!(t.slope.is_finite());
        assert!(t.slope_ci_undefined && t.slope_ci.is_nan());
        let text = format_table(&t);
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 2);
        assert!(text.contains("slope_ci_undefined"));
    }
}
