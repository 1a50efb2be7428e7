use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;

use evospec::kernel::{make_kernel, KernelShape};
use evospec::lattice::{CovarianceKind, CovarianceModel, LatticeGeometry, LogSpectralField};
use evospec::pipeline::{
    factor, rice_criterion, run_pipeline, scalelength_init, Init, PipelineConfig, Setup, Stages,
};
use evospec::signal::{simulate, Preset, ProcessSpec, TimeSeries};
use evospec::smooth::{axis_weights, Axis};
use evospec::stats;
use evospec::sweep::{mse, truth_grid};
use evospec::taper::{optimal_taper_params, TaperFamily};

const TRIGAMMA_ONE: f64 = 1.644_934_066_848_226_4;
const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

fn series(spec: &ProcessSpec, n: usize, seed: u64) -> TimeSeries<f64> {
    simulate::<f64>(spec, n, 2 * n, seed).unwrap()
}

/// Cells at least `margin` away from every lattice edge.
fn interior(a: &Array2<f64>, margin: usize) -> Vec<f64> {
    let (nf, nt) = a.dim();
    a.indexed_iter()
        .filter(|((k, j), _)| *k >= margin && *k + margin < nf && *j >= margin && *j + margin < nt)
        .map(|(_, &v)| v)
        .collect()
}

/// Standardized smoothed white-noise estimates, `θ̂_μ/sd` with `sd` from the
/// windowed-covariance variance of the final smooth.
fn white_noise_z(seed: u64) -> Vec<f64> {
    let spec = ProcessSpec::from_preset(Preset::StationaryWhite { level: 1.0 }, (200.0, 0.05)).unwrap();
    let cfg = PipelineConfig {
        covariance: CovarianceKind::Windowed,
        ..PipelineConfig::default()
    };
    let report = run_pipeline(&series(&spec, 8000, seed), &cfg).unwrap();
    assert!(report.s_hat.iter().all(|&s| s > 0.0));
    let z = Array2::from_shape_fn(report.theta_hat.dims(), |(k, j)| {
        report.theta_hat.theta[[k, j]] / (report.confidence_halfwidth[[k, j]] / 2.0)
    });
    interior(&z, 3)
}

#[test]
fn white_noise_variance_is_calibrated() {
    let z = white_noise_z(21);
    let sd = stats::variance(&z).sqrt();
    assert!((0.8..1.25).contains(&sd), "sd of θ̂_μ/predicted sd = {sd}");
    assert!(stats::mean(&z).abs() < 0.5);
}

#[test]
fn white_noise_estimate_is_flat() {
    let z = white_noise_z(21);
    let worst = z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(worst < 3.0, "max |θ̂|/sd = {worst} over {} interior cells", z.len());
}

#[test]
fn amplitude_modulation_is_tracked() {
    let period = 1500.0;
    let spec = ProcessSpec::from_preset(Preset::am(0.6, period), (period, 0.2)).unwrap();
    let cfg = PipelineConfig {
        tau_prior: spec.tau(),
        lambda_f_prior: spec.lambda_f(),
        ..PipelineConfig::default()
    };
    let report = run_pipeline(&series(&spec, 8000, 22), &cfg).unwrap();
    let truth = truth_grid(&spec, &report.theta_hat.geometry).unwrap();
    let smoothed = mse(&report.theta_hat.theta, &truth);
    let point = mse(&report.point.theta, &truth);
    assert!(point / smoothed >= 5.0, "point MSE {point} vs smoothed {smoothed}");
}

#[test]
fn rice_three_stage_and_scalelength_two_stage_agree() {
    let (tau, lambda) = (200.0, 0.05);
    let spec = ProcessSpec::from_preset(Preset::chirp(tau, lambda), (tau, lambda)).unwrap();
    let x = series(&spec, 8000, 23);
    let two = run_pipeline(&x, &PipelineConfig::default()).unwrap();
    let three = run_pipeline(
        &x,
        &PipelineConfig {
            stages: Stages::ThreeStage,
            init: Init::RiceFactor,
            ..PipelineConfig::default()
        },
    )
    .unwrap();
    let truth = truth_grid(&spec, &two.theta_hat.geometry).unwrap();
    let (m2, m3) = (mse(&two.theta_hat.theta, &truth), mse(&three.theta_hat.theta, &truth));
    let (l2, l3) = (two.mean_expected_loss(), three.mean_expected_loss());
    assert!(m2 / m3 <= 2.0 && m3 / m2 <= 2.0, "two-stage MSE {m2} vs three-stage {m3}");
    assert_eq!(l2 < l3, m2 < m3, "expected loss ({l2}, {l3}) picks the wrong scheme for MSE ({m2}, {m3})");
}

/// Pilot halfwidths from the ansatz against the grid pair minimizing the
/// realization-averaged error of the pilot derivative.
#[test]
fn scalelength_pilot_is_near_oracle() {
    let (tau, lambda, reps) = (200.0, 0.05, 4);
    let spec = ProcessSpec::from_preset(Preset::chirp(tau, lambda), (tau, lambda)).unwrap();
    let cfg = PipelineConfig::default();
    let (p, q) = (cfg.final_order + 2, cfg.final_order);
    let setups: Vec<Setup> = (0..reps)
        .into_par_iter()
        .map(|r| Setup::new(&series(&spec, 8000, 300 + r as u64), &cfg).unwrap())
        .collect();
    let g = &setups[0].field.geometry;
    let lim = setups[0].limits(cfg.h_min);
    for axis in [Axis::Time, Axis::Freq] {
        let (kf, kt) = match axis {
            Axis::Time => (0, q),
            Axis::Freq => (q, 0),
        };
        let truth = Array2::from_shape_fn((g.n_f, g.n_t()), |(k, j)| {
            spec.theta_partial_normalized(g.frequency(k), g.time(j), kf, kt).unwrap()
        });
        let pilot = scalelength_init(&setups[0], axis, q, p, cfg.theta_scale_prior, cfg.reg_b, cfg.h_min).unwrap();
        let n = 12;
        let ax = |(lo, hi): (f64, f64)| -> Vec<f64> {
            (0..n).map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64)).collect()
        };
        let grid: Vec<(f64, f64)> = ax(lim.h_t)
            .iter()
            .flat_map(|&t| ax(lim.h_f).into_iter().map(move |f| (t, f)))
            .collect();
        let errs: Vec<f64> = grid
            .par_iter()
            .map(|&(ht, hf)| {
                let e: Vec<f64> = setups
                    .iter()
                    .map(|s| mse(&s.derivative(axis, q, p, ht, hf).unwrap(), &truth))
                    .collect();
                stats::mean(&e)
            })
            .collect();
        let best = errs
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| grid[i])
            .unwrap();
        let (hp, ho) = ((pilot.0 * pilot.1).sqrt(), (best.0 * best.1).sqrt());
        assert!(
            hp / ho <= 3.0 && ho / hp <= 3.0,
            "{axis:?}: pilot {pilot:?} (h={hp:.4}) vs oracle {best:?} (h={ho:.4})"
        );
    }
}

fn white_log_field(nf: usize, nt: usize, geometry: &LatticeGeometry, seed: u64) -> LogSpectralField<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = Array2::from_shape_fn((nf, nt), |_| {
        let e: f64 = Exp1.sample(&mut rng);
        e.ln() + EULER_GAMMA
    });
    LogSpectralField::from_values(theta, geometry.clone(), true).unwrap()
}

/// Expected mean squared residual of a smoother on iid noise of variance
/// `ψ′(1)`, from the weights actually applied at each cell.
fn residual_oracle(setup: &Setup, h: (f64, f64), p: usize) -> (f64, f64) {
    let spec = setup.smoother(Axis::Time, 0, p, h.0, h.1).unwrap();
    let (nf, nt) = setup.dims();
    let reflect_high = setup.field.geometry.has_nyquist_row();
    let wt = axis_weights(&spec.time_kernel, nt, false, false).unwrap();
    let wf = axis_weights(&spec.freq_kernel, nf, true, reflect_high).unwrap();
    let at = |w: &evospec::smooth::AxisWeights<f64>, i: usize| {
        i.checked_sub(w.start).and_then(|o| w.weights.get(o)).copied().unwrap_or(0.0)
    };
    let (mut resid, mut center) = (0.0, 0.0);
    for (k, a) in wf.iter().enumerate() {
        for (j, b) in wt.iter().enumerate() {
            let w0 = at(a, k) * at(b, j);
            resid += 1.0 - 2.0 * w0 + a.sum_sq() * b.sum_sq();
            center += w0;
        }
    }
    let cells = (nf * nt) as f64;
    (TRIGAMMA_ONE * resid / cells, center / cells)
}

#[test]
fn rice_criterion_on_white_log_noise() {
    let geometry = LatticeGeometry::new(64 * 127, TaperFamily::Uniform, 127, 1.0, 1.0).unwrap();
    let (nf, nt) = (geometry.n_f, geometry.n_t());
    let cfg = PipelineConfig {
        covariance: CovarianceKind::Diagonal,
        ..PipelineConfig::default()
    };
    let taper = optimal_taper_params(cfg.tau_prior, cfg.lambda_f_prior, TaperFamily::Uniform, 1.0).unwrap();
    let base = Setup::from_field(
        white_log_field(nf, nt, &geometry, 0),
        CovarianceModel::diagonal(TRIGAMMA_ONE),
        taper,
        &cfg,
    );
    let lim = base.limits(cfg.h_min);
    let hmax = ((nt as f64 - 1.0) / base.scale(Axis::Time) / 4.0).min((nf as f64 - 1.0) / base.scale(Axis::Freq) / 4.0);
    let ratio_t = lim.h_t.0.max(lim.h_f.0 * base.scale(Axis::Freq) / base.scale(Axis::Time));
    // equal index halfwidths on both axes, from one lattice step to a quarter of the extent
    let steps: Vec<f64> = (0..10).map(|i| 1.0f64 + i as f64 * 1.5).collect();
    let grid: Vec<(f64, f64)> = steps
        .iter()
        .map(|&s| (s / base.scale(Axis::Time), s / base.scale(Axis::Freq)))
        .filter(|&(t, _)| t <= hmax.max(ratio_t) * 4.0)
        .collect();
    assert!(grid.len() >= 8);

    let reps = 100;
    let rows: Vec<Vec<(f64, f64)>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let s = Setup::from_field(
                white_log_field(nf, nt, &geometry, 1 + r as u64),
                CovarianceModel::diagonal(TRIGAMMA_ONE),
                taper,
                &cfg,
            );
            grid.iter()
                .map(|&(ht, hf)| {
                    let spec = s.smoother(Axis::Time, 0, 2, ht, hf).unwrap();
                    let smoothed = evospec::smooth::smooth(&s.field, &spec).unwrap();
                    let sigma2 = mse(&smoothed.theta, &s.field.theta);
                    (sigma2, rice_criterion(&s.field, &s.rice_cov, &spec).unwrap())
                })
                .collect()
        })
        .collect();

    let mut curve = Vec::new();
    for (i, &h) in grid.iter().enumerate() {
        let s2: Vec<f64> = rows.iter().map(|r| r[i].0).collect();
        let cr: Vec<f64> = rows.iter().map(|r| r[i].1).collect();
        let (oracle, mu0) = residual_oracle(&base, h, 2);
        let se = (stats::variance(&s2) / reps as f64).sqrt();
        assert!(
            (stats::mean(&s2) - oracle).abs() < 4.0 * se,
            "h={h:?}: σ̂² {} vs oracle {oracle} (se {se})",
            stats::mean(&s2)
        );
        let expect_cr = oracle / (1.0 - 2.0 * mu0);
        assert!((stats::mean(&cr) / expect_cr - 1.0).abs() < 0.01);
        curve.push(stats::mean(&cr));
    }
    // decreasing toward ψ′(1), then flat
    for w in curve.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-3), "{curve:?}");
    }
    let tail = &curve[curve.len() - 3..];
    assert!(curve[0] - tail[2] > 10.0 * (tail[0] - tail[2]).abs(), "{curve:?}");
    assert!(tail.iter().all(|c| (c / TRIGAMMA_ONE - 1.0).abs() < 0.01), "{curve:?}");
    assert!((tail[0] - tail[2]).abs() < 0.02 * TRIGAMMA_ONE, "{curve:?}");
}

/// Minimizer of `(C·h^{p−q})² + m₂/h^{2q+1}` on a fine logarithmic grid.
fn grid_optimal_h(c: f64, m2: f64, q: i32, p: i32) -> f64 {
    (0..20000)
        .map(|i| 1e-3 * (1e7f64).powf(i as f64 / 19999.0))
        .min_by(|a, b| {
            let l = |h: f64| (c * h.powi(p - q)).powi(2) + m2 / h.powi(2 * q + 1);
            l(*a).total_cmp(&l(*b))
        })
        .unwrap()
}

fn fourth_order_pairs() -> Vec<(evospec::kernel::Kernel1D<f64>, evospec::kernel::Kernel1D<f64>)> {
    [3.0, 5.0, 8.0]
        .iter()
        .map(|&h| {
            let m = evospec::kernel::default_index_bound(h);
            (
                make_kernel::<f64>(2, 4, h, m, KernelShape::MinimalNorm).unwrap(),
                make_kernel::<f64>(0, 4, h, m, KernelShape::MinimalNorm).unwrap(),
            )
        })
        .collect()
}

#[test]
fn factor_matches_ratio_of_grid_optima() {
    for (k2, k0) in fourth_order_pairs() {
        let (m0, mq) = (k0.moments(), k2.moments());
        let ratio = grid_optimal_h(mq.c_qp, mq.m2, 2, 4) / grid_optimal_h(m0.c_qp, m0.m2, 0, 4);
        let f = factor(&k2, &k0).unwrap();
        assert!((ratio / f - 1.0).abs() < 2e-3, "grid ratio {ratio} vs factor {f}");
    }
}

#[test]
fn derivative_factor_exceeds_one() {
    for (k2, k0) in fourth_order_pairs() {
        let f = factor(&k2, &k0).unwrap();
        assert!(f > 1.0, "H={}: factor {f}", k0.halfwidth);
    }
}
