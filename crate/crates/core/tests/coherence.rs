use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use evospec::coherence::{cross_point_estimates, estimate_coherence, smooth_coherence, stabilize, CrossField, EPS_C};
use evospec::kernel::{make_kernel, KernelShape};
use evospec::pipeline::PipelineConfig;
use evospec::signal::TimeSeries;
use evospec::smooth::SmootherSpec;
use evospec::stats;
use evospec::taper::{Taper, TaperFamily};

fn noise(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn ts(x: Vec<f64>) -> TimeSeries<f64> {
    TimeSeries::new(x).unwrap()
}

fn spec_for(field: &CrossField, h: f64) -> SmootherSpec<f64> {
    let m = (2.0 * h).ceil() as usize;
    let kt = make_kernel(0, 2, h, m, KernelShape::MinimalNorm).unwrap();
    let kf = make_kernel(0, 2, h, m, KernelShape::MinimalNorm).unwrap();
    let g = &field.geometry;
    SmootherSpec::new(kt, kf, g.dt, g.df, 100.0, 0.05).unwrap()
}

/// Phase of `y₁ȳ₂` for `x₂(t) = x₁(t − d)`: averaging `γ̂` over time per
/// frequency row and unwrapping gives a line of slope `2πd`.
#[test]
fn delay_gives_linear_phase_in_frequency() {
    let (n, d) = (6000, 3usize);
    let base = noise(n + d, 7);
    let x1 = ts(base[d..].to_vec());
    let x2 = ts(base[..n].to_vec());
    let taper = Taper::<f64>::new(TaperFamily::Sine, 65).unwrap();
    let f = cross_point_estimates(&x1, &x2, &taper, 0.5, 0.5).unwrap();
    let g = &f.geometry;
    // passband: rows where the phase advances less than π per row
    let rows: Vec<usize> = (1..g.n_f - 1).filter(|&k| g.frequency(k) < 0.45).collect();
    let mut phase = Vec::new();
    let mut prev = 0.0;
    for &k in &rows {
        let z: Complex64 = f.gamma.row(k).iter().sum();
        let mut a = z.arg();
        while a - prev > PI {
            a -= 2.0 * PI;
        }
        while a - prev < -PI {
            a += 2.0 * PI;
        }
        phase.push(a);
        prev = a;
    }
    let freqs: Vec<f64> = rows.iter().map(|&k| g.frequency(k)).collect();
    let fit = stats::linear_fit(&freqs, &phase);
    let expect = 2.0 * PI * d as f64;
    assert!((fit.slope / expect - 1.0).abs() < 0.05, "slope {} vs {expect}", fit.slope);
}

#[test]
fn constant_phase_survives_smoothing() {
    let x1 = ts(noise(3000, 1));
    let x2 = ts(noise(3000, 2));
    let taper = Taper::<f64>::new(TaperFamily::Sine, 33).unwrap();
    let mut f = stabilize(cross_point_estimates(&x1, &x2, &taper, 0.5, 0.5).unwrap());
    let phi = 0.83;
    let unit = Complex64::from_polar(1.0, phi);
    f.gamma.fill(unit);
    let s = smooth_coherence(&f, &spec_for(&f, 2.5)).unwrap();
    assert!(s.phase_undefined.is_empty());
    for z in s.gamma.iter() {
        assert!((z - unit).norm() < 1e-12, "{z}");
    }
}

/// With one taper the cross estimate at a cell is `y₁ȳ₂/|y₁||y₂|`, so the
/// null distribution of `|Ĉ₁₂|` is a point mass at 1.
#[test]
fn single_taper_null_coherence_is_degenerate() {
    let taper = Taper::<f64>::new(TaperFamily::Sine, 33).unwrap();
    let means: Vec<f64> = (0..200)
        .map(|r| {
            let f = cross_point_estimates(&ts(noise(800, 2 * r)), &ts(noise(800, 2 * r + 1)), &taper, 0.5, 0.5).unwrap();
            stats::mean(&f.coherence_mag.iter().copied().collect::<Vec<_>>())
        })
        .collect();
    for m in means {
        assert!((m - (1.0 - EPS_C)).abs() < 1e-12, "{m}");
    }
}

#[test]
fn identical_channels_estimate_near_unit_coherence() {
    let x = ts(noise(4000, 9));
    let cfg = PipelineConfig::default();
    let est = estimate_coherence(&x, &x, &cfg).unwrap();
    let worst = est.smoothed.coherence.iter().fold(1.0f64, |m, &c| m.min(c));
    assert!(worst >= 1.0 - 1e-6, "{worst}");
    assert!(est.smoothed.gamma.iter().all(|z| (z - Complex64::new(1.0, 0.0)).norm() < 1e-12));
}

fn random_field(seed: u64) -> CrossField {
    let taper = Taper::<f64>::new(TaperFamily::Uniform, 17).unwrap();
    let mut f = cross_point_estimates(&ts(noise(600, seed)), &ts(noise(600, seed + 1)), &taper, 0.5, 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = f.dims();
    f.coherence_mag = Array2::from_shape_fn(dims, |_| {
        let u: f64 = rand::Rng::gen(&mut rng);
        u.min(1.0 - EPS_C)
    });
    stabilize(f)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn bands_stay_in_unit_interval(seed in 0u64..10_000, h in 1.0f64..4.0) {
        let f = random_field(seed);
        let s = smooth_coherence(&f, &spec_for(&f, h)).unwrap();
        for ((lo, c), hi) in s.coherence_lower.iter().zip(s.coherence.iter()).zip(s.coherence_upper.iter()) {
            prop_assert!(0.0 <= *lo && lo <= c && c <= hi && *hi <= 1.0, "{} {} {}", lo, c, hi);
        }
    }

    #[test]
    fn defined_phases_have_unit_modulus(seed in 0u64..10_000, h in 1.0f64..4.0) {
        let f = random_field(seed);
        let s = smooth_coherence(&f, &spec_for(&f, h)).unwrap();
        for ((k, j), z) in s.gamma.indexed_iter() {
            if !s.phase_undefined.contains(&(k, j)) {
                prop_assert!((z.norm() - 1.0).abs() < 1e-12);
            }
        }
    }
}
