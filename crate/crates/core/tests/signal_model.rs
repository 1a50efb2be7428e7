use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use evospec::signal::{simulate, simulate_detailed, true_covariance, Preset, ProcessSpec, Synthesis};

fn realizations(spec: &ProcessSpec, n: usize, bins: usize, reps: usize, seed: u64) -> Vec<Vec<f64>> {
    (0..reps)
        .into_par_iter()
        .map(|r| simulate::<f64>(spec, n, bins, seed + r as u64).unwrap().samples().to_vec())
        .collect()
}

/// Sample mean of `x_t x_s` (the process has zero mean) and its standard error.
fn sample_cov(xs: &[Vec<f64>], t: usize, s: usize) -> (f64, f64) {
    let prods: Vec<f64> = xs.iter().map(|x| x[t] * x[s]).collect();
    let n = prods.len() as f64;
    let m = prods.iter().sum::<f64>() / n;
    let v = prods.iter().map(|p| (p - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

#[test]
fn sample_covariance_converges_to_quadrature() {
    let (n, bins) = (256, 512);
    let specs = [
        ProcessSpec::from_preset(Preset::am(0.5, 120.0), (120.0, 0.5)).unwrap(),
        ProcessSpec::from_preset(Preset::chirp(40.0, 0.08), (40.0, 0.08)).unwrap(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (i, spec) in specs.iter().enumerate() {
        let xs = realizations(spec, n, bins, 500, 100 * i as u64);
        for _ in 0..20 {
            let t = rng.gen_range(0..n);
            let s = (t as i64 + rng.gen_range(-4i64..=4)).clamp(0, n as i64 - 1) as usize;
            let (m, se) = sample_cov(&xs, t, s);
            let r = true_covariance(spec, t as i64, s as i64, bins).unwrap();
            assert!((m - r).abs() < 5.0 * se, "preset {i} ({t},{s}): sample {m} vs {r} (se {se})");
        }
    }
}

#[test]
fn cosine_amplitude_lag_one_covariance() {
    // S = 2cos²(πf) = 1 + cos(2πf): R(0) = 1, R(±1) = 1/2, zero beyond
    let spec = ProcessSpec::custom(|f, _| 2f64.sqrt() * (PI * f).cos(), 50.0, 0.5, 4).unwrap();
    let bins = 256;
    assert!((true_covariance(&spec, 10, 11, bins).unwrap() - 0.5).abs() < 1e-12);
    assert!((true_covariance(&spec, 10, 10, bins).unwrap() - 1.0).abs() < 1e-12);
    assert!(true_covariance(&spec, 10, 12, bins).unwrap().abs() < 1e-12);
    let xs = realizations(&spec, 64, bins, 500, 7);
    let (m, se) = sample_cov(&xs, 20, 21);
    assert!((m - 0.5).abs() < 5.0 * se, "{m} ± {se}");
}

#[test]
fn block_variance_tracks_modulation() {
    let period = 1000.0;
    let spec = ProcessSpec::from_preset(Preset::am(0.5, period), (period, 0.5)).unwrap();
    let n = 2000;
    let xs = realizations(&spec, n, 4096, 200, 11);
    let block = 50;
    for b in 0..n / block {
        let range = b * block..(b + 1) * block;
        let sq: Vec<f64> = xs.iter().flat_map(|x| x[range.clone()].iter().map(|v| v * v)).collect();
        let m = sq.iter().sum::<f64>() / sq.len() as f64;
        // samples inside a block are nearly independent for white-in-f processes
        let se = (sq.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (sq.len() as f64 - 1.0) / sq.len() as f64).sqrt();
        let g2 = range
            .map(|t| (1.0 + 0.5 * (2.0 * PI * t as f64 / period).cos()).powi(2))
            .sum::<f64>()
            / block as f64;
        assert!((m - g2).abs() < 4.0 * se, "block {b}: {m} vs {g2} (se {se})");
    }
}

#[test]
fn am_with_zero_depth_is_stationary_white() {
    let am = ProcessSpec::from_preset(Preset::am(0.0, 300.0), (300.0, 0.5)).unwrap();
    let white = ProcessSpec::from_preset(Preset::StationaryWhite { level: 1.0 }, (300.0, 0.5)).unwrap();
    assert_eq!(
        simulate::<f64>(&am, 500, 1024, 9).unwrap(),
        simulate::<f64>(&white, 500, 1024, 9).unwrap()
    );
}

fn preset_strategy() -> impl Strategy<Value = Preset> {
    prop_oneof![
        (0.1f64..4.0).prop_map(|level| Preset::StationaryWhite { level }),
        (0.0f64..0.9, 20.0f64..2000.0).prop_map(|(d, p)| Preset::am(d, p)),
        (10.0f64..1000.0, 0.02f64..0.15).prop_map(|(t, l)| Preset::chirp(t, l)),
        (10.0f64..1000.0, 0.02f64..0.15, 0.0f64..4000.0).prop_map(|(t, l, t0)| Preset::Burst {
            peak: 5.0,
            t0,
            time_width: t,
            f0: 0.2,
            width: l,
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spectra_are_even_and_nonnegative(preset in preset_strategy(), f in -0.5f64..0.5, t in 0.0f64..5000.0) {
        let spec = ProcessSpec::from_preset(preset, (100.0, 0.1)).unwrap();
        let (a, b) = (spec.amplitude(f, t), spec.amplitude(-f, t));
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        prop_assert!(spec.spectrum(f, t) >= 0.0);
        let th = spec.theta(f, t).unwrap();
        prop_assert!((th - spec.spectrum(f, t).ln()).abs() < 1e-9);
    }

    #[test]
    fn fixed_seed_reproduces(preset in preset_strategy(), seed in any::<u64>(), n in 1usize..300) {
        let spec = ProcessSpec::from_preset(preset, (100.0, 0.1)).unwrap();
        let a = simulate::<f64>(&spec, n, 256, seed).unwrap();
        let b = simulate::<f64>(&spec, n, 256, seed).unwrap();
        prop_assert_eq!(a.samples().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        b.samples().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn symmetrized_sum_is_real(preset in preset_strategy(), seed in 0u64..1000) {
        let spec = ProcessSpec::from_preset(preset, (100.0, 0.1)).unwrap();
        let sim = simulate_detailed(&spec, 200, 128, seed, Synthesis::Direct).unwrap();
        prop_assert!(sim.imaginary_residue < 1e-12, "residue {}", sim.imaginary_residue);
    }
}
