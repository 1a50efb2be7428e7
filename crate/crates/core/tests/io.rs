use ndarray::Array2;
use num_complex::Complex64;
use proptest::prelude::*;

use evospec::io::{
    fmt_f64, format_grid, format_kernel, format_series, grids_identical, parse_grid, parse_kernel, parse_series, Grid,
    GridData, GridHeader, KernelDump, Manifest,
};
use evospec::kernel::{make_kernel, KernelShape};
use evospec::render::{format_pgm, parse_pgm, render, Scaling};
use evospec::signal::TimeSeries;
use evospec::taper::TaperFamily;

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        any::<f64>().prop_filter("finite", |v| v.is_finite()),
        -1e3f64..1e3,
        Just(f64::MIN_POSITIVE / 8.0),
        Just(-0.0),
    ]
}

fn header(family: TaperFamily, len: usize, n: usize) -> GridHeader {
    GridHeader {
        df: 1.0 / (2 * len) as f64,
        dt: len as f64 / 2.0,
        p_f: 0.5,
        p_t: 0.5,
        taper_family: family,
        taper_len: len,
        n_data: Some(n),
        provenance: Some("0123abcd".into()),
        name: Some("theta_hat".into()),
    }
}

fn grid_strategy() -> impl Strategy<Value = Grid> {
    (1usize..6, 1usize..6, any::<bool>(), any::<bool>(), 3usize..40)
        .prop_flat_map(|(nf, nt, complex, sine, len)| {
            let family = if sine { TaperFamily::Sine } else { TaperFamily::Uniform };
            let len = 2 * (len / 2) + 1;
            (prop::collection::vec((finite(), finite()), nf * nt)).prop_map(move |vals| {
                let h = header(family, len, 100 * len);
                let data = if complex {
                    GridData::Complex(Array2::from_shape_fn((nf, nt), |(k, j)| {
                        let (re, im) = vals[k * nt + j];
                        Complex64::new(re, im)
                    }))
                } else {
                    GridData::Real(Array2::from_shape_fn((nf, nt), |(k, j)| vals[k * nt + j].0))
                };
                Grid { header: h, data }
            })
        })
}

proptest! {
    #[test]
    fn formatted_floats_parse_back_exactly(v in finite()) {
        let back: f64 = fmt_f64(v).parse().unwrap();
        prop_assert_eq!(back.to_bits(), v.to_bits());
    }

    #[test]
    fn series_round_trip(xs in prop::collection::vec(finite(), 1..200), seed in any::<Option<u64>>()) {
        let s = TimeSeries::new(xs).unwrap();
        let file = parse_series(&format_series(&s, seed, &[("preset".into(), "am".into())])).unwrap();
        prop_assert_eq!(file.seed, seed);
        for (a, b) in file.series.samples().iter().zip(s.samples()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn grid_round_trip(g in grid_strategy()) {
        let back = parse_grid(&format_grid(&g)).unwrap();
        prop_assert!(grids_identical(&g, &back));
        prop_assert_eq!(back.header, g.header);
    }

    #[test]
    fn kernel_round_trip(q in 0usize..3, extra in 1usize..4, h in 1.0f64..6.0) {
        let p = q + 2 * extra;
        let m = ((2.0 * h).ceil() as usize).max(p);
        let k = make_kernel::<f64>(q, p, h, m, KernelShape::MinimalNorm).unwrap();
        let d = KernelDump::from_kernel(&k);
        prop_assert_eq!(parse_kernel(&format_kernel(&d)).unwrap(), d);
    }

    #[test]
    fn manifest_round_trip(pairs in prop::collection::vec(("[a-z][a-z_.]{0,12}", "[ -~]{0,20}"), 0..10)) {
        let mut m = Manifest::default();
        for (k, v) in &pairs {
            m.push(k.clone(), v.trim());
        }
        prop_assert_eq!(Manifest::parse(&m.format()).unwrap(), m);
    }

    #[test]
    fn pgm_round_trip(nf in 1usize..20, nt in 1usize..20, seed in any::<u64>()) {
        let a = Array2::from_shape_fn((nf, nt), |(k, j)| ((seed ^ (k * 31 + j) as u64) % 1000) as f64);
        let img = render(&a, Scaling::Linear).unwrap();
        prop_assert_eq!(parse_pgm(&format_pgm(&img)).unwrap(), img);
    }
}

#[test]
fn malformed_inputs_are_rejected() {
    assert!(parse_series("").is_err());
    assert!(parse_series("1\nnan?\n").is_err());
    assert!(parse_kernel("# 0 2\n1\n").is_err());
    let g = Grid::real(header(TaperFamily::Sine, 5, 100), Array2::zeros((2, 2)));
    let text = format_grid(&g);
    let truncated: String = text.lines().take(text.lines().count() - 1).map(|l| format!("{l}\n")).collect();
    assert!(parse_grid(&truncated).is_err());
}
