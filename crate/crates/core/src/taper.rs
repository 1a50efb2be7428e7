//! Data tapers, their spectral windows, and the bias moments that govern the
//! point-estimate bias.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaperFamily {
    /// `ν_j ≡ 1/√N`.
    Uniform,
    /// `ν_j ∝ sin(π(j + (N+1)/2)/(N+1))`.
    Sine,
}

impl TaperFamily {
    /// Bandwidth constant `c` in `w = c/N`.
    pub fn bandwidth_constant(self) -> f64 {
        match self {
            TaperFamily::Uniform => 1.0,
            TaperFamily::Sine => 1.5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaperFamily::Uniform => "uniform",
            TaperFamily::Sine => "sine",
        }
    }
}

impl fmt::Display for TaperFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaperFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(TaperFamily::Uniform),
            "sine" => Ok(TaperFamily::Sine),
            other => Err(Error::invalid("taper_family", format!("unknown family `{other}`"))),
        }
    }
}

/// Odd-length taper normalized to `Σ ν_j² = 1`, indexed `j ∈ [−(N−1)/2, (N−1)/2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Taper<T> {
    coeffs: Vec<T>,
    family: TaperFamily,
    bandwidth: T,
}

impl<T: Real> Taper<T> {
    pub fn new(family: TaperFamily, length: usize) -> Result<Self> {
        if length < 3 || length % 2 == 0 {
            return Err(Error::invalid(
                "length",
                format!("taper length must be odd and at least 3, got {length}"),
            ));
        }
        let raw: Vec<f64> = match family {
            TaperFamily::Uniform => vec![1.0; length],
            TaperFamily::Sine => (0..length)
                .map(|i| (std::f64::consts::PI * (i + 1) as f64 / (length + 1) as f64).sin())
                .collect(),
        };
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(Taper {
            coeffs: raw.iter().map(|v| T::lit(v / norm)).collect(),
            family,
            bandwidth: T::lit(family.bandwidth_constant() / length as f64),
        })
    }

    /// Same coefficients with a different nominal bandwidth `w`.
    pub fn with_bandwidth(mut self, w: T) -> Self {
        self.bandwidth = w;
        self
    }

    pub fn coeffs(&self) -> &[T] {
        &self.coeffs
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// `(N−1)/2`.
    pub fn half_length(&self) -> usize {
        (self.coeffs.len() - 1) / 2
    }

    pub fn family(&self) -> TaperFamily {
        self.family
    }

    pub fn bandwidth(&self) -> T {
        self.bandwidth
    }

    /// `(j, ν_j)` pairs with the symmetric index.
    pub fn indexed(&self) -> impl Iterator<Item = (isize, T)> + '_ {
        let h = self.half_length() as isize;
        self.coeffs
            .iter()
            .enumerate()
            .map(move |(i, &v)| (i as isize - h, v))
    }

    /// `V(f) = Σ_j ν_j e^{−2πijf}`.
    pub fn spectral_window(&self, f: T) -> Complex<T> {
        let two_pi = T::PI() + T::PI();
        self.indexed()
            .map(|(j, v)| Complex::from_polar(v, -two_pi * T::from_isize_lossy(j) * f))
            .fold(Complex::new(T::zero(), T::zero()), |a, b| a + b)
    }

    /// `∂_f V(f) = Σ_j (−2πij) ν_j e^{−2πijf}`.
    pub fn spectral_window_derivative(&self, f: T) -> Complex<T> {
        let two_pi = T::PI() + T::PI();
        self.indexed()
            .map(|(j, v)| {
                let jj = T::from_isize_lossy(j);
                Complex::from_polar(v, -two_pi * jj * f) * Complex::new(T::zero(), -two_pi * jj)
            })
            .fold(Complex::new(T::zero(), T::zero()), |a, b| a + b)
    }

    /// Bias moments `B̄_ν = w⁻²∫f²|V|²df` and `D̄_ν = (w²/4π²)∫|∂_fV|²df`.
    ///
    /// Both integrands are quadratic forms in `ν`, so the integrals are
    /// evaluated exactly: `∫f² e^{−2πimf} df` is `1/12` for `m = 0` and
    /// `(−1)^m/(2π²m²)` otherwise, and `∫|∂_fV|² = 4π² Σ j² ν_j²`.
    pub fn bias_moments(&self) -> TaperBiasMoments<T> {
        let pi2 = T::PI() * T::PI();
        let two = T::lit(2.0);
        let mut second = T::zero();
        for (j, vj) in self.indexed() {
            for (k, vk) in self.indexed() {
                let m = j - k;
                let weight = if m == 0 {
                    T::lit(1.0 / 12.0)
                } else {
                    let mm = T::from_isize_lossy(m * m);
                    let sign = if m % 2 == 0 { T::one() } else { -T::one() };
                    sign / (two * pi2 * mm)
                };
                second = second + vj * vk * weight;
            }
        }
        let j2: T = self
            .indexed()
            .map(|(j, v)| T::from_isize_lossy(j * j) * v * v)
            .sum();
        let w = self.bandwidth;
        TaperBiasMoments {
            b_bar: second / (w * w),
            d_bar: w * w * j2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaperBiasMoments<T> {
    pub b_bar: T,
    pub d_bar: T,
}

/// Chosen taper length and bandwidth for given scalelengths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaperParams {
    pub length: usize,
    pub bandwidth: f64,
    /// `τ/λ_F < 9`: the length was clamped to the minimum of 3.
    pub clamped: bool,
    /// Scalelength surrogate of the point-estimate bias at the chosen taper.
    pub point_bias: f64,
}

/// Bandwidth and length balancing the two point-estimate bias terms:
/// `w = (λ_F/τ)^{1/2}` and `N` the odd integer nearest `c/w` (ties upward).
///
/// `theta_scale` only enters the reported surrogate bias, in which
/// `∂²_f̄ S → θ̄` and `|∂_t̄ A|² → θ̄/4`.
pub fn optimal_taper_params(
    tau: f64,
    lambda_f: f64,
    family: TaperFamily,
    theta_scale: f64,
) -> Result<TaperParams> {
    if !(tau > 0.0) || !(lambda_f > 0.0) {
        return Err(Error::invalid(
            "spec_scales",
            format!("tau and lambda_f must be positive, got ({tau}, {lambda_f})"),
        ));
    }
    let c = family.bandwidth_constant();
    let (length, bandwidth, clamped) = if tau / lambda_f < 9.0 {
        (3, c / 3.0, true)
    } else {
        let w = (lambda_f / tau).sqrt();
        (nearest_odd(c / w), w, false)
    };
    let moments = Taper::<f64>::new(family, length)?
        .with_bandwidth(bandwidth)
        .bias_moments();
    let point_bias = point_bias_surrogate(&moments, bandwidth, tau, lambda_f, theta_scale);
    Ok(TaperParams {
        length: length.max(3),
        bandwidth,
        clamped,
        point_bias,
    })
}

/// Leading-order bias of `|y_ν|²` with scalelength surrogates for the
/// spectral curvature and the amplitude's time derivative.
pub fn point_bias_surrogate(
    moments: &TaperBiasMoments<f64>,
    w: f64,
    tau: f64,
    lambda_f: f64,
    theta_scale: f64,
) -> f64 {
    theta_scale * moments.b_bar * (w / lambda_f).powi(2)
        + 0.25 * theta_scale * moments.d_bar / (tau * w).powi(2)
}

fn nearest_odd(x: f64) -> usize {
    let k = ((x - 1.0) / 2.0 + 0.5).floor().max(1.0);
    2 * k as usize + 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn uniform_taper_values() {
        let t = Taper::<f64>::new(TaperFamily::Uniform, 5).unwrap();
        for &v in t.coeffs() {
            assert_relative_eq!(v, 1.0 / 5f64.sqrt(), epsilon = 1e-15);
        }
        assert_relative_eq!(t.spectral_window(0.0).re, 5f64.sqrt(), epsilon = 1e-14);
        assert!(t.spectral_window(0.2).norm() < 1e-14);
        assert_relative_eq!(t.bandwidth(), 0.2);
    }

    #[test]
    fn rejects_even_or_short_lengths() {
        assert!(Taper::<f64>::new(TaperFamily::Uniform, 4).is_err());
        assert!(Taper::<f64>::new(TaperFamily::Sine, 1).is_err());
        assert!(Taper::<f64>::new(TaperFamily::Sine, 3).is_ok());
    }

    #[test]
    fn normalization_holds_for_both_families() {
        for fam in [TaperFamily::Uniform, TaperFamily::Sine] {
            for n in [3, 17, 65, 257] {
                let t = Taper::<f64>::new(fam, n).unwrap();
                let s: f64 = t.coeffs().iter().map(|v| v * v).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_precision_taper() {
        let t = Taper::<f32>::new(TaperFamily::Sine, 33).unwrap();
        let s: f32 = t.coeffs().iter().map(|v| v * v).sum();
        assert!((s - 1.0).abs() < 1e-5);
    }

    #[test]
    fn bias_moment_bandwidth_scaling() {
        let t = Taper::<f64>::new(TaperFamily::Sine, 21).unwrap();
        let w = t.bandwidth();
        let m1 = t.clone().bias_moments();
        let m2 = t.with_bandwidth(2.0 * w).bias_moments();
        assert_relative_eq!(m2.b_bar, m1.b_bar / 4.0, max_relative = 1e-14);
        assert_relative_eq!(m2.d_bar, m1.d_bar * 4.0, max_relative = 1e-14);
        assert!(m1.b_bar > 0.0 && m1.d_bar > 0.0);
    }

    #[test]
    fn taper_params_examples() {
        let p = optimal_taper_params(400.0, 0.25, TaperFamily::Uniform, 1.0).unwrap();
        assert_relative_eq!(p.bandwidth, 0.025, max_relative = 1e-14);
        assert_eq!(p.length, 41);
        assert!(!p.clamped);

        let q = optimal_taper_params(1600.0, 0.25, TaperFamily::Uniform, 1.0).unwrap();
        assert_eq!(q.bandwidth * 2.0, p.bandwidth);

        let d = optimal_taper_params(1.0, 1.0, TaperFamily::Sine, 1.0).unwrap();
        assert_eq!(d.length, 3);
        assert!(d.clamped);
    }

    #[test]
    fn nearest_odd_rounds_ties_up() {
        assert_eq!(nearest_odd(40.0), 41);
        assert_eq!(nearest_odd(39.9), 39);
        assert_eq!(nearest_odd(41.2), 41);
        assert_eq!(nearest_odd(0.3), 3);
    }
}
