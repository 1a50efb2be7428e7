//! Truncated Taylor arithmetic for exact partial derivatives of the preset
//! log-spectra.
//!
//! A [`Jet`] carries the coefficients `c_k = g^{(k)}(x0) / k!` of a univariate
//! series. Jets nest: `Jet<Jet<f64>>` carries a bivariate series, which is how
//! mixed partials such as `∂_f^p ∂_t^p θ` are obtained.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Number-like values closed under the elementary functions the presets use.
pub trait Analytic:
    Clone
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn constant_like(&self, v: f64) -> Self;
    fn scale(&self, s: f64) -> Self;
    fn exp(&self) -> Self;
    fn ln(&self) -> Self;
    fn sin(&self) -> Self;
    fn cos(&self) -> Self;
    /// Leading (value) coefficient as `f64`.
    fn value(&self) -> f64;
}

impl Analytic for f64 {
    fn constant_like(&self, v: f64) -> Self {
        v
    }
    fn scale(&self, s: f64) -> Self {
        self * s
    }
    fn exp(&self) -> Self {
        f64::exp(*self)
    }
    fn ln(&self) -> Self {
        f64::ln(*self)
    }
    fn sin(&self) -> Self {
        f64::sin(*self)
    }
    fn cos(&self) -> Self {
        f64::cos(*self)
    }
    fn value(&self) -> f64 {
        *self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Jet<S> {
    coeffs: Vec<S>,
}

impl<S: Analytic> Jet<S> {
    /// The independent variable `x0 + ε` truncated at `order`.
    pub fn variable(x0: S, order: usize) -> Self {
        let mut coeffs = vec![x0.constant_like(0.0); order + 1];
        if order >= 1 {
            coeffs[1] = x0.constant_like(1.0);
        }
        coeffs[0] = x0;
        Jet { coeffs }
    }

    pub fn constant(c: S, order: usize) -> Self {
        let mut coeffs = vec![c.constant_like(0.0); order + 1];
        coeffs[0] = c;
        Jet { coeffs }
    }

    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }

    /// Taylor coefficient `g^{(k)}/k!`.
    pub fn coeff(&self, k: usize) -> &S {
        &self.coeffs[k]
    }

    /// `k`-th derivative (coefficient times `k!`).
    pub fn derivative(&self, k: usize) -> S {
        let fact: f64 = (1..=k).map(|i| i as f64).product();
        self.coeffs[k].scale(fact)
    }

    fn zero(&self) -> S {
        self.coeffs[0].constant_like(0.0)
    }

    fn zip_with(&self, other: &Self, f: impl Fn(&S, &S) -> S) -> Self {
        let n = self.coeffs.len().min(other.coeffs.len());
        Jet {
            coeffs: (0..n).map(|i| f(&self.coeffs[i], &other.coeffs[i])).collect(),
        }
    }
}

impl<S: Analytic> Add for Jet<S> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        self.zip_with(&rhs, |a, b| a.clone() + b.clone())
    }
}

impl<S: Analytic> Sub for Jet<S> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self.zip_with(&rhs, |a, b| a.clone() - b.clone())
    }
}

impl<S: Analytic> Neg for Jet<S> {
    type Output = Self;
    fn neg(self) -> Self {
        Jet {
            coeffs: self.coeffs.into_iter().map(|c| -c).collect(),
        }
    }
}

impl<S: Analytic> Mul for Jet<S> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        let n = self.coeffs.len().min(rhs.coeffs.len());
        let coeffs = (0..n)
            .map(|k| {
                (0..=k).fold(self.zero(), |acc, i| {
                    acc + self.coeffs[i].clone() * rhs.coeffs[k - i].clone()
                })
            })
            .collect();
        Jet { coeffs }
    }
}

impl<S: Analytic> Div for Jet<S> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let n = self.coeffs.len().min(rhs.coeffs.len());
        let mut out: Vec<S> = Vec::with_capacity(n);
        for k in 0..n {
            let mut num = self.coeffs[k].clone();
            for i in 1..=k {
                num = num - rhs.coeffs[i].clone() * out[k - i].clone();
            }
            out.push(num / rhs.coeffs[0].clone());
        }
        Jet { coeffs: out }
    }
}

impl<S: Analytic> Analytic for Jet<S> {
    fn constant_like(&self, v: f64) -> Self {
        Jet::constant(self.coeffs[0].constant_like(v), self.order())
    }

    fn scale(&self, s: f64) -> Self {
        Jet {
            coeffs: self.coeffs.iter().map(|c| c.scale(s)).collect(),
        }
    }

    fn exp(&self) -> Self {
        let n = self.coeffs.len();
        let mut e: Vec<S> = Vec::with_capacity(n);
        e.push(self.coeffs[0].exp());
        for k in 1..n {
            let mut acc = self.zero();
            for i in 1..=k {
                acc = acc + self.coeffs[i].scale(i as f64) * e[k - i].clone();
            }
            e.push(acc.scale(1.0 / k as f64));
        }
        Jet { coeffs: e }
    }

    fn ln(&self) -> Self {
        let n = self.coeffs.len();
        let a0 = self.coeffs[0].clone();
        let mut l: Vec<S> = Vec::with_capacity(n);
        l.push(a0.ln());
        for k in 1..n {
            let mut acc = self.zero();
            for i in 1..k {
                acc = acc + l[i].scale(i as f64) * self.coeffs[k - i].clone();
            }
            l.push((self.coeffs[k].clone() - acc.scale(1.0 / k as f64)) / a0.clone());
        }
        Jet { coeffs: l }
    }

    fn sin(&self) -> Self {
        self.sin_cos().0
    }

    fn cos(&self) -> Self {
        self.sin_cos().1
    }

    fn value(&self) -> f64 {
        self.coeffs[0].value()
    }
}

impl<S: Analytic> Jet<S> {
    fn sin_cos(&self) -> (Self, Self) {
        let n = self.coeffs.len();
        let mut s: Vec<S> = Vec::with_capacity(n);
        let mut c: Vec<S> = Vec::with_capacity(n);
        s.push(self.coeffs[0].sin());
        c.push(self.coeffs[0].cos());
        for k in 1..n {
            let mut sk = self.zero();
            let mut ck = self.zero();
            for i in 1..=k {
                let da = self.coeffs[i].scale(i as f64);
                sk = sk + da.clone() * c[k - i].clone();
                ck = ck - da * s[k - i].clone();
            }
            s.push(sk.scale(1.0 / k as f64));
            c.push(ck.scale(1.0 / k as f64));
        }
        (Jet { coeffs: s }, Jet { coeffs: c })
    }
}
