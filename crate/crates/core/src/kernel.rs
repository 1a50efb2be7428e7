//! Discrete kernels of type `(q,p)`: weights `μ_j` whose moments satisfy
//! `Σ_j j^m μ_j = q!·H^q·δ_{m,q}` for `m < p`.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelShape {
    /// Least `Σμ²` subject to the moment conditions.
    MinimalNorm,
    /// Least `Σ μ_j²/w_j` with biweight `w_j = (1−(j/(M+1))²)²`.
    BiweightDamped,
}

impl KernelShape {
    pub fn name(self) -> &'static str {
        match self {
            KernelShape::MinimalNorm => "minimal_norm",
            KernelShape::BiweightDamped => "biweight_damped",
        }
    }

    fn weight(self, j: isize, m: usize) -> f64 {
        match self {
            KernelShape::MinimalNorm => 1.0,
            KernelShape::BiweightDamped => {
                let u = j as f64 / (m as f64 + 1.0);
                (1.0 - u * u).powi(2)
            }
        }
    }
}

impl fmt::Display for KernelShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelShape {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minimal_norm" => Ok(KernelShape::MinimalNorm),
            "biweight_damped" => Ok(KernelShape::BiweightDamped),
            other => Err(Error::invalid("shape", format!("unknown kernel shape `{other}`"))),
        }
    }
}

/// Default index bound `M = ⌈2H⌉`.
pub fn default_index_bound(halfwidth: f64) -> usize {
    (2.0 * halfwidth - 1e-9).ceil().max(1.0) as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct Kernel1D<T> {
    coeffs: Vec<T>,
    /// Index of `coeffs[0]`; the support is `lo ..= lo + len − 1`.
    lo: isize,
    pub q: usize,
    pub p: usize,
    pub halfwidth: T,
    pub index_bound: usize,
    pub shape: KernelShape,
}

impl<T: Real> Kernel1D<T> {
    pub fn coeffs(&self) -> &[T] {
        &self.coeffs
    }

    pub fn lo(&self) -> isize {
        self.lo
    }

    pub fn hi(&self) -> isize {
        self.lo + self.coeffs.len() as isize - 1
    }

    /// `(j, μ_j)` over the support.
    pub fn indexed(&self) -> impl Iterator<Item = (isize, T)> + '_ {
        let lo = self.lo;
        self.coeffs
            .iter()
            .enumerate()
            .map(move |(i, &c)| (lo + i as isize, c))
    }

    /// `μ_j`, zero off the support.
    pub fn get(&self, j: isize) -> T {
        if j < self.lo || j > self.hi() {
            T::zero()
        } else {
            self.coeffs[(j - self.lo) as usize]
        }
    }

    /// Raw moment `Σ_j j^m μ_j`.
    pub fn raw_moment(&self, m: usize) -> T {
        self.indexed()
            .map(|(j, c)| T::from_isize_lossy(j).powi(m as i32) * c)
            .sum()
    }

    /// Halfwidth-normalized moment `Σ_j (j/H)^m μ_j`; equals `q!·δ_{m,q}` for `m < p`.
    pub fn normalized_moment(&self, m: usize) -> T {
        let h = self.halfwidth;
        self.indexed()
            .map(|(j, c)| (T::from_isize_lossy(j) / h).powi(m as i32) * c)
            .sum()
    }

    /// Largest deviation of the normalized moments from their targets.
    pub fn max_moment_error(&self) -> f64 {
        let qf = factorial(self.q);
        (0..self.p)
            .map(|m| {
                let target = if m == self.q { qf } else { 0.0 };
                (self.normalized_moment(m).as_f64() - target).abs()
            })
            .fold(0.0, f64::max)
    }

    /// `Σ μ_j²`.
    pub fn roughness(&self) -> T {
        self.coeffs.iter().map(|&c| c * c).sum()
    }

    pub fn moments(&self) -> KernelMoments<T> {
        let p = self.p;
        KernelMoments {
            c_qp: self.normalized_moment(p) / T::lit(factorial(p)),
            c2_qp: self.normalized_moment(p + 2) / T::lit(factorial(p + 2)),
            m2: self.roughness(),
        }
    }

    /// Identity kernel `μ = δ_0` (type `(0, 1)`), used for unsmoothed axes.
    pub fn identity() -> Self {
        Kernel1D {
            coeffs: vec![T::one()],
            lo: 0,
            q: 0,
            p: 1,
            halfwidth: T::one(),
            index_bound: 0,
            shape: KernelShape::MinimalNorm,
        }
    }

    /// Same kernel with the factor `H^q` removed, i.e. weights for `∂^q` per
    /// unit lattice spacing.
    pub fn unit_scaled(&self) -> Vec<T> {
        let s = self.halfwidth.powi(self.q as i32);
        self.coeffs.iter().map(|&c| c / s).collect()
    }
}

/// Normalized moments of a kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelMoments<T> {
    /// `C(q,p) = Σ j^p μ_j / (p!·H^p)`.
    pub c_qp: T,
    /// `C₂(q,p) = Σ j^{p+2} μ_j / ((p+2)!·H^{p+2})`.
    pub c2_qp: T,
    /// `m₂ = Σ μ_j²`.
    pub m2: T,
}

pub(crate) fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// Interior kernel on `[−M, M]`.
pub fn make_kernel<T: Real>(
    q: usize,
    p: usize,
    halfwidth: T,
    index_bound: usize,
    shape: KernelShape,
) -> Result<Kernel1D<T>> {
    if p <= q {
        return Err(Error::invalid("p", format!("kernel order p={p} must exceed q={q}")));
    }
    if !(halfwidth > T::zero()) {
        return Err(Error::invalid("halfwidth", format!("must be positive, got {halfwidth}")));
    }
    if halfwidth > T::from_usize_lossy(index_bound) + T::lit(1e-9) {
        return Err(Error::invalid(
            "halfwidth",
            format!("halfwidth {halfwidth} exceeds index bound {index_bound}"),
        ));
    }
    let m = index_bound as isize;
    solve_kernel(q, p, halfwidth, index_bound, -m, m, shape)
}

/// Re-solve the moment system of `interior` on `[−M + left_cut, M − right_cut]`.
pub fn edge_kernel<T: Real>(interior: &Kernel1D<T>, left_cut: usize, right_cut: usize) -> Result<Kernel1D<T>> {
    let m = interior.index_bound as isize;
    let lo = -m + left_cut as isize;
    let hi = m - right_cut as isize;
    solve_kernel(
        interior.q,
        interior.p,
        interior.halfwidth,
        interior.index_bound,
        lo,
        hi,
        interior.shape,
    )
}

fn solve_kernel<T: Real>(
    q: usize,
    p: usize,
    halfwidth: T,
    index_bound: usize,
    lo: isize,
    hi: isize,
    shape: KernelShape,
) -> Result<Kernel1D<T>> {
    let points = if hi >= lo { (hi - lo + 1) as usize } else { 0 };
    if points < p {
        return Err(Error::InfeasibleKernel { q, p, points });
    }
    // Basis s = j/M keeps the monomials O(1); the constraints become
    // Σ s^m μ = (H/M)^m q! δ_{mq}.
    let scale = T::from_usize_lossy(index_bound.max(1));
    let idx: Vec<isize> = (lo..=hi).collect();
    let sqrt_w: Vec<T> = idx
        .iter()
        .map(|&j| T::lit(shape.weight(j, index_bound).sqrt()))
        .collect();
    let s: Vec<T> = idx.iter().map(|&j| T::from_isize_lossy(j) / scale).collect();
    // rows of B = A·√W
    let rows: Vec<Vec<T>> = (0..p)
        .map(|k| {
            s.iter()
                .zip(&sqrt_w)
                .map(|(&sj, &wj)| sj.powi(k as i32) * wj)
                .collect()
        })
        .collect();
    let (qmat, rmat) = gram_schmidt(&rows).ok_or(Error::InfeasibleKernel { q, p, points })?;

    let ratio = halfwidth / scale;
    let target: Vec<T> = (0..p)
        .map(|k| {
            if k == q {
                ratio.powi(q as i32) * T::lit(factorial(q))
            } else {
                T::zero()
            }
        })
        .collect();

    let apply = |rhs: &[T]| -> Vec<T> {
        // R^T z = rhs, ν = Q z, μ = √W ν
        let mut z = vec![T::zero(); p];
        for i in 0..p {
            let mut acc = rhs[i];
            for k in 0..i {
                acc = acc - rmat[k][i] * z[k];
            }
            z[i] = acc / rmat[i][i];
        }
        (0..points)
            .map(|n| {
                let nu: T = (0..p).map(|k| qmat[k][n] * z[k]).sum();
                nu * sqrt_w[n]
            })
            .collect()
    };

    let mut mu = apply(&target);
    for _ in 0..2 {
        let resid: Vec<T> = (0..p)
            .map(|k| {
                let got: T = s.iter().zip(&mu).map(|(&sj, &c)| sj.powi(k as i32) * c).sum();
                target[k] - got
            })
            .collect();
        let corr = apply(&resid);
        for (c, d) in mu.iter_mut().zip(corr) {
            *c = *c + d;
        }
    }

    let kernel = Kernel1D {
        coeffs: mu,
        lo,
        q,
        p,
        halfwidth,
        index_bound,
        shape,
    };
    if !kernel.coeffs.iter().all(|c| c.is_finite()) {
        return Err(Error::Numerical(format!(
            "kernel ({q},{p}) on [{lo},{hi}] has non-finite coefficients"
        )));
    }
    Ok(kernel)
}

/// Modified Gram–Schmidt with one reorthogonalization pass. Rows are the
/// vectors; returns orthonormal rows `Q` and upper-triangular `R` with
/// `rows[i] = Σ_k R[k][i] Q[k]`. `None` when the rows are linearly dependent.
fn gram_schmidt<T: Real>(rows: &[Vec<T>]) -> Option<(Vec<Vec<T>>, Vec<Vec<T>>)> {
    let p = rows.len();
    let mut q: Vec<Vec<T>> = Vec::with_capacity(p);
    let mut r = vec![vec![T::zero(); p]; p];
    let dot = |a: &[T], b: &[T]| -> T { a.iter().zip(b).map(|(&x, &y)| x * y).sum() };
    for i in 0..p {
        let mut v = rows[i].clone();
        let orig = dot(&v, &v).sqrt();
        for _pass in 0..2 {
            for k in 0..i {
                let c = dot(&q[k], &v);
                r[k][i] = r[k][i] + c;
                for (vn, &qn) in v.iter_mut().zip(&q[k]) {
                    *vn = *vn - c * qn;
                }
            }
        }
        let norm = dot(&v, &v).sqrt();
        if !(norm > orig * T::epsilon().sqrt() * T::lit(1e-3)) {
            return None;
        }
        r[i][i] = norm;
        q.push(v.into_iter().map(|x| x / norm).collect());
    }
    Some((q, r))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct CacheKey {
    q: usize,
    p: usize,
    m: usize,
    left: usize,
    right: usize,
    shape: KernelShape,
}

/// Thread-safe cache of unit-halfwidth kernels keyed by order, support and
/// truncation. For a fixed index bound the `(q,p)` kernel with halfwidth `H`
/// is `H^q` times the unit one, so only `M` and the cuts matter.
#[derive(Debug, Default, Clone)]
pub struct KernelCache {
    inner: Arc<Mutex<HashMap<CacheKey, Arc<Kernel1D<f64>>>>>,
}

impl KernelCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Kernel of type `(q,p)` on `[−M+left, M−right]`, normalized to `H = 1`
    /// (so `Σ j^q μ_j = q!`).
    pub fn get(
        &self,
        q: usize,
        p: usize,
        m: usize,
        left: usize,
        right: usize,
        shape: KernelShape,
    ) -> Result<Arc<Kernel1D<f64>>> {
        let key = CacheKey {
            q,
            p,
            m,
            left,
            right,
            shape,
        };
        if let Some(k) = self.inner.lock().expect("kernel cache poisoned").get(&key) {
            return Ok(k.clone());
        }
        let mi = m as isize;
        let k = Arc::new(solve_kernel(q, p, 1.0, m, -mi + left as isize, mi - right as isize, shape)?);
        self.inner
            .lock()
            .expect("kernel cache poisoned")
            .insert(key, k.clone());
        Ok(k)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("kernel cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_two_kernel_is_uniform() {
        let k = make_kernel::<f64>(0, 2, 3.0, 3, KernelShape::MinimalNorm).unwrap();
        for &c in k.coeffs() {
            assert!((c - 1.0 / 7.0).abs() < 1e-14);
        }
        assert!(k.max_moment_error() < 1e-13);
    }

    #[test]
    fn first_derivative_kernel_moments() {
        let h = 2.5;
        let k = make_kernel::<f64>(1, 3, h, 5, KernelShape::MinimalNorm).unwrap();
        assert!(k.raw_moment(0).abs() < 1e-12);
        assert!((k.raw_moment(1) - h).abs() < 1e-12);
        assert!(k.raw_moment(2).abs() < 1e-12);
        // antisymmetric
        for j in 1..=5 {
            assert!((k.get(j) + k.get(-j)).abs() < 1e-14);
        }
    }

    #[test]
    fn fourth_order_kernel_moments() {
        let k = make_kernel::<f64>(0, 4, 10.0, 10, KernelShape::MinimalNorm).unwrap();
        assert!(k.raw_moment(2).abs() < 1e-9);
        let c = k.moments().c_qp;
        assert!(c.is_finite() && c != 0.0);
    }

    #[test]
    fn biweight_kernel_satisfies_moments() {
        let k = make_kernel::<f64>(2, 4, 4.0, 8, KernelShape::BiweightDamped).unwrap();
        assert!(k.max_moment_error() < 1e-10);
        let mn = make_kernel::<f64>(2, 4, 4.0, 8, KernelShape::MinimalNorm).unwrap();
        assert!(k.roughness() >= mn.roughness());
    }

    #[test]
    fn edge_kernel_without_cut_matches_interior() {
        let k = make_kernel::<f64>(1, 4, 3.0, 6, KernelShape::MinimalNorm).unwrap();
        let e = edge_kernel(&k, 0, 0).unwrap();
        for (a, b) in k.coeffs().iter().zip(e.coeffs()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn one_sided_edge_kernel() {
        let k = make_kernel::<f64>(0, 2, 4.0, 8, KernelShape::MinimalNorm).unwrap();
        let e = edge_kernel(&k, 8, 0).unwrap();
        assert_eq!(e.lo(), 0);
        assert!((e.raw_moment(0) - 1.0).abs() < 1e-12);
        assert!(e.raw_moment(1).abs() < 1e-10);
    }

    #[test]
    fn severe_truncation_is_infeasible() {
        let k = make_kernel::<f64>(0, 4, 2.0, 4, KernelShape::MinimalNorm).unwrap();
        // 9 points, cut 6 leaves 3 = p − 1
        assert!(matches!(
            edge_kernel(&k, 6, 0),
            Err(Error::InfeasibleKernel { points: 3, .. })
        ));
        assert!(edge_kernel(&k, 5, 0).is_ok());
    }

    #[test]
    fn rejects_bad_orders() {
        assert!(make_kernel::<f64>(2, 2, 1.0, 2, KernelShape::MinimalNorm).is_err());
        assert!(make_kernel::<f64>(0, 2, 5.0, 2, KernelShape::MinimalNorm).is_err());
    }

    #[test]
    fn cache_returns_unit_kernels() {
        let cache = KernelCache::new();
        let a = cache.get(1, 3, 4, 0, 0, KernelShape::MinimalNorm).unwrap();
        let b = cache.get(1, 3, 4, 0, 0, KernelShape::MinimalNorm).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        assert!((a.raw_moment(1) - 1.0).abs() < 1e-12);
        let scaled = make_kernel::<f64>(1, 3, 2.0, 4, KernelShape::MinimalNorm).unwrap();
        for (x, y) in scaled.unit_scaled().iter().zip(a.coeffs()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn single_precision_kernel() {
        let k = make_kernel::<f32>(0, 4, 3.0, 6, KernelShape::MinimalNorm).unwrap();
        assert!(k.max_moment_error() < 1e-4);
    }

    #[test]
    fn default_bound() {
        assert_eq!(default_index_bound(2.0), 4);
        assert_eq!(default_index_bound(2.2), 5);
        assert_eq!(default_index_bound(0.1), 1);
    }
}
