//! Expected loss of a smoothed estimate and its leading-order minimizer in
//! the halfwidths.
//!
//! Halfwidths are parameterized as `h = √(h_t·h_f)` and `r = √(h_f/h_t)`, so
//! `h_t = h/r` and `h_f = h·r`. Derivative `q` is taken along time; swap the
//! roles of `dtp`/`dfp` for frequency derivatives.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kernel::KernelMoments;

/// Plug-in derivatives of `θ` in normalized units `t̄ = t/τ`, `f̄ = f/λ_F`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DerivativeBundle {
    /// `∂_t̄^p θ`.
    pub dtp: f64,
    /// `∂_f̄^p θ`.
    pub dfp: f64,
    /// `∂_t̄^{p+2} θ`.
    pub dtp2: Option<f64>,
    /// `∂_f̄^{p+2} θ`.
    pub dfp2: Option<f64>,
    /// `∂_f̄^p ∂_t̄^p θ`.
    pub mixed: Option<f64>,
}

impl DerivativeBundle {
    pub fn new(dtp: f64, dfp: f64) -> Self {
        DerivativeBundle {
            dtp,
            dfp,
            ..Default::default()
        }
    }

    pub fn is_finite(&self) -> bool {
        self.dtp.is_finite()
            && self.dfp.is_finite()
            && [self.dtp2, self.dfp2, self.mixed]
                .iter()
                .all(|v| v.map_or(true, f64::is_finite))
    }
}

/// Moments of the frequency `(0,p)` and time `(q,p)` kernels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentPair {
    /// `C(0,p)` of the frequency kernel.
    pub c0: f64,
    /// `C(q,p)` of the time kernel.
    pub cq: f64,
    pub c2_0: f64,
    pub c2_q: f64,
}

impl MomentPair {
    pub fn from_kernels<T: crate::Real>(freq: &KernelMoments<T>, time: &KernelMoments<T>) -> Self {
        MomentPair {
            c0: freq.c_qp.as_f64(),
            cq: time.c_qp.as_f64(),
            c2_0: freq.c2_qp.as_f64(),
            c2_q: time.c2_qp.as_f64(),
        }
    }

    pub fn equal(c: f64) -> Self {
        MomentPair {
            c0: c,
            cq: c,
            c2_0: 0.0,
            c2_q: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossMode {
    /// Squared leading-order bias plus variance.
    #[default]
    Leading,
    /// Adds the `(p+2)`-order and mixed-derivative bias terms.
    Extended,
}

impl FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "leading" => Ok(LossMode::Leading),
            "extended" => Ok(LossMode::Extended),
            other => Err(Error::invalid("loss_mode", format!("unknown mode `{other}`"))),
        }
    }
}

/// Bias of the `q`-th time-derivative estimate at halfwidths `(h_t, h_f)`.
pub fn bias(derivs: &DerivativeBundle, q: usize, p: usize, m: &MomentPair, h_t: f64, h_f: f64, mode: LossMode) -> f64 {
    let (q, p) = (q as i32, p as i32);
    let mut b = m.c0 * derivs.dfp * h_f.powi(p) * h_t.powi(-q) + m.cq * derivs.dtp * h_t.powi(p - q);
    if mode == LossMode::Extended {
        b += m.c2_0 * derivs.dfp2.unwrap_or(0.0) * h_f.powi(p + 2) * h_t.powi(-q)
            + m.c2_q * derivs.dtp2.unwrap_or(0.0) * h_t.powi(p + 2 - q)
            + m.cq * m.c0 * derivs.mixed.unwrap_or(0.0) * h_f.powi(p) * h_t.powi(p - q);
    }
    b
}

/// `bias² + ρ/(h_f·h_t^{2q+1})`.
#[allow(clippy::too_many_arguments)]
pub fn expected_loss(
    derivs: &DerivativeBundle,
    q: usize,
    p: usize,
    moments: &MomentPair,
    rho: f64,
    h_t: f64,
    h_f: f64,
    mode: LossMode,
) -> Result<f64> {
    if !(h_t > 0.0 && h_f > 0.0) {
        return Err(Error::invalid(
            "halfwidth",
            format!("halfwidths must be positive, got ({h_t}, {h_f})"),
        ));
    }
    let b = bias(derivs, q, p, moments, h_t, h_f, mode);
    Ok(b * b + rho / (h_f * h_t.powi(2 * q as i32 + 1)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AspectRatio {
    pub r: f64,
    pub regularized: bool,
}

/// Range outside which `r` is clamped when one derivative vanishes.
pub const ASPECT_RATIO_BOUNDS: (f64, f64) = (1e-3, 1e3);

/// Stationary aspect ratio. With same-signed bias terms this is the interior
/// root `r^{2p} = (p−q)·C(q,p)·∂_t̄^pθ / ((2pq+p+q)·C(0,p)·∂_f̄^pθ)`; otherwise
/// the cross term is damped by `reg_b` and the positive root of the resulting
/// quadratic in `r^{2p}` is taken.
pub fn optimal_aspect_ratio(derivs: &DerivativeBundle, q: usize, p: usize, m: &MomentPair, reg_b: f64) -> Result<AspectRatio> {
    if p <= q {
        return Err(Error::invalid("p", format!("need p > q, got p={p}, q={q}")));
    }
    let (pf, qf) = (p as f64, q as f64);
    let a_coef = 2.0 * pf * qf + pf + qf;
    let f_term = m.c0 * derivs.dfp;
    let t_term = m.cq * derivs.dtp;
    if f_term == 0.0 && t_term == 0.0 {
        return Ok(AspectRatio {
            r: 1.0,
            regularized: true,
        });
    }
    let (lo, hi) = ASPECT_RATIO_BOUNDS;
    if f_term * t_term > 0.0 {
        let x = (pf - qf) * t_term / (a_coef * f_term);
        return Ok(AspectRatio {
            r: x.powf(1.0 / (2.0 * pf)),
            regularized: false,
        });
    }
    if f_term == 0.0 || t_term == 0.0 {
        // no frequency bias: widen in frequency as far as allowed, and vice versa
        let r = if f_term == 0.0 { hi } else { lo };
        return Ok(AspectRatio { r, regularized: true });
    }
    let a = a_coef * f_term * f_term;
    let b = 2.0 * qf * (pf + 1.0) * reg_b * f_term * t_term;
    let c = (pf - qf) * t_term * t_term;
    // positive root of a x² + b x − c = 0, written to avoid cancellation
    let disc = (b * b + 4.0 * a * c).sqrt();
    let x = if b <= 0.0 { (disc - b) / (2.0 * a) } else { 2.0 * c / (disc + b) };
    Ok(AspectRatio {
        r: x.powf(1.0 / (2.0 * pf)).clamp(lo, hi),
        regularized: true,
    })
}

/// `K(r) = [C(0,p)·∂_f̄^pθ·r^p + C(q,p)·∂_t̄^pθ·r^{−p}]²`.
pub fn k_of_r(derivs: &DerivativeBundle, p: usize, m: &MomentPair, r: f64) -> f64 {
    let p = p as i32;
    let g = m.c0 * derivs.dfp * r.powi(p) + m.cq * derivs.dtp * r.powi(-p);
    g * g
}

/// Bounds on the normalized halfwidths, from the lattice extent and spacing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HalfwidthLimits {
    pub h_t: (f64, f64),
    pub h_f: (f64, f64),
}

impl HalfwidthLimits {
    pub fn unbounded() -> Self {
        HalfwidthLimits {
            h_t: (0.0, f64::INFINITY),
            h_f: (0.0, f64::INFINITY),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSolution {
    pub r: f64,
    pub h: f64,
    pub h_t: f64,
    pub h_f: f64,
    /// Leading-order loss at the returned halfwidths.
    pub loss: f64,
    pub regularized: bool,
    pub clamped: bool,
    /// `K_b(r)`.
    pub k_value: f64,
}

/// Leading-order optimal halfwidths:
/// `h_o^{2p+2} = ((q+1)/(p−q))·ρ/K_b(r)` with
/// `K_b = max(K, reg_b·[C(0,p)²(∂_f̄^pθ)² + C(q,p)²(∂_t̄^pθ)²])`.
pub fn optimal_halfwidth(
    derivs: &DerivativeBundle,
    q: usize,
    p: usize,
    m: &MomentPair,
    rho: f64,
    reg_b: f64,
    limits: &HalfwidthLimits,
) -> Result<LossSolution> {
    if !(rho > 0.0) {
        return Err(Error::invalid("rho", format!("must be positive, got {rho}")));
    }
    if !(reg_b > 0.0 && reg_b <= 1.0) {
        return Err(Error::invalid("reg_b", format!("must lie in (0,1], got {reg_b}")));
    }
    if !derivs.is_finite() {
        return Err(Error::Numerical(format!("non-finite derivatives {derivs:?}")));
    }
    let ar = optimal_aspect_ratio(derivs, q, p, m, reg_b)?;
    let k = k_of_r(derivs, p, m, ar.r);
    let floor = reg_b * ((m.c0 * derivs.dfp).powi(2) + (m.cq * derivs.dtp).powi(2));
    let k_b = k.max(floor);
    let mut regularized = ar.regularized || floor > k;
    let (pf, qf) = (p as f64, q as f64);
    let h = if k_b > 0.0 {
        ((qf + 1.0) / (pf - qf) * rho / k_b).powf(1.0 / (2.0 * pf + 2.0))
    } else {
        regularized = true;
        f64::INFINITY
    };
    let (mut h_t, mut h_f) = (h / ar.r, h * ar.r);
    if !h.is_finite() {
        h_t = limits.h_t.1;
        h_f = limits.h_f.1;
    }
    let ct = h_t.clamp(limits.h_t.0, limits.h_t.1);
    let cf = h_f.clamp(limits.h_f.0, limits.h_f.1);
    let clamped = !h.is_finite() || ct != h_t || cf != h_f;
    let (h_t, h_f) = (ct, cf);
    if !(h_t.is_finite() && h_f.is_finite() && h_t > 0.0 && h_f > 0.0) {
        return Err(Error::Numerical(format!(
            "halfwidths ({h_t}, {h_f}) are not finite and positive; supply finite limits"
        )));
    }
    let loss = expected_loss(derivs, q, p, m, rho, h_t, h_f, LossMode::Leading)?;
    Ok(LossSolution {
        r: (h_f / h_t).sqrt(),
        h: (h_t * h_f).sqrt(),
        h_t,
        h_f,
        loss,
        regularized,
        clamped,
        k_value: k_b,
    })
}

/// Halfwidths minimizing the loss integrated over the lattice, given the
/// integrated squares `I_TT = ∫(∂_t̄^pθ)²`, `I_FF = ∫(∂_f̄^pθ)²` and the
/// cross term `I_FT = ∫∂_f̄^pθ·∂_t̄^pθ`:
/// `(2pq+p+q)C(0,p)²I_FF·r^{2p} + 2q(p+1)C(0,p)C(q,p)I_FT − (p−q)C(q,p)²I_TT·r^{−2p} = 0`.
#[allow(clippy::too_many_arguments)]
pub fn integrated_halfwidth(
    i_tt: f64,
    i_ff: f64,
    i_ft: f64,
    q: usize,
    p: usize,
    m: &MomentPair,
    rho: f64,
    reg_b: f64,
    limits: &HalfwidthLimits,
) -> Result<LossSolution> {
    if !(reg_b > 0.0 && reg_b <= 1.0) {
        return Err(Error::invalid("reg_b", format!("must lie in (0,1], got {reg_b}")));
    }
    if p <= q {
        return Err(Error::invalid("p", format!("need p > q, got p={p}, q={q}")));
    }
    if !(rho > 0.0) {
        return Err(Error::invalid("rho", format!("must be positive, got {rho}")));
    }
    if !(i_tt >= 0.0 && i_ff >= 0.0 && i_ft.is_finite()) {
        return Err(Error::Numerical(format!(
            "invalid integrated derivatives ({i_tt}, {i_ff}, {i_ft})"
        )));
    }
    let (pf, qf) = (p as f64, q as f64);
    let a = (2.0 * pf * qf + pf + qf) * m.c0 * m.c0 * i_ff;
    let b = 2.0 * qf * (pf + 1.0) * m.c0 * m.cq * i_ft;
    let c = (pf - qf) * m.cq * m.cq * i_tt;
    let (lo, hi) = ASPECT_RATIO_BOUNDS;
    let mut regularized = false;
    let r = if a > 0.0 && c > 0.0 {
        let disc = (b * b + 4.0 * a * c).sqrt();
        let x = if b <= 0.0 { (disc - b) / (2.0 * a) } else { 2.0 * c / (disc + b) };
        x.powf(1.0 / (2.0 * pf))
    } else {
        regularized = true;
        match (a > 0.0, c > 0.0) {
            (false, false) => 1.0,
            (false, true) => hi,
            _ => lo,
        }
    };
    let p2 = 2 * p as i32;
    let k = m.c0 * m.c0 * i_ff * r.powi(p2) + 2.0 * m.c0 * m.cq * i_ft + m.cq * m.cq * i_tt * r.powi(-p2);
    let floor = reg_b * (m.c0 * m.c0 * i_ff + m.cq * m.cq * i_tt);
    if floor > k {
        regularized = true;
    }
    let k = k.max(floor);
    let h = if k > 0.0 {
        ((qf + 1.0) / (pf - qf) * rho / k).powf(1.0 / (2.0 * pf + 2.0))
    } else {
        regularized = true;
        f64::INFINITY
    };
    let (raw_t, raw_f) = if h.is_finite() { (h / r, h * r) } else { (limits.h_t.1, limits.h_f.1) };
    let h_t = raw_t.clamp(limits.h_t.0, limits.h_t.1);
    let h_f = raw_f.clamp(limits.h_f.0, limits.h_f.1);
    if !(h_t.is_finite() && h_f.is_finite() && h_t > 0.0 && h_f > 0.0) {
        return Err(Error::Numerical(format!(
            "halfwidths ({h_t}, {h_f}) are not finite and positive; supply finite limits"
        )));
    }
    let qi = q as i32;
    let pi = p as i32;
    let sq_bias = m.c0 * m.c0 * i_ff * h_f.powi(2 * pi) * h_t.powi(-2 * qi)
        + 2.0 * m.c0 * m.cq * i_ft * h_f.powi(pi) * h_t.powi(pi - 2 * qi)
        + m.cq * m.cq * i_tt * h_t.powi(2 * (pi - qi));
    Ok(LossSolution {
        r: (h_f / h_t).sqrt(),
        h: (h_t * h_f).sqrt(),
        h_t,
        h_f,
        loss: sq_bias + rho / (h_f * h_t.powi(2 * qi + 1)),
        regularized,
        clamped: !h.is_finite() || h_t != raw_t || h_f != raw_f,
        k_value: k,
    })
}
