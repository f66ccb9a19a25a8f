//! Expected activations of ReLU and RBF neurons under a conditional mixture,
//! and their exact gradients.
//!
//! For a component with completed mean `m̃_i` and degenerate diagonal
//! covariance `Σ̃_i` (zero on observed coordinates):
//!
//! * ReLU: `E[max(wᵀx + b, 0)] = Σ_i r_i s_i NR(μ_i / s_i)` with
//!   `μ_i = wᵀm̃_i + b` and `s_i² = Σ_{j∈J} σ^i_j w_j²`.
//! * RBF:  `E[N(c, Γ)(x)] = Σ_i r_i N(m̃_i − c, Γ + Σ̃_i)(0)`.

use crate::density::{ConditionalGmm, MissingPoint};
use crate::error::{Error, Result};
use crate::special::{normal_cdf, normal_pdf, nr, LN_2PI};

/// Below this value of `s_i²` a ReLU component is treated as a point mass.
pub const DEGENERATE_VARIANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct ReluUnit {
    pub w: Vec<f64>,
    pub b: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RbfUnit {
    pub c: Vec<f64>,
    /// `ln` of the diagonal of Γ.
    pub log_gamma_diag: Vec<f64>,
}

/// Gradients of one expected activation.
///
/// `d_unit` is `[d_w.., d_b]` for ReLU and `[d_c.., d_log_gamma..]` for RBF.
/// `d_means`/`d_vars` are row-major `k × D` over the completed mean and the
/// degenerate variance; entries at observed coordinates are exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationGradients {
    pub d_unit: Vec<f64>,
    pub d_resp: Vec<f64>,
    pub d_means: Vec<f64>,
    pub d_vars: Vec<f64>,
}

/// Accumulator for gradients with respect to a conditional's missing-coordinate
/// blocks (`k × |J|`).
#[derive(Clone, Debug)]
pub(crate) struct CondGrad {
    pub d_resp: Vec<f64>,
    pub d_means: Vec<f64>,
    pub d_vars: Vec<f64>,
}

impl CondGrad {
    pub fn zeros(cond: &ConditionalGmm) -> Self {
        let size = cond.k() * cond.missing().len();
        CondGrad {
            d_resp: vec![0.0; cond.k()],
            d_means: vec![0.0; size],
            d_vars: vec![0.0; size],
        }
    }

    fn expand(self, cond: &ConditionalGmm) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (k, d, nj) = (cond.k(), cond.dim(), cond.missing().len());
        let mut dm = vec![0.0; k * d];
        let mut dv = vec![0.0; k * d];
        for i in 0..k {
            for (jj, &j) in cond.missing().iter().enumerate() {
                dm[i * d + j] = self.d_means[i * nj + jj];
                dv[i * d + j] = self.d_vars[i * nj + jj];
            }
        }
        (self.d_resp, dm, dv)
    }
}

/// `wᵀx + b`. Shared by the classical and generalized paths so the two agree
/// bit for bit on complete inputs.
#[inline]
pub fn affine(w: &[f64], b: f64, x: &[f64]) -> f64 {
    let mut acc = b;
    for (wi, xi) in w.iter().zip(x) {
        acc += wi * xi;
    }
    acc
}

/// `b + Σ_{j∈J'} w_j x_j`, summed in coordinate order.
#[inline]
fn observed_affine(w: &[f64], b: f64, point: &MissingPoint) -> f64 {
    let mut acc = b;
    for (j, x) in point.observed() {
        acc += w[j] * x;
    }
    acc
}

fn check_shapes(len: usize, cond: &ConditionalGmm, point: &MissingPoint) -> Result<()> {
    if len != point.dim() || cond.dim() != point.dim() {
        return Err(Error::invalid(format!(
            "unit has {len} inputs, point has {}, conditional has {}",
            point.dim(),
            cond.dim()
        )));
    }
    if cond.mask() != point.mask() {
        return Err(Error::invalid("conditional was built for a different missing set"));
    }
    Ok(())
}

impl ReluUnit {
    pub fn new(w: Vec<f64>, b: f64) -> Self {
        ReluUnit { w, b }
    }

    /// Classical `max(wᵀx + b, 0)`.
    pub fn classical(&self, x: &[f64]) -> f64 {
        affine(&self.w, self.b, x).max(0.0)
    }
}

impl RbfUnit {
    pub fn new(c: Vec<f64>, log_gamma_diag: Vec<f64>) -> Self {
        RbfUnit { c, log_gamma_diag }
    }

    /// Classical `N(c, Γ)(x)`.
    pub fn classical(&self, x: &[f64]) -> f64 {
        rbf_classical(&self.c, &self.log_gamma_diag, x)
    }
}

pub(crate) fn rbf_classical(c: &[f64], log_gamma: &[f64], x: &[f64]) -> f64 {
    let mut lt = 0.0;
    for ((&cj, &lg), &xj) in c.iter().zip(log_gamma).zip(x) {
        let diff = xj - cj;
        lt -= 0.5 * (LN_2PI + lg + diff * diff * (-lg).exp());
    }
    lt.exp()
}

/// Generalized ReLU on raw slices. `cond` must match `point`.
pub(crate) fn relu_value(w: &[f64], b: f64, cond: &ConditionalGmm, point: &MissingPoint) -> f64 {
    if cond.is_complete() {
        return affine(w, b, point.values()).max(0.0);
    }
    let base = observed_affine(w, b, point);
    let missing = cond.missing();
    let mut out = 0.0;
    for (i, &r) in cond.resp().iter().enumerate() {
        let (m, v) = (cond.means_missing(i), cond.vars_missing(i));
        let mut mu = base;
        let mut s2 = 0.0;
        for (jj, &j) in missing.iter().enumerate() {
            mu += w[j] * m[jj];
            s2 += w[j] * w[j] * v[jj];
        }
        let term = if s2 < DEGENERATE_VARIANCE {
            mu.max(0.0)
        } else {
            let s = s2.sqrt();
            s * nr(mu / s)
        };
        out += r * term;
    }
    out
}

/// Adds `upstream · ∂value` to `d_w`, `d_b` and `acc`; returns the value.
pub(crate) fn relu_backward(
    w: &[f64],
    b: f64,
    cond: &ConditionalGmm,
    point: &MissingPoint,
    upstream: f64,
    d_w: &mut [f64],
    d_b: &mut f64,
    acc: Option<&mut CondGrad>,
) -> f64 {
    if cond.is_complete() {
        let z = affine(w, b, point.values());
        if z > 0.0 {
            for (g, &x) in d_w.iter_mut().zip(point.values()) {
                *g += upstream * x;
            }
            *d_b += upstream;
        }
        return z.max(0.0);
    }
    let base = observed_affine(w, b, point);
    let missing = cond.missing();
    let nj = missing.len();
    let mut acc = acc;
    let mut value = 0.0;
    let mut sum_cdf = 0.0;
    for (i, &r) in cond.resp().iter().enumerate() {
        let (m, v) = (cond.means_missing(i), cond.vars_missing(i));
        let mut mu = base;
        let mut s2 = 0.0;
        for (jj, &j) in missing.iter().enumerate() {
            mu += w[j] * m[jj];
            s2 += w[j] * w[j] * v[jj];
        }
        // term = s NR(mu/s); d/dmu = Φ(u), d/d(s²) = φ(u) / (2s).
        let (term, cdf, d_s2) = if s2 < DEGENERATE_VARIANCE {
            (mu.max(0.0), if mu > 0.0 { 1.0 } else { 0.0 }, 0.0)
        } else {
            let s = s2.sqrt();
            let u = mu / s;
            (s * nr(u), normal_cdf(u), normal_pdf(u) / (2.0 * s))
        };
        value += r * term;
        let g_mu = upstream * r * cdf;
        let g_s2 = upstream * r * d_s2;
        sum_cdf += r * cdf;
        for (jj, &j) in missing.iter().enumerate() {
            d_w[j] += g_mu * m[jj] + g_s2 * 2.0 * w[j] * v[jj];
        }
        if let Some(acc) = acc.as_deref_mut() {
            acc.d_resp[i] += upstream * term;
            for (jj, &j) in missing.iter().enumerate() {
                acc.d_means[i * nj + jj] += g_mu * w[j];
                acc.d_vars[i * nj + jj] += g_s2 * w[j] * w[j];
            }
        }
    }
    for (j, x) in point.observed() {
        d_w[j] += upstream * sum_cdf * x;
    }
    *d_b += upstream * sum_cdf;
    value
}

/// Generalized RBF on raw slices.
pub(crate) fn rbf_value(c: &[f64], log_gamma: &[f64], cond: &ConditionalGmm, point: &MissingPoint) -> f64 {
    if cond.is_complete() {
        return rbf_classical(c, log_gamma, point.values());
    }
    let shared = rbf_observed_log(c, log_gamma, point);
    let missing = cond.missing();
    let mut out = 0.0;
    for (i, &r) in cond.resp().iter().enumerate() {
        let (m, v) = (cond.means_missing(i), cond.vars_missing(i));
        let mut lt = shared;
        for (jj, &j) in missing.iter().enumerate() {
            let var = log_gamma[j].exp() + v[jj];
            let diff = m[jj] - c[j];
            lt -= 0.5 * (LN_2PI + var.ln() + diff * diff / var);
        }
        out += r * lt.exp();
    }
    out
}

fn rbf_observed_log(c: &[f64], log_gamma: &[f64], point: &MissingPoint) -> f64 {
    let mut lt = 0.0;
    for (j, x) in point.observed() {
        let diff = x - c[j];
        lt -= 0.5 * (LN_2PI + log_gamma[j] + diff * diff * (-log_gamma[j]).exp());
    }
    lt
}

pub(crate) fn rbf_backward(
    c: &[f64],
    log_gamma: &[f64],
    cond: &ConditionalGmm,
    point: &MissingPoint,
    upstream: f64,
    d_c: &mut [f64],
    d_log_gamma: &mut [f64],
    acc: Option<&mut CondGrad>,
) -> f64 {
    if cond.is_complete() {
        let value = rbf_classical(c, log_gamma, point.values());
        let g = upstream * value;
        for (j, &x) in point.values().iter().enumerate() {
            let inv = (-log_gamma[j]).exp();
            let diff = x - c[j];
            d_c[j] += g * diff * inv;
            d_log_gamma[j] += g * 0.5 * (diff * diff * inv - 1.0);
        }
        return value;
    }
    let shared = rbf_observed_log(c, log_gamma, point);
    let missing = cond.missing();
    let nj = missing.len();
    let mut acc = acc;
    let mut value = 0.0;
    for (i, &r) in cond.resp().iter().enumerate() {
        let (m, v) = (cond.means_missing(i), cond.vars_missing(i));
        let mut lt = shared;
        for (jj, &j) in missing.iter().enumerate() {
            let var = log_gamma[j].exp() + v[jj];
            let diff = m[jj] - c[j];
            lt -= 0.5 * (LN_2PI + var.ln() + diff * diff / var);
        }
        let e = lt.exp();
        value += r * e;
        let g = upstream * r * e;
        if let Some(acc) = acc.as_deref_mut() {
            acc.d_resp[i] += upstream * e;
        }
        for (jj, &j) in missing.iter().enumerate() {
            let gj = log_gamma[j].exp();
            let var = gj + v[jj];
            let diff = m[jj] - c[j];
            let d_var = g * 0.5 * (diff * diff / (var * var) - 1.0 / var);
            d_c[j] += g * diff / var;
            d_log_gamma[j] += d_var * gj;
            if let Some(acc) = acc.as_deref_mut() {
                acc.d_means[i * nj + jj] -= g * diff / var;
                acc.d_vars[i * nj + jj] += d_var;
            }
        }
    }
    // Observed coordinates share the same factor in every component.
    let g_obs = upstream * value;
    for (j, x) in point.observed() {
        let inv = (-log_gamma[j]).exp();
        let diff = x - c[j];
        d_c[j] += g_obs * diff * inv;
        d_log_gamma[j] += g_obs * 0.5 * (diff * diff * inv - 1.0);
    }
    value
}

/// Expected ReLU activation `E[max(wᵀx + b, 0)]` under `cond`.
pub fn relu_expected(unit: &ReluUnit, cond: &ConditionalGmm, point: &MissingPoint) -> Result<f64> {
    check_shapes(unit.w.len(), cond, point)?;
    Ok(relu_value(&unit.w, unit.b, cond, point))
}

pub fn relu_expected_grad(
    unit: &ReluUnit,
    cond: &ConditionalGmm,
    point: &MissingPoint,
) -> Result<(f64, ActivationGradients)> {
    check_shapes(unit.w.len(), cond, point)?;
    let mut d_w = vec![0.0; unit.w.len()];
    let mut d_b = 0.0;
    let mut acc = CondGrad::zeros(cond);
    let value = relu_backward(&unit.w, unit.b, cond, point, 1.0, &mut d_w, &mut d_b, Some(&mut acc));
    d_w.push(d_b);
    let (d_resp, d_means, d_vars) = acc.expand(cond);
    Ok((
        value,
        ActivationGradients {
            d_unit: d_w,
            d_resp,
            d_means,
            d_vars,
        },
    ))
}

/// Expected RBF activation `E[N(c, Γ)(x)]` under `cond`.
pub fn rbf_expected(unit: &RbfUnit, cond: &ConditionalGmm, point: &MissingPoint) -> Result<f64> {
    check_shapes(unit.c.len(), cond, point)?;
    if unit.log_gamma_diag.len() != unit.c.len() {
        return Err(Error::invalid("RBF center and Γ diagonal lengths differ"));
    }
    Ok(rbf_value(&unit.c, &unit.log_gamma_diag, cond, point))
}

pub fn rbf_expected_grad(
    unit: &RbfUnit,
    cond: &ConditionalGmm,
    point: &MissingPoint,
) -> Result<(f64, ActivationGradients)> {
    check_shapes(unit.c.len(), cond, point)?;
    if unit.log_gamma_diag.len() != unit.c.len() {
        return Err(Error::invalid("RBF center and Γ diagonal lengths differ"));
    }
    let d = unit.c.len();
    let mut d_c = vec![0.0; d];
    let mut d_lg = vec![0.0; d];
    let mut acc = CondGrad::zeros(cond);
    let value = rbf_backward(
        &unit.c,
        &unit.log_gamma_diag,
        cond,
        point,
        1.0,
        &mut d_c,
        &mut d_lg,
        Some(&mut acc),
    );
    d_c.extend(d_lg);
    let (d_resp, d_means, d_vars) = acc.expand(cond);
    Ok((
        value,
        ActivationGradients {
            d_unit: d_c,
            d_resp,
            d_means,
            d_vars,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{conditional, GmmParams};

    fn one_missing(mean: f64, var: f64) -> (ConditionalGmm, MissingPoint) {
        let p = MissingPoint::new(vec![f64::NAN], vec![true]).unwrap();
        let c = ConditionalGmm::from_parts(vec![1.0], vec![true], vec![vec![mean]], vec![vec![var]]).unwrap();
        (c, p)
    }

    #[test]
    fn complete_point_reduces_to_classical_relu() {
        let p = MissingPoint::complete(vec![0.5, -2.0]).unwrap();
        let g = GmmParams::from_weights(&[1.0], vec![vec![0.0, 0.0]], vec![vec![1.0, 1.0]], 0.0).unwrap();
        let c = conditional(&g, &p).unwrap();
        let u = ReluUnit::new(vec![1.0, 0.25], 0.7);
        assert_eq!(relu_expected(&u, &c, &p).unwrap(), u.classical(p.values()));
        let (_, grad) = relu_expected_grad(&u, &c, &p).unwrap();
        assert_eq!(grad.d_unit[2], 1.0);
        let off = ReluUnit::new(vec![1.0, 0.25], -5.0);
        let (_, grad) = relu_expected_grad(&off, &c, &p).unwrap();
        assert_eq!(grad.d_unit[2], 0.0);
    }

    #[test]
    fn relu_unit_variance_zero_mean_is_nr0() {
        let (c, p) = one_missing(0.0, 1.0);
        let u = ReluUnit::new(vec![1.0], 0.0);
        assert!((relu_expected(&u, &c, &p).unwrap() - 0.3989422804014327).abs() < 1e-15);
        let (_, g) = relu_expected_grad(&u, &c, &p).unwrap();
        assert!((g.d_unit[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn degenerate_variance_falls_back_to_relu() {
        let (c, p) = one_missing(2.0, 1e-14);
        let u = ReluUnit::new(vec![1.0], -0.5);
        assert_eq!(relu_expected(&u, &c, &p).unwrap(), 1.5);
        let (c, p) = one_missing(0.5, 1e-14);
        let (_, g) = relu_expected_grad(&ReluUnit::new(vec![1.0], -0.5), &c, &p).unwrap();
        assert_eq!(g.d_unit[1], 0.0);
    }

    #[test]
    fn rbf_gaussian_at_center() {
        let p = MissingPoint::complete(vec![0.3]).unwrap();
        let c = ConditionalGmm::from_parts(vec![], vec![false], vec![], vec![]).unwrap();
        let u = RbfUnit::new(vec![0.3], vec![0.0]);
        assert!((rbf_expected(&u, &c, &p).unwrap() - 0.3989422804014327).abs() < 1e-15);
    }

    #[test]
    fn rbf_center_at_mean_has_zero_center_gradient() {
        let p = MissingPoint::new(vec![1.0, f64::NAN], vec![false, true]).unwrap();
        let c = ConditionalGmm::from_parts(vec![1.0], vec![false, true], vec![vec![-0.4]], vec![vec![0.8]]).unwrap();
        let u = RbfUnit::new(vec![1.0, -0.4], vec![0.2, -0.3]);
        let (_, g) = rbf_expected_grad(&u, &c, &p).unwrap();
        assert!(g.d_unit[..2].iter().all(|v| v.abs() < 1e-15));
        // observed coordinate 0: zero blocks
        assert_eq!(g.d_means[0], 0.0);
        assert_eq!(g.d_vars[0], 0.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (c, p) = one_missing(0.0, 1.0);
        assert!(relu_expected(&ReluUnit::new(vec![1.0, 2.0], 0.0), &c, &p).is_err());
        assert!(rbf_expected(&RbfUnit::new(vec![1.0], vec![]), &c, &p).is_err());
    }
}
