//! Helpers shared by the integration tests.
#![allow(dead_code)]

use misslayer::activations::{rbf_expected_grad, relu_expected_grad, ActivationGradients};
use misslayer::density::{conditional, conditional_backward, GmmGradient, GmmParams, MissingPoint};
use misslayer::{RbfUnit, ReluUnit};

/// Flat `[logits, means, log_vars]` of a mixture.
pub fn gmm_flat(g: &GmmParams) -> Vec<f64> {
    let (a, b, c) = g.parts();
    a.iter().chain(b).chain(c).copied().collect()
}

pub fn gmm_from_flat(template: &GmmParams, flat: &[f64]) -> GmmParams {
    let mut g = template.clone();
    let (a, b, c) = g.parts_mut();
    let (na, nb) = (a.len(), b.len());
    a.copy_from_slice(&flat[..na]);
    b.copy_from_slice(&flat[na..na + nb]);
    c.copy_from_slice(&flat[na + nb..]);
    g
}

/// Pulls activation gradients (k × D blocks) back onto the mixture.
pub fn density_grad(gmm: &GmmParams, point: &MissingPoint, g: &ActivationGradients) -> Vec<f64> {
    let cond = conditional(gmm, point).unwrap();
    let d = gmm.dim();
    let miss = cond.missing().to_vec();
    let pick = |full: &[f64]| -> Vec<f64> {
        (0..gmm.k())
            .flat_map(|i| miss.iter().map(move |&j| full[i * d + j]))
            .collect()
    };
    let mut out = GmmGradient::zeros(gmm);
    conditional_backward(gmm, point, &cond, &g.d_resp, &pick(&g.d_means), &pick(&g.d_vars), &mut out);
    out.logits.iter().chain(&out.means).chain(&out.log_vars).copied().collect()
}

/// Value of a ReLU unit as a function of `[w, b, gmm params]`.
pub fn relu_theta(unit: &ReluUnit, gmm: &GmmParams) -> Vec<f64> {
    let mut t = unit.w.clone();
    t.push(unit.b);
    t.extend(gmm_flat(gmm));
    t
}

pub fn relu_at(theta: &[f64], gmm: &GmmParams, point: &MissingPoint) -> f64 {
    let d = gmm.dim();
    let unit = ReluUnit::new(theta[..d].to_vec(), theta[d]);
    let g = gmm_from_flat(gmm, &theta[d + 1..]);
    let cond = conditional(&g, point).unwrap();
    misslayer::activations::relu_expected(&unit, &cond, point).unwrap()
}

pub fn relu_grad(unit: &ReluUnit, gmm: &GmmParams, point: &MissingPoint) -> Vec<f64> {
    let cond = conditional(gmm, point).unwrap();
    let (_, g) = relu_expected_grad(unit, &cond, point).unwrap();
    let mut out = g.d_unit.clone();
    out.extend(density_grad(gmm, point, &g));
    out
}

pub fn rbf_theta(unit: &RbfUnit, gmm: &GmmParams) -> Vec<f64> {
    let mut t = unit.c.clone();
    t.extend(&unit.log_gamma_diag);
    t.extend(gmm_flat(gmm));
    t
}

pub fn rbf_at(theta: &[f64], gmm: &GmmParams, point: &MissingPoint) -> f64 {
    let d = gmm.dim();
    let unit = RbfUnit::new(theta[..d].to_vec(), theta[d..2 * d].to_vec());
    let g = gmm_from_flat(gmm, &theta[2 * d..]);
    let cond = conditional(&g, point).unwrap();
    misslayer::activations::rbf_expected(&unit, &cond, point).unwrap()
}

pub fn rbf_grad(unit: &RbfUnit, gmm: &GmmParams, point: &MissingPoint) -> Vec<f64> {
    let cond = conditional(gmm, point).unwrap();
    let (_, g) = rbf_expected_grad(unit, &cond, point).unwrap();
    let mut out = g.d_unit.clone();
    out.extend(density_grad(gmm, point, &g));
    out
}

/// Largest relative error between two gradient vectors.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    analytic
        .iter()
        .zip(numeric)
        .enumerate()
        .map(|(i, (a, n))| (misslayer::verification::rel_err(*a, *n), i))
        .fold((0.0, 0), |acc, x| if x.0 > acc.0 { x } else { acc })
}

/// Plain diagonal-Gaussian mixture density, evaluated independently of the
/// library.
pub fn mixture_pdf(weights: &[f64], means: &[Vec<f64>], vars: &[Vec<f64>], x: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..weights.len() {
        let mut p = weights[i];
        for j in 0..x.len() {
            let v = vars[i][j];
            let d = x[j] - means[i][j];
            p *= (-0.5 * d * d / v).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
        }
        total += p;
    }
    total
}

/// Trapezoid-quadrature check of the γ = 0 conditional for points with one
/// or two missing coordinates. Returns the largest density error over probe
/// locations and the largest responsibility error.
pub fn quadrature_check(gmm: &GmmParams, point: &MissingPoint) -> (f64, f64) {
    use misslayer::density::conditional;
    let g0 = gmm.with_gamma(0.0);
    let cond = conditional(&g0, point).unwrap();
    let miss = point.missing_indices();
    assert!(!miss.is_empty() && miss.len() <= 2, "quadrature handles |J| in 1..=2");
    let k = gmm.k();
    let weights = gmm.weights();
    let means: Vec<Vec<f64>> = (0..k).map(|i| gmm.mean(i).to_vec()).collect();
    let vars: Vec<Vec<f64>> = (0..k).map(|i| gmm.variances(i)).collect();
    let n = if miss.len() == 1 { 40_001 } else { 1_201 };
    let axes: Vec<(f64, f64)> = miss
        .iter()
        .map(|&j| {
            let lo = (0..k).map(|i| means[i][j] - 12.0 * vars[i][j].sqrt()).fold(f64::INFINITY, f64::min);
            let hi = (0..k).map(|i| means[i][j] + 12.0 * vars[i][j].sqrt()).fold(f64::NEG_INFINITY, f64::max);
            (lo, (hi - lo) / (n - 1) as f64)
        })
        .collect();
    let trap = |idx: usize| if idx == 0 || idx == n - 1 { 0.5 } else { 1.0 };
    let mut x = point.values().to_vec();
    let mut comp_mass = vec![0.0; k];
    let grid: Vec<Vec<usize>> = if miss.len() == 1 {
        (0..n).map(|a| vec![a]).collect()
    } else {
        (0..n).flat_map(|a| (0..n).map(move |b| vec![a, b])).collect()
    };
    for cell in &grid {
        let mut w = 1.0;
        for (ax, &idx) in cell.iter().enumerate() {
            x[miss[ax]] = axes[ax].0 + idx as f64 * axes[ax].1;
            w *= trap(idx) * axes[ax].1;
        }
        for i in 0..k {
            comp_mass[i] += w * mixture_pdf(&weights[i..=i], &means[i..=i], &vars[i..=i], &x);
        }
    }
    let total: f64 = comp_mass.iter().sum();
    let resp_err = (0..k)
        .map(|i| (comp_mass[i] / total - cond.resp()[i]).abs())
        .fold(0.0, f64::max);
    // density on S at a few probe locations
    let mut dens_err: f64 = 0.0;
    for probe in 0..7 {
        let t = probe as f64 / 6.0;
        for (ax, &j) in miss.iter().enumerate() {
            let (lo, step) = axes[ax];
            x[j] = lo + (0.3 + 0.4 * t) * step * (n - 1) as f64;
        }
        let direct = mixture_pdf(&weights, &means, &vars, &x) / total;
        let mut lib = 0.0;
        for i in 0..k {
            let (m, v) = (cond.means_missing(i), cond.vars_missing(i));
            let mut p = cond.resp()[i];
            for (jj, &j) in miss.iter().enumerate() {
                let d = x[j] - m[jj];
                p *= (-0.5 * d * d / v[jj]).exp() / (2.0 * std::f64::consts::PI * v[jj]).sqrt();
            }
            lib += p;
        }
        dens_err = dens_err.max((direct - lib).abs());
    }
    (dens_err, resp_err)
}
