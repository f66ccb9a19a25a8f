//! Diagonal Gaussian mixture densities and their regularized conditionals on
//! the affine subspace spanned by a point's missing coordinates.
//!
//! For a point `(x, J)` with observed coordinates `J'` and a component
//! `N(m, diag(σ))`, the γ-regularized restriction to `S = Aff[x, J]` factors as
//! `C^γ · N(m_S, Σ_S)` where `m_S = [x_{J'}, m_J]`, `Σ_S = [0, σ_J]` and
//!
//! ```text
//! C^γ = Π_{l∈J'} (2π(γ + σ_l))^{-1/2} · exp(-½ Σ_{l∈J'} (m_l - x_l)² / (γ + σ_l))
//! ```
//!
//! After normalization the conditional is `Σ_i r_i N(m^i_S, Σ^i_S)` with
//! `r_i ∝ p_i C^γ_i`. Everything is carried in the log domain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::data::DatasetWithMask;
use crate::error::{Error, Result};
use crate::special::{log_sum_exp, softmax, softmax_into, LN_2PI};

/// Default γ. Small enough that the regularized conditional is numerically the
/// exact conditional for data scaled to unit range.
pub const DEFAULT_GAMMA: f64 = 1e-6;

/// Lower bound applied to every mixture variance during EM and training.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Mixture of `k` diagonal Gaussians in `R^d` in its unconstrained training
/// parameterization: weights are `softmax(logits)`, variances `exp(log_vars)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GmmJson", into = "GmmJson")]
pub struct GmmParams {
    k: usize,
    d: usize,
    gamma: f64,
    logits: Vec<f64>,
    /// Row-major `k × d`.
    means: Vec<f64>,
    /// Row-major `k × d`.
    log_vars: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct GmmJson {
    k: usize,
    d: usize,
    gamma: f64,
    logits: Vec<f64>,
    means: Vec<Vec<f64>>,
    log_vars: Vec<Vec<f64>>,
}

impl From<GmmParams> for GmmJson {
    fn from(g: GmmParams) -> Self {
        GmmJson {
            k: g.k,
            d: g.d,
            gamma: g.gamma,
            means: g.means.chunks(g.d).map(<[f64]>::to_vec).collect(),
            log_vars: g.log_vars.chunks(g.d).map(<[f64]>::to_vec).collect(),
            logits: g.logits,
        }
    }
}

impl TryFrom<GmmJson> for GmmParams {
    type Error = Error;

    fn try_from(j: GmmJson) -> Result<Self> {
        let g = GmmParams::new(j.logits, j.means, j.log_vars, j.gamma)?;
        if g.k != j.k || g.d != j.d {
            return Err(Error::invalid(format!(
                "declared shape {}x{} does not match parameter shape {}x{}",
                j.k, j.d, g.k, g.d
            )));
        }
        Ok(g)
    }
}

impl GmmParams {
    pub fn new(
        logits: Vec<f64>,
        means: Vec<Vec<f64>>,
        log_vars: Vec<Vec<f64>>,
        gamma: f64,
    ) -> Result<Self> {
        let k = logits.len();
        if k == 0 {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        if means.len() != k || log_vars.len() != k {
            return Err(Error::invalid("means/log_vars must have one row per component"));
        }
        let d = means[0].len();
        if d == 0 {
            return Err(Error::invalid("mixture dimension must be positive"));
        }
        if means.iter().chain(&log_vars).any(|row| row.len() != d) {
            return Err(Error::invalid("ragged means/log_vars rows"));
        }
        let g = GmmParams {
            k,
            d,
            gamma,
            logits,
            means: means.concat(),
            log_vars: log_vars.concat(),
        };
        g.validate()?;
        Ok(g)
    }

    /// Builds a mixture from weights and variances in their natural scale.
    pub fn from_weights(
        weights: &[f64],
        means: Vec<Vec<f64>>,
        variances: Vec<Vec<f64>>,
        gamma: f64,
    ) -> Result<Self> {
        if weights.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
            return Err(Error::invalid("mixture weights must be positive and finite"));
        }
        if variances.iter().flatten().any(|&v| !(v > 0.0)) {
            return Err(Error::invalid("variances must be positive"));
        }
        let logits = weights.iter().map(|p| p.ln()).collect();
        let log_vars = variances
            .into_iter()
            .map(|row| row.into_iter().map(f64::ln).collect())
            .collect();
        Self::new(logits, means, log_vars, gamma)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::invalid(format!("gamma must be finite and >= 0, got {}", self.gamma)));
        }
        if self.logits.iter().chain(&self.means).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite logits or means"));
        }
        if self.log_vars.iter().any(|lv| {
            let v = lv.exp();
            !(v > 0.0 && v.is_finite())
        }) {
            return Err(Error::invalid("variances must be finite and positive"));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn with_gamma(&self, gamma: f64) -> Self {
        GmmParams {
            gamma,
            ..self.clone()
        }
    }

    pub fn set_gamma(&mut self, gamma: f64) {
        self.gamma = gamma;
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Mixture weights `p_i = softmax(logits)_i`.
    pub fn weights(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    pub fn mean(&self, i: usize) -> &[f64] {
        &self.means[i * self.d..(i + 1) * self.d]
    }

    pub fn log_var(&self, i: usize) -> &[f64] {
        &self.log_vars[i * self.d..(i + 1) * self.d]
    }

    pub fn variances(&self, i: usize) -> Vec<f64> {
        self.log_var(i).iter().map(|lv| lv.exp()).collect()
    }

    /// Flat parameter groups `(logits, means, log_vars)`, used by optimizers.
    pub fn parts_mut(&mut self) -> (&mut [f64], &mut [f64], &mut [f64]) {
        (&mut self.logits, &mut self.means, &mut self.log_vars)
    }

    pub fn parts(&self) -> (&[f64], &[f64], &[f64]) {
        (&self.logits, &self.means, &self.log_vars)
    }

    /// Clamps every variance to at least `floor`.
    pub fn floor_variances(&mut self, floor: f64) {
        let lf = floor.ln();
        for lv in &mut self.log_vars {
            if *lv < lf {
                *lv = lf;
            }
        }
    }

    /// Log density of the full (non-degenerate) mixture at `x`.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let log_w = log_weights(&self.logits);
        let terms: Vec<f64> = (0..self.k)
            .map(|i| {
                let mut acc = log_w[i];
                for ((&xj, &mj), &lv) in x.iter().zip(self.mean(i)).zip(self.log_var(i)) {
                    let diff = xj - mj;
                    acc -= 0.5 * (LN_2PI + lv + diff * diff * (-lv).exp());
                }
                acc
            })
            .collect();
        log_sum_exp(&terms)
    }

    /// Components sorted lexicographically by `(means, log_vars, logit)` with
    /// logits shifted to log-weights. Two mixtures describe the same parameter
    /// set iff their canonical forms are equal.
    pub fn canonical(&self) -> Vec<Vec<f64>> {
        let log_w = log_weights(&self.logits);
        let mut rows: Vec<Vec<f64>> = (0..self.k)
            .map(|i| {
                let mut r = self.mean(i).to_vec();
                r.extend_from_slice(self.log_var(i));
                r.push(log_w[i]);
                r
            })
            .collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        rows
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn log_weights(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|l| l - lse).collect()
}

/// An observation `x` together with its missing-coordinate set `J`.
///
/// Values at missing coordinates are placeholders and are never read.
#[derive(Clone, Debug)]
pub struct MissingPoint {
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl MissingPoint {
    pub fn new(values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if values.len() != mask.len() {
            return Err(Error::invalid(format!(
                "values has length {} but mask has length {}",
                values.len(),
                mask.len()
            )));
        }
        if let Some(j) = (0..values.len()).find(|&j| !mask[j] && !values[j].is_finite()) {
            return Err(Error::invalid(format!("observed coordinate {j} is not finite")));
        }
        Ok(MissingPoint { values, mask })
    }

    pub fn complete(values: Vec<f64>) -> Result<Self> {
        let mask = vec![false; values.len()];
        Self::new(values, mask)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn is_missing(&self, j: usize) -> bool {
        self.mask[j]
    }

    pub fn is_complete(&self) -> bool {
        !self.mask.iter().any(|&m| m)
    }

    pub fn missing_indices(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&j| self.mask[j]).collect()
    }

    pub fn observed_indices(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&j| !self.mask[j]).collect()
    }

    /// Iterator over `(index, value)` of observed coordinates.
    pub fn observed(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.values
            .iter()
            .zip(&self.mask)
            .enumerate()
            .filter(|(_, (_, &m))| !m)
            .map(|(j, (&v, _))| (j, v))
    }

    /// Value at an observed coordinate. Panics in debug builds when asked for a
    /// missing one.
    #[inline]
    pub fn observed_value(&self, j: usize) -> f64 {
        debug_assert!(!self.mask[j], "read of missing coordinate {j}");
        self.values[j]
    }
}

/// The (regularized) conditional mixture `F^γ_S = Σ_i r_i N(m^i_S, Σ^i_S)`.
///
/// Only the missing-coordinate blocks are stored: on observed coordinates
/// every component mean equals `x` and every variance is zero.
#[derive(Clone, Debug)]
pub struct ConditionalGmm {
    resp: Vec<f64>,
    missing: Vec<usize>,
    /// Row-major `k × |J|`.
    means_missing: Vec<f64>,
    /// Row-major `k × |J|`.
    vars_missing: Vec<f64>,
    mask: Vec<bool>,
    log_norm: f64,
    log_coeffs: Vec<f64>,
}

impl ConditionalGmm {
    /// True when the point had no missing coordinates; such a structure carries
    /// no mixture data.
    pub fn is_complete(&self) -> bool {
        self.missing.is_empty()
    }

    pub fn k(&self) -> usize {
        self.resp.len()
    }

    pub fn resp(&self) -> &[f64] {
        &self.resp
    }

    pub fn missing(&self) -> &[usize] {
        &self.missing
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn dim(&self) -> usize {
        self.mask.len()
    }

    pub fn means_missing(&self, i: usize) -> &[f64] {
        let nj = self.missing.len();
        &self.means_missing[i * nj..(i + 1) * nj]
    }

    pub fn vars_missing(&self, i: usize) -> &[f64] {
        let nj = self.missing.len();
        &self.vars_missing[i * nj..(i + 1) * nj]
    }

    /// `ln Σ_i p_i C^γ_i`, the log of the normalizing mass.
    pub fn log_norm(&self) -> f64 {
        self.log_norm
    }

    /// Per-component `ln C^γ_i`.
    pub fn log_coeffs(&self) -> &[f64] {
        &self.log_coeffs
    }

    /// Builds a conditional directly from its fields. Used by oracles and tests
    /// that need hand-made degenerate mixtures.
    pub fn from_parts(
        resp: Vec<f64>,
        mask: Vec<bool>,
        means_missing: Vec<Vec<f64>>,
        vars_missing: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let missing: Vec<usize> = (0..mask.len()).filter(|&j| mask[j]).collect();
        if missing.is_empty() {
            return Ok(Self::complete(mask));
        }
        let k = resp.len();
        if k == 0 || means_missing.len() != k || vars_missing.len() != k {
            return Err(Error::invalid("conditional needs matching resp/means/vars rows"));
        }
        if means_missing
            .iter()
            .chain(&vars_missing)
            .any(|r| r.len() != missing.len())
        {
            return Err(Error::invalid("conditional rows must have |J| entries"));
        }
        if resp.iter().any(|&r| !(r >= 0.0)) || (resp.iter().sum::<f64>() - 1.0).abs() > 1e-10 {
            return Err(Error::invalid("resp must be a probability vector"));
        }
        if vars_missing.iter().flatten().any(|&v| !(v >= 0.0)) {
            return Err(Error::invalid("conditional variances must be non-negative"));
        }
        Ok(ConditionalGmm {
            log_coeffs: vec![0.0; k],
            resp,
            missing,
            means_missing: means_missing.concat(),
            vars_missing: vars_missing.concat(),
            mask,
            log_norm: 0.0,
        })
    }

    fn complete(mask: Vec<bool>) -> Self {
        ConditionalGmm {
            resp: Vec::new(),
            missing: Vec::new(),
            means_missing: Vec::new(),
            vars_missing: Vec::new(),
            mask,
            log_norm: 0.0,
            log_coeffs: Vec::new(),
        }
    }

    /// Completed mean of component `i`: `x` on observed coordinates, `m_i` on
    /// missing ones.
    pub fn completed_mean(&self, i: usize, point: &MissingPoint) -> Vec<f64> {
        let mut out: Vec<f64> = (0..point.dim())
            .map(|j| if point.is_missing(j) { 0.0 } else { point.observed_value(j) })
            .collect();
        for (jj, &j) in self.missing.iter().enumerate() {
            out[j] = self.means_missing(i)[jj];
        }
        out
    }

    /// Mean of the conditional mixture restricted to `J`.
    pub fn mixture_mean_missing(&self) -> Vec<f64> {
        let nj = self.missing.len();
        let mut out = vec![0.0; nj];
        for (i, &r) in self.resp.iter().enumerate() {
            for (o, &m) in out.iter_mut().zip(self.means_missing(i)) {
                *o += r * m;
            }
        }
        out
    }
}

/// `ln C^γ_{m,Σ,S}` for one diagonal component, summed over the observed
/// coordinates of `point`. Returns 0 (empty product) when nothing is observed.
pub fn log_component_coeff(
    mean: &[f64],
    var: &[f64],
    point: &MissingPoint,
    gamma: f64,
) -> Result<f64> {
    if mean.len() != point.dim() || var.len() != point.dim() {
        return Err(Error::invalid("component and point dimensions differ"));
    }
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::invalid(format!("gamma must be finite and >= 0, got {gamma}")));
    }
    let mut acc = 0.0;
    for (l, x) in point.observed() {
        let (m, s) = (mean[l], var[l]);
        if !m.is_finite() || !s.is_finite() || !(s >= 0.0) {
            return Err(Error::invalid(format!("non-finite component parameter at {l}")));
        }
        let v = gamma + s;
        if !(v > 0.0) {
            return Err(Error::invalid("gamma + variance must be positive"));
        }
        let diff = m - x;
        acc -= 0.5 * (LN_2PI + v.ln() + diff * diff / v);
    }
    Ok(acc)
}

fn log_coeff_from_logvar(mean: &[f64], log_var: &[f64], point: &MissingPoint, gamma: f64) -> f64 {
    let mut acc = 0.0;
    for (l, x) in point.observed() {
        let v = gamma + log_var[l].exp();
        let diff = mean[l] - x;
        acc -= 0.5 * (LN_2PI + v.ln() + diff * diff / v);
    }
    acc
}

/// Regularized conditional `F^γ_S` of `gmm` (with its own γ) at `point`.
pub fn conditional(gmm: &GmmParams, point: &MissingPoint) -> Result<ConditionalGmm> {
    if point.dim() != gmm.d {
        return Err(Error::invalid(format!(
            "point has dimension {} but mixture has {}",
            point.dim(),
            gmm.d
        )));
    }
    let missing = point.missing_indices();
    if missing.is_empty() {
        return Ok(ConditionalGmm::complete(point.mask.clone()));
    }
    let k = gmm.k;
    let log_w = log_weights(&gmm.logits);
    let log_coeffs: Vec<f64> = (0..k)
        .map(|i| log_coeff_from_logvar(gmm.mean(i), gmm.log_var(i), point, gmm.gamma))
        .collect();
    let log_q: Vec<f64> = log_w.iter().zip(&log_coeffs).map(|(a, b)| a + b).collect();
    let log_norm = log_sum_exp(&log_q);
    if !log_norm.is_finite() {
        return Err(Error::Internal(format!(
            "conditional normalizer is {log_norm}; every component has zero mass on the subspace"
        )));
    }
    let mut resp = vec![0.0; k];
    softmax_into(&log_q, &mut resp);

    let nj = missing.len();
    let mut means_missing = Vec::with_capacity(k * nj);
    let mut vars_missing = Vec::with_capacity(k * nj);
    for i in 0..k {
        let (m, lv) = (gmm.mean(i), gmm.log_var(i));
        means_missing.extend(missing.iter().map(|&j| m[j]));
        vars_missing.extend(missing.iter().map(|&j| lv[j].exp()));
    }
    Ok(ConditionalGmm {
        resp,
        missing,
        means_missing,
        vars_missing,
        mask: point.mask.clone(),
        log_norm,
        log_coeffs,
    })
}

/// Conditionals along an ascending sweep of γ values.
pub fn conditional_limits(
    gmm: &GmmParams,
    point: &MissingPoint,
    gammas: &[f64],
) -> Result<Vec<ConditionalGmm>> {
    if gammas.iter().any(|&g| !(g >= 0.0)) {
        return Err(Error::invalid("gammas must be >= 0"));
    }
    if gammas.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("gammas must be sorted ascending"));
    }
    gammas
        .iter()
        .map(|&g| conditional(&gmm.with_gamma(g), point))
        .collect()
}

/// Gradient of a scalar objective with respect to [`GmmParams`]' unconstrained
/// parameters, laid out like the parameters themselves.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmGradient {
    pub logits: Vec<f64>,
    pub means: Vec<f64>,
    pub log_vars: Vec<f64>,
}

impl GmmGradient {
    pub fn zeros(gmm: &GmmParams) -> Self {
        GmmGradient {
            logits: vec![0.0; gmm.k],
            means: vec![0.0; gmm.k * gmm.d],
            log_vars: vec![0.0; gmm.k * gmm.d],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.logits
            .iter()
            .chain(&self.means)
            .chain(&self.log_vars)
            .all(|&g| g == 0.0)
    }

    pub fn add_assign(&mut self, other: &GmmGradient) {
        for (a, b) in self.logits.iter_mut().zip(&other.logits) {
            *a += b;
        }
        for (a, b) in self.means.iter_mut().zip(&other.means) {
            *a += b;
        }
        for (a, b) in self.log_vars.iter_mut().zip(&other.log_vars) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self
            .logits
            .iter_mut()
            .chain(self.means.iter_mut())
            .chain(self.log_vars.iter_mut())
        {
            *g *= s;
        }
    }
}

/// Pulls gradients with respect to the conditional's fields back onto the
/// mixture parameters and adds them to `grad`.
///
/// `d_resp` has `k` entries; `d_means_missing` and `d_vars_missing` are
/// row-major `k × |J|` in the order of [`ConditionalGmm::missing`].
pub fn conditional_backward(
    gmm: &GmmParams,
    point: &MissingPoint,
    cond: &ConditionalGmm,
    d_resp: &[f64],
    d_means_missing: &[f64],
    d_vars_missing: &[f64],
    grad: &mut GmmGradient,
) {
    if cond.is_complete() {
        return;
    }
    let (k, d, nj) = (gmm.k, gmm.d, cond.missing.len());
    let gamma = gmm.gamma;
    // r = softmax(a), a_i = logit_i + ln C_i.
    let mean_g: f64 = cond.resp.iter().zip(d_resp).map(|(r, g)| r * g).sum();
    for i in 0..k {
        let da = cond.resp[i] * (d_resp[i] - mean_g);
        grad.logits[i] += da;
        let (m, lv) = (gmm.mean(i), gmm.log_var(i));
        let row = i * d;
        if da != 0.0 {
            for (l, x) in point.observed() {
                let s = lv[l].exp();
                let v = gamma + s;
                let diff = m[l] - x;
                grad.means[row + l] -= da * diff / v;
                grad.log_vars[row + l] += da * s * 0.5 * (diff * diff / (v * v) - 1.0 / v);
            }
        }
        for (jj, &j) in cond.missing.iter().enumerate() {
            grad.means[row + j] += d_means_missing[i * nj + jj];
            grad.log_vars[row + j] += d_vars_missing[i * nj + jj] * cond.vars_missing[i * nj + jj];
        }
    }
}

/// Draws a completion of `point` from `cond`, seeded.
pub fn sample_completion(cond: &ConditionalGmm, point: &MissingPoint, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_completion_with(cond, point, &mut rng)
}

/// As [`sample_completion`] with a caller-owned generator. Observed
/// coordinates are copied; a complete point comes back verbatim.
pub fn sample_completion_with<R: Rng + ?Sized>(
    cond: &ConditionalGmm,
    point: &MissingPoint,
    rng: &mut R,
) -> Vec<f64> {
    let mut out = point.values.clone();
    if cond.is_complete() {
        return out;
    }
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut comp = cond.k() - 1;
    for (i, &r) in cond.resp.iter().enumerate() {
        acc += r;
        if u < acc {
            comp = i;
            break;
        }
    }
    let means = cond.means_missing(comp);
    let vars = cond.vars_missing(comp);
    for (jj, &j) in cond.missing.iter().enumerate() {
        let z: f64 = rng.sample(StandardNormal);
        out[j] = means[jj] + vars[jj].sqrt() * z;
    }
    out
}

/// Result of [`em_fit_traced`].
#[derive(Clone, Debug)]
pub struct EmFit {
    pub params: GmmParams,
    /// Mean per-row log-likelihood before each M-step.
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
}

/// Fits a diagonal GMM by EM on the mean-imputed data.
pub fn em_fit(
    data: &DatasetWithMask,
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<GmmParams> {
    em_fit_traced(data, k, seed, max_iter, tol).map(|f| f.params)
}

pub fn em_fit_traced(
    data: &DatasetWithMask,
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<EmFit> {
    let (n, d) = (data.n_rows(), data.n_cols());
    if n == 0 || d == 0 {
        return Err(Error::EmptyDataset);
    }
    if k == 0 || k > n {
        return Err(Error::invalid(format!("component count {k} must be in 1..={n}")));
    }
    let x = data.mean_imputed();

    let mut col_mean = vec![0.0; d];
    for row in x.chunks(d) {
        for (m, v) in col_mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    col_mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut col_var = vec![0.0; d];
    for row in x.chunks(d) {
        for ((s, v), m) in col_var.iter_mut().zip(row).zip(&col_mean) {
            *s += (v - m) * (v - m);
        }
    }
    col_var
        .iter_mut()
        .for_each(|s| *s = (*s / n as f64).max(VARIANCE_FLOOR));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = kmeans_pp_init(&x, n, d, k, &mut rng);
    let mut vars: Vec<f64> = (0..k).flat_map(|_| col_var.iter().copied()).collect();
    let mut log_w = vec![-(k as f64).ln(); k];

    let mut history = Vec::new();
    let mut resp = vec![0.0; n * k];
    let mut converged = false;
    let mut terms = vec![0.0; k];
    for _ in 0..max_iter.max(1) {
        // E-step
        let mut ll = 0.0;
        for (r, row) in x.chunks(d).enumerate() {
            for i in 0..k {
                let mut acc = log_w[i];
                let (m, v) = (&means[i * d..(i + 1) * d], &vars[i * d..(i + 1) * d]);
                for j in 0..d {
                    let diff = row[j] - m[j];
                    acc -= 0.5 * (LN_2PI + v[j].ln() + diff * diff / v[j]);
                }
                terms[i] = acc;
            }
            let lse = log_sum_exp(&terms);
            ll += lse;
            for i in 0..k {
                resp[r * k + i] = (terms[i] - lse).exp();
            }
        }
        ll /= n as f64;
        if let Some(&prev) = history.last() {
            if ll - prev <= tol {
                history.push(ll);
                converged = true;
                break;
            }
        }
        history.push(ll);

        // M-step
        for i in 0..k {
            let nk: f64 = (0..n).map(|r| resp[r * k + i]).sum();
            let nk_safe = nk.max(f64::MIN_POSITIVE);
            log_w[i] = (nk_safe / n as f64).ln();
            let m = &mut means[i * d..(i + 1) * d];
            m.iter_mut().for_each(|v| *v = 0.0);
            for (r, row) in x.chunks(d).enumerate() {
                let w = resp[r * k + i];
                for (mj, xj) in m.iter_mut().zip(row) {
                    *mj += w * xj;
                }
            }
            m.iter_mut().for_each(|v| *v /= nk_safe);
            let v = &mut vars[i * d..(i + 1) * d];
            v.iter_mut().for_each(|s| *s = 0.0);
            for (r, row) in x.chunks(d).enumerate() {
                let w = resp[r * k + i];
                for j in 0..d {
                    let diff = row[j] - means[i * d + j];
                    v[j] += w * diff * diff;
                }
            }
            v.iter_mut()
                .for_each(|s| *s = (*s / nk_safe).max(VARIANCE_FLOOR));
        }
    }

    let params = GmmParams {
        k,
        d,
        gamma: DEFAULT_GAMMA,
        logits: log_w,
        means,
        log_vars: vars.iter().map(|v| v.ln()).collect(),
    };
    params.validate()?;
    Ok(EmFit {
        params,
        log_likelihood: history,
        converged,
    })
}

fn kmeans_pp_init(x: &[f64], n: usize, d: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
    let mut centers = Vec::with_capacity(k * d);
    let first = rng.gen_range(0..n);
    centers.extend_from_slice(&x[first * d..(first + 1) * d]);
    let mut dist: Vec<f64> = x.chunks(d).map(|row| sq(row, &centers[..d])).collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut idx = n - 1;
            for (r, &w) in dist.iter().enumerate() {
                acc += w;
                if acc > target {
                    idx = r;
                    break;
                }
            }
            idx
        } else {
            rng.gen_range(0..n)
        };
        centers.extend_from_slice(&x[pick * d..(pick + 1) * d]);
        let new_c = &centers[c * d..(c + 1) * d];
        for (r, row) in x.chunks(d).enumerate() {
            dist[r] = dist[r].min(sq(row, new_c));
        }
    }
    centers
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_component() -> GmmParams {
        GmmParams::from_weights(
            &[0.3, 0.7],
            vec![vec![-1.0, 2.0], vec![1.5, -0.5]],
            vec![vec![0.5, 1.2], vec![2.0, 0.3]],
            0.0,
        )
        .unwrap()
    }

    fn point(values: &[f64], mask: &[bool]) -> MissingPoint {
        MissingPoint::new(values.to_vec(), mask.to_vec()).unwrap()
    }

    #[test]
    fn log_coeff_standard_normal_at_mean() {
        let p = point(&[0.0], &[false]);
        let v = log_component_coeff(&[0.0], &[1.0], &p, 0.0).unwrap();
        assert!((v - (-0.918938533204672742)).abs() < 1e-15);
    }

    #[test]
    fn log_coeff_empty_product() {
        let p = point(&[f64::NAN, f64::NAN], &[true, true]);
        assert_eq!(log_component_coeff(&[1.0, 2.0], &[3.0, 4.0], &p, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn log_coeff_regularized_value() {
        // mpmath: -½ ln(2π·5) - ½·1/5
        let p = point(&[1.0, f64::NAN], &[false, true]);
        let v = log_component_coeff(&[0.0, 0.0], &[4.0, 1.0], &p, 1.0).unwrap();
        assert!((v - (-1.8236574894217229291)).abs() < 1e-14);
    }

    #[test]
    fn log_coeff_rejects_non_finite() {
        let p = point(&[1.0], &[false]);
        assert!(log_component_coeff(&[f64::NAN], &[1.0], &p, 0.0).is_err());
        assert!(log_component_coeff(&[0.0], &[f64::INFINITY], &p, 0.0).is_err());
        assert!(log_component_coeff(&[0.0], &[1.0], &p, f64::NAN).is_err());
    }

    #[test]
    fn missing_point_validation() {
        assert!(MissingPoint::new(vec![1.0], vec![false, true]).is_err());
        assert!(MissingPoint::new(vec![f64::NAN], vec![false]).is_err());
        assert!(MissingPoint::new(vec![f64::NAN], vec![true]).is_ok());
    }

    #[test]
    fn single_component_resp_is_one() {
        let g = GmmParams::from_weights(&[1.0], vec![vec![3.0, 1.0]], vec![vec![1.0, 1.0]], 0.0).unwrap();
        let c = conditional(&g, &point(&[100.0, 0.0], &[false, true])).unwrap();
        assert_eq!(c.resp(), &[1.0]);
    }

    #[test]
    fn symmetric_components_split_evenly() {
        let g = GmmParams::from_weights(
            &[0.5, 0.5],
            vec![vec![-2.0, 0.0], vec![2.0, 5.0]],
            vec![vec![1.0, 1.0], vec![1.0, 3.0]],
            0.0,
        )
        .unwrap();
        let c = conditional(&g, &point(&[0.0, f64::NAN], &[false, true])).unwrap();
        assert!((c.resp()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn complete_point_is_flagged() {
        let c = conditional(&two_component(), &point(&[0.0, 1.0], &[false, false])).unwrap();
        assert!(c.is_complete());
        assert_eq!(c.k(), 0);
    }

    #[test]
    fn fully_missing_point_gives_mixture_weights() {
        let g = two_component();
        let c = conditional(&g, &point(&[f64::NAN, f64::NAN], &[true, true])).unwrap();
        for (r, p) in c.resp().iter().zip(g.weights()) {
            assert!((r - p).abs() < 1e-15);
        }
    }

    #[test]
    fn nan_placeholders_never_propagate() {
        let g = two_component();
        let c = conditional(&g, &point(&[f64::NAN, 0.4], &[true, false])).unwrap();
        assert!(c.resp().iter().all(|r| r.is_finite()));
        assert!(c.log_norm().is_finite());
    }

    #[test]
    fn limits_endpoints() {
        let g = two_component();
        let p = point(&[f64::NAN, -1.0], &[true, false]);
        let sweep = conditional_limits(&g, &p, &[0.0, 1.0, 1e12]).unwrap();
        let direct = conditional(&g.with_gamma(0.0), &p).unwrap();
        assert_eq!(sweep[0].resp(), direct.resp());
        for (r, w) in sweep[2].resp().iter().zip(g.weights()) {
            assert!((r - w).abs() < 1e-4);
        }
        let (lo, hi) = (sweep[0].resp()[0], sweep[2].resp()[0]);
        let mid = sweep[1].resp()[0];
        assert!(mid >= lo.min(hi) && mid <= lo.max(hi));
        assert!(conditional_limits(&g, &p, &[1.0, 0.5]).is_err());
        assert!(conditional_limits(&g, &p, &[-1.0]).is_err());
    }

    #[test]
    fn far_observations_stay_finite() {
        let g = GmmParams::from_weights(
            &[0.5, 0.5],
            vec![vec![0.0, 0.0, 0.0], vec![1.0, 1.0, 1.0]],
            vec![vec![VARIANCE_FLOOR; 3], vec![VARIANCE_FLOOR; 3]],
            0.0,
        )
        .unwrap();
        let c = conditional(&g, &point(&[1e6, -1e6, 0.0], &[false, false, true])).unwrap();
        assert!(c.resp().iter().all(|r| r.is_finite()));
        assert!((c.resp().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sample_completion_edges() {
        let g = GmmParams::from_weights(&[1.0], vec![vec![2.0, -3.0]], vec![vec![1e-14, 1e-14]], 0.0).unwrap();
        let p = point(&[5.0, 0.0], &[false, true]);
        let c = conditional(&g, &p).unwrap();
        let s = sample_completion(&c, &p, 7);
        assert_eq!(s[0], 5.0);
        assert!((s[1] + 3.0).abs() < 1e-6);
        assert_eq!(s, sample_completion(&c, &p, 7));

        let full = point(&[1.0, 2.0], &[false, false]);
        let c = conditional(&g, &full).unwrap();
        assert_eq!(sample_completion(&c, &full, 1), vec![1.0, 2.0]);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let g = GmmParams::new(
            vec![0.1, -1.0 / 3.0],
            vec![vec![std::f64::consts::PI, 1e-300], vec![-2.5e17, 0.1 + 0.2]],
            vec![vec![0.0, -13.815510557964274], vec![2.0f64.ln(), 1.0 / 7.0]],
            1e-6,
        )
        .unwrap();
        let back = GmmParams::from_json(&g.to_json().unwrap()).unwrap();
        assert_eq!(g, back);
        let text = g.to_json().unwrap();
        assert!(text.find("\"k\"").unwrap() < text.find("\"d\"").unwrap());
        assert!(text.find("\"gamma\"").unwrap() < text.find("\"logits\"").unwrap());
    }

    #[test]
    fn json_rejects_inconsistent_shape() {
        let text = r#"{"k":2,"d":1,"gamma":0.0,"logits":[0.0],"means":[[0.0]],"log_vars":[[0.0]]}"#;
        assert!(GmmParams::from_json(text).is_err());
    }

    #[test]
    fn floor_variances_clamps() {
        let mut g = GmmParams::from_weights(&[1.0], vec![vec![0.0]], vec![vec![1e-12]], 0.0).unwrap();
        g.floor_variances(VARIANCE_FLOOR);
        assert!((g.variances(0)[0] - VARIANCE_FLOOR).abs() < 1e-20);
    }
}
