//! Independent oracles and measurement drivers.
//!
//! The Monte-Carlo oracle has its own sampler and evaluates the classical
//! activation directly, so it shares nothing with the analytic kernels apart
//! from the RNG crate.

use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activations::{relu_expected, RbfUnit, ReluUnit};
use crate::density::{conditional, ConditionalGmm, GmmParams, MissingPoint};
use crate::error::{Error, Result};
use crate::nn::{Activation, LayerSpec, LossKind, NetworkModel};

/// Settings shared by the randomized oracles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub samples: usize,
    pub seed: u64,
    /// Acceptance band in standard errors.
    pub k_se: f64,
    pub ranges: InstanceRanges,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            samples: 1_000_000,
            seed: 0,
            k_se: 4.0,
            ranges: InstanceRanges::default(),
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 10_000 {
            return Err(Error::Config("oracle sample count must be at least 10^4".into()));
        }
        if !(3.0..=6.0).contains(&self.k_se) {
            return Err(Error::Config("standard-error band must lie in [3, 6]".into()));
        }
        Ok(())
    }
}

/// Ranges for random test instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InstanceRanges {
    pub max_dim: usize,
    pub max_components: usize,
    /// Component means and observed values are drawn from `[-r, r]`.
    pub mean_range: f64,
    /// Component variances are drawn from `[lo, hi]`.
    pub var_range: (f64, f64),
}

impl Default for InstanceRanges {
    fn default() -> Self {
        InstanceRanges {
            max_dim: 10,
            max_components: 5,
            mean_range: 2.0,
            var_range: (0.2, 2.0),
        }
    }
}

/// A random mixture and a point with at least one missing coordinate.
pub fn random_instance<R: Rng + ?Sized>(ranges: &InstanceRanges, rng: &mut R) -> (GmmParams, MissingPoint) {
    let d = rng.gen_range(1..=ranges.max_dim);
    let k = rng.gen_range(1..=ranges.max_components);
    let gmm = random_gmm(d, k, ranges, rng);
    let point = random_point(d, ranges, rng);
    (gmm, point)
}

pub fn random_gmm<R: Rng + ?Sized>(d: usize, k: usize, ranges: &InstanceRanges, rng: &mut R) -> GmmParams {
    let r = ranges.mean_range;
    let (lo, hi) = ranges.var_range;
    let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let means: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.gen_range(-r..r)).collect()).collect();
    let log_vars: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..d).map(|_| rng.gen_range(lo..hi).ln()).collect())
        .collect();
    GmmParams::new(logits, means, log_vars, rng.gen_range(0.0..0.1)).expect("generated parameters are valid")
}

/// Random point of dimension `d`; at least one coordinate is missing and
/// missing slots hold NaN.
pub fn random_point<R: Rng + ?Sized>(d: usize, ranges: &InstanceRanges, rng: &mut R) -> MissingPoint {
    let r = ranges.mean_range;
    let mut mask: Vec<bool> = (0..d).map(|_| rng.gen_bool(0.5)).collect();
    let forced = rng.gen_range(0..d);
    mask[forced] = true;
    let values = mask
        .iter()
        .map(|&m| if m { f64::NAN } else { rng.gen_range(-r..r) })
        .collect();
    MissingPoint::new(values, mask).expect("generated point is valid")
}

pub fn random_relu<R: Rng + ?Sized>(d: usize, rng: &mut R) -> ReluUnit {
    ReluUnit::new((0..d).map(|_| rng.gen_range(-1.5..1.5)).collect(), rng.gen_range(-1.0..1.0))
}

pub fn random_rbf<R: Rng + ?Sized>(d: usize, rng: &mut R) -> RbfUnit {
    RbfUnit::new(
        (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect(),
        (0..d).map(|_| rng.gen_range(0.5f64..3.0).ln()).collect(),
    )
}

/// A unit whose expectation the oracle estimates.
#[derive(Clone, Debug, PartialEq)]
pub enum Unit {
    Relu(ReluUnit),
    Rbf(RbfUnit),
}

impl Unit {
    /// Plain pointwise activation, written independently of the layer code.
    fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Unit::Relu(u) => {
                let mut z = u.b;
                for j in 0..x.len() {
                    z += u.w[j] * x[j];
                }
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Unit::Rbf(u) => {
                let mut log = 0.0;
                for j in 0..x.len() {
                    let g = u.log_gamma_diag[j].exp();
                    let diff = x[j] - u.c[j];
                    log -= 0.5 * ((2.0 * std::f64::consts::PI * g).ln() + diff * diff / g);
                }
                log.exp()
            }
        }
    }
}

/// Box-Muller pair source.
struct Gauss {
    spare: Option<f64>,
}

impl Gauss {
    fn next<R: Rng + ?Sized>(&mut self, rng: &mut R) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
        let u2: f64 = rng.gen();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }
}

/// Monte-Carlo mean of the classical activation over `n` draws from `cond`,
/// with its standard error.
pub fn mc_expected_activation(
    unit: &Unit,
    cond: &ConditionalGmm,
    point: &MissingPoint,
    n: usize,
    seed: u64,
) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = Gauss { spare: None };
    let mut x = point.values().to_vec();
    let missing = cond.missing().to_vec();
    let resp = cond.resp().to_vec();
    // Welford accumulation.
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for t in 0..n {
        if !missing.is_empty() {
            let u: f64 = rng.gen();
            let mut comp = resp.len() - 1;
            let mut acc = 0.0;
            for (i, r) in resp.iter().enumerate() {
                acc += r;
                if u < acc {
                    comp = i;
                    break;
                }
            }
            let (m, v) = (cond.means_missing(comp), cond.vars_missing(comp));
            for (jj, &j) in missing.iter().enumerate() {
                x[j] = m[jj] + v[jj].sqrt() * gauss.next(&mut rng);
            }
        }
        let y = unit.eval(&x);
        let delta = y - mean;
        mean += delta / (t + 1) as f64;
        m2 += delta * (y - mean);
    }
    let var = if n > 1 { m2 / (n - 1) as f64 } else { 0.0 };
    (mean, (var / n as f64).sqrt())
}

/// Relative error used by the finite-difference checks; denominators are
/// floored at `1e-4` so gradients near zero are compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Central finite-difference gradient with step `h · max(1, |x_i|)`.
pub fn finite_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let step = h * x[i].abs().max(1.0);
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Outcome of [`distinguish_measures`]. There is no "equal" verdict: a small
/// gap only means no witness was found.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Certified,
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distinguish {
    pub max_gap: f64,
    pub witness_w: Vec<f64>,
    pub witness_b: f64,
    pub verdict: Verdict,
}

/// Gap above which two measures count as distinguished.
pub const CERTIFY_GAP: f64 = 1e-6;

/// Expected ReLU response of the whole mixture (no observed coordinates).
pub fn mixture_relu_response(gmm: &GmmParams, w: &[f64], b: f64) -> Result<f64> {
    let point = MissingPoint::new(vec![0.0; gmm.dim()], vec![true; gmm.dim()])?;
    let cond = conditional(gmm, &point)?;
    relu_expected(&ReluUnit::new(w.to_vec(), b), &cond, &point)
}

/// Largest `|ReLU_{w,b}(a) − ReLU_{w,b}(b)|` over `trials` random probes with
/// unit-norm `w` and `b ∈ [-3, 3]`.
pub fn distinguish_measures(a: &GmmParams, b: &GmmParams, trials: usize, seed: u64) -> Result<Distinguish> {
    if a.dim() != b.dim() {
        return Err(Error::invalid("mixtures live in different dimensions"));
    }
    let d = a.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = Gauss { spare: None };
    let mut best = Distinguish {
        max_gap: 0.0,
        witness_w: vec![0.0; d],
        witness_b: 0.0,
        verdict: Verdict::Inconclusive,
    };
    for _ in 0..trials {
        let mut w: Vec<f64> = (0..d).map(|_| gauss.next(&mut rng)).collect();
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        w.iter_mut().for_each(|v| *v /= norm);
        let bias = rng.gen_range(-3.0..=3.0);
        let gap = (mixture_relu_response(a, &w, bias)? - mixture_relu_response(b, &w, bias)?).abs();
        if gap > best.max_gap {
            best.max_gap = gap;
            best.witness_w = w;
            best.witness_b = bias;
        }
    }
    if best.max_gap > CERTIFY_GAP {
        best.verdict = Verdict::Certified;
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub dim: usize,
    pub components: usize,
    pub units: usize,
    pub trials: usize,
    pub warmup: usize,
    /// Fraction of coordinates missing in the benchmark points.
    pub missing_fraction: f64,
    /// Points evaluated per timed trial.
    pub points: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            dim: 256,
            components: 1,
            units: 64,
            trials: 100,
            warmup: 10,
            missing_fraction: 0.25,
            points: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub config: BenchConfig,
    pub generalized_ns: f64,
    pub classical_ns: f64,
    pub ratio: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median per-point cost of a generalized versus a classical first layer of
/// the same width on the same inputs (the classical layer sees the points
/// mean-completed).
pub fn bench_layer_cost(cfg: &BenchConfig) -> Result<BenchResult> {
    if cfg.trials < 100 {
        return Err(Error::Config("benchmark needs at least 100 trials".into()));
    }
    if cfg.dim == 0 || cfg.components == 0 || cfg.units == 0 || cfg.points == 0 {
        return Err(Error::Config("benchmark sizes must be positive".into()));
    }
    if !(0.0..1.0).contains(&cfg.missing_fraction) {
        return Err(Error::Config("missing fraction must lie in [0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ranges = InstanceRanges::default();
    let gmm = random_gmm(cfg.dim, cfg.components, &ranges, &mut rng);
    let n_missing = ((cfg.dim as f64 * cfg.missing_fraction).round() as usize).clamp(1, cfg.dim);
    let mut incomplete = Vec::with_capacity(cfg.points);
    let mut complete = Vec::with_capacity(cfg.points);
    for _ in 0..cfg.points {
        let values: Vec<f64> = (0..cfg.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let start = rng.gen_range(0..=cfg.dim - n_missing);
        let mask: Vec<bool> = (0..cfg.dim).map(|j| j >= start && j < start + n_missing).collect();
        complete.push(MissingPoint::complete(values.clone())?);
        incomplete.push(MissingPoint::new(values, mask)?);
    }
    let generalized = NetworkModel::new(
        cfg.dim,
        vec![LayerSpec::GeneralizedRelu { width: cfg.units }],
        LossKind::MaskedMse,
        Some(gmm),
        cfg.seed,
    )?;
    let classical = NetworkModel::new(
        cfg.dim,
        vec![LayerSpec::Dense {
            width: cfg.units,
            activation: Activation::Relu,
        }],
        LossKind::MaskedMse,
        None,
        cfg.seed,
    )?;
    let time = |model: &NetworkModel, points: &[MissingPoint]| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(cfg.trials);
        for t in 0..cfg.warmup + cfg.trials {
            let start = Instant::now();
            for p in points {
                black_box(model.first_layer(black_box(p))?);
            }
            let ns = start.elapsed().as_nanos() as f64 / points.len() as f64;
            if t >= cfg.warmup {
                out.push(ns);
            }
        }
        Ok(out)
    };
    let g = median(time(&generalized, &incomplete)?);
    let c = median(time(&classical, &complete)?);
    Ok(BenchResult {
        config: cfg.clone(),
        generalized_ns: g,
        classical_ns: c,
        ratio: g / c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special::nr;

    #[test]
    fn zero_variance_oracle_is_exact() {
        let point = MissingPoint::new(vec![0.5, f64::NAN], vec![false, true]).unwrap();
        let cond = ConditionalGmm::from_parts(vec![1.0], point.mask().to_vec(), vec![vec![2.0]], vec![vec![0.0]]).unwrap();
        let unit = Unit::Relu(ReluUnit::new(vec![1.0, 1.0], -1.0));
        let (m, se) = mc_expected_activation(&unit, &cond, &point, 10_000, 3);
        assert_eq!(se, 0.0);
        assert!((m - 1.5).abs() < 1e-15);
    }

    #[test]
    fn identical_mixtures_have_no_gap() {
        let g = random_gmm(3, 2, &InstanceRanges::default(), &mut ChaCha8Rng::seed_from_u64(1));
        let r = distinguish_measures(&g, &g.clone(), 200, 2).unwrap();
        assert!(r.max_gap < 1e-12);
        assert_eq!(r.verdict, Verdict::Inconclusive);
    }

    #[test]
    fn shifted_normals_are_distinguished() {
        let a = GmmParams::from_weights(&[1.0], vec![vec![0.0]], vec![vec![1.0]], 0.0).unwrap();
        let b = GmmParams::from_weights(&[1.0], vec![vec![1.0]], vec![vec![1.0]], 0.0).unwrap();
        let direct = (mixture_relu_response(&a, &[1.0], 0.0).unwrap() - mixture_relu_response(&b, &[1.0], 0.0).unwrap()).abs();
        assert!((direct - (nr(1.0) - nr(0.0))).abs() < 1e-14);
        assert!(direct > 0.1);
        let r = distinguish_measures(&a, &b, 100, 0).unwrap();
        assert_eq!(r.verdict, Verdict::Certified);
    }

    #[test]
    fn finite_difference_of_quadratic() {
        let g = finite_difference(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, -1.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8 && (g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn bench_rejects_few_trials() {
        assert!(bench_layer_cost(&BenchConfig { trials: 10, ..Default::default() }).is_err());
    }
}
