mod common;

use common::*;
use misslayer::data::DatasetWithMask;
use misslayer::density::{
    conditional, conditional_limits, em_fit, em_fit_traced, sample_completion, GmmParams, MissingPoint,
    VARIANCE_FLOOR,
};
use misslayer::verification::{random_gmm, random_instance, InstanceRanges};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn responsibilities_form_a_probability_vector(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (gmm, point) = random_instance(&InstanceRanges::default(), &mut rng);
        let cond = conditional(&gmm, &point).unwrap();
        prop_assert!(cond.resp().iter().all(|&r| r >= 0.0));
        prop_assert!((cond.resp().iter().sum::<f64>() - 1.0).abs() < 1e-10);
        for i in 0..cond.k() {
            prop_assert!(cond.vars_missing(i).iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn conditional_commutes_with_coordinate_permutation(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (gmm, point) = random_instance(&InstanceRanges::default(), &mut rng);
        let d = gmm.dim();
        let mut perm: Vec<usize> = (0..d).collect();
        for i in (1..d).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let permute = |v: &[f64]| perm.iter().map(|&p| v[p]).collect::<Vec<_>>();
        let pg = GmmParams::new(
            gmm.logits().to_vec(),
            (0..gmm.k()).map(|i| permute(gmm.mean(i))).collect(),
            (0..gmm.k()).map(|i| permute(gmm.log_var(i))).collect(),
            gmm.gamma(),
        ).unwrap();
        let pp = MissingPoint::new(permute(point.values()), perm.iter().map(|&p| point.mask()[p]).collect()).unwrap();
        let (a, b) = (conditional(&gmm, &point).unwrap(), conditional(&pg, &pp).unwrap());
        for i in 0..gmm.k() {
            prop_assert!((a.resp()[i] - b.resp()[i]).abs() < 1e-12);
            // missing coordinates are listed in ascending order in each frame
            for (jj, &j) in b.missing().iter().enumerate() {
                let orig = perm[j];
                let pos = a.missing().iter().position(|&m| m == orig).unwrap();
                prop_assert_eq!(b.means_missing(i)[jj], a.means_missing(i)[pos]);
                prop_assert_eq!(b.vars_missing(i)[jj], a.vars_missing(i)[pos]);
            }
        }
    }

    #[test]
    fn huge_gamma_gives_mixture_weights(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (gmm, point) = random_instance(&InstanceRanges::default(), &mut rng);
        let cond = conditional(&gmm.with_gamma(1e12), &point).unwrap();
        for (r, p) in cond.resp().iter().zip(gmm.weights()) {
            prop_assert!((r - p).abs() < 1e-4);
        }
    }

    #[test]
    fn extreme_inputs_stay_finite(seed in any::<u64>(), scale in 1.0f64..1e6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ranges = InstanceRanges { var_range: (VARIANCE_FLOOR, 2.0 * VARIANCE_FLOOR), ..Default::default() };
        let (gmm, point) = random_instance(&ranges, &mut rng);
        let far = MissingPoint::new(
            point.values().iter().map(|v| v * scale).collect(),
            point.mask().to_vec(),
        ).unwrap();
        let cond = conditional(&gmm.with_gamma(0.0), &far).unwrap();
        prop_assert!(cond.resp().iter().all(|r| r.is_finite()));
        prop_assert!((cond.resp().iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn em_log_likelihood_never_decreases(seed in any::<u64>(), k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..60).map(|_| (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
        let mask: Vec<Vec<bool>> = (0..60).map(|i| (0..3).map(|j| (i + j) % 7 == 0).collect()).collect();
        let data = DatasetWithMask::new(rows, mask, None).unwrap();
        let fit = em_fit_traced(&data, k, seed, 50, 0.0).unwrap();
        for w in fit.log_likelihood.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-9, "{} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn quadrature_matches_the_exact_conditional() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..4 {
        let d = 2 + case % 2;
        let gmm = random_gmm(d, 2 + case % 3, &InstanceRanges::default(), &mut rng);
        let mut mask = vec![false; d];
        mask[case % d] = true;
        let values = mask.iter().map(|&m| if m { f64::NAN } else { rng.gen_range(-1.0..1.0) }).collect();
        let point = MissingPoint::new(values, mask).unwrap();
        let (dens, resp) = quadrature_check(&gmm, &point);
        assert!(dens < 1e-6 && resp < 1e-6, "case {case}: density {dens:e}, resp {resp:e}");
    }
}

#[test]
fn limits_sweep_is_consistent() {
    let gmm = GmmParams::from_weights(
        &[0.5, 0.5],
        vec![vec![-1.0, 1.0], vec![1.0, -2.0]],
        vec![vec![1.0, 0.5], vec![0.5, 1.0]],
        0.0,
    )
    .unwrap();
    let point = MissingPoint::new(vec![f64::NAN, -1.0], vec![true, false]).unwrap();
    let sweep = conditional_limits(&gmm, &point, &[0.0, 1.0, 1e12]).unwrap();
    let exact = conditional(&gmm, &point).unwrap();
    assert_eq!(sweep[0].resp(), exact.resp());
    let (r0, r1, rinf) = (sweep[0].resp()[0], sweep[1].resp()[0], sweep[2].resp()[0]);
    assert!((r0.min(rinf)..=r0.max(rinf)).contains(&r1), "{r0} {r1} {rinf}");
    assert!((rinf - 0.5).abs() < 1e-4);
}

#[test]
fn sample_mean_matches_mixture_mean() {
    let gmm = GmmParams::from_weights(
        &[0.3, 0.7],
        vec![vec![0.0, -1.0, 2.0], vec![1.0, 3.0, -2.0]],
        vec![vec![1.0, 0.5, 2.0], vec![0.3, 1.5, 1.0]],
        1e-6,
    )
    .unwrap();
    let point = MissingPoint::new(vec![0.4, f64::NAN, f64::NAN], vec![false, true, true]).unwrap();
    let cond = conditional(&gmm, &point).unwrap();
    let want = cond.mixture_mean_missing();
    let n = 100_000;
    let mut sum = [0.0; 2];
    let mut sq = [0.0; 2];
    for s in 0..n {
        let x = sample_completion(&cond, &point, s as u64);
        assert_eq!(x[0], 0.4);
        for (jj, &j) in [1usize, 2].iter().enumerate() {
            sum[jj] += x[j];
            sq[jj] += x[j] * x[j];
        }
    }
    for jj in 0..2 {
        let mean = sum[jj] / n as f64;
        let se = ((sq[jj] / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - want[jj]).abs() < 4.0 * se, "coord {jj}: {mean} vs {}", want[jj]);
    }
}

#[test]
fn em_single_component_is_closed_form() {
    let rows = vec![vec![1.0, 2.0], vec![3.0, -2.0], vec![5.0, 0.0], vec![7.0, 4.0]];
    let data = DatasetWithMask::complete(rows, None).unwrap();
    let g = em_fit(&data, 1, 0, 10, 1e-12).unwrap();
    assert!((g.mean(0)[0] - 4.0).abs() < 1e-12 && (g.mean(0)[1] - 1.0).abs() < 1e-12);
    let v = g.variances(0);
    assert!((v[0] - 5.0).abs() < 1e-10 && (v[1] - 5.0).abs() < 1e-10, "{v:?}");
}

#[test]
fn em_recovers_separated_clusters() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let centers = [[-5.0, 0.0], [5.0, 3.0]];
    let rows: Vec<Vec<f64>> = (0..400)
        .map(|i| {
            let c = centers[i % 2];
            (0..2).map(|j| c[j] + 0.5 * rng.sample::<f64, _>(StandardNormal)).collect()
        })
        .collect();
    let data = DatasetWithMask::complete(rows, None).unwrap();
    let g = em_fit(&data, 2, 1, 200, 1e-10).unwrap();
    for c in centers {
        let best = (0..2)
            .map(|i| ((g.mean(i)[0] - c[0]).powi(2) + (g.mean(i)[1] - c[1]).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min);
        assert!(best < 0.1, "center {c:?} missed by {best}");
    }
}

#[test]
fn em_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows: Vec<Vec<f64>> = (0..50).map(|_| (0..4).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
    let data = DatasetWithMask::complete(rows, None).unwrap();
    let a = em_fit(&data, 3, 11, 40, 1e-9).unwrap();
    let b = em_fit(&data, 3, 11, 40, 1e-9).unwrap();
    assert_eq!(a, b);
    assert!(em_fit(&data, 51, 0, 10, 1e-9).is_err());
}

#[test]
fn snapshot_json_loads_back() {
    let g = random_gmm(4, 3, &InstanceRanges::default(), &mut ChaCha8Rng::seed_from_u64(5));
    assert_eq!(GmmParams::from_json(&g.to_json().unwrap()).unwrap(), g);
}
