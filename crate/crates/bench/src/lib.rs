//! Fixtures shared by the criterion benchmarks in `benches/`.

use misslayer::density::MissingPoint;
use misslayer::verification::{random_gmm, InstanceRanges};
use misslayer::{Activation, LayerSpec, LossKind, NetworkModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A generalized and a classical single-layer ReLU network of equal width,
/// plus matching incomplete and complete inputs.
pub struct Fixture {
    pub generalized: NetworkModel,
    pub classical: NetworkModel,
    pub incomplete: Vec<MissingPoint>,
    pub complete: Vec<MissingPoint>,
}

/// `missing` contiguous coordinates are hidden in every incomplete point.
pub fn fixture(dim: usize, components: usize, units: usize, missing: usize, points: usize, seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gmm = random_gmm(dim, components, &InstanceRanges::default(), &mut rng);
    let mut incomplete = Vec::with_capacity(points);
    let mut complete = Vec::with_capacity(points);
    for _ in 0..points {
        let values: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let start = rng.gen_range(0..=dim - missing);
        let mask = (0..dim).map(|j| j >= start && j < start + missing).collect();
        complete.push(MissingPoint::complete(values.clone()).expect("finite"));
        incomplete.push(MissingPoint::new(values, mask).expect("valid"));
    }
    let generalized = NetworkModel::new(
        dim,
        vec![LayerSpec::GeneralizedRelu { width: units }],
        LossKind::MaskedMse,
        Some(gmm),
        seed,
    )
    .expect("valid network");
    let classical = NetworkModel::new(
        dim,
        vec![LayerSpec::Dense { width: units, activation: Activation::Relu }],
        LossKind::MaskedMse,
        None,
        seed,
    )
    .expect("valid network");
    Fixture { generalized, classical, incomplete, complete }
}
