#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rbm_core::dynamics::{sample_initial, ParticleState};
use rbm_core::model::KernelSpec;
use rbm_core::scenarios::preset;
use rbm_core::SystemSpec;

const CHARGES: [f64; 4] = [-1.0, 2.0, -2.0, 1.0];

/// Two-dimensional Cauchy-kernel system without confinement, with the given
/// particle counts and batch sizes.
pub fn cauchy_spec(n: &[usize], p: &[usize]) -> SystemSpec {
    let mut spec = preset("consistency_equal").unwrap().system;
    let template = spec.species[0].clone();
    spec.species = n
        .iter()
        .zip(p)
        .map(|(&n, &p)| {
            let mut s = template.clone();
            s.particles = n;
            s.batch_size = p;
            s
        })
        .collect();
    let m = n.len();
    spec.kernels = (0..m)
        .map(|i| (0..m).map(|j| KernelSpec::scaled_cauchy(CHARGES[i % 4], CHARGES[j % 4])).collect())
        .collect();
    spec
}

pub fn positions(spec: &SystemSpec, seed: u64) -> ParticleState {
    sample_initial(spec, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Small configurations whose joint partitions can be listed exhaustively.
pub fn enumerable_configs() -> Vec<(&'static str, SystemSpec)> {
    [
        ("equal_b", vec![4, 4], vec![2, 2]),
        ("unequal_b", vec![4, 6], vec![2, 2]),
        ("single_p2", vec![6], vec![2]),
        ("single_p3", vec![6], vec![3]),
        ("three_species", vec![4, 6, 2], vec![2, 2, 2]),
        ("three_mixed", vec![2, 4, 6], vec![2, 2, 3]),
        ("skewed", vec![8, 2], vec![2, 2]),
        ("unequal_p", vec![6, 4], vec![3, 2]),
    ]
    .into_iter()
    .map(|(name, n, p)| (name, cauchy_spec(&n, &p)))
    .collect()
}
