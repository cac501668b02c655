//! Shared fixtures for the benchmarks.

use ivcf_core::synth::{generate, DgpSpec};
use ivcf_core::ObservationFrame;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A step-effect experiment with `n` rows and `p` covariates.
pub fn step_frame(n: usize, p: usize) -> ObservationFrame {
    generate(&DgpSpec {
        n,
        p,
        seed: 17,
        ..DgpSpec::default()
    })
    .expect("valid generator settings")
    .frame
}

/// Column-major uniform features and standard-ish rewards.
pub fn policy_instance(n: usize, p: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = (0..p).map(|_| (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
    let r = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    (x, r)
}
