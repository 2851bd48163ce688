//! Shared builders for the criterion benchmarks: deterministic models,
//! client updates, and input batches sized like the simulator's hot paths.

use fednia::defense::DefenseParams;
use fednia::fl::{classifier_specs, ClientUpdate};
use fednia::nn::{init_weights, WeightSet};
use fednia::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The scaled experiment architecture: 28x28 input, three hidden layers,
/// ten classes.
pub fn scaled_model(seed: u64) -> WeightSet {
    let specs = classifier_specs(784, &[128, 128, 64], 10);
    init_weights(&specs, seed).expect("classifier specs are valid")
}

/// `n` updates that are jittered copies of `base`, one per client id —
/// shaped like the inputs the server sees at aggregation time.
pub fn jittered_updates(base: &WeightSet, n: u32, seed: u64) -> Vec<ClientUpdate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = base.specs();
    let flat = base.flatten();
    (0..n)
        .map(|client_id| {
            let perturbed: Vec<f32> = flat
                .iter()
                .map(|w| w + rng.random_range(-0.01f32..0.01))
                .collect();
            ClientUpdate {
                client_id,
                round: 0,
                weights: WeightSet::from_flat(&specs, &perturbed)
                    .expect("perturbed flat keeps the base shape"),
            }
        })
        .collect()
}

/// Uniform random inputs in `[0, 1)`, `rows` x `cols`.
pub fn random_batch(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..rows * cols)
        .map(|_| rng.random_range(0.0f32..1.0))
        .collect();
    Matrix::from_vec(rows, cols, values).expect("dims match value count")
}

/// Defense settings scaled down so one full round fits a bench iteration.
pub fn bench_defense_params() -> DefenseParams {
    DefenseParams {
        nu: 20,
        detector_epochs: 5,
        ..DefenseParams::default()
    }
}
