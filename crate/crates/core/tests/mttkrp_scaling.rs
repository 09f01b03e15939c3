//! MTTKRP cost per nonzero stays flat from 10³ to 10⁵ nonzeros.

use std::collections::BTreeSet;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stsketch::exec::Exec;
use stsketch::tensor::{mttkrp_with, KruskalModel, Mode, SparseTensor};

fn instance(nnz: usize, rng: &mut ChaCha8Rng) -> SparseTensor {
    let dims = [200, 100, 100];
    let mut seen = BTreeSet::new();
    while seen.len() < nnz {
        seen.insert((rng.random_range(0..dims[0]), rng.random_range(0..dims[1]), rng.random_range(0..dims[2])));
    }
    let entries = seen.into_iter().map(|(i, j, k)| (i, j, k, rng.random::<f64>())).collect();
    SparseTensor::new(dims, entries).unwrap()
}

fn seconds_per_call(t: &SparseTensor, model: &KruskalModel) -> f64 {
    let reps = (200_000 / t.nnz()).max(3);
    let mut samples: Vec<f64> = (0..9)
        .map(|_| {
            let start = Instant::now();
            for _ in 0..reps {
                for mode in [Mode::One, Mode::Two, Mode::Three] {
                    std::hint::black_box(mttkrp_with(t, model, mode, Exec::Sequential).unwrap());
                }
            }
            start.elapsed().as_secs_f64() / reps as f64
        })
        .collect();
    samples.sort_by(f64::total_cmp);
    samples[samples.len() / 2]
}

#[test]
fn runtime_grows_within_twice_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rank = 8;
    let mut factor = |n| DMatrix::from_fn(n, rank, |_, _| rng.random::<f64>());
    let model = KruskalModel::new(factor(200), factor(100), factor(100)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sizes = [1_000, 10_000, 100_000];
    let per_nnz: Vec<f64> = sizes
        .iter()
        .map(|&n| seconds_per_call(&instance(n, &mut rng), &model) / n as f64)
        .collect();
    for (n, c) in sizes.iter().zip(&per_nnz).skip(1) {
        let ratio = c / per_nnz[0];
        println!("nnz {n}: cost per nonzero is {ratio:.2}x that at 1000");
        assert!(ratio <= 2.0, "nnz {n}: {ratio:.2}x");
    }
}
