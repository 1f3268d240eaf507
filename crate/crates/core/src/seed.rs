//! Seed splitting.
//!
//! Every consumer of randomness draws from `ChaCha8(root)` on its own stream
//! id, so adding a consumer never shifts the numbers another one sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const TASK_TABLE: u64 = 1;
pub const TASK_SPLIT: u64 = 2;
pub const MCQ_CHOICES: u64 = 3;
pub const GRAPH_INIT: u64 = 4;
pub const TRAIN_ORDER: u64 = 5;
pub const BASELINE_HEAD: u64 = 6;
pub const VALIDATION: u64 = 7;
pub const PERMUTATION: u64 = 8;
pub const GENERIC_TABLE: u64 = 9;
/// Node `i` initializes from `NODE_INIT + i` and pretrains from `NODE_PRETRAIN + i`.
pub const NODE_INIT: u64 = 100;
pub const NODE_PRETRAIN: u64 = 200;
pub const NODE_CORPUS: u64 = 300;

pub fn stream(root: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(id);
    rng
}

/// A 64-bit seed drawn from a stream, for APIs that take a plain seed.
pub fn derive(root: u64, id: u64) -> u64 {
    rand::Rng::next_u64(&mut stream(root, id))
}

pub(crate) fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng)).collect()
}
