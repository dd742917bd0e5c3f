//! Seed plumbing. Every stochastic component owns a ChaCha stream derived
//! from a base seed and a component tag, so adding a consumer never shifts
//! the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// splitmix64 finalizer over `seed ^ tag`.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, tag: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag))
}

pub mod tags {
    pub const DATA: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const VAE_INIT: u64 = 3;
    pub const GAN_INIT: u64 = 4;
    pub const GAN_NOISE: u64 = 5;
    pub const BATCHES: u64 = 6;
    pub const COMPLETE: u64 = 7;
    pub const DR_INIT: u64 = 8;
    pub const DR_BATCHES: u64 = 9;
    pub const DATA_WEIGHTS: u64 = 10;
    pub const VAE_NOISE: u64 = 11;
}

/// Shuffles `0..n` and cuts it into consecutive batches of at most `size`.
pub fn shuffled_batches<R: rand::Rng + ?Sized>(n: usize, size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(size.max(1)).map(<[usize]>::to_vec).collect()
}

/// `rows × cols` standard-normal draws.
pub fn standard_normal<R: rand::Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> crate::autodiff::Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    crate::autodiff::Tensor::matrix(rows, cols, data).expect("finite normal draws")
}
