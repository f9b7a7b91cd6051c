//! Inputs shared by the benchmarks.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lots_core::pair_codec::{Modality, TokenSequence};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(DType::F32).unwrap()
}

pub fn tokens(rows: usize, d: usize, modality: Modality, rng: &mut ChaCha8Rng) -> TokenSequence {
    TokenSequence::new(uniform_tensor(&[rows, d], rng), modality).unwrap()
}
