#![allow(dead_code)]

use dllm_cache::tensor::Matrix;
use dllm_cache::{GenConfig, ModelConfig, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_model(seed: u64) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        hidden_dim: 16,
        num_heads: 2,
        ffn_dim: 32,
        vocab_size: 24,
        mask_token_id: 23,
        seed,
    }
}

pub fn params(cfg: &ModelConfig) -> ModelParams {
    ModelParams::new(cfg).unwrap()
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
    )
    .unwrap()
}

/// `x` with a random subset of rows replaced, standing in for the next
/// step's layer input.
pub fn perturb(x: &Matrix, rng: &mut ChaCha8Rng) -> Matrix {
    let mut out = x.clone();
    for i in 0..x.rows() {
        if rng.random_bool(0.4) {
            for v in out.row_mut(i) {
                *v += rng.random_range(-0.5f32..0.5);
            }
        }
    }
    out
}

pub fn prompt(len: usize, vocab: usize, mask: u32, rng: &mut ChaCha8Rng) -> Vec<u32> {
    (0..len)
        .map(|_| loop {
            let t = rng.random_range(0..vocab as u32);
            if t != mask {
                break t;
            }
        })
        .collect()
}

pub fn gen(steps: usize, gen_len: usize, block_len: usize, prompt: Vec<u32>) -> GenConfig {
    GenConfig {
        steps,
        gen_len,
        block_len,
        prompt,
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn bits(m: &Matrix) -> Vec<u32> {
    m.data().iter().map(|v| v.to_bits()).collect()
}
