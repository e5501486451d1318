//! Deterministic seeding. Every stochastic component draws from its own
//! ChaCha stream derived from (base seed, label), so adding or removing a
//! component never shifts another component's draws.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// FNV-1a over the label, mixed into the base seed.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325 ^ base.wrapping_mul(0x9e3779b97f4a7c15);
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn stream(base: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, label))
}

/// Gaussian init, mean 0.
pub fn normal_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| gaussian(rng) * std).collect();
    Tensor::new(shape, data)
}

pub fn uniform_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data)
}

/// Box-Muller; two uniforms per draw keeps the stream layout obvious.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
