//! Seeded parameter initialization.

use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// The crate-wide RNG. Everything that needs randomness takes one of these,
/// seeded from the run config, so builds are reproducible.
pub type Prng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Prng {
    use rand::SeedableRng;
    Prng::seed_from_u64(seed)
}

/// He (fan-in) normal init for a conv weight of shape (c_out, c_in/g, kh, kw):
/// std = sqrt(2 / (c_in/g * kh * kw)). Uses Box-Muller on the seeded stream.
pub fn he_conv(rng: &mut Prng, c_out: usize, cpg: usize, kh: usize, kw: usize) -> Tensor {
    let fan_in = (cpg * kh * kw) as f64;
    let std = (2.0 / fan_in).sqrt();
    let data = (0..c_out * cpg * kh * kw)
        .map(|_| (normal(rng) * std) as f32)
        .collect();
    Tensor::from_vec(c_out, cpg, kh, kw, data).expect("he_conv shape")
}

/// Standard normal via Box-Muller.
pub fn normal(rng: &mut Prng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Uniform tensor in [lo, hi), mostly for tests and synthetic inputs.
pub fn uniform(rng: &mut Prng, n: usize, c: usize, h: usize, w: usize, lo: f32, hi: f32) -> Tensor {
    let data = (0..n * c * h * w).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(n, c, h, w, data).expect("uniform shape")
}
