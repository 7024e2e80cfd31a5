//! Seedable PRNG streams. Every consumer derives its own stream from the run
//! seed so adding a consumer never perturbs another one's draws.

use rand::Rng;
use rand_pcg::Pcg32;

use crate::tensor::Tensor;

pub type Prng = Pcg32;

/// Stream ids in use. New consumers take a fresh id.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const SCENE: u64 = 2;
    pub const BENCH: u64 = 3;
    pub const GRADCHECK: u64 = 4;
    pub const GRADSUITE: u64 = 5;
}

pub fn stream(seed: u64, stream_id: u64) -> Prng {
    Pcg32::new(seed, stream_id)
}

/// Tracked leaf drawn uniformly from `±sqrt(1/fan_in)`.
pub fn uniform_param(rng: &mut Prng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::param(data, shape).expect("finite init")
}

pub fn normal_vec(rng: &mut Prng, n: usize, std: f64) -> Vec<f64> {
    // Box-Muller; two uniforms per sample keeps the stream layout simple.
    (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen::<f64>();
            std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect()
}

pub fn uniform_vec(rng: &mut Prng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}
