use super::{Result, Tensor};
use crate::rng::{uniform_param, Prng};

/// Anything owning trainable leaves. The optimizer swaps in fresh leaves
/// after every step, so the handles must be reachable mutably.
pub trait Parameterized {
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&mut self) -> usize {
        self.params_mut().iter().map(|p| p.numel()).sum()
    }
}

/// Row-wise affine map `[N, in] -> [N, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl Linear {
    pub fn init(rng: &mut Prng, input: usize, output: usize) -> Self {
        Self {
            weight: uniform_param(rng, &[input, output], input),
            bias: uniform_param(rng, &[output], input),
        }
    }

    /// Identity weights and zero bias.
    pub fn identity(dim: usize) -> Self {
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        Self {
            weight: Tensor::param(w, &[dim, dim]).expect("finite"),
            bias: Tensor::param(vec![0.0; dim], &[dim]).expect("finite"),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add_row_bias(&self.bias)
    }
}

impl Parameterized for Linear {
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

impl Parameterized for super::Conv2dParams {
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        super::Conv2dParams::params_mut(self)
    }
}
