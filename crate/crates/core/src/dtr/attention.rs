use serde::{Deserialize, Serialize};

use super::{DtrError, Result};
use crate::rng::Prng;
use crate::tensor::{Linear, Parameterized, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionKind {
    /// `softmax(Q K^T / sqrt(C)) V`, quadratic in sequence length.
    Vanilla,
    /// Kernelized with `phi(x) = elu(x) + 1`, linear in sequence length.
    Linear,
}

impl std::str::FromStr for AttentionKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "vanilla" => Ok(Self::Vanilla),
            "linear" => Ok(Self::Linear),
            other => Err(format!("unknown attention kind {other:?} (vanilla, linear)")),
        }
    }
}

impl std::fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Vanilla => "vanilla",
            Self::Linear => "linear",
        })
    }
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<()> {
    let ok = q.rank() == 2
        && k.rank() == 2
        && v.rank() == 2
        && q.shape()[1] == k.shape()[1]
        && k.shape()[0] == v.shape()[0];
    if !ok {
        return Err(DtrError::Tensor(TensorError::ShapeMismatch {
            op: "attention",
            lhs: q.shape().to_vec(),
            rhs: [k.shape(), v.shape()].concat(),
        }));
    }
    Ok(())
}

/// `softmax(Q K^T / sqrt(C)) V` for `Q: [N, C]`, `K: [M, C]`, `V: [M, Cv]`.
pub fn attention_vanilla(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    check_qkv(q, k, v)?;
    let c = q.shape()[1] as f64;
    let scores = q.scale(1.0 / c.sqrt())?.matmul(&k.transpose()?)?;
    Ok(scores.softmax(1)?.matmul(v)?)
}

/// `phi(x) = elu(x) + 1`, strictly positive.
pub fn feature_map(x: &Tensor) -> Result<Tensor> {
    Ok(x.elu()?.add_scalar(1.0)?)
}

/// Linear attention with the key-value summary `phi(K)^T V` aggregated
/// first, so cost is `O(N C Cv)` instead of `O(N M C)`.
pub fn attention_linear(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    check_qkv(q, k, v)?;
    let (n, m, cv) = (q.shape()[0], k.shape()[0], v.shape()[1]);
    let fq = feature_map(q)?;
    let fk_t = feature_map(k)?.transpose()?;
    let summary = fk_t.matmul(v)?; // [C, Cv]
    let key_sum = fk_t.matmul(&Tensor::full(&[m, 1], 1.0))?; // [C, 1]
    let numer = fq.matmul(&summary)?; // [N, Cv]
    let denom = fq.matmul(&key_sum)?.matmul(&Tensor::full(&[1, cv], 1.0))?;
    debug_assert_eq!(denom.shape(), &[n, cv]);
    Ok(numer.div(&denom)?)
}

/// Same result as [`attention_linear`] via the explicit `[N, M]` weight
/// matrix `phi(Q) phi(K)^T`, row-normalized.
pub fn attention_linear_explicit(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    check_qkv(q, k, v)?;
    let weights = feature_map(q)?.matmul(&feature_map(k)?.transpose()?)?;
    Ok(weights.normalize_sum(1)?.matmul(v)?)
}

pub fn attention(kind: AttentionKind, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    match kind {
        AttentionKind::Vanilla => attention_vanilla(q, k, v),
        AttentionKind::Linear => attention_linear(q, k, v),
    }
}

/// Multi-head attention with learned projections. Each head sees a
/// `C / heads` column slice of the projected Q, K, V.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
    pub heads: usize,
    pub kind: AttentionKind,
}

impl MultiHeadAttention {
    pub fn init(rng: &mut Prng, dim: usize, heads: usize, kind: AttentionKind) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(DtrError::Config(format!("model dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q_proj: Linear::init(rng, dim, dim),
            k_proj: Linear::init(rng, dim, dim),
            v_proj: Linear::init(rng, dim, dim),
            out_proj: Linear::init(rng, dim, dim),
            heads,
            kind,
        })
    }

    /// Identity projections everywhere.
    pub fn identity(dim: usize, heads: usize, kind: AttentionKind) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(DtrError::Config(format!("model dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q_proj: Linear::identity(dim),
            k_proj: Linear::identity(dim),
            v_proj: Linear::identity(dim),
            out_proj: Linear::identity(dim),
            heads,
            kind,
        })
    }

    /// `queries: [N, C]`, `context: [M, C]` -> `[N, C]`.
    pub fn forward(&self, queries: &Tensor, context: &Tensor) -> Result<Tensor> {
        let q = self.q_proj.forward(queries)?;
        let k = self.k_proj.forward(context)?;
        let v = self.v_proj.forward(context)?;
        let dim = q.shape()[1];
        let head_dim = dim / self.heads;
        let outputs = if self.heads == 1 {
            vec![attention(self.kind, &q, &k, &v)?]
        } else {
            (0..self.heads)
                .map(|h| {
                    let cols = |t: &Tensor| t.narrow(1, h * head_dim, head_dim);
                    attention(self.kind, &cols(&q)?, &cols(&k)?, &cols(&v)?)
                })
                .collect::<Result<Vec<_>>>()?
        };
        let joined = if outputs.len() == 1 {
            outputs.into_iter().next().expect("one head")
        } else {
            Tensor::concat(&outputs, 1)?
        };
        Ok(self.out_proj.forward(&joined)?)
    }
}

impl Parameterized for MultiHeadAttention {
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.q_proj.params_mut();
        out.extend(self.k_proj.params_mut());
        out.extend(self.v_proj.params_mut());
        out.extend(self.out_proj.params_mut());
        out
    }
}
