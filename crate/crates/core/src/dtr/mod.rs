//! Depth-aware transformer: an encoder over context features and a decoder
//! whose queries are the depth-aware features, both supplemented with the
//! depth positional encoding.

mod attention;
mod bench;
mod dpe;

pub use attention::{
    attention, attention_linear, attention_linear_explicit, attention_vanilla, feature_map, AttentionKind,
    MultiHeadAttention,
};
pub use bench::{bench_attention, write_bench_csv, BenchRow};
pub use dpe::{build_dpe, DpeState};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Prng;
use crate::tensor::{Linear, Parameterized, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DtrError {
    #[error("attention config: {0}")]
    Config(String),
    #[error("expected {what}, got shape {shape:?}")]
    Shape { what: &'static str, shape: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DtrError>;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub kind: AttentionKind,
    pub ffn_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Post-residual layer normalization; off by default.
    pub layer_norm: bool,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, heads: usize, kind: AttentionKind) -> Self {
        Self {
            model_dim,
            heads,
            kind,
            ffn_dim: 4 * model_dim,
            enc_layers: 1,
            dec_layers: 1,
            layer_norm: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(DtrError::Config(format!(
                "model dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.ffn_dim == 0 {
            return Err(DtrError::Config("ffn dim must be positive".into()));
        }
        Ok(())
    }
}

/// Two-layer ReLU MLP applied per token.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn init(rng: &mut Prng, dim: usize, hidden: usize) -> Self {
        Self {
            up: Linear::init(rng, dim, hidden),
            down: Linear::init(rng, hidden, dim),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.down.forward(&self.up.forward(x)?.relu()?)?)
    }
}

impl Parameterized for FeedForward {
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.up.params_mut();
        out.extend(self.down.params_mut());
        out
    }
}

fn residual(x: &Tensor, update: &Tensor, layer_norm: bool) -> Result<Tensor> {
    let y = x.add(update)?;
    Ok(if layer_norm { y.layer_norm(LAYER_NORM_EPS)? } else { y })
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub self_attn: MultiHeadAttention,
    pub ffn: FeedForward,
    pub layer_norm: bool,
}

impl EncoderLayer {
    pub fn init(rng: &mut Prng, cfg: &AttentionConfig) -> Result<Self> {
        Ok(Self {
            self_attn: MultiHeadAttention::init(rng, cfg.model_dim, cfg.heads, cfg.kind)?,
            ffn: FeedForward::init(rng, cfg.model_dim, cfg.ffn_dim),
            layer_norm: cfg.layer_norm,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = residual(x, &self.self_attn.forward(x, x)?, self.layer_norm)?;
        residual(&x, &self.ffn.forward(&x)?, self.layer_norm)
    }
}

impl Parameterized for EncoderLayer {
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.self_attn.params_mut();
        out.extend(self.ffn.params_mut());
        out
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub cross_attn: MultiHeadAttention,
    pub ffn: FeedForward,
    pub layer_norm: bool,
}

impl DecoderLayer {
    pub fn init(rng: &mut Prng, cfg: &AttentionConfig) -> Result<Self> {
        Ok(Self {
            self_attn: MultiHeadAttention::init(rng, cfg.model_dim, cfg.heads, cfg.kind)?,
            cross_attn: MultiHeadAttention::init(rng, cfg.model_dim, cfg.heads, cfg.kind)?,
            ffn: FeedForward::init(rng, cfg.model_dim, cfg.ffn_dim),
            layer_norm: cfg.layer_norm,
        })
    }

    /// `queries: [N, C]` attend to themselves, then to `memory: [M, C]`.
    pub fn forward(&self, queries: &Tensor, memory: &Tensor) -> Result<Tensor> {
        let x = residual(queries, &self.self_attn.forward(queries, queries)?, self.layer_norm)?;
        let x = residual(&x, &self.cross_attn.forward(&x, memory)?, self.layer_norm)?;
        residual(&x, &self.ffn.forward(&x)?, self.layer_norm)
    }
}

impl Parameterized for DecoderLayer {
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.self_attn.params_mut();
        out.extend(self.cross_attn.params_mut());
        out.extend(self.ffn.params_mut());
        out
    }
}

/// `[C, H, W]` -> `[H*W, C]` tokens.
pub fn flatten_tokens(map: &Tensor) -> Result<Tensor> {
    if map.rank() != 3 {
        return Err(DtrError::Shape {
            what: "[C, H, W] map",
            shape: map.shape().to_vec(),
        });
    }
    let (c, n) = (map.shape()[0], map.shape()[1] * map.shape()[2]);
    Ok(map.reshape(&[c, n])?.transpose()?)
}

/// `[H*W, C]` tokens -> `[C, H, W]`.
pub fn unflatten_tokens(tokens: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    if tokens.rank() != 2 || tokens.shape()[0] != height * width {
        return Err(DtrError::Shape {
            what: "[H*W, C] tokens",
            shape: tokens.shape().to_vec(),
        });
    }
    let c = tokens.shape()[1];
    Ok(tokens.transpose()?.reshape(&[c, height, width])?)
}

fn with_encoding(map: &Tensor, dpe: Option<&Tensor>) -> Result<Tensor> {
    match dpe {
        Some(p) => {
            if p.shape() != map.shape() {
                return Err(DtrError::Shape {
                    what: "positional encoding matching the feature map",
                    shape: p.shape().to_vec(),
                });
            }
            flatten_tokens(&map.add(p)?)
        }
        None => flatten_tokens(map),
    }
}

/// Flattens the context map, adds the encoding, and runs the encoder stack.
pub fn encoder_forward(context: &Tensor, dpe: Option<&Tensor>, layers: &[EncoderLayer]) -> Result<Tensor> {
    let mut x = with_encoding(context, dpe)?;
    for layer in layers {
        x = layer.forward(&x)?;
    }
    Ok(x)
}

/// Depth-aware features (plus encoding) are the queries; the encoded
/// context supplies keys and values for cross-attention.
pub fn decoder_forward(
    depth_feat: &Tensor,
    encoded: &Tensor,
    dpe: Option<&Tensor>,
    layers: &[DecoderLayer],
) -> Result<Tensor> {
    let mut x = with_encoding(depth_feat, dpe)?;
    if encoded.rank() != 2 || encoded.shape()[1] != x.shape()[1] {
        return Err(DtrError::Shape {
            what: "[M, C] encoded context",
            shape: encoded.shape().to_vec(),
        });
    }
    for layer in layers {
        x = layer.forward(&x, encoded)?;
    }
    Ok(x)
}

#[derive(Clone, Debug)]
pub struct DepthAwareTransformer {
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
}

impl DepthAwareTransformer {
    pub fn init(rng: &mut Prng, cfg: &AttentionConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            encoder: (0..cfg.enc_layers)
                .map(|_| EncoderLayer::init(rng, cfg))
                .collect::<Result<_>>()?,
            decoder: (0..cfg.dec_layers)
                .map(|_| DecoderLayer::init(rng, cfg))
                .collect::<Result<_>>()?,
        })
    }

    /// Fused `[C, H, W]` map for the detection head.
    pub fn forward(&self, context: &Tensor, depth_feat: &Tensor, dpe: Option<&Tensor>) -> Result<Tensor> {
        let encoded = encoder_forward(context, dpe, &self.encoder)?;
        let fused = decoder_forward(depth_feat, &encoded, dpe, &self.decoder)?;
        unflatten_tokens(&fused, depth_feat.shape()[1], depth_feat.shape()[2])
    }
}

impl Parameterized for DepthAwareTransformer {
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.encoder {
            out.extend(l.params_mut());
        }
        for l in &mut self.decoder {
            out.extend(l.params_mut());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, uniform_vec};

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(uniform_vec(&mut stream(seed, 77), n, -1.0, 1.0), shape).unwrap()
    }

    fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
        a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn single_token_returns_value() {
        let (q, k, v) = (rand(&[1, 4], 1), rand(&[1, 4], 2), rand(&[1, 4], 3));
        assert!(close(&attention_vanilla(&q, &k, &v).unwrap(), &v, 1e-15));
        assert!(close(&attention_linear(&q, &k, &v).unwrap(), &v, 1e-15));
    }

    #[test]
    fn identical_keys_average_values() {
        let q = rand(&[3, 2], 4);
        let k = Tensor::new([0.3, -0.7].repeat(4), &[4, 2]).unwrap();
        let v = rand(&[4, 3], 5);
        let mean: Vec<f64> = (0..3).map(|c| (0..4).map(|r| v.data()[r * 3 + c]).sum::<f64>() / 4.0).collect();
        for out in [attention_vanilla(&q, &k, &v).unwrap(), attention_linear(&q, &k, &v).unwrap()] {
            for row in out.data().chunks(3) {
                for (a, b) in row.iter().zip(&mean) {
                    assert!((a - b).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn linear_forms_agree() {
        let (q, k, v) = (rand(&[6, 4], 6), rand(&[5, 4], 7), rand(&[5, 3], 8));
        let a = attention_linear(&q, &k, &v).unwrap();
        let b = attention_linear_explicit(&q, &k, &v).unwrap();
        assert!(close(&a, &b, 1e-12));
    }

    #[test]
    fn mismatched_shapes_rejected() {
        assert!(attention_vanilla(&rand(&[2, 3], 1), &rand(&[2, 4], 2), &rand(&[2, 4], 3)).is_err());
        assert!(attention_linear(&rand(&[2, 4], 1), &rand(&[3, 4], 2), &rand(&[2, 4], 3)).is_err());
        assert!(MultiHeadAttention::init(&mut stream(0, 1), 6, 4, AttentionKind::Linear).is_err());
    }

    #[test]
    fn identity_single_head_matches_kernel() {
        let x = rand(&[5, 4], 9);
        for kind in [AttentionKind::Vanilla, AttentionKind::Linear] {
            let mha = MultiHeadAttention::identity(4, 1, kind).unwrap();
            let got = mha.forward(&x, &x).unwrap();
            assert!(close(&got, &attention(kind, &x, &x, &x).unwrap(), 1e-14));
        }
    }

    #[test]
    fn multi_head_shapes() {
        let mut rng = stream(1, 1);
        for heads in [1, 2, 4] {
            let mha = MultiHeadAttention::init(&mut rng, 8, heads, AttentionKind::Vanilla).unwrap();
            let out = mha.forward(&rand(&[7, 8], 1), &rand(&[3, 8], 2)).unwrap();
            assert_eq!(out.shape(), &[7, 8]);
        }
    }

    #[test]
    fn empty_stacks_pass_through() {
        let ctx = rand(&[4, 2, 3], 1);
        let dpe = rand(&[4, 2, 3], 2);
        let enc = encoder_forward(&ctx, Some(&dpe), &[]).unwrap();
        let want = flatten_tokens(&ctx.add(&dpe).unwrap()).unwrap();
        assert!(close(&enc, &want, 0.0));
        let depth = rand(&[4, 2, 3], 3);
        let dec = decoder_forward(&depth, &enc, Some(&dpe), &[]).unwrap();
        assert!(close(&dec, &flatten_tokens(&depth.add(&dpe).unwrap()).unwrap(), 0.0));
    }

    #[test]
    fn cross_attention_single_memory_token_broadcasts() {
        let mha = MultiHeadAttention::identity(4, 2, AttentionKind::Vanilla).unwrap();
        let memory = rand(&[1, 4], 4);
        let out = mha.forward(&rand(&[6, 4], 5), &memory).unwrap();
        for row in out.data().chunks(4) {
            assert_eq!(row, memory.data());
        }
    }

    #[test]
    fn stacks_preserve_token_shape() {
        let mut cfg = AttentionConfig::new(8, 2, AttentionKind::Linear);
        cfg.enc_layers = 2;
        cfg.dec_layers = 2;
        for layer_norm in [false, true] {
            cfg.layer_norm = layer_norm;
            let dtr = DepthAwareTransformer::init(&mut stream(2, 1), &cfg).unwrap();
            let ctx = rand(&[8, 3, 4], 1);
            let out = dtr.forward(&ctx, &rand(&[8, 3, 4], 2), Some(&rand(&[8, 3, 4], 3))).unwrap();
            assert_eq!(out.shape(), &[8, 3, 4]);
        }
    }

    #[test]
    fn token_layout_round_trip() {
        let m = rand(&[3, 2, 5], 1);
        let t = flatten_tokens(&m).unwrap();
        assert_eq!(t.shape(), &[10, 3]);
        assert_eq!(t.data()[3 * 7 + 2], m.data()[2 * 10 + 7]);
        assert!(close(&unflatten_tokens(&t, 2, 5).unwrap(), &m, 0.0));
    }
}
