//! Depth-aware feature enhancement.
//!
//! The block predicts a per-pixel categorical depth distribution, pools it
//! into `D' = D / r` coarser bins, builds one prototype feature per coarse
//! bin as a probability-weighted mean over pixels, and rebuilds every pixel
//! as a probability-weighted mix of prototypes. The rebuilt map is fused
//! with the initial depth-aware features by a 1x1 convolution.
//!
//! Prototype weights are normalized over pixels (each prototype is a
//! weighted mean); reconstruction weights are normalized over prototypes
//! (each pixel is a convex combination).

use thiserror::Error;

use crate::rng::Prng;
use crate::tensor::{Conv2dParams, Parameterized, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DfeError {
    #[error("depth bins {bins} not divisible by merge scale {scale}")]
    MergeScale { bins: usize, scale: usize },
    #[error("expected {what}, got shape {shape:?}")]
    Shape { what: &'static str, shape: Vec<usize> },
    #[error("depth distribution does not sum to one at pixel {pixel} (sum {sum})")]
    NotNormalized { pixel: usize, sum: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, DfeError>;

/// Per-pixel categorical distribution over depth bins, `[D, H, W]`.
#[derive(Clone, Debug)]
pub struct DepthDistribution {
    pub probs: Tensor,
}

impl DepthDistribution {
    /// Validates shape, range, and per-pixel normalization (1e-6).
    pub fn new(probs: Tensor) -> Result<Self> {
        if probs.rank() != 3 {
            return Err(DfeError::Shape {
                what: "[D, H, W] probabilities",
                shape: probs.shape().to_vec(),
            });
        }
        let (d, hw) = (probs.shape()[0], probs.shape()[1] * probs.shape()[2]);
        let p = probs.data();
        for pixel in 0..hw {
            let sum: f64 = (0..d).map(|k| p[k * hw + pixel]).sum();
            let in_range = (0..d).all(|k| (0.0..=1.0).contains(&p[k * hw + pixel]));
            if !in_range || (sum - 1.0).abs() > 1e-6 {
                return Err(DfeError::NotNormalized { pixel, sum });
            }
        }
        Ok(Self { probs })
    }

    /// `(D, H, W)`
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.probs.shape();
        (s[0], s[1], s[2])
    }

    /// Most likely bin per pixel, row-major; ties go to the lowest index.
    pub fn argmax(&self) -> Vec<usize> {
        let (d, h, w) = self.dims();
        let p = self.probs.data();
        (0..h * w)
            .map(|pixel| {
                let mut best = 0;
                for k in 1..d {
                    if p[k * h * w + pixel] > p[best * h * w + pixel] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct DfeState {
    /// C -> C, 3x3, followed by elu: the initial depth-aware features.
    pub pred_conv: Conv2dParams,
    /// C -> D, 1x1: depth logits.
    pub depth_conv: Conv2dParams,
    /// D -> D', 1x1 grouped with D' groups of `merge_scale` inputs.
    pub merge_conv: Conv2dParams,
    /// 2C -> C, 1x1 over `[X | F']`.
    pub fuse_conv: Conv2dParams,
    pub merge_scale: usize,
}

#[derive(Clone, Debug)]
pub struct DfeOutput {
    /// Enhanced depth-aware features `[C, H, W]`.
    pub features: Tensor,
    /// Initial depth-aware features `X`.
    pub initial: Tensor,
    pub dist: DepthDistribution,
    /// Coarse distribution `[D', H, W]`.
    pub merged: Tensor,
    /// `[D', C]`
    pub prototypes: Tensor,
    /// `F'`, `[C, H, W]`
    pub reconstructed: Tensor,
}

impl DfeState {
    /// Random convolutions; the merge kernel starts as within-group averaging
    /// so the untrained block pools adjacent bins exactly.
    pub fn init(rng: &mut Prng, channels: usize, bins: usize, merge_scale: usize) -> Result<Self> {
        if merge_scale == 0 || bins % merge_scale != 0 {
            return Err(DfeError::MergeScale {
                bins,
                scale: merge_scale,
            });
        }
        let merged = bins / merge_scale;
        let merge_weight = Tensor::param(
            vec![1.0 / merge_scale as f64; merged * merge_scale],
            &[merged, merge_scale, 1, 1],
        )?;
        Ok(Self {
            pred_conv: Conv2dParams::init(rng, channels, channels, 3, 1, 1, 1, true)?,
            depth_conv: Conv2dParams::init(rng, channels, bins, 1, 1, 0, 1, true)?,
            merge_conv: Conv2dParams::from_weights(merge_weight, None, merged, 0, 1)?,
            fuse_conv: Conv2dParams::init(rng, 2 * channels, channels, 1, 1, 0, 1, true)?,
            merge_scale,
        })
    }

    pub fn channels(&self) -> usize {
        self.pred_conv.in_channels
    }

    pub fn bins(&self) -> usize {
        self.depth_conv.out_channels
    }

    pub fn merged_bins(&self) -> usize {
        self.merge_conv.out_channels
    }

    pub fn forward(&self, x: &Tensor) -> Result<DfeOutput> {
        let (initial, dist) = predict_depth(x, self)?;
        let merged = merge_bins(&dist, self)?;
        let prototypes = depth_prototypes(&initial, &merged)?;
        let reconstructed = reconstruct(&merged, &prototypes)?;
        let features = enhance(&initial, &reconstructed, self)?;
        Ok(DfeOutput {
            features,
            initial,
            dist,
            merged,
            prototypes,
            reconstructed,
        })
    }
}

impl Parameterized for DfeState {
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.pred_conv.params_mut();
        out.extend(self.depth_conv.params_mut());
        out.extend(self.merge_conv.params_mut());
        out.extend(self.fuse_conv.params_mut());
        out
    }
}

fn check_map(x: &Tensor, what: &'static str) -> Result<(usize, usize, usize)> {
    if x.rank() != 3 {
        return Err(DfeError::Shape {
            what,
            shape: x.shape().to_vec(),
        });
    }
    Ok((x.shape()[0], x.shape()[1], x.shape()[2]))
}

/// Initial depth-aware features and the softmax depth distribution.
pub fn predict_depth(x: &Tensor, s: &DfeState) -> Result<(Tensor, DepthDistribution)> {
    let (c, _, _) = check_map(x, "[C, H, W] features")?;
    if c != s.channels() {
        return Err(DfeError::Shape {
            what: "input channels matching the DFE width",
            shape: x.shape().to_vec(),
        });
    }
    let initial = s.pred_conv.forward(x)?.elu()?;
    let probs = s.depth_conv.forward(&initial)?.softmax(0)?;
    Ok((initial, DepthDistribution { probs }))
}

/// Grouped 1x1 pooling of adjacent bins, clamped at zero, then renormalized
/// over the `D'` coarse bins at every pixel.
pub fn merge_bins(dist: &DepthDistribution, s: &DfeState) -> Result<Tensor> {
    let (d, _, _) = dist.dims();
    if d != s.bins() || d % s.merge_scale != 0 {
        return Err(DfeError::MergeScale {
            bins: d,
            scale: s.merge_scale,
        });
    }
    Ok(s.merge_conv.forward(&dist.probs)?.relu()?.normalize_sum(0)?)
}

/// Prototype features `[D', C]`: for each coarse bin, the mean of pixel
/// features weighted by that bin's probability (weights normalized over
/// pixels). A bin with zero total mass yields a zero row.
pub fn depth_prototypes(features: &Tensor, merged: &Tensor) -> Result<Tensor> {
    let (c, h, w) = check_map(features, "[C, H, W] features")?;
    let (dm, mh, mw) = check_map(merged, "[D', H, W] merged distribution")?;
    if (h, w) != (mh, mw) {
        return Err(TensorError::ShapeMismatch {
            op: "depth_prototypes",
            lhs: features.shape().to_vec(),
            rhs: merged.shape().to_vec(),
        }
        .into());
    }
    let n = h * w;
    let weights = merged.reshape(&[dm, n])?.normalize_sum(1)?;
    let tokens = features.reshape(&[c, n])?.transpose()?;
    Ok(weights.matmul(&tokens)?)
}

/// Rebuilds `[C, H, W]` with every pixel a mix of prototype rows weighted by
/// its coarse distribution.
pub fn reconstruct(merged: &Tensor, prototypes: &Tensor) -> Result<Tensor> {
    let (dm, h, w) = check_map(merged, "[D', H, W] merged distribution")?;
    if prototypes.rank() != 2 || prototypes.shape()[0] != dm {
        return Err(TensorError::ShapeMismatch {
            op: "reconstruct",
            lhs: merged.shape().to_vec(),
            rhs: prototypes.shape().to_vec(),
        }
        .into());
    }
    let c = prototypes.shape()[1];
    let mixed = prototypes.transpose()?.matmul(&merged.reshape(&[dm, h * w])?)?;
    Ok(mixed.reshape(&[c, h, w])?)
}

/// `fuse_conv([X | F'])`
pub fn enhance(initial: &Tensor, reconstructed: &Tensor, s: &DfeState) -> Result<Tensor> {
    if initial.shape() != reconstructed.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "enhance",
            lhs: initial.shape().to_vec(),
            rhs: reconstructed.shape().to_vec(),
        }
        .into());
    }
    let stacked = Tensor::concat(&[initial.clone(), reconstructed.clone()], 0)?;
    Ok(s.fuse_conv.forward(&stacked)?)
}
