use super::codec::RESIDUALS;
use super::{DetectError, Result};
use crate::rng::Prng;
use crate::tensor::{Conv2dParams, Parameterized, Tensor};

/// Class probability the classification bias starts at.
pub const PRIOR_PROB: f64 = 0.01;

/// Shared 3x3 conv with ReLU, then 1x1 convs to per-anchor class logits and
/// residuals.
#[derive(Clone, Debug)]
pub struct DetectionHead {
    pub shared: Conv2dParams,
    pub cls: Conv2dParams,
    pub reg: Conv2dParams,
    pub templates: usize,
    pub classes: usize,
}

/// Rows follow anchor order: pixel-major, then template.
#[derive(Clone, Debug)]
pub struct HeadOutput {
    /// `[H * W * T, K]`
    pub cls: Tensor,
    /// `[H * W * T, 11]`
    pub reg: Tensor,
}

impl DetectionHead {
    pub fn init(rng: &mut Prng, channels: usize, templates: usize, classes: usize) -> Result<Self> {
        let mut cls = Conv2dParams::init(rng, channels, templates * classes, 1, 1, 0, 1, true)?;
        let bias = -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln();
        cls.bias = Some(Tensor::param(vec![bias; templates * classes], &[templates * classes])?);
        Ok(Self {
            shared: Conv2dParams::init(rng, channels, channels, 3, 1, 1, 1, true)?,
            cls,
            reg: Conv2dParams::init(rng, channels, templates * RESIDUALS, 1, 1, 0, 1, true)?,
            templates,
            classes,
        })
    }

    pub fn forward(&self, features: &Tensor) -> Result<HeadOutput> {
        if features.rank() != 3 {
            return Err(DetectError::Shape {
                what: "feature map [C, H, W]",
                shape: features.shape().to_vec(),
            });
        }
        let pixels = features.shape()[1] * features.shape()[2];
        let x = self.shared.forward(features)?.relu()?;
        let rows = pixels * self.templates;
        // [T*K, H*W] -> [H*W, T*K] is already anchor-major once reshaped
        let to_rows = |t: Tensor, cols: usize| -> Result<Tensor> {
            let c = t.shape()[0];
            Ok(t.reshape(&[c, pixels])?.transpose()?.reshape(&[rows, cols])?)
        };
        Ok(HeadOutput {
            cls: to_rows(self.cls.forward(&x)?, self.classes)?,
            reg: to_rows(self.reg.forward(&x)?, RESIDUALS)?,
        })
    }
}

impl Parameterized for DetectionHead {
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.shared.params_mut();
        out.extend(self.cls.params_mut());
        out.extend(self.reg.params_mut());
        out
    }
}
