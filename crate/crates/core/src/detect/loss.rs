use serde::{Deserialize, Serialize};

use super::anchors::{assign_targets, Anchor2D3D, Assignment, BoxParams};
use super::codec::{encode_targets, RESIDUALS};
use super::{DetectError, Result};
use crate::loss::{sigmoid_focal, FocalParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub reg: f64,
    pub dep: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            reg: 1.0,
            dep: 1.0,
        }
    }
}

/// One ground-truth object in anchor parameter form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub class: usize,
    pub params: BoxParams,
}

/// Class and regression targets of one positive anchor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchorTarget {
    pub class: usize,
    pub gt: usize,
    pub residuals: [f64; RESIDUALS],
}

/// Assigns anchors and encodes the matched ground truth of each positive.
pub fn build_targets(anchors: &[Anchor2D3D], gts: &[GroundTruth]) -> Result<Vec<Option<AnchorTarget>>> {
    let boxes: Vec<[f64; 4]> = gts.iter().map(|g| g.params.box2d()).collect();
    assign_targets(anchors, &boxes)
        .into_iter()
        .zip(anchors)
        .map(|(a, anchor)| match a {
            Assignment::Negative => Ok(None),
            Assignment::Positive(g) => Ok(Some(AnchorTarget {
                class: gts[g].class,
                gt: g,
                residuals: encode_targets(&gts[g].params, anchor)?,
            })),
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct DetLoss {
    /// `cls * w_cls + reg * w_reg`; the depth term is added by the caller.
    pub total: Tensor,
    pub cls: Tensor,
    pub reg: Tensor,
    pub positives: usize,
}

/// Focal classification over every anchor and class (one-vs-all, background
/// is all-negative) plus smooth-L1 over the positives' residuals. Both terms
/// are divided by the positive count, floored at one.
pub fn detection_loss(
    cls_logits: &Tensor,
    reg: &Tensor,
    targets: &[Option<AnchorTarget>],
    weights: LossWeights,
    focal: FocalParams,
) -> Result<DetLoss> {
    let anchors = targets.len();
    if cls_logits.rank() != 2 || cls_logits.shape()[0] != anchors {
        return Err(DetectError::Shape {
            what: "class logits [anchors, classes]",
            shape: cls_logits.shape().to_vec(),
        });
    }
    if reg.shape() != [anchors, RESIDUALS] {
        return Err(DetectError::Shape {
            what: "residuals [anchors, 11]",
            shape: reg.shape().to_vec(),
        });
    }
    let classes = cls_logits.shape()[1];
    let mut labels = vec![false; anchors * classes];
    let mut rows = Vec::new();
    let mut wanted = Vec::new();
    for (i, t) in targets.iter().enumerate() {
        if let Some(t) = t {
            if t.class >= classes {
                return Err(DetectError::Target(format!("class {} of {classes}", t.class)));
            }
            labels[i * classes + t.class] = true;
            rows.push(i);
            wanted.extend_from_slice(&t.residuals);
        }
    }
    let positives = rows.len();
    let norm = 1.0 / positives.max(1) as f64;
    let cls = sigmoid_focal(cls_logits, &labels, focal)?.sum()?.scale(norm)?;
    let reg_loss = if positives == 0 {
        Tensor::scalar(0.0)
    } else {
        let target = Tensor::new(wanted, &[positives, RESIDUALS])?;
        reg.index_rows(&rows)?.sub(&target)?.smooth_l1()?.sum()?.scale(norm)?
    };
    let total = cls.scale(weights.cls)?.add(&reg_loss.scale(weights.reg)?)?;
    Ok(DetLoss {
        total,
        cls,
        reg: reg_loss,
        positives,
    })
}
