use std::cmp::Ordering;

use super::anchors::{iou_2d, Anchor2D3D, BoxParams};
use super::codec::{decode, RESIDUALS};
use super::loss::GroundTruth;
use super::{DetectError, Result};
use crate::kittiio::{
    alpha_from_ry, backproject, normalize_angle, project_point, ry_from_alpha, Calibration, KittiLabel,
};
use crate::tensor::{stable_sigmoid, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Detection3D {
    pub class: usize,
    pub score: f64,
    /// `x1, y1, x2, y2`
    pub box2d: [f64; 4],
    /// Geometric center in camera coordinates.
    pub center: [f64; 3],
    /// `w, h, l`
    pub dims: [f64; 3],
    pub ry: f64,
}

/// Camera-frame center at depth `z` behind pixel `(xp, yp)`.
pub fn backproject_center(xp: f64, yp: f64, z: f64, calib: &Calibration) -> Result<[f64; 3]> {
    Ok(backproject(xp, yp, z, calib)?)
}

/// Drops scores below `score_thresh`, then keeps boxes greedily in
/// descending score order while their 2D IoU with every kept box is at most
/// `iou_thresh`. Equal scores keep input order.
pub fn nms(dets: &[Detection3D], iou_thresh: f64, score_thresh: f64) -> Vec<Detection3D> {
    let mut order: Vec<&Detection3D> = dets.iter().filter(|d| d.score >= score_thresh).collect();
    order.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    let mut kept: Vec<Detection3D> = Vec::new();
    for d in order {
        if kept.iter().all(|k| iou_2d(&k.box2d, &d.box2d) <= iou_thresh) {
            kept.push(d.clone());
        }
    }
    kept
}

#[derive(Clone, Debug)]
pub struct Decoding {
    pub detections: Vec<Detection3D>,
    /// Candidates whose size residuals hit the clamp.
    pub clamped: usize,
    /// Candidates dropped for a non-positive depth.
    pub behind_camera: usize,
}

/// Scores every anchor by its best class, decodes the survivors of
/// `score_thresh`, lifts them to 3D and runs NMS per class.
pub fn decode_detections(
    cls_logits: &Tensor,
    reg: &Tensor,
    anchors: &[Anchor2D3D],
    calib: &Calibration,
    score_thresh: f64,
    nms_iou: f64,
) -> Result<Decoding> {
    let n = anchors.len();
    if cls_logits.rank() != 2 || cls_logits.shape()[0] != n || reg.shape() != [n, RESIDUALS] {
        return Err(DetectError::Shape {
            what: "head outputs aligned with the anchors",
            shape: cls_logits.shape().to_vec(),
        });
    }
    let k = cls_logits.shape()[1];
    let mut out = Decoding {
        detections: Vec::new(),
        clamped: 0,
        behind_camera: 0,
    };
    let mut candidates = Vec::new();
    for (i, anchor) in anchors.iter().enumerate() {
        let row = &cls_logits.data()[i * k..(i + 1) * k];
        let (class, logit) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best });
        let score = stable_sigmoid(logit);
        if score < score_thresh {
            continue;
        }
        let mut t = [0.0; RESIDUALS];
        t.copy_from_slice(&reg.data()[i * RESIDUALS..(i + 1) * RESIDUALS]);
        let d = decode(&t, anchor);
        if d.clamped {
            out.clamped += 1;
        }
        let p = d.params;
        if !(p.z > 0.0) {
            out.behind_camera += 1;
            continue;
        }
        let center = backproject_center(p.xp, p.yp, p.z, calib)?;
        candidates.push(Detection3D {
            class,
            score,
            box2d: p.box2d(),
            center,
            dims: [p.w3d, p.h3d, p.l3d],
            ry: ry_from_alpha(p.theta, center[0], center[2])?,
        });
    }
    for c in 0..k {
        let same: Vec<Detection3D> = candidates.iter().filter(|d| d.class == c).cloned().collect();
        out.detections.extend(nms(&same, nms_iou, score_thresh));
    }
    out.detections
        .sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    Ok(out)
}

/// Anchor-form ground truth of a label: the projected geometric center, its
/// depth, and the observation angle.
pub fn ground_truth_from_label(label: &KittiLabel, calib: &Calibration, class: usize) -> Result<GroundTruth> {
    let b = label.to_box3d();
    let [xp, yp, _] = project_point(b.center, calib)
        .ok_or_else(|| DetectError::Target(format!("{} object is behind the camera", label.kind)))?;
    let [x1, y1, x2, y2] = label.bbox;
    let [h, w, l] = label.dims;
    Ok(GroundTruth {
        class,
        params: BoxParams {
            x2d: (x1 + x2) / 2.0,
            y2d: (y1 + y2) / 2.0,
            w2d: x2 - x1,
            h2d: y2 - y1,
            xp,
            yp,
            z: b.center[2],
            w3d: w,
            h3d: h,
            l3d: l,
            theta: normalize_angle(label.alpha),
        },
    })
}

/// Result-file row: truncation and occlusion are `-1`, location is the
/// bottom center.
pub fn to_kitti_label(det: &Detection3D, class_names: &[String]) -> Result<KittiLabel> {
    let kind = class_names
        .get(det.class)
        .ok_or_else(|| DetectError::Target(format!("no name for class {}", det.class)))?;
    let [w, h, l] = det.dims;
    let [x, y, z] = det.center;
    Ok(KittiLabel {
        kind: kind.clone(),
        truncated: -1.0,
        occluded: -1,
        alpha: alpha_from_ry(det.ry, x, z)?,
        bbox: det.box2d,
        dims: [h, w, l],
        location: [x, y + h / 2.0, z],
        rotation_y: normalize_angle(det.ry),
        score: Some(det.score),
    })
}
