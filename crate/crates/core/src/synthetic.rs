//! Procedural scenes standing in for images plus a backbone: a few boxes
//! seen by a pinhole camera, a smooth input field that carries cues at each
//! box, and sparse depth sampled from the box surfaces.

use std::f64::consts::PI;

use rand::Rng;

use crate::config::RunConfig;
use crate::depthbin::{rasterize_depth_gt, DepthBinSpec, DepthTargetMap, PixelDepth};
use crate::detect::{anchor_scales, generate_anchors, iou_2d};
use crate::kittiio::{alpha_from_ry, project_point, Calibration, KittiLabel};
use crate::rng::{normal_vec, stream, streams, Prng};
use crate::tensor::{Tensor, TensorError};

/// Surface samples per object for the sparse depth map.
const SURFACE_POINTS: usize = 400;
const MAX_ATTEMPTS: usize = 10_000;

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub calib: Calibration,
    pub image_width: usize,
    pub image_height: usize,
    pub labels: Vec<KittiLabel>,
    /// Stub backbone input, `[input_channels, H, W]`.
    pub input: Tensor,
    /// Surface samples in feature-map pixel coordinates.
    pub depth_points: Vec<PixelDepth>,
    pub depth_target: DepthTargetMap,
}

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("could not place {wanted} objects after {MAX_ATTEMPTS} attempts; placed {placed}")]
    Placement { wanted: usize, placed: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Other(String),
}

/// Deterministic in `(cfg.seed, index)`.
pub fn generate_scene(cfg: &RunConfig, index: u64) -> Result<SyntheticScene, SceneError> {
    let mut rng = stream(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index), streams::SCENE);
    let (iw, ih) = (cfg.width * cfg.stride, cfg.height * cfg.stride);
    let calib = Calibration::pinhole(cfg.focal_length, cfg.focal_length, iw as f64 / 2.0, ih as f64 / 2.0);
    let anchors = generate_anchors(
        cfg.height,
        cfg.width,
        cfg.stride as f64,
        &cfg.anchor_ratios,
        &anchor_scales(cfg.anchor_base, cfg.anchor_scales),
        None,
    )
    .map_err(|e| SceneError::Other(e.to_string()))?;
    let class = cfg.classes.first().cloned().unwrap_or_else(|| "Car".into());
    let mut labels: Vec<KittiLabel> = Vec::new();
    let mut attempts = 0;
    while labels.len() < cfg.objects {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(SceneError::Placement {
                wanted: cfg.objects,
                placed: labels.len(),
            });
        }
        let Some(l) = sample_object(&mut rng, &calib, iw, ih, &class, cfg) else {
            continue;
        };
        if labels.iter().any(|o| iou_2d(&o.bbox, &l.bbox) > 0.1) {
            continue;
        }
        if !anchors.anchors.iter().any(|a| iou_2d(&a.box2d(), &l.bbox) > 0.5) {
            continue;
        }
        labels.push(l);
    }
    let spec = DepthBinSpec::new(cfg.depth_min, cfg.depth_max, cfg.bins, cfg.discretization)
        .map_err(|e| SceneError::Other(e.to_string()))?;
    let depth_points = surface_points(&mut rng, &labels, &calib, cfg.stride as f64);
    let depth_target = rasterize_depth_gt(&depth_points, cfg.height, cfg.width, &spec);
    let input = input_field(&mut rng, cfg, &labels, &calib)?;
    Ok(SyntheticScene {
        calib,
        image_width: iw,
        image_height: ih,
        labels,
        input,
        depth_points,
        depth_target,
    })
}

pub fn generate_scenes(cfg: &RunConfig) -> Result<Vec<SyntheticScene>, SceneError> {
    (0..cfg.scenes as u64).map(|i| generate_scene(cfg, i)).collect()
}

fn sample_object(
    rng: &mut Prng,
    calib: &Calibration,
    iw: usize,
    ih: usize,
    class: &str,
    cfg: &RunConfig,
) -> Option<KittiLabel> {
    let dims = [rng.gen_range(1.4..1.8), rng.gen_range(1.5..1.9), rng.gen_range(3.4..4.4)];
    let z = rng.gen_range(12.0..40.0f64).clamp(cfg.depth_min, cfg.depth_max - 1e-6);
    let x = rng.gen_range(-0.4..0.4) * z * iw as f64 / calib.fx();
    let y = rng.gen_range(0.8..1.6);
    let ry = rng.gen_range(-PI..PI);
    let mut label = KittiLabel {
        kind: class.to_string(),
        truncated: 0.0,
        occluded: 0,
        alpha: alpha_from_ry(ry, x, z).ok()?,
        bbox: [0.0; 4],
        dims,
        location: [x, y, z],
        rotation_y: ry,
        score: None,
    };
    let b = label.to_box3d().project_2d(calib)?;
    let inside = b[0] >= 1.0 && b[1] >= 1.0 && b[2] <= iw as f64 - 2.0 && b[3] <= ih as f64 - 2.0;
    let h = b[3] - b[1];
    if !inside || !(20.0..=60.0).contains(&h) || b[2] - b[0] > 60.0 * 1.6 {
        return None;
    }
    label.bbox = b;
    Some(label)
}

/// Uniform samples over each box's six faces, projected and expressed in
/// feature-map coordinates (cell centers at integers).
fn surface_points(rng: &mut Prng, labels: &[KittiLabel], calib: &Calibration, stride: f64) -> Vec<PixelDepth> {
    let mut out = Vec::new();
    for l in labels {
        let b = l.to_box3d();
        let [h, w, len] = b.dims;
        let areas = [len * h, len * h, w * h, w * h, len * w, len * w];
        let total: f64 = areas.iter().sum();
        let (s, c) = b.ry.sin_cos();
        for _ in 0..SURFACE_POINTS {
            let mut pick = rng.gen_range(0.0..total);
            let mut face = 0;
            while face < 5 && pick >= areas[face] {
                pick -= areas[face];
                face += 1;
            }
            let (a, bb) = (rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
            let side = if face % 2 == 0 { -0.5 } else { 0.5 };
            let (lx, ly, lz) = match face / 2 {
                0 => (a * len, bb * h, side * w),
                1 => (side * len, bb * h, a * w),
                _ => (a * len, side * h, bb * w),
            };
            let p = [b.center[0] + c * lx + s * lz, b.center[1] + ly, b.center[2] - s * lx + c * lz];
            if let Some([u, v, d]) = project_point(p, calib) {
                out.push(PixelDepth {
                    u: u / stride - 0.5,
                    v: v / stride - 0.5,
                    depth: d,
                });
            }
        }
    }
    out
}

fn box_blur(map: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut n = 0.0;
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    acc += map[yy * w + xx];
                    n += 1.0;
                }
            }
            out[y * w + x] = acc / n;
        }
    }
    out
}

/// Smoothed noise plus, per object, Gaussian blobs at the projected center
/// whose amplitudes encode depth, orientation and size, and a footprint
/// channel holding depth inside the 2D box.
fn input_field(
    rng: &mut Prng,
    cfg: &RunConfig,
    labels: &[KittiLabel],
    calib: &Calibration,
) -> Result<Tensor, TensorError> {
    let (c, h, w) = (cfg.input_channels, cfg.height, cfg.width);
    let stride = cfg.stride as f64;
    let mut data = Vec::with_capacity(c * h * w);
    for _ in 0..c {
        let noise = normal_vec(rng, h * w, 0.1);
        data.extend(box_blur(&box_blur(&noise, h, w), h, w));
    }
    for l in labels {
        let b = l.to_box3d();
        let Some([u, v, _]) = project_point(b.center, calib) else {
            continue;
        };
        let (fx, fy) = (u / stride - 0.5, v / stride - 0.5);
        let extent = (l.bbox[2] - l.bbox[0]).max(l.bbox[3] - l.bbox[1]) / stride;
        let sigma = extent / 4.0 + 0.5;
        let z = b.center[2];
        let cues = [
            1.0,
            z / 40.0,
            l.alpha.sin(),
            l.alpha.cos(),
            2.0 * (l.dims[1] - 1.7),
            2.0 * (l.dims[0] - 1.6),
            l.dims[2] - 3.9,
        ];
        for y in 0..h {
            for x in 0..w {
                let d2 = (x as f64 - fx).powi(2) + (y as f64 - fy).powi(2);
                let blob = (-d2 / (2.0 * sigma * sigma)).exp();
                for (k, cue) in cues.iter().enumerate() {
                    data[(k % c) * h * w + y * w + x] += blob * cue;
                }
                let (px, py) = ((x as f64 + 0.5) * stride, (y as f64 + 0.5) * stride);
                if px >= l.bbox[0] && px <= l.bbox[2] && py >= l.bbox[1] && py <= l.bbox[3] {
                    data[(7 % c) * h * w + y * w + x] += z / 40.0;
                }
            }
        }
    }
    Tensor::new(data, &[c, h, w])
}
