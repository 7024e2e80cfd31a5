use serde::{Deserialize, Serialize};

use super::{DetectError, Result};

/// The eleven anchor parameters of one box: 2D center and size, projected
/// 3D center, center depth, 3D size and observation angle. Ground truth is
/// expressed in the same form for encoding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxParams {
    pub x2d: f64,
    pub y2d: f64,
    pub w2d: f64,
    pub h2d: f64,
    pub xp: f64,
    pub yp: f64,
    pub z: f64,
    pub w3d: f64,
    pub h3d: f64,
    pub l3d: f64,
    pub theta: f64,
}

pub type Anchor2D3D = BoxParams;

impl BoxParams {
    /// `x1, y1, x2, y2`
    pub fn box2d(&self) -> [f64; 4] {
        [
            self.x2d - self.w2d / 2.0,
            self.y2d - self.h2d / 2.0,
            self.x2d + self.w2d / 2.0,
            self.y2d + self.h2d / 2.0,
        ]
    }
}

/// Statistics of `z, w3d, h3d, l3d, theta` for one anchor template.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplatePrior {
    pub mean: [f64; 5],
    pub var: [f64; 5],
    pub count: usize,
}

impl Default for TemplatePrior {
    /// A generic car at 20 m.
    fn default() -> Self {
        Self {
            mean: [20.0, 1.6, 1.5, 3.9, 0.0],
            var: [0.0; 5],
            count: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorTemplate {
    pub w2d: f64,
    pub h2d: f64,
    pub prior: TemplatePrior,
}

/// `base * 2^(i/4)` for `i` in `0..count`.
pub fn anchor_scales(base: f64, count: usize) -> Vec<f64> {
    (0..count).map(|i| base * 2f64.powf(i as f64 / 4.0)).collect()
}

/// Template order is ratio-major, then scale. Ratios are width over height.
pub fn anchor_templates(ratios: &[f64], scales: &[f64]) -> Result<Vec<AnchorTemplate>> {
    if ratios.is_empty() || scales.is_empty() {
        return Err(DetectError::Anchors("ratios and scales must be nonempty".into()));
    }
    if ratios.iter().chain(scales).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(DetectError::Anchors("ratios and scales must be positive".into()));
    }
    Ok(ratios
        .iter()
        .flat_map(|&r| {
            scales.iter().map(move |&s| AnchorTemplate {
                w2d: s * r,
                h2d: s,
                prior: TemplatePrior::default(),
            })
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorGrid {
    pub height: usize,
    pub width: usize,
    pub stride: f64,
    pub templates: Vec<AnchorTemplate>,
    /// Index `(y * width + x) * templates + t`.
    pub anchors: Vec<Anchor2D3D>,
}

impl AnchorGrid {
    pub fn per_pixel(&self) -> usize {
        self.templates.len()
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// One anchor per pixel and template, centered on the pixel center in input
/// pixels. `priors`, when given, replaces each template's 3D statistics.
pub fn generate_anchors(
    height: usize,
    width: usize,
    stride: f64,
    ratios: &[f64],
    scales: &[f64],
    priors: Option<&[TemplatePrior]>,
) -> Result<AnchorGrid> {
    let mut templates = anchor_templates(ratios, scales)?;
    if let Some(p) = priors {
        if p.len() != templates.len() {
            return Err(DetectError::Anchors(format!(
                "{} priors for {} templates",
                p.len(),
                templates.len()
            )));
        }
        for (t, p) in templates.iter_mut().zip(p) {
            t.prior = *p;
        }
    }
    let mut anchors = Vec::with_capacity(height * width * templates.len());
    for y in 0..height {
        for x in 0..width {
            let (cx, cy) = ((x as f64 + 0.5) * stride, (y as f64 + 0.5) * stride);
            for t in &templates {
                let m = t.prior.mean;
                anchors.push(BoxParams {
                    x2d: cx,
                    y2d: cy,
                    w2d: t.w2d,
                    h2d: t.h2d,
                    xp: cx,
                    yp: cy,
                    z: m[0],
                    w3d: m[1],
                    h3d: m[2],
                    l3d: m[3],
                    theta: m[4],
                });
            }
        }
    }
    Ok(AnchorGrid {
        height,
        width,
        stride,
        templates,
        anchors,
    })
}

/// Intersection over union of `x1, y1, x2, y2` boxes; zero-area boxes give 0.
pub fn iou_2d(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let area = |r: &[f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let (aa, ab) = (area(a), area(b));
    if aa <= 0.0 || ab <= 0.0 {
        return 0.0;
    }
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    inter / (aa + ab - inter)
}

/// Size-only IoU of a box against a template, both centered at the origin.
fn shape_iou(w: f64, h: f64, t: &AnchorTemplate) -> f64 {
    iou_2d(&[-w / 2.0, -h / 2.0, w / 2.0, h / 2.0], &[-t.w2d / 2.0, -t.h2d / 2.0, t.w2d / 2.0, t.h2d / 2.0])
}

/// Buckets every ground truth to the template with the best size-only IoU
/// (first on ties) and returns per-template population mean and variance of
/// `z, w3d, h3d, l3d, theta`. Empty templates take the global statistics.
pub fn compute_anchor_priors(gts: &[BoxParams], templates: &[AnchorTemplate]) -> Result<Vec<TemplatePrior>> {
    if gts.is_empty() {
        return Err(DetectError::Anchors("no ground truth to compute priors from".into()));
    }
    if templates.is_empty() {
        return Err(DetectError::Anchors("no templates".into()));
    }
    let vals = |g: &BoxParams| [g.z, g.w3d, g.h3d, g.l3d, g.theta];
    let mut acc = vec![Welford::default(); templates.len()];
    let mut global = Welford::default();
    for g in gts {
        let mut best = 0;
        let mut best_iou = f64::NEG_INFINITY;
        for (i, t) in templates.iter().enumerate() {
            let iou = shape_iou(g.w2d, g.h2d, t);
            if iou > best_iou {
                best = i;
                best_iou = iou;
            }
        }
        acc[best].push(vals(g));
        global.push(vals(g));
    }
    Ok(acc
        .iter()
        .map(|w| if w.n == 0 { global.prior() } else { w.prior() })
        .collect())
}

#[derive(Clone, Default)]
struct Welford {
    n: usize,
    mean: [f64; 5],
    m2: [f64; 5],
}

impl Welford {
    fn push(&mut self, x: [f64; 5]) {
        self.n += 1;
        for k in 0..5 {
            let d = x[k] - self.mean[k];
            self.mean[k] += d / self.n as f64;
            self.m2[k] += d * (x[k] - self.mean[k]);
        }
    }

    fn prior(&self) -> TemplatePrior {
        let mut var = [0.0; 5];
        for k in 0..5 {
            var[k] = self.m2[k] / self.n as f64;
        }
        TemplatePrior {
            mean: self.mean,
            var,
            count: self.n,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Assignment {
    Negative,
    Positive(usize),
}

impl Assignment {
    pub fn gt(self) -> Option<usize> {
        match self {
            Assignment::Positive(g) => Some(g),
            Assignment::Negative => None,
        }
    }
}

/// Positive when the best 2D IoU over ground truths exceeds 0.5; ties go to
/// the lowest ground-truth index.
pub fn assign_targets(anchors: &[Anchor2D3D], gt_boxes: &[[f64; 4]]) -> Vec<Assignment> {
    anchors
        .iter()
        .map(|a| {
            let b = a.box2d();
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gt_boxes.iter().enumerate() {
                let iou = iou_2d(&b, gt);
                if best.map_or(true, |(_, v)| iou > v) {
                    best = Some((g, iou));
                }
            }
            match best {
                Some((g, iou)) if iou > 0.5 => Assignment::Positive(g),
                _ => Assignment::Negative,
            }
        })
        .collect()
}
