//! AP40 evaluation with 2D, bird's-eye-view and 3D overlap.

mod ap;
mod iou;

pub use ap::{ap40, ap_from_matches, match_detections, ApResult, ScoredMatch, RECALL_POSITIONS};
pub use iou::{bev_intersection, clip_polygon, iou_3d, iou_bev, RotRect};

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::detect::iou_2d;
use crate::kittiio::KittiLabel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "AP2D")]
    Ap2d,
    #[serde(rename = "APBEV")]
    ApBev,
    #[serde(rename = "AP3D")]
    Ap3d,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Ap2d, Metric::ApBev, Metric::Ap3d];

    pub fn overlap(self, a: &KittiLabel, b: &KittiLabel) -> f64 {
        match self {
            Metric::Ap2d => iou_2d(&a.bbox, &b.bbox),
            Metric::ApBev => iou_bev(&RotRect::from_box(&a.to_box3d()), &RotRect::from_box(&b.to_box3d())),
            Metric::Ap3d => iou_3d(&a.to_box3d(), &b.to_box3d()),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Ap2d => "AP2D",
            Metric::ApBev => "APBEV",
            Metric::Ap3d => "AP3D",
        })
    }
}

/// Detections and ground truth of one image.
#[derive(Clone, Debug, Default)]
pub struct Frame {
    pub name: String,
    pub detections: Vec<KittiLabel>,
    pub ground_truth: Vec<KittiLabel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub frame: usize,
    pub det: usize,
    pub gt: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub class: String,
    pub metric: Metric,
    pub iou: f64,
    /// Absent when the class has no ground truth.
    pub ap: Option<f64>,
    pub pr: Vec<[f64; 2]>,
    pub matches: Vec<MatchPair>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub entries: Vec<EvalEntry>,
}

impl EvalReport {
    pub fn get(&self, class: &str, metric: Metric, iou: f64) -> Option<&EvalEntry> {
        self.entries
            .iter()
            .find(|e| e.class == class && e.metric == metric && e.iou == iou)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries).expect("report serializes")
    }

    /// One row per class and threshold, one column per metric.
    pub fn summary(&self) -> String {
        let mut out = format!("{:<12} {:>5} {:>8} {:>8} {:>8}\n", "class", "iou", "AP2D", "APBEV", "AP3D");
        let mut keys: Vec<(String, f64)> = Vec::new();
        for e in &self.entries {
            if !keys.iter().any(|(c, i)| *c == e.class && *i == e.iou) {
                keys.push((e.class.clone(), e.iou));
            }
        }
        for (class, iou) in keys {
            let _ = write!(out, "{class:<12} {iou:>5.2}");
            for m in Metric::ALL {
                let cell = match self.get(&class, m, iou).map(|e| e.ap) {
                    Some(Some(ap)) => format!("{:.2}", 100.0 * ap),
                    Some(None) => "absent".to_string(),
                    None => "-".to_string(),
                };
                let _ = write!(out, " {cell:>8}");
            }
            out.push('\n');
        }
        out
    }
}

/// Evaluates every class and metric at every threshold. DontCare rows and
/// ground truth rejected by `keep_gt` take no part in matching.
pub fn evaluate(
    frames: &[Frame],
    classes: &[String],
    thresholds: &[(Metric, f64)],
    keep_gt: impl Fn(&KittiLabel) -> bool,
) -> EvalReport {
    let mut report = EvalReport::default();
    for class in classes {
        let per_frame: Vec<(Vec<(usize, &KittiLabel)>, Vec<(usize, &KittiLabel)>)> = frames
            .iter()
            .map(|f| {
                let dets = f.detections.iter().enumerate().filter(|(_, d)| &d.kind == class).collect();
                let gts = f
                    .ground_truth
                    .iter()
                    .enumerate()
                    .filter(|(_, g)| &g.kind == class && !g.is_dont_care() && keep_gt(g))
                    .collect();
                (dets, gts)
            })
            .collect();
        for &(metric, thresh) in thresholds {
            let mut pooled = Vec::new();
            let mut matches = Vec::new();
            let mut num_gt = 0;
            for (fi, (dets, gts)) in per_frame.iter().enumerate() {
                num_gt += gts.len();
                let scored: Vec<(f64, &KittiLabel)> =
                    dets.iter().map(|(_, d)| (d.score.unwrap_or(1.0), *d)).collect();
                let gt_rows: Vec<&KittiLabel> = gts.iter().map(|(_, g)| *g).collect();
                for m in match_detections(&scored, &gt_rows, |d, g| metric.overlap(d, g), thresh) {
                    if let Some(g) = m.gt {
                        matches.push(MatchPair {
                            frame: fi,
                            det: dets[m.det].0,
                            gt: gts[g].0,
                        });
                    }
                    pooled.push(m);
                }
            }
            let r = ap_from_matches(&pooled, num_gt);
            report.entries.push(EvalEntry {
                class: class.clone(),
                metric,
                iou: thresh,
                ap: r.ap,
                pr: r.pr,
                matches,
            });
        }
    }
    report
}
