use std::cmp::Ordering;

/// Number of recall positions sampled.
pub const RECALL_POSITIONS: usize = 40;

/// Outcome of one detection after matching.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredMatch {
    pub score: f64,
    /// Matched ground truth, `None` for a false positive.
    pub gt: Option<usize>,
    pub det: usize,
}

/// Greedy matching in descending score order (stable on ties): each
/// detection takes the unmatched ground truth with the highest IoU at or
/// above `thresh`, the lowest index on ties.
pub fn match_detections<D, G>(
    dets: &[(f64, D)],
    gts: &[G],
    iou: impl Fn(&D, &G) -> f64,
    thresh: f64,
) -> Vec<ScoredMatch> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].0.partial_cmp(&dets[a].0).unwrap_or(Ordering::Equal));
    let mut taken = vec![false; gts.len()];
    order
        .into_iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let v = iou(&dets[d].1, gt);
                if v >= thresh && best.map_or(true, |(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            ScoredMatch {
                score: dets[d].0,
                gt: best.map(|b| b.0),
                det: d,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApResult {
    /// `None` when there is no ground truth to recall.
    pub ap: Option<f64>,
    /// `(recall, interpolated precision)` at `1/40, ..., 40/40`; empty when
    /// `ap` is `None`.
    pub pr: Vec<[f64; 2]>,
}

/// AP over the 40 recall positions from matches pooled across images. The
/// interpolated precision at `r` is the best precision at any recall `>= r`.
pub fn ap_from_matches(matches: &[ScoredMatch], num_gt: usize) -> ApResult {
    if num_gt == 0 {
        return ApResult { ap: None, pr: Vec::new() };
    }
    let mut sorted: Vec<&ScoredMatch> = matches.iter().collect();
    sorted.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    let mut curve = Vec::with_capacity(sorted.len());
    let mut tp = 0usize;
    for (i, m) in sorted.iter().enumerate() {
        if m.gt.is_some() {
            tp += 1;
        }
        curve.push((tp as f64 / num_gt as f64, tp as f64 / (i + 1) as f64));
    }
    // suffix maximum of precision
    let mut best = vec![0.0f64; curve.len() + 1];
    for i in (0..curve.len()).rev() {
        best[i] = best[i + 1].max(curve[i].1);
    }
    let mut pr = Vec::with_capacity(RECALL_POSITIONS);
    let mut start = 0;
    for k in 1..=RECALL_POSITIONS {
        let r = k as f64 / RECALL_POSITIONS as f64;
        while start < curve.len() && curve[start].0 < r {
            start += 1;
        }
        pr.push([r, best[start]]);
    }
    let ap = pr.iter().map(|p| p[1]).sum::<f64>() / RECALL_POSITIONS as f64;
    ApResult { ap: Some(ap), pr }
}

/// Single-image AP40.
pub fn ap40<D, G>(dets: &[(f64, D)], gts: &[G], iou: impl Fn(&D, &G) -> f64, thresh: f64) -> (ApResult, Vec<ScoredMatch>) {
    let m = match_detections(dets, gts, iou, thresh);
    (ap_from_matches(&m, gts.len()), m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::iou_2d;

    fn boxes(v: &[(f64, [f64; 4])]) -> Vec<(f64, [f64; 4])> {
        v.to_vec()
    }

    #[test]
    fn exact_detection() {
        let g = [[0.0, 0.0, 10.0, 10.0]];
        let (r, m) = ap40(&boxes(&[(0.9, g[0])]), &g, iou_2d, 0.7);
        assert_eq!(r.ap, Some(1.0));
        assert_eq!(r.pr.len(), 40);
        assert_eq!(m[0].gt, Some(0));
    }

    #[test]
    fn no_detections_or_no_ground_truth() {
        let g = [[0.0, 0.0, 10.0, 10.0]];
        assert_eq!(ap40(&boxes(&[]), &g, iou_2d, 0.7).0.ap, Some(0.0));
        let none: [[f64; 4]; 0] = [];
        assert_eq!(ap40(&boxes(&[(0.5, g[0])]), &none, iou_2d, 0.7).0.ap, None);
    }

    #[test]
    fn half_recall() {
        let g = [[0.0, 0.0, 10.0, 10.0], [50.0, 50.0, 60.0, 60.0]];
        let (r, _) = ap40(&boxes(&[(0.9, g[0])]), &g, iou_2d, 0.5);
        assert!((r.ap.unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn matching_is_exclusive() {
        let g = [[0.0, 0.0, 10.0, 10.0]];
        let (r, m) = ap40(&boxes(&[(0.9, g[0]), (0.8, g[0])]), &g, iou_2d, 0.5);
        assert_eq!(m.iter().filter(|m| m.gt.is_some()).count(), 1);
        assert_eq!(r.ap, Some(1.0));
    }
}
