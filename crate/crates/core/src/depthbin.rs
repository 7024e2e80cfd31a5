//! Depth discretization, sparse depth-bin targets, and the auxiliary depth
//! focal loss.
//!
//! Three schemes split `[d_min, d_max]` into `D` bins:
//! - uniform (UD): equal widths,
//! - spacing-increasing (SID): equal widths in log depth,
//! - linear-increasing (LID): `b(i) = d_min + (d_max - d_min) i (i+1) / (D (D+1))`,
//!   so widths grow by the constant `2 (d_max - d_min) / (D (D+1))`.
//!
//! Bin lookup is a binary search over the boundary table for every scheme.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dfe::DepthDistribution;
use crate::loss::{focal_on_probs, FocalParams};
use crate::tensor::{Tensor, TensorError};

/// Marker for pixels without a usable depth label.
pub const INVALID_BIN: i32 = -1;

#[derive(Debug, Error)]
pub enum DepthBinError {
    #[error("invalid depth range [{d_min}, {d_max}] with {bins} bins")]
    InvalidSpec { d_min: f64, d_max: f64, bins: usize },
    #[error("depth target map is {got:?}, prediction is {want:?}")]
    ShapeMismatch { got: (usize, usize), want: (usize, usize) },
    #[error("target bin {bin} exceeds {bins} bins")]
    BinOutOfRange { bin: i32, bins: usize },
    #[error("depth map text, line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Discretization {
    Uniform,
    SpacingIncreasing,
    LinearIncreasing,
}

impl std::str::FromStr for Discretization {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "UD" => Ok(Self::Uniform),
            "SID" => Ok(Self::SpacingIncreasing),
            "LID" => Ok(Self::LinearIncreasing),
            other => Err(format!("unknown discretization {other:?} (UD, SID, LID)")),
        }
    }
}

impl std::fmt::Display for Discretization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Uniform => "UD",
            Self::SpacingIncreasing => "SID",
            Self::LinearIncreasing => "LID",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthBinSpec {
    pub d_min: f64,
    pub d_max: f64,
    pub bins: usize,
    pub method: Discretization,
}

impl Default for DepthBinSpec {
    fn default() -> Self {
        Self {
            d_min: 1.0,
            d_max: 80.0,
            bins: 96,
            method: Discretization::LinearIncreasing,
        }
    }
}

impl DepthBinSpec {
    pub fn new(d_min: f64, d_max: f64, bins: usize, method: Discretization) -> Result<Self, DepthBinError> {
        if !(d_min > 0.0 && d_max > d_min && d_max.is_finite() && bins >= 2) {
            return Err(DepthBinError::InvalidSpec { d_min, d_max, bins });
        }
        Ok(Self {
            d_min,
            d_max,
            bins,
            method,
        })
    }

    /// `D + 1` strictly increasing edges; the first and last are exactly
    /// `d_min` and `d_max`.
    pub fn boundaries(&self) -> Vec<f64> {
        let d = self.bins;
        let range = self.d_max - self.d_min;
        let mut edges: Vec<f64> = (0..=d)
            .map(|i| match self.method {
                Discretization::Uniform => self.d_min + range * i as f64 / d as f64,
                Discretization::SpacingIncreasing => {
                    let (lo, hi) = (self.d_min.ln(), self.d_max.ln());
                    (lo + (hi - lo) * i as f64 / d as f64).exp()
                }
                // multiply before dividing so the endpoint lands exactly
                Discretization::LinearIncreasing => {
                    self.d_min + range * (i * (i + 1)) as f64 / (d * (d + 1)) as f64
                }
            })
            .collect();
        edges[0] = self.d_min;
        edges[d] = self.d_max;
        edges
    }

    /// Bin `i` with `b(i) <= depth < b(i+1)`, or `None` outside `[d_min, d_max)`.
    pub fn depth_to_bin(&self, depth: f64) -> Option<usize> {
        self.bin_in(&self.boundaries(), depth)
    }

    /// [`Self::depth_to_bin`] against a precomputed boundary table.
    pub fn bin_in(&self, edges: &[f64], depth: f64) -> Option<usize> {
        if !(depth >= self.d_min && depth < self.d_max) {
            return None;
        }
        // first edge strictly above depth, minus one
        let above = edges.partition_point(|&e| e <= depth);
        Some(above - 1).filter(|&b| b < self.bins)
    }

    /// Midpoint depth of a bin.
    pub fn bin_center(&self, bin: usize) -> f64 {
        let e = self.boundaries();
        0.5 * (e[bin] + e[bin + 1])
    }
}

/// Sparse per-pixel bin labels; [`INVALID_BIN`] where there is no label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DepthTargetMap {
    pub height: usize,
    pub width: usize,
    pub bins: usize,
    /// Row-major `height x width`.
    pub labels: Vec<i32>,
}

impl DepthTargetMap {
    pub fn empty(height: usize, width: usize, bins: usize) -> Self {
        Self {
            height,
            width,
            bins,
            labels: vec![INVALID_BIN; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> i32 {
        self.labels[y * self.width + x]
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        self.labels.iter().map(|&b| b != INVALID_BIN).collect()
    }

    pub fn valid_count(&self) -> usize {
        self.labels.iter().filter(|&&b| b != INVALID_BIN).count()
    }

    /// Per-bin counts plus the number of invalid pixels.
    pub fn histogram(&self) -> (Vec<usize>, usize) {
        let mut counts = vec![0; self.bins];
        let mut invalid = 0;
        for &b in &self.labels {
            match usize::try_from(b) {
                Ok(b) if b < self.bins => counts[b] += 1,
                _ => invalid += 1,
            }
        }
        (counts, invalid)
    }

    /// `DBIN H W D` header, then `H` rows of `W` integers.
    pub fn to_text(&self) -> String {
        let mut out = format!("DBIN {} {} {}\n", self.height, self.width, self.bins);
        for row in self.labels.chunks(self.width) {
            let line: Vec<String> = row.iter().map(i32::to_string).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, DepthBinError> {
        let err = |line: usize, msg: &str| DepthBinError::Parse {
            line,
            msg: msg.to_string(),
        };
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().ok_or_else(|| err(1, "empty input"))?.split_whitespace().collect();
        if header.len() != 4 || header[0] != "DBIN" {
            return Err(err(1, "expected header `DBIN H W D`"));
        }
        let dims: Vec<usize> = header[1..]
            .iter()
            .map(|s| s.parse::<usize>().map_err(|_| err(1, "bad header dimension")))
            .collect::<Result<_, _>>()?;
        let (height, width, bins) = (dims[0], dims[1], dims[2]);
        if height == 0 || width == 0 || bins == 0 || height.saturating_mul(width) > 1 << 24 {
            return Err(err(1, "dimensions out of range"));
        }
        let mut labels = Vec::with_capacity(height * width);
        for row in 0..height {
            let line_no = row + 2;
            let line = lines.next().ok_or_else(|| err(line_no, "missing row"))?;
            let values: Vec<i32> = line
                .split_whitespace()
                .map(|s| s.parse::<i32>().map_err(|_| err(line_no, "bad integer")))
                .collect::<Result<_, _>>()?;
            if values.len() != width {
                return Err(err(line_no, "wrong number of columns"));
            }
            if let Some(&bad) = values.iter().find(|&&v| v != INVALID_BIN && !(0..bins as i32).contains(&v)) {
                return Err(err(line_no, &format!("bin {bad} out of range")));
            }
            labels.extend(values);
        }
        if lines.any(|l| !l.trim().is_empty()) {
            return Err(err(height + 2, "trailing data"));
        }
        Ok(Self {
            height,
            width,
            bins,
            labels,
        })
    }
}

/// Projected depth sample in pixel coordinates of the target map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelDepth {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// Writes each in-range point's bin at `(round(v), round(u))`; on a collision
/// the nearer depth wins.
pub fn rasterize_depth_gt(points: &[PixelDepth], height: usize, width: usize, spec: &DepthBinSpec) -> DepthTargetMap {
    let edges = spec.boundaries();
    let mut map = DepthTargetMap::empty(height, width, spec.bins);
    let mut nearest = vec![f64::INFINITY; height * width];
    for p in points {
        let (x, y) = (p.u.round(), p.v.round());
        if !(x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64) {
            continue;
        }
        let Some(bin) = spec.bin_in(&edges, p.depth) else {
            continue;
        };
        let idx = y as usize * width + x as usize;
        if p.depth < nearest[idx] {
            nearest[idx] = p.depth;
            map.labels[idx] = bin as i32;
        }
    }
    map
}

#[derive(Clone, Debug)]
pub struct DepthLoss {
    /// Scalar; exactly 0 when no pixel is valid.
    pub loss: Tensor,
    pub valid_pixels: usize,
    /// Set when the map had no valid pixel.
    pub empty: bool,
}

/// Mean focal loss over valid pixels of the probability at the target bin.
pub fn depth_focal_loss(
    pred: &DepthDistribution,
    target: &DepthTargetMap,
    focal: FocalParams,
) -> Result<DepthLoss, DepthBinError> {
    let (bins, h, w) = pred.dims();
    if (target.height, target.width) != (h, w) {
        return Err(DepthBinError::ShapeMismatch {
            got: (target.height, target.width),
            want: (h, w),
        });
    }
    let mut indices = Vec::new();
    for (pixel, &b) in target.labels.iter().enumerate() {
        if b == INVALID_BIN {
            continue;
        }
        if b < 0 || b as usize >= bins {
            return Err(DepthBinError::BinOutOfRange { bin: b, bins });
        }
        indices.push(b as usize * h * w + pixel);
    }
    if indices.is_empty() {
        log::warn!("depth target has no valid pixels; depth loss is 0");
        return Ok(DepthLoss {
            loss: Tensor::scalar(0.0),
            valid_pixels: 0,
            empty: true,
        });
    }
    let picked = pred.probs.gather(&indices)?;
    Ok(DepthLoss {
        loss: focal_on_probs(&picked, focal)?.mean()?,
        valid_pixels: indices.len(),
        empty: false,
    })
}

/// Batch depth loss: per-image means averaged over images.
pub fn batch_depth_loss(per_image: &[DepthLoss]) -> Result<Tensor, DepthBinError> {
    let mut total = Tensor::scalar(0.0);
    for l in per_image {
        total = total.add(&l.loss)?;
    }
    Ok(total.scale(1.0 / per_image.len().max(1) as f64)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lid() -> DepthBinSpec {
        DepthBinSpec::default()
    }

    #[test]
    fn lid_endpoints_and_midpoint() {
        let e = lid().boundaries();
        assert_eq!(e.len(), 97);
        assert_eq!(e[0], 1.0);
        assert_eq!(e[96], 80.0);
        assert!((e[48] - 20.9536).abs() < 1e-4);
        assert!((e[48] - (1.0 + 79.0 * 48.0 * 49.0 / (96.0 * 97.0))).abs() < 1e-12);
    }

    #[test]
    fn uniform_widths() {
        let s = DepthBinSpec::new(1.0, 80.0, 96, Discretization::Uniform).unwrap();
        let e = s.boundaries();
        for w in e.windows(2) {
            assert!((w[1] - w[0] - 79.0 / 96.0).abs() < 1e-12);
        }
        assert!((79.0f64 / 96.0 - 0.82292).abs() < 1e-5);
    }

    #[test]
    fn sid_is_log_uniform() {
        let s = DepthBinSpec::new(1.0, 80.0, 16, Discretization::SpacingIncreasing).unwrap();
        let e = s.boundaries();
        let ratio = e[1] / e[0];
        for w in e.windows(2) {
            assert!((w[1] / w[0] - ratio).abs() < 1e-12);
        }
        assert_eq!(e[16], 80.0);
    }

    #[test]
    fn lookup_edges() {
        let s = lid();
        assert_eq!(s.depth_to_bin(1.0), Some(0));
        assert_eq!(s.depth_to_bin(0.5), None);
        assert_eq!(s.depth_to_bin(80.0), None);
        assert_eq!(s.depth_to_bin(f64::NAN), None);
        let e = s.boundaries();
        assert_eq!(s.depth_to_bin(e[48]), Some(48));
        assert_eq!(s.depth_to_bin(20.9537), Some(48));
        assert_eq!(s.depth_to_bin(79.9999), Some(95));
    }

    #[test]
    fn invalid_specs() {
        assert!(DepthBinSpec::new(0.0, 80.0, 96, Discretization::Uniform).is_err());
        assert!(DepthBinSpec::new(5.0, 4.0, 96, Discretization::Uniform).is_err());
        assert!(DepthBinSpec::new(1.0, 80.0, 1, Discretization::Uniform).is_err());
    }

    #[test]
    fn rasterize_cases() {
        let s = lid();
        let m = rasterize_depth_gt(&[], 4, 5, &s);
        assert_eq!(m.valid_count(), 0);

        let m = rasterize_depth_gt(&[PixelDepth { u: 3.0, v: 4.0, depth: 1.0 }], 6, 6, &s);
        assert_eq!(m.valid_count(), 1);
        assert_eq!(m.get(4, 3), 0);

        let pts = [
            PixelDepth { u: 1.2, v: 0.8, depth: 5.0 },
            PixelDepth { u: 0.9, v: 1.1, depth: 3.0 },
            PixelDepth { u: 1.0, v: 1.0, depth: 4.0 },
            PixelDepth { u: -3.0, v: 1.0, depth: 4.0 },
            PixelDepth { u: 2.0, v: 2.0, depth: 120.0 },
        ];
        let m = rasterize_depth_gt(&pts, 3, 3, &s);
        assert_eq!(m.valid_count(), 1);
        assert_eq!(m.get(1, 1), s.depth_to_bin(3.0).unwrap() as i32);
    }

    #[test]
    fn dbin_text_round_trip() {
        let mut m = DepthTargetMap::empty(2, 3, 8);
        m.labels[1] = 7;
        m.labels[5] = 0;
        let text = m.to_text();
        assert!(text.starts_with("DBIN 2 3 8\n"));
        assert_eq!(DepthTargetMap::from_text(&text).unwrap(), m);
        assert!(DepthTargetMap::from_text("DBIN 1 2 3\n0 9\n").is_err());
        assert!(DepthTargetMap::from_text("DBIN 1 2 3\n0\n").is_err());
        assert!(DepthTargetMap::from_text("").is_err());
        let (hist, invalid) = m.histogram();
        assert_eq!(hist[7], 1);
        assert_eq!(invalid, 4);
    }

    #[test]
    fn focal_loss_simple_cases() {
        let (d, h, w) = (2, 1, 2);
        // pixel 0: p(bin0)=1; pixel 1: p(bin1)=0.5
        let probs = Tensor::new(vec![1.0, 0.5, 0.0, 0.5], &[d, h, w]).unwrap();
        let dist = DepthDistribution::new(probs).unwrap();
        let mut target = DepthTargetMap::empty(h, w, d);
        target.labels[0] = 0;
        let l = depth_focal_loss(&dist, &target, FocalParams::default()).unwrap();
        assert_eq!(l.loss.item(), 0.0);

        target.labels = vec![INVALID_BIN, 1];
        let ce = FocalParams { gamma: 0.0, alpha: 1.0 };
        let l = depth_focal_loss(&dist, &target, ce).unwrap();
        assert!((l.loss.item() - std::f64::consts::LN_2).abs() < 1e-15);

        let l = depth_focal_loss(&dist, &DepthTargetMap::empty(h, w, d), ce).unwrap();
        assert!(l.empty);
        assert_eq!(l.loss.item(), 0.0);

        assert!(depth_focal_loss(&dist, &DepthTargetMap::empty(2, 2, d), ce).is_err());
    }
}
