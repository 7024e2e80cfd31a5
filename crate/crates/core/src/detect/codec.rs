use super::anchors::{Anchor2D3D, BoxParams};
use super::{DetectError, Result};

/// Residual layout of one regression row.
pub const RESIDUALS: usize = 11;

/// Names of the residual columns, in order.
pub const RESIDUAL_NAMES: [&str; RESIDUALS] = [
    "tx2d", "ty2d", "tw2d", "th2d", "tx3d", "ty3d", "tw3d", "th3d", "tl3d", "tz", "ttheta",
];

/// Size residuals beyond this magnitude are clamped before `exp`.
pub const SIZE_CLAMP: f64 = 10.0;

/// Regression targets of `gt` against `anchor`. Both projected-center
/// offsets are measured in units of the anchor's 2D size.
pub fn encode_targets(gt: &BoxParams, anchor: &Anchor2D3D) -> Result<[f64; RESIDUALS]> {
    let sizes = [gt.w2d, gt.h2d, gt.w3d, gt.h3d, gt.l3d];
    if sizes.iter().any(|v| !(*v > 0.0)) {
        return Err(DetectError::Target(format!("non-positive ground-truth size in {gt:?}")));
    }
    Ok([
        (gt.x2d - anchor.x2d) / anchor.w2d,
        (gt.y2d - anchor.y2d) / anchor.h2d,
        (gt.w2d / anchor.w2d).ln(),
        (gt.h2d / anchor.h2d).ln(),
        (gt.xp - anchor.xp) / anchor.w2d,
        (gt.yp - anchor.yp) / anchor.h2d,
        (gt.w3d / anchor.w3d).ln(),
        (gt.h3d / anchor.h3d).ln(),
        (gt.l3d / anchor.l3d).ln(),
        gt.z - anchor.z,
        gt.theta - anchor.theta,
    ])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decoded {
    pub params: BoxParams,
    /// Some size residual was clamped.
    pub clamped: bool,
}

pub fn decode(t: &[f64; RESIDUALS], anchor: &Anchor2D3D) -> Decoded {
    let mut clamped = false;
    let mut size = |v: f64| {
        if v.abs() > SIZE_CLAMP {
            clamped = true;
        }
        v.clamp(-SIZE_CLAMP, SIZE_CLAMP).exp()
    };
    let params = BoxParams {
        x2d: t[0] * anchor.w2d + anchor.x2d,
        y2d: t[1] * anchor.h2d + anchor.y2d,
        w2d: size(t[2]) * anchor.w2d,
        h2d: size(t[3]) * anchor.h2d,
        xp: t[4] * anchor.w2d + anchor.xp,
        yp: t[5] * anchor.h2d + anchor.yp,
        w3d: size(t[6]) * anchor.w3d,
        h3d: size(t[7]) * anchor.h3d,
        l3d: size(t[8]) * anchor.l3d,
        z: t[9] + anchor.z,
        theta: t[10] + anchor.theta,
    };
    Decoded { params, clamped }
}
