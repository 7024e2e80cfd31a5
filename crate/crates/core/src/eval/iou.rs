use crate::kittiio::Box3D;

/// Ground-plane rectangle. `l` runs along the heading, `w` across it, with
/// the same yaw convention as [`Box3D::corners`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotRect {
    pub cx: f64,
    pub cz: f64,
    pub w: f64,
    pub l: f64,
    pub yaw: f64,
}

impl RotRect {
    pub fn from_box(b: &Box3D) -> Self {
        Self {
            cx: b.center[0],
            cz: b.center[2],
            w: b.dims[1],
            l: b.dims[2],
            yaw: b.ry,
        }
    }

    /// Counter-clockwise in the `(x, z)` plane.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let p = |dx: f64, dz: f64| [self.cx + c * dx + s * dz, self.cz - s * dx + c * dz];
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        let pts = [p(-hl, -hw), p(hl, -hw), p(hl, hw), p(-hl, hw)];
        if signed_area(&pts) < 0.0 {
            [pts[3], pts[2], pts[1], pts[0]]
        } else {
            pts
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.l
    }

    fn degenerate(&self) -> bool {
        !(self.w > 0.0 && self.l > 0.0) || !self.cx.is_finite() || !self.cz.is_finite() || !self.yaw.is_finite()
    }
}

fn signed_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        / 2.0
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Sutherland-Hodgman clip of `subject` by the convex counter-clockwise
/// polygon `clip`.
pub fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (dc, dp) = (cross(a, b, cur), cross(a, b, prev));
            if dc >= 0.0 {
                if dp < 0.0 {
                    out.push(intersect(prev, cur, dp, dc));
                }
                out.push(cur);
            } else if dp >= 0.0 {
                out.push(intersect(prev, cur, dp, dc));
            }
        }
    }
    out
}

fn intersect(p: [f64; 2], q: [f64; 2], dp: f64, dq: f64) -> [f64; 2] {
    let t = dp / (dp - dq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Intersection area of two rotated rectangles.
pub fn bev_intersection(a: &RotRect, b: &RotRect) -> f64 {
    if a.degenerate() || b.degenerate() {
        return 0.0;
    }
    let poly = clip_polygon(&a.corners(), &b.corners());
    if poly.len() < 3 {
        0.0
    } else {
        signed_area(&poly).abs()
    }
}

pub fn iou_bev(a: &RotRect, b: &RotRect) -> f64 {
    let inter = bev_intersection(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    (inter / (a.area() + b.area() - inter)).clamp(0.0, 1.0)
}

/// Footprint intersection times vertical overlap, over the union volume.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    if a.dims.iter().chain(&b.dims).any(|v| !(*v > 0.0)) {
        return 0.0;
    }
    let (ha, hb) = (a.dims[0] / 2.0, b.dims[0] / 2.0);
    let overlap = ((a.center[1] + ha).min(b.center[1] + hb) - (a.center[1] - ha).max(b.center[1] - hb)).max(0.0);
    let inter = bev_intersection(&RotRect::from_box(a), &RotRect::from_box(b)) * overlap;
    if inter <= 0.0 {
        return 0.0;
    }
    let vol = |x: &Box3D| x.dims[0] * x.dims[1] * x.dims[2];
    (inter / (vol(a) + vol(b) - inter)).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn rect(cx: f64, cz: f64, w: f64, l: f64, yaw: f64) -> RotRect {
        RotRect { cx, cz, w, l, yaw }
    }

    #[test]
    fn identical_and_offset() {
        let a = rect(1.0, 2.0, 1.5, 4.0, 0.3);
        assert!((iou_bev(&a, &a) - 1.0).abs() < 1e-12);
        let u = rect(0.0, 0.0, 1.0, 1.0, 0.0);
        assert!((iou_bev(&u, &rect(0.5, 0.0, 1.0, 1.0, 0.0)) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou_bev(&u, &rect(5.0, 0.0, 1.0, 1.0, 0.0)), 0.0);
        assert_eq!(iou_bev(&u, &rect(0.0, 0.0, 0.0, 1.0, 0.0)), 0.0);
    }

    #[test]
    fn rotation_by_half_turn_is_the_same_rectangle() {
        let a = rect(3.0, 7.0, 1.6, 3.9, 0.4);
        let b = rect(3.0, 7.0, 1.6, 3.9, 0.4 + PI);
        assert!((iou_bev(&a, &b) - 1.0).abs() < 1e-12);
        // square rotated 45 degrees inside a bigger axis-aligned one
        let inner = rect(0.0, 0.0, 1.0, 1.0, PI / 4.0);
        let outer = rect(0.0, 0.0, 2.0, 2.0, 0.0);
        assert!((iou_bev(&inner, &outer) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn vertical_half_overlap() {
        let a = Box3D {
            center: [0.0, 0.0, 10.0],
            dims: [2.0, 1.5, 4.0],
            ry: 0.2,
        };
        assert!((iou_3d(&a, &a) - 1.0).abs() < 1e-12);
        let b = Box3D {
            center: [0.0, 1.0, 10.0],
            ..a
        };
        assert!((iou_3d(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        let flat = Box3D { dims: [0.0, 1.5, 4.0], ..a };
        assert_eq!(iou_3d(&a, &flat), 0.0);
    }
}
