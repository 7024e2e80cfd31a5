use std::f64::consts::PI;

use super::calib::Calibration;
use super::label::KittiLabel;
use super::KittiError;

/// Wraps into `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

pub fn alpha_from_ry(ry: f64, x: f64, z: f64) -> Result<f64, KittiError> {
    if !(z > 0.0) {
        return Err(KittiError::Geometry(format!("depth must be positive, got {z}")));
    }
    Ok(normalize_angle(ry - x.atan2(z)))
}

pub fn ry_from_alpha(alpha: f64, x: f64, z: f64) -> Result<f64, KittiError> {
    if !(z > 0.0) {
        return Err(KittiError::Geometry(format!("depth must be positive, got {z}")));
    }
    Ok(normalize_angle(alpha + x.atan2(z)))
}

/// `(u, v, depth)` of one camera-frame point, `None` behind the camera.
pub fn project_point(p: [f64; 3], calib: &Calibration) -> Option<[f64; 3]> {
    let h = [p[0], p[1], p[2], 1.0];
    let row = |r: &[f64; 4]| r.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>();
    let w = row(&calib.p2[2]);
    if !(w > 0.0) {
        return None;
    }
    Some([row(&calib.p2[0]) / w, row(&calib.p2[1]) / w, w])
}

/// Points with non-positive depth are dropped.
pub fn project_points(points: &[[f64; 3]], calib: &Calibration) -> Vec<[f64; 3]> {
    points.iter().filter_map(|&p| project_point(p, calib)).collect()
}

/// Camera-frame point with depth `z` that projects to `(u, v)`. Solves the
/// two image-plane rows of `P2` for `X, Y`, so a nonzero translation column
/// is honoured.
pub fn backproject(u: f64, v: f64, z: f64, calib: &Calibration) -> Result<[f64; 3], KittiError> {
    if !(z > 0.0) {
        return Err(KittiError::Geometry(format!("depth must be positive, got {z}")));
    }
    let p = &calib.p2;
    let a = [
        [p[0][0] - u * p[2][0], p[0][1] - u * p[2][1]],
        [p[1][0] - v * p[2][0], p[1][1] - v * p[2][1]],
    ];
    let b = [
        u * (p[2][2] * z + p[2][3]) - p[0][2] * z - p[0][3],
        v * (p[2][2] * z + p[2][3]) - p[1][2] * z - p[1][3],
    ];
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    if det.abs() < 1e-300 || !det.is_finite() {
        return Err(KittiError::Geometry("projection is not invertible at this depth".into()));
    }
    let x = (b[0] * a[1][1] - a[0][1] * b[1]) / det;
    let y = (a[0][0] * b[1] - b[0] * a[1][0]) / det;
    Ok([x, y, z])
}

/// 3D box about its geometric center. `dims` is `h, w, l`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box3D {
    pub center: [f64; 3],
    pub dims: [f64; 3],
    pub ry: f64,
}

impl Box3D {
    /// Length runs along the object's local x axis, width along z.
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let [h, w, l] = self.dims;
        let (s, c) = self.ry.sin_cos();
        let mut out = [[0.0; 3]; 8];
        let mut k = 0;
        for sx in [-0.5, 0.5] {
            for sy in [-0.5, 0.5] {
                for sz in [-0.5, 0.5] {
                    let (x, y, z) = (sx * l, sy * h, sz * w);
                    out[k] = [
                        self.center[0] + c * x + s * z,
                        self.center[1] + y,
                        self.center[2] - s * x + c * z,
                    ];
                    k += 1;
                }
            }
        }
        out
    }

    /// Tight image box of the projected corners; `None` if any corner is
    /// behind the camera.
    pub fn project_2d(&self, calib: &Calibration) -> Option<[f64; 4]> {
        let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        for p in self.corners() {
            let [u, v, _] = project_point(p, calib)?;
            b = [b[0].min(u), b[1].min(v), b[2].max(u), b[3].max(v)];
        }
        Some(b)
    }
}

/// Affine map from original to network pixel coordinates:
/// `u' = sx*u + tx`, `v' = sy*v + ty`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelTransform {
    pub sx: f64,
    pub sy: f64,
    pub tx: f64,
    pub ty: f64,
}

impl PixelTransform {
    pub fn apply(&self, u: f64, v: f64) -> (f64, f64) {
        (self.sx * u + self.tx, self.sy * v + self.ty)
    }

    pub fn inverse(&self) -> Self {
        Self {
            sx: 1.0 / self.sx,
            sy: 1.0 / self.sy,
            tx: -self.tx / self.sx,
            ty: -self.ty / self.sy,
        }
    }

    pub fn apply_to_label(&self, label: &KittiLabel) -> KittiLabel {
        let mut out = label.clone();
        let (x1, y1) = self.apply(label.bbox[0], label.bbox[1]);
        let (x2, y2) = self.apply(label.bbox[2], label.bbox[3]);
        out.bbox = [x1, y1, x2, y2];
        out
    }

    /// Left-multiplies `P2` by the affine map, moving focal lengths and the
    /// principal point with the pixels.
    pub fn apply_to_calib(&self, calib: &Calibration) -> Calibration {
        let mut p2 = calib.p2;
        for j in 0..4 {
            p2[0][j] = self.sx * calib.p2[0][j] + self.tx * calib.p2[2][j];
            p2[1][j] = self.sy * calib.p2[1][j] + self.ty * calib.p2[2][j];
        }
        Calibration { p2 }
    }
}

/// Crops `crop_top` rows from a `width x height` image and resizes the rest
/// to `target_width x target_height`.
pub fn preprocess(
    width: usize,
    height: usize,
    crop_top: usize,
    target_width: usize,
    target_height: usize,
) -> Result<PixelTransform, KittiError> {
    if width == 0 || target_width == 0 || target_height == 0 {
        return Err(KittiError::Geometry("image and target sizes must be positive".into()));
    }
    if crop_top >= height {
        return Err(KittiError::Geometry(format!("crop {crop_top} leaves nothing of height {height}")));
    }
    let sx = target_width as f64 / width as f64;
    let sy = target_height as f64 / (height - crop_top) as f64;
    Ok(PixelTransform {
        sx,
        sy,
        tx: 0.0,
        ty: -(crop_top as f64) * sy,
    })
}

/// Mirrors labels and calibration about the vertical image axis
/// (`u -> width - 1 - u`, `X -> -X`).
pub fn flip_horizontal(
    labels: &[KittiLabel],
    calib: &Calibration,
    width: usize,
) -> Result<(Vec<KittiLabel>, Calibration), KittiError> {
    if width == 0 {
        return Err(KittiError::Geometry("width must be positive".into()));
    }
    let m = (width - 1) as f64;
    let flipped = labels
        .iter()
        .map(|l| {
            let mut out = l.clone();
            out.bbox = [m - l.bbox[2], l.bbox[1], m - l.bbox[0], l.bbox[3]];
            if l.is_dont_care() {
                return out;
            }
            out.location[0] = -l.location[0];
            out.rotation_y = normalize_angle(PI - l.rotation_y);
            out.alpha = if l.location[2] > 0.0 {
                alpha_from_ry(out.rotation_y, out.location[0], out.location[2]).unwrap_or(l.alpha)
            } else {
                normalize_angle(PI - l.alpha)
            };
            out
        })
        .collect();
    let mut p2 = calib.p2;
    for j in 0..4 {
        p2[0][j] = m * calib.p2[2][j] - calib.p2[0][j];
    }
    for row in &mut p2 {
        row[0] = -row[0];
    }
    Ok((flipped, Calibration { p2 }))
}

/// Little-endian `f32` quadruples `x, y, z, reflectance`; reflectance is
/// dropped.
pub fn read_points(bytes: &[u8]) -> Result<Vec<[f64; 3]>, KittiError> {
    if bytes.len() % 16 != 0 {
        return Err(KittiError::Geometry(format!(
            "point buffer of {} bytes is not a multiple of 16",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(16)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes([c[i], c[i + 1], c[i + 2], c[i + 3]]) as f64;
            [f(0), f(4), f(8)]
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kittiio::label::parse_labels;
    use rand::{Rng, SeedableRng};
    use rand_pcg::Pcg32;

    fn calib() -> Calibration {
        Calibration::pinhole(700.0, 710.0, 600.0, 180.0)
    }

    #[test]
    fn angles_stay_in_range() {
        assert_eq!(normalize_angle(-PI), PI);
        assert_eq!(normalize_angle(PI), PI);
        assert!((normalize_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-15);
        let mut rng = Pcg32::seed_from_u64(3);
        for _ in 0..1000 {
            let a = normalize_angle(rng.gen_range(-50.0..50.0));
            assert!(a > -PI && a <= PI);
        }
    }

    #[test]
    fn alpha_conversions() {
        assert_eq!(alpha_from_ry(0.7, 0.0, 10.0).unwrap(), 0.7);
        assert!((alpha_from_ry(0.0, 5.0, 5.0).unwrap() + PI / 4.0).abs() < 1e-15);
        assert!(alpha_from_ry(0.0, 1.0, 0.0).is_err());
        let mut rng = Pcg32::seed_from_u64(4);
        for _ in 0..1000 {
            let ry = rng.gen_range(-PI..PI);
            let (x, z) = (rng.gen_range(-20.0..20.0), rng.gen_range(0.5..60.0));
            let back = ry_from_alpha(alpha_from_ry(ry, x, z).unwrap(), x, z).unwrap();
            assert!(normalize_angle(back - ry).abs() < 1e-12);
        }
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let c = calib();
        assert_eq!(project_point([0.0, 0.0, 7.0], &c).unwrap(), [600.0, 180.0, 7.0]);
        let near = project_point([2.0, 1.0, 10.0], &c).unwrap();
        let far = project_point([2.0, 1.0, 20.0], &c).unwrap();
        assert!(((near[0] - 600.0) - 2.0 * (far[0] - 600.0)).abs() < 1e-12);
        assert!(((near[1] - 180.0) - 2.0 * (far[1] - 180.0)).abs() < 1e-12);
        assert_eq!(project_points(&[[0.0, 0.0, -1.0], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0]], &c).len(), 1);
    }

    #[test]
    fn backprojection_inverts_projection() {
        let c = calib();
        let x = backproject(670.0, 180.0, 10.0, &c).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert_eq!(backproject(600.0, 180.0, 3.0, &c).unwrap(), [0.0, 0.0, 3.0]);
        assert!(backproject(600.0, 180.0, 0.0, &c).is_err());
        let kitti = Calibration::from_rows(&[
            721.5377, 0.0, 609.5593, 44.85728, 0.0, 721.5377, 172.854, 0.2163791, 0.0, 0.0, 1.0, 0.002745884,
        ])
        .unwrap();
        let mut rng = Pcg32::seed_from_u64(5);
        for _ in 0..500 {
            let p = [rng.gen_range(-15.0..15.0), rng.gen_range(-2.0..3.0), rng.gen_range(2.0..70.0)];
            for cal in [&c, &kitti] {
                let [u, v, _] = project_point(p, cal).unwrap();
                let q = backproject(u, v, p[2], cal).unwrap();
                for k in 0..3 {
                    assert!((p[k] - q[k]).abs() < 1e-9, "{p:?} {q:?}");
                }
            }
        }
    }

    #[test]
    fn preprocess_examples() {
        let t = preprocess(1242, 375, 100, 1242, 275).unwrap();
        assert_eq!(t.apply(10.0, 150.0), (10.0, 50.0));
        let t = preprocess(1242, 375, 100, 1280, 288).unwrap();
        assert!((t.apply(0.0, 375.0).1 - 288.0).abs() < 1e-12);
        assert!((t.apply(0.0, 100.0).1).abs() < 1e-12);
        let inv = t.inverse();
        let (u, v) = inv.apply(t.apply(321.5, 222.25).0, t.apply(321.5, 222.25).1);
        assert!((u - 321.5).abs() < 1e-12 && (v - 222.25).abs() < 1e-12);
        assert!(preprocess(1242, 375, 375, 1280, 288).is_err());
        assert!(preprocess(1242, 375, 10, 0, 288).is_err());
    }

    #[test]
    fn calib_follows_pixels() {
        let c = calib();
        let t = preprocess(1242, 375, 100, 1280, 288).unwrap();
        let ct = t.apply_to_calib(&c);
        let p = [1.5, 0.7, 12.0];
        let [u, v, _] = project_point(p, &c).unwrap();
        let [u2, v2, _] = project_point(p, &ct).unwrap();
        let (eu, ev) = t.apply(u, v);
        assert!((u2 - eu).abs() < 1e-9 && (v2 - ev).abs() < 1e-9);
    }

    fn random_label(rng: &mut Pcg32, c: &Calibration) -> KittiLabel {
        loop {
            let dims = [rng.gen_range(1.2..2.0), rng.gen_range(1.4..2.0), rng.gen_range(3.0..5.0)];
            let loc = [rng.gen_range(-10.0..10.0), rng.gen_range(1.0..2.0), rng.gen_range(8.0..50.0)];
            let ry = rng.gen_range(-PI..PI);
            let mut l = KittiLabel {
                kind: "Car".into(),
                truncated: 0.0,
                occluded: 0,
                alpha: alpha_from_ry(ry, loc[0], loc[2]).unwrap(),
                bbox: [0.0; 4],
                dims,
                location: loc,
                rotation_y: ry,
                score: None,
            };
            if let Some(b) = l.to_box3d().project_2d(c) {
                l.bbox = b;
                return l;
            }
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let c = calib();
        let mut rng = Pcg32::seed_from_u64(6);
        let mut labels: Vec<_> = (0..50).map(|_| random_label(&mut rng, &c)).collect();
        labels.extend(parse_labels("DontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10").unwrap());
        let (once, c1) = flip_horizontal(&labels, &c, 1242).unwrap();
        let (twice, c2) = flip_horizontal(&once, &c1, 1242).unwrap();
        assert_eq!(c1.cx(), 1241.0 - 600.0);
        for (a, b) in labels.iter().zip(&twice) {
            for (x, y) in a.bbox.iter().chain(&a.location).zip(b.bbox.iter().chain(&b.location)) {
                assert!((x - y).abs() < 1e-10);
            }
            assert!(normalize_angle(a.rotation_y - b.rotation_y).abs() < 1e-10);
            assert!(normalize_angle(a.alpha - b.alpha).abs() < 1e-10);
        }
        for (x, y) in c.values().iter().zip(c2.values()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn centered_object_is_symmetric() {
        let mut l = random_label(&mut Pcg32::seed_from_u64(7), &calib());
        l.location[0] = 0.0;
        l.rotation_y = PI / 2.0;
        let (f, _) = flip_horizontal(&[l], &calib(), 1201).unwrap();
        assert_eq!(f[0].location[0], 0.0);
        assert!((f[0].rotation_y - PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn flipped_box_reprojects_onto_flipped_2d_box() {
        let c = calib();
        let mut rng = Pcg32::seed_from_u64(8);
        for _ in 0..200 {
            let l = random_label(&mut rng, &c);
            let (f, cf) = flip_horizontal(std::slice::from_ref(&l), &c, 1242).unwrap();
            let re = f[0].to_box3d().project_2d(&cf).unwrap();
            for k in 0..4 {
                assert!((re[k] - f[0].bbox[k]).abs() < 1.0, "{re:?} {:?}", f[0].bbox);
            }
        }
    }

    #[test]
    fn point_buffer() {
        let mut bytes = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 0.5, -1.0, 0.0, 9.5, 0.1] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(read_points(&bytes).unwrap(), vec![[1.0, 2.0, 3.0], [-1.0, 0.0, 9.5]]);
        assert!(read_points(&bytes[..15]).is_err());
    }
}
