use super::KittiError;

/// Left color camera projection `P2` (3x4, row-major).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Calibration {
    pub p2: [[f64; 4]; 3],
}

impl Calibration {
    /// Pinhole intrinsics with zero translation.
    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self {
            p2: [[fx, 0.0, cx, 0.0], [0.0, fy, cy, 0.0], [0.0, 0.0, 1.0, 0.0]],
        }
    }

    pub fn from_rows(values: &[f64; 12]) -> Result<Self, KittiError> {
        let mut p2 = [[0.0; 4]; 3];
        for (i, v) in values.iter().enumerate() {
            p2[i / 4][i % 4] = *v;
        }
        let calib = Self { p2 };
        calib.validate()?;
        Ok(calib)
    }

    pub fn validate(&self) -> Result<(), KittiError> {
        if self.p2.iter().flatten().any(|v| !v.is_finite()) {
            return Err(KittiError::Calib("P2 has non-finite entries".into()));
        }
        if self.p2[2][2] == 0.0 {
            return Err(KittiError::Calib("P2[2][2] must be nonzero".into()));
        }
        if self.fx() <= 0.0 || self.fy() <= 0.0 {
            return Err(KittiError::Calib("focal lengths must be positive".into()));
        }
        Ok(())
    }

    pub fn fx(&self) -> f64 {
        self.p2[0][0]
    }

    pub fn fy(&self) -> f64 {
        self.p2[1][1]
    }

    pub fn cx(&self) -> f64 {
        self.p2[0][2]
    }

    pub fn cy(&self) -> f64 {
        self.p2[1][2]
    }

    pub fn values(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for (i, v) in self.p2.iter().flatten().enumerate() {
            out[i] = *v;
        }
        out
    }

    /// `P2: ` and 12 numbers with 17 significant digits.
    pub fn to_text(&self) -> String {
        let nums: Vec<String> = self.values().iter().map(|v| format!("{v:.16e}")).collect();
        format!("P2: {}\n", nums.join(" "))
    }
}

/// Reads the `P2:` line of a calibration file; other lines are ignored.
pub fn parse_calib(text: &str) -> Result<Calibration, KittiError> {
    for (i, line) in text.lines().enumerate() {
        let Some(rest) = line.trim_start().strip_prefix("P2:") else {
            continue;
        };
        let fields: Vec<&str> = rest.split_whitespace().collect();
        if fields.len() != 12 {
            return Err(KittiError::Parse {
                line: i + 1,
                column: 1,
                msg: format!("P2 needs 12 numbers, found {}", fields.len()),
            });
        }
        let mut values = [0.0; 12];
        for (k, f) in fields.iter().enumerate() {
            values[k] = f.parse::<f64>().map_err(|_| KittiError::Parse {
                line: i + 1,
                column: line.find(f).map_or(1, |b| line[..b].chars().count() + 1),
                msg: format!("not a number: {f:?}"),
            })?;
        }
        return Calibration::from_rows(&values);
    }
    Err(KittiError::Calib("no P2 line".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const KITTI: &str = "P0: 7.215377e+02 0.000000e+00 6.095593e+02 0.000000e+00 0.000000e+00 7.215377e+02 1.728540e+02 0.000000e+00 0.000000e+00 0.000000e+00 1.000000e+00 0.000000e+00
P2: 7.215377e+02 0.000000e+00 6.095593e+02 4.485728e+01 0.000000e+00 7.215377e+02 1.728540e+02 2.163791e-01 0.000000e+00 0.000000e+00 1.000000e+00 2.745884e-03
R0_rect: 9.999239e-01 9.837760e-03 -7.445048e-03 -9.869795e-03 9.999421e-01 -4.278459e-03 7.402527e-03 4.351614e-03 9.999631e-01
";

    #[test]
    fn parses_p2() {
        let c = parse_calib(KITTI).unwrap();
        assert_eq!(c.fx(), 721.5377);
        assert_eq!(c.cx(), 609.5593);
        assert_eq!(c.p2[2][3], 2.745884e-03);
    }

    #[test]
    fn identity_like() {
        let c = parse_calib("P2: 700 0 600 0 0 700 180 0 0 0 1 0").unwrap();
        assert_eq!(c.fx(), 700.0);
        assert_eq!(c, Calibration::pinhole(700.0, 700.0, 600.0, 180.0));
    }

    #[test]
    fn errors() {
        assert!(parse_calib("P2: 700 0 600 0 0 700 180 0 0 0 1").is_err());
        assert!(parse_calib("P0: 1 0 0 0 0 1 0 0 0 0 1 0").is_err());
        assert!(parse_calib("P2: 700 0 600 0 0 700 180 0 0 0 abc 0").is_err());
        assert!(parse_calib("P2: -700 0 600 0 0 700 180 0 0 0 1 0").is_err());
    }

    #[test]
    fn text_round_trip_is_bit_exact() {
        let mut c = parse_calib(KITTI).unwrap();
        c.p2[0][3] = 0.1 + 0.2;
        c.p2[1][3] = 1.0 / 3.0;
        let back = parse_calib(&c.to_text()).unwrap();
        for (a, b) in back.values().iter().zip(c.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
