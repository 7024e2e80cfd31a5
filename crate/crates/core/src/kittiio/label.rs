use std::fmt::Write as _;

use super::KittiError;
use super::geometry::Box3D;

/// One object row of a KITTI label or result file.
#[derive(Clone, Debug, PartialEq)]
pub struct KittiLabel {
    pub kind: String,
    pub truncated: f64,
    pub occluded: i32,
    pub alpha: f64,
    /// `x1, y1, x2, y2` in pixels.
    pub bbox: [f64; 4],
    /// `h, w, l` in meters.
    pub dims: [f64; 3],
    /// Bottom-center `X, Y, Z` in camera coordinates.
    pub location: [f64; 3],
    pub rotation_y: f64,
    pub score: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NumberFormat {
    /// Two decimals, as in the published label files.
    Compat,
    /// 17 significant digits; parses back to the same bits.
    RoundTrip,
}

impl KittiLabel {
    pub fn is_dont_care(&self) -> bool {
        self.kind == "DontCare"
    }

    /// Geometric-center box.
    pub fn to_box3d(&self) -> Box3D {
        let [h, w, l] = self.dims;
        Box3D {
            center: [self.location[0], self.location[1] - h / 2.0, self.location[2]],
            dims: [h, w, l],
            ry: self.rotation_y,
        }
    }

    pub fn to_line(&self, format: NumberFormat) -> String {
        let num = |v: f64| match format {
            NumberFormat::Compat => format!("{v:.2}"),
            NumberFormat::RoundTrip => format!("{v:.16e}"),
        };
        let mut line = format!("{} {} {} {}", self.kind, num(self.truncated), self.occluded, num(self.alpha));
        for v in self.bbox.iter().chain(&self.dims).chain(&self.location) {
            let _ = write!(line, " {}", num(*v));
        }
        let _ = write!(line, " {}", num(self.rotation_y));
        if let Some(s) = self.score {
            let _ = write!(line, " {}", num(s));
        }
        line
    }
}

pub fn serialize_labels(labels: &[KittiLabel], format: NumberFormat) -> String {
    labels.iter().map(|l| l.to_line(format) + "\n").collect()
}

/// Strict parser: 15 fields per object, 16 with a score. Blank lines are
/// skipped. Errors carry the 1-based line and character column.
pub fn parse_labels(text: &str) -> Result<Vec<KittiLabel>, KittiError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(line, i + 1)?);
    }
    Ok(out)
}

fn tokens(line: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in line.char_indices() {
        match (ch.is_whitespace(), start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                out.push((s, &line[s..i]));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, &line[s..]));
    }
    out
}

fn parse_line(line: &str, line_no: usize) -> Result<KittiLabel, KittiError> {
    let toks = tokens(line);
    let column = |byte: usize| line[..byte].chars().count() + 1;
    let fail = |byte: usize, msg: String| KittiError::Parse {
        line: line_no,
        column: column(byte),
        msg,
    };
    if toks.len() != 15 && toks.len() != 16 {
        let at = toks.last().map_or(0, |t| t.0);
        return Err(fail(at, format!("expected 15 or 16 fields, found {}", toks.len())));
    }
    let num = |idx: usize| -> Result<f64, KittiError> {
        let (at, s) = toks[idx];
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(fail(at, format!("field {} is not a finite number: {s:?}", idx + 1))),
        }
    };
    let (kind_at, kind) = toks[0];
    if kind.parse::<f64>().is_ok() {
        return Err(fail(kind_at, "object type must be a name".into()));
    }
    let truncated = num(1)?;
    let occluded = {
        let (at, s) = toks[2];
        match s.parse::<i32>() {
            Ok(v) if (-1..=3).contains(&v) => v,
            _ => return Err(fail(at, format!("occlusion must be an integer in -1..=3, got {s:?}"))),
        }
    };
    let alpha = num(3)?;
    let bbox = [num(4)?, num(5)?, num(6)?, num(7)?];
    if bbox[0] > bbox[2] || bbox[1] > bbox[3] {
        return Err(fail(toks[4].0, "bounding box corners are inverted".into()));
    }
    let dims = [num(8)?, num(9)?, num(10)?];
    let location = [num(11)?, num(12)?, num(13)?];
    let rotation_y = num(14)?;
    let score = if toks.len() == 16 { Some(num(15)?) } else { None };
    Ok(KittiLabel {
        kind: kind.to_string(),
        truncated,
        occluded,
        alpha,
        bbox,
        dims,
        location,
        rotation_y,
        score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = "\
Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59
Pedestrian 0.00 2 0.21 423.17 173.67 433.17 224.03 1.60 0.48 0.80 -6.12 1.64 29.39 0.00
DontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10
";

    #[test]
    fn parses_fixture() {
        let labels = parse_labels(FIXTURE).unwrap();
        assert_eq!(labels.len(), 3);
        assert_eq!(labels[0].kind, "Car");
        assert_eq!(labels[0].dims, [1.65, 1.67, 3.64]);
        assert_eq!(labels[1].occluded, 2);
        assert!(labels[2].is_dont_care());
        assert!(labels.iter().all(|l| l.score.is_none()));
    }

    #[test]
    fn empty_input() {
        assert!(parse_labels("").unwrap().is_empty());
        assert!(parse_labels("\n  \n").unwrap().is_empty());
    }

    #[test]
    fn canonical_lines_round_trip() {
        let canonical: String = FIXTURE.lines().take(2).map(|l| format!("{l}\n")).collect();
        let labels = parse_labels(&canonical).unwrap();
        assert_eq!(serialize_labels(&labels, NumberFormat::Compat), canonical);
        let scored = "Car -1.00 -1 0.50 10.00 20.00 30.00 40.00 1.50 1.60 3.90 1.00 1.50 20.00 0.55 0.93\n";
        assert_eq!(serialize_labels(&parse_labels(scored).unwrap(), NumberFormat::Compat), scored);
    }

    #[test]
    fn round_trip_format_is_exact() {
        let mut l = parse_labels(FIXTURE).unwrap().remove(0);
        l.alpha = 0.1 + 0.2;
        l.score = Some(1.0 / 3.0);
        let back = parse_labels(&l.to_line(NumberFormat::RoundTrip)).unwrap().remove(0);
        assert_eq!(back, l);
    }

    #[test]
    fn short_line_reports_location() {
        let line = "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70";
        match parse_labels(line) {
            Err(KittiError::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_number_column() {
        let text = "Car 0.00 0 -1.58 587.01 17x.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59";
        match parse_labels(&format!("\n{text}")) {
            Err(KittiError::Parse { line, column, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(column, text.find("17x").unwrap() + 1);
            }
            other => panic!("{other:?}"),
        }
        assert!(parse_labels("Car 0 7 0 0 0 1 1 1 1 1 0 0 1 0").is_err());
        assert!(parse_labels("Car 0 0 0 5 0 1 1 1 1 1 0 0 1 0").is_err());
        assert!(parse_labels("Car 0 0 NaN 0 0 1 1 1 1 1 0 0 1 0").is_err());
    }
}
