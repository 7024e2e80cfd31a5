//! KITTI label, calibration and point-list formats, plus the camera geometry
//! that goes with them.

mod calib;
mod geometry;
mod label;

pub use calib::{parse_calib, Calibration};
pub use geometry::{
    alpha_from_ry, backproject, flip_horizontal, normalize_angle, preprocess, project_point, project_points,
    read_points, ry_from_alpha, Box3D, PixelTransform,
};
pub use label::{parse_labels, serialize_labels, KittiLabel, NumberFormat};

#[derive(Debug, thiserror::Error)]
pub enum KittiError {
    #[error("line {line}, column {column}: {msg}")]
    Parse { line: usize, column: usize, msg: String },
    #[error("calibration: {0}")]
    Calib(String),
    #[error("geometry: {0}")]
    Geometry(String),
}
