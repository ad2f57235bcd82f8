//! Frames, calibration, projection, box representations and IoU.
//!
//! LiDAR frame: x forward, y left, z up. Rectified camera frame: x right,
//! y down, z forward. All functions here are pure.

mod boxes;
mod calib;
mod cloud;
mod iou;

pub use boxes::{
    angle_distance, box_corners, normalize_angle, project_box_to_roi2d, project_corners_to_roi2d,
    OrientedBox3D, RoI2D, RoI3D,
};
pub use calib::{project_points, CalibContext, Projection, ROTATION_TOLERANCE};
pub use cloud::PointCloud;
pub use iou::{bev_intersection_area, clip_polygon, iou_3d, iou_bev, polygon_area, AREA_FLOOR};

#[inline]
pub(crate) fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}
