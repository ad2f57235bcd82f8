use nalgebra::{Matrix3x4, Matrix4, Vector4};

use crate::error::{Error, Result};

/// Tolerance on the orthonormality of the rotation block of `T`.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

/// LiDAR → rectified camera → pixel calibration.
///
/// `lidar_to_cam` maps homogeneous LiDAR coordinates into the rectified camera
/// frame (x right, y down, z forward); `projection` maps camera coordinates to
/// homogeneous pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibContext {
    lidar_to_cam: Matrix4<f64>,
    projection: Matrix3x4<f64>,
    image_size: (u32, u32),
}

/// Pixel coordinates of one projected point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    /// Homogeneous coordinate of `M·T·p`; the camera-frame depth for the
    /// usual `[K | t]` projection matrices.
    pub depth: f64,
    pub in_image: bool,
}

impl CalibContext {
    pub fn new(
        lidar_to_cam: Matrix4<f64>,
        projection: Matrix3x4<f64>,
        image_size: (u32, u32),
    ) -> Result<Self> {
        let bottom = lidar_to_cam.row(3);
        if bottom[0] != 0.0 || bottom[1] != 0.0 || bottom[2] != 0.0 || bottom[3] != 1.0 {
            return Err(Error::InvalidValue(
                "transform bottom row must be (0, 0, 0, 1)".into(),
            ));
        }
        let rot = lidar_to_cam.fixed_view::<3, 3>(0, 0);
        let gram = rot.transpose() * rot;
        let worst = (gram - nalgebra::Matrix3::identity()).abs().max();
        if worst > ROTATION_TOLERANCE {
            return Err(Error::InvalidValue(format!(
                "rotation block not orthonormal (deviation {worst:e})"
            )));
        }
        if !projection.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidValue("projection matrix not finite".into()));
        }
        if image_size.0 == 0 || image_size.1 == 0 {
            return Err(Error::InvalidValue("image size must be positive".into()));
        }
        Ok(Self {
            lidar_to_cam,
            projection,
            image_size,
        })
    }

    /// Identity transform with `M = [K | 0]` for a pinhole camera.
    pub fn pinhole(
        lidar_to_cam: Matrix4<f64>,
        focal: f64,
        principal: (f64, f64),
        image_size: (u32, u32),
    ) -> Result<Self> {
        #[rustfmt::skip]
        let m = Matrix3x4::new(
            focal, 0.0, principal.0, 0.0,
            0.0, focal, principal.1, 0.0,
            0.0, 0.0, 1.0, 0.0,
        );
        Self::new(lidar_to_cam, m, image_size)
    }

    pub fn lidar_to_cam(&self) -> &Matrix4<f64> {
        &self.lidar_to_cam
    }

    pub fn projection(&self) -> &Matrix3x4<f64> {
        &self.projection
    }

    pub fn image_size(&self) -> (u32, u32) {
        self.image_size
    }

    pub fn cam_to_lidar(&self) -> Matrix4<f64> {
        // rigid transform: invert via transposed rotation
        let rot = self.lidar_to_cam.fixed_view::<3, 3>(0, 0).transpose();
        let t = self.lidar_to_cam.fixed_view::<3, 1>(0, 3);
        let mut inv = Matrix4::identity();
        inv.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
        inv.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-rot * t));
        inv
    }

    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let c = self.lidar_to_cam * Vector4::new(p[0], p[1], p[2], 1.0);
        [c[0], c[1], c[2]]
    }

    pub fn to_lidar(&self, p: [f64; 3]) -> [f64; 3] {
        let c = self.cam_to_lidar() * Vector4::new(p[0], p[1], p[2], 1.0);
        [c[0], c[1], c[2]]
    }

    pub fn project_point(&self, p: [f64; 3]) -> Projection {
        let cam = self.lidar_to_cam * Vector4::new(p[0], p[1], p[2], 1.0);
        let pix = self.projection * cam;
        let depth = pix[2];
        let u = pix[0] / depth;
        let v = pix[1] / depth;
        let (w, h) = (self.image_size.0 as f64, self.image_size.1 as f64);
        let in_image = depth > 0.0 && (0.0..w).contains(&u) && (0.0..h).contains(&v);
        Projection {
            u,
            v,
            depth,
            in_image,
        }
    }
}

/// Projects every point; points behind the camera come back with
/// `in_image = false`.
pub fn project_points(coords: &[[f64; 3]], calib: &CalibContext) -> Vec<Projection> {
    coords.iter().map(|&p| calib.project_point(p)).collect()
}
