use std::f64::consts::{PI, TAU};

use super::calib::CalibContext;
use crate::error::{Error, Result};

/// Wraps an angle into `[-π, π)`.
pub fn normalize_angle(theta: f64) -> f64 {
    let mut a = theta - TAU * ((theta + PI) / TAU).floor();
    // rounding can land exactly on the open end
    if a >= PI {
        a -= TAU;
    }
    if a < -PI {
        a = -PI;
    }
    a
}

/// Smallest absolute angular difference, in `[0, π]`.
pub fn angle_distance(a: f64, b: f64) -> f64 {
    normalize_angle(a - b).abs()
}

/// Yaw-oriented 3D box. `size` is `(h, w, l)`: `l` runs along the heading,
/// `w` across it and `h` vertically.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientedBox3D {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
}

impl OrientedBox3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64) -> Result<Self> {
        if !center.iter().chain(&size).all(|v| v.is_finite()) || !yaw.is_finite() {
            return Err(Error::InvalidValue("box parameters must be finite".into()));
        }
        if size.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidValue(format!("box size {size:?} must be positive")));
        }
        Ok(Self {
            center,
            size,
            yaw: normalize_angle(yaw),
        })
    }

    pub fn height(&self) -> f64 {
        self.size[0]
    }
    pub fn width(&self) -> f64 {
        self.size[1]
    }
    pub fn length(&self) -> f64 {
        self.size[2]
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    /// Bird's-eye-view footprint, counter-clockwise, in the corner order of
    /// [`box_corners`].
    pub fn bev_polygon(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.length() / 2.0, self.width() / 2.0);
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[x, y]| [self.center[0] + c * x - s * y, self.center[1] + s * x + c * y])
    }

    /// Vertical extent `(bottom, top)`.
    pub fn z_range(&self) -> (f64, f64) {
        let hh = self.height() / 2.0;
        (self.center[2] - hh, self.center[2] + hh)
    }

    /// Whether `p` lies inside the box grown by `margin` on every side.
    pub fn contains(&self, p: [f64; 3], margin: f64) -> bool {
        let (dx, dy, dz) = (
            p[0] - self.center[0],
            p[1] - self.center[1],
            p[2] - self.center[2],
        );
        let (s, c) = self.yaw.sin_cos();
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        lx.abs() <= self.length() / 2.0 + margin
            && ly.abs() <= self.width() / 2.0 + margin
            && dz.abs() <= self.height() / 2.0 + margin
    }

    pub fn bev_distance(&self) -> f64 {
        self.center[0].hypot(self.center[1])
    }
}

/// The 8 corners of `b`.
///
/// Corners 0–3 form the bottom face and 4–7 the top face, each ordered
/// counter-clockwise seen from above starting at the front-left corner:
/// `(+l/2, +w/2)`, `(−l/2, +w/2)`, `(−l/2, −w/2)`, `(+l/2, −w/2)` in the box
/// frame. Corner `i + 4` sits directly above corner `i`.
pub fn box_corners(b: &OrientedBox3D) -> [[f64; 3]; 8] {
    let bev = b.bev_polygon();
    let (z0, z1) = b.z_range();
    let mut out = [[0.0; 3]; 8];
    for i in 0..4 {
        out[i] = [bev[i][0], bev[i][1], z0];
        out[i + 4] = [bev[i][0], bev[i][1], z1];
    }
    out
}

/// Axis-aligned 3D region around a voted center. `extent` is `(h, w, l)`
/// along `(z, y, x)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoI3D {
    pub center: [f64; 3],
    pub extent: [f64; 3],
}

impl RoI3D {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (p[0] - self.center[0]).abs() <= self.extent[2] / 2.0
            && (p[1] - self.center[1]).abs() <= self.extent[1] / 2.0
            && (p[2] - self.center[2]).abs() <= self.extent[0] / 2.0
    }

    pub fn as_box(&self) -> OrientedBox3D {
        OrientedBox3D {
            center: self.center,
            size: self.extent,
            yaw: 0.0,
        }
    }

    pub fn corners(&self) -> [[f64; 3]; 8] {
        box_corners(&self.as_box())
    }
}

/// Image-plane rectangle in pixels, clipped to `[0, W] × [0, H]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoI2D {
    pub u_min: f64,
    pub v_min: f64,
    pub u_max: f64,
    pub v_max: f64,
}

impl RoI2D {
    pub fn width(&self) -> f64 {
        self.u_max - self.u_min
    }
    pub fn height(&self) -> f64 {
        self.v_max - self.v_min
    }
}

/// Pixel bounding rectangle of the corners that lie in front of the camera,
/// clipped to the image.
pub fn project_corners_to_roi2d(corners: &[[f64; 3]], calib: &CalibContext) -> Result<RoI2D> {
    let (w, h) = calib.image_size();
    let (w, h) = (w as f64, h as f64);
    let mut rect: Option<RoI2D> = None;
    for &c in corners {
        let p = calib.project_point(c);
        if p.depth <= 0.0 {
            continue;
        }
        let r = rect.get_or_insert(RoI2D {
            u_min: p.u,
            v_min: p.v,
            u_max: p.u,
            v_max: p.v,
        });
        r.u_min = r.u_min.min(p.u);
        r.v_min = r.v_min.min(p.v);
        r.u_max = r.u_max.max(p.u);
        r.v_max = r.v_max.max(p.v);
    }
    let r = rect.ok_or(Error::NoVisibleCorners)?;
    Ok(RoI2D {
        u_min: r.u_min.clamp(0.0, w),
        v_min: r.v_min.clamp(0.0, h),
        u_max: r.u_max.clamp(0.0, w),
        v_max: r.v_max.clamp(0.0, h),
    })
}

pub fn project_box_to_roi2d(roi: &RoI3D, calib: &CalibContext) -> Result<RoI2D> {
    project_corners_to_roi2d(&roi.corners(), calib)
}
