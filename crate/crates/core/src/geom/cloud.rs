use crate::error::{Error, Result};

/// A LiDAR sweep: `(x, y, z, reflectance)` per point, coordinates in meters in
/// the sensor frame (x forward, y left, z up).
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 4]>,
}

impl PointCloud {
    /// Validates that the cloud is non-empty, every coordinate is finite and
    /// every reflectance lies in `[0, 1]`.
    pub fn new(points: Vec<[f64; 4]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidValue("point cloud is empty".into()));
        }
        for (i, p) in points.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidValue(format!("point {i} is not finite")));
            }
            if !(0.0..=1.0).contains(&p[3]) {
                return Err(Error::InvalidValue(format!(
                    "point {i} reflectance {} outside [0, 1]",
                    p[3]
                )));
            }
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 4]] {
        &self.points
    }

    pub fn coords(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(|p| [p[0], p[1], p[2]]).collect()
    }

    pub fn reflectance(&self) -> Vec<f64> {
        self.points.iter().map(|p| p[3]).collect()
    }

    /// New cloud from the given point indices (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Self::new(indices.iter().map(|&i| self.points[i]).collect())
    }
}
