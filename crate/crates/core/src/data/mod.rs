//! Dataset ingestion: KITTI files, synthetic scenes with oracle segmentation,
//! the scene archive, and cloud preprocessing.

mod archive;
mod kitti;
mod synthetic;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use archive::{read_scene, write_scene, SCENE_MAGIC, SCENE_VERSION};
pub use kitti::{
    classify_difficulty, encode_velodyne, format_calib, parse_calib, parse_labels, parse_split,
    parse_velodyne, read_calib, read_labels, read_split, read_velodyne, write_velodyne,
    KittiDataset, KittiLabel, KITTI_IMAGE_SIZE,
};
pub use synthetic::{
    gen_synthetic_dataset, gen_synthetic_scene, oracle_segmentation, SyntheticConfig,
    SyntheticScene,
};

use crate::fusionkp::SegScores;
use crate::geom::{project_points, CalibContext, OrientedBox3D, PointCloud};
use crate::head::ObjectClass;

/// Difficulty levels, easiest first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
    Ignored,
}

impl Difficulty {
    pub const LEVELS: [Difficulty; 3] = [Self::Easy, Self::Moderate, Self::Hard];

    pub fn name(self) -> &'static str {
        match self {
            Self::Easy => "easy",
            Self::Moderate => "moderate",
            Self::Hard => "hard",
            Self::Ignored => "ignored",
        }
    }
}

/// A labelled object in the LiDAR frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub class: ObjectClass,
    pub bbox: OrientedBox3D,
    pub difficulty: Difficulty,
}

/// Everything the detector consumes for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub id: String,
    pub cloud: PointCloud,
    pub calib: CalibContext,
    pub objects: Vec<GroundTruth>,
    pub segmentation: Option<SegScores>,
}

/// `n` indices into a set of `len` items: a seeded shuffle truncated to `n`,
/// or every item followed by draws with replacement when `len < n`.
pub fn subsample_indices<R: Rng + ?Sized>(len: usize, n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(rng);
    if len >= n {
        idx.truncate(n);
    } else if len > 0 {
        while idx.len() < n {
            idx.push(rng.gen_range(0..len));
        }
    }
    idx
}

/// Indices of the points that project into the image.
pub fn frustum_indices(cloud: &PointCloud, calib: &CalibContext) -> Vec<usize> {
    project_points(&cloud.coords(), calib)
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.in_image.then_some(i))
        .collect()
}

/// Margin, in meters, added to boxes when labelling points as foreground.
pub const FOREGROUND_MARGIN: f64 = 0.05;

/// Per-point class labels from ground-truth boxes (0 is background).
pub fn point_labels(coords: &[[f64; 3]], objects: &[GroundTruth], classes: &[ObjectClass]) -> Vec<usize> {
    coords
        .iter()
        .map(|p| {
            objects
                .iter()
                .find(|g| g.bbox.contains(*p, FOREGROUND_MARGIN))
                .and_then(|g| classes.iter().position(|&c| c == g.class))
                .map_or(0, |k| k + 1)
        })
        .collect()
}
