use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector3};

use crate::error::{Error, Result};
use crate::geom::{normalize_angle, CalibContext, OrientedBox3D, PointCloud};
use crate::head::ObjectClass;

use super::{Difficulty, Frame, GroundTruth};

/// KITTI color camera resolution, used when a calibration file carries none.
pub const KITTI_IMAGE_SIZE: (u32, u32) = (1242, 375);

/// Decodes little-endian f32 `(x, y, z, r)` quadruples.
pub fn parse_velodyne(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.is_empty() || bytes.len() % 16 != 0 {
        return Err(Error::MalformedFile(format!(
            "velodyne payload of {} bytes is not a positive multiple of 16",
            bytes.len()
        )));
    }
    let points = bytes
        .chunks_exact(16)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes([c[i], c[i + 1], c[i + 2], c[i + 3]]) as f64;
            [f(0), f(4), f(8), f(12)]
        })
        .collect();
    PointCloud::new(points).map_err(|e| Error::MalformedFile(e.to_string()))
}

pub fn encode_velodyne(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for p in cloud.points() {
        for v in p {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn read_velodyne(path: impl AsRef<Path>) -> Result<PointCloud> {
    parse_velodyne(&fs::read(path)?)
}

pub fn write_velodyne(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    fs::write(path, encode_velodyne(cloud))?;
    Ok(())
}

fn calib_values<'a>(text: &'a str, key: &str, count: usize) -> Result<Vec<f64>> {
    let line = text
        .lines()
        .find_map(|l| {
            let (k, rest) = l.split_once(':')?;
            (k.trim() == key).then_some(rest)
        })
        .ok_or_else(|| Error::MissingKey(key.to_string()))?;
    let values: Vec<f64> = line
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::MalformedFile(format!("{key}: {e}")))?;
    if values.len() != count || values.iter().any(|v| !v.is_finite()) {
        return Err(Error::MalformedFile(format!(
            "{key} needs {count} finite values, got {}",
            values.len()
        )));
    }
    Ok(values)
}

/// `M = P2`, `T = R0_rect · Tr_velo_to_cam`, both expanded to 4×4.
pub fn parse_calib(text: &str, image_size: (u32, u32)) -> Result<CalibContext> {
    let p2 = calib_values(text, "P2", 12)?;
    let r0 = calib_values(text, "R0_rect", 9)?;
    let tr = calib_values(text, "Tr_velo_to_cam", 12)?;
    let m = Matrix3x4::from_row_slice(&p2);
    let mut r = Matrix4::identity();
    r.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::from_row_slice(&r0));
    let mut t = Matrix4::identity();
    t.fixed_view_mut::<3, 4>(0, 0).copy_from(&Matrix3x4::from_row_slice(&tr));
    CalibContext::new(r * t, m, image_size).map_err(|e| Error::MalformedFile(e.to_string()))
}

pub fn read_calib(path: impl AsRef<Path>) -> Result<CalibContext> {
    parse_calib(&fs::read_to_string(path)?, KITTI_IMAGE_SIZE)
}

/// Writes `M` as `P2` and `T` as `Tr_velo_to_cam` with an identity `R0_rect`.
pub fn format_calib(calib: &CalibContext) -> String {
    let row = |vals: Vec<f64>| vals.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" ");
    let m = calib.projection();
    let t = calib.lidar_to_cam();
    let p2: Vec<f64> = (0..3).flat_map(|r| (0..4).map(move |c| m[(r, c)])).collect();
    let tr: Vec<f64> = (0..3).flat_map(|r| (0..4).map(move |c| t[(r, c)])).collect();
    let p0 = row(p2.clone());
    format!(
        "P0: {p0}\nP1: {p0}\nP2: {}\nP3: {p0}\nR0_rect: {}\nTr_velo_to_cam: {}\nTr_imu_to_velo: {}\n",
        row(p2),
        row(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]),
        row(tr),
        row(vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
    )
}

/// One object line of a KITTI label or result file.
#[derive(Clone, Debug, PartialEq)]
pub struct KittiLabel {
    pub class: String,
    pub truncation: f64,
    pub occlusion: u8,
    pub alpha: f64,
    /// `[left, top, right, bottom]` pixels.
    pub bbox: [f64; 4],
    /// `[h, w, l]` meters.
    pub dimensions: [f64; 3],
    /// Bottom center in the camera frame, meters.
    pub location: [f64; 3],
    pub rotation_y: f64,
    /// Present in result files only.
    pub score: Option<f64>,
}

impl KittiLabel {
    pub fn parse(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 15 && fields.len() != 16 {
            return Err(Error::MalformedFile(format!(
                "label line has {} fields, expected 15 (or 16 with a score)",
                fields.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            let v: f64 = fields[i]
                .parse()
                .map_err(|_| Error::MalformedFile(format!("field {i} {:?} is not a number", fields[i])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::MalformedFile(format!("field {i} is not finite")))
            }
        };
        let occ = num(2)?;
        if occ.fract() != 0.0 || !(-1.0..=3.0).contains(&occ) {
            return Err(Error::MalformedFile(format!("occlusion {occ} is not a level")));
        }
        Ok(Self {
            class: fields[0].to_string(),
            truncation: num(1)?,
            // DontCare rows carry -1
            occlusion: occ.max(0.0) as u8,
            alpha: num(3)?,
            bbox: [num(4)?, num(5)?, num(6)?, num(7)?],
            dimensions: [num(8)?, num(9)?, num(10)?],
            location: [num(11)?, num(12)?, num(13)?],
            rotation_y: num(14)?,
            score: if fields.len() == 16 { Some(num(15)?) } else { None },
        })
    }

    pub fn bbox_height(&self) -> f64 {
        self.bbox[3] - self.bbox[1]
    }

    /// The box in the LiDAR frame, or `None` for classes outside the
    /// detector's vocabulary.
    pub fn to_lidar_box(&self, calib: &CalibContext) -> Result<Option<(ObjectClass, OrientedBox3D)>> {
        let Ok(class) = self.class.parse::<ObjectClass>() else {
            return Ok(None);
        };
        let [h, w, l] = self.dimensions;
        let [x, y, z] = self.location;
        // camera y points down: the box center is half a height above the label point
        let center = calib.to_lidar([x, y - h / 2.0, z]);
        let inv = calib.cam_to_lidar();
        let rot = inv.fixed_view::<3, 3>(0, 0);
        let heading = rot * Vector3::new(self.rotation_y.cos(), 0.0, -self.rotation_y.sin());
        let yaw = heading[1].atan2(heading[0]);
        Ok(Some((class, OrientedBox3D::new(center, [h, w, l], yaw)?)))
    }

    /// Result-file label for a LiDAR-frame detection. `bbox` is the image
    /// rectangle of the box.
    pub fn from_lidar_box(
        class: ObjectClass,
        b: &OrientedBox3D,
        calib: &CalibContext,
        bbox: [f64; 4],
        score: Option<f64>,
    ) -> Self {
        let c = calib.to_camera(b.center);
        let t = calib.lidar_to_cam();
        let rot = t.fixed_view::<3, 3>(0, 0);
        let heading = rot * Vector3::new(b.yaw.cos(), b.yaw.sin(), 0.0);
        let ry = normalize_angle((-heading[2]).atan2(heading[0]));
        let alpha = normalize_angle(ry - c[0].atan2(c[2]));
        Self {
            class: class.name().to_string(),
            truncation: 0.0,
            occlusion: 0,
            alpha,
            bbox,
            dimensions: b.size,
            location: [c[0], c[1] + b.height() / 2.0, c[2]],
            rotation_y: ry,
            score,
        }
    }
}

impl fmt::Display for KittiLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:.2} {} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2}",
            self.class,
            self.truncation,
            self.occlusion,
            self.alpha,
            self.bbox[0],
            self.bbox[1],
            self.bbox[2],
            self.bbox[3],
            self.dimensions[0],
            self.dimensions[1],
            self.dimensions[2],
            self.location[0],
            self.location[1],
            self.location[2],
            self.rotation_y
        )?;
        if let Some(s) = self.score {
            write!(f, " {s:.4}")?;
        }
        Ok(())
    }
}

pub fn parse_labels(text: &str) -> Result<Vec<KittiLabel>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(KittiLabel::parse)
        .collect()
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<KittiLabel>> {
    parse_labels(&fs::read_to_string(path)?)
}

/// Table of minimum box height (px), maximum occlusion and maximum truncation.
const LEVELS: [(Difficulty, f64, u8, f64); 3] = [
    (Difficulty::Easy, 40.0, 0, 0.15),
    (Difficulty::Moderate, 25.0, 1, 0.30),
    (Difficulty::Hard, 25.0, 2, 0.50),
];

pub fn classify_difficulty(label: &KittiLabel) -> Difficulty {
    let height = label.bbox_height();
    LEVELS
        .iter()
        .find(|&&(_, min_h, max_occ, max_trunc)| {
            height >= min_h && label.occlusion <= max_occ && label.truncation <= max_trunc
        })
        .map_or(Difficulty::Ignored, |&(d, ..)| d)
}

/// One frame id per non-empty line.
pub fn parse_split(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn read_split(path: impl AsRef<Path>) -> Result<Vec<String>> {
    Ok(parse_split(&fs::read_to_string(path)?))
}

/// A KITTI object-detection tree: `velodyne/`, `calib/`, `label_2/` and
/// `ImageSets/<split>.txt` under one root, with optional precomputed
/// segmentation in `segmentation/`.
#[derive(Clone, Debug)]
pub struct KittiDataset {
    pub root: PathBuf,
}

impl KittiDataset {
    pub fn new(root: impl AsRef<Path>) -> Self {
        Self {
            root: root.as_ref().to_path_buf(),
        }
    }

    pub fn split(&self, name: &str) -> Result<Vec<String>> {
        read_split(self.root.join("ImageSets").join(format!("{name}.txt")))
    }

    pub fn load(&self, id: &str) -> Result<Frame> {
        let cloud = read_velodyne(self.root.join("velodyne").join(format!("{id}.bin")))?;
        let calib = read_calib(self.root.join("calib").join(format!("{id}.txt")))?;
        let label_path = self.root.join("label_2").join(format!("{id}.txt"));
        let labels = if label_path.exists() {
            read_labels(label_path)?
        } else {
            Vec::new()
        };
        let mut objects = Vec::new();
        for l in &labels {
            if let Some((class, bbox)) = l.to_lidar_box(&calib)? {
                objects.push(GroundTruth {
                    class,
                    bbox,
                    difficulty: classify_difficulty(l),
                });
            }
        }
        let seg_path = self.root.join("segmentation").join(format!("{id}.rfsg"));
        let segmentation = if seg_path.exists() {
            let seg = crate::fusionkp::read_seg_scores(std::io::BufReader::new(fs::File::open(seg_path)?))?;
            Some(seg)
        } else {
            None
        };
        Ok(Frame {
            id: id.to_string(),
            cloud,
            calib,
            objects,
            segmentation,
        })
    }
}
