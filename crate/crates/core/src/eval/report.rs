//! Evaluation reports and KITTI result files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{parse_labels, Difficulty, KittiLabel};
use crate::error::{Error, Result};
use crate::geom::{box_corners, project_corners_to_roi2d, CalibContext};
use crate::head::ObjectClass;

use super::{
    average_precision, class_curve, distance_buckets, validate_edges, BucketStats, Detection,
    FrameDetections, Interpolation,
};

/// Left edges of the default distance ranges: `[0, 20)`, `[20, 40)`, `[40, inf)`.
pub const DEFAULT_DISTANCE_EDGES: [f64; 3] = [0.0, 20.0, 40.0];

/// Score floor for detections counted in the distance breakdown.
pub const DEFAULT_MIN_SCORE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub interpolation: Interpolation,
    /// One IoU threshold for every class; per-class defaults when absent.
    pub iou_threshold: Option<f64>,
    pub classes: Vec<ObjectClass>,
    /// Cumulative difficulty levels to report. Empty means a single row per
    /// class over every non-ignored label.
    pub difficulties: Vec<Difficulty>,
    pub distance_edges: Vec<f64>,
    pub min_score: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            interpolation: Interpolation::R11,
            iou_threshold: None,
            classes: vec![ObjectClass::Car, ObjectClass::Pedestrian, ObjectClass::Cyclist],
            difficulties: Difficulty::LEVELS.to_vec(),
            distance_edges: DEFAULT_DISTANCE_EDGES.to_vec(),
            min_score: DEFAULT_MIN_SCORE,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        validate_edges(&self.distance_edges)?;
        if let Some(t) = self.iou_threshold {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::Config(format!("IoU threshold {t} outside (0, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&self.min_score) {
            return Err(Error::Config(format!("minimum score {} outside [0, 1]", self.min_score)));
        }
        if self.classes.is_empty() {
            return Err(Error::Config("no classes to evaluate".into()));
        }
        if self.difficulties.contains(&Difficulty::Ignored) {
            return Err(Error::Config("the ignored level cannot be evaluated".into()));
        }
        Ok(())
    }

    pub fn iou_for(&self, class: ObjectClass) -> f64 {
        self.iou_threshold.unwrap_or_else(|| class.iou_threshold())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApEntry {
    pub class: ObjectClass,
    /// `None` for the all-labels row.
    pub difficulty: Option<Difficulty>,
    pub iou_threshold: f64,
    pub gt: usize,
    pub detections: usize,
    /// Absent when there is no counted ground truth.
    pub ap: Option<f64>,
}

impl ApEntry {
    pub fn difficulty_name(&self) -> &'static str {
        self.difficulty.map_or("all", Difficulty::name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceEntry {
    pub class: ObjectClass,
    pub bucket: BucketStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub interpolation: Interpolation,
    pub frames: usize,
    pub ap: Vec<ApEntry>,
    pub distance: Vec<DistanceEntry>,
}

pub fn evaluate(frames: &[FrameDetections], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let levels: Vec<Option<Difficulty>> = if cfg.difficulties.is_empty() {
        vec![None]
    } else {
        cfg.difficulties.iter().copied().map(Some).collect()
    };
    let mut ap = Vec::new();
    let mut distance = Vec::new();
    for &class in &cfg.classes {
        let iou = cfg.iou_for(class);
        for &level in &levels {
            let (curve, gt, detections) = class_curve(frames, class, level, iou, cfg.interpolation);
            ap.push(ApEntry {
                class,
                difficulty: level,
                iou_threshold: iou,
                gt,
                detections,
                ap: (gt > 0).then(|| average_precision(&curve)),
            });
        }
        for bucket in distance_buckets(frames, class, iou, &cfg.distance_edges, cfg.min_score)? {
            distance.push(DistanceEntry { class, bucket });
        }
    }
    Ok(EvalReport {
        interpolation: cfg.interpolation,
        frames: frames.len(),
        ap,
        distance,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".to_string(), |x| format!("{x:.6}"))
}

impl EvalReport {
    pub fn ap_of(&self, class: ObjectClass, difficulty: Option<Difficulty>) -> Option<f64> {
        self.ap
            .iter()
            .find(|e| e.class == class && e.difficulty == difficulty)
            .and_then(|e| e.ap)
    }

    /// Human-readable tables.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "average precision ({}, {} frames)", self.interpolation, self.frames);
        let _ = writeln!(s, "{:<12}{:<12}{:>6}{:>8}{:>8}{:>10}", "class", "difficulty", "iou", "gt", "det", "AP");
        for e in &self.ap {
            let ap = e.ap.map_or_else(|| "-".to_string(), |a| format!("{:.4}", a));
            let _ = writeln!(
                s,
                "{:<12}{:<12}{:>6.2}{:>8}{:>8}{:>10}",
                e.class.name(),
                e.difficulty_name(),
                e.iou_threshold,
                e.gt,
                e.detections,
                ap
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "distance breakdown");
        let _ = writeln!(s, "{:<12}{:<12}{:>8}{:>8}{:>10}{:>10}", "class", "range", "gt", "det", "recall", "accuracy");
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        for d in &self.distance {
            let b = &d.bucket;
            let _ = writeln!(
                s,
                "{:<12}{:<12}{:>8}{:>8}{:>10}{:>10}",
                d.class.name(),
                b.label(),
                b.gt,
                b.tp + b.fp,
                cell(b.recall()),
                cell(b.accuracy())
            );
        }
        s
    }

    /// Machine-readable `key=value` lines in a fixed order.
    pub fn key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "interpolation={}", self.interpolation);
        let _ = writeln!(s, "frames={}", self.frames);
        for e in &self.ap {
            let k = format!("{}.{}", e.class.name().to_ascii_lowercase(), e.difficulty_name());
            let _ = writeln!(s, "ap.{k}={}", opt(e.ap));
            let _ = writeln!(s, "iou.{k}={:.6}", e.iou_threshold);
            let _ = writeln!(s, "gt.{k}={}", e.gt);
            let _ = writeln!(s, "det.{k}={}", e.detections);
        }
        for d in &self.distance {
            let k = format!("{}.{}", d.class.name().to_ascii_lowercase(), d.bucket.label());
            let _ = writeln!(s, "recall.{k}={}", opt(d.bucket.recall()));
            let _ = writeln!(s, "accuracy.{k}={}", opt(d.bucket.accuracy()));
            let _ = writeln!(s, "gt.{k}={}", d.bucket.gt);
            let _ = writeln!(s, "det.{k}={}", d.bucket.tp + d.bucket.fp);
        }
        s
    }

    /// Tables followed by the `key=value` block.
    pub fn render(&self) -> String {
        format!("{}\n{}", self.table(), self.key_values())
    }
}

/// Every `key=value` line of a rendered report.
pub fn parse_report_kv(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .filter(|(k, _)| !k.contains(' '))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

/// Writes `<dir>/<frame_id>.txt` in the KITTI result format.
pub fn write_detections(dir: impl AsRef<Path>, frame_id: &str, dets: &[Detection], calib: &CalibContext) -> Result<PathBuf> {
    let mut text = String::new();
    for d in dets {
        let bbox = project_corners_to_roi2d(&box_corners(&d.bbox), calib)
            .map(|r| [r.u_min, r.v_min, r.u_max, r.v_max])
            .unwrap_or([0.0; 4]);
        let label = KittiLabel::from_lidar_box(d.class, &d.bbox, calib, bbox, Some(d.score));
        let _ = writeln!(text, "{label}");
    }
    let path = dir.as_ref().join(format!("{frame_id}.txt"));
    fs::write(&path, text)?;
    Ok(path)
}

/// Reads a KITTI result file; every line must carry a score.
pub fn read_detections(path: impl AsRef<Path>, frame_id: &str, calib: &CalibContext) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for label in parse_labels(&fs::read_to_string(path)?)? {
        let score = label
            .score
            .ok_or_else(|| Error::MalformedFile("result line lacks a score".into()))?;
        if let Some((class, bbox)) = label.to_lidar_box(calib)? {
            out.push(Detection::new(bbox, class, score, frame_id).map_err(|e| Error::MalformedFile(e.to_string()))?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{GroundTruth, SyntheticConfig};
    use crate::geom::OrientedBox3D;

    fn frame(n: usize, detected: bool) -> FrameDetections {
        let gts: Vec<GroundTruth> = (0..n)
            .map(|i| GroundTruth {
                class: ObjectClass::Car,
                bbox: OrientedBox3D::new([10.0 + 12.0 * i as f64, 2.0, -0.9], [1.5, 1.6, 3.9], 0.4).unwrap(),
                difficulty: Difficulty::Easy,
            })
            .collect();
        let dets = if detected {
            gts.iter().map(|g| Detection::new(g.bbox, g.class, 0.9, "f").unwrap()).collect()
        } else {
            Vec::new()
        };
        FrameDetections {
            frame_id: "f".into(),
            detections: dets,
            ground_truth: gts,
        }
    }

    #[test]
    fn oracle_detections_give_full_ap() {
        let r = evaluate(&[frame(3, true)], &EvalConfig::default()).unwrap();
        assert_eq!(r.ap_of(ObjectClass::Car, Some(Difficulty::Moderate)), Some(1.0));
        assert_eq!(r.ap_of(ObjectClass::Pedestrian, Some(Difficulty::Easy)), None);
        let kv = parse_report_kv(&r.render());
        assert_eq!(kv["ap.car.easy"], "1.000000");
        assert_eq!(kv["ap.cyclist.hard"], "absent");
        assert_eq!(kv["recall.car.0-20"], "1.000000");
        assert_eq!(kv["recall.car.40-inf"], "absent");
    }

    #[test]
    fn empty_detections_give_zero_ap() {
        let r = evaluate(&[frame(2, false)], &EvalConfig::default()).unwrap();
        assert_eq!(r.ap_of(ObjectClass::Car, Some(Difficulty::Easy)), Some(0.0));
    }

    #[test]
    fn all_labels_row_when_no_levels() {
        let cfg = EvalConfig {
            difficulties: vec![],
            classes: vec![ObjectClass::Car],
            ..EvalConfig::default()
        };
        let r = evaluate(&[frame(1, true)], &cfg).unwrap();
        assert_eq!(r.ap.len(), 1);
        assert_eq!(r.ap_of(ObjectClass::Car, None), Some(1.0));
        assert!(r.key_values().contains("ap.car.all=1.000000\n"));
    }

    #[test]
    fn report_is_stable() {
        let frames = [frame(3, true), frame(2, false)];
        let a = evaluate(&frames, &EvalConfig::default()).unwrap().render();
        let b = evaluate(&frames, &EvalConfig::default()).unwrap().render();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = EvalConfig {
            iou_threshold: Some(1.5),
            ..EvalConfig::default()
        };
        assert!(evaluate(&[], &cfg).unwrap_err().is_config());
    }

    #[test]
    fn result_file_round_trip() {
        let calib = SyntheticConfig::default().calib();
        let f = frame(2, true);
        let dir = tempfile::tempdir().unwrap();
        let path = write_detections(dir.path(), "000003", &f.detections, &calib).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.lines().all(|l| l.split_whitespace().count() == 16));
        let back = read_detections(&path, "000003", &calib).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in back.iter().zip(&f.detections) {
            assert!(crate::geom::iou_3d(&a.bbox, &b.bbox) > 0.95);
            assert_eq!(a.score, b.score);
        }
    }

    #[test]
    fn result_lines_without_score_are_malformed() {
        let calib = SyntheticConfig::default().calib();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.txt");
        fs::write(&p, "Car 0.00 0 0.00 0 0 10 10 1.5 1.6 3.9 0 1 10 0.00\n").unwrap();
        assert!(matches!(read_detections(&p, "x", &calib), Err(Error::MalformedFile(_))));
    }
}
