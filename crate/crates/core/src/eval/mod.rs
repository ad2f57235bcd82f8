//! Detection evaluation: greedy matching, precision/recall curves, average
//! precision, and distance-bucketed recall/accuracy.

mod report;

use std::cmp::Ordering;

pub use report::{
    evaluate, parse_report_kv, read_detections, write_detections, ApEntry, DistanceEntry,
    EvalConfig, EvalReport, DEFAULT_DISTANCE_EDGES, DEFAULT_MIN_SCORE,
};

use crate::data::{Difficulty, GroundTruth};
use crate::error::{Error, Result};
use crate::geom::{iou_3d, OrientedBox3D};
use crate::head::ObjectClass;

/// A scored detection in the LiDAR frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: OrientedBox3D,
    pub class: ObjectClass,
    pub score: f64,
    pub frame_id: String,
}

impl Detection {
    pub fn new(bbox: OrientedBox3D, class: ObjectClass, score: f64, frame_id: impl Into<String>) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidValue(format!("detection score {score} outside [0, 1]")));
        }
        Ok(Self {
            bbox,
            class,
            score,
            frame_id: frame_id.into(),
        })
    }
}

/// Ranking order: score descending, then frame id, then box parameters, so
/// equal-scored detections rank the same whatever their input order.
pub fn rank_order(a: &Detection, b: &Detection) -> Ordering {
    let key = |d: &Detection| {
        let b = &d.bbox;
        [b.center[0], b.center[1], b.center[2], b.size[0], b.size[1], b.size[2], b.yaw]
    };
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.frame_id.cmp(&b.frame_id))
        .then_with(|| {
            key(a)
                .iter()
                .zip(key(b))
                .map(|(x, y)| x.total_cmp(&y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

pub fn sort_detections(dets: &mut [Detection]) {
    dets.sort_by(rank_order);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchOutcome {
    /// Matched the ground truth at this index.
    TruePositive(usize),
    FalsePositive,
    /// Matched only an ignored ground truth; counts neither way.
    Ignored,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    pub outcomes: Vec<MatchOutcome>,
    /// Per ground truth; always false for ignored ones.
    pub gt_matched: Vec<bool>,
}

impl Matching {
    pub fn true_positives(&self) -> usize {
        self.outcomes
            .iter()
            .filter(|o| matches!(o, MatchOutcome::TruePositive(_)))
            .count()
    }

    pub fn false_positives(&self) -> usize {
        self.outcomes.iter().filter(|o| **o == MatchOutcome::FalsePositive).count()
    }
}

/// Greedy matching of ranked detections. Each detection takes the
/// highest-IoU unused ground truth of its class with IoU at or above the
/// threshold; ignored ground truths are tried only when no counted one fits.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> Matching {
    let mut used = vec![false; gts.len()];
    let mut outcomes = Vec::with_capacity(dets.len());
    for d in dets {
        let mut best: Option<(usize, f64)> = None;
        let mut best_ignored: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if used[j] || g.class != d.class {
                continue;
            }
            let iou = iou_3d(&d.bbox, &g.bbox);
            if iou < iou_threshold {
                continue;
            }
            let slot = if g.difficulty == Difficulty::Ignored {
                &mut best_ignored
            } else {
                &mut best
            };
            if slot.map_or(true, |(_, b)| iou > b) {
                *slot = Some((j, iou));
            }
        }
        outcomes.push(match (best, best_ignored) {
            (Some((j, _)), _) => {
                used[j] = true;
                MatchOutcome::TruePositive(j)
            }
            (None, Some((j, _))) => {
                used[j] = true;
                MatchOutcome::Ignored
            }
            (None, None) => MatchOutcome::FalsePositive,
        });
    }
    let gt_matched = gts
        .iter()
        .zip(used)
        .map(|(g, u)| u && g.difficulty != Difficulty::Ignored)
        .collect();
    Matching { outcomes, gt_matched }
}

/// Recall sampling used when integrating a precision/recall curve.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    /// 11 points {0, 0.1, ..., 1}.
    #[default]
    R11,
    /// 40 points {1/40, ..., 1}.
    R40,
}

impl Interpolation {
    pub fn recall_points(self) -> Vec<f64> {
        match self {
            Self::R11 => (0..=10).map(|i| i as f64 / 10.0).collect(),
            Self::R40 => (1..=40).map(|i| i as f64 / 40.0).collect(),
        }
    }
}

impl std::fmt::Display for Interpolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::R11 => "r11",
            Self::R40 => "r40",
        })
    }
}

impl std::str::FromStr for Interpolation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "r11" => Ok(Self::R11),
            "r40" => Ok(Self::R40),
            _ => Err(Error::Config(format!("unknown interpolation {s:?}"))),
        }
    }
}

/// Ordered (recall, precision) samples.
#[derive(Clone, Debug, PartialEq)]
pub struct PRCurve {
    pub points: Vec<(f64, f64)>,
    pub mode: Interpolation,
}

impl PRCurve {
    /// Curve from detections ranked by score, flagged true for true positives,
    /// against `n_gt` counted ground truths. A curve with at least one true
    /// positive starts at (0, 1).
    pub fn from_ranked(tp: &[bool], n_gt: usize, mode: Interpolation) -> Self {
        let mut points = Vec::with_capacity(tp.len() + 1);
        if n_gt > 0 && tp.iter().any(|&t| t) {
            points.push((0.0, 1.0));
        }
        let mut hits = 0usize;
        for (rank, &t) in tp.iter().enumerate() {
            hits += t as usize;
            let recall = if n_gt == 0 { 0.0 } else { hits as f64 / n_gt as f64 };
            points.push((recall, hits as f64 / (rank + 1) as f64));
        }
        Self { points, mode }
    }
}

/// Mean over the recall points of the best precision at or beyond each.
pub fn average_precision(curve: &PRCurve) -> f64 {
    let rs = curve.mode.recall_points();
    let total: f64 = rs
        .iter()
        .map(|&r| {
            curve
                .points
                .iter()
                .filter(|(rec, _)| *rec >= r - 1e-12)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum();
    total / rs.len() as f64
}

/// Detections and labels for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameDetections {
    pub frame_id: String,
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GroundTruth>,
}

/// Ground truth seen at a cumulative difficulty level: harder objects become
/// ignored. `None` keeps every label as given.
pub fn at_difficulty(gts: &[GroundTruth], level: Option<Difficulty>) -> Vec<GroundTruth> {
    gts.iter()
        .map(|g| {
            let mut g = *g;
            if level.is_some_and(|l| g.difficulty > l) {
                g.difficulty = Difficulty::Ignored;
            }
            g
        })
        .collect()
}

/// Precision/recall curve for one class over many frames, plus the counted
/// ground truth and the non-ignored detection count.
pub fn class_curve(
    frames: &[FrameDetections],
    class: ObjectClass,
    level: Option<Difficulty>,
    iou_threshold: f64,
    mode: Interpolation,
) -> (PRCurve, usize, usize) {
    let mut ranked: Vec<(Detection, bool)> = Vec::new();
    let mut n_gt = 0;
    for f in frames {
        let gts: Vec<GroundTruth> = at_difficulty(&f.ground_truth, level)
            .into_iter()
            .filter(|g| g.class == class)
            .collect();
        n_gt += gts.iter().filter(|g| g.difficulty != Difficulty::Ignored).count();
        let mut dets: Vec<Detection> = f.detections.iter().filter(|d| d.class == class).cloned().collect();
        sort_detections(&mut dets);
        let m = match_detections(&dets, &gts, iou_threshold);
        for (d, o) in dets.into_iter().zip(m.outcomes) {
            match o {
                MatchOutcome::TruePositive(_) => ranked.push((d, true)),
                MatchOutcome::FalsePositive => ranked.push((d, false)),
                MatchOutcome::Ignored => {}
            }
        }
    }
    ranked.sort_by(|a, b| rank_order(&a.0, &b.0));
    let tp: Vec<bool> = ranked.iter().map(|r| r.1).collect();
    (PRCurve::from_ranked(&tp, n_gt, mode), n_gt, tp.len())
}

/// Counts for one distance range `[lo, hi)`; `hi = None` is unbounded.
#[derive(Clone, Debug, PartialEq)]
pub struct BucketStats {
    pub lo: f64,
    pub hi: Option<f64>,
    pub gt: usize,
    pub gt_matched: usize,
    pub tp: usize,
    pub fp: usize,
}

impl BucketStats {
    /// Matched over counted ground truth; absent for an empty bucket.
    pub fn recall(&self) -> Option<f64> {
        (self.gt > 0).then(|| self.gt_matched as f64 / self.gt as f64)
    }

    /// True over all counted detections; absent when there are none.
    pub fn accuracy(&self) -> Option<f64> {
        let n = self.tp + self.fp;
        (n > 0).then(|| self.tp as f64 / n as f64)
    }

    pub fn label(&self) -> String {
        match self.hi {
            Some(hi) => format!("{}-{}", self.lo, hi),
            None => format!("{}-inf", self.lo),
        }
    }

    fn index(edges: &[f64], d: f64) -> usize {
        edges.iter().rposition(|&e| d >= e).unwrap_or(0)
    }
}

/// Checks that `edges` start at 0 and strictly increase, so the ranges
/// `[e0, e1), ..., [e_last, inf)` partition the half line.
pub fn validate_edges(edges: &[f64]) -> Result<()> {
    if edges.first() != Some(&0.0) {
        return Err(Error::Config("distance ranges must start at 0".into()));
    }
    if edges.windows(2).any(|w| !(w[1] > w[0]) || !w[1].is_finite()) {
        return Err(Error::Config("distance range edges must strictly increase".into()));
    }
    Ok(())
}

/// Recall and accuracy per BEV-distance range. Ground truth falls in the
/// range of its own center, detections in the range of theirs; only
/// detections scoring at least `min_score` count.
pub fn distance_buckets(
    frames: &[FrameDetections],
    class: ObjectClass,
    iou_threshold: f64,
    edges: &[f64],
    min_score: f64,
) -> Result<Vec<BucketStats>> {
    validate_edges(edges)?;
    let mut out: Vec<BucketStats> = edges
        .iter()
        .enumerate()
        .map(|(i, &lo)| BucketStats {
            lo,
            hi: edges.get(i + 1).copied(),
            gt: 0,
            gt_matched: 0,
            tp: 0,
            fp: 0,
        })
        .collect();
    for f in frames {
        let gts: Vec<GroundTruth> = f.ground_truth.iter().filter(|g| g.class == class).copied().collect();
        let mut dets: Vec<Detection> = f
            .detections
            .iter()
            .filter(|d| d.class == class && d.score >= min_score)
            .cloned()
            .collect();
        sort_detections(&mut dets);
        let m = match_detections(&dets, &gts, iou_threshold);
        for (g, &hit) in gts.iter().zip(&m.gt_matched) {
            if g.difficulty == Difficulty::Ignored {
                continue;
            }
            let b = &mut out[BucketStats::index(edges, g.bbox.bev_distance())];
            b.gt += 1;
            b.gt_matched += hit as usize;
        }
        for (d, o) in dets.iter().zip(&m.outcomes) {
            let b = &mut out[BucketStats::index(edges, d.bbox.bev_distance())];
            match o {
                MatchOutcome::TruePositive(_) => b.tp += 1,
                MatchOutcome::FalsePositive => b.fp += 1,
                MatchOutcome::Ignored => {}
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn car(x: f64, y: f64) -> OrientedBox3D {
        OrientedBox3D::new([x, y, -1.0], [1.5, 1.6, 3.9], 0.0).unwrap()
    }

    fn gt(b: OrientedBox3D, difficulty: Difficulty) -> GroundTruth {
        GroundTruth {
            class: ObjectClass::Car,
            bbox: b,
            difficulty,
        }
    }

    fn det(b: OrientedBox3D, score: f64) -> Detection {
        Detection::new(b, ObjectClass::Car, score, "000000").unwrap()
    }

    fn ap(tp: &[bool], n_gt: usize) -> f64 {
        average_precision(&PRCurve::from_ranked(tp, n_gt, Interpolation::R11))
    }

    #[test]
    fn single_overlapping_detection_is_true_positive() {
        // shift along the 3.9 m axis: IoU = (3.9 - 0.43) / (3.9 + 0.43) = 0.8014
        let g = car(10.0, 0.0);
        let d = car(10.43, 0.0);
        let iou = iou_3d(&g, &d);
        assert!((iou - 3.47 / 4.33).abs() < 1e-9 && iou >= 0.7);
        let m = match_detections(&[det(d, 0.9)], &[gt(g, Difficulty::Easy)], 0.7);
        assert_eq!(m.outcomes, vec![MatchOutcome::TruePositive(0)]);
        assert_eq!(m.gt_matched, vec![true]);
    }

    #[test]
    fn detection_without_ground_truth_is_false_positive() {
        let m = match_detections(&[det(car(5.0, 0.0), 0.5)], &[], 0.7);
        assert_eq!(m.outcomes, vec![MatchOutcome::FalsePositive]);
    }

    // Exhaustive oracle: among all one-to-one assignments of detections to
    // ground truth with IoU over the threshold, the most true positives, ties
    // resolved in favor of matching higher-ranked detections first.
    fn brute_force(dets: &[Detection], gts: &[GroundTruth], thr: f64) -> Vec<Option<usize>> {
        fn rec(i: usize, dets: &[Detection], gts: &[GroundTruth], thr: f64, used: &mut Vec<bool>, cur: &mut Vec<Option<usize>>, best: &mut Option<Vec<Option<usize>>>) {
            if i == dets.len() {
                let score = |a: &Vec<Option<usize>>| {
                    (a.iter().filter(|x| x.is_some()).count(), a.iter().map(|x| x.is_some()).collect::<Vec<_>>())
                };
                if best.as_ref().map_or(true, |b| score(cur) > score(b)) {
                    *best = Some(cur.clone());
                }
                return;
            }
            for j in 0..gts.len() {
                if !used[j] && iou_3d(&dets[i].bbox, &gts[j].bbox) >= thr {
                    used[j] = true;
                    cur.push(Some(j));
                    rec(i + 1, dets, gts, thr, used, cur, best);
                    cur.pop();
                    used[j] = false;
                }
            }
            cur.push(None);
            rec(i + 1, dets, gts, thr, used, cur, best);
            cur.pop();
        }
        let mut best = None;
        rec(0, dets, gts, thr, &mut vec![false; gts.len()], &mut Vec::new(), &mut best);
        best.unwrap()
    }

    #[test]
    fn two_detections_on_one_ground_truth() {
        let gts = [gt(car(10.0, 0.0), Difficulty::Easy)];
        let mut dets = vec![det(car(10.1, 0.0), 0.6), det(car(10.2, 0.0), 0.9)];
        sort_detections(&mut dets);
        let m = match_detections(&dets, &gts, 0.7);
        assert_eq!(m.outcomes, vec![MatchOutcome::TruePositive(0), MatchOutcome::FalsePositive]);
        assert_eq!(dets[0].score, 0.9);
        let oracle = brute_force(&dets, &gts, 0.7);
        let greedy: Vec<Option<usize>> = m
            .outcomes
            .iter()
            .map(|o| match o {
                MatchOutcome::TruePositive(j) => Some(*j),
                _ => None,
            })
            .collect();
        assert_eq!(greedy, oracle);
    }

    #[test]
    fn ignored_ground_truth_absorbs_without_counting() {
        let gts = [gt(car(10.0, 0.0), Difficulty::Ignored)];
        let m = match_detections(&[det(car(10.0, 0.0), 0.9)], &gts, 0.7);
        assert_eq!(m.outcomes, vec![MatchOutcome::Ignored]);
        assert_eq!(m.gt_matched, vec![false]);
        let f = FrameDetections {
            frame_id: "0".into(),
            detections: vec![det(car(10.0, 0.0), 0.9)],
            ground_truth: gts.to_vec(),
        };
        let (curve, n_gt, n_det) = class_curve(&[f], ObjectClass::Car, None, 0.7, Interpolation::R11);
        assert_eq!((n_gt, n_det), (0, 0));
        assert_eq!(average_precision(&curve), 0.0);
    }

    #[test]
    fn cumulative_difficulty_ignores_harder_objects() {
        let gts = [gt(car(10.0, 0.0), Difficulty::Easy), gt(car(20.0, 0.0), Difficulty::Hard)];
        let easy = at_difficulty(&gts, Some(Difficulty::Easy));
        assert_eq!(easy[1].difficulty, Difficulty::Ignored);
        let hard = at_difficulty(&gts, Some(Difficulty::Hard));
        assert_eq!(hard[1].difficulty, Difficulty::Hard);
    }

    #[test]
    fn ap_fixtures() {
        assert_eq!(ap(&[true], 1), 1.0);
        assert_eq!(ap(&[], 1), 0.0);
        assert_eq!(ap(&[false, false], 1), 0.0);
        assert_eq!(ap(&[true, false], 1), 1.0);
        // recall 0 keeps precision 1 from the curve start, the other ten
        // points see the 0.5 precision at full recall
        let hand = (1.0 + 10.0 * 0.5) / 11.0;
        assert_eq!(ap(&[false, true], 1), hand);
        assert!((hand - 6.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn r40_fixture() {
        // 2 GT, ranks [TP, FP, TP]: recall 0.5 at precision 1, recall 1 at 2/3
        let c = PRCurve::from_ranked(&[true, false, true], 2, Interpolation::R40);
        let hand = (20.0 * 1.0 + 20.0 * (2.0 / 3.0)) / 40.0;
        assert!((average_precision(&c) - hand).abs() < 1e-15);
    }

    #[test]
    fn recall_is_monotone_along_curve() {
        let c = PRCurve::from_ranked(&[true, false, true, true, false], 4, Interpolation::R11);
        assert!(c.points.windows(2).all(|w| w[1].0 >= w[0].0));
        assert!(c.points.iter().all(|p| (0.0..=1.0).contains(&p.1)));
    }

    #[test]
    fn distance_bucket_hand_tally() {
        let frames = [FrameDetections {
            frame_id: "0".into(),
            detections: vec![
                det(car(10.0, 0.0), 0.9), // TP near
                det(car(30.0, 0.0), 0.8), // TP mid
                det(car(25.0, 8.0), 0.7), // FP mid
                det(car(50.0, 0.0), 0.2), // below the score floor
            ],
            ground_truth: vec![
                gt(car(10.0, 0.0), Difficulty::Easy),
                gt(car(15.0, 3.0), Difficulty::Easy), // missed near
                gt(car(30.0, 0.0), Difficulty::Easy),
                gt(car(50.0, 0.0), Difficulty::Easy), // missed far
            ],
        }];
        let b = distance_buckets(&frames, ObjectClass::Car, 0.7, &DEFAULT_DISTANCE_EDGES, 0.5).unwrap();
        assert_eq!(b.len(), 3);
        assert_eq!((b[0].gt, b[0].gt_matched, b[0].tp, b[0].fp), (2, 1, 1, 0));
        assert_eq!((b[1].gt, b[1].gt_matched, b[1].tp, b[1].fp), (1, 1, 1, 1));
        assert_eq!((b[2].gt, b[2].gt_matched, b[2].tp, b[2].fp), (1, 0, 0, 0));
        assert_eq!(b[0].recall(), Some(0.5));
        assert_eq!(b[1].accuracy(), Some(0.5));
        assert_eq!(b[2].accuracy(), None);
        assert_eq!(b[2].label(), "40-inf");
    }

    #[test]
    fn all_near_and_detected_gives_full_recall_and_absent_far_buckets() {
        let g: Vec<GroundTruth> = [5.0, 12.0, 18.0].iter().map(|&x| gt(car(x, 0.0), Difficulty::Easy)).collect();
        let d: Vec<Detection> = g.iter().map(|g| det(g.bbox, 0.9)).collect();
        let frames = [FrameDetections {
            frame_id: "0".into(),
            detections: d,
            ground_truth: g,
        }];
        let b = distance_buckets(&frames, ObjectClass::Car, 0.7, &DEFAULT_DISTANCE_EDGES, 0.5).unwrap();
        assert_eq!(b[0].recall(), Some(1.0));
        assert_eq!(b[1].recall(), None);
        assert_eq!(b[2].recall(), None);
    }

    #[test]
    fn bad_edges_are_config_errors() {
        assert!(validate_edges(&[5.0, 10.0]).unwrap_err().is_config());
        assert!(validate_edges(&[0.0, 10.0, 10.0]).unwrap_err().is_config());
        assert!(validate_edges(&[0.0]).is_ok());
    }

    #[test]
    fn score_outside_unit_interval_is_rejected() {
        assert!(Detection::new(car(0.0, 0.0), ObjectClass::Car, 1.5, "x").is_err());
        assert!(Detection::new(car(0.0, 0.0), ObjectClass::Car, f64::NAN, "x").is_err());
    }
}
