//! The assembled detector: backbone, fused keypoints, votes, RoI fusion and
//! prediction head, plus the per-frame preprocessing they share.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneOutput};
use crate::config::ModelConfig;
use crate::data::{frustum_indices, subsample_indices, Frame, GroundTruth, FOREGROUND_MARGIN};
use crate::error::{Error, Result};
use crate::eval::Detection;
use crate::fusionkp::{
    fuse_keypoints, paint_keypoints, pixel_guided_keypoints, point_guided_keypoints, KeypointSet,
    SegScores,
};
use crate::geom::{project_box_to_roi2d, CalibContext, OrientedBox3D};
use crate::head::{assign_rois, fold_heading, nms, AngleBinCodec, DetectionHead, EncodingLayout, RoiTarget};
use crate::micronet::{load_into, read_checkpoint, write_checkpoint, DenseLayer, Layered, Tensor2};
use crate::roi::{gather_roi_points, make_roi3d, sample_roi2d, RoiBatch, RoiFusion, VoteNet, VoteOutput};

/// FNV-1a, used to derive per-frame seeds from frame ids.
pub fn stable_hash(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// A frame's cloud reduced to the model's input: in-frustum points,
/// subsampled (or padded) to exactly `n` by a seeded shuffle.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedCloud {
    pub coords: Vec<[f64; 3]>,
    pub reflectance: Vec<f64>,
}

pub fn prepare_cloud(frame: &Frame, n: usize, seed: u64) -> Result<PreparedCloud> {
    let keep = frustum_indices(&frame.cloud, &frame.calib);
    if keep.is_empty() {
        return Err(Error::MalformedFile(format!("frame {} has no points in view", frame.id)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stable_hash(&frame.id));
    let pts = frame.cloud.points();
    let picked: Vec<[f64; 4]> = subsample_indices(keep.len(), n, &mut rng)
        .into_iter()
        .map(|i| pts[keep[i]])
        .collect();
    Ok(PreparedCloud {
        coords: picked.iter().map(|p| [p[0], p[1], p[2]]).collect(),
        reflectance: picked.iter().map(|p| p[3]).collect(),
    })
}

/// The frame's segmentation, or all-background scores when it has none.
pub fn frame_segmentation(frame: &Frame, classes: usize) -> SegScores {
    frame.segmentation.clone().unwrap_or_else(|| {
        let (w, h) = frame.calib.image_size();
        SegScores::background(w as usize, h as usize, classes)
    })
}

/// Everything up to and including the voted centers.
#[derive(Clone, Debug)]
pub struct FrontEnd {
    pub cloud: PreparedCloud,
    pub backbone: BackboneOutput,
    pub keypoints: KeypointSet,
    pub votes: VoteOutput,
}

/// Non-empty RoIs of one frame, ready for the trainable RoI stage.
#[derive(Clone, Debug)]
pub struct RoiSet {
    pub batch: RoiBatch,
    pub centers: Vec<[f64; 3]>,
    /// Keypoint each RoI came from.
    pub keypoint: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub vote: VoteNet,
    pub fusion: RoiFusion,
    pub head: DetectionHead,
}

impl Detector {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(&cfg.backbone, &mut rng)?;
        let vote = VoteNet::new(Self::keypoint_width(cfg), &cfg.vote_hidden, &mut rng);
        let (fusion, head) = Self::new_back(cfg, &mut rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            backbone,
            vote,
            fusion,
            head,
        })
    }

    fn keypoint_width(cfg: &ModelConfig) -> usize {
        cfg.backbone.keypoint_width() + if cfg.paint_keypoints { cfg.image_channels } else { 0 }
    }

    fn new_back(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<(RoiFusion, DetectionHead)> {
        let fusion = RoiFusion::new(
            cfg.backbone.point_width(),
            &cfg.pool_channels,
            cfg.grid * cfg.grid * cfg.image_channels,
            cfg.image_width,
            &cfg.fuse_channels,
            cfg.fusion,
            rng,
        )?;
        let head = DetectionHead::new(fusion.out_width(), &cfg.head_hidden, Self::layout_for(cfg), rng);
        Ok((fusion, head))
    }

    fn layout_for(cfg: &ModelConfig) -> EncodingLayout {
        EncodingLayout {
            classes: cfg.classes.len() + 1,
            bins: cfg.angle_bins,
        }
    }

    /// Swaps in a freshly initialized RoI stage and head for `cfg`, keeping
    /// the backbone and vote layer. `cfg` may differ only in RoI-stage keys.
    pub fn reset_back(&mut self, cfg: &ModelConfig, seed: u64) -> Result<()> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_b4c6);
        let (fusion, head) = Self::new_back(cfg, &mut rng)?;
        self.cfg = cfg.clone();
        self.fusion = fusion;
        self.head = head;
        Ok(())
    }

    pub fn layout(&self) -> EncodingLayout {
        self.head.layout
    }

    pub fn codec(&self) -> AngleBinCodec {
        AngleBinCodec::new(self.cfg.angle_bins).expect("validated bin count")
    }

    /// Point-guided keypoints fused with pixel-guided ones, which are dropped
    /// when the mask keeps no point.
    pub fn keypoints(&self, cloud: &PreparedCloud, out: &BackboneOutput, calib: &CalibContext, seg: &SegScores) -> Result<KeypointSet> {
        let pc = point_guided_keypoints(out);
        let img = match pixel_guided_keypoints(&cloud.coords, calib, seg, &out.point_features, self.cfg.m2, self.cfg.tau_fg) {
            Ok(k) => k,
            Err(Error::NoForegroundPoints) => KeypointSet::empty(pc.width()),
            Err(e) => return Err(e),
        };
        let (pc, img) = if self.cfg.paint_keypoints {
            (paint_keypoints(&pc, calib, seg), paint_keypoints(&img, calib, seg))
        } else {
            (pc, img)
        };
        fuse_keypoints(&pc, &img)
    }

    fn check_seg(&self, seg: &SegScores) -> Result<()> {
        let c = seg.feature_map().channels();
        if c != self.cfg.image_channels {
            return Err(Error::ShapeMismatch(format!(
                "segmentation supplies {c} image channels, the model expects {}",
                self.cfg.image_channels
            )));
        }
        Ok(())
    }

    pub fn front(&self, frame: &Frame, seg: &SegScores, seed: u64) -> Result<FrontEnd> {
        self.check_seg(seg)?;
        let cloud = prepare_cloud(frame, self.cfg.num_points, seed)?;
        let backbone = self.backbone.forward(&cloud.coords, &cloud.reflectance)?;
        let keypoints = self.keypoints(&cloud, &backbone, &frame.calib, seg)?;
        let votes = self.vote.forward(&keypoints)?;
        Ok(FrontEnd {
            cloud,
            backbone,
            keypoints,
            votes,
        })
    }

    /// RoIs around the voted centers. Empty RoIs are dropped; RoIs whose
    /// projection is degenerate or behind the camera get zero image samples.
    pub fn rois(&self, coords: &[[f64; 3]], point_features: &Tensor2, centers: &[[f64; 3]], calib: &CalibContext, seg: &SegScores) -> Result<RoiSet> {
        let dims = self.cfg.roi_dims();
        let map = seg.feature_map();
        let samples = self.cfg.grid * self.cfg.grid * map.channels();
        let row_width = 3 + point_features.cols();
        let mut points = Vec::new();
        let mut image = Vec::new();
        let mut kept_centers = Vec::new();
        let mut keypoint = Vec::new();
        for (i, &c) in centers.iter().enumerate() {
            let roi = make_roi3d(c, dims, self.cfg.eta)?;
            let Some(x) = gather_roi_points(&roi, coords, point_features, self.cfg.k_pool) else {
                continue;
            };
            points.extend_from_slice(x.as_slice());
            let s = project_box_to_roi2d(&roi, calib)
                .ok()
                .and_then(|r2| sample_roi2d(&r2, map, self.cfg.grid))
                .unwrap_or_else(|| vec![0.0; samples]);
            image.extend_from_slice(&s);
            kept_centers.push(c);
            keypoint.push(i);
        }
        let n = kept_centers.len();
        Ok(RoiSet {
            batch: RoiBatch {
                points: Tensor2::from_vec(n * self.cfg.k_pool, row_width, points)?,
                k_pool: self.cfg.k_pool,
                image: Tensor2::from_vec(n, samples, image)?,
            },
            centers: kept_centers,
            keypoint,
        })
    }

    /// Box whose heading the head is trained to predict.
    pub fn target_box(&self, mut b: OrientedBox3D) -> OrientedBox3D {
        if self.cfg.symmetric_heading {
            b.yaw = fold_heading(b.yaw);
        }
        b
    }

    /// Class-index targets for each RoI (0 is background).
    pub fn roi_targets(&self, centers: &[[f64; 3]], objects: &[GroundTruth]) -> Vec<RoiTarget> {
        let gts: Vec<(usize, OrientedBox3D)> = objects
            .iter()
            .filter_map(|g| self.class_index(g).map(|k| (k, g.bbox)))
            .collect();
        let boxes: Vec<OrientedBox3D> = gts.iter().map(|g| g.1).collect();
        let codec = self.codec();
        assign_rois(centers, &boxes)
            .into_iter()
            .zip(centers)
            .map(|(a, c)| match a {
                Some(j) => RoiTarget::for_box(gts[j].0, &self.target_box(gts[j].1), *c, &codec),
                None => RoiTarget::Background,
            })
            .collect()
    }

    /// Head class index of a label, `None` for classes the model ignores.
    pub fn class_index(&self, g: &GroundTruth) -> Option<usize> {
        self.cfg.classes.iter().position(|&c| c == g.class).map(|k| k + 1)
    }

    /// Per-point segmentation labels for a prepared cloud.
    pub fn point_labels(&self, coords: &[[f64; 3]], objects: &[GroundTruth]) -> Vec<usize> {
        crate::data::point_labels(coords, objects, &self.cfg.classes)
    }

    /// Vote target of each keypoint: the center of the box containing it.
    pub fn vote_targets(&self, kp: &KeypointSet, objects: &[GroundTruth]) -> Vec<Option<[f64; 3]>> {
        kp.coords
            .iter()
            .map(|p| {
                objects
                    .iter()
                    .filter(|g| self.class_index(g).is_some())
                    .find(|g| g.bbox.contains(*p, FOREGROUND_MARGIN))
                    .map(|g| g.bbox.center)
            })
            .collect()
    }

    /// Decodes head rows into scored detections, then class-wise NMS.
    pub fn decode(&self, encodings: &Tensor2, centers: &[[f64; 3]], frame_id: &str) -> Result<Vec<Detection>> {
        let codec = self.codec();
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        let mut classes = Vec::new();
        for (row, c) in encodings.iter_rows().zip(centers) {
            let (b, probs) = self.head.decode(row, *c, &codec);
            let (k, p) = probs
                .iter()
                .enumerate()
                .skip(1)
                .fold((1, f64::NEG_INFINITY), |best, (k, &p)| if p > best.1 { (k, p) } else { best });
            if p >= self.cfg.min_score && p.is_finite() {
                boxes.push(b);
                scores.push(p.clamp(0.0, 1.0));
                classes.push(k);
            }
        }
        nms(&boxes, &scores, &classes, self.cfg.nms_iou)
            .into_iter()
            .map(|i| Detection::new(boxes[i], self.cfg.classes[classes[i] - 1], scores[i], frame_id))
            .collect()
    }

    /// Full inference on one frame.
    pub fn detect(&self, frame: &Frame, seed: u64) -> Result<Vec<Detection>> {
        let seg = frame_segmentation(frame, self.cfg.classes.len() + 1);
        let front = self.front(frame, &seg, seed)?;
        let rois = self.rois(
            &front.cloud.coords,
            &front.backbone.point_features,
            &front.votes.centers,
            &frame.calib,
            &seg,
        )?;
        if rois.centers.is_empty() {
            return Ok(Vec::new());
        }
        let enc = self.head.forward(&self.fusion.forward(&rois.batch)?)?;
        self.decode(&enc, &rois.centers, &frame.id)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = fs::File::create(path)?;
        write_checkpoint(self, BufWriter::new(f))
    }

    /// A detector for `cfg` with parameters from a checkpoint.
    pub fn load(cfg: &ModelConfig, path: impl AsRef<Path>) -> Result<Self> {
        let records = read_checkpoint(std::io::BufReader::new(fs::File::open(path)?))?;
        let mut det = Self::new(cfg, 0)?;
        load_into(&mut det, &records)?;
        Ok(det)
    }
}

impl Layered for Detector {
    fn layers(&self) -> Vec<&DenseLayer> {
        let mut v = self.backbone.layers();
        v.extend(self.vote.layers());
        v.extend(self.fusion.layers());
        v.extend(self.head.layers());
        v
    }

    fn layers_mut(&mut self) -> Vec<&mut DenseLayer> {
        let mut v = self.backbone.layers_mut();
        v.extend(self.vote.layers_mut());
        v.extend(self.fusion.layers_mut());
        v.extend(self.head.layers_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::data::{gen_synthetic_scene, Difficulty};
    use crate::head::ObjectClass;

    fn toy() -> (RunConfig, Frame) {
        let cfg = RunConfig::toy();
        let scene = gen_synthetic_scene(&cfg.data.synthetic, 3).unwrap();
        (cfg, scene.frame)
    }

    #[test]
    fn prepared_cloud_has_model_size_and_is_seeded() {
        let (cfg, frame) = toy();
        let a = prepare_cloud(&frame, cfg.model.num_points, 1).unwrap();
        assert_eq!(a.coords.len(), 2048);
        assert_eq!(a, prepare_cloud(&frame, cfg.model.num_points, 1).unwrap());
        let small = prepare_cloud(&frame, 100, 1).unwrap();
        assert_eq!(small.coords.len(), 100);
    }

    #[test]
    fn keypoint_count_is_m1_plus_m2_with_oracle_mask() {
        let (cfg, frame) = toy();
        let det = Detector::new(&cfg.model, 0).unwrap();
        let seg = frame_segmentation(&frame, 2);
        let front = det.front(&frame, &seg, 0).unwrap();
        assert_eq!(front.keypoints.len(), 64);
        assert_eq!(front.keypoints.point_guided, 32);
        assert_eq!(front.votes.centers.len(), 64);
    }

    #[test]
    fn background_segmentation_falls_back_to_point_guided() {
        let (cfg, mut frame) = toy();
        frame.segmentation = None;
        let det = Detector::new(&cfg.model, 0).unwrap();
        let seg = frame_segmentation(&frame, 2);
        let front = det.front(&frame, &seg, 0).unwrap();
        assert_eq!(front.keypoints.len(), 32);
    }

    #[test]
    fn rois_drop_empty_regions() {
        let (cfg, frame) = toy();
        let det = Detector::new(&cfg.model, 0).unwrap();
        let seg = frame_segmentation(&frame, 2);
        let front = det.front(&frame, &seg, 0).unwrap();
        let mut centers = front.votes.centers.clone();
        centers.push([500.0, 500.0, 500.0]);
        let rois = det
            .rois(&front.cloud.coords, &front.backbone.point_features, &centers, &frame.calib, &seg)
            .unwrap();
        assert!(!rois.keypoint.contains(&(centers.len() - 1)));
        assert_eq!(rois.batch.points.rows(), rois.centers.len() * cfg.model.k_pool);
        assert_eq!(rois.batch.image.cols(), 7 * 7 * 2);
    }

    #[test]
    fn targets_follow_assignment_rule() {
        let (cfg, _) = toy();
        let det = Detector::new(&cfg.model, 0).unwrap();
        let gt = GroundTruth {
            class: ObjectClass::Car,
            bbox: OrientedBox3D::new([10.0, 0.0, -1.0], [1.5, 1.6, 3.9], 0.3).unwrap(),
            difficulty: Difficulty::Easy,
        };
        let t = det.roi_targets(&[[10.3, 0.2, -1.0], [11.0, 0.0, -1.0]], &[gt]);
        assert!(matches!(t[0], RoiTarget::Object { class: 1, .. }));
        assert_eq!(t[1], RoiTarget::Background);
    }

    #[test]
    fn detection_is_deterministic_and_valid() {
        let (cfg, frame) = toy();
        let det = Detector::new(&cfg.model, 0).unwrap();
        let a = det.detect(&frame, 0).unwrap();
        assert_eq!(a, det.detect(&frame, 0).unwrap());
        assert!(a.iter().all(|d| (0.0..=1.0).contains(&d.score)));
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let (cfg, _) = toy();
        let det = Detector::new(&cfg.model, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.rfn");
        det.save(&p).unwrap();
        assert_eq!(Detector::load(&cfg.model, &p).unwrap(), det);
        let mut other = cfg.model.clone();
        other.head_hidden = vec![16];
        assert!(matches!(Detector::load(&other, &p), Err(Error::IncompatibleCheckpoint(_))));
    }

    #[test]
    fn wrong_image_channels_is_shape_mismatch() {
        let (mut cfg, frame) = toy();
        cfg.model.image_channels = 3;
        let det = Detector::new(&cfg.model, 0).unwrap();
        assert!(matches!(det.detect(&frame, 0), Err(Error::ShapeMismatch(_))));
    }
}
