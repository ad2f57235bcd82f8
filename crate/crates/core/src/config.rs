//! Run configuration. Files are TOML; every key is optional and unknown keys
//! are rejected. An empty file gives the full-scale structural defaults, and
//! `preset = "toy"` switches the base to the desk-scale setup.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, SAConfig};
use crate::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::head::{LossWeights, ObjectClass, NMS_IOU};
use crate::micronet::StepSchedule;
use crate::roi::FusionStrategy;
use crate::sampling::SamplingStrategy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Full-scale structure: 16384 points, 256 keypoints.
    Full,
    /// Desk-scale structure for CPU training on synthetic scenes.
    Toy,
}

impl Preset {
    pub fn config(self) -> RunConfig {
        match self {
            Self::Full => RunConfig::default(),
            Self::Toy => RunConfig::toy(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    #[default]
    Synthetic,
    Kitti,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Self::Synthetic),
            "kitti" => Ok(Self::Kitti),
            _ => Err(Error::Config(format!("unknown dataset {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DatasetKind,
    pub kitti_root: Option<PathBuf>,
    /// Directory of `<frame>.rfsg` segmentation files for KITTI frames.
    pub segmentation_dir: Option<PathBuf>,
    pub train_split: String,
    pub val_split: String,
    /// Synthetic scene counts.
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            kitti_root: None,
            segmentation_dir: None,
            train_split: "train".into(),
            val_split: "val".into(),
            train_scenes: 64,
            val_scenes: 32,
            synthetic: SyntheticConfig::default(),
        }
    }
}

/// Base RoI dimensions `[h, w, l]` per class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassDims {
    pub car: [f64; 3],
    pub pedestrian: [f64; 3],
    pub cyclist: [f64; 3],
}

impl Default for ClassDims {
    fn default() -> Self {
        Self {
            car: ObjectClass::Car.roi_dims(),
            pedestrian: ObjectClass::Pedestrian.roi_dims(),
            cyclist: ObjectClass::Cyclist.roi_dims(),
        }
    }
}

impl ClassDims {
    pub fn get(&self, class: ObjectClass) -> [f64; 3] {
        match class {
            ObjectClass::Car => self.car,
            ObjectClass::Pedestrian => self.pedestrian,
            ObjectClass::Cyclist => self.cyclist,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Points sampled from each cloud.
    pub num_points: usize,
    /// Detected classes; head class 0 is background, then these in order.
    pub classes: Vec<ObjectClass>,
    pub backbone: BackboneConfig,
    /// Point-guided keypoints; equals the last SA stage's point count.
    pub m1: usize,
    /// Pixel-guided keypoints.
    pub m2: usize,
    /// Foreground score threshold of the pixel mask.
    pub tau_fg: f64,
    /// Append image features at each keypoint's pixel to its features.
    pub paint_keypoints: bool,
    /// Channels of the image feature map the segmentation provider supplies.
    pub image_channels: usize,
    pub vote_hidden: Vec<usize>,
    pub class_dims: ClassDims,
    /// RoI extension in meters.
    pub eta: f64,
    pub k_pool: usize,
    /// Side of the 2D pooling grid.
    pub grid: usize,
    pub pool_channels: Vec<usize>,
    /// Width of the pooled image feature.
    pub image_width: usize,
    pub fuse_channels: Vec<usize>,
    pub fusion: FusionStrategy,
    pub head_hidden: Vec<usize>,
    pub angle_bins: usize,
    /// Boxes look the same turned by half a turn, so training folds target
    /// headings into `[-π/2, π/2)`.
    pub symmetric_heading: bool,
    pub nms_iou: f64,
    /// Detections scoring below this are dropped before NMS.
    pub min_score: f64,
}

fn sa(out_points: usize, radius: f64, max_neighbors: usize, mlp: &[usize], sampler: SamplingStrategy) -> SAConfig {
    SAConfig {
        out_points,
        radius,
        max_neighbors,
        mlp_channels: mlp.to_vec(),
        sampler,
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        use SamplingStrategy::{Euclidean, Fused};
        Self {
            num_points: 16384,
            classes: vec![ObjectClass::Car],
            backbone: BackboneConfig {
                sa: vec![
                    sa(4096, 0.4, 32, &[16, 16, 32], Euclidean),
                    sa(1024, 0.8, 32, &[32, 32, 64], Euclidean),
                    sa(512, 1.6, 32, &[64, 64, 128], Fused),
                    sa(128, 3.2, 32, &[128, 128, 128], Fused),
                ],
                fp: vec![vec![128], vec![128], vec![128], vec![128]],
                seg_classes: 2,
            },
            m1: 128,
            m2: 128,
            tau_fg: 0.5,
            paint_keypoints: false,
            image_channels: 2,
            vote_hidden: vec![128],
            class_dims: ClassDims::default(),
            eta: 1.0,
            k_pool: 64,
            grid: 7,
            pool_channels: vec![128, 128],
            image_width: 128,
            fuse_channels: vec![128],
            fusion: FusionStrategy::Concat,
            head_hidden: vec![128],
            angle_bins: 12,
            symmetric_heading: false,
            nms_iou: NMS_IOU,
            min_score: 0.05,
        }
    }
}

impl ModelConfig {
    /// Desk-scale model: 2048 points, 32 + 32 keypoints.
    pub fn toy() -> Self {
        use SamplingStrategy::{Euclidean, Fused};
        Self {
            num_points: 2048,
            backbone: BackboneConfig {
                sa: vec![
                    sa(512, 0.8, 16, &[16, 32], Euclidean),
                    sa(128, 1.6, 16, &[32, 32], Euclidean),
                    sa(32, 3.2, 16, &[32, 32], Fused),
                ],
                fp: vec![vec![32], vec![32], vec![32]],
                seg_classes: 2,
            },
            m1: 32,
            m2: 32,
            vote_hidden: vec![64],
            k_pool: 32,
            grid: 7,
            pool_channels: vec![32, 48],
            image_width: 48,
            fuse_channels: vec![64],
            head_hidden: vec![64],
            symmetric_heading: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.backbone.validate()?;
        if self.num_points == 0 {
            return bad("num_points must be positive".into());
        }
        if self.classes.is_empty() {
            return bad("at least one class is required".into());
        }
        let mut seen = self.classes.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.classes.len() {
            return bad("classes must be distinct".into());
        }
        if self.backbone.seg_classes != self.classes.len() + 1 {
            return bad(format!(
                "backbone.seg_classes is {} but {} classes plus background need {}",
                self.backbone.seg_classes,
                self.classes.len(),
                self.classes.len() + 1
            ));
        }
        let last = self.backbone.sa.last().map_or(0, |s| s.out_points);
        if last != self.m1 {
            return bad(format!("m1 is {} but the last SA stage keeps {last} points", self.m1));
        }
        if self.backbone.keypoint_width() != self.backbone.point_width() {
            return bad(format!(
                "keypoint width {} must equal point feature width {}",
                self.backbone.keypoint_width(),
                self.backbone.point_width()
            ));
        }
        if !(0.0..=1.0).contains(&self.tau_fg) {
            return bad(format!("tau_fg {} outside [0, 1]", self.tau_fg));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad(format!("eta {} must be a non-negative number", self.eta));
        }
        for (name, d) in [
            ("car", self.class_dims.car),
            ("pedestrian", self.class_dims.pedestrian),
            ("cyclist", self.class_dims.cyclist),
        ] {
            if d.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return bad(format!("class_dims.{name} must be positive"));
            }
        }
        if self.k_pool == 0 || self.grid == 0 || self.image_channels == 0 || self.image_width == 0 {
            return bad("k_pool, grid, image_channels and image_width must be positive".into());
        }
        for (name, v) in [
            ("vote_hidden", &self.vote_hidden),
            ("pool_channels", &self.pool_channels),
            ("fuse_channels", &self.fuse_channels),
            ("head_hidden", &self.head_hidden),
        ] {
            if v.is_empty() || v.contains(&0) {
                return bad(format!("{name} needs at least one non-zero width"));
            }
        }
        let pc = *self.pool_channels.last().unwrap();
        if self.fusion != FusionStrategy::Concat && pc != self.image_width {
            return bad(format!(
                "{} fusion needs pool width {pc} to equal image_width {}",
                self.fusion, self.image_width
            ));
        }
        if self.angle_bins < 2 {
            return bad("angle_bins must be at least 2".into());
        }
        if !(0.0..=1.0).contains(&self.nms_iou) || !(0.0..=1.0).contains(&self.min_score) {
            return bad("nms_iou and min_score must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// RoI base dims: the elementwise maximum over the detected classes, so
    /// one RoI per keypoint can hold any of them.
    pub fn roi_dims(&self) -> [f64; 3] {
        let mut d = [0.0f64; 3];
        for &c in &self.classes {
            let cd = self.class_dims.get(c);
            for k in 0..3 {
                d[k] = d[k].max(cd[k]);
            }
        }
        d
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Total epochs over the training scenes.
    pub epochs: usize,
    /// Leading epochs that train the backbone and vote layer; the RoI fusion
    /// layer and head train in the remaining ones on the frozen front end.
    pub backbone_epochs: usize,
    /// Scenes per optimizer step.
    pub batch_size: usize,
    /// Frozen front-end passes cached per scene for the head stage, cycled
    /// across epochs; 0 recomputes the front end every epoch.
    pub head_cache_variants: usize,
    /// Each RoI is turned about its vertical axis by a random angle of up to
    /// this many degrees, together with its target box; 0 disables it.
    pub roi_rotation_deg: f64,
    /// Each RoI is mirrored across its forward axis with probability 1/2.
    pub roi_mirror: bool,
    /// Each RoI is scaled about its center by a random factor in
    /// `[1 - roi_scale, 1 + roi_scale]`, together with its target box.
    pub roi_scale: f64,
    pub backbone_lr: StepSchedule,
    pub head_lr: StepSchedule,
    pub loss: LossWeights,
    pub seg_weight: f64,
    pub vote_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            backbone_epochs: 20,
            batch_size: 4,
            head_cache_variants: 0,
            roi_rotation_deg: 0.0,
            roi_mirror: false,
            roi_scale: 0.0,
            backbone_lr: StepSchedule::default(),
            head_lr: StepSchedule::default(),
            loss: LossWeights::default(),
            seg_weight: 1.0,
            vote_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn toy() -> Self {
        Self {
            epochs: 200,
            backbone_epochs: 50,
            head_cache_variants: 4,
            roi_rotation_deg: 90.0,
            roi_mirror: true,
            roi_scale: 0.1,
            backbone_lr: StepSchedule {
                base_lr: 0.002,
                decay_epoch: 40,
                factor: 10.0,
            },
            head_lr: StepSchedule {
                base_lr: 0.002,
                decay_epoch: 120,
                factor: 10.0,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(0.0..=180.0).contains(&self.roi_rotation_deg) {
            return Err(Error::Config("roi_rotation_deg must lie in [0, 180]".into()));
        }
        if !(0.0..0.5).contains(&self.roi_scale) {
            return Err(Error::Config("roi_scale must lie in [0, 0.5)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.backbone_epochs > self.epochs {
            return Err(Error::Config("backbone_epochs exceeds epochs".into()));
        }
        for s in [&self.backbone_lr, &self.head_lr] {
            if !(s.base_lr > 0.0 && s.factor > 0.0) {
                return Err(Error::Config("learning rates and decay factors must be positive".into()));
            }
        }
        let w = &self.loss;
        if [w.cls, w.center, w.size, w.bin, w.residual, self.seg_weight, self.vote_weight]
            .iter()
            .any(|v| !(*v >= 0.0))
        {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    /// Seeds model initialization; data seeds derive from it.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: None,
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig {
                classes: vec![ObjectClass::Car],
                ..EvalConfig::default()
            },
        }
    }
}

/// Recursively overlays `top` onto `base`; tables merge, everything else is
/// replaced.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Desk-scale setup: 64 training and 32 held-out synthetic two-car
    /// scenes of 2048 points, evaluated with every label at IoU 0.5.
    pub fn toy() -> Self {
        Self {
            preset: Some(Preset::Toy),
            seed: 0,
            data: DataConfig {
                synthetic: SyntheticConfig {
                    min_objects: 2,
                    max_objects: 2,
                    ..SyntheticConfig::default()
                },
                ..DataConfig::default()
            },
            model: ModelConfig::toy(),
            train: TrainConfig::toy(),
            eval: EvalConfig {
                classes: vec![ObjectClass::Car],
                iou_threshold: Some(0.5),
                difficulties: Vec::new(),
                ..EvalConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.synthetic.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.data.kind == DatasetKind::Synthetic {
            if self.data.train_scenes == 0 || self.data.val_scenes == 0 {
                return Err(Error::Config("synthetic scene counts must be positive".into()));
            }
            if self.data.synthetic.image_size == (0, 0) {
                return Err(Error::Config("synthetic image size must be positive".into()));
            }
        }
        if self.eval.classes.iter().any(|c| !self.model.classes.contains(c)) {
            return Err(Error::Config("eval.classes must be a subset of model.classes".into()));
        }
        Ok(())
    }

    /// Parses TOML text, overlaying it on the selected preset, and validates.
    pub fn from_toml(text: &str) -> Result<Self> {
        let top: toml::Value = text
            .parse::<toml::Table>()
            .map(toml::Value::Table)
            .map_err(|e| Error::Config(e.to_string()))?;
        let preset = match top.get("preset") {
            None => Preset::Full,
            Some(v) => v
                .clone()
                .try_into::<Preset>()
                .map_err(|e| Error::Config(format!("preset: {e}")))?,
        };
        let mut base = toml::Value::try_from(preset.config()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, top);
        let cfg: RunConfig = base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Config(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_toml(&text)
    }

    /// Seed of the training scenes.
    pub fn train_data_seed(&self) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(1_000)
    }

    /// Seed of the held-out scenes, far from every training seed.
    pub fn val_data_seed(&self) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(500_000)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_full_scale_constants() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.model.num_points, 16384);
        assert_eq!(c.model.m1 + c.model.m2, 256);
        assert_eq!(c.model.eta, 1.0);
        assert_eq!(c.model.vote_hidden, vec![128]);
        assert_eq!(c.model.class_dims.car, [1.8, 5.0, 5.0]);
        assert_eq!(c.train.backbone_lr.base_lr, 0.002);
        assert_eq!(c.train.backbone_lr.decay_epoch, 40);
        assert_eq!(c.train.epochs, 50);
    }

    #[test]
    fn preset_then_overrides() {
        let c = RunConfig::from_toml("preset = \"toy\"\nseed = 7\n[model]\neta = 0.5\n").unwrap();
        let mut want = RunConfig::toy();
        want.seed = 7;
        want.model.eta = 0.5;
        assert_eq!(c, want);
    }

    #[test]
    fn round_trip_is_identity() {
        for cfg in [RunConfig::default(), RunConfig::toy()] {
            let text = cfg.to_toml();
            let once = RunConfig::from_toml(&text).unwrap();
            assert_eq!(once, cfg);
            assert_eq!(RunConfig::from_toml(&once.to_toml()).unwrap(), once);
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::from_toml("[model]\nbogus = 1\n").unwrap_err();
        assert!(e.is_config(), "{e}");
        assert!(RunConfig::from_toml("colour = 3").unwrap_err().is_config());
        assert!(RunConfig::from_toml("preset = \"huge\"").unwrap_err().is_config());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in [
            "[model]\neta = -1.0",
            "[model]\nm1 = 5",
            "[model]\nangle_bins = 1",
            "[model]\nfusion = \"sum\"\nimage_width = 7",
            "[train]\nbackbone_epochs = 99",
            "[eval]\ndistance_edges = [5.0]",
            "[model]\nclasses = [\"Car\", \"Car\"]",
            "not toml at all = = =",
        ] {
            assert!(RunConfig::from_toml(text).unwrap_err().is_config(), "{text}");
        }
    }

    #[test]
    fn toy_is_valid_and_two_car() {
        let t = RunConfig::toy();
        t.validate().unwrap();
        assert_eq!((t.data.synthetic.min_objects, t.data.synthetic.max_objects), (2, 2));
        assert_eq!(t.model.num_points, 2048);
        assert_eq!(t.train.epochs, 200);
        assert_eq!(t.eval.iou_threshold, Some(0.5));
    }

    #[test]
    fn shipped_configs_match_presets() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        for (file, preset) in [("toy.toml", Preset::Toy), ("full.toml", Preset::Full)] {
            let mut want = preset.config();
            want.preset = Some(preset);
            assert_eq!(RunConfig::load(dir.join(file)).unwrap(), want, "{file}");
        }
    }

    #[test]
    fn roi_dims_cover_every_class() {
        let mut m = ModelConfig::default();
        assert_eq!(m.roi_dims(), [1.8, 5.0, 5.0]);
        m.classes = vec![ObjectClass::Pedestrian, ObjectClass::Cyclist];
        assert_eq!(m.roi_dims(), [1.8, 1.8, 1.8]);
    }
}
