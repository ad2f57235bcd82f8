//! Two-stage training. The first `backbone_epochs` train every layer, with
//! the RoI stage reading detached point features; the rest train only the RoI
//! fusion layer and head on the frozen front end.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::Backbone;
use crate::config::TrainConfig;
use crate::data::Frame;
use crate::detector::{frame_segmentation, prepare_cloud, Detector, RoiSet};
use crate::error::Result;
use crate::head::{detection_loss, fold_heading, AngleBinCodec, DetectionHead, LossBreakdown, RoiTarget};
use crate::micronet::{cross_entropy, zero_grads, zeroed_like, Adam, Tensor2};
use crate::roi::{vote_loss, RoiBatch, RoiFusion, VoteNet};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Every layer trains.
    Joint,
    /// Only the RoI fusion layer and head train.
    Head,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Joint => "joint",
            Stage::Head => "head",
        }
    }
}

/// Losses of one scene, or their mean over an epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SceneLoss {
    pub seg: f64,
    pub vote: f64,
    pub det: LossBreakdown,
}

impl SceneLoss {
    /// Weighted sum of the segmentation, vote and detection terms.
    pub fn total(&self, cfg: &TrainConfig) -> f64 {
        cfg.seg_weight * self.seg + cfg.vote_weight * self.vote + self.det.total
    }

    fn add_scaled(&mut self, o: &SceneLoss, s: f64) {
        self.seg += s * o.seg;
        self.vote += s * o.vote;
        let (d, e) = (&mut self.det, &o.det);
        d.cls += s * e.cls;
        d.center += s * e.center;
        d.size += s * e.size;
        d.bin += s * e.bin;
        d.residual += s * e.residual;
        d.total += s * e.total;
        d.assigned += e.assigned;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: Stage,
    pub lr: f64,
    pub loss: SceneLoss,
    pub total: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = &self.loss.det;
        write!(
            f,
            "epoch={} stage={} lr={:.6} seg={:.6} vote={:.6} cls={:.6} center={:.6} size={:.6} bin={:.6} residual={:.6} det={:.6} total={:.6}",
            self.epoch,
            self.stage.name(),
            self.lr,
            self.loss.seg,
            self.loss.vote,
            d.cls,
            d.center,
            d.size,
            d.bin,
            d.residual,
            d.total,
            self.total
        )
    }
}

/// Gradient buffers shaped like the trainable parts.
struct Grads {
    backbone: Backbone,
    vote: VoteNet,
    fusion: RoiFusion,
    head: DetectionHead,
}

impl Grads {
    fn new(det: &Detector) -> Self {
        Self {
            backbone: zeroed_like(&det.backbone),
            vote: zeroed_like(&det.vote),
            fusion: zeroed_like(&det.fusion),
            head: zeroed_like(&det.head),
        }
    }

    fn clear(&mut self, front: bool) {
        if front {
            zero_grads(&mut self.backbone);
            zero_grads(&mut self.vote);
        }
        zero_grads(&mut self.fusion);
        zero_grads(&mut self.head);
    }
}

/// Seed of the point subsample drawn for a scene in a given epoch.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Front-end losses and the RoIs they lead to, for one scene.
struct FrontPass {
    seg: f64,
    vote: f64,
    rois: RoiSet,
    targets: Vec<RoiTarget>,
}

/// Front end of one scene. With `grads`, its parameter gradients are
/// accumulated scaled by `scale`.
fn front_step(
    det: &Detector,
    cfg: &TrainConfig,
    frame: &Frame,
    sample_seed: u64,
    grads: Option<&mut Grads>,
    scale: f64,
) -> Result<FrontPass> {
    let m = &det.cfg;
    let seg = frame_segmentation(frame, m.classes.len() + 1);
    let cloud = prepare_cloud(frame, m.num_points, sample_seed)?;
    let (bout, bcache) = if grads.is_some() {
        let (o, c) = det.backbone.forward_train(&cloud.coords, &cloud.reflectance)?;
        (o, Some(c))
    } else {
        (det.backbone.forward(&cloud.coords, &cloud.reflectance)?, None)
    };

    let labels = det.point_labels(&cloud.coords, &frame.objects);
    let n = labels.len() as f64;
    let mut seg_loss = 0.0;
    let mut grad_seg = Tensor2::zeros(bout.seg_logits.rows(), bout.seg_logits.cols());
    for (r, &label) in labels.iter().enumerate() {
        let (l, g) = cross_entropy(bout.seg_logits.row(r), label);
        seg_loss += l / n;
        for (d, v) in grad_seg.row_mut(r).iter_mut().zip(g) {
            *d = v * cfg.seg_weight * scale / n;
        }
    }

    let kp = det.keypoints(&cloud, &bout, &frame.calib, &seg)?;
    let vote_targets = det.vote_targets(&kp, &frame.objects);
    let (votes, vote_l) = match (grads, &bcache) {
        (Some(grads), Some(bcache)) => {
            let (v, vcache) = det.vote.forward_train(&kp)?;
            let (l, mut g, _) = vote_loss(&v.centers, &vote_targets);
            g.as_mut_slice().iter_mut().for_each(|x| *x *= cfg.vote_weight * scale);
            let gkp = det.vote.backward(&vcache, &g, &mut grads.vote);
            // painted columns carry no gradient back into the backbone
            let pw = m.backbone.point_width();
            let fin = bout.final_stage();
            let mut g_final = Tensor2::zeros(fin.len(), fin.width());
            let mut g_points = Tensor2::zeros(bout.point_features.rows(), pw);
            for r in 0..kp.len() {
                let src = &gkp.row(r)[..pw];
                let dst = if r < kp.point_guided {
                    g_final.row_mut(r)
                } else {
                    g_points.row_mut(kp.origin[r])
                };
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
            det.backbone
                .backward(bcache, &grad_seg, Some(&g_points), Some(&g_final), &mut grads.backbone);
            (v, l)
        }
        _ => {
            let v = det.vote.forward(&kp)?;
            let l = vote_loss(&v.centers, &vote_targets).0;
            (v, l)
        }
    };

    let rois = det.rois(&cloud.coords, &bout.point_features, &votes.centers, &frame.calib, &seg)?;
    let targets = det.roi_targets(&rois.centers, &frame.objects);
    Ok(FrontPass {
        seg: seg_loss,
        vote: vote_l,
        rois,
        targets,
    })
}

/// Random per-RoI geometric augmentation of the head-stage inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiAugment {
    /// Largest turn about the vertical axis, radians.
    pub max_rad: f64,
    /// Mirror across the forward axis with probability 1/2.
    pub mirror: bool,
    /// Largest relative change of scale.
    pub max_scale: f64,
}

impl RoiAugment {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            max_rad: cfg.roi_rotation_deg.to_radians(),
            mirror: cfg.roi_mirror,
            max_scale: cfg.roi_scale,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.max_rad == 0.0 && !self.mirror && self.max_scale == 0.0
    }
}

/// Applies an independent mirror, turn and scale to each RoI. Local point
/// offsets, the target center offset, size and heading transform together;
/// point features and image samples are unchanged. With `symmetric` the new
/// heading is folded back into `[-π/2, π/2)`.
pub fn augment_rois<R: Rng + ?Sized>(
    rois: &RoiSet,
    targets: &[RoiTarget],
    aug: &RoiAugment,
    codec: &AngleBinCodec,
    symmetric: bool,
    rng: &mut R,
) -> Result<(RoiBatch, Vec<RoiTarget>)> {
    let mut batch = rois.batch.clone();
    let k = batch.k_pool;
    let mut out = Vec::with_capacity(targets.len());
    for (r, t) in targets.iter().enumerate() {
        let flip = aug.mirror && rng.gen_bool(0.5);
        let a = if aug.max_rad > 0.0 { rng.gen_range(-aug.max_rad..=aug.max_rad) } else { 0.0 };
        let scale = if aug.max_scale > 0.0 { 1.0 + rng.gen_range(-aug.max_scale..=aug.max_scale) } else { 1.0 };
        let (s, c) = a.sin_cos();
        let apply = |v: &mut [f64]| {
            let (x, y) = (v[0], if flip { -v[1] } else { v[1] });
            v[0] = scale * (c * x - s * y);
            v[1] = scale * (s * x + c * y);
            v[2] *= scale;
        };
        for row in r * k..(r + 1) * k {
            apply(batch.points.row_mut(row));
        }
        out.push(match *t {
            RoiTarget::Background => RoiTarget::Background,
            RoiTarget::Object {
                class,
                mut center_offset,
                size,
                bin,
                residual,
            } => {
                apply(&mut center_offset);
                let yaw = codec.decode(bin, residual)?;
                let yaw = if flip { -yaw } else { yaw } + a;
                let (bin, residual) = codec.encode(if symmetric { fold_heading(yaw) } else { yaw });
                RoiTarget::Object {
                    class,
                    center_offset,
                    size: size.map(|d| d * scale),
                    bin,
                    residual,
                }
            }
        });
    }
    Ok((batch, out))
}

/// Detection loss of one scene's RoIs, accumulating RoI-stage and head
/// gradients scaled by `scale`. The RoI inputs are treated as constants.
fn back_step(
    det: &Detector,
    cfg: &TrainConfig,
    rois: &RoiSet,
    targets: &[RoiTarget],
    aug: Option<&mut ChaCha8Rng>,
    grads: &mut Grads,
    scale: f64,
) -> Result<LossBreakdown> {
    if rois.centers.is_empty() {
        return Ok(LossBreakdown::default());
    }
    let augment = RoiAugment::from_config(cfg);
    let augmented;
    let (batch, targets) = match aug {
        Some(rng) if !augment.is_identity() => {
            augmented = augment_rois(rois, targets, &augment, &det.codec(), det.cfg.symmetric_heading, rng)?;
            (&augmented.0, augmented.1.as_slice())
        }
        _ => (&rois.batch, targets),
    };
    let (fused, fcache) = det.fusion.forward_train(batch)?;
    let (enc, hcache) = det.head.forward_train(&fused)?;
    let (breakdown, mut g) = detection_loss(&enc, det.layout(), targets, &cfg.loss)?;
    g.as_mut_slice().iter_mut().for_each(|x| *x *= scale);
    let g_fused = det.head.backward(&hcache, &g, &mut grads.head);
    det.fusion.backward(&fcache, &g_fused, &mut grads.fusion);
    Ok(breakdown)
}

/// Losses of one scene without updating anything, as seen in evaluation.
pub fn scene_losses(det: &Detector, cfg: &TrainConfig, frame: &Frame, seed: u64) -> Result<SceneLoss> {
    let pass = front_step(det, cfg, frame, seed, None, 1.0)?;
    let mut scratch = Grads::new(det);
    Ok(SceneLoss {
        seg: pass.seg,
        vote: pass.vote,
        det: back_step(det, cfg, &pass.rois, &pass.targets, None, &mut scratch, 1.0)?,
    })
}

/// Optimizer state across epochs.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub seed: u64,
    backbone: Adam,
    vote: Adam,
    fusion: Adam,
    head: Adam,
    /// Frozen front-end passes, indexed by variant then scene.
    cache: Option<Vec<Vec<FrontPass>>>,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            seed,
            backbone: Adam::new(cfg.backbone_lr.base_lr),
            vote: Adam::new(cfg.backbone_lr.base_lr),
            fusion: Adam::new(cfg.head_lr.base_lr),
            head: Adam::new(cfg.head_lr.base_lr),
            cache: None,
        })
    }

    /// Forgets the RoI stage's optimizer state, for use after
    /// [`Detector::reset_back`].
    pub fn reset_back(&mut self) {
        self.fusion = Adam::new(self.cfg.head_lr.base_lr);
        self.head = Adam::new(self.cfg.head_lr.base_lr);
        self.cache = None;
    }

    fn ensure_cache(&mut self, det: &Detector, frames: &[Frame]) -> Result<()> {
        let v = self.cfg.head_cache_variants;
        if self.cache.is_some() || v == 0 {
            return Ok(());
        }
        let cache = (0..v)
            .map(|k| {
                // variant seeds sit far from any epoch's
                let s = epoch_seed(self.seed, usize::MAX - k);
                frames
                    .iter()
                    .map(|f| front_step(det, &self.cfg, f, s, None, 1.0))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        self.cache = Some(cache);
        Ok(())
    }

    pub fn stage(&self, epoch: usize) -> Stage {
        if epoch <= self.cfg.backbone_epochs {
            Stage::Joint
        } else {
            Stage::Head
        }
    }

    /// One pass over `frames` in a seeded shuffled order. `epoch` is 1-based.
    pub fn epoch(&mut self, det: &mut Detector, frames: &[Frame], epoch: usize) -> Result<EpochLog> {
        let stage = self.stage(epoch);
        let front = stage == Stage::Joint;
        let back_lr = self.cfg.backbone_lr.lr(epoch);
        let head_lr = self.cfg.head_lr.lr(epoch);
        self.backbone.lr = back_lr;
        self.vote.lr = back_lr;
        self.fusion.lr = head_lr;
        self.head.lr = head_lr;

        if front {
            self.cache = None;
        } else {
            self.ensure_cache(det, frames)?;
        }
        let sseed = epoch_seed(self.seed, epoch);
        let cached = self.cache.as_ref().map(|c| &c[epoch % c.len()]);
        let mut order: Vec<usize> = (0..frames.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(self.seed, epoch)));
        let mut aug = ChaCha8Rng::seed_from_u64(epoch_seed(!self.seed, epoch));
        let mut grads = Grads::new(det);
        let mut mean = SceneLoss::default();
        let inv = 1.0 / frames.len().max(1) as f64;
        for batch in order.chunks(self.cfg.batch_size) {
            grads.clear(front);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let fresh;
                let pass = match cached {
                    Some(c) => &c[i],
                    None => {
                        let g = if front { Some(&mut grads) } else { None };
                        fresh = front_step(det, &self.cfg, &frames[i], sseed, g, scale)?;
                        &fresh
                    }
                };
                let l = SceneLoss {
                    seg: pass.seg,
                    vote: pass.vote,
                    det: back_step(det, &self.cfg, &pass.rois, &pass.targets, Some(&mut aug), &mut grads, scale)?,
                };
                mean.add_scaled(&l, inv);
            }
            if front {
                self.backbone.step(&mut det.backbone, &grads.backbone);
                self.vote.step(&mut det.vote, &grads.vote);
            }
            self.fusion.step(&mut det.fusion, &grads.fusion);
            self.head.step(&mut det.head, &grads.head);
        }
        Ok(EpochLog {
            epoch,
            stage,
            lr: if front { back_lr } else { head_lr },
            total: mean.total(&self.cfg),
            loss: mean,
        })
    }

    /// Runs epochs `first..=last`, reporting each as it finishes.
    pub fn run(
        &mut self,
        det: &mut Detector,
        frames: &[Frame],
        first: usize,
        last: usize,
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        for e in first..=last {
            let log = self.epoch(det, frames, e)?;
            on_epoch(&log);
            logs.push(log);
        }
        Ok(logs)
    }
}

/// Full training schedule from epoch 1.
pub fn train(
    det: &mut Detector,
    frames: &[Frame],
    cfg: &TrainConfig,
    seed: u64,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    Trainer::new(cfg, seed)?.run(det, frames, 1, cfg.epochs, on_epoch)
}
