//! Prediction layer: per-RoI classification, center offset, absolute size,
//! and hybrid angle-bin classification with per-bin residuals. Also the
//! training targets, the detection loss and class-wise NMS.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{dist2, iou_3d, normalize_angle, OrientedBox3D};
use crate::micronet::{
    cross_entropy, smooth_l1, softmax, Activation, DenseCache, DenseLayer, Layered, Mlp, MlpCache,
    Tensor2,
};

/// Smallest size a decoded box may have along any axis, in meters.
pub const MIN_DECODED_SIZE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ObjectClass {
    Car,
    Pedestrian,
    Cyclist,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 3] = [Self::Car, Self::Pedestrian, Self::Cyclist];

    pub fn name(self) -> &'static str {
        match self {
            Self::Car => "Car",
            Self::Pedestrian => "Pedestrian",
            Self::Cyclist => "Cyclist",
        }
    }

    /// Base RoI dimensions `[h, w, l]` in meters.
    pub fn roi_dims(self) -> [f64; 3] {
        match self {
            Self::Car => [1.8, 5.0, 5.0],
            Self::Pedestrian => [1.8, 1.0, 1.0],
            Self::Cyclist => [1.8, 1.8, 1.8],
        }
    }

    /// Default IoU threshold for a true positive.
    pub fn iou_threshold(self) -> f64 {
        match self {
            Self::Car => 0.7,
            Self::Pedestrian | Self::Cyclist => 0.5,
        }
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Car" | "car" => Ok(Self::Car),
            "Pedestrian" | "pedestrian" => Ok(Self::Pedestrian),
            "Cyclist" | "cyclist" => Ok(Self::Cyclist),
            other => Err(Error::InvalidValue(format!("unknown object class {other:?}"))),
        }
    }
}

/// Yaw as one of `H` equal bins plus a residual from the bin center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AngleBinCodec {
    bins: usize,
}

impl AngleBinCodec {
    pub fn new(bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::Config(format!("angle codec needs at least 2 bins, got {bins}")));
        }
        Ok(Self { bins })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn bin_width(&self) -> f64 {
        2.0 * PI / self.bins as f64
    }

    pub fn center(&self, bin: usize) -> f64 {
        -PI + (bin as f64 + 0.5) * self.bin_width()
    }

    pub fn encode(&self, theta: f64) -> (usize, f64) {
        let t = normalize_angle(theta);
        let bin = (((t + PI) / self.bin_width()).floor() as usize).min(self.bins - 1);
        (bin, t - self.center(bin))
    }

    pub fn decode(&self, bin: usize, residual: f64) -> Result<f64> {
        if bin >= self.bins {
            return Err(Error::BinOutOfRange { bin, bins: self.bins });
        }
        Ok(normalize_angle(self.center(bin) + residual))
    }
}

/// Heading of a half-turn-symmetric box, folded into `[-π/2, π/2)`.
pub fn fold_heading(theta: f64) -> f64 {
    let t = normalize_angle(theta);
    if t >= PI / 2.0 {
        t - PI
    } else if t < -PI / 2.0 {
        t + PI
    } else {
        t
    }
}

/// One RoI's head output, split into its named parts.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxEncoding {
    pub class_logits: Vec<f64>,
    pub center_offset: [f64; 3],
    /// `[h, w, l]` in meters.
    pub size: [f64; 3],
    pub bin_logits: Vec<f64>,
    pub bin_residual: Vec<f64>,
}

/// Column layout of a head output row:
/// `class logits | center offset (3) | size (3) | bin logits (H) | residuals (H)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncodingLayout {
    pub classes: usize,
    pub bins: usize,
}

impl EncodingLayout {
    pub fn width(&self) -> usize {
        self.classes + 6 + 2 * self.bins
    }

    fn center(&self) -> usize {
        self.classes
    }

    fn size(&self) -> usize {
        self.classes + 3
    }

    fn bin(&self) -> usize {
        self.classes + 6
    }

    fn residual(&self) -> usize {
        self.classes + 6 + self.bins
    }

    pub fn split(&self, row: &[f64]) -> BoxEncoding {
        let (c, s, b, r) = (self.center(), self.size(), self.bin(), self.residual());
        BoxEncoding {
            class_logits: row[..c].to_vec(),
            center_offset: [row[c], row[c + 1], row[c + 2]],
            size: [row[s], row[s + 1], row[s + 2]],
            bin_logits: row[b..r].to_vec(),
            bin_residual: row[r..r + self.bins].to_vec(),
        }
    }

    pub fn join(&self, enc: &BoxEncoding) -> Vec<f64> {
        let mut row = enc.class_logits.clone();
        row.extend_from_slice(&enc.center_offset);
        row.extend_from_slice(&enc.size);
        row.extend_from_slice(&enc.bin_logits);
        row.extend_from_slice(&enc.bin_residual);
        row
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Box at `roi_center + offset` with the regressed size and the yaw of the
/// best-scoring bin plus that bin's residual. Sizes are floored at
/// [`MIN_DECODED_SIZE`].
pub fn decode_box(enc: &BoxEncoding, roi_center: [f64; 3], codec: &AngleBinCodec) -> OrientedBox3D {
    let bin = argmax(&enc.bin_logits);
    let yaw = codec
        .decode(bin, enc.bin_residual[bin])
        .expect("argmax is in range");
    let center = [
        roi_center[0] + enc.center_offset[0],
        roi_center[1] + enc.center_offset[1],
        roi_center[2] + enc.center_offset[2],
    ];
    let size = enc.size.map(|s| if s.is_finite() { s.max(MIN_DECODED_SIZE) } else { MIN_DECODED_SIZE });
    OrientedBox3D::new(center, size, yaw).expect("finite, positive size")
}

/// What a RoI should predict.
#[derive(Clone, Debug, PartialEq)]
pub enum RoiTarget {
    Background,
    Object {
        /// Head class index (0 is background).
        class: usize,
        center_offset: [f64; 3],
        size: [f64; 3],
        bin: usize,
        residual: f64,
    },
}

impl RoiTarget {
    pub fn for_box(class: usize, gt: &OrientedBox3D, roi_center: [f64; 3], codec: &AngleBinCodec) -> Self {
        let (bin, residual) = codec.encode(gt.yaw);
        RoiTarget::Object {
            class,
            center_offset: [
                gt.center[0] - roi_center[0],
                gt.center[1] - roi_center[1],
                gt.center[2] - roi_center[2],
            ],
            size: gt.size,
            bin,
            residual,
        }
    }
}

/// Index of the ground-truth box each voted center is assigned to: the
/// nearest box whose centroid lies within `0.8·min(w, l)/2`.
pub fn assign_rois(centers: &[[f64; 3]], gts: &[OrientedBox3D]) -> Vec<Option<usize>> {
    centers
        .iter()
        .map(|c| {
            let mut best: Option<(f64, usize)> = None;
            for (j, g) in gts.iter().enumerate() {
                let r = 0.8 * g.width().min(g.length()) / 2.0;
                let d = dist2(c, &g.center);
                if d < r * r && best.map_or(true, |(bd, _)| d < bd) {
                    best = Some((d, j));
                }
            }
            best.map(|(_, j)| j)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub cls: f64,
    pub center: f64,
    pub size: f64,
    pub bin: f64,
    pub residual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            center: 1.0,
            size: 1.0,
            bin: 1.0,
            residual: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub cls: f64,
    pub center: f64,
    pub size: f64,
    pub bin: f64,
    pub residual: f64,
    pub total: f64,
    pub assigned: usize,
    /// Set when no RoI was assigned to an object; only the background
    /// classification term is present then.
    pub no_assigned_rois: bool,
}

/// Weighted sum of classification, center, size, bin and residual terms.
///
/// Classification is averaged over every RoI; the regression terms are
/// averaged over the RoIs assigned to an object. Returns the breakdown and the
/// gradient with respect to each encoding row.
pub fn detection_loss(
    encodings: &Tensor2,
    layout: EncodingLayout,
    targets: &[RoiTarget],
    weights: &LossWeights,
) -> Result<(LossBreakdown, Tensor2)> {
    if encodings.rows() != targets.len() || encodings.cols() != layout.width() {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} encodings for {} targets of width {}",
            encodings.rows(),
            encodings.cols(),
            targets.len(),
            layout.width()
        )));
    }
    let mut grad = Tensor2::zeros(encodings.rows(), encodings.cols());
    let mut out = LossBreakdown::default();
    if targets.is_empty() {
        out.no_assigned_rois = true;
        return Ok((out, grad));
    }
    let assigned = targets.iter().filter(|t| matches!(t, RoiTarget::Object { .. })).count();
    let cls_scale = 1.0 / targets.len() as f64;
    let reg_scale = if assigned > 0 { 1.0 / assigned as f64 } else { 0.0 };
    for (r, t) in targets.iter().enumerate() {
        let row = encodings.row(r);
        let label = match t {
            RoiTarget::Background => 0,
            RoiTarget::Object { class, .. } => *class,
        };
        if label >= layout.classes {
            return Err(Error::InvalidValue(format!("class {label} outside the head's classes")));
        }
        let (l, g) = cross_entropy(&row[..layout.classes], label);
        out.cls += l * cls_scale;
        let grow = grad.row_mut(r);
        for (gv, d) in grow[..layout.classes].iter_mut().zip(&g) {
            *gv = weights.cls * cls_scale * d;
        }
        if let RoiTarget::Object {
            center_offset,
            size,
            bin,
            residual,
            ..
        } = t
        {
            let c = layout.center();
            let (l, g) = smooth_l1(&row[c..c + 3], center_offset);
            out.center += l * reg_scale;
            for k in 0..3 {
                grow[c + k] = weights.center * reg_scale * g[k];
            }
            let s = layout.size();
            let (l, g) = smooth_l1(&row[s..s + 3], size);
            out.size += l * reg_scale;
            for k in 0..3 {
                grow[s + k] = weights.size * reg_scale * g[k];
            }
            let b = layout.bin();
            let (l, g) = cross_entropy(&row[b..b + layout.bins], *bin);
            out.bin += l * reg_scale;
            for k in 0..layout.bins {
                grow[b + k] = weights.bin * reg_scale * g[k];
            }
            let rc = layout.residual() + bin;
            let (l, g) = smooth_l1(&row[rc..rc + 1], &[*residual]);
            out.residual += l * reg_scale;
            grow[rc] = weights.residual * reg_scale * g[0];
        }
    }
    out.assigned = assigned;
    out.no_assigned_rois = assigned == 0;
    out.total = weights.cls * out.cls
        + weights.center * out.center
        + weights.size * out.size
        + weights.bin * out.bin
        + weights.residual * out.residual;
    Ok((out, grad))
}

#[derive(Clone, Debug)]
pub struct HeadCache {
    hidden: MlpCache,
    out: DenseCache,
}

/// Hidden ReLU layers followed by a linear encoding layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionHead {
    pub hidden: Mlp,
    pub out: DenseLayer,
    pub layout: EncodingLayout,
}

impl DetectionHead {
    pub fn new<R: Rng + ?Sized>(in_width: usize, hidden: &[usize], layout: EncodingLayout, rng: &mut R) -> Self {
        let mlp = Mlp::new(in_width, hidden, rng);
        let width = mlp.out_width(in_width);
        Self {
            hidden: mlp,
            out: DenseLayer::new(width, layout.width(), Activation::Identity, rng),
            layout,
        }
    }

    pub fn forward(&self, x: &Tensor2) -> Result<Tensor2> {
        self.out.forward(&self.hidden.forward(x)?)
    }

    pub fn forward_train(&self, x: &Tensor2) -> Result<(Tensor2, HeadCache)> {
        let (h, hidden) = self.hidden.forward_train(x)?;
        let (o, out) = self.out.forward_train(&h)?;
        Ok((o, HeadCache { hidden, out }))
    }

    pub fn backward(&self, cache: &HeadCache, grad_out: &Tensor2, grads: &mut DetectionHead) -> Tensor2 {
        let gh = self.out.backward(&cache.out, grad_out, &mut grads.out);
        self.hidden.backward(&cache.hidden, &gh, &mut grads.hidden)
    }

    pub fn decode(&self, row: &[f64], roi_center: [f64; 3], codec: &AngleBinCodec) -> (OrientedBox3D, Vec<f64>) {
        let enc = self.layout.split(row);
        (decode_box(&enc, roi_center, codec), softmax(&enc.class_logits))
    }
}

impl Layered for DetectionHead {
    fn layers(&self) -> Vec<&DenseLayer> {
        let mut v: Vec<&DenseLayer> = self.hidden.layers.iter().collect();
        v.push(&self.out);
        v
    }

    fn layers_mut(&mut self) -> Vec<&mut DenseLayer> {
        let mut v: Vec<&mut DenseLayer> = self.hidden.layers.iter_mut().collect();
        v.push(&mut self.out);
        v
    }
}

/// Default NMS overlap threshold.
pub const NMS_IOU: f64 = 0.1;

/// Class-wise greedy NMS on 3D IoU. Candidates are visited by descending
/// score, then ascending index; returns the kept indices in that order.
pub fn nms(boxes: &[OrientedBox3D], scores: &[f64], classes: &[usize], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = kept
            .iter()
            .any(|&k| classes[k] == classes[i] && iou_3d(&boxes[k], &boxes[i]) > iou_threshold);
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}
