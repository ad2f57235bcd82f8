//! RoI fusion: voted centers, class-sized 3D RoIs around them, point pooling
//! inside each RoI, bilinear pooling over its image projection, and the
//! fusion of both pooled features.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusionkp::{FeatureMap, KeypointSet};
use crate::geom::{dist2, RoI2D, RoI3D};
use crate::micronet::{
    set_maxpool, set_maxpool_backward, smooth_l1, Activation, DenseCache, DenseLayer, Layered,
    MaxPoolCache, Mlp, MlpCache, Tensor2,
};

/// Voted object centers, one per keypoint.
#[derive(Clone, Debug, PartialEq)]
pub struct VoteOutput {
    pub centers: Vec<[f64; 3]>,
    pub vote_features: Tensor2,
}

#[derive(Clone, Debug)]
pub struct VoteCache {
    hidden: MlpCache,
    out: DenseCache,
}

/// A hidden ReLU layer followed by a linear 3-vector offset.
#[derive(Clone, Debug, PartialEq)]
pub struct VoteNet {
    pub hidden: Mlp,
    pub offset: DenseLayer,
}

impl VoteNet {
    pub fn new<R: Rng + ?Sized>(in_width: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mlp = Mlp::new(in_width, hidden, rng);
        let width = mlp.out_width(in_width);
        Self {
            hidden: mlp,
            offset: DenseLayer::new(width, 3, Activation::Identity, rng),
        }
    }

    /// Predicts zero offsets for any input.
    pub fn zeros(in_width: usize, hidden: usize) -> Self {
        Self {
            hidden: Mlp::from_layers(vec![DenseLayer::zeros(in_width, hidden, Activation::Relu)]),
            offset: DenseLayer::zeros(hidden, 3, Activation::Identity),
        }
    }

    fn assemble(kp: &KeypointSet, features: Tensor2, offsets: &Tensor2) -> VoteOutput {
        let centers = kp
            .coords
            .iter()
            .zip(offsets.iter_rows())
            .map(|(c, o)| [c[0] + o[0], c[1] + o[1], c[2] + o[2]])
            .collect();
        VoteOutput {
            centers,
            vote_features: features,
        }
    }

    pub fn forward(&self, kp: &KeypointSet) -> Result<VoteOutput> {
        let h = self.hidden.forward(&kp.features)?;
        let o = self.offset.forward(&h)?;
        Ok(Self::assemble(kp, h, &o))
    }

    pub fn forward_train(&self, kp: &KeypointSet) -> Result<(VoteOutput, VoteCache)> {
        let (h, hidden) = self.hidden.forward_train(&kp.features)?;
        let (o, out) = self.offset.forward_train(&h)?;
        Ok((Self::assemble(kp, h, &o), VoteCache { hidden, out }))
    }

    /// Gradient with respect to the keypoint features, given the gradient on
    /// the voted centers. Keypoint coordinates are constants.
    pub fn backward(&self, cache: &VoteCache, grad_centers: &Tensor2, grads: &mut VoteNet) -> Tensor2 {
        let gh = self.offset.backward(&cache.out, grad_centers, &mut grads.offset);
        self.hidden.backward(&cache.hidden, &gh, &mut grads.hidden)
    }
}

impl Layered for VoteNet {
    fn layers(&self) -> Vec<&DenseLayer> {
        let mut v: Vec<&DenseLayer> = self.hidden.layers.iter().collect();
        v.push(&self.offset);
        v
    }

    fn layers_mut(&mut self) -> Vec<&mut DenseLayer> {
        let mut v: Vec<&mut DenseLayer> = self.hidden.layers.iter_mut().collect();
        v.push(&mut self.offset);
        v
    }
}

/// Smooth-L1 between voted centers and their targets, averaged over the
/// keypoints that have one. Returns the loss, the gradient on the centers and
/// the number of supervised keypoints.
pub fn vote_loss(centers: &[[f64; 3]], targets: &[Option<[f64; 3]>]) -> (f64, Tensor2, usize) {
    let mut grad = Tensor2::zeros(centers.len(), 3);
    let n = targets.iter().flatten().count();
    if n == 0 {
        return (0.0, grad, 0);
    }
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    for (i, (c, t)) in centers.iter().zip(targets).enumerate() {
        if let Some(t) = t {
            let (l, g) = smooth_l1(c, t);
            loss += l * scale;
            for (gv, d) in grad.row_mut(i).iter_mut().zip(g) {
                *gv = d * scale;
            }
        }
    }
    (loss, grad, n)
}

/// Axis-aligned RoI with extent `(h+η, w+η, l+η)` around `center`.
pub fn make_roi3d(center: [f64; 3], class_dims: [f64; 3], eta: f64) -> Result<RoI3D> {
    if !(eta >= 0.0) {
        return Err(Error::InvalidValue(format!("RoI extension {eta} is negative")));
    }
    Ok(RoI3D {
        center,
        extent: class_dims.map(|d| d + eta),
    })
}

/// Point-pooling input for one RoI: `k_pool` rows of (offset from the RoI
/// center ⊕ point feature). `None` when no point lies inside.
///
/// Interior points beyond `k_pool` are thinned by farthest-point sampling
/// seeded at the point nearest the RoI center; fewer are repeated cyclically.
/// Both choices depend only on the interior set's geometry, so the result is
/// independent of the cloud's point order up to exact distance ties.
pub fn gather_roi_points(
    roi: &RoI3D,
    coords: &[[f64; 3]],
    features: &Tensor2,
    k_pool: usize,
) -> Option<Tensor2> {
    let inside: Vec<usize> = (0..coords.len()).filter(|&i| roi.contains(coords[i])).collect();
    if inside.is_empty() || k_pool == 0 {
        return None;
    }
    let chosen = if inside.len() > k_pool {
        let seed = (0..inside.len())
            .min_by(|&a, &b| {
                dist2(&coords[inside[a]], &roi.center).total_cmp(&dist2(&coords[inside[b]], &roi.center))
            })
            .unwrap();
        let local: Vec<[f64; 3]> = inside.iter().map(|&i| coords[i]).collect();
        let sel = crate::sampling::fps_euclidean(&local, k_pool, seed).expect("k_pool < interior");
        sel.indices.iter().map(|&j| inside[j]).collect::<Vec<_>>()
    } else {
        (0..k_pool).map(|j| inside[j % inside.len()]).collect()
    };
    let mut x = Tensor2::zeros(k_pool, 3 + features.cols());
    for (r, &i) in chosen.iter().enumerate() {
        let row = x.row_mut(r);
        for d in 0..3 {
            row[d] = coords[i][d] - roi.center[d];
        }
        row[3..].copy_from_slice(features.row(i));
    }
    Some(x)
}

/// Shared MLP over the gathered points, then channel max-pool. An empty RoI
/// yields a zero vector and `true`.
pub fn pool_roi3d(
    roi: &RoI3D,
    coords: &[[f64; 3]],
    features: &Tensor2,
    k_pool: usize,
    pool_mlp: &Mlp,
) -> Result<(Vec<f64>, bool)> {
    let width = pool_mlp.out_width(3 + features.cols());
    match gather_roi_points(roi, coords, features, k_pool) {
        None => Ok((vec![0.0; width], true)),
        Some(x) => {
            let h = pool_mlp.forward(&x)?;
            let (p, _) = set_maxpool(&h, &[h.rows()])?;
            Ok((p.into_vec(), false))
        }
    }
}

/// Bilinear value at continuous pixel coordinates, pixel centers at `+0.5`,
/// clamped to the border.
pub fn bilinear(map: &FeatureMap, u: f64, v: f64, out: &mut [f64]) {
    let (w, h) = (map.width(), map.height());
    let x = (u - 0.5).clamp(0.0, (w - 1) as f64);
    let y = (v - 0.5).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let taps = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x1, y0, fx * (1.0 - fy)),
        (x0, y1, (1.0 - fx) * fy),
        (x1, y1, fx * fy),
    ];
    out.iter_mut().for_each(|o| *o = 0.0);
    for (px, py, wt) in taps {
        if wt == 0.0 {
            continue;
        }
        for (o, &f) in out.iter_mut().zip(map.pixel(px, py)) {
            *o += wt * f;
        }
    }
}

/// Minimum RoI side, in pixels, for 2D pooling.
pub const MIN_ROI_PIXELS: f64 = 1.0;

/// Bilinear samples of the map at the centers of a `g×g` grid over the RoI,
/// flattened cell by cell. `None` for a RoI narrower or shorter than a pixel.
pub fn sample_roi2d(roi: &RoI2D, map: &FeatureMap, g: usize) -> Option<Vec<f64>> {
    if roi.width() < MIN_ROI_PIXELS || roi.height() < MIN_ROI_PIXELS || g == 0 {
        return None;
    }
    let c = map.channels();
    let mut out = vec![0.0; g * g * c];
    let (cw, ch) = (roi.width() / g as f64, roi.height() / g as f64);
    for j in 0..g {
        for i in 0..g {
            let u = roi.u_min + (i as f64 + 0.5) * cw;
            let v = roi.v_min + (j as f64 + 0.5) * ch;
            let k = (j * g + i) * c;
            bilinear(map, u, v, &mut out[k..k + c]);
        }
    }
    Some(out)
}

/// Grid sampling followed by a dense layer. A degenerate RoI yields a zero
/// vector and `true`.
pub fn pool_roi2d(
    roi: &RoI2D,
    map: &FeatureMap,
    g: usize,
    dense: &DenseLayer,
) -> Result<(Vec<f64>, bool)> {
    match sample_roi2d(roi, map, g) {
        None => Ok((vec![0.0; dense.fan_out()], true)),
        Some(s) => Ok((dense.forward(&Tensor2::row_vector(&s))?.into_vec(), false)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FusionStrategy {
    #[default]
    Concat,
    Sum,
    Max,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 3] = [Self::Sum, Self::Concat, Self::Max];

    /// Width of the combined vector fed to the fusion MLP.
    pub fn combined_width(self, pc: usize, img: usize) -> usize {
        match self {
            Self::Concat => pc + img,
            Self::Sum | Self::Max => pc,
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Concat => "concat",
            Self::Sum => "sum",
            Self::Max => "max",
        })
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(Self::Concat),
            "sum" => Ok(Self::Sum),
            "max" => Ok(Self::Max),
            other => Err(Error::Config(format!("unknown fusion strategy {other:?}"))),
        }
    }
}

/// Which side won each element of a max fusion (true = point side).
#[derive(Clone, Debug)]
pub struct CombineCache {
    strategy: FusionStrategy,
    pc_width: usize,
    pc_wins: Vec<bool>,
}

/// Row-wise combination of point and image features before the fusion MLP.
pub fn combine(pc: &Tensor2, img: &Tensor2, strategy: FusionStrategy) -> Result<(Tensor2, CombineCache)> {
    if pc.rows() != img.rows() {
        return Err(Error::ShapeMismatch(format!("{} vs {} RoIs", pc.rows(), img.rows())));
    }
    let mut pc_wins = Vec::new();
    let out = match strategy {
        FusionStrategy::Concat => pc.hcat(img)?,
        FusionStrategy::Sum | FusionStrategy::Max => {
            if pc.cols() != img.cols() {
                return Err(Error::ShapeMismatch(format!(
                    "{strategy} fusion of widths {} and {}",
                    pc.cols(),
                    img.cols()
                )));
            }
            let mut out = pc.clone();
            for (o, &b) in out.as_mut_slice().iter_mut().zip(img.as_slice()) {
                if strategy == FusionStrategy::Sum {
                    *o += b;
                } else {
                    let keep = *o >= b;
                    pc_wins.push(keep);
                    if !keep {
                        *o = b;
                    }
                }
            }
            out
        }
    };
    Ok((
        out,
        CombineCache {
            strategy,
            pc_width: pc.cols(),
            pc_wins,
        },
    ))
}

/// Splits the combined gradient into `(grad pc, grad img)`.
pub fn combine_backward(cache: &CombineCache, grad: &Tensor2) -> (Tensor2, Tensor2) {
    match cache.strategy {
        FusionStrategy::Concat => grad.split_cols(cache.pc_width),
        FusionStrategy::Sum => (grad.clone(), grad.clone()),
        FusionStrategy::Max => {
            let mut gp = grad.clone();
            let mut gi = grad.clone();
            for ((p, i), &w) in gp
                .as_mut_slice()
                .iter_mut()
                .zip(gi.as_mut_slice())
                .zip(&cache.pc_wins)
            {
                if w {
                    *i = 0.0;
                } else {
                    *p = 0.0;
                }
            }
            (gp, gi)
        }
    }
}

/// `MLP(combine(pc, img))` for a single RoI.
pub fn fuse_roi(pc: &[f64], img: &[f64], strategy: FusionStrategy, fuse_mlp: &Mlp) -> Result<Vec<f64>> {
    let (x, _) = combine(&Tensor2::row_vector(pc), &Tensor2::row_vector(img), strategy)?;
    Ok(fuse_mlp.forward(&x)?.into_vec())
}

/// Pooled inputs for a batch of non-empty RoIs.
#[derive(Clone, Debug)]
pub struct RoiBatch {
    /// `rois × k_pool` rows of point-pooling input.
    pub points: Tensor2,
    pub k_pool: usize,
    /// One row of flattened grid samples per RoI; zeros for degenerate RoIs.
    pub image: Tensor2,
}

impl RoiBatch {
    pub fn len(&self) -> usize {
        self.image.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.image.rows() == 0
    }

    pub fn select(&self, rois: &[usize]) -> RoiBatch {
        let rows: Vec<usize> = rois
            .iter()
            .flat_map(|&r| r * self.k_pool..(r + 1) * self.k_pool)
            .collect();
        RoiBatch {
            points: self.points.select_rows(&rows),
            k_pool: self.k_pool,
            image: self.image.select_rows(rois),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RoiFusionCache {
    pool: MlpCache,
    maxpool: MaxPoolCache,
    img: DenseCache,
    combine: CombineCache,
    fuse: MlpCache,
}

/// Trainable part of the RoI stage: point pooling MLP, image dense layer and
/// fusion MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiFusion {
    pub pool_mlp: Mlp,
    pub img_dense: DenseLayer,
    pub fuse_mlp: Mlp,
    pub strategy: FusionStrategy,
}

impl RoiFusion {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        point_width: usize,
        pool_channels: &[usize],
        image_samples: usize,
        img_width: usize,
        fuse_channels: &[usize],
        strategy: FusionStrategy,
        rng: &mut R,
    ) -> Result<Self> {
        let pool_mlp = Mlp::new(3 + point_width, pool_channels, rng);
        let pc_width = pool_mlp.out_width(3 + point_width);
        if strategy != FusionStrategy::Concat && pc_width != img_width {
            return Err(Error::Config(format!(
                "{strategy} fusion needs equal widths, got {pc_width} and {img_width}"
            )));
        }
        let img_dense = DenseLayer::new(image_samples, img_width, Activation::Relu, rng);
        let fuse_mlp = Mlp::new(strategy.combined_width(pc_width, img_width), fuse_channels, rng);
        Ok(Self {
            pool_mlp,
            img_dense,
            fuse_mlp,
            strategy,
        })
    }

    pub fn out_width(&self) -> usize {
        let pc = self.pool_mlp.layers.last().map_or(0, DenseLayer::fan_out);
        self.fuse_mlp
            .out_width(self.strategy.combined_width(pc, self.img_dense.fan_out()))
    }

    fn pooled(&self, batch: &RoiBatch) -> Result<(Tensor2, MlpCache, MaxPoolCache)> {
        let (h, cache) = self.pool_mlp.forward_train(&batch.points)?;
        let (p, mp) = set_maxpool(&h, &vec![batch.k_pool; batch.len()])?;
        Ok((p, cache, mp))
    }

    pub fn forward(&self, batch: &RoiBatch) -> Result<Tensor2> {
        if batch.is_empty() {
            return Ok(Tensor2::zeros(0, self.out_width()));
        }
        let h = self.pool_mlp.forward(&batch.points)?;
        let (pc, _) = set_maxpool(&h, &vec![batch.k_pool; batch.len()])?;
        let img = self.img_dense.forward(&batch.image)?;
        let (x, _) = combine(&pc, &img, self.strategy)?;
        self.fuse_mlp.forward(&x)
    }

    pub fn forward_train(&self, batch: &RoiBatch) -> Result<(Tensor2, RoiFusionCache)> {
        let (pc, pool, maxpool) = self.pooled(batch)?;
        let (img, img_cache) = self.img_dense.forward_train(&batch.image)?;
        let (x, combine_cache) = combine(&pc, &img, self.strategy)?;
        let (out, fuse) = self.fuse_mlp.forward_train(&x)?;
        Ok((
            out,
            RoiFusionCache {
                pool,
                maxpool,
                img: img_cache,
                combine: combine_cache,
                fuse,
            },
        ))
    }

    /// Accumulates parameter gradients. Pooling inputs are treated as
    /// constants.
    pub fn backward(&self, cache: &RoiFusionCache, grad_out: &Tensor2, grads: &mut RoiFusion) {
        let gx = self.fuse_mlp.backward(&cache.fuse, grad_out, &mut grads.fuse_mlp);
        let (gpc, gimg) = combine_backward(&cache.combine, &gx);
        self.img_dense.backward(&cache.img, &gimg, &mut grads.img_dense);
        let gh = set_maxpool_backward(&cache.maxpool, &gpc);
        self.pool_mlp.backward(&cache.pool, &gh, &mut grads.pool_mlp);
    }
}

impl Layered for RoiFusion {
    fn layers(&self) -> Vec<&DenseLayer> {
        let mut v: Vec<&DenseLayer> = self.pool_mlp.layers.iter().collect();
        v.push(&self.img_dense);
        v.extend(self.fuse_mlp.layers.iter());
        v
    }

    fn layers_mut(&mut self) -> Vec<&mut DenseLayer> {
        let mut v: Vec<&mut DenseLayer> = self.pool_mlp.layers.iter_mut().collect();
        v.push(&mut self.img_dense);
        v.extend(self.fuse_mlp.layers.iter_mut());
        v
    }
}
