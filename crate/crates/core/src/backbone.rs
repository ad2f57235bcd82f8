//! Point-cloud feature extraction: set-abstraction (SA) stages that sample,
//! group by ball query and max-pool a shared MLP, and feature-propagation (FP)
//! stages that interpolate coarse features back onto denser points.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::dist2;
use crate::micronet::{
    set_maxpool, set_maxpool_backward, Activation, DenseCache, DenseLayer, Layered, MaxPoolCache,
    Mlp, MlpCache, Tensor2,
};
use crate::sampling::{fps_euclidean, fps_feature, fps_fused, FusedOptions, SamplingStrategy};

/// Points with one feature row each.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub coords: Vec<[f64; 3]>,
    pub features: Tensor2,
}

impl FeatureSet {
    pub fn new(coords: Vec<[f64; 3]>, features: Tensor2) -> Result<Self> {
        if coords.len() != features.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} coordinates but {} feature rows",
                coords.len(),
                features.rows()
            )));
        }
        Ok(Self { coords, features })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SAConfig {
    pub out_points: usize,
    /// Ball-query radius in meters.
    pub radius: f64,
    pub max_neighbors: usize,
    pub mlp_channels: Vec<usize>,
    pub sampler: SamplingStrategy,
}

impl SAConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) {
            return Err(Error::Config(format!("SA radius {} must be positive", self.radius)));
        }
        if self.out_points == 0 || self.max_neighbors == 0 {
            return Err(Error::Config("SA point and neighbor counts must be positive".into()));
        }
        if self.mlp_channels.is_empty() || self.mlp_channels.contains(&0) {
            return Err(Error::Config("SA MLP needs at least one non-zero width".into()));
        }
        Ok(())
    }
}

/// For each center, up to `max_neighbors` cloud indices within `radius`,
/// nearest first (ties by index). A center with no point in range gets its
/// single nearest point, so groups are never empty.
pub fn ball_query(
    centers: &[[f64; 3]],
    cloud: &[[f64; 3]],
    radius: f64,
    max_neighbors: usize,
) -> Vec<Vec<usize>> {
    let r2 = radius * radius;
    let mut scratch: Vec<(f64, usize)> = Vec::new();
    centers
        .iter()
        .map(|c| {
            scratch.clear();
            let mut nearest = (f64::INFINITY, usize::MAX);
            for (j, p) in cloud.iter().enumerate() {
                let d = dist2(c, p);
                if d <= r2 {
                    scratch.push((d, j));
                }
                if d < nearest.0 {
                    nearest = (d, j);
                }
            }
            if scratch.is_empty() {
                return if cloud.is_empty() { Vec::new() } else { vec![nearest.1] };
            }
            let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if scratch.len() > max_neighbors {
                scratch.select_nth_unstable_by(max_neighbors - 1, by_dist);
                scratch.truncate(max_neighbors);
            }
            scratch.sort_unstable_by(by_dist);
            scratch.iter().map(|&(_, j)| j).collect()
        })
        .collect()
}

/// Selected center indices plus the resulting feature set.
#[derive(Clone, Debug)]
pub struct SaOutput {
    pub output: FeatureSet,
    /// Indices of the output points in the stage input.
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SaCache {
    groups: Vec<Vec<usize>>,
    in_rows: usize,
    in_width: usize,
    mlp: MlpCache,
    pool: MaxPoolCache,
}

/// One set-abstraction stage.
#[derive(Clone, Debug, PartialEq)]
pub struct SaLayer {
    pub cfg: SAConfig,
    pub mlp: Mlp,
}

impl SaLayer {
    pub fn new<R: Rng + ?Sized>(in_width: usize, cfg: SAConfig, rng: &mut R) -> Self {
        let mlp = Mlp::new(3 + in_width, &cfg.mlp_channels, rng);
        Self { cfg, mlp }
    }

    pub fn with_mlp(cfg: SAConfig, mlp: Mlp) -> Self {
        Self { cfg, mlp }
    }

    pub fn out_width(&self, in_width: usize) -> usize {
        self.mlp.out_width(3 + in_width)
    }

    /// Centers for this stage; `out_points` is clamped to the input size.
    pub fn sample(&self, input: &FeatureSet) -> Result<Vec<usize>> {
        let m = self.cfg.out_points.min(input.len());
        let sel = match self.cfg.sampler {
            SamplingStrategy::Euclidean => fps_euclidean(&input.coords, m, 0)?,
            SamplingStrategy::Feature => fps_feature(&input.features, m, 0)?,
            SamplingStrategy::Fused => {
                fps_fused(&input.coords, &input.features, m, &FusedOptions::default())?
            }
        };
        Ok(sel.indices)
    }

    fn grouped_input(input: &FeatureSet, centers: &[usize], groups: &[Vec<usize>]) -> Tensor2 {
        let width = 3 + input.width();
        let rows: usize = groups.iter().map(Vec::len).sum();
        let mut x = Tensor2::zeros(rows, width);
        let mut r = 0;
        for (&c, g) in centers.iter().zip(groups) {
            let cp = input.coords[c];
            for &j in g {
                let row = x.row_mut(r);
                let p = input.coords[j];
                row[0] = p[0] - cp[0];
                row[1] = p[1] - cp[1];
                row[2] = p[2] - cp[2];
                row[3..].copy_from_slice(input.features.row(j));
                r += 1;
            }
        }
        x
    }

    fn prepare(&self, input: &FeatureSet) -> Result<(Vec<usize>, Vec<Vec<usize>>, Tensor2)> {
        let centers = self.sample(input)?;
        let center_coords: Vec<[f64; 3]> = centers.iter().map(|&i| input.coords[i]).collect();
        let groups = ball_query(
            &center_coords,
            &input.coords,
            self.cfg.radius,
            self.cfg.max_neighbors,
        );
        let x = Self::grouped_input(input, &centers, &groups);
        Ok((centers, groups, x))
    }

    pub fn forward(&self, input: &FeatureSet) -> Result<SaOutput> {
        let (centers, groups, x) = self.prepare(input)?;
        let h = self.mlp.forward(&x)?;
        let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
        let (pooled, _) = set_maxpool(&h, &sizes)?;
        let coords = centers.iter().map(|&i| input.coords[i]).collect();
        Ok(SaOutput {
            output: FeatureSet::new(coords, pooled)?,
            indices: centers,
        })
    }

    pub fn forward_train(&self, input: &FeatureSet) -> Result<(SaOutput, SaCache)> {
        let (centers, groups, x) = self.prepare(input)?;
        let (h, mlp) = self.mlp.forward_train(&x)?;
        let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
        let (pooled, pool) = set_maxpool(&h, &sizes)?;
        let coords = centers.iter().map(|&i| input.coords[i]).collect();
        Ok((
            SaOutput {
                output: FeatureSet::new(coords, pooled)?,
                indices: centers,
            },
            SaCache {
                groups,
                in_rows: input.len(),
                in_width: input.width(),
                mlp,
                pool,
            },
        ))
    }

    /// Returns the gradient with respect to the stage's input features.
    /// Coordinates carry no gradient.
    pub fn backward(&self, cache: &SaCache, grad_out: &Tensor2, grads: &mut SaLayer) -> Tensor2 {
        let gh = set_maxpool_backward(&cache.pool, grad_out);
        let gx = self.mlp.backward(&cache.mlp, &gh, &mut grads.mlp);
        let mut grad_in = Tensor2::zeros(cache.in_rows, cache.in_width);
        let mut r = 0;
        for g in &cache.groups {
            for &j in g {
                let src = &gx.row(r)[3..];
                for (a, b) in grad_in.row_mut(j).iter_mut().zip(src) {
                    *a += b;
                }
                r += 1;
            }
        }
        grad_in
    }
}

/// Normalized interpolation weights per query point.
#[derive(Clone, Debug)]
pub struct Interpolation {
    pub neighbors: Vec<Vec<(usize, f64)>>,
}

impl Interpolation {
    pub fn apply(&self, source: &Tensor2) -> Tensor2 {
        let mut out = Tensor2::zeros(self.neighbors.len(), source.cols());
        for (q, nb) in self.neighbors.iter().enumerate() {
            let o = out.row_mut(q);
            for &(j, w) in nb {
                for (ov, &s) in o.iter_mut().zip(source.row(j)) {
                    *ov += w * s;
                }
            }
        }
        out
    }

    /// Transposed application: scatters query gradients back to sources.
    pub fn scatter(&self, grad: &Tensor2, source_rows: usize) -> Tensor2 {
        let mut out = Tensor2::zeros(source_rows, grad.cols());
        for (q, nb) in self.neighbors.iter().enumerate() {
            for &(j, w) in nb {
                for (ov, &g) in out.row_mut(j).iter_mut().zip(grad.row(q)) {
                    *ov += w * g;
                }
            }
        }
        out
    }
}

/// Squared distance under which a query is treated as coinciding with a source.
const COINCIDENT_D2: f64 = 1e-16;

/// Inverse-squared-distance weights over the `k` nearest sources of each query
/// (`k` is clamped to the source size). A query within 1e-8 m of a source takes
/// that source's feature exactly.
pub fn interpolation_weights(
    query: &[[f64; 3]],
    source: &[[f64; 3]],
    k: usize,
) -> Result<Interpolation> {
    if source.is_empty() {
        return Err(Error::InvalidValue("interpolation source is empty".into()));
    }
    let k = k.clamp(1, source.len());
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    let neighbors = query
        .iter()
        .map(|q| {
            best.clear();
            for (j, s) in source.iter().enumerate() {
                let d = dist2(q, s);
                if best.len() == k && d >= best[k - 1].0 {
                    continue;
                }
                let pos = best.partition_point(|&(bd, _)| bd <= d);
                best.insert(pos, (d, j));
                best.truncate(k);
            }
            if best[0].0 < COINCIDENT_D2 {
                return vec![(best[0].1, 1.0)];
            }
            let total: f64 = best.iter().map(|&(d, _)| 1.0 / d).sum();
            best.iter().map(|&(d, j)| (j, (1.0 / d) / total)).collect()
        })
        .collect();
    Ok(Interpolation { neighbors })
}

/// `f(x) = Σ wᵢ fᵢ / Σ wᵢ` with `wᵢ = 1/dᵢ²` over the `k` nearest sources.
pub fn fp_interpolate(query: &[[f64; 3]], source: &FeatureSet, k: usize) -> Result<Tensor2> {
    Ok(interpolation_weights(query, &source.coords, k)?.apply(&source.features))
}

#[derive(Clone, Debug)]
pub struct FpCache {
    interp: Interpolation,
    source_rows: usize,
    source_width: usize,
    mlp: MlpCache,
}

/// One feature-propagation stage: interpolate source features onto the query
/// points, concatenate the query's skip features, apply a shared MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct FpLayer {
    pub mlp: Mlp,
    pub k: usize,
}

impl FpLayer {
    pub fn new<R: Rng + ?Sized>(in_width: usize, channels: &[usize], rng: &mut R) -> Self {
        Self {
            mlp: Mlp::new(in_width, channels, rng),
            k: 3,
        }
    }

    fn concat(&self, query: &FeatureSet, source: &FeatureSet) -> Result<(Interpolation, Tensor2)> {
        let expected = self.mlp.layers.first().map(DenseLayer::fan_in);
        if let Some(fan_in) = expected {
            if fan_in != source.width() + query.width() {
                return Err(Error::ShapeMismatch(format!(
                    "FP MLP expects {fan_in} inputs, got {} + {}",
                    source.width(),
                    query.width()
                )));
            }
        }
        let interp = interpolation_weights(&query.coords, &source.coords, self.k)?;
        let x = interp.apply(&source.features).hcat(&query.features)?;
        Ok((interp, x))
    }

    pub fn forward(&self, query: &FeatureSet, source: &FeatureSet) -> Result<FeatureSet> {
        let (_, x) = self.concat(query, source)?;
        FeatureSet::new(query.coords.clone(), self.mlp.forward(&x)?)
    }

    pub fn forward_train(
        &self,
        query: &FeatureSet,
        source: &FeatureSet,
    ) -> Result<(FeatureSet, FpCache)> {
        let (interp, x) = self.concat(query, source)?;
        let (h, mlp) = self.mlp.forward_train(&x)?;
        Ok((
            FeatureSet::new(query.coords.clone(), h)?,
            FpCache {
                interp,
                source_rows: source.len(),
                source_width: source.width(),
                mlp,
            },
        ))
    }

    /// Returns `(grad wrt source features, grad wrt query skip features)`.
    pub fn backward(&self, cache: &FpCache, grad_out: &Tensor2, grads: &mut FpLayer) -> (Tensor2, Tensor2) {
        let gx = self.mlp.backward(&cache.mlp, grad_out, &mut grads.mlp);
        let (g_interp, g_skip) = gx.split_cols(cache.source_width);
        (cache.interp.scatter(&g_interp, cache.source_rows), g_skip)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub sa: Vec<SAConfig>,
    /// Output widths of each FP stage's MLP, in application order (coarsest first).
    pub fp: Vec<Vec<usize>>,
    /// Classes of the per-point segmentation head (background included).
    pub seg_classes: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sa.is_empty() {
            return Err(Error::Config("backbone needs at least one SA stage".into()));
        }
        if self.fp.len() != self.sa.len() {
            return Err(Error::Config(format!(
                "{} FP stages for {} SA stages",
                self.fp.len(),
                self.sa.len()
            )));
        }
        for s in &self.sa {
            s.validate()?;
        }
        if self.fp.iter().any(|c| c.is_empty() || c.contains(&0)) {
            return Err(Error::Config("every FP stage needs non-zero widths".into()));
        }
        if self.seg_classes < 2 {
            return Err(Error::Config("segmentation needs at least two classes".into()));
        }
        Ok(())
    }

    /// Width of the final SA stage's features.
    pub fn keypoint_width(&self) -> usize {
        *self.sa.last().unwrap().mlp_channels.last().unwrap()
    }

    /// Width of the per-point features after the last FP stage.
    pub fn point_width(&self) -> usize {
        *self.fp.last().unwrap().last().unwrap()
    }
}

/// Every intermediate product of a backbone pass.
#[derive(Clone, Debug)]
pub struct BackboneOutput {
    /// Stage 0 is the input cloud; stage `i + 1` is the output of SA `i`.
    pub stages: Vec<FeatureSet>,
    /// Indices of each SA stage's points in the original cloud.
    pub stage_origin: Vec<Vec<usize>>,
    /// Per-point segmentation features for every input point.
    pub point_features: Tensor2,
    pub seg_logits: Tensor2,
}

impl BackboneOutput {
    pub fn final_stage(&self) -> &FeatureSet {
        self.stages.last().unwrap()
    }

    pub fn final_origin(&self) -> &[usize] {
        self.stage_origin.last().unwrap()
    }
}

#[derive(Clone, Debug)]
pub struct BackboneCache {
    sa: Vec<SaCache>,
    fp: Vec<FpCache>,
    seg: DenseCache,
    stage_rows: Vec<usize>,
    stage_widths: Vec<usize>,
}

/// SA stages followed by mirrored FP stages and a per-point segmentation head.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub sa: Vec<SaLayer>,
    pub fp: Vec<FpLayer>,
    pub seg_head: DenseLayer,
}

impl Backbone {
    /// Input point features are one reflectance channel.
    pub const INPUT_WIDTH: usize = 1;

    pub fn new<R: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut widths = vec![Self::INPUT_WIDTH];
        let mut sa = Vec::new();
        for c in &cfg.sa {
            let layer = SaLayer::new(*widths.last().unwrap(), c.clone(), rng);
            widths.push(layer.out_width(*widths.last().unwrap()));
            sa.push(layer);
        }
        let mut fp = Vec::new();
        let mut current = *widths.last().unwrap();
        for (i, channels) in cfg.fp.iter().enumerate() {
            let skip = widths[cfg.sa.len() - 1 - i];
            fp.push(FpLayer::new(current + skip, channels, rng));
            current = *channels.last().unwrap();
        }
        let seg_head = DenseLayer::new(current, cfg.seg_classes, Activation::Identity, rng);
        Ok(Self { sa, fp, seg_head })
    }

    pub fn input_features(reflectance: &[f64]) -> Tensor2 {
        Tensor2::from_vec(reflectance.len(), 1, reflectance.to_vec()).expect("one column")
    }

    fn run(&self, input: FeatureSet, train: bool) -> Result<(BackboneOutput, Option<BackboneCache>)> {
        let mut stages = vec![input];
        let mut origin: Vec<Vec<usize>> = Vec::new();
        let mut sa_caches = Vec::new();
        for (i, layer) in self.sa.iter().enumerate() {
            let (out, cache) = if train {
                let (o, c) = layer.forward_train(&stages[i])?;
                (o, Some(c))
            } else {
                (layer.forward(&stages[i])?, None)
            };
            let composed = match origin.last() {
                Some(prev) => out.indices.iter().map(|&j| prev[j]).collect(),
                None => out.indices.clone(),
            };
            origin.push(composed);
            sa_caches.extend(cache);
            stages.push(out.output);
        }
        let k = self.sa.len();
        let mut fp_caches = Vec::new();
        let mut current = stages[k].clone();
        for (i, layer) in self.fp.iter().enumerate() {
            let query = &stages[k - 1 - i];
            current = if train {
                let (o, c) = layer.forward_train(query, &current)?;
                fp_caches.push(c);
                o
            } else {
                layer.forward(query, &current)?
            };
        }
        let point_features = current.features;
        let (seg_logits, seg) = if train {
            let (l, c) = self.seg_head.forward_train(&point_features)?;
            (l, Some(c))
        } else {
            (self.seg_head.forward(&point_features)?, None)
        };
        let cache = seg.map(|seg| BackboneCache {
            sa: sa_caches,
            fp: fp_caches,
            seg,
            stage_rows: stages.iter().map(FeatureSet::len).collect(),
            stage_widths: stages.iter().map(FeatureSet::width).collect(),
        });
        Ok((
            BackboneOutput {
                stages,
                stage_origin: origin,
                point_features,
                seg_logits,
            },
            cache,
        ))
    }

    pub fn forward(&self, coords: &[[f64; 3]], reflectance: &[f64]) -> Result<BackboneOutput> {
        let input = FeatureSet::new(coords.to_vec(), Self::input_features(reflectance))?;
        Ok(self.run(input, false)?.0)
    }

    pub fn forward_train(
        &self,
        coords: &[[f64; 3]],
        reflectance: &[f64],
    ) -> Result<(BackboneOutput, BackboneCache)> {
        let input = FeatureSet::new(coords.to_vec(), Self::input_features(reflectance))?;
        let (out, cache) = self.run(input, true)?;
        Ok((out, cache.expect("train mode")))
    }

    /// Backpropagates gradients arriving at the segmentation logits, the
    /// per-point features and (optionally) the final SA stage's features.
    pub fn backward(
        &self,
        cache: &BackboneCache,
        grad_seg_logits: &Tensor2,
        grad_point_features: Option<&Tensor2>,
        grad_final_stage: Option<&Tensor2>,
        grads: &mut Backbone,
    ) {
        let k = self.sa.len();
        let mut g = self.seg_head.backward(&cache.seg, grad_seg_logits, &mut grads.seg_head);
        if let Some(extra) = grad_point_features {
            g.add_assign(extra);
        }
        let mut stage_grads: Vec<Tensor2> = cache
            .stage_rows
            .iter()
            .zip(&cache.stage_widths)
            .map(|(&r, &w)| Tensor2::zeros(r, w))
            .collect();
        for i in (0..self.fp.len()).rev() {
            let (g_source, g_skip) = self.fp[i].backward(&cache.fp[i], &g, &mut grads.fp[i]);
            stage_grads[k - 1 - i].add_assign(&g_skip);
            g = g_source;
        }
        stage_grads[k].add_assign(&g);
        if let Some(extra) = grad_final_stage {
            stage_grads[k].add_assign(extra);
        }
        for i in (0..k).rev() {
            let gin = self.sa[i].backward(&cache.sa[i], &stage_grads[i + 1], &mut grads.sa[i]);
            if i > 0 {
                stage_grads[i].add_assign(&gin);
            }
        }
    }
}

impl Layered for Backbone {
    fn layers(&self) -> Vec<&DenseLayer> {
        let mut v: Vec<&DenseLayer> = Vec::new();
        for s in &self.sa {
            v.extend(s.mlp.layers.iter());
        }
        for f in &self.fp {
            v.extend(f.mlp.layers.iter());
        }
        v.push(&self.seg_head);
        v
    }

    fn layers_mut(&mut self) -> Vec<&mut DenseLayer> {
        let mut v: Vec<&mut DenseLayer> = Vec::new();
        for s in &mut self.sa {
            v.extend(s.mlp.layers.iter_mut());
        }
        for f in &mut self.fp {
            v.extend(f.mlp.layers.iter_mut());
        }
        v.push(&mut self.seg_head);
        v
    }
}
