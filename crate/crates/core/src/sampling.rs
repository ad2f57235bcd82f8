//! Farthest-point sampling in coordinate space (D-FPS), feature space (F-FPS)
//! and the half-and-half combination used for keypoint selection.
//!
//! Selection is greedy max-min over squared distances: every step picks the
//! unselected point whose distance to the nearest selected point is largest,
//! breaking ties by the lowest index.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::micronet::Tensor2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingStrategy {
    /// Geometric farthest-point sampling.
    Euclidean,
    /// Farthest-point sampling on feature vectors.
    Feature,
    /// Half geometric, half feature-space.
    Fused,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleSelection {
    /// Selected indices in selection order; unique.
    pub indices: Vec<usize>,
    pub strategy: SamplingStrategy,
}

impl SampleSelection {
    pub fn len(&self) -> usize {
        self.indices.len()
    }
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusedOptions {
    /// Start index of the D-FPS half.
    pub seed_index: usize,
    /// Start index of the F-FPS half.
    pub feature_seed_index: usize,
    /// Weight of the squared geometric distance added to the squared feature
    /// distance in the F-FPS half. Zero gives pure feature distance.
    pub geo_blend: f64,
}

impl Default for FusedOptions {
    fn default() -> Self {
        Self {
            seed_index: 0,
            feature_seed_index: 0,
            geo_blend: 0.0,
        }
    }
}

/// Uniformly random start index, for callers that want the randomized variant.
pub fn random_seed_index<R: Rng + ?Sized>(n: usize, rng: &mut R) -> usize {
    rng.gen_range(0..n)
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lazily evaluated greedy max-min ordering over the rows of a flat matrix.
/// Yields every index exactly once.
struct FarthestPoints<'a> {
    data: &'a [f64],
    dim: usize,
    blend: Option<(&'a [f64], f64)>,
    min_d2: Vec<f64>,
    taken: Vec<bool>,
    next: Option<usize>,
}

impl<'a> FarthestPoints<'a> {
    fn new(data: &'a [f64], dim: usize, n: usize, seed: usize) -> Self {
        Self {
            data,
            dim,
            blend: None,
            min_d2: vec![f64::INFINITY; n],
            taken: vec![false; n],
            next: (n > 0).then_some(seed),
        }
    }

    fn with_blend(mut self, coords: &'a [f64], weight: f64) -> Self {
        if weight != 0.0 {
            self.blend = Some((coords, weight));
        }
        self
    }

    #[inline]
    fn dist(&self, i: usize, j: usize) -> f64 {
        let d = self.dim;
        let mut v = if d == 0 {
            0.0
        } else {
            sq_dist(&self.data[i * d..(i + 1) * d], &self.data[j * d..(j + 1) * d])
        };
        if let Some((coords, w)) = self.blend {
            v += w * sq_dist(&coords[i * 3..i * 3 + 3], &coords[j * 3..j * 3 + 3]);
        }
        v
    }
}

impl Iterator for FarthestPoints<'_> {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        let cur = self.next?;
        self.taken[cur] = true;
        let mut best: Option<(usize, f64)> = None;
        for i in 0..self.min_d2.len() {
            if self.taken[i] {
                continue;
            }
            let d = self.dist(cur, i);
            if d < self.min_d2[i] {
                self.min_d2[i] = d;
            }
            let m = self.min_d2[i];
            if best.map_or(true, |(_, bd)| m > bd) {
                best = Some((i, m));
            }
        }
        self.next = best.map(|(i, _)| i);
        Some(cur)
    }
}

fn check_request(n: usize, count: usize, seed: usize) -> Result<()> {
    if count > n {
        return Err(Error::CountExceedsInput {
            requested: count,
            available: n,
        });
    }
    if n > 0 && seed >= n {
        return Err(Error::InvalidValue(format!(
            "seed index {seed} out of range for {n} points"
        )));
    }
    Ok(())
}

fn flatten(coords: &[[f64; 3]]) -> &[f64] {
    coords.as_flattened()
}

/// Geometric farthest-point sampling (D-FPS).
pub fn fps_euclidean(coords: &[[f64; 3]], count: usize, seed_index: usize) -> Result<SampleSelection> {
    check_request(coords.len(), count, seed_index)?;
    let indices = FarthestPoints::new(flatten(coords), 3, coords.len(), seed_index)
        .take(count)
        .collect();
    Ok(SampleSelection {
        indices,
        strategy: SamplingStrategy::Euclidean,
    })
}

/// Feature-space farthest-point sampling (F-FPS) over the rows of `features`.
pub fn fps_feature(features: &Tensor2, count: usize, seed_index: usize) -> Result<SampleSelection> {
    check_request(features.rows(), count, seed_index)?;
    let indices = FarthestPoints::new(features.as_slice(), features.cols(), features.rows(), seed_index)
        .take(count)
        .collect();
    Ok(SampleSelection {
        indices,
        strategy: SamplingStrategy::Feature,
    })
}

/// Combined sampling: `⌈M/2⌉` indices by D-FPS followed by `⌊M/2⌋` by F-FPS.
///
/// The F-FPS half walks the feature-space greedy order from its own seed and
/// skips any index the D-FPS half already holds, so a collision is replaced by
/// the next F-FPS candidate. The output always has exactly `count` unique
/// indices: D-FPS picks first, then F-FPS picks, each in selection order.
pub fn fps_fused(
    coords: &[[f64; 3]],
    features: &Tensor2,
    count: usize,
    opts: &FusedOptions,
) -> Result<SampleSelection> {
    let n = coords.len();
    if features.rows() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} coordinates but {} feature rows",
            features.rows()
        )));
    }
    check_request(n, count, opts.seed_index)?;
    check_request(n, count, opts.feature_seed_index)?;
    let geo_count = count.div_ceil(2);
    let mut indices: Vec<usize> =
        FarthestPoints::new(flatten(coords), 3, n, opts.seed_index)
            .take(geo_count)
            .collect();
    let mut chosen = vec![false; n];
    for &i in &indices {
        chosen[i] = true;
    }
    let feature_order =
        FarthestPoints::new(features.as_slice(), features.cols(), n, opts.feature_seed_index)
            .with_blend(flatten(coords), opts.geo_blend);
    indices.extend(feature_order.filter(|&i| !chosen[i]).take(count - geo_count));
    Ok(SampleSelection {
        indices,
        strategy: SamplingStrategy::Fused,
    })
}
