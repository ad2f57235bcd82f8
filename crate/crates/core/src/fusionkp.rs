//! Keypoint generation: point-guided keypoints from the final SA stage,
//! pixel-guided keypoints picked through the image segmentation mask, and
//! their aggregation.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::backbone::BackboneOutput;
use crate::error::{Error, Result};
use crate::geom::{project_points, CalibContext};
use crate::micronet::Tensor2;
use crate::sampling::fps_feature;

pub const SEG_MAGIC: &[u8; 4] = b"RFSG";

/// Tolerance on the per-pixel score sum.
pub const SCORE_SUM_TOLERANCE: f64 = 1e-6;

/// A dense `W×H×F` image feature map, stored row-major by pixel row then
/// column then channel.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width * height * channels != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "{width}x{height}x{channels} map needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("feature map contains non-finite values".into()));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn constant(width: usize, height: usize, value: &[f64]) -> Self {
        let data = value.repeat(width * height);
        Self {
            width,
            height,
            channels: value.len(),
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel(&self, u: usize, v: usize) -> &[f64] {
        let start = (v * self.width + u) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Per-pixel class scores (class 0 is background) with an optional image
/// feature block.
#[derive(Clone, Debug, PartialEq)]
pub struct SegScores {
    scores: FeatureMap,
    features: Option<FeatureMap>,
}

impl SegScores {
    pub fn new(width: usize, height: usize, classes: usize, scores: Vec<f64>) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidValue("segmentation needs background plus one class".into()));
        }
        let scores = FeatureMap::new(width, height, classes, scores)?;
        for px in scores.data.chunks_exact(classes) {
            if px.iter().any(|&s| !(0.0..=1.0).contains(&s)) {
                return Err(Error::InvalidValue("segmentation score outside [0, 1]".into()));
            }
            let sum: f64 = px.iter().sum();
            if (sum - 1.0).abs() > SCORE_SUM_TOLERANCE {
                return Err(Error::InvalidValue(format!("pixel scores sum to {sum}")));
            }
        }
        Ok(Self {
            scores,
            features: None,
        })
    }

    /// Every pixel fully background.
    pub fn background(width: usize, height: usize, classes: usize) -> Self {
        let mut px = vec![0.0; classes.max(2)];
        px[0] = 1.0;
        Self {
            scores: FeatureMap::constant(width, height, &px),
            features: None,
        }
    }

    pub fn with_features(mut self, features: FeatureMap) -> Result<Self> {
        if features.width != self.width() || features.height != self.height() {
            return Err(Error::ShapeMismatch(format!(
                "feature block {}x{} for a {}x{} score map",
                features.width,
                features.height,
                self.width(),
                self.height()
            )));
        }
        self.features = Some(features);
        Ok(self)
    }

    pub fn width(&self) -> usize {
        self.scores.width
    }

    pub fn height(&self) -> usize {
        self.scores.height
    }

    pub fn classes(&self) -> usize {
        self.scores.channels
    }

    pub fn scores(&self) -> &FeatureMap {
        &self.scores
    }

    pub fn features(&self) -> Option<&FeatureMap> {
        self.features.as_ref()
    }

    /// Image features used for 2D pooling: the feature block when present,
    /// the class scores otherwise.
    pub fn feature_map(&self) -> &FeatureMap {
        self.features.as_ref().unwrap_or(&self.scores)
    }

    pub fn score(&self, u: usize, v: usize, class: usize) -> f64 {
        self.scores.pixel(u, v)[class]
    }

    /// Highest non-background score at a pixel.
    pub fn foreground_score(&self, u: usize, v: usize) -> f64 {
        self.scores.pixel(u, v)[1..].iter().copied().fold(0.0, f64::max)
    }

    /// Pixel containing the continuous image point, if any.
    pub fn pixel_at(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        if u >= 0.0 && v >= 0.0 && u < self.width() as f64 && v < self.height() as f64 {
            Some((u as usize, v as usize))
        } else {
            None
        }
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::MalformedFile("truncated segmentation header".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32_block<R: Read>(r: &mut R, count: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::MalformedFile("truncated segmentation payload".into()))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn write_f32_block<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

/// `RFSG`, u32 W, u32 H, u32 C, f32 scores, u8 feature flag, then
/// (u32 F, f32 features) when the flag is 1. All little-endian.
pub fn write_seg_scores<W: Write>(seg: &SegScores, mut w: W) -> Result<()> {
    w.write_all(SEG_MAGIC)?;
    for d in [seg.width(), seg.height(), seg.classes()] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    write_f32_block(&mut w, seg.scores.as_slice())?;
    match &seg.features {
        None => w.write_all(&[0u8])?,
        Some(f) => {
            w.write_all(&[1u8])?;
            w.write_all(&(f.channels as u32).to_le_bytes())?;
            write_f32_block(&mut w, f.as_slice())?;
        }
    }
    Ok(())
}

pub fn read_seg_scores<R: Read>(mut r: R) -> Result<SegScores> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::MalformedFile("missing RFSG magic".into()))?;
    if &magic != SEG_MAGIC {
        return Err(Error::MalformedFile("not a segmentation score file".into()));
    }
    let width = read_u32(&mut r)? as usize;
    let height = read_u32(&mut r)? as usize;
    let classes = read_u32(&mut r)? as usize;
    let scores = read_f32_block(&mut r, width * height * classes)?;
    // f32 storage loses the exact unit sum; renormalize per pixel
    let mut scores = scores;
    if classes > 0 {
        for px in scores.chunks_exact_mut(classes) {
            let s: f64 = px.iter().sum();
            if s > 0.0 {
                px.iter_mut().for_each(|v| *v /= s);
            }
        }
    }
    let seg = SegScores::new(width, height, classes, scores)
        .map_err(|e| Error::MalformedFile(e.to_string()))?;
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)
        .map_err(|_| Error::MalformedFile("missing feature flag".into()))?;
    match flag[0] {
        0 => Ok(seg),
        1 => {
            let f = read_u32(&mut r)? as usize;
            let data = read_f32_block(&mut r, width * height * f)?;
            let map = FeatureMap::new(width, height, f, data)
                .map_err(|e| Error::MalformedFile(e.to_string()))?;
            seg.with_features(map)
        }
        other => Err(Error::MalformedFile(format!("bad feature flag {other}"))),
    }
}

/// Source of per-frame image segmentation.
pub trait SegmentationProvider {
    fn segment(&self, frame_id: &str) -> Result<SegScores>;
}

/// Segmentation derived from ground truth, held in memory per frame.
#[derive(Clone, Debug, Default)]
pub struct OracleSegmentation {
    frames: BTreeMap<String, SegScores>,
}

impl OracleSegmentation {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, frame_id: impl Into<String>, seg: SegScores) {
        self.frames.insert(frame_id.into(), seg);
    }
}

impl SegmentationProvider for OracleSegmentation {
    fn segment(&self, frame_id: &str) -> Result<SegScores> {
        self.frames
            .get(frame_id)
            .cloned()
            .ok_or_else(|| Error::MissingKey(format!("segmentation for frame {frame_id}")))
    }
}

/// Precomputed score files named `<frame>.rfsg` in one directory.
#[derive(Clone, Debug)]
pub struct FileSegmentation {
    pub dir: PathBuf,
}

impl FileSegmentation {
    pub fn new(dir: impl AsRef<Path>) -> Self {
        Self {
            dir: dir.as_ref().to_path_buf(),
        }
    }
}

impl SegmentationProvider for FileSegmentation {
    fn segment(&self, frame_id: &str) -> Result<SegScores> {
        let path = self.dir.join(format!("{frame_id}.rfsg"));
        let file = std::fs::File::open(&path)?;
        read_seg_scores(std::io::BufReader::new(file))
    }
}

/// Keypoints with features; point-guided rows come first.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSet {
    pub coords: Vec<[f64; 3]>,
    pub features: Tensor2,
    /// Index of each keypoint in the input cloud.
    pub origin: Vec<usize>,
    /// Number of leading point-guided rows.
    pub point_guided: usize,
}

impl KeypointSet {
    pub fn empty(width: usize) -> Self {
        Self {
            coords: Vec::new(),
            features: Tensor2::zeros(0, width),
            origin: Vec::new(),
            point_guided: 0,
        }
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

/// Keypoints of the backbone's final SA stage, whose sampler selects them.
pub fn point_guided_keypoints(out: &BackboneOutput) -> KeypointSet {
    let stage = out.final_stage();
    KeypointSet {
        coords: stage.coords.clone(),
        features: stage.features.clone(),
        origin: out.final_origin().to_vec(),
        point_guided: stage.len(),
    }
}

/// Indices of cloud points whose pixel has a foreground score of at least
/// `tau_fg`. Points behind the camera or outside the image are excluded.
pub fn foreground_mask(
    coords: &[[f64; 3]],
    calib: &CalibContext,
    seg: &SegScores,
    tau_fg: f64,
) -> Result<Vec<usize>> {
    let (w, h) = calib.image_size();
    if (w as usize, h as usize) != (seg.width(), seg.height()) {
        return Err(Error::ShapeMismatch(format!(
            "segmentation {}x{} for a {w}x{h} camera",
            seg.width(),
            seg.height()
        )));
    }
    Ok(project_points(coords, calib)
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            if !p.in_image {
                return None;
            }
            let (u, v) = seg.pixel_at(p.u, p.v)?;
            (seg.foreground_score(u, v) >= tau_fg).then_some(i)
        })
        .collect())
}

/// Projection, mask, feature mapping and F-FPS. Returns at most `m2`
/// keypoints (fewer when the mask keeps fewer points), carrying the point
/// segmentation features of the chosen points.
pub fn pixel_guided_keypoints(
    coords: &[[f64; 3]],
    calib: &CalibContext,
    seg: &SegScores,
    point_features: &Tensor2,
    m2: usize,
    tau_fg: f64,
) -> Result<KeypointSet> {
    if point_features.rows() != coords.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} feature rows for {} points",
            point_features.rows(),
            coords.len()
        )));
    }
    let mask = foreground_mask(coords, calib, seg, tau_fg)?;
    if mask.is_empty() {
        return Err(Error::NoForegroundPoints);
    }
    let masked = point_features.select_rows(&mask);
    let sel = fps_feature(&masked, m2.min(mask.len()), 0)?;
    let origin: Vec<usize> = sel.indices.iter().map(|&i| mask[i]).collect();
    Ok(KeypointSet {
        coords: origin.iter().map(|&i| coords[i]).collect(),
        features: point_features.select_rows(&origin),
        origin,
        point_guided: 0,
    })
}

/// Appends the image feature at each keypoint's pixel (zeros when it falls
/// outside the image).
pub fn paint_keypoints(kp: &KeypointSet, calib: &CalibContext, seg: &SegScores) -> KeypointSet {
    let map = seg.feature_map();
    let mut painted = Tensor2::zeros(kp.len(), map.channels());
    for (r, p) in project_points(&kp.coords, calib).iter().enumerate() {
        if let (true, Some((u, v))) = (p.in_image, seg.pixel_at(p.u, p.v)) {
            painted.row_mut(r).copy_from_slice(map.pixel(u, v));
        }
    }
    KeypointSet {
        features: kp.features.hcat(&painted).expect("row counts agree"),
        ..kp.clone()
    }
}

/// Row-wise concatenation, point-guided rows first. Duplicates are kept.
pub fn fuse_keypoints(pc: &KeypointSet, img: &KeypointSet) -> Result<KeypointSet> {
    if img.is_empty() {
        return Ok(pc.clone());
    }
    if pc.width() != img.width() {
        return Err(Error::ShapeMismatch(format!(
            "keypoint widths {} and {}",
            pc.width(),
            img.width()
        )));
    }
    let mut coords = pc.coords.clone();
    coords.extend_from_slice(&img.coords);
    let mut origin = pc.origin.clone();
    origin.extend_from_slice(&img.origin);
    Ok(KeypointSet {
        coords,
        features: pc.features.vcat(&img.features)?,
        origin,
        point_guided: pc.len(),
    })
}
