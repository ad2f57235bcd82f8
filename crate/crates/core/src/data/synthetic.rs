use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use nalgebra::Matrix4;

use crate::error::{Error, Result};
use crate::fusionkp::SegScores;
use crate::geom::{bev_intersection_area, project_points, CalibContext, OrientedBox3D, PointCloud};
use crate::head::ObjectClass;

use super::{subsample_indices, Difficulty, Frame, GroundTruth};

/// Scene layout, sensor and camera model of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    /// Clutter boxes (poles, bushes, crates) per scene.
    pub clutter_objects: usize,
    /// Points per scene after subsampling.
    pub num_points: usize,
    /// Forward range of object centers, meters.
    pub x_range: [f64; 2],
    /// Largest azimuth of an object center, degrees.
    pub max_azimuth_deg: f64,
    pub ground_z: f64,
    pub noise_sigma: f64,
    pub beams: usize,
    pub beam_elevation_deg: [f64; 2],
    pub columns: usize,
    pub azimuth_fov_deg: f64,
    pub max_range: f64,
    pub min_object_points: usize,
    /// Chebyshev radius, in pixels, by which the oracle mask grows.
    pub mask_dilation: usize,
    pub image_size: (u32, u32),
    pub focal: f64,
    pub principal: (f64, f64),
    pub max_attempts: usize,
    /// Keep only points that project into the image.
    pub frustum_filter: bool,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            min_objects: 1,
            max_objects: 4,
            clutter_objects: 4,
            num_points: 2048,
            x_range: [6.0, 40.0],
            max_azimuth_deg: 35.0,
            ground_z: -1.73,
            noise_sigma: 0.01,
            beams: 40,
            beam_elevation_deg: [-24.0, 2.0],
            columns: 160,
            azimuth_fov_deg: 96.0,
            max_range: 60.0,
            min_object_points: 8,
            mask_dilation: 1,
            image_size: (384, 120),
            focal: 192.0,
            principal: (192.0, 30.0),
            max_attempts: 200,
            frustum_filter: true,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic: {m}")));
        if self.min_objects > self.max_objects {
            return bad("min_objects exceeds max_objects");
        }
        if self.num_points == 0 || self.beams < 2 || self.columns < 2 {
            return bad("point, beam and column counts must be positive");
        }
        if !(self.x_range[0] > 0.0 && self.x_range[0] < self.x_range[1]) {
            return bad("x_range must be increasing and in front of the sensor");
        }
        if !(self.noise_sigma >= 0.0) || !(self.focal > 0.0) || !(self.max_range > 0.0) {
            return bad("noise, focal length and range must be non-negative");
        }
        if self.beam_elevation_deg[0] >= self.beam_elevation_deg[1] {
            return bad("beam elevations must be increasing");
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be positive");
        }
        Ok(())
    }

    /// Camera at the sensor origin looking along +x.
    pub fn calib(&self) -> CalibContext {
        #[rustfmt::skip]
        let t = Matrix4::new(
            0.0, -1.0, 0.0, 0.0,
            0.0, 0.0, -1.0, 0.0,
            1.0, 0.0, 0.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
        );
        CalibContext::pinhole(t, self.focal, self.principal, self.image_size).expect("valid synthetic camera")
    }
}

/// A generated scene plus the object each point was sampled from.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub frame: Frame,
    pub seed: u64,
    /// Ground-truth object index per point; `None` for ground and clutter.
    pub point_object: Vec<Option<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Surface {
    Object(usize),
    Clutter,
    Ground,
}

/// Entry distance of a ray from the origin into an oriented box.
fn ray_box(dir: [f64; 3], b: &OrientedBox3D) -> Option<f64> {
    let (s, c) = b.yaw.sin_cos();
    let o = [-b.center[0], -b.center[1], -b.center[2]];
    let lo = [c * o[0] + s * o[1], -s * o[0] + c * o[1], o[2]];
    let ld = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]];
    let half = [b.length() / 2.0, b.width() / 2.0, b.height() / 2.0];
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for k in 0..3 {
        if ld[k].abs() < 1e-12 {
            if lo[k].abs() > half[k] {
                return None;
            }
            continue;
        }
        let a = (-half[k] - lo[k]) / ld[k];
        let z = (half[k] - lo[k]) / ld[k];
        t0 = t0.max(a.min(z));
        t1 = t1.min(a.max(z));
        if t0 > t1 {
            return None;
        }
    }
    (t0 > 0.0).then_some(t0)
}

fn overlaps(candidate: &OrientedBox3D, placed: &[OrientedBox3D], gap: f64) -> bool {
    let grown = OrientedBox3D {
        size: [candidate.size[0], candidate.size[1] + gap, candidate.size[2] + gap],
        ..*candidate
    };
    placed.iter().any(|p| bev_intersection_area(&grown, p) > 0.0)
}

fn place<R: Rng>(
    cfg: &SyntheticConfig,
    rng: &mut R,
    placed: &[OrientedBox3D],
    size: [f64; 3],
) -> Option<OrientedBox3D> {
    let az = cfg.max_azimuth_deg.to_radians();
    for _ in 0..cfg.max_attempts {
        let x = rng.gen_range(cfg.x_range[0]..cfg.x_range[1]);
        let y = x * rng.gen_range(-az..az).tan();
        let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let b = OrientedBox3D::new([x, y, cfg.ground_z + size[0] / 2.0], size, yaw).ok()?;
        // keep the sensor itself out of every box
        if b.contains([0.0; 3], 0.5) {
            continue;
        }
        if !overlaps(&b, placed, 0.5) {
            return Some(b);
        }
    }
    None
}

fn car_size<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.gen_range(1.4..1.7), rng.gen_range(1.6..1.9), rng.gen_range(3.5..4.5)]
}

fn clutter_size<R: Rng>(rng: &mut R) -> [f64; 3] {
    match rng.gen_range(0..3) {
        // pole
        0 => {
            let d = rng.gen_range(0.15..0.4);
            [rng.gen_range(2.0..3.5), d, d]
        }
        // bush
        1 => [rng.gen_range(0.5..1.1), rng.gen_range(0.8..1.6), rng.gen_range(0.8..1.6)],
        // crate
        _ => [rng.gen_range(0.8..1.4), rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.2)],
    }
}

struct RawSweep {
    points: Vec<[f64; 4]>,
    surface: Vec<Surface>,
}

fn cast<R: Rng>(
    cfg: &SyntheticConfig,
    rng: &mut R,
    objects: &[OrientedBox3D],
    clutter: &[OrientedBox3D],
    object_refl: &[f64],
) -> RawSweep {
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("sigma");
    let mut out = RawSweep {
        points: Vec::new(),
        surface: Vec::new(),
    };
    let [e0, e1] = cfg.beam_elevation_deg.map(f64::to_radians);
    let half_fov = cfg.azimuth_fov_deg.to_radians() / 2.0;
    for b in 0..cfg.beams {
        let el = e0 + (e1 - e0) * b as f64 / (cfg.beams - 1) as f64;
        for c in 0..cfg.columns {
            let az = -half_fov + 2.0 * half_fov * c as f64 / (cfg.columns - 1) as f64;
            let dir = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()];
            let mut hit: Option<(f64, Surface)> = None;
            let mut consider = |t: f64, s: Surface| {
                if t <= cfg.max_range && hit.map_or(true, |(bt, _)| t < bt) {
                    hit = Some((t, s));
                }
            };
            for (i, o) in objects.iter().enumerate() {
                if let Some(t) = ray_box(dir, o) {
                    consider(t, Surface::Object(i));
                }
            }
            for o in clutter {
                if let Some(t) = ray_box(dir, o) {
                    consider(t, Surface::Clutter);
                }
            }
            if dir[2] < 0.0 {
                consider(cfg.ground_z / dir[2], Surface::Ground);
            }
            let Some((t, s)) = hit else { continue };
            let mut p = [t * dir[0], t * dir[1], t * dir[2]];
            if cfg.noise_sigma > 0.0 {
                for v in &mut p {
                    *v += noise.sample(rng);
                }
            }
            let r = match s {
                Surface::Object(i) => object_refl[i],
                Surface::Clutter => rng.gen_range(0.1..0.9),
                Surface::Ground => rng.gen_range(0.02..0.25),
            };
            out.points.push([p[0], p[1], p[2], r]);
            out.surface.push(s);
        }
    }
    out
}

/// Class scores that are foreground exactly at the pixels of object points,
/// grown by a Chebyshev `dilation`.
pub fn oracle_segmentation(
    coords: &[[f64; 3]],
    point_object: &[Option<usize>],
    calib: &CalibContext,
    dilation: usize,
) -> SegScores {
    let (w, h) = (calib.image_size().0 as usize, calib.image_size().1 as usize);
    let mut fg = vec![false; w * h];
    for (p, o) in project_points(coords, calib).iter().zip(point_object) {
        if o.is_none() || !p.in_image {
            continue;
        }
        let (u, v) = (p.u as usize, p.v as usize);
        let d = dilation as isize;
        for dv in -d..=d {
            for du in -d..=d {
                let (x, y) = (u as isize + du, v as isize + dv);
                if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                    fg[y as usize * w + x as usize] = true;
                }
            }
        }
    }
    let scores = fg
        .iter()
        .flat_map(|&f| if f { [0.0, 1.0] } else { [1.0, 0.0] })
        .collect();
    SegScores::new(w, h, 2, scores).expect("one-hot scores")
}

/// Deterministic scene for `seed`: non-overlapping cars and clutter on a
/// ground plane, a ray-cast sweep with occlusion, the camera calibration and
/// an oracle segmentation.
pub fn gen_synthetic_scene(cfg: &SyntheticConfig, seed: u64) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let calib = cfg.calib();
    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    for _ in 0..cfg.max_attempts {
        let mut objects = Vec::new();
        for _ in 0..count {
            let size = car_size(&mut rng);
            match place(cfg, &mut rng, &objects, size) {
                Some(b) => objects.push(b),
                None => break,
            }
        }
        if objects.len() < count {
            continue;
        }
        let mut clutter: Vec<OrientedBox3D> = Vec::new();
        for _ in 0..cfg.clutter_objects {
            let size = clutter_size(&mut rng);
            let all: Vec<OrientedBox3D> = objects.iter().chain(&clutter).copied().collect();
            if let Some(b) = place(cfg, &mut rng, &all, size) {
                clutter.push(b);
            }
        }
        let refl: Vec<f64> = objects.iter().map(|_| rng.gen_range(0.2..0.8)).collect();
        let sweep = cast(cfg, &mut rng, &objects, &clutter, &refl);
        let mut keep: Vec<usize> = (0..sweep.points.len()).collect();
        if cfg.frustum_filter {
            let coords: Vec<[f64; 3]> = sweep.points.iter().map(|p| [p[0], p[1], p[2]]).collect();
            let proj = project_points(&coords, &calib);
            keep.retain(|&i| proj[i].in_image);
        }
        if keep.is_empty() {
            continue;
        }
        let picked: Vec<usize> = subsample_indices(keep.len(), cfg.num_points, &mut rng)
            .into_iter()
            .map(|i| keep[i])
            .collect();
        let points: Vec<[f64; 4]> = picked.iter().map(|&i| sweep.points[i]).collect();
        let point_object: Vec<Option<usize>> = picked
            .iter()
            .map(|&i| match sweep.surface[i] {
                Surface::Object(o) => Some(o),
                _ => None,
            })
            .collect();
        let enough = (0..objects.len()).all(|o| {
            let mut seen = std::collections::BTreeSet::new();
            for (k, &i) in picked.iter().enumerate() {
                if point_object[k] == Some(o) {
                    seen.insert(i);
                }
            }
            seen.len() >= cfg.min_object_points
        });
        if !enough {
            continue;
        }
        let cloud = PointCloud::new(points)?;
        let segmentation = oracle_segmentation(&cloud.coords(), &point_object, &calib, cfg.mask_dilation);
        let objects = objects
            .into_iter()
            .map(|bbox| GroundTruth {
                class: ObjectClass::Car,
                bbox,
                difficulty: Difficulty::Easy,
            })
            .collect();
        return Ok(SyntheticScene {
            frame: Frame {
                id: format!("{seed:06}"),
                cloud,
                calib,
                objects,
                segmentation: Some(segmentation),
            },
            seed,
            point_object,
        });
    }
    Err(Error::PlacementFailure(cfg.max_attempts))
}

/// `count` scenes with seeds `base_seed, base_seed + 1, …`.
pub fn gen_synthetic_dataset(cfg: &SyntheticConfig, base_seed: u64, count: usize) -> Result<Vec<SyntheticScene>> {
    (0..count as u64)
        .map(|i| gen_synthetic_scene(cfg, base_seed.wrapping_add(i)))
        .collect()
}
