//! Runnable commands behind the CLI. Each takes a validated [`RunConfig`]
//! and writes its artifacts under an output directory.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{DatasetKind, RunConfig};
use crate::data::{frustum_indices, gen_synthetic_dataset, write_scene, Frame, KittiDataset};
use crate::detector::{frame_segmentation, Detector};
use crate::error::{Error, Result};
use crate::eval::{evaluate, read_detections, write_detections, EvalConfig, EvalReport, FrameDetections};
use crate::fusionkp::{foreground_mask, FileSegmentation, SegmentationProvider};
use crate::geom::{box_corners, iou_3d, project_box_to_roi2d, project_points, OrientedBox3D};
use crate::roi::{make_roi3d, FusionStrategy};
use crate::sampling::{fps_euclidean, fps_feature};
use crate::train::{EpochLog, Trainer};
use crate::viz::{bev_svg, ply_string, BevView};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// Frames of a split: generated synthetic scenes, or KITTI frames listed in
/// the split file with segmentation from `segmentation_dir` when set.
pub fn load_frames(cfg: &RunConfig, split: Split) -> Result<Vec<Frame>> {
    let d = &cfg.data;
    match d.kind {
        DatasetKind::Synthetic => {
            let (seed, count) = match split {
                Split::Train => (cfg.train_data_seed(), d.train_scenes),
                Split::Val => (cfg.val_data_seed(), d.val_scenes),
            };
            Ok(gen_synthetic_dataset(&d.synthetic, seed, count)?
                .into_iter()
                .map(|s| s.frame)
                .collect())
        }
        DatasetKind::Kitti => {
            let root = d
                .kitti_root
                .as_ref()
                .ok_or_else(|| Error::Config("data.kitti_root is required for the kitti dataset".into()))?;
            let ds = KittiDataset::new(root);
            let name = match split {
                Split::Train => &d.train_split,
                Split::Val => &d.val_split,
            };
            let provider = d.segmentation_dir.as_ref().map(FileSegmentation::new);
            ds.split(name)?
                .iter()
                .map(|id| {
                    let mut f = ds.load(id)?;
                    if let Some(p) = &provider {
                        f.segmentation = Some(p.segment(id)?);
                    }
                    Ok(f)
                })
                .collect()
        }
    }
}

pub fn detect_frames(det: &Detector, frames: &[Frame], seed: u64) -> Result<Vec<FrameDetections>> {
    frames
        .iter()
        .map(|f| {
            Ok(FrameDetections {
                frame_id: f.id.clone(),
                detections: det.detect(f, seed)?,
                ground_truth: f.objects.clone(),
            })
        })
        .collect()
}

pub fn evaluate_detector(det: &Detector, frames: &[Frame], cfg: &EvalConfig, seed: u64) -> Result<EvalReport> {
    evaluate(&detect_frames(det, frames, seed)?, cfg)
}

fn create_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    Ok(())
}

pub const CHECKPOINT_FILE: &str = "model.rfn";
pub const TRAIN_LOG_FILE: &str = "train.log";
pub const REPORT_FILE: &str = "report.txt";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    pub report: EvalReport,
    pub checkpoint: PathBuf,
}

/// Trains on the training split, then evaluates on the held-out split.
/// Writes the resolved config, per-epoch log, checkpoint and report.
pub fn train_toy(cfg: &RunConfig, out: &Path, progress: &mut dyn Write) -> Result<TrainOutcome> {
    cfg.validate()?;
    create_dir(out)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_toml())?;
    let train = load_frames(cfg, Split::Train)?;
    let val = load_frames(cfg, Split::Val)?;
    let mut det = Detector::new(&cfg.model, cfg.seed)?;
    let mut log = BufWriter::new(fs::File::create(out.join(TRAIN_LOG_FILE))?);
    let mut io_err = None;
    let logs = Trainer::new(&cfg.train, cfg.seed)?.run(&mut det, &train, 1, cfg.train.epochs, |l| {
        if let Err(e) = writeln!(log, "{l}").and_then(|_| writeln!(progress, "{l}")) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    log.flush()?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    det.save(&checkpoint)?;
    let report = evaluate_detector(&det, &val, &cfg.eval, cfg.seed)?;
    fs::write(out.join(REPORT_FILE), report.render())?;
    Ok(TrainOutcome { logs, report, checkpoint })
}

/// Where `eval` gets detections from.
#[derive(Clone, Debug)]
pub enum EvalSource {
    /// Run a trained detector.
    Checkpoint(PathBuf),
    /// KITTI result files `<frame>.txt` in a directory.
    Detections(PathBuf),
}

/// Evaluates the held-out split. With a checkpoint, detections are also
/// written as KITTI result files under `out/detections`.
pub fn eval(cfg: &RunConfig, source: &EvalSource, out: Option<&Path>) -> Result<EvalReport> {
    cfg.validate()?;
    let frames = load_frames(cfg, Split::Val)?;
    let results = match source {
        EvalSource::Checkpoint(p) => {
            let det = Detector::load(&cfg.model, p)?;
            let results = detect_frames(&det, &frames, cfg.seed)?;
            if let Some(out) = out {
                let dir = out.join("detections");
                create_dir(&dir)?;
                for (r, f) in results.iter().zip(&frames) {
                    write_detections(&dir, &f.id, &r.detections, &f.calib)?;
                }
            }
            results
        }
        EvalSource::Detections(dir) => frames
            .iter()
            .map(|f| {
                Ok(FrameDetections {
                    frame_id: f.id.clone(),
                    detections: read_detections(dir.join(format!("{}.txt", f.id)), &f.id, &f.calib)?,
                    ground_truth: f.objects.clone(),
                })
            })
            .collect::<Result<_>>()?,
    };
    let report = evaluate(&results, &cfg.eval)?;
    if let Some(out) = out {
        create_dir(out)?;
        fs::write(out.join(REPORT_FILE), report.render())?;
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Eta,
    Fusion,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::Eta => "eta",
            Self::Fusion => "fusion",
        }
    }

    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            Self::Eta => &["0", "0.5", "1.0", "1.5", "2.0"],
            Self::Fusion => &["sum", "concat", "max"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// `cfg` with this axis set to `value`.
    pub fn apply(self, cfg: &RunConfig, value: &str) -> Result<RunConfig> {
        let mut c = cfg.clone();
        match self {
            Self::Eta => {
                c.model.eta = value
                    .parse()
                    .map_err(|_| Error::Config(format!("bad eta value {value:?}")))?;
            }
            Self::Fusion => c.model.fusion = FusionStrategy::from_str(value)?,
        }
        c.validate()?;
        Ok(c)
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eta" => Ok(Self::Eta),
            "fusion" => Ok(Self::Fusion),
            _ => Err(Error::Config(format!("unknown ablation axis {s:?} (expected eta or fusion)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub value: String,
    pub report: EvalReport,
}

impl AblationRow {
    /// AP of the first evaluated class at the first reported difficulty.
    pub fn ap(&self) -> Option<f64> {
        self.report.ap.first().and_then(|e| e.ap)
    }
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn render(&self) -> String {
        let fmt_ap = |a: Option<f64>| a.map_or("absent".to_string(), |v| format!("{v:.6}"));
        let mut s = format!("{:<8} {:>10}\n", self.axis.name(), "ap");
        for r in &self.rows {
            let _ = writeln!(s, "{:<8} {:>10}", r.value, fmt_ap(r.ap()));
        }
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "ablate.{}.{}.ap={}", self.axis.name(), r.value, fmt_ap(r.ap()));
        }
        s
    }
}

/// One evaluation per axis value. The front end comes from `checkpoint` or is
/// trained once inline; the RoI stage and head are re-initialized and
/// retrained for every value with the same seed.
pub fn ablate(
    cfg: &RunConfig,
    axis: AblationAxis,
    values: Option<&[String]>,
    checkpoint: Option<&Path>,
    out: Option<&Path>,
    progress: &mut dyn Write,
) -> Result<AblationTable> {
    cfg.validate()?;
    let values = values.map_or_else(|| axis.default_values(), <[String]>::to_vec);
    let variants: Vec<RunConfig> = values.iter().map(|v| axis.apply(cfg, v)).collect::<Result<_>>()?;
    let train = load_frames(cfg, Split::Train)?;
    let val = load_frames(cfg, Split::Val)?;
    let mut trainer = Trainer::new(&cfg.train, cfg.seed)?;
    let mut det = match checkpoint {
        Some(p) => Detector::load(&cfg.model, p)?,
        None => {
            let mut det = Detector::new(&cfg.model, cfg.seed)?;
            trainer.run(&mut det, &train, 1, cfg.train.backbone_epochs, |l| {
                let _ = writeln!(progress, "{l}");
            })?;
            det
        }
    };
    let mut rows = Vec::new();
    for (value, vcfg) in values.iter().zip(&variants) {
        det.reset_back(&vcfg.model, cfg.seed)?;
        trainer.reset_back();
        trainer.run(&mut det, &train, cfg.train.backbone_epochs + 1, cfg.train.epochs, |l| {
            let _ = writeln!(progress, "{}={value} {l}", axis.name());
        })?;
        let report = evaluate_detector(&det, &val, &vcfg.eval, cfg.seed)?;
        rows.push(AblationRow {
            value: value.clone(),
            report,
        });
    }
    let table = AblationTable { axis, rows };
    if let Some(out) = out {
        create_dir(out)?;
        fs::write(out.join(format!("ablate_{}.txt", axis.name())), table.render())?;
    }
    Ok(table)
}

/// Picks a held-out frame by id, or the first one.
fn pick_frame(cfg: &RunConfig, frame_id: Option<&str>) -> Result<Frame> {
    let frames = load_frames(cfg, Split::Val)?;
    match frame_id {
        Some(id) => frames
            .into_iter()
            .find(|f| f.id == id)
            .ok_or_else(|| Error::MissingKey(format!("frame {id}"))),
        None => frames
            .into_iter()
            .next()
            .ok_or_else(|| Error::MalformedFile("the held-out split is empty".into())),
    }
}

/// Writes `<frame>.ply` (in-view points, red where the segmentation mask is
/// foreground) and `<frame>.svg` (ground truth green, predictions red).
pub fn export_viz(cfg: &RunConfig, frame_id: Option<&str>, checkpoint: Option<&Path>, out: &Path) -> Result<(PathBuf, PathBuf)> {
    cfg.validate()?;
    let frame = pick_frame(cfg, frame_id)?;
    let preds: Vec<OrientedBox3D> = match checkpoint {
        Some(p) => Detector::load(&cfg.model, p)?
            .detect(&frame, cfg.seed)?
            .into_iter()
            .map(|d| d.bbox)
            .collect(),
        None => Vec::new(),
    };
    let pts = frame.cloud.coords();
    let coords: Vec<[f64; 3]> = frustum_indices(&frame.cloud, &frame.calib)
        .into_iter()
        .map(|i| pts[i])
        .collect();
    let seg = frame_segmentation(&frame, cfg.model.classes.len() + 1);
    let mut fg = vec![false; coords.len()];
    for i in foreground_mask(&coords, &frame.calib, &seg, cfg.model.tau_fg)? {
        fg[i] = true;
    }
    create_dir(out)?;
    let ply = out.join(format!("{}.ply", frame.id));
    let svg = out.join(format!("{}.svg", frame.id));
    fs::write(&ply, ply_string(&coords, &fg))?;
    let gts: Vec<OrientedBox3D> = frame.objects.iter().map(|g| g.bbox).collect();
    fs::write(&svg, bev_svg(&BevView::default(), &coords, &gts, &preds))?;
    Ok((ply, svg))
}

/// Generates the synthetic split as scene archives `<frame>.rfsc`.
pub fn sample(cfg: &RunConfig, split: Split, out: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    if cfg.data.kind != DatasetKind::Synthetic {
        return Err(Error::Config("sample generates synthetic scenes only".into()));
    }
    let (seed, count) = match split {
        Split::Train => (cfg.train_data_seed(), cfg.data.train_scenes),
        Split::Val => (cfg.val_data_seed(), cfg.data.val_scenes),
    };
    create_dir(out)?;
    gen_synthetic_dataset(&cfg.data.synthetic, seed, count)?
        .iter()
        .map(|s| {
            let p = out.join(format!("{}.rfsc", s.frame.id));
            write_scene(s, BufWriter::new(fs::File::create(&p)?))?;
            Ok(p)
        })
        .collect()
}

/// Projects a held-out frame into its image. Writes `<frame>_points.csv`
/// (`u,v,depth,in_image` per point) and `<frame>_boxes.csv` (the 2D RoI of
/// each labelled box and of its extended 3D RoI). Returns a summary line.
pub fn project(cfg: &RunConfig, frame_id: Option<&str>, out: &Path) -> Result<String> {
    cfg.validate()?;
    let frame = pick_frame(cfg, frame_id)?;
    let proj = project_points(&frame.cloud.coords(), &frame.calib);
    create_dir(out)?;
    let mut pts = String::from("u,v,depth,in_image\n");
    for p in &proj {
        let _ = writeln!(pts, "{:.4},{:.4},{:.4},{}", p.u, p.v, p.depth, p.in_image as u8);
    }
    fs::write(out.join(format!("{}_points.csv", frame.id)), pts)?;
    let mut boxes = String::from("class,box_u_min,box_v_min,box_u_max,box_v_max,roi_u_min,roi_v_min,roi_u_max,roi_v_max\n");
    let fmt = |r: Result<crate::geom::RoI2D>| match r {
        Ok(r) => format!("{:.4},{:.4},{:.4},{:.4}", r.u_min, r.v_min, r.u_max, r.v_max),
        Err(_) => "absent,absent,absent,absent".to_string(),
    };
    for g in &frame.objects {
        let b = crate::geom::project_corners_to_roi2d(&box_corners(&g.bbox), &frame.calib);
        let roi = make_roi3d(g.bbox.center, cfg.model.class_dims.get(g.class), cfg.model.eta)?;
        let _ = writeln!(boxes, "{},{},{}", g.class, fmt(b), fmt(project_box_to_roi2d(&roi, &frame.calib)));
    }
    fs::write(out.join(format!("{}_boxes.csv", frame.id)), boxes)?;
    let in_image = proj.iter().filter(|p| p.in_image).count();
    let behind = proj.iter().filter(|p| p.depth <= 0.0).count();
    Ok(format!(
        "frame={} points={} in_image={in_image} behind={behind} boxes={}",
        frame.id,
        proj.len(),
        frame.objects.len()
    ))
}

/// Wall-clock timings of the main kernels, one `kernel=… ms=…` line each.
pub fn bench(cfg: &RunConfig, repeats: usize) -> Result<String> {
    cfg.validate()?;
    let repeats = repeats.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.model.num_points;
    let cloud: Vec<[f64; 3]> = (0..n)
        .map(|_| [rng.gen_range(0.0..70.0), rng.gen_range(-40.0..40.0), rng.gen_range(-3.0..1.0)])
        .collect();
    let feats = crate::micronet::Tensor2::from_vec(n.min(4096), 16, (0..n.min(4096) * 16).map(|_| rng.gen()).collect())?;
    let boxes: Vec<OrientedBox3D> = (0..200)
        .map(|_| {
            OrientedBox3D::new(
                [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), 0.0],
                [1.5, 1.6, 3.9],
                rng.gen_range(-3.1..3.1),
            )
        })
        .collect::<Result<_>>()?;
    let det = Detector::new(&cfg.model, cfg.seed)?;
    let frame = load_frames(cfg, Split::Val)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::MalformedFile("the held-out split is empty".into()))?;

    let mut lines = String::new();
    let mut time = |name: &str, f: &mut dyn FnMut() -> Result<()>| -> Result<()> {
        let t = Instant::now();
        for _ in 0..repeats {
            f()?;
        }
        let ms = t.elapsed().as_secs_f64() * 1e3 / repeats as f64;
        let _ = writeln!(lines, "kernel={name} ms={ms:.3}");
        Ok(())
    };
    let m = (n / 4).max(1);
    time(&format!("fps_euclidean_{n}_to_{m}"), &mut || fps_euclidean(&cloud, m, 0).map(drop))?;
    time(&format!("fps_feature_{}_to_256", feats.rows()), &mut || {
        fps_feature(&feats, 256.min(feats.rows()), 0).map(drop)
    })?;
    time("iou_3d_200x200", &mut || {
        let s: f64 = boxes.iter().flat_map(|a| boxes.iter().map(move |b| iou_3d(a, b))).sum();
        std::hint::black_box(s);
        Ok(())
    })?;
    time("detect_frame", &mut || det.detect(&frame, cfg.seed).map(drop))?;
    Ok(lines)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::toy();
        cfg.data.train_scenes = 4;
        cfg.data.val_scenes = 2;
        cfg.train.epochs = 1;
        cfg.train.backbone_epochs = 1;
        cfg
    }

    #[test]
    fn axis_values_cover_the_grids() {
        assert_eq!(AblationAxis::Eta.default_values(), ["0", "0.5", "1.0", "1.5", "2.0"]);
        assert_eq!(AblationAxis::Fusion.default_values(), ["sum", "concat", "max"]);
        assert!(matches!("depth".parse::<AblationAxis>(), Err(Error::Config(_))));
        assert!(matches!(AblationAxis::Eta.apply(&tiny(), "wide"), Err(Error::Config(_))));
    }

    #[test]
    fn smoke_train_writes_checkpoint_with_finite_loss() {
        let dir = tempfile::tempdir().unwrap();
        let out = train_toy(&tiny(), dir.path(), &mut std::io::sink()).unwrap();
        assert!(out.checkpoint.exists());
        assert_eq!(out.logs.len(), 1);
        assert!(out.logs[0].total.is_finite());
        let log = fs::read_to_string(dir.path().join(TRAIN_LOG_FILE)).unwrap();
        assert!(log.starts_with("epoch=1 stage=joint"));
        assert!(dir.path().join(REPORT_FILE).exists());
    }

    #[test]
    fn kitti_without_root_is_a_config_error() {
        let mut cfg = tiny();
        cfg.data.kind = DatasetKind::Kitti;
        assert!(matches!(load_frames(&cfg, Split::Val), Err(Error::Config(_))));
    }

    #[test]
    fn sample_writes_readable_archives() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let paths = sample(&cfg, Split::Val, dir.path()).unwrap();
        assert_eq!(paths.len(), 2);
        let scene = crate::data::read_scene(fs::File::open(&paths[0]).unwrap()).unwrap();
        assert_eq!(scene.frame, load_frames(&cfg, Split::Val).unwrap()[0]);
    }

    #[test]
    fn project_reports_counts() {
        let dir = tempfile::tempdir().unwrap();
        let s = project(&tiny(), None, dir.path()).unwrap();
        assert!(s.contains("boxes=2"), "{s}");
        let csv = fs::read_dir(dir.path()).unwrap().count();
        assert_eq!(csv, 2);
    }
}
