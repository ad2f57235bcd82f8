use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use roifusion::commands::{load_frames, Split};
use roifusion::config::RunConfig;
use roifusion::eval::{parse_report_kv, write_detections, Detection};

const TINY: &str = r#"
preset = "toy"
seed = 3

[data]
train_scenes = 4
val_scenes = 2

[train]
epochs = 2
backbone_epochs = 1
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_roifusion"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_lists_every_subcommand() {
    let o = run(&["--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for cmd in ["sample", "project", "train-toy", "eval", "ablate", "export-viz", "bench"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn train_toy_writes_checkpoint_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["train-toy", "--config", s(&cfg), "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("epoch=1 stage=joint"));
        assert!(out.join("model.rfn").exists());
    }
    let log_a = fs::read(a.join("train.log")).unwrap();
    assert_eq!(log_a, fs::read(b.join("train.log")).unwrap());
    assert_eq!(fs::read(a.join("report.txt")).unwrap(), fs::read(b.join("report.txt")).unwrap());
    let first = String::from_utf8(log_a).unwrap();
    let total: f64 = first.lines().next().unwrap().rsplit("total=").next().unwrap().parse().unwrap();
    assert!(total.is_finite());

    // the written config reproduces the run and the checkpoint evaluates
    let o = run(&[
        "eval",
        "--config",
        s(&a.join("config.toml")),
        "--checkpoint",
        s(&a.join("model.rfn")),
        "--out",
        s(&dir.path().join("e")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let kv = parse_report_kv(&stdout(&o));
    assert_eq!(kv["frames"], "2");
    assert!(kv.contains_key("ap.car.all"));
    assert_eq!(fs::read_dir(dir.path().join("e/detections")).unwrap().count(), 2);
}

fn write_result_files(cfg_text: &str, dir: &Path, oracle: bool) {
    let cfg = RunConfig::from_toml(cfg_text).unwrap();
    fs::create_dir_all(dir).unwrap();
    for f in load_frames(&cfg, Split::Val).unwrap() {
        let dets: Vec<Detection> = if oracle {
            f.objects
                .iter()
                .map(|g| Detection::new(g.bbox, g.class, 0.9, &f.id).unwrap())
                .collect()
        } else {
            Vec::new()
        };
        write_detections(dir, &f.id, &dets, &f.calib).unwrap();
    }
}

#[test]
fn oracle_detections_score_one_and_empty_score_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    for (oracle, want) in [(true, "1.000000"), (false, "0.000000")] {
        let dets = dir.path().join(format!("dets-{oracle}"));
        write_result_files(TINY, &dets, oracle);
        let o = run(&["eval", "--config", s(&cfg), "--detections", s(&dets), "--out", s(&dir.path().join("o"))]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let kv = parse_report_kv(&stdout(&o));
        assert_eq!(kv["ap.car.all"], want);
    }
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "[model]\nnot_a_key = 1\n");
    let out = dir.path().join("o");
    assert_eq!(run(&["train-toy", "--config", s(&bad), "--out", s(&out)]).status.code(), Some(2));
    let missing = dir.path().join("absent.toml");
    assert_eq!(run(&["sample", "--config", s(&missing), "--out", s(&out)]).status.code(), Some(2));
    let cfg = write_config(dir.path(), TINY);
    assert_eq!(
        run(&["project", "--config", s(&cfg), "--dataset", "kitti", "--out", s(&out)]).status.code(),
        Some(2)
    );
    assert_eq!(run(&["ablate", "--config", s(&cfg), "--axis", "depth", "--out", s(&out)]).status.code(), Some(2));
    assert_eq!(run(&["eval", "--config", s(&cfg), "--out", s(&out)]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn incompatible_checkpoint_is_a_config_error_and_bad_files_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let trained = dir.path().join("t");
    assert!(run(&["train-toy", "--config", s(&cfg), "--out", s(&trained)]).status.success());
    let wider = write_config(dir.path(), &format!("{TINY}\n[model]\nhead_hidden = [16]\n"));
    let ckpt = trained.join("model.rfn");
    let out = dir.path().join("o");
    let o = run(&["eval", "--config", s(&wider), "--checkpoint", s(&ckpt), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));

    let cfg = write_config(dir.path(), TINY);
    let absent = dir.path().join("absent.rfn");
    assert_eq!(run(&["eval", "--config", s(&cfg), "--checkpoint", s(&absent), "--out", s(&out)]).status.code(), Some(3));
    let garbage = dir.path().join("garbage.rfn");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    assert_eq!(run(&["eval", "--config", s(&cfg), "--checkpoint", s(&garbage), "--out", s(&out)]).status.code(), Some(3));
    let root = dir.path().join("nowhere");
    let kitti = write_config(
        dir.path(),
        &TINY.replace("[data]\n", &format!("[data]\nkind = \"kitti\"\nkitti_root = \"{}\"\n", s(&root))),
    );
    assert_eq!(run(&["project", "--config", s(&kitti), "--out", s(&out)]).status.code(), Some(3));
}

fn table_rows(text: &str, axis: &str) -> Vec<String> {
    text.lines()
        .filter(|l| l.starts_with(&format!("ablate.{axis}.")))
        .map(str::to_string)
        .collect()
}

#[test]
fn ablation_axes_produce_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("o");
    let o = run(&["ablate", "--config", s(&cfg), "--axis", "eta", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = table_rows(&stdout(&o), "eta");
    let values: Vec<&str> = rows.iter().map(|r| r.split(".ap=").next().unwrap().trim_start_matches("ablate.eta.")).collect();
    assert_eq!(values, ["0", "0.5", "1.0", "1.5", "2.0"]);
    assert!(out.join("ablate_eta.txt").exists());

    let o = run(&["ablate", "--config", s(&cfg), "--axis", "fusion", "--out", s(&out)]);
    assert!(o.status.success());
    assert_eq!(table_rows(&stdout(&o), "fusion").len(), 3);

    let o = run(&["ablate", "--config", s(&cfg), "--axis", "eta", "--values", "1.0", "--out", s(&out)]);
    assert!(o.status.success());
    assert_eq!(table_rows(&stdout(&o), "eta").len(), 1);
}

#[test]
fn export_viz_draws_every_ground_truth_box() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("viz");
    let o = run(&["export-viz", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().count(), 2);
    let svg_path = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "svg"))
        .unwrap();
    let svg = fs::read_to_string(svg_path).unwrap();
    assert_eq!(roifusion::viz::svg_polygons(&svg, "gt").len(), 2);
    assert!(roifusion::viz::svg_polygons(&svg, "pred").is_empty());
}

#[test]
fn sample_project_and_bench_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("o");
    let o = run(&["sample", "--config", s(&cfg), "--split", "train", "--out", s(&out)]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 4);
    let o = run(&["project", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("frame="));
    let o = run(&["bench", "--config", s(&cfg), "--repeats", "1", "--seed", "9"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("kernel=")).count(), 4);
}
