//! Command-line entry point. Exit codes: 0 success, 2 configuration error,
//! 3 data error.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use roifusion::commands::{self, AblationAxis, EvalSource, Split};
use roifusion::config::{DatasetKind, Preset, RunConfig};
use roifusion::{Error, Result};

#[derive(Parser)]
#[command(name = "roifusion", version, about = "RoI-fusion 3D object detection toolkit")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML run configuration; keys absent from it keep their preset values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured dataset.
    #[arg(long, global = true, value_enum)]
    dataset: Option<DatasetArg>,
    /// Model checkpoint to read.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetArg {
    Kitti,
    Synthetic,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic split as scene archives.
    Sample {
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
    },
    /// Project a held-out frame's points and boxes into its image.
    Project {
        #[arg(long)]
        frame: Option<String>,
    },
    /// Train on the training split and evaluate on the held-out split.
    /// Without --config the toy preset is used.
    TrainToy,
    /// Evaluate a checkpoint, or KITTI result files, on the held-out split.
    Eval {
        /// Directory of `<frame>.txt` result files to score instead of a
        /// checkpoint.
        #[arg(long)]
        detections: Option<PathBuf>,
    },
    /// Retrain the RoI stage and head for each value of one axis.
    Ablate {
        #[arg(long)]
        axis: String,
        /// Comma-separated subset of values; defaults to the full grid.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<String>>,
    },
    /// Write a PLY cloud and a bird's-eye-view SVG of a held-out frame.
    ExportViz {
        #[arg(long)]
        frame: Option<String>,
    },
    /// Time the main kernels.
    Bench {
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
}

fn load_config(g: &Global, default: Preset) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => default.config(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(d) = g.dataset {
        cfg.data.kind = match d {
            DatasetArg::Kitti => DatasetKind::Kitti,
            DatasetArg::Synthetic => DatasetKind::Synthetic,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let stdout = &mut std::io::stdout().lock();
    match cli.command {
        Command::Sample { split } => {
            let cfg = load_config(g, Preset::Full)?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
            };
            for p in commands::sample(&cfg, split, &g.out)? {
                writeln!(stdout, "{}", p.display())?;
            }
        }
        Command::Project { frame } => {
            let cfg = load_config(g, Preset::Full)?;
            writeln!(stdout, "{}", commands::project(&cfg, frame.as_deref(), &g.out)?)?;
        }
        Command::TrainToy => {
            let cfg = load_config(g, Preset::Toy)?;
            let outcome = commands::train_toy(&cfg, &g.out, stdout)?;
            writeln!(stdout, "checkpoint={}", outcome.checkpoint.display())?;
            write!(stdout, "{}", outcome.report.render())?;
        }
        Command::Eval { detections } => {
            let cfg = load_config(g, Preset::Full)?;
            let source = match (detections, &g.checkpoint) {
                (Some(d), None) => EvalSource::Detections(d),
                (None, Some(c)) => EvalSource::Checkpoint(c.clone()),
                _ => return Err(Error::Config("eval needs exactly one of --checkpoint and --detections".into())),
            };
            write!(stdout, "{}", commands::eval(&cfg, &source, Some(&g.out))?.render())?;
        }
        Command::Ablate { axis, values } => {
            let cfg = load_config(g, Preset::Full)?;
            let axis: AblationAxis = axis.parse()?;
            let table = commands::ablate(&cfg, axis, values.as_deref(), g.checkpoint.as_deref(), Some(&g.out), stdout)?;
            write!(stdout, "{}", table.render())?;
        }
        Command::ExportViz { frame } => {
            let cfg = load_config(g, Preset::Full)?;
            let (ply, svg) = commands::export_viz(&cfg, frame.as_deref(), g.checkpoint.as_deref(), &g.out)?;
            writeln!(stdout, "{}\n{}", ply.display(), svg.display())?;
        }
        Command::Bench { repeats } => {
            let cfg = load_config(g, Preset::Full)?;
            write!(stdout, "{}", commands::bench(&cfg, repeats)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
