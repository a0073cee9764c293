use std::path::PathBuf;
use std::process::ExitCode;

use cascade_mvs::fusion::PlyFormat;
use cascade_mvs::trainer::GradCheckTarget;
use cascade_mvs::Error;
use cascade_mvs_cli::commands::{self, RangeMethod};
use cascade_mvs_cli::{CliError, Result, RunConfig};
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "cascade-mvs",
    version,
    about = "Cascaded multi-view stereo with learned depth ranges"
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override a configuration key, e.g. `--set train.lr=0.0005`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic scenes.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the range estimators.
    Train {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss log; defaults to the checkpoint path with a `.csv` extension.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Run the cascade on one scene.
    Infer {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, required_unless_present = "baseline")]
        checkpoint: Option<PathBuf>,
        /// Uniform shrink factors instead of learned ranges.
        #[arg(long, conflicts_with = "checkpoint")]
        baseline: bool,
        /// Also write the final depth of every view as reference to `out/depths/`.
        #[arg(long)]
        all_views: bool,
    },
    /// Fuse per-view depth maps into a point cloud.
    Fuse {
        #[arg(long)]
        scene: PathBuf,
        /// Directory of `NNN.pfm` depth maps, one per view.
        #[arg(long)]
        depths: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "binary_le")]
        format: PlyFormat,
        #[arg(long)]
        reproj_tol: Option<f64>,
        #[arg(long)]
        rel_depth_tol: Option<f64>,
        #[arg(long)]
        min_views: Option<usize>,
    },
    /// Compare predictions with ground truth and print range statistics.
    Eval {
        /// A scene directory or a root of scene directories.
        #[arg(long)]
        gt: PathBuf,
        /// Prediction directory, optionally named: `NAME=DIR`.
        #[arg(long = "pred", required = true)]
        preds: Vec<String>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, requires = "gt_cloud")]
        pred_cloud: Option<PathBuf>,
        #[arg(long, requires = "pred_cloud")]
        gt_cloud: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
    },
}

fn split_set(raw: &str) -> Result<(String, String)> {
    raw.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| CliError::Config(format!("expected KEY=VALUE, got {raw:?}")))
}

fn named_prediction(raw: &str) -> (String, PathBuf) {
    match raw.split_once('=') {
        Some((name, dir)) => (name.to_string(), PathBuf::from(dir)),
        None => {
            let p = PathBuf::from(raw);
            let name = p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| raw.to_string());
            (name, p)
        }
    }
}

/// Command-specific flags expressed as configuration overrides.
fn flag_overrides(cli: &Cli) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            out.push((k.to_string(), v));
        }
    };
    push("seed", cli.seed.map(|s| s.to_string()));
    match &cli.command {
        Command::Synth { count, .. } => push("synth.count", count.map(|c| c.to_string())),
        Command::Train {
            epochs, max_steps, ..
        } => {
            push("train.epochs", epochs.map(|e| e.to_string()));
            push("train.max_steps", max_steps.map(|m| m.to_string()));
        }
        Command::Fuse {
            reproj_tol,
            rel_depth_tol,
            min_views,
            ..
        } => {
            push("fusion.reproj_tol_px", reproj_tol.map(|v| format!("{v:?}")));
            push(
                "fusion.rel_depth_tol",
                rel_depth_tol.map(|v| format!("{v:?}")),
            );
            push(
                "fusion.min_consistent_views",
                min_views.map(|v| v.to_string()),
            );
        }
        _ => {}
    }
    out
}

fn run(cli: &Cli) -> Result<()> {
    let mut overrides: Vec<(String, String)> = cli
        .sets
        .iter()
        .map(|s| split_set(s))
        .collect::<Result<_>>()?;
    overrides.extend(flag_overrides(cli));
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    match &cli.command {
        Command::Synth { out, .. } => {
            let dirs = commands::cmd_synth(&cfg, out)?;
            println!("scenes={} dir={}", dirs.len(), out.display());
        }
        Command::Train {
            scenes, out, log, ..
        } => {
            let res = commands::cmd_train(&cfg, scenes, out, log.as_deref())?;
            let last = res.log.last().map_or(f64::NAN, |r| r.total);
            println!(
                "steps={} final_loss={last:.6} checkpoint={}",
                res.log.len(),
                out.display()
            );
        }
        Command::Infer {
            scene,
            out,
            checkpoint,
            baseline,
            all_views,
        } => {
            let method = match (checkpoint, baseline) {
                (Some(c), false) => RangeMethod::Learned(c.clone()),
                _ => RangeMethod::Baseline,
            };
            commands::cmd_infer(&cfg, scene, &method, out, *all_views)?;
            println!("outputs={}", out.display());
        }
        Command::Fuse {
            scene,
            depths,
            out,
            format,
            ..
        } => {
            let cloud = commands::cmd_fuse(&cfg, scene, depths, out, *format)?;
            println!("points={} ply={}", cloud.len(), out.display());
        }
        Command::Eval {
            gt,
            preds,
            report,
            pred_cloud,
            gt_cloud,
        } => {
            let preds: Vec<(String, PathBuf)> = preds.iter().map(|p| named_prediction(p)).collect();
            let clouds = pred_cloud.as_deref().zip(gt_cloud.as_deref());
            let rep = commands::cmd_eval(&cfg, gt, &preds, report, clouds)?;
            print!("{}", rep.table());
            for m in &rep.methods {
                let s = &m.stages[m.stages.len() - 1];
                println!(
                    "method={} final_mae={:.4} final_rmse={:.4}",
                    m.method, s.depth.mae, s.depth.rmse
                );
            }
            if let Some(c) = rep.cloud {
                println!(
                    "accuracy={:.4} completeness={:.4} overall={:.4}",
                    c.accuracy, c.completeness, c.overall
                );
            }
        }
        Command::Gradcheck { eps } => {
            let reports = commands::cmd_gradcheck(&cfg, *eps, &GradCheckTarget::ALL)?;
            let mut failed = Vec::new();
            for r in &reports {
                let tol = commands::grad_tolerance(r.target);
                let ok = r.max_rel_error <= tol;
                println!(
                    "target={} max_rel_error={:.3e} tolerance={tol:.0e} checked={} {}",
                    r.target.name(),
                    r.max_rel_error,
                    r.checked,
                    if ok { "PASS" } else { "FAIL" }
                );
                if !ok {
                    failed.push(r.target.name());
                }
            }
            if !failed.is_empty() {
                return Err(Error::InvalidParameter(format!(
                    "gradient check failed for {}",
                    failed.join(", ")
                ))
                .into());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::FAILURE
        }
    }
}
