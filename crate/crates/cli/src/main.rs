use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use panostitch::scene::PlaneFitConfig;
use panostitch::Vec3;
use panostitch_cli::commands::{run_eval, run_place, run_plane, run_synth, EvalArgs, PlaceArgs, PlaneArgs, SynthArgs};
use panostitch_cli::log::Logger;
use panostitch_cli::stitch::{run_stitch, StitchOptions};
use panostitch_cli::CliError;
use serde_json::Value;

const THREADS_ENV: &str = "PANOSTITCH_THREADS";

#[derive(Debug, Parser)]
#[command(name = "panostitch", version, about = "Panorama-anchored multi-room point cloud stitching")]
struct Cli {
    /// Root seed; every stage forks its own stream from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Suppress the JSON-lines progress log on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Register room pairs from a stitch manifest and merge them.
    Stitch {
        manifest: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Fit a support plane to a cloud, optionally flattening it.
    Plane(PlaneCmd),
    /// Place an asset on a support plane of a scene manifest.
    Place {
        manifest: PathBuf,
        #[arg(long)]
        plane: String,
        /// JSON asset request: asset_id, aabb_local, semantic_label, optional yaw.
        #[arg(long)]
        asset: PathBuf,
        /// Updated manifest path; defaults to rewriting the input.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Success-rate report and sim/real correlation from an episode log.
    Eval {
        episodes: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Base directory for traj_file entries.
        #[arg(long)]
        trajectories: Option<PathBuf>,
    },
    /// Write a synthetic two-room scene and its stitch manifest.
    Synth {
        /// JSON scene config; defaults apply to missing fields.
        config: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct PlaneCmd {
    cloud: PathBuf,
    #[arg(long, default_value_t = PlaneFitConfig::default().threshold)]
    threshold: f64,
    #[arg(long, default_value_t = PlaneFitConfig::default().min_inliers)]
    min_inliers: usize,
    #[arg(long, default_value_t = PlaneFitConfig::default().iterations)]
    iterations: usize,
    /// Plane report JSON path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the flattened cloud here.
    #[arg(long)]
    flatten: Option<PathBuf>,
    /// Scene manifest to add the plane to.
    #[arg(long, requires = "id")]
    add_to: Option<PathBuf>,
    #[arg(long)]
    id: Option<String>,
    /// Up direction used to orient the plane.
    #[arg(long, num_args = 3, value_names = ["X", "Y", "Z"], allow_negative_numbers = true, default_values_t = [0.0, 0.0, 1.0])]
    up: Vec<f64>,
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Input(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Input(format!("thread pool: {e}")))
}

fn print_json(value: &Value) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", serde_json::to_string_pretty(value).expect("json value"));
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    let log = Logger::new(!cli.quiet);
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Stitch { manifest, out } => {
            let outcome = run_stitch(&manifest, &out, &StitchOptions { seed: cli.seed }, &log)?;
            print_json(&serde_json::json!({
                "scene": outcome.scene_path.display().to_string(),
                "merged": outcome.merged_path.display().to_string(),
                "diagnostics": outcome.diagnostics_path.display().to_string(),
            }));
        }
        Command::Plane(p) => {
            let args = PlaneArgs {
                cloud: p.cloud,
                fit: PlaneFitConfig {
                    threshold: p.threshold,
                    min_inliers: p.min_inliers,
                    iterations: p.iterations,
                },
                seed,
                out: p.out,
                flatten: p.flatten,
                add_to: p.add_to,
                plane_id: p.id.unwrap_or_else(|| "plane".into()),
                up: Vec3::new(p.up[0], p.up[1], p.up[2]),
            };
            print_json(&run_plane(&args, &log)?);
        }
        Command::Place {
            manifest,
            plane,
            asset,
            out,
        } => {
            let args = PlaceArgs {
                manifest,
                plane_id: plane,
                asset,
                seed,
                out,
            };
            print_json(&run_place(&args, &log)?);
        }
        Command::Eval {
            episodes,
            out,
            trajectories,
        } => {
            let outcome = run_eval(
                &EvalArgs {
                    episodes,
                    out_dir: out,
                    trajectories,
                },
                &log,
            )?;
            let mut stdout = std::io::stdout().lock();
            let _ = write!(stdout, "{}", outcome.report_text);
            if let Some(c) = &outcome.correlation {
                let _ = writeln!(
                    stdout,
                    "sim/real pearson r = {:.4} over {} task-averaged points",
                    c.r_task_averaged, c.points_task_averaged
                );
                if let Some(r) = c.r_per_task {
                    let _ = writeln!(stdout, "sim/real pearson r = {r:.4} over {} per-task points", c.points_per_task);
                }
            }
        }
        Command::Synth { config, out } => {
            print_json(&run_synth(
                &SynthArgs {
                    config,
                    out_dir: out,
                    seed: cli.seed,
                },
                &log,
            )?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
