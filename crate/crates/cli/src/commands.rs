//! `plane`, `place`, `eval` and `synth` subcommands.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use panostitch::metrics::{
    generalization_report, load_trajectories, parse_episodes_csv, sim_real_correlation, spl, success_rate,
    EpisodeRecord, MetricsError,
};
use panostitch::scene::{
    fit_plane_ransac, flatten_to_plane, place_asset, plane_stddev, AssetRequest, PlaneFitConfig, SceneManifest,
    SupportPlane, FLATNESS_LIMIT,
};
use panostitch::seed::fork_seed;
use panostitch::testkit::{synth_episodes, synth_room_pair, EpisodeSpec, SynthSceneConfig};
use panostitch::{RigidTransform, Vec3};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::CliError;
use crate::fsutil::{ensure_dir, read_cloud, read_text, require_file, write_atomic, write_cloud, write_json};
use crate::log::Logger;
use crate::manifest::{GravityAxis, PairSpec, StitchManifest};

#[derive(Debug, Clone)]
pub struct PlaneArgs {
    pub cloud: PathBuf,
    pub fit: PlaneFitConfig,
    pub seed: u64,
    /// Plane report destination; the report is returned either way.
    pub out: Option<PathBuf>,
    /// Writes the cloud with inliers projected onto the plane.
    pub flatten: Option<PathBuf>,
    /// Scene manifest that gains the plane as a support surface.
    pub add_to: Option<PathBuf>,
    pub plane_id: String,
    /// Side of the plane the support surface faces.
    pub up: Vec3,
}

pub fn run_plane(args: &PlaneArgs, log: &Logger) -> Result<Value, CliError> {
    let cloud = read_cloud(&args.cloud)?.cloud;
    if cloud.is_empty() {
        return Err(CliError::Input(format!("{}: cloud has no points", args.cloud.display())));
    }
    let fit = log.timed("plane", json!({"points": cloud.len()}), || {
        fit_plane_ransac(&cloud, &args.fit, fork_seed(args.seed, "plane"))
    })?;
    let stddev = plane_stddev(&fit.plane, fit.inliers.iter().map(|&i| cloud.points[i]));
    let mut report = json!({
        "plane": fit.plane,
        "points": cloud.len(),
        "inliers": fit.inliers.len(),
        "stddev_m": stddev,
        "flatness_limit_m": FLATNESS_LIMIT,
        "flatness_ok": stddev <= FLATNESS_LIMIT,
    });

    if let Some(path) = &args.flatten {
        let flat = flatten_to_plane(&cloud, &fit.plane, &fit.inliers);
        write_cloud(path, &flat.cloud, None)?;
        let after: Vec<f64> = fit.inliers.iter().map(|&i| fit.plane.signed_distance(&flat.cloud.points[i])).collect();
        let mean = after.iter().sum::<f64>() / after.len().max(1) as f64;
        let variance = after.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / after.len().max(1) as f64;
        report["flattened"] = json!({
            "path": path.display().to_string(),
            "stddev_before_m": flat.stddev_before,
            "stddev_after_m": flat.stddev_after,
            "variance_after_m2": variance,
            "warning": flat.warning,
        });
    }

    if let Some(manifest_path) = &args.add_to {
        let mut scene = SceneManifest::from_json(&read_text(manifest_path)?, manifest_path)?;
        let inlier_pts: Vec<Vec3> = fit.inliers.iter().map(|&i| cloud.points[i]).collect();
        let support = SupportPlane::from_points(args.plane_id.clone(), &fit.plane, &inlier_pts, &args.up)
            .ok_or_else(|| CliError::Numerical("plane has no inliers to bound".into()))?;
        report["support_plane"] = serde_json::to_value(&support).expect("plane serializes");
        scene.planes.push(support);
        scene.validate()?;
        write_json(manifest_path, &scene)?;
    }

    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct PlaceArgs {
    pub manifest: PathBuf,
    pub plane_id: String,
    pub asset: PathBuf,
    pub seed: u64,
    /// Destination of the updated manifest; defaults to rewriting `manifest`.
    pub out: Option<PathBuf>,
}

pub fn run_place(args: &PlaceArgs, log: &Logger) -> Result<Value, CliError> {
    let mut scene = SceneManifest::from_json(&read_text(&args.manifest)?, &args.manifest)?;
    scene.validate()?;
    let request: AssetRequest = serde_json::from_str(&read_text(&args.asset)?)
        .map_err(|e| CliError::Input(format!("{}: invalid asset request: {e}", args.asset.display())))?;
    let seed = fork_seed(args.seed, &format!("place/{}", request.asset_id));
    let instance = log.timed("place", json!({"asset": request.asset_id}), || {
        place_asset(&scene, &args.plane_id, &request, seed)
    })?;
    scene.assets.push(instance.clone());
    scene.validate()?;
    write_json(args.out.as_ref().unwrap_or(&args.manifest), &scene)?;
    Ok(serde_json::to_value(&instance).expect("asset serializes"))
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub episodes: PathBuf,
    pub out_dir: Option<PathBuf>,
    /// Directory `traj_file` paths resolve against; loads trajectories when set.
    pub trajectories: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalOutcome {
    pub episodes: usize,
    pub cells: usize,
    pub report_csv: String,
    pub report_text: String,
    pub correlation: Option<panostitch::metrics::CorrelationSummary>,
    pub per_task: Vec<TaskSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TaskSummary {
    pub task: String,
    pub tier: String,
    pub method: Option<String>,
    pub domain: Option<String>,
    pub trials: usize,
    pub success_rate: f64,
    /// Present when every episode in the group records both path lengths.
    pub spl: Option<f64>,
}

fn task_summaries(episodes: &[EpisodeRecord]) -> Result<Vec<TaskSummary>, CliError> {
    let mut groups: BTreeMap<_, Vec<EpisodeRecord>> = BTreeMap::new();
    for e in episodes {
        let key = (e.task.clone(), e.tier, e.method.clone(), e.domain);
        groups.entry(key).or_default().push(e.clone());
    }
    groups
        .into_iter()
        .map(|((task, tier, method, domain), group)| {
            let spl = match spl(&group) {
                Ok(v) => Some(v),
                Err(MetricsError::MissingPathLength(_)) => None,
                Err(e) => return Err(e.into()),
            };
            Ok(TaskSummary {
                task,
                tier: tier.to_string(),
                method,
                domain: domain.map(|d| d.to_string()),
                trials: group.len(),
                success_rate: success_rate(&group)?,
                spl,
            })
        })
        .collect()
}

pub fn run_eval(args: &EvalArgs, log: &Logger) -> Result<EvalOutcome, CliError> {
    require_file(&args.episodes)?;
    let file = File::open(&args.episodes).map_err(|e| CliError::io(&args.episodes, e))?;
    let mut episodes = parse_episodes_csv(BufReader::new(file))
        .map_err(|e| CliError::Input(format!("{}: {e}", args.episodes.display())))?;
    if episodes.is_empty() {
        return Err(CliError::Input(format!("{}: no episodes", args.episodes.display())));
    }
    if let Some(base) = &args.trajectories {
        load_trajectories(&mut episodes, base)?;
    }
    let report = log.timed("eval", json!({"episodes": episodes.len()}), || generalization_report(&episodes));
    let cells = report.rows.iter().map(|r| r.cells.iter().flatten().count()).sum();
    let correlation = match sim_real_correlation(&episodes) {
        Ok(c) => Some(c),
        Err(MetricsError::NoSimRealPairs | MetricsError::TooFewPairs(_) | MetricsError::ZeroVariance(_)) => None,
        Err(e) => return Err(e.into()),
    };
    let outcome = EvalOutcome {
        episodes: episodes.len(),
        cells,
        report_csv: report.to_csv(),
        report_text: report.to_text(),
        correlation,
        per_task: task_summaries(&episodes)?,
    };
    if let Some(dir) = &args.out_dir {
        ensure_dir(dir)?;
        write_atomic(&dir.join("report.csv"), outcome.report_csv.as_bytes())?;
        write_json(&dir.join("correlation.json"), &outcome.correlation)?;
        write_json(&dir.join("summary.json"), &outcome.per_task)?;
    }
    Ok(outcome)
}

/// `synth` config: scene fields at the top level plus optional episodes.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SynthConfig {
    #[serde(flatten)]
    pub scene: SynthSceneConfig,
    #[serde(default)]
    pub episodes: Option<EpisodeSpec>,
}

#[derive(Debug, Clone)]
pub struct SynthArgs {
    pub config: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Replaces the scene and episode seeds from the config.
    pub seed: Option<u64>,
}

pub const SYNTH_MATCHES: &str = "matches.json";
pub const SYNTH_CLOUD_A: &str = "room_a.ply";
pub const SYNTH_CLOUD_B: &str = "room_b.ply";
pub const SYNTH_TRUTH: &str = "ground_truth.json";
pub const SYNTH_MANIFEST: &str = "stitch.json";
pub const SYNTH_EPISODES: &str = "episodes.csv";

/// Sampson gate matched to the synthesized pixel noise: about 1.6 px.
fn ransac_threshold(cfg: &SynthSceneConfig) -> f64 {
    let pixel = std::f64::consts::TAU / cfg.panorama_width as f64;
    let default = panostitch::epipolar::RansacConfig::default().threshold;
    default.max(1.6 * cfg.pixel_noise_sigma * pixel)
}

pub fn run_synth(args: &SynthArgs, log: &Logger) -> Result<Value, CliError> {
    let mut cfg: SynthConfig = match &args.config {
        Some(path) => serde_json::from_str(&read_text(path)?)
            .map_err(|e| CliError::Input(format!("{}: invalid synth config: {e}", path.display())))?,
        None => SynthConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.scene.seed = seed;
        if let Some(ep) = &mut cfg.episodes {
            ep.seed = fork_seed(seed, "episodes");
        }
    }
    let pair = log.timed("synth", json!({"seed": cfg.scene.seed}), || synth_room_pair(&cfg.scene))?;
    let out = &args.out_dir;
    ensure_dir(out)?;
    write_atomic(&out.join(SYNTH_MATCHES), pair.matches.to_json().as_bytes())?;
    write_cloud(&out.join(SYNTH_CLOUD_A), &pair.cloud_a, None)?;
    write_cloud(&out.join(SYNTH_CLOUD_B), &pair.cloud_b, None)?;

    let truth = json!({
        "gt_a_to_b": pair.gt,
        "world": {"a": RigidTransform::identity(), "b": pair.gt.inverse()},
        "camera_height": pair.camera_height,
        "gravity_a": pair.gravity_a.into_inner(),
        "labels": pair.labels,
    });
    write_json(&out.join(SYNTH_TRUTH), &truth)?;

    let manifest = StitchManifest {
        root_room: "a".into(),
        rooms: None,
        seed: Some(cfg.scene.seed),
        pairs: vec![PairSpec {
            room_a: "a".into(),
            room_b: "b".into(),
            match_file: SYNTH_MATCHES.into(),
            cloud_a: SYNTH_CLOUD_A.into(),
            cloud_b: SYNTH_CLOUD_B.into(),
            camera_height_m: pair.camera_height,
            gravity_axis: GravityAxis::Vector(pair.gravity_a.into_inner().into()),
            min_score: 0.0,
            ransac: panostitch::epipolar::RansacConfig {
                threshold: ransac_threshold(&cfg.scene),
                ..Default::default()
            },
            ground: Default::default(),
            icp: Default::default(),
        }],
    };
    write_json(&out.join(SYNTH_MANIFEST), &manifest)?;

    let mut summary = json!({
        "out_dir": out.display().to_string(),
        "matches": pair.matches.matches.len(),
        "outliers": pair.labels.outlier.iter().filter(|&&o| o).count(),
        "cloud_a_points": pair.cloud_a.len(),
        "cloud_b_points": pair.cloud_b.len(),
        "scale_k": pair.labels.scale_k,
    });
    if let Some(spec) = &cfg.episodes {
        let eps = synth_episodes(spec)?;
        write_atomic(
            &out.join(SYNTH_EPISODES),
            panostitch::metrics::episodes_to_csv(&eps.records).as_bytes(),
        )?;
        summary["episodes"] = json!(eps.records.len());
        summary["empirical"] = serde_json::to_value(&eps.empirical).expect("rates serialize");
    }
    Ok(summary)
}

