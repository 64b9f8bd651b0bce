//! `stitch`: coarse and fine registration per room pair, then merge.

use std::path::{Path, PathBuf};

use panostitch::icp::register_clouds;
use panostitch::panorama::{bearings_from_matches, MatchFile, MatchLoadOptions};
use panostitch::pipeline::{coarse_align, CoarseConfig};
use panostitch::scale::GroundConfig;
use panostitch::scene::{merge_rooms, overlap_rms, solve_world_transforms, PairRegistration, RoomNode, SceneManifest};
use panostitch::seed::fork_seed;
use panostitch::{PointCloud, RigidTransform};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::error::CliError;
use crate::fsutil::{read_cloud, read_text, require_file, resolve, write_cloud, write_json};
use crate::log::Logger;
use crate::manifest::{PairSpec, StitchManifest};

pub const SCENE_FILE: &str = "scene.json";
pub const MERGED_FILE: &str = "merged.ply";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";
pub const ROOMS_DIR: &str = "rooms";

#[derive(Debug, Clone, Default)]
pub struct StitchOptions {
    /// Overrides the manifest seed.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct StitchOutcome {
    pub scene: SceneManifest,
    pub diagnostics: Value,
    pub scene_path: PathBuf,
    pub merged_path: PathBuf,
    pub diagnostics_path: PathBuf,
}

struct PairResult {
    registration: PairRegistration,
    cloud_a: PointCloud,
    cloud_b: PointCloud,
}

fn run_pair(spec: &PairSpec, base: &Path, seed: u64, log: &Logger) -> Result<PairResult, CliError> {
    let pair_fields = || json!({"room_a": spec.room_a, "room_b": spec.room_b});
    let match_path = resolve(base, &spec.match_file);
    let file = MatchFile::from_json(&read_text(&match_path)?)?;
    let matches = bearings_from_matches(&file, &MatchLoadOptions { min_score: spec.min_score })?;
    let gravity = spec.gravity_axis.direction()?;
    let cfg = CoarseConfig {
        ransac: spec.ransac,
        ground: GroundConfig {
            camera_height: spec.camera_height_m,
            ..spec.ground
        },
    };
    let pair_seed = fork_seed(seed, &format!("pair/{}/{}", spec.room_a, spec.room_b));
    let coarse = log.timed("coarse", pair_fields(), || coarse_align(&matches, &gravity, &cfg, pair_seed))?;

    let cloud_a = read_cloud(&resolve(base, &spec.cloud_a))?.cloud;
    let cloud_b = read_cloud(&resolve(base, &spec.cloud_b))?.cloud;
    let fine = log.timed("fine", pair_fields(), || {
        register_clouds(&cloud_a, &cloud_b, &coarse.transform, &spec.icp)
    })?;
    let (coarse_rot, coarse_trans) = coarse.transform.error_to(&fine.transform);

    let diagnostics = json!({
        "status": "ok",
        "coarse": {
            "matches": matches.len(),
            "inliers": coarse.inliers.len(),
            "inlier_ratio": coarse.inlier_ratio,
            "low_confidence": coarse.low_confidence,
            "triangulated": coarse.triangulated,
            "ground_points": coarse.ground_points,
            "scale": coarse.scale,
        },
        "fine": fine,
        "coarse_to_fine": {"rotation_deg": coarse_rot.to_degrees(), "translation_m": coarse_trans},
    });
    Ok(PairResult {
        registration: PairRegistration {
            room_a: spec.room_a.clone(),
            room_b: spec.room_b.clone(),
            t_coarse: coarse.transform,
            t_fine: fine.transform,
            diagnostics,
        },
        cloud_a,
        cloud_b,
    })
}

/// File-system-safe stem for a room cloud.
fn room_file(index: usize, id: &str) -> String {
    let clean: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{ROOMS_DIR}/{index:03}_{clean}.ply")
}

pub fn run_stitch(manifest_path: &Path, out_dir: &Path, opts: &StitchOptions, log: &Logger) -> Result<StitchOutcome, CliError> {
    let manifest = StitchManifest::from_json(&read_text(manifest_path)?)?;
    let base = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let seed = opts.seed.or(manifest.seed).unwrap_or(0);
    if manifest.pairs.is_empty() && manifest.rooms.as_ref().is_none_or(|r| r.len() > 1) {
        return Err(CliError::Input("stitch manifest lists no pairs".into()));
    }
    for p in &manifest.pairs {
        for f in [&p.match_file, &p.cloud_a, &p.cloud_b] {
            require_file(&resolve(&base, f))?;
        }
    }

    // Reject malformed graphs before any heavy work.
    let room_ids = manifest.room_ids();
    let skeleton: Vec<PairRegistration> = manifest
        .pairs
        .iter()
        .map(|p| PairRegistration {
            room_a: p.room_a.clone(),
            room_b: p.room_b.clone(),
            t_coarse: RigidTransform::identity(),
            t_fine: RigidTransform::identity(),
            diagnostics: Value::Null,
        })
        .collect();
    solve_world_transforms(&room_ids, &skeleton, &manifest.root_room)?;
    log.event("stitch", "start", json!({"pairs": manifest.pairs.len(), "rooms": room_ids.len(), "seed": seed}));

    let results: Vec<Result<PairResult, CliError>> = manifest
        .pairs
        .par_iter()
        .map(|p| run_pair(p, &base, seed, log).map_err(|e| e.in_pair(&p.room_a, &p.room_b)))
        .collect();

    let mut pair_diagnostics = Vec::new();
    let mut first_error = None;
    let mut ok = Vec::new();
    for (spec, result) in manifest.pairs.iter().zip(results) {
        match result {
            Ok(r) => {
                let mut d = r.registration.diagnostics.clone();
                d["room_a"] = json!(spec.room_a);
                d["room_b"] = json!(spec.room_b);
                pair_diagnostics.push(d);
                ok.push(r);
            }
            Err(e) => {
                log.event("stitch", "pair_failed", json!({"room_a": spec.room_a, "room_b": spec.room_b, "error": e.to_string(), "exit_code": e.exit_code()}));
                pair_diagnostics.push(json!({
                    "room_a": spec.room_a,
                    "room_b": spec.room_b,
                    "status": "error",
                    "error": e.to_string(),
                    "exit_code": e.exit_code(),
                }));
                first_error.get_or_insert(e);
            }
        }
    }
    let diagnostics_path = out_dir.join(DIAGNOSTICS_FILE);
    let mut diagnostics = json!({
        "seed": seed,
        "root_room": manifest.root_room,
        "rooms": room_ids,
        "pairs": pair_diagnostics,
    });
    if let Some(e) = first_error {
        write_json(&diagnostics_path, &diagnostics)?;
        return Err(e);
    }

    let mut scene = SceneManifest::new(manifest.root_room.clone());
    for (k, id) in room_ids.iter().enumerate() {
        let cloud = ok
            .iter()
            .find_map(|r| {
                if &r.registration.room_a == id {
                    Some(&r.cloud_a)
                } else if &r.registration.room_b == id {
                    Some(&r.cloud_b)
                } else {
                    None
                }
            })
            .cloned()
            .unwrap_or_default();
        scene.rooms.push(RoomNode {
            id: id.clone(),
            cloud,
            cloud_file: room_file(k, id),
            local_to_world: RigidTransform::identity(),
        });
    }
    scene.pair_registrations = ok.iter().map(|r| r.registration.clone()).collect();
    let merged = log.timed("merge", json!({}), || merge_rooms(&mut scene))?;

    // Residual misalignment of each pair, measured in the merged frame.
    let overlaps: Vec<Option<(f64, usize)>> = log.timed("overlap", json!({}), || {
        ok.par_iter()
            .map(|r| {
                let reg = &r.registration;
                let a = r.cloud_a.transformed(&merged.world[&reg.room_a]);
                let b = r.cloud_b.transformed(&merged.world[&reg.room_b]);
                overlap_rms(&a, &b)
            })
            .collect()
    });
    for (d, o) in diagnostics["pairs"].as_array_mut().expect("pair list").iter_mut().zip(&overlaps) {
        d["overlap_rms_m"] = json!(o.map(|o| o.0));
        d["overlap_points"] = json!(o.map_or(0, |o| o.1));
    }

    for room in &scene.rooms {
        write_cloud(&out_dir.join(&room.cloud_file), &room.cloud, None)?;
    }
    let merged_path = out_dir.join(MERGED_FILE);
    write_cloud(&merged_path, &merged.cloud, Some(&merged.room_ids))?;
    diagnostics["merged_points"] = json!(merged.cloud.len());
    let scene_path = out_dir.join(SCENE_FILE);
    write_json(&scene_path, &scene)?;
    write_json(&diagnostics_path, &diagnostics)?;
    log.event("stitch", "done", json!({"merged_points": merged.cloud.len()}));
    Ok(StitchOutcome {
        scene,
        diagnostics,
        scene_path,
        merged_path,
        diagnostics_path,
    })
}
