//! Multi-room scene assembly, support planes and asset placement.
//!
//! Pairwise registrations `T_fine` map room-a coordinates into room b. With
//! `local_to_world` transforms `W`, consistency requires
//! `W_b⁻¹ ∘ W_a = T_fine`, so walking the registration tree from the root
//! sets `W_b = W_a ∘ T_fine⁻¹` (and `W_a = W_b ∘ T_fine` against the edge).

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{rot_z, Aabb, Plane, PointCloud, RigidTransform, Rotation, Vec3};
use crate::kdtree::KdTree;
use crate::ply::{read_ply, PlyError};

pub const SCHEMA_VERSION: u32 = 1;
pub const MAX_PLACEMENT_ATTEMPTS: usize = 100;
pub const FLATNESS_LIMIT: f64 = 0.01;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("duplicate room id {0:?}")]
    DuplicateRoom(String),
    #[error("unknown room {0:?}")]
    UnknownRoom(String),
    #[error("registration graph disconnected: rooms {0:?} unreachable from the root")]
    Disconnected(Vec<String>),
    #[error("registration graph has a cycle through {0:?} - {1:?}")]
    Cycle(String, String),
    #[error("registration pairs room {0:?} with itself")]
    SelfLoop(String),
    #[error("root room {0:?} is not in the manifest")]
    MissingRoot(String),
    #[error("unknown support plane {0:?}")]
    UnknownPlane(String),
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("plane fit needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("degenerate point set: every sample was collinear")]
    Degenerate,
    #[error("no plane with at least {required} inliers (best had {best})")]
    NoPlane { best: usize, required: usize },
    #[error("asset {asset:?} footprint does not fit on plane {plane:?}")]
    AssetTooLarge { asset: String, plane: String },
    #[error("no collision-free pose for asset {asset:?} after {attempts} attempts")]
    PlacementFailed { asset: String, attempts: usize },
    #[error("invalid asset: {0}")]
    InvalidAsset(String),
    #[error("manifest {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("cloud for room {room:?}: {source}")]
    Cloud {
        room: String,
        #[source]
        source: PlyError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomNode {
    pub id: String,
    /// Room cloud in its local frame; stored on disk at `cloud_file`.
    #[serde(skip)]
    pub cloud: PointCloud,
    /// PLY path, relative to the manifest's directory.
    pub cloud_file: String,
    pub local_to_world: RigidTransform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRegistration {
    pub room_a: String,
    pub room_b: String,
    pub t_coarse: RigidTransform,
    pub t_fine: RigidTransform,
    #[serde(default)]
    pub diagnostics: serde_json::Value,
}

/// A fitted placement surface: up-facing plane plus an in-plane rectangle
/// `origin + s u + t v`, `s ∈ [u_range]`, `t ∈ [v_range]` bounding its inliers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportPlane {
    pub id: String,
    pub plane: Plane,
    pub origin: Vec3,
    pub axis_u: Vec3,
    pub axis_v: Vec3,
    pub u_range: [f64; 2],
    pub v_range: [f64; 2],
}

impl SupportPlane {
    /// Orients `plane` toward `up` and bounds the projected `points`.
    pub fn from_points(id: impl Into<String>, plane: &Plane, points: &[Vec3], up: &Vec3) -> Option<Self> {
        let plane = plane.oriented_toward(up);
        let (u, v) = plane.basis();
        let origin = plane.project(&Vec3::zeros());
        let mut ur = [f64::INFINITY, f64::NEG_INFINITY];
        let mut vr = ur;
        for p in points {
            let d = plane.project(p) - origin;
            let (s, t) = (d.dot(&u), d.dot(&v));
            ur = [ur[0].min(s), ur[1].max(s)];
            vr = [vr[0].min(t), vr[1].max(t)];
        }
        (ur[0] <= ur[1]).then(|| Self {
            id: id.into(),
            plane,
            origin,
            axis_u: u,
            axis_v: v,
            u_range: ur,
            v_range: vr,
        })
    }

    pub fn point_at(&self, s: f64, t: f64) -> Vec3 {
        self.origin + self.axis_u * s + self.axis_v * t
    }

    /// Rotation taking asset-local axes (z up) to the plane frame.
    pub fn frame(&self) -> Rotation {
        Rotation::from_matrix_unchecked(nalgebra::Matrix3::from_columns(&[
            self.axis_u,
            self.axis_v,
            self.plane.normal.into_inner(),
        ]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetInstance {
    pub asset_id: String,
    pub aabb_local: Aabb,
    pub pose: RigidTransform,
    pub support_plane_id: String,
    pub semantic_label: String,
}

impl AssetInstance {
    pub fn world_aabb(&self) -> Aabb {
        self.aabb_local.transformed(&self.pose)
    }

    /// Largest distance of the posed bottom-face corners from `plane`.
    pub fn snap_error(&self, plane: &Plane) -> f64 {
        let (lo, hi) = (self.aabb_local.min, self.aabb_local.max);
        [(lo.x, lo.y), (hi.x, lo.y), (lo.x, hi.y), (hi.x, hi.y)]
            .iter()
            .map(|&(x, y)| plane.signed_distance(&self.pose.transform_point(&Vec3::new(x, y, lo.z))).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub schema_version: u32,
    pub root_room: String,
    pub rooms: Vec<RoomNode>,
    pub pair_registrations: Vec<PairRegistration>,
    #[serde(default)]
    pub planes: Vec<SupportPlane>,
    #[serde(default)]
    pub assets: Vec<AssetInstance>,
}

impl SceneManifest {
    pub fn new(root_room: impl Into<String>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            root_room: root_room.into(),
            rooms: Vec::new(),
            pair_registrations: Vec::new(),
            planes: Vec::new(),
            assets: Vec::new(),
        }
    }

    pub fn plane(&self, id: &str) -> Option<&SupportPlane> {
        self.planes.iter().find(|p| p.id == id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// Parses a manifest without touching room clouds.
    pub fn from_json(text: &str, path: &Path) -> Result<Self, SceneError> {
        serde_json::from_str(text).map_err(|source| SceneError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Loads each room's PLY, resolving `cloud_file` against `base_dir`.
    pub fn load_clouds(&mut self, base_dir: &Path) -> Result<(), SceneError> {
        for room in &mut self.rooms {
            let ply = read_ply(base_dir.join(&room.cloud_file)).map_err(|source| SceneError::Cloud {
                room: room.id.clone(),
                source,
            })?;
            room.cloud = ply.cloud;
        }
        Ok(())
    }

    /// Ids unique, every asset on a known plane.
    pub fn validate(&self) -> Result<(), SceneError> {
        let mut seen = HashMap::new();
        for r in &self.rooms {
            if seen.insert(r.id.as_str(), ()).is_some() {
                return Err(SceneError::DuplicateRoom(r.id.clone()));
            }
        }
        let mut planes = HashMap::new();
        for p in &self.planes {
            if planes.insert(p.id.as_str(), ()).is_some() {
                return Err(SceneError::DuplicateId(p.id.clone()));
            }
        }
        let mut assets = HashMap::new();
        for a in &self.assets {
            if !planes.contains_key(a.support_plane_id.as_str()) {
                return Err(SceneError::UnknownPlane(a.support_plane_id.clone()));
            }
            if assets.insert(a.asset_id.as_str(), ()).is_some() {
                return Err(SceneError::DuplicateId(a.asset_id.clone()));
            }
        }
        Ok(())
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut i: usize) -> usize {
        while self.0[i] != i {
            self.0[i] = self.0[self.0[i]];
            i = self.0[i];
        }
        i
    }
}

/// World transforms for every room from a spanning tree of registrations.
pub fn solve_world_transforms(
    room_ids: &[String],
    registrations: &[PairRegistration],
    root: &str,
) -> Result<BTreeMap<String, RigidTransform>, SceneError> {
    let mut index = HashMap::new();
    for (i, id) in room_ids.iter().enumerate() {
        if index.insert(id.as_str(), i).is_some() {
            return Err(SceneError::DuplicateRoom(id.clone()));
        }
    }
    let root_idx = *index.get(root).ok_or_else(|| SceneError::MissingRoot(root.to_string()))?;
    let lookup = |id: &str| index.get(id).copied().ok_or_else(|| SceneError::UnknownRoom(id.to_string()));

    let mut uf = UnionFind((0..room_ids.len()).collect());
    let mut adjacency: Vec<Vec<(usize, RigidTransform)>> = vec![Vec::new(); room_ids.len()];
    for reg in registrations {
        let (a, b) = (lookup(&reg.room_a)?, lookup(&reg.room_b)?);
        if a == b {
            return Err(SceneError::SelfLoop(reg.room_a.clone()));
        }
        let (ra, rb) = (uf.find(a), uf.find(b));
        if ra == rb {
            return Err(SceneError::Cycle(reg.room_a.clone(), reg.room_b.clone()));
        }
        uf.0[ra] = rb;
        // Transform to apply to the parent's world pose when stepping along.
        adjacency[a].push((b, reg.t_fine.inverse()));
        adjacency[b].push((a, reg.t_fine));
    }

    let mut world: Vec<Option<RigidTransform>> = vec![None; room_ids.len()];
    world[root_idx] = Some(RigidTransform::identity());
    let mut queue = VecDeque::from([root_idx]);
    while let Some(i) = queue.pop_front() {
        let wi = world[i].expect("queued rooms are solved");
        for (j, step) in &adjacency[i] {
            if world[*j].is_none() {
                world[*j] = Some(wi.compose(step));
                queue.push_back(*j);
            }
        }
    }
    let unreached: Vec<String> = world
        .iter()
        .zip(room_ids)
        .filter(|(w, _)| w.is_none())
        .map(|(_, id)| id.clone())
        .collect();
    if !unreached.is_empty() {
        return Err(SceneError::Disconnected(unreached));
    }
    Ok(room_ids
        .iter()
        .cloned()
        .zip(world.into_iter().map(|w| w.expect("all reached")))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergedScene {
    pub cloud: PointCloud,
    /// Index into `SceneManifest::rooms` for each point.
    pub room_ids: Vec<i32>,
    pub world: BTreeMap<String, RigidTransform>,
}

/// Solves world transforms, writes them into the manifest, and concatenates
/// the transformed room clouds.
pub fn merge_rooms(manifest: &mut SceneManifest) -> Result<MergedScene, SceneError> {
    let ids: Vec<String> = manifest.rooms.iter().map(|r| r.id.clone()).collect();
    let world = solve_world_transforms(&ids, &manifest.pair_registrations, &manifest.root_room)?;
    let keep_normals = manifest.rooms.iter().all(|r| r.cloud.has_normals());
    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut room_ids = Vec::new();
    for (k, room) in manifest.rooms.iter_mut().enumerate() {
        room.local_to_world = world[&room.id];
        let moved = room.cloud.transformed(&room.local_to_world);
        room_ids.extend(std::iter::repeat(k as i32).take(moved.len()));
        points.extend(moved.points);
        if keep_normals {
            normals.extend(moved.normals.unwrap_or_default());
        }
    }
    let cloud = if keep_normals {
        PointCloud::with_normals(points, normals).expect("normals track points")
    } else {
        PointCloud::new(points)
    };
    Ok(MergedScene { cloud, room_ids, world })
}

/// RMS nearest-neighbour distance from points of `a` inside the shared
/// bounding-box region to cloud `b`, with the number of points used.
pub fn overlap_rms(a: &PointCloud, b: &PointCloud) -> Option<(f64, usize)> {
    let region = a.bounding_box()?.intersection(&b.bounding_box()?)?;
    let tree = KdTree::build(&b.points).ok()?;
    let idx = a.indices_within(&region);
    if idx.is_empty() {
        return None;
    }
    let sum: f64 = idx.iter().map(|&i| tree.nearest(&a.points[i]).distance.powi(2)).sum();
    Some(((sum / idx.len() as f64).sqrt(), idx.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlaneFitConfig {
    pub threshold: f64,
    pub min_inliers: usize,
    pub iterations: usize,
}

impl Default for PlaneFitConfig {
    fn default() -> Self {
        Self {
            threshold: 0.01,
            min_inliers: 50,
            iterations: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlaneFit {
    pub plane: Plane,
    pub inliers: Vec<usize>,
}

/// Largest-support plane by RANSAC, refit by least squares on its inliers.
pub fn fit_plane_ransac(cloud: &PointCloud, cfg: &PlaneFitConfig, seed: u64) -> Result<PlaneFit, SceneError> {
    let pts = &cloud.points;
    if pts.len() < 3 {
        return Err(SceneError::TooFewPoints(pts.len()));
    }
    let inliers_of = |plane: &Plane| -> Vec<usize> {
        (0..pts.len())
            .filter(|&i| plane.signed_distance(&pts[i]).abs() <= cfg.threshold)
            .collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, Plane)> = None;
    for _ in 0..cfg.iterations.max(1) {
        let idx = sample(&mut rng, pts.len(), 3);
        let Some(plane) = Plane::from_points(&pts[idx.index(0)], &pts[idx.index(1)], &pts[idx.index(2)]) else {
            continue;
        };
        let count = pts.iter().filter(|p| plane.signed_distance(p).abs() <= cfg.threshold).count();
        if best.as_ref().map_or(true, |(c, _)| count > *c) {
            best = Some((count, plane));
        }
    }
    let (count, mut plane) = best.ok_or(SceneError::Degenerate)?;
    let required = cfg.min_inliers.max(3);
    if count < required {
        return Err(SceneError::NoPlane { best: count, required });
    }
    let mut inliers = inliers_of(&plane);
    let inlier_pts: Vec<Vec3> = inliers.iter().map(|&i| pts[i]).collect();
    if let Some(refit) = Plane::fit(&inlier_pts) {
        let refit_inliers = inliers_of(&refit);
        if refit_inliers.len() >= inliers.len() {
            plane = refit;
            inliers = refit_inliers;
        }
    }
    Ok(PlaneFit {
        plane: plane.canonical(),
        inliers,
    })
}

/// Population standard deviation of signed distances to `plane`.
pub fn plane_stddev(plane: &Plane, points: impl Iterator<Item = Vec3>) -> f64 {
    let d: Vec<f64> = points.map(|p| plane.signed_distance(&p)).collect();
    if d.is_empty() {
        return 0.0;
    }
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Flattened {
    pub cloud: PointCloud,
    /// Inlier stddev about the plane before projection.
    pub stddev_before: f64,
    pub stddev_after: f64,
    /// Set when the pre-flatten stddev exceeds [`FLATNESS_LIMIT`].
    pub warning: Option<String>,
}

/// Projects the inlier points onto `plane`; other points are left as they are.
pub fn flatten_to_plane(cloud: &PointCloud, plane: &Plane, inliers: &[usize]) -> Flattened {
    let stddev_before = plane_stddev(plane, inliers.iter().map(|&i| cloud.points[i]));
    let mut out = cloud.clone();
    for &i in inliers {
        out.points[i] = plane.project(&cloud.points[i]);
        if let Some(normals) = &mut out.normals {
            normals[i] = plane.oriented_toward(&normals[i]).normal;
        }
    }
    let stddev_after = plane_stddev(plane, inliers.iter().map(|&i| out.points[i]));
    let warning = (stddev_before > FLATNESS_LIMIT).then(|| {
        format!("inlier stddev {stddev_before:.4} m exceeds the {FLATNESS_LIMIT} m flatness limit")
    });
    Flattened {
        cloud: out,
        stddev_before,
        stddev_after,
        warning,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetRequest {
    pub asset_id: String,
    pub aabb_local: Aabb,
    pub semantic_label: String,
    /// Fixed yaw in radians about the plane normal; sampled when absent.
    #[serde(default)]
    pub yaw: Option<f64>,
}

fn footprint(half: &Vec3, yaw: f64) -> (f64, f64) {
    let (s, c) = (yaw.sin().abs(), yaw.cos().abs());
    (c * half.x + s * half.y, s * half.x + c * half.y)
}

fn fits(plane: &SupportPlane, half: &Vec3, yaw: f64) -> bool {
    let (ex, ey) = footprint(half, yaw);
    plane.u_range[1] - plane.u_range[0] >= 2.0 * ex && plane.v_range[1] - plane.v_range[0] >= 2.0 * ey
}

/// Samples a collision-free pose on the plane: yaw uniform (unless fixed),
/// footprint center uniform over the region that keeps the footprint inside
/// the plane rectangle, bottom face on the plane.
pub fn place_asset(
    manifest: &SceneManifest,
    plane_id: &str,
    request: &AssetRequest,
    seed: u64,
) -> Result<AssetInstance, SceneError> {
    let plane = manifest
        .plane(plane_id)
        .ok_or_else(|| SceneError::UnknownPlane(plane_id.to_string()))?;
    if manifest.assets.iter().any(|a| a.asset_id == request.asset_id) {
        return Err(SceneError::DuplicateId(request.asset_id.clone()));
    }
    let local = request.aabb_local;
    let half = local.extent() * 0.5;
    let too_large = || SceneError::AssetTooLarge {
        asset: request.asset_id.clone(),
        plane: plane_id.to_string(),
    };
    match request.yaw {
        Some(yaw) if !fits(plane, &half, yaw) => return Err(too_large()),
        None if !fits(plane, &half, 0.0) && !fits(plane, &half, TAU / 4.0) => return Err(too_large()),
        _ => {}
    }

    let bottom_center = Vec3::new(local.center().x, local.center().y, local.min.z);
    let frame = plane.frame();
    let neighbours: Vec<Aabb> = manifest
        .assets
        .iter()
        .filter(|a| a.support_plane_id == plane_id)
        .map(AssetInstance::world_aabb)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let yaw = request.yaw.unwrap_or_else(|| rng.random_range(0.0..TAU));
        let s_draw: f64 = rng.random();
        let t_draw: f64 = rng.random();
        if !fits(plane, &half, yaw) {
            continue;
        }
        let (ex, ey) = footprint(&half, yaw);
        let (s_lo, s_hi) = (plane.u_range[0] + ex, plane.u_range[1] - ex);
        let (t_lo, t_hi) = (plane.v_range[0] + ey, plane.v_range[1] - ey);
        let anchor = plane.point_at(s_lo + (s_hi - s_lo) * s_draw, t_lo + (t_hi - t_lo) * t_draw);
        let rotation = frame * rot_z(yaw);
        let pose = RigidTransform::new(rotation, anchor - rotation * bottom_center);
        let instance = AssetInstance {
            asset_id: request.asset_id.clone(),
            aabb_local: local,
            pose,
            support_plane_id: plane_id.to_string(),
            semantic_label: request.semantic_label.clone(),
        };
        let world = instance.world_aabb();
        if neighbours.iter().all(|n| !n.overlaps(&world)) {
            return Ok(instance);
        }
    }
    Err(SceneError::PlacementFailed {
        asset: request.asset_id.clone(),
        attempts: MAX_PLACEMENT_ATTEMPTS,
    })
}
