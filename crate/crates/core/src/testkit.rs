//! Synthetic two-room scenes and episode logs with known answers.
//!
//! World frame: floor at `z = 0`, z up. Room A spans
//! `x ∈ [−Lx/2, Lx/2]`, `y ∈ [−Ly/2, Ly/2]`; a partition of thickness `τ`
//! at `x = Lx/2` has a door opening `|y| ≤ w/2`, `z ≤ door_height`; room B
//! continues on the far side with the same extents. There is no ceiling.
//! Camera a sits at `(0, 0, h)` with world-aligned axes, so frame a is the
//! world shifted down by `h`. Camera b's pose comes from `gt_relative_pose`,
//! which maps frame-a coordinates to frame b.
//!
//! Scale convention: unit-baseline coordinates are `p_unit = k · p_metric`
//! with `k = 1 / ‖t_gt‖`, so the recovered scale satisfies `α · k = 1`.

use std::f64::consts::TAU;

use nalgebra::Unit;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{rot_z, PointCloud, RigidTransform, UnitVec3, Vec3};
use crate::metrics::{Domain, EpisodeRecord, Tier};
use crate::panorama::{bearing_to_pixel, KeypointMatch, MatchFile, PanoramaSpec};
use crate::seed::stage_rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic scene config: {0}")]
    InvalidConfig(String),
    #[error("ground-truth pose leaves {found} co-visible {kind} points, {requested} requested")]
    NoCovisible {
        kind: &'static str,
        found: usize,
        requested: usize,
    },
    #[error("invalid episode spec: {0}")]
    InvalidEpisodes(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSceneConfig {
    /// Per-room extents (Lx, Ly, Lz) in meters.
    pub room_extent: Vec3,
    /// Co-visible floor points turned into keypoint matches.
    pub floor_point_count: usize,
    /// Co-visible wall points turned into keypoint matches.
    pub wall_point_count: usize,
    pub camera_height: f64,
    pub gt_relative_pose: RigidTransform,
    pub pixel_noise_sigma: f64,
    pub outlier_fraction: f64,
    pub seed: u64,
    pub panorama_width: u32,
    pub door_width: f64,
    pub door_height: f64,
    pub partition_thickness: f64,
    /// Points in each room cloud.
    pub cloud_point_count: usize,
    /// How far each room cloud extends past the partition into the other room.
    pub overlap_margin: f64,
}

impl Default for SynthSceneConfig {
    fn default() -> Self {
        let mut cfg = Self {
            room_extent: Vec3::new(5.0, 4.0, 2.5),
            floor_point_count: 150,
            wall_point_count: 150,
            camera_height: 1.5,
            gt_relative_pose: RigidTransform::identity(),
            pixel_noise_sigma: 0.0,
            outlier_fraction: 0.0,
            seed: 0,
            panorama_width: 2048,
            door_width: 1.2,
            door_height: 2.1,
            partition_thickness: 0.15,
            cloud_point_count: 20_000,
            overlap_margin: 1.0,
        };
        let x1 = cfg.room_extent.x / 2.0 + cfg.partition_thickness;
        cfg.gt_relative_pose = cfg.pose_for_camera_b(Vec3::new(x1 + 1.8, 0.6, cfg.camera_height), 2.4);
        cfg
    }
}

impl SynthSceneConfig {
    /// Relative pose for a level camera b at world `center` with `yaw`.
    pub fn pose_for_camera_b(&self, center: Vec3, yaw: f64) -> RigidTransform {
        let orientation = rot_z(yaw);
        let c = center - Vec3::new(0.0, 0.0, self.camera_height);
        RigidTransform::new(orientation.inverse(), -(orientation.inverse() * c))
    }

    /// Default layout with camera b drawn uniformly inside room B (at least
    /// 1 m from its end walls and 0.8 m from its side walls) and a uniform yaw.
    pub fn sampled(seed: u64) -> Self {
        let mut cfg = Self {
            seed,
            ..Self::default()
        };
        let mut rng = stage_rng(seed, "testkit/layout");
        let (lx, ly) = (cfg.room_extent.x, cfg.room_extent.y);
        let x1 = lx / 2.0 + cfg.partition_thickness;
        let center = Vec3::new(
            rng.random_range(x1 + 1.0..x1 + lx - 1.0),
            rng.random_range(-ly / 2.0 + 0.8..ly / 2.0 - 0.8),
            cfg.camera_height,
        );
        cfg.gt_relative_pose = cfg.pose_for_camera_b(center, rng.random_range(0.0..TAU));
        cfg
    }

    pub fn panorama(&self) -> PanoramaSpec {
        PanoramaSpec {
            width: self.panorama_width,
            height: self.panorama_width / 2,
        }
    }

    pub fn camera_a_world(&self) -> Vec3 {
        Vec3::new(0.0, 0.0, self.camera_height)
    }

    /// Camera b's center in world coordinates.
    pub fn camera_b_world(&self) -> Vec3 {
        let t = &self.gt_relative_pose;
        self.camera_a_world() - (t.rotation.inverse() * t.translation)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        let e = self.room_extent;
        if !(e.x > 0.0 && e.y > 0.0 && e.z > 0.0) {
            return bad("room extents must be positive");
        }
        if self.floor_point_count == 0 || self.wall_point_count == 0 || self.cloud_point_count == 0 {
            return bad("point counts must be positive");
        }
        if !(self.camera_height > 0.0 && self.camera_height < e.z) {
            return bad("camera height must lie between floor and room height");
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return bad("outlier_fraction must lie in [0, 1)");
        }
        if !(self.pixel_noise_sigma >= 0.0) {
            return bad("pixel_noise_sigma must be non-negative");
        }
        if self.panorama_width < 2 || self.panorama_width % 2 != 0 {
            return bad("panorama_width must be even and at least 2");
        }
        if !(self.door_width > 0.0 && self.door_width < e.y && self.door_height > 0.0 && self.door_height <= e.z) {
            return bad("door must fit inside the partition");
        }
        if !(self.partition_thickness > 0.0 && self.overlap_margin >= 0.0) {
            return bad("partition thickness must be positive and overlap margin non-negative");
        }
        if self.gt_relative_pose.translation.norm() == 0.0 {
            return bad("ground-truth baseline must be nonzero");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Surface {
    Floor,
    Wall,
    /// Horizontal faces above the floor, such as the door lintel's underside.
    Overhead,
}

/// Axis-aligned rectangle with an outward (free-space facing) normal.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Rect {
    axis: usize,
    coord: f64,
    /// Bounds on the two remaining axes in increasing axis order.
    lo: [f64; 2],
    hi: [f64; 2],
    sign: f64,
    surface: Surface,
}

impl Rect {
    fn others(&self) -> [usize; 2] {
        match self.axis {
            0 => [1, 2],
            1 => [0, 2],
            _ => [0, 1],
        }
    }

    fn area(&self) -> f64 {
        (self.hi[0] - self.lo[0]) * (self.hi[1] - self.lo[1])
    }

    fn normal(&self) -> UnitVec3 {
        let mut n = Vec3::zeros();
        n[self.axis] = self.sign;
        Unit::new_unchecked(n)
    }

    fn point(&self, s: f64, t: f64) -> Vec3 {
        let [i, j] = self.others();
        let mut p = Vec3::zeros();
        p[self.axis] = self.coord;
        p[i] = self.lo[0] + s * (self.hi[0] - self.lo[0]);
        p[j] = self.lo[1] + t * (self.hi[1] - self.lo[1]);
        p
    }

    /// Restricts the rectangle to `x ∈ [xmin, xmax]`.
    fn clip_x(&self, xmin: f64, xmax: f64) -> Option<Rect> {
        if self.axis == 0 {
            return (self.coord >= xmin && self.coord <= xmax).then_some(*self);
        }
        let mut r = *self;
        r.lo[0] = r.lo[0].max(xmin);
        r.hi[0] = r.hi[0].min(xmax);
        (r.hi[0] > r.lo[0]).then_some(r)
    }

    /// Whether the open segment `from → to` crosses this rectangle.
    fn blocks(&self, from: &Vec3, to: &Vec3) -> bool {
        let denom = to[self.axis] - from[self.axis];
        if denom.abs() < 1e-15 {
            return false;
        }
        let s = (self.coord - from[self.axis]) / denom;
        if s <= 1e-9 || s >= 1.0 - 1e-9 {
            return false;
        }
        let hit = from + (to - from) * s;
        let [i, j] = self.others();
        hit[i] >= self.lo[0] && hit[i] <= self.hi[0] && hit[j] >= self.lo[1] && hit[j] <= self.hi[1]
    }
}

/// Analytic surfaces of the two-room layout in world coordinates.
struct Layout {
    rects: Vec<Rect>,
    partition_near: f64,
    partition_far: f64,
}

impl Layout {
    fn new(cfg: &SynthSceneConfig) -> Self {
        let (lx, ly, lz) = (cfg.room_extent.x, cfg.room_extent.y, cfg.room_extent.z);
        let (x0, x1) = (lx / 2.0, lx / 2.0 + cfg.partition_thickness);
        let (xa, xb) = (-lx / 2.0, x1 + lx);
        let (hy, w, hd) = (ly / 2.0, cfg.door_width / 2.0, cfg.door_height);
        let r = |axis, coord, lo: [f64; 2], hi: [f64; 2], sign, surface| Rect {
            axis,
            coord,
            lo,
            hi,
            sign,
            surface,
        };
        use Surface::*;
        let mut rects = vec![
            // Floors: room A, door threshold, room B.
            r(2, 0.0, [xa, -hy], [x0, hy], 1.0, Floor),
            r(2, 0.0, [x0, -w], [x1, w], 1.0, Floor),
            r(2, 0.0, [x1, -hy], [xb, hy], 1.0, Floor),
            // Outer walls.
            r(0, xa, [-hy, 0.0], [hy, lz], 1.0, Wall),
            r(0, xb, [-hy, 0.0], [hy, lz], -1.0, Wall),
            r(1, -hy, [xa, 0.0], [x0, lz], 1.0, Wall),
            r(1, hy, [xa, 0.0], [x0, lz], -1.0, Wall),
            r(1, -hy, [x1, 0.0], [xb, lz], 1.0, Wall),
            r(1, hy, [x1, 0.0], [xb, lz], -1.0, Wall),
            // Door jambs face into the opening.
            r(1, -w, [x0, 0.0], [x1, hd], 1.0, Wall),
            r(1, w, [x0, 0.0], [x1, hd], -1.0, Wall),
            r(2, hd, [x0, -w], [x1, w], -1.0, Overhead),
        ];
        // Partition faces on both sides, minus the door opening.
        for (x, sign) in [(x0, -1.0), (x1, 1.0)] {
            rects.push(r(0, x, [-hy, 0.0], [-w, lz], sign, Wall));
            rects.push(r(0, x, [w, 0.0], [hy, lz], sign, Wall));
            if hd < lz {
                rects.push(r(0, x, [-w, hd], [w, lz], sign, Wall));
            }
        }
        Self {
            rects,
            partition_near: x0,
            partition_far: x1,
        }
    }

    fn visible(&self, camera: &Vec3, p: &Vec3, normal: &UnitVec3) -> bool {
        normal.dot(&(camera - p)) > 1e-9 && !self.rects.iter().any(|r| r.blocks(camera, p))
    }

    /// Area-weighted uniform sample over `rects`.
    fn sample_on(rects: &[Rect], rng: &mut impl Rng) -> (Vec3, UnitVec3, Surface) {
        let total: f64 = rects.iter().map(Rect::area).sum();
        let mut pick = rng.random_range(0.0..total);
        let mut chosen = rects[rects.len() - 1];
        for r in rects {
            if pick < r.area() {
                chosen = *r;
                break;
            }
            pick -= r.area();
        }
        let (s, t) = (rng.random::<f64>(), rng.random::<f64>());
        (chosen.point(s, t), chosen.normal(), chosen.surface)
    }
}

/// Ground truth attached to each synthesized match, in match order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthLabels {
    pub outlier: Vec<bool>,
    pub surface: Vec<Surface>,
    /// Scene point of each match in metric frame-a coordinates.
    pub points_a: Vec<Vec3>,
    /// `p_unit = scale_k · p_metric`.
    pub scale_k: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthRoomPair {
    pub matches: MatchFile,
    /// Room A surfaces in frame a (meters) with analytic normals.
    pub cloud_a: PointCloud,
    /// Room B surfaces in frame b (meters) with analytic normals.
    pub cloud_b: PointCloud,
    pub gt: RigidTransform,
    pub labels: SynthLabels,
    pub camera_height: f64,
    /// Gravity direction in frame a.
    pub gravity_a: UnitVec3,
}

fn wrap_u(u: f64, w: f64) -> f64 {
    let r = u.rem_euclid(w);
    if r >= w {
        0.0
    } else {
        r
    }
}

fn fold_v(v: f64, h: f64) -> f64 {
    let mut v = v.abs();
    if v >= h {
        v = 2.0 * h - v;
    }
    v.clamp(0.0, h * (1.0 - f64::EPSILON))
}

pub fn synth_room_pair(cfg: &SynthSceneConfig) -> Result<SynthRoomPair, SynthError> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let gt = cfg.gt_relative_pose;
    let cam_a = cfg.camera_a_world();
    let cam_b = cfg.camera_b_world();

    let floors: Vec<Rect> = layout.rects.iter().filter(|r| r.surface == Surface::Floor).copied().collect();
    let walls: Vec<Rect> = layout.rects.iter().filter(|r| r.surface == Surface::Wall).copied().collect();
    let mut rng = stage_rng(cfg.seed, "testkit/points");
    let mut world_points = Vec::new();
    let mut surfaces = Vec::new();
    for (rects, count, kind) in [(&floors, cfg.floor_point_count, "floor"), (&walls, cfg.wall_point_count, "wall")] {
        let mut found = 0;
        let mut tries = 0;
        while found < count && tries < count * 2000 {
            tries += 1;
            let (p, n, s) = Layout::sample_on(rects, &mut rng);
            if layout.visible(&cam_a, &p, &n) && layout.visible(&cam_b, &p, &n) {
                world_points.push(p);
                surfaces.push(s);
                found += 1;
            }
        }
        if found < count {
            return Err(SynthError::NoCovisible {
                kind,
                found,
                requested: count,
            });
        }
    }

    let spec = cfg.panorama();
    let (w, h) = (spec.width as f64, spec.height as f64);
    let points_a: Vec<Vec3> = world_points.iter().map(|p| p - cam_a).collect();
    let mut noise_rng = stage_rng(cfg.seed, "testkit/noise");
    let noise = Normal::new(0.0, cfg.pixel_noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut jitter = |x: f64| {
        if cfg.pixel_noise_sigma > 0.0 {
            x + noise.sample(&mut noise_rng)
        } else {
            x
        }
    };
    let mut score_rng = stage_rng(cfg.seed, "testkit/scores");
    let mut matches: Vec<KeypointMatch> = points_a
        .iter()
        .map(|pa| {
            let (ua, va) = bearing_to_pixel(pa, spec);
            let (ub, vb) = bearing_to_pixel(&gt.transform_point(pa), spec);
            KeypointMatch {
                ua: wrap_u(jitter(ua), w),
                va: fold_v(jitter(va), h),
                ub: wrap_u(jitter(ub), w),
                vb: fold_v(jitter(vb), h),
                score: score_rng.random_range(0.5..=1.0),
            }
        })
        .collect();

    let n = matches.len();
    let n_out = (cfg.outlier_fraction * n as f64 - 1e-9).ceil().max(0.0) as usize;
    let mut outlier = vec![false; n];
    let mut out_rng = stage_rng(cfg.seed, "testkit/outliers");
    for i in sample(&mut out_rng, n, n_out.min(n)) {
        outlier[i] = true;
        matches[i].ub = out_rng.random_range(0.0..w);
        matches[i].vb = out_rng.random_range(0.0..h);
    }

    let sample_cloud = |xmin: f64, xmax: f64, label: &str| -> Vec<(Vec3, UnitVec3)> {
        let rects: Vec<Rect> = layout.rects.iter().filter_map(|r| r.clip_x(xmin, xmax)).collect();
        let mut rng = stage_rng(cfg.seed, label);
        (0..cfg.cloud_point_count)
            .map(|_| {
                let (p, n, _) = Layout::sample_on(&rects, &mut rng);
                (p, n)
            })
            .collect()
    };
    let into_cloud = |samples: Vec<(Vec3, UnitVec3)>, to_frame: &RigidTransform| -> PointCloud {
        let (pts, normals): (Vec<Vec3>, Vec<UnitVec3>) = samples
            .into_iter()
            .map(|(p, n)| (to_frame.transform_point(&p), Unit::new_unchecked(to_frame.rotation * n.into_inner())))
            .unzip();
        PointCloud::with_normals(pts, normals).expect("normals track points")
    };
    let world_to_a = RigidTransform::from_translation(-cam_a);
    let world_to_b = gt.compose(&world_to_a);
    let cloud_a = into_cloud(
        sample_cloud(f64::NEG_INFINITY, layout.partition_far + cfg.overlap_margin, "testkit/cloud_a"),
        &world_to_a,
    );
    let cloud_b = into_cloud(
        sample_cloud(layout.partition_near - cfg.overlap_margin, f64::INFINITY, "testkit/cloud_b"),
        &world_to_b,
    );

    Ok(SynthRoomPair {
        matches: MatchFile {
            pano_a: spec,
            pano_b: spec,
            matches,
        },
        cloud_a,
        cloud_b,
        gt,
        labels: SynthLabels {
            outlier,
            surface: surfaces,
            points_a,
            scale_k: 1.0 / gt.translation.norm(),
        },
        camera_height: cfg.camera_height,
        gravity_a: -Vec3::z_axis(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathLengthSpec {
    pub shortest_min: f64,
    pub shortest_max: f64,
    /// Actual length is `shortest · (1 + U[0, detour_max])`.
    pub detour_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeCellSpec {
    pub task: String,
    pub tier: Tier,
    pub n_trials: usize,
    pub true_rate: f64,
    #[serde(default)]
    pub method: Option<String>,
    #[serde(default)]
    pub domain: Option<Domain>,
    #[serde(default)]
    pub path_length: Option<PathLengthSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub cells: Vec<EpisodeCellSpec>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmpiricalRate {
    pub task: String,
    pub tier: Tier,
    pub method: Option<String>,
    pub domain: Option<Domain>,
    pub successes: usize,
    pub trials: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthEpisodes {
    pub records: Vec<EpisodeRecord>,
    /// Realized success rate of each spec cell, in spec order.
    pub empirical: Vec<EmpiricalRate>,
}

/// Seeded Bernoulli episodes per spec cell.
pub fn synth_episodes(spec: &EpisodeSpec) -> Result<SynthEpisodes, SynthError> {
    let mut records = Vec::new();
    let mut empirical = Vec::new();
    for (k, cell) in spec.cells.iter().enumerate() {
        if !(0.0..=1.0).contains(&cell.true_rate) {
            return Err(SynthError::InvalidEpisodes(format!("cell {k}: true_rate {} outside [0, 1]", cell.true_rate)));
        }
        if cell.n_trials == 0 {
            return Err(SynthError::InvalidEpisodes(format!("cell {k}: n_trials must be positive")));
        }
        if let Some(p) = &cell.path_length {
            if !(p.shortest_min >= 0.0 && p.shortest_max >= p.shortest_min && p.detour_max >= 0.0) {
                return Err(SynthError::InvalidEpisodes(format!("cell {k}: invalid path length range")));
            }
        }
        let mut rng = stage_rng(spec.seed, &format!("testkit/episodes/{k}"));
        let mut successes = 0;
        for _ in 0..cell.n_trials {
            let success = rng.random_bool(cell.true_rate);
            successes += success as usize;
            let mut rec = EpisodeRecord::new(cell.task.clone(), cell.tier, success);
            rec.method = cell.method.clone();
            rec.domain = cell.domain;
            if let Some(p) = &cell.path_length {
                let l = if p.shortest_max > p.shortest_min {
                    rng.random_range(p.shortest_min..p.shortest_max)
                } else {
                    p.shortest_min
                };
                let detour = if p.detour_max > 0.0 { rng.random_range(0.0..p.detour_max) } else { 0.0 };
                rec = rec.with_paths(l, l * (1.0 + detour));
            }
            records.push(rec);
        }
        empirical.push(EmpiricalRate {
            task: cell.task.clone(),
            tier: cell.tier,
            method: cell.method.clone(),
            domain: cell.domain,
            successes,
            trials: cell.n_trials,
            rate: successes as f64 / cell.n_trials as f64,
        });
    }
    Ok(SynthEpisodes { records, empirical })
}
