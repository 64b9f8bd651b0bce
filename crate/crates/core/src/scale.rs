//! Metric scale from triangulated floor points and a known camera height.
//!
//! Two-view geometry fixes the baseline only up to scale. Triangulated points
//! on the floor sit, in unit-baseline coordinates, at some median height
//! `median(nᵀp)` below camera a; the camera's known metric height `h` then
//! gives `α = h / median(nᵀp)` and the metric baseline `α t̂`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::epipolar::{RelativePose, TriangulatedSet};
use crate::geometry::{Plane, RigidTransform, UnitVec3, Vec3};

pub const DEFAULT_CAMERA_HEIGHT: f64 = 1.5;
pub const MIN_GROUND_POINTS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScaleError {
    #[error("need at least {required} triangulated points, got {found}")]
    TooFewPoints { found: usize, required: usize },
    #[error("no gravity-aligned plane below the camera with at least {required} inliers (best had {best})")]
    NoGroundPlane { best: usize, required: usize },
    #[error("camera height must be positive, got {0}")]
    NonPositiveHeight(f64),
    #[error("median ground projection {0} is not above 1e-6; camera at or below the floor")]
    DegenerateMedian(f64),
    #[error("scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("empty ground point set")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroundConfig {
    /// Metric height of camera a's optical center above the floor.
    pub camera_height: f64,
    /// Largest allowed angle between the plane normal and gravity.
    pub max_tilt_deg: f64,
    /// Inlier distance in unit-baseline units.
    pub plane_tol: f64,
    pub iterations: usize,
    pub min_points: usize,
    pub seed: u64,
}

impl Default for GroundConfig {
    fn default() -> Self {
        Self {
            camera_height: DEFAULT_CAMERA_HEIGHT,
            max_tilt_deg: 10.0,
            plane_tol: 0.02,
            iterations: 500,
            min_points: MIN_GROUND_POINTS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundModel {
    /// Floor plane with the normal pointing from the camera toward the floor.
    pub plane: Plane,
    pub camera_height: f64,
    /// Floor points in the unit-baseline frame of camera a.
    pub ground_points: Vec<Vec3>,
    /// Index of each ground point in the source point list.
    pub indices: Vec<usize>,
}

impl GroundModel {
    /// Heights `nᵀp` of the ground points below the camera.
    pub fn projections(&self) -> Vec<f64> {
        self.ground_points.iter().map(|p| self.plane.normal.dot(p)).collect()
    }
}

/// Median with the even-count convention of averaging the two central values.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Orients a plane normal along gravity and reports whether the origin
/// (camera a) lies above it.
fn gravity_oriented(plane: Plane, gravity: &UnitVec3, cos_tilt: f64) -> Option<Plane> {
    let plane = if plane.normal.dot(gravity) < 0.0 { plane.flipped() } else { plane };
    // With n along gravity the camera is above the plane when -offset > 0.
    (plane.normal.dot(gravity) >= cos_tilt && -plane.offset > 1e-6).then_some(plane)
}

/// Inlier count and truncated squared residual cost.
fn msac_score(plane: &Plane, points: &[Vec3], tol: f64) -> (usize, f64) {
    let tol2 = tol * tol;
    points.iter().fold((0, 0.0), |(n, cost), p| {
        let d2 = plane.signed_distance(p).powi(2);
        if d2 <= tol2 {
            (n + 1, cost + d2)
        } else {
            (n, cost + tol2)
        }
    })
}

/// Least-squares refit that repeatedly drops points beyond three robust
/// standard deviations (from the MAD) of the current fit. Points just inside
/// the tolerance band, such as the foot of a wall, would otherwise tilt the
/// floor normal.
fn trimmed_refit(
    mut plane: Plane,
    points: &[Vec3],
    mut indices: Vec<usize>,
    gravity: &UnitVec3,
    cos_tilt: f64,
    required: usize,
) -> (Plane, Vec<usize>) {
    for _ in 0..10 {
        let subset: Vec<Vec3> = indices.iter().map(|&i| points[i]).collect();
        let Some(fit) = Plane::fit(&subset).and_then(|p| gravity_oriented(p, gravity, cos_tilt)) else {
            break;
        };
        let residuals: Vec<f64> = subset.iter().map(|p| fit.signed_distance(p).abs()).collect();
        let sigma = 1.4826 * median(&residuals).unwrap_or(0.0);
        let gate = (3.0 * sigma).max(1e-9);
        let kept: Vec<usize> = indices
            .iter()
            .zip(&residuals)
            .filter(|(_, r)| **r <= gate)
            .map(|(i, _)| *i)
            .collect();
        if kept.len() < required {
            break;
        }
        plane = fit;
        if kept.len() == indices.len() {
            break;
        }
        indices = kept;
    }
    (plane, indices)
}

/// Gravity-constrained RANSAC floor fit over triangulated points.
pub fn select_ground_points(
    points: &TriangulatedSet,
    gravity: &UnitVec3,
    cfg: &GroundConfig,
) -> Result<GroundModel, ScaleError> {
    select_ground_from(&points.points, gravity, cfg)
}

pub fn select_ground_from(points: &[Vec3], gravity: &UnitVec3, cfg: &GroundConfig) -> Result<GroundModel, ScaleError> {
    let required = cfg.min_points.max(MIN_GROUND_POINTS);
    if !(cfg.camera_height > 0.0) {
        return Err(ScaleError::NonPositiveHeight(cfg.camera_height));
    }
    if points.len() < required {
        return Err(ScaleError::TooFewPoints {
            found: points.len(),
            required,
        });
    }
    let cos_tilt = cfg.max_tilt_deg.to_radians().cos();
    let inliers_of = |plane: &Plane| -> Vec<usize> {
        (0..points.len())
            .filter(|&i| plane.signed_distance(&points[i]).abs() <= cfg.plane_tol)
            .collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, f64, Plane)> = None;
    let mut best_count = 0;
    for _ in 0..cfg.iterations.max(1) {
        let idx = sample(&mut rng, points.len(), 3);
        let Some(plane) = Plane::from_points(&points[idx.index(0)], &points[idx.index(1)], &points[idx.index(2)]) else {
            continue;
        };
        let Some(plane) = gravity_oriented(plane, gravity, cos_tilt) else {
            continue;
        };
        let (count, cost) = msac_score(&plane, points, cfg.plane_tol);
        if count >= required && best.as_ref().map_or(true, |(_, c, _)| cost < *c) {
            best = Some((count, cost, plane));
        }
        best_count = best_count.max(count);
    }
    let (_, _, plane) = best.ok_or(ScaleError::NoGroundPlane { best: best_count, required })?;
    let (plane, indices) = trimmed_refit(plane, points, inliers_of(&plane), gravity, cos_tilt, required);
    Ok(GroundModel {
        plane,
        camera_height: cfg.camera_height,
        ground_points: indices.iter().map(|&i| points[i]).collect(),
        indices,
    })
}

/// `α = h / median(nᵀp)` over the ground points.
pub fn recover_scale(ground: &GroundModel) -> Result<f64, ScaleError> {
    if !(ground.camera_height > 0.0) {
        return Err(ScaleError::NonPositiveHeight(ground.camera_height));
    }
    let m = median(&ground.projections()).ok_or(ScaleError::Empty)?;
    if !(m > 1e-6) {
        return Err(ScaleError::DegenerateMedian(m));
    }
    Ok(ground.camera_height / m)
}

/// Metric coarse pose `[R | α t̂]`.
pub fn apply_scale(pose: &RelativePose, alpha: f64) -> Result<RigidTransform, ScaleError> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(ScaleError::NonPositiveScale(alpha));
    }
    Ok(RigidTransform::new(pose.rotation, pose.direction.into_inner() * alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rotation;
    use nalgebra::Unit;
    use proptest::prelude::*;
    use rand::Rng;

    fn down() -> UnitVec3 {
        -Vec3::z_axis()
    }

    fn floor_model(heights: &[f64], h: f64) -> GroundModel {
        let plane = Plane::from_point_normal(&Vec3::new(0.0, 0.0, -1.0), down());
        GroundModel {
            plane,
            camera_height: h,
            ground_points: heights.iter().enumerate().map(|(i, z)| Vec3::new(i as f64, 0.0, -z)).collect(),
            indices: (0..heights.len()).collect(),
        }
    }

    #[test]
    fn identity_scale() {
        assert_eq!(recover_scale(&floor_model(&[1.5; 12], 1.5)).unwrap(), 1.0);
    }

    #[test]
    fn direct_substitution() {
        let alpha = recover_scale(&floor_model(&[0.70, 0.75, 0.80], 1.5)).unwrap();
        assert!((alpha - 2.0).abs() < 1e-12);
    }

    #[test]
    fn even_count_median_averages() {
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn median_matches_sorting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hs: Vec<f64> = (0..1001).map(|_| rng.random_range(0.1..3.0)).collect();
        let mut sorted = hs.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let alpha = recover_scale(&floor_model(&hs, 1.5)).unwrap();
        assert_eq!(alpha, 1.5 / sorted[500]);
    }

    #[test]
    fn camera_below_floor_is_an_error() {
        assert!(matches!(
            recover_scale(&floor_model(&[-0.5; 11], 1.5)),
            Err(ScaleError::DegenerateMedian(_))
        ));
    }

    #[test]
    fn apply_scale_examples() {
        let pose = RelativePose::new(Rotation::identity(), Vec3::y_axis());
        assert_eq!(apply_scale(&pose, 1.0).unwrap().translation, Vec3::y());
        assert_eq!(apply_scale(&pose, 2.5).unwrap().translation, Vec3::new(0.0, 2.5, 0.0));
        assert!(apply_scale(&pose, 0.0).is_err());
        assert!(apply_scale(&pose, -1.0).is_err());
    }

    fn labelled_points(seed: u64) -> (Vec<Vec3>, usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        for _ in 0..100 {
            pts.push(Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), -0.6));
        }
        for _ in 0..100 {
            pts.push(Vec3::new(1.8, rng.random_range(-2.0..2.0), rng.random_range(-0.6..0.8)));
        }
        (pts, 100)
    }

    #[test]
    fn floor_separated_from_wall() {
        let (pts, n_floor) = labelled_points(4);
        let g = select_ground_from(&pts, &down(), &GroundConfig::default()).unwrap();
        let floor = g.indices.iter().filter(|&&i| i < n_floor).count();
        let wall = g.indices.len() - floor;
        assert!(floor >= 95, "{floor} floor points");
        assert!(wall <= 2, "{wall} wall points");
    }

    #[test]
    fn wall_foot_points_do_not_tilt_the_floor() {
        // Exact floor plus wall points sampled just above the floor, inside
        // the plane tolerance band.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut pts: Vec<Vec3> = (0..120)
            .map(|_| Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), -0.4))
            .collect();
        pts.extend((0..8).map(|_| Vec3::new(2.0, rng.random_range(-2.0..2.0), -0.4 + rng.random_range(0.0..0.015))));
        let g = select_ground_from(&pts, &down(), &GroundConfig::default()).unwrap();
        assert!((g.plane.normal.into_inner() - down().into_inner()).norm() < 1e-9);
        assert!((recover_scale(&g).unwrap() - 1.5 / 0.4).abs() < 1e-9);
    }

    #[test]
    fn single_horizontal_plane_is_fully_selected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<Vec3> = (0..50)
            .map(|_| Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), -0.4))
            .collect();
        let g = select_ground_from(&pts, &down(), &GroundConfig::default()).unwrap();
        assert_eq!(g.indices.len(), 50);
        assert!((g.plane.normal.into_inner() - down().into_inner()).norm() < 1e-6);
        assert!((recover_scale(&g).unwrap() - 1.5 / 0.4).abs() < 1e-9);
    }

    #[test]
    fn walls_only_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec3> = (0..60)
            .map(|i| {
                let x = if i % 2 == 0 { 1.5 } else { -1.5 };
                Vec3::new(x, rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0))
            })
            .collect();
        assert!(matches!(
            select_ground_from(&pts, &down(), &GroundConfig::default()),
            Err(ScaleError::NoGroundPlane { .. })
        ));
    }

    #[test]
    fn overhead_plane_is_not_ground() {
        // A horizontal surface above the camera must not be taken as floor.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pts: Vec<Vec3> = (0..80)
            .map(|_| Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), 0.5))
            .collect();
        pts.extend((0..30).map(|_| Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), -0.6)));
        let g = select_ground_from(&pts, &down(), &GroundConfig::default()).unwrap();
        assert!(g.indices.iter().all(|&i| i >= 80));
    }

    #[test]
    fn tilted_gravity_frame() {
        let r = Rotation::from_euler_angles(0.05, 0.03, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pts: Vec<Vec3> = (0..40)
            .map(|_| r * Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), -0.5))
            .collect();
        let gravity = Unit::new_normalize(r * -Vec3::z());
        let g = select_ground_from(&pts, &gravity, &GroundConfig::default()).unwrap();
        assert_eq!(g.indices.len(), 40);
        assert!((recover_scale(&g).unwrap() - 3.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn scale_equivariance(k in 0.05f64..20.0, seed in 0u64..1000) {
            let (pts, _) = labelled_points(seed);
            let cfg = GroundConfig::default();
            let g = select_ground_from(&pts, &down(), &cfg).unwrap();
            let alpha = recover_scale(&g).unwrap();
            let scaled = GroundModel {
                ground_points: g.ground_points.iter().map(|p| p * k).collect(),
                plane: Plane { normal: g.plane.normal, offset: g.plane.offset * k },
                ..g.clone()
            };
            let alpha_k = recover_scale(&scaled).unwrap();
            prop_assert!((alpha_k * k - alpha).abs() <= 1e-9 * alpha);
        }

        #[test]
        fn permutation_invariance(mut hs in proptest::collection::vec(0.1f64..3.0, 1..60), rot in 0usize..60) {
            let a = recover_scale(&floor_model(&hs, 1.5)).unwrap();
            let r = rot % hs.len();
            hs.rotate_left(r);
            hs.reverse();
            prop_assert_eq!(a, recover_scale(&floor_model(&hs, 1.5)).unwrap());
        }

        #[test]
        fn median_is_robust_to_minority_corruption(
            hs in proptest::collection::vec(0.5f64..1.0, 11..40),
            junk in proptest::collection::vec(-50.0f64..50.0, 0..40),
        ) {
            let keep = hs.len();
            let bad = junk.len().min((keep - 1) / 2);
            let mut all = hs.clone();
            for (slot, v) in all.iter_mut().zip(&junk[..bad]) {
                *slot = *v;
            }
            let clean = &hs[bad..];
            let lo = clean.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = clean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let alpha = recover_scale(&floor_model(&all, 1.5)).unwrap();
            prop_assert!(alpha >= 1.5 / hi - 1e-12 && alpha <= 1.5 / lo + 1e-12);
        }
    }
}
