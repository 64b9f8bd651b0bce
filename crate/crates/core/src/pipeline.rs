//! Coarse pairwise alignment: essential matrix, pose, then metric scale.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::epipolar::{
    decompose_essential, estimate_essential, refine_pose, triangulate_inliers, EpipolarError, RansacConfig, RelativePose,
};
use crate::geometry::{RigidTransform, UnitVec3};
use crate::panorama::BearingMatchSet;
use crate::scale::{apply_scale, recover_scale, select_ground_points, GroundConfig, ScaleError};
use crate::seed::fork_seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoarseError {
    #[error(transparent)]
    Epipolar(#[from] EpipolarError),
    #[error(transparent)]
    Scale(#[from] ScaleError),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CoarseConfig {
    pub ransac: RansacConfig,
    pub ground: GroundConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseAlignment {
    /// Metric transform from frame a to frame b.
    pub transform: RigidTransform,
    pub pose: RelativePose,
    pub scale: f64,
    pub inliers: Vec<usize>,
    pub inlier_ratio: f64,
    pub low_confidence: bool,
    pub triangulated: usize,
    pub ground_points: usize,
}

/// Runs the whole coarse stage. The ground plane RANSAC seed is forked from
/// `seed`, replacing `cfg.ground.seed`.
pub fn coarse_align(
    matches: &BearingMatchSet,
    gravity: &UnitVec3,
    cfg: &CoarseConfig,
    seed: u64,
) -> Result<CoarseAlignment, CoarseError> {
    let estimate = estimate_essential(matches, &cfg.ransac, fork_seed(seed, "essential"))?;
    let pose = decompose_essential(&estimate.essential, matches, &estimate.inliers)?;
    let pose = refine_pose(&pose, matches, &estimate.inliers, cfg.ransac.refine_iterations);
    let points = triangulate_inliers(matches, &estimate.inliers, &pose);
    let ground_cfg = GroundConfig {
        seed: fork_seed(seed, "ground"),
        ..cfg.ground
    };
    let ground = select_ground_points(&points, gravity, &ground_cfg)?;
    let scale = recover_scale(&ground)?;
    Ok(CoarseAlignment {
        transform: apply_scale(&pose, scale)?,
        pose,
        scale,
        inlier_ratio: estimate.inlier_ratio,
        low_confidence: estimate.low_confidence,
        inliers: estimate.inliers,
        triangulated: points.len(),
        ground_points: ground.indices.len(),
    })
}
