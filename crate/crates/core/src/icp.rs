//! Point-to-plane ICP refinement of a coarse rigid transform.
//!
//! Minimizes `E = Σ ((T p_a − p_b)ᵀ n_b)²` over nearest-neighbour
//! correspondences. Each iteration linearizes a left increment
//! `Exp(δ) ∘ T`, `δ = (ω, v)`, which gives the per-pair Jacobian
//! `[q × n, n]` with `q = T p_a`, and solves the 6×6 normal equations.

use nalgebra::Matrix6;
pub use nalgebra::Vector6;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Aabb, GeometryError, PointCloud, RigidTransform, Rotation, UnitVec3, Vec3};
use crate::kdtree::KdTree;
use crate::scale::median;

pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IcpError {
    #[error("no correspondences survived rejection")]
    NoCorrespondences,
    #[error("normal equations are singular (condition number {0:.3e})")]
    Singular(f64),
    #[error("target cloud has no normals")]
    MissingNormals,
    #[error("cloud has {found} points, normal estimation needs at least k = {k}")]
    TooFewPoints { found: usize, k: usize },
    #[error("clouds have no overlapping region")]
    NoOverlap,
    #[error("invalid ICP configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcpConfig {
    pub max_iterations: usize,
    pub rel_tol: f64,
    /// Correspondence distance gate in meters; `None` derives it once as
    /// `corr_dist_factor` × the median nearest-neighbour distance at `T_init`.
    pub max_corr_dist: Option<f64>,
    pub corr_dist_factor: f64,
    /// Largest angle between source and target normals, used only when the
    /// source cloud carries normals.
    pub normal_angle_max_deg: f64,
    pub normal_k: usize,
    /// Expansion of the bounding-box intersection used as overlap region.
    pub overlap_margin: f64,
    /// Voxel size for downsampling the overlap crop; 0 disables it.
    pub voxel_size: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            rel_tol: 1e-6,
            max_corr_dist: None,
            corr_dist_factor: 3.0,
            normal_angle_max_deg: 45.0,
            normal_k: 20,
            overlap_margin: 0.5,
            voxel_size: 0.02,
        }
    }
}

impl IcpConfig {
    pub fn validate(&self) -> Result<(), IcpError> {
        let bad = |m: &str| Err(IcpError::InvalidConfig(m.to_string()));
        if self.max_iterations == 0 {
            return bad("max_iterations must be positive");
        }
        if !(self.rel_tol > 0.0 && self.rel_tol < 1.0) {
            return bad("rel_tol must lie in (0, 1)");
        }
        if let Some(d) = self.max_corr_dist {
            if !(d > 0.0) {
                return bad("max_corr_dist must be positive");
            }
        }
        if !(self.corr_dist_factor > 0.0) {
            return bad("corr_dist_factor must be positive");
        }
        if !(self.normal_angle_max_deg > 0.0) {
            return bad("normal_angle_max_deg must be positive");
        }
        if self.normal_k < 3 {
            return bad("normal_k must be at least 3");
        }
        if !(self.overlap_margin >= 0.0 && self.voxel_size >= 0.0) {
            return bad("overlap_margin and voxel_size must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcpIteration {
    pub iteration: usize,
    /// Error at the start of the iteration with its fresh correspondences.
    pub error_before: f64,
    /// Error after the update, same correspondences.
    pub error_after: f64,
    pub correspondences: usize,
    /// Number of step halvings applied to keep the error from rising.
    pub halvings: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcpResult {
    pub transform: RigidTransform,
    /// Objective at `transform` with fresh correspondences (m²).
    pub final_error: f64,
    pub iterations: usize,
    pub correspondence_count: usize,
    pub converged: bool,
    pub max_corr_dist: f64,
    pub trace: Vec<IcpIteration>,
}

/// Correspondence acceptance rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gate {
    pub max_dist: f64,
    /// Cosine of the largest normal angle; ignored without source normals.
    pub min_normal_cos: f64,
}

impl Default for Gate {
    fn default() -> Self {
        Self {
            max_dist: f64::INFINITY,
            min_normal_cos: -1.0,
        }
    }
}

/// Target cloud with its search index.
#[derive(Debug, Clone)]
pub struct IcpTarget<'a> {
    cloud: &'a PointCloud,
    normals: &'a [UnitVec3],
    tree: KdTree,
}

impl<'a> IcpTarget<'a> {
    pub fn new(cloud: &'a PointCloud) -> Result<Self, IcpError> {
        let normals = cloud.normals.as_deref().ok_or(IcpError::MissingNormals)?;
        let tree = KdTree::build(&cloud.points)?;
        Ok(Self { cloud, normals, tree })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub source: usize,
    pub target: usize,
}

pub fn find_correspondences(source: &PointCloud, target: &IcpTarget, t: &RigidTransform, gate: &Gate) -> Vec<Correspondence> {
    let found: Vec<Option<Correspondence>> = (0..source.len())
        .into_par_iter()
        .map(|i| {
            let q = t.transform_point(&source.points[i]);
            let hit = target.tree.nearest(&q);
            if !(hit.distance <= gate.max_dist) {
                return None;
            }
            if let Some(na) = &source.normals {
                let cos = t.transform_vector(&na[i]).dot(&target.normals[hit.index]).abs();
                if cos < gate.min_normal_cos {
                    return None;
                }
            }
            Some(Correspondence {
                source: i,
                target: hit.index,
            })
        })
        .collect();
    found.into_iter().flatten().collect()
}

fn residual(source: &PointCloud, target: &IcpTarget, t: &RigidTransform, c: &Correspondence) -> f64 {
    let q = t.transform_point(&source.points[c.source]);
    (q - target.cloud.points[c.target]).dot(&target.normals[c.target])
}

/// Objective for a fixed correspondence set.
pub fn error_with(source: &PointCloud, target: &IcpTarget, t: &RigidTransform, corr: &[Correspondence]) -> f64 {
    let r: Vec<f64> = corr.par_iter().map(|c| residual(source, target, t, c).powi(2)).collect();
    r.iter().sum()
}

/// Normal equations `A δ = −g` of the linearized objective around `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub hessian: Matrix6<f64>,
    /// `Σ Jᵀ r`, half the gradient of the objective with respect to δ.
    pub gradient: Vector6<f64>,
    pub error: f64,
}

pub fn linearize(source: &PointCloud, target: &IcpTarget, t: &RigidTransform, corr: &[Correspondence]) -> Linearization {
    let terms: Vec<(Vector6<f64>, f64)> = corr
        .par_iter()
        .map(|c| {
            let q = t.transform_point(&source.points[c.source]);
            let n = target.normals[c.target].into_inner();
            let qn = q.cross(&n);
            let j = Vector6::new(qn.x, qn.y, qn.z, n.x, n.y, n.z);
            (j, (q - target.cloud.points[c.target]).dot(&n))
        })
        .collect();
    let mut hessian = Matrix6::zeros();
    let mut gradient = Vector6::zeros();
    let mut error = 0.0;
    for (j, r) in &terms {
        hessian += j * j.transpose();
        gradient += j * *r;
        error += r * r;
    }
    Linearization { hessian, gradient, error }
}

/// Left increment `Exp(δ) ∘ t` with `δ = (ω, v)`.
pub fn apply_increment(delta: &Vector6<f64>, t: &RigidTransform) -> RigidTransform {
    let omega = Vec3::new(delta[0], delta[1], delta[2]);
    let v = Vec3::new(delta[3], delta[4], delta[5]);
    RigidTransform::new(Rotation::new(omega), v).compose(t)
}

pub fn solve_step(lin: &Linearization) -> Result<Vector6<f64>, IcpError> {
    let eig = lin.hessian.symmetric_eigen();
    let (lo, hi) = (eig.eigenvalues.min(), eig.eigenvalues.max());
    let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(cond <= MAX_CONDITION) {
        return Err(IcpError::Singular(cond));
    }
    let chol = lin.hessian.cholesky().ok_or(IcpError::Singular(cond))?;
    Ok(-chol.solve(&lin.gradient))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorEvaluation {
    pub error: f64,
    pub correspondences: usize,
    /// Set when no pair survived the gate; `error` is then 0.
    pub empty: bool,
}

/// Evaluates the objective at `t` with ungated nearest neighbours.
pub fn eval_icp_error(source: &PointCloud, target: &PointCloud, t: &RigidTransform) -> Result<ErrorEvaluation, IcpError> {
    eval_icp_error_gated(source, &IcpTarget::new(target)?, t, &Gate::default())
}

pub fn eval_icp_error_gated(
    source: &PointCloud,
    target: &IcpTarget,
    t: &RigidTransform,
    gate: &Gate,
) -> Result<ErrorEvaluation, IcpError> {
    let corr = find_correspondences(source, target, t, gate);
    Ok(ErrorEvaluation {
        error: error_with(source, target, t, &corr),
        correspondences: corr.len(),
        empty: corr.is_empty(),
    })
}

/// Distance gate derived from the initial alignment.
pub fn default_corr_dist(source: &PointCloud, target: &IcpTarget, t: &RigidTransform, factor: f64) -> f64 {
    let d: Vec<f64> = source
        .points
        .par_iter()
        .map(|p| target.tree.nearest(&t.transform_point(p)).distance)
        .collect();
    factor * median(&d).unwrap_or(0.0)
}

const MAX_HALVINGS: u32 = 20;

pub fn point_to_plane_icp(
    source: &PointCloud,
    target: &PointCloud,
    init: &RigidTransform,
    cfg: &IcpConfig,
) -> Result<IcpResult, IcpError> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(GeometryError::EmptyCloud.into());
    }
    let target = IcpTarget::new(target)?;
    let max_corr_dist = cfg
        .max_corr_dist
        .unwrap_or_else(|| default_corr_dist(source, &target, init, cfg.corr_dist_factor));
    let gate = Gate {
        max_dist: max_corr_dist,
        min_normal_cos: cfg.normal_angle_max_deg.to_radians().cos(),
    };

    let mut t = *init;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut prev_error: Option<f64> = None;
    for iteration in 1..=cfg.max_iterations {
        let corr = find_correspondences(source, &target, &t, &gate);
        if corr.is_empty() {
            return Err(IcpError::NoCorrespondences);
        }
        let lin = linearize(source, &target, &t, &corr);
        let error_before = lin.error;
        let mut step = solve_step(&lin)?;
        let mut halvings = 0;
        let mut next = apply_increment(&step, &t);
        let mut error_after = error_with(source, &target, &next, &corr);
        while error_after > error_before && halvings < MAX_HALVINGS {
            step *= 0.5;
            halvings += 1;
            next = apply_increment(&step, &t);
            error_after = error_with(source, &target, &next, &corr);
        }
        if error_after > error_before {
            // No descent along the Gauss-Newton direction: stationary.
            next = t;
            error_after = error_before;
        }
        t = next;
        trace.push(IcpIteration {
            iteration,
            error_before,
            error_after,
            correspondences: corr.len(),
            halvings,
        });
        let reference = prev_error.unwrap_or(error_before);
        if (reference - error_after).abs() / reference.max(1e-12) < cfg.rel_tol {
            converged = true;
            break;
        }
        prev_error = Some(error_after);
    }

    let final_eval = eval_icp_error_gated(source, &target, &t, &gate)?;
    Ok(IcpResult {
        transform: t,
        final_error: final_eval.error,
        iterations: trace.len(),
        correspondence_count: final_eval.correspondences,
        converged,
        max_corr_dist,
        trace,
    })
}

/// Per-point normals from the covariance of the `k` nearest neighbours,
/// oriented toward `viewpoint`.
pub fn estimate_normals(cloud: &PointCloud, k: usize, viewpoint: &Vec3) -> Result<PointCloud, IcpError> {
    if k < 3 || cloud.len() < k {
        return Err(IcpError::TooFewPoints { found: cloud.len(), k });
    }
    let tree = KdTree::build(&cloud.points)?;
    let normals: Vec<UnitVec3> = cloud
        .points
        .par_iter()
        .map(|p| {
            let nbrs = tree.knn(p, k);
            let centroid = nbrs.iter().map(|n| cloud.points[n.index]).sum::<Vec3>() / k as f64;
            let mut cov = nalgebra::Matrix3::zeros();
            for n in &nbrs {
                let d = cloud.points[n.index] - centroid;
                cov += d * d.transpose();
            }
            let eig = cov.symmetric_eigen();
            let mut n = eig.eigenvectors.column(eig.eigenvalues.imin()).normalize();
            if n.dot(&(viewpoint - p)) < 0.0 {
                n = -n;
            }
            UnitVec3::new_unchecked(n)
        })
        .collect();
    Ok(PointCloud::with_normals(cloud.points.clone(), normals)?)
}

/// Crops both clouds to the expanded intersection of their bounding boxes
/// (taken in the target frame with `init` applied to the source), then
/// voxel-downsamples each crop.
pub fn overlap_crop(
    source: &PointCloud,
    target: &PointCloud,
    init: &RigidTransform,
    margin: f64,
    voxel: f64,
) -> Result<(PointCloud, PointCloud), IcpError> {
    let moved = source.transformed(init);
    let (Some(ba), Some(bb)) = (moved.bounding_box(), target.bounding_box()) else {
        return Err(GeometryError::EmptyCloud.into());
    };
    let region: Aabb = ba
        .expanded(margin)
        .intersection(&bb.expanded(margin))
        .ok_or(IcpError::NoOverlap)?;
    let crop = |cloud: &PointCloud, indices: Vec<usize>| -> PointCloud {
        let sub = cloud.select(&indices);
        if voxel > 0.0 {
            let keep = sub.voxel_downsample_indices(voxel);
            sub.select(&keep)
        } else {
            sub
        }
    };
    let a = crop(source, moved.indices_within(&region));
    let b = crop(target, target.indices_within(&region));
    if a.is_empty() || b.is_empty() {
        return Err(IcpError::NoOverlap);
    }
    Ok((a, b))
}

/// Overlap crop, target normals if missing (viewpoint at the target origin),
/// then point-to-plane ICP from `init`.
pub fn register_clouds(
    source: &PointCloud,
    target: &PointCloud,
    init: &RigidTransform,
    cfg: &IcpConfig,
) -> Result<IcpResult, IcpError> {
    cfg.validate()?;
    let (a, b) = overlap_crop(source, target, init, cfg.overlap_margin, cfg.voxel_size)?;
    let b = if b.has_normals() { b } else { estimate_normals(&b, cfg.normal_k, &Vec3::zeros())? };
    point_to_plane_icp(&a, &b, init, cfg)
}
