//! Two-view relative pose from spherical bearing matches.
//!
//! Pose convention: a [`RelativePose`] maps camera-a coordinates into camera-b
//! coordinates, `X_b = R X_a + t`, so the epipolar constraint reads
//! `b_bᵀ E b_a = 0` with `E = [t]× R`. Camera b's center expressed in frame a
//! is `-Rᵀ t`.
//!
//! Estimation is the linear eight-point algorithm on unit bearings inside a
//! seeded RANSAC loop. Bearings are used directly (no image-plane
//! normalization) so full-sphere fields of view work.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Unit, SVD};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Rotation, UnitVec3, Vec3};
use crate::panorama::{BearingMatchSet, MIN_MATCHES};

/// RANSAC samples scored together between early-termination bound updates.
const RANSAC_BLOCK: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EpipolarError {
    #[error("too few matches: {found}, need at least {MIN_MATCHES}")]
    TooFewMatches { found: usize },
    #[error("no essential matrix with at least {required} inliers (best had {best})")]
    NoModel { best: usize, required: usize },
    #[error("degenerate essential matrix")]
    Degenerate,
    #[error("cheirality tie between pose candidates (positive-depth counts {counts:?} of {inliers} inliers)")]
    CheiralityTie { counts: [usize; 4], inliers: usize },
    #[error("decomposition needs at least 2 inliers, got {0}")]
    TooFewInliers(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    /// Inlier bound on `|b_bᵀ E b_a|` with `‖E‖_F = √2`.
    pub threshold: f64,
    pub iterations: usize,
    pub min_inliers: usize,
    /// Inlier ratio below which the estimate is flagged low-confidence.
    pub low_confidence_ratio: f64,
    /// Nonlinear pose polish iterations after decomposition; 0 disables.
    pub refine_iterations: usize,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            threshold: 1e-3,
            iterations: 2000,
            min_inliers: MIN_MATCHES,
            low_confidence_ratio: 0.3,
            refine_iterations: 20,
        }
    }
}

/// Essential matrix projected to singular values `(1, 1, 0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EssentialMatrix(Matrix3<f64>);

/// Singular value decomposition with singular values sorted descending.
fn sorted_svd(m: &Matrix3<f64>) -> Option<(Matrix3<f64>, Vec3, Matrix3<f64>)> {
    let svd = SVD::new(*m, true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let s = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
    let u = Matrix3::from_columns(&order.map(|i| u.column(i).into_owned()));
    let v = Matrix3::from_columns(&order.map(|i| vt.row(i).transpose()));
    Some((u, Vec3::new(s[order[0]], s[order[1]], s[order[2]]), v))
}

pub fn skew(t: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

impl EssentialMatrix {
    /// Projects an arbitrary 3x3 matrix onto the essential manifold.
    pub fn project(m: &Matrix3<f64>) -> Option<Self> {
        if !m.iter().all(|c| c.is_finite()) {
            return None;
        }
        let (u, s, v) = sorted_svd(m)?;
        if !(s[1] > 1e-12 * s[0].max(1e-300)) {
            return None;
        }
        let d = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, 0.0));
        Some(Self(u * d * v.transpose()))
    }

    /// `[t]× R` normalized to the essential manifold.
    pub fn from_pose(rotation: &Rotation, translation: &Vec3) -> Option<Self> {
        Self::project(&(skew(translation) * rotation.matrix()))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Algebraic epipolar residual `|b_bᵀ E b_a|`.
    pub fn residual(&self, a: &UnitVec3, b: &UnitVec3) -> f64 {
        b.dot(&(self.0 * a.into_inner())).abs()
    }

    pub fn singular_values(&self) -> Vec3 {
        sorted_svd(&self.0).map_or(Vec3::repeat(f64::NAN), |(_, s, _)| s)
    }

    /// The four `(R, t̂)` factorizations, t̂ = ±third left singular vector.
    pub fn candidate_poses(&self) -> Option<[RelativePose; 4]> {
        let (mut u, _, mut v) = sorted_svd(&self.0)?;
        if u.determinant() < 0.0 {
            u = -u;
        }
        if v.determinant() < 0.0 {
            v = -v;
        }
        let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let r1 = Rotation::from_matrix_unchecked(u * w * v.transpose());
        let r2 = Rotation::from_matrix_unchecked(u * w.transpose() * v.transpose());
        let t = Unit::new_normalize(u.column(2).into_owned());
        Some([
            RelativePose::new(r1, t),
            RelativePose::new(r1, -t),
            RelativePose::new(r2, t),
            RelativePose::new(r2, -t),
        ])
    }
}

/// Row of the linear system: `b_bᵀ E b_a` equals this row dotted with the
/// row-major entries of `E`.
fn kron_row((a, b): &(UnitVec3, UnitVec3)) -> [f64; 9] {
    let mut r = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            r[3 * i + j] = b[i] * a[j];
        }
    }
    r
}

/// Null vector of a full-rank 8×9 system by Gaussian elimination with
/// complete pivoting; `None` when the rank is below 8.
fn null_vector_8x9(mut a: [[f64; 9]; 8]) -> Option<[f64; 9]> {
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return None;
    }
    let mut cols: [usize; 9] = std::array::from_fn(|j| j);
    for k in 0..8 {
        let (mut pi, mut pj, mut best) = (k, k, 0.0);
        for (i, r) in a.iter().enumerate().skip(k) {
            for (j, v) in r.iter().enumerate().skip(k) {
                if v.abs() > best {
                    (pi, pj, best) = (i, j, v.abs());
                }
            }
        }
        if best <= 1e-12 * scale {
            return None;
        }
        a.swap(k, pi);
        if pj != k {
            for r in a.iter_mut() {
                r.swap(k, pj);
            }
            cols.swap(k, pj);
        }
        for i in k + 1..8 {
            let f = a[i][k] / a[k][k];
            if f != 0.0 {
                for j in k..9 {
                    a[i][j] -= f * a[k][j];
                }
            }
        }
    }
    let mut x = [0.0; 9];
    x[8] = 1.0;
    for k in (0..8).rev() {
        let s: f64 = (k + 1..9).map(|j| a[k][j] * x[j]).sum();
        x[k] = -s / a[k][k];
    }
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut out = [0.0; 9];
    for (j, &c) in cols.iter().enumerate() {
        out[c] = x[j] / norm;
    }
    Some(out)
}

/// Linear eight-point solve over any number (≥ 8) of bearing pairs.
pub fn eight_point<'a>(pairs: impl ExactSizeIterator<Item = &'a (UnitVec3, UnitVec3)>) -> Option<EssentialMatrix> {
    let n = pairs.len();
    if n < MIN_MATCHES {
        return None;
    }
    let null = if n == MIN_MATCHES {
        let mut a = [[0.0; 9]; 8];
        for (k, p) in pairs.enumerate() {
            a[k] = kron_row(p);
        }
        null_vector_8x9(a)?
    } else if n <= 9 {
        // Zero rows pad to square so the full right singular basis exists.
        let mut a = SMatrix::<f64, 9, 9>::zeros();
        for (k, p) in pairs.enumerate() {
            a.row_mut(k).copy_from_slice(&kron_row(p));
        }
        let svd = SVD::new(a, false, true);
        let vt = svd.v_t?;
        let r = vt.row(svd.singular_values.imin());
        std::array::from_fn::<f64, 9, _>(|k| r[k])
    } else {
        let mut a = DMatrix::<f64>::zeros(n, 9);
        for (k, p) in pairs.enumerate() {
            a.row_mut(k).copy_from_slice(&kron_row(p));
        }
        let svd = SVD::new(a, false, true);
        let vt = svd.v_t?;
        let r = vt.row(svd.singular_values.imin());
        std::array::from_fn::<f64, 9, _>(|k| r[k])
    };
    let m = Matrix3::from_row_slice(&null);
    EssentialMatrix::project(&m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EssentialEstimate {
    pub essential: EssentialMatrix,
    /// Indices into the match set, ascending.
    pub inliers: Vec<usize>,
    pub inlier_ratio: f64,
    /// Set when the inlier ratio falls below the configured guard.
    pub low_confidence: bool,
}

fn inliers_of(e: &EssentialMatrix, matches: &BearingMatchSet, threshold: f64) -> Vec<usize> {
    matches
        .pairs
        .iter()
        .enumerate()
        .filter(|(_, (a, b))| e.residual(a, b) <= threshold)
        .map(|(i, _)| i)
        .collect()
}

/// [`score`] over precomputed system rows, or `None` as soon as the inlier
/// count can no longer reach `bound`.
fn score_rows(flat: &[f64; 9], rows: &[[f64; 9]], threshold: f64, bound: usize) -> Option<(usize, f64)> {
    let t2 = threshold * threshold;
    let allowed_misses = rows.len().checked_sub(bound)?;
    let (mut count, mut misses, mut cost) = (0, 0, 0.0);
    for row in rows {
        let r = row.iter().zip(flat).map(|(x, y)| x * y).sum::<f64>().abs();
        if r <= threshold {
            count += 1;
            cost += r * r;
        } else {
            misses += 1;
            if misses > allowed_misses {
                return None;
            }
            cost += t2;
        }
    }
    Some((count, cost))
}

/// Inlier count and truncated squared residual cost.
fn score(e: &EssentialMatrix, matches: &BearingMatchSet, threshold: f64) -> (usize, f64) {
    let t2 = threshold * threshold;
    matches.pairs.iter().fold((0, 0.0), |(n, cost), (a, b)| {
        let r = e.residual(a, b);
        if r <= threshold {
            (n + 1, cost + r * r)
        } else {
            (n, cost + t2)
        }
    })
}

/// RANSAC over minimal eight-point samples, then one least-squares refit.
///
/// Results depend only on `(matches, cfg, seed)`: samples are drawn up front
/// from one seeded stream and scored in parallel, ties going to the earliest
/// sample.
pub fn estimate_essential(
    matches: &BearingMatchSet,
    cfg: &RansacConfig,
    seed: u64,
) -> Result<EssentialEstimate, EpipolarError> {
    let n = matches.len();
    if n < MIN_MATCHES {
        return Err(EpipolarError::TooFewMatches { found: n });
    }
    let required = cfg.min_inliers.max(MIN_MATCHES);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<Vec<usize>> = (0..cfg.iterations.max(1))
        .map(|_| sample(&mut rng, n, MIN_MATCHES).into_vec())
        .collect();

    let rows: Vec<[f64; 9]> = matches.pairs.iter().map(kron_row).collect();

    // Largest inlier set wins; equal counts go to the lower truncated cost,
    // then to the earliest sample. Samples run in blocks; within a block each
    // sample stops scoring once it cannot reach the best count of earlier
    // blocks, which leaves the winner unchanged.
    let mut best: Option<(usize, f64, [f64; 9])> = None;
    // A single worker gains nothing from handing each block to the pool.
    let parallel = rayon::current_num_threads() > 1;
    for block in samples.chunks(RANSAC_BLOCK) {
        let bound = best.as_ref().map_or(0, |(c, _, _)| *c);
        let score_sample = |idx: &Vec<usize>| {
            // Samples are scored on the raw null vector scaled to the √2
            // Frobenius norm of a projected essential matrix; only the
            // winner is projected.
            let v = null_vector_8x9(std::array::from_fn(|k| rows[idx[k]]))?;
            let v = v.map(|x| x * std::f64::consts::SQRT_2);
            let (count, cost) = score_rows(&v, &rows, cfg.threshold, bound)?;
            Some((count, cost, v))
        };
        let scored: Vec<Option<(usize, f64, [f64; 9])>> = if parallel {
            block.par_iter().map(score_sample).collect()
        } else {
            block.iter().map(score_sample).collect()
        };
        for (count, cost, v) in scored.into_iter().flatten() {
            if best.as_ref().map_or(true, |(c, k, _)| count > *c || (count == *c && cost < *k)) {
                best = Some((count, cost, v));
            }
        }
    }
    let (best_count, _, best_v) = best.ok_or(EpipolarError::NoModel { best: 0, required })?;
    if best_count < required {
        return Err(EpipolarError::NoModel {
            best: best_count,
            required,
        });
    }
    let best_e = EssentialMatrix::project(&Matrix3::from_row_slice(&best_v)).ok_or(EpipolarError::Degenerate)?;

    let mut essential = best_e;
    let mut inliers = inliers_of(&best_e, matches, cfg.threshold);
    let refit = eight_point(inliers.iter().map(|&i| &matches.pairs[i]).collect::<Vec<_>>().into_iter());
    if let Some(refit) = refit {
        let refit_inliers = inliers_of(&refit, matches, cfg.threshold);
        // A stray outlier inside the threshold can drag the algebraic refit;
        // keep it only when it also lowers the truncated residual cost.
        if refit_inliers.len() >= inliers.len()
            && score(&refit, matches, cfg.threshold).1 <= score(&best_e, matches, cfg.threshold).1
        {
            essential = refit;
            inliers = refit_inliers;
        }
    }
    if inliers.len() < required {
        return Err(EpipolarError::NoModel {
            best: inliers.len(),
            required,
        });
    }
    let inlier_ratio = inliers.len() as f64 / n as f64;
    Ok(EssentialEstimate {
        essential,
        inlier_ratio,
        low_confidence: inlier_ratio < cfg.low_confidence_ratio,
        inliers,
    })
}

/// Relative pose at unit baseline: `X_b = rotation · X_a + direction`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePose {
    pub rotation: Rotation,
    pub direction: UnitVec3,
}

impl RelativePose {
    pub fn new(rotation: Rotation, direction: UnitVec3) -> Self {
        Self { rotation, direction }
    }

    /// Camera b's center in frame a.
    pub fn center_b(&self) -> Vec3 {
        -(self.rotation.inverse() * self.direction.into_inner())
    }
}

/// Sampson-style epipolar error on the sphere: the algebraic residual divided
/// by its first-order sensitivity to tangent perturbations of both bearings.
pub fn sampson_error(e: &Matrix3<f64>, (a, b): &(UnitVec3, UnitVec3)) -> f64 {
    let ea = e * a.into_inner();
    let etb = e.transpose() * b.into_inner();
    let ga = ea - b.into_inner() * b.dot(&ea);
    let gb = etb - a.into_inner() * a.dot(&etb);
    let denom = (ga.norm_squared() + gb.norm_squared()).sqrt();
    if denom < 1e-15 {
        0.0
    } else {
        b.dot(&ea) / denom
    }
}

/// Levenberg-Marquardt polish of a relative pose over the inlier matches,
/// minimizing summed squared [`sampson_error`]. Five degrees of freedom: a
/// left rotation increment and two tangent directions of the unit baseline.
pub fn refine_pose(pose: &RelativePose, matches: &BearingMatchSet, inliers: &[usize], iterations: usize) -> RelativePose {
    if inliers.len() < 6 || iterations == 0 {
        return *pose;
    }
    let residuals = |p: &RelativePose| -> Vec<f64> {
        let e = skew(&p.direction) * p.rotation.matrix();
        inliers.iter().map(|&i| sampson_error(&e, &matches.pairs[i])).collect()
    };
    let perturb = |p: &RelativePose, d: &[f64; 5]| -> RelativePose {
        let t = p.direction.into_inner();
        let helper = if t.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let e1 = (helper - t * t.dot(&helper)).normalize();
        let e2 = t.cross(&e1);
        RelativePose::new(
            Rotation::new(Vec3::new(d[0], d[1], d[2])) * p.rotation,
            Unit::new_normalize(t + e1 * d[3] + e2 * d[4]),
        )
    };
    let cost = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>();

    let mut current = *pose;
    let mut r = residuals(&current);
    let mut c = cost(&r);
    let mut lambda = 1e-3;
    const STEP: f64 = 1e-7;
    for _ in 0..iterations {
        let mut jac = DMatrix::<f64>::zeros(r.len(), 5);
        for k in 0..5 {
            let mut d = [0.0; 5];
            d[k] = STEP;
            let plus = residuals(&perturb(&current, &d));
            d[k] = -STEP;
            let minus = residuals(&perturb(&current, &d));
            for (row, (p, m)) in plus.iter().zip(&minus).enumerate() {
                jac[(row, k)] = (p - m) / (2.0 * STEP);
            }
        }
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * DVector::from_column_slice(&r);
        let mut improved = false;
        for _ in 0..10 {
            let mut a = jtj.clone();
            for k in 0..5 {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(delta) = a.cholesky().map(|ch| ch.solve(&(-&jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let d: [f64; 5] = std::array::from_fn(|k| delta[k]);
            let candidate = perturb(&current, &d);
            let rc = residuals(&candidate);
            let cc = cost(&rc);
            if cc < c {
                let rel = (c - cc) / c.max(1e-300);
                (current, r, c) = (candidate, rc, cc);
                lambda = (lambda * 0.1).max(1e-12);
                improved = rel > 1e-12;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    current
}

/// Midpoint triangulation result in camera-a coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangulation {
    pub point: Vec3,
    pub depth_a: f64,
    pub depth_b: f64,
}

/// Closest-approach solve of the two rays without the depth sign check.
pub fn triangulate_depths(pair: &(UnitVec3, UnitVec3), pose: &RelativePose) -> Option<Triangulation> {
    let (a, b) = pair;
    let origin_b = pose.center_b();
    let dir_b = pose.rotation.inverse() * b.into_inner();
    let sin = a.cross(&dir_b).norm();
    if !(sin >= 1e-8) {
        return None;
    }
    let c = a.dot(&dir_b);
    let denom = 1.0 - c * c;
    let wa = a.dot(&origin_b);
    let wb = dir_b.dot(&origin_b);
    let depth_a = (wa - c * wb) / denom;
    let depth_b = (c * wa - wb) / denom;
    let on_a = a.into_inner() * depth_a;
    let on_b = origin_b + dir_b * depth_b;
    Some(Triangulation {
        point: (on_a + on_b) * 0.5,
        depth_a,
        depth_b,
    })
}

/// Midpoint of closest approach; `None` for near-parallel rays or a
/// non-positive depth on either ray.
pub fn triangulate(pair: &(UnitVec3, UnitVec3), pose: &RelativePose) -> Option<Vec3> {
    triangulate_depths(pair, pose)
        .filter(|t| t.depth_a > 0.0 && t.depth_b > 0.0)
        .map(|t| t.point)
}

/// Picks the candidate factorization with the most positive-depth inliers.
pub fn decompose_essential(
    essential: &EssentialMatrix,
    matches: &BearingMatchSet,
    inliers: &[usize],
) -> Result<RelativePose, EpipolarError> {
    if inliers.len() < 2 {
        return Err(EpipolarError::TooFewInliers(inliers.len()));
    }
    let candidates = essential.candidate_poses().ok_or(EpipolarError::Degenerate)?;
    let counts = candidates.map(|pose| {
        inliers
            .iter()
            .filter(|&&i| triangulate(&matches.pairs[i], &pose).is_some())
            .count()
    });
    let mut ranked = [0usize, 1, 2, 3];
    ranked.sort_by(|&i, &j| counts[j].cmp(&counts[i]));
    let (best, runner_up) = (counts[ranked[0]], counts[ranked[1]]);
    if best == runner_up || 2 * best <= inliers.len() {
        return Err(EpipolarError::CheiralityTie {
            counts,
            inliers: inliers.len(),
        });
    }
    Ok(candidates[ranked[0]])
}

/// Triangulated inlier points at unit baseline (camera-a frame).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriangulatedSet {
    pub points: Vec<Vec3>,
    /// Index into the match set for each point.
    pub inlier_indices: Vec<usize>,
}

impl TriangulatedSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn triangulate_inliers(matches: &BearingMatchSet, inliers: &[usize], pose: &RelativePose) -> TriangulatedSet {
    let mut out = TriangulatedSet::default();
    for &i in inliers {
        if let Some(p) = triangulate(&matches.pairs[i], pose) {
            out.points.push(p);
            out.inlier_indices.push(i);
        }
    }
    out
}
