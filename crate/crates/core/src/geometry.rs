//! Spatial primitives shared by every stage of the pipeline.
//!
//! Points and directions are plain `nalgebra` vectors. Rotations are kept as
//! matrices; unit quaternions only appear at the serialization boundary.

use std::collections::HashMap;
use std::ops::Mul;

use nalgebra::{Matrix3, Quaternion, Rotation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type UnitVec3 = Unit<Vector3<f64>>;
pub type Rotation = Rotation3<f64>;

/// Orthonormality and determinant tolerance for rotation matrices.
pub const ROTATION_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("normals length {normals} does not match points length {points}")]
    NormalsLengthMismatch { points: usize, normals: usize },
    #[error("matrix is not a rotation (orthonormality error {ortho:e}, det {det})")]
    NotARotation { ortho: f64, det: f64 },
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("zero-length direction")]
    ZeroDirection,
    #[error("bounding box min exceeds max")]
    InvertedBox,
    #[error("invalid quaternion")]
    InvalidQuaternion,
}

/// Validates a 3x3 matrix as a proper rotation.
pub fn rotation_from_matrix(m: Matrix3<f64>) -> Result<Rotation, GeometryError> {
    let ortho = (m.transpose() * m - Matrix3::identity()).abs().max();
    let det = m.determinant();
    if !ortho.is_finite() || ortho > ROTATION_TOLERANCE || (det - 1.0).abs() > ROTATION_TOLERANCE {
        return Err(GeometryError::NotARotation { ortho, det });
    }
    Ok(Rotation::from_matrix_unchecked(m))
}

/// Rotation about +z by `angle` radians.
pub fn rot_z(angle: f64) -> Rotation {
    Rotation::from_axis_angle(&Vec3::z_axis(), angle)
}

/// Angle in radians of the rotation taking `a` to `b`.
pub fn rotation_angle_between(a: &Rotation, b: &Rotation) -> f64 {
    let m = a.matrix().transpose() * b.matrix();
    let axis = Vec3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
    (0.5 * axis.norm()).atan2(0.5 * (m.trace() - 1.0))
}

/// Angle in radians between two directions.
pub fn angle_between(a: &Vec3, b: &Vec3) -> f64 {
    // atan2 form keeps precision for nearly parallel vectors.
    a.cross(b).norm().atan2(a.dot(b))
}

/// Normalizes `v`, failing on zero or non-finite input.
pub fn unit(v: Vec3) -> Result<UnitVec3, GeometryError> {
    if !v.iter().all(|c| c.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    Unit::try_new(v, 1e-300).ok_or(GeometryError::ZeroDirection)
}

/// A rigid motion `p -> R p + t`, translation in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Rotation, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(Rotation::identity(), Vec3::zeros())
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self::new(Rotation::identity(), translation)
    }

    pub fn from_rotation(rotation: Rotation) -> Self {
        Self::new(rotation, Vec3::zeros())
    }

    /// Returns `self ∘ other`, i.e. the transform applying `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.inverse();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// Rotation angle (radians) and translation distance (meters) between two poses.
    pub fn error_to(&self, other: &RigidTransform) -> (f64, f64) {
        (
            rotation_angle_between(&self.rotation, &other.rotation),
            (self.translation - other.translation).norm(),
        )
    }

    /// Unit quaternion as `[w, x, y, z]` with `w >= 0`.
    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_rotation_matrix(&self.rotation);
        let q = if q.w < 0.0 { -q.into_inner() } else { q.into_inner() };
        [q.w, q.i, q.j, q.k]
    }

    pub fn from_quaternion_wxyz(wxyz: [f64; 4], translation: Vec3) -> Result<Self, GeometryError> {
        let q = Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
        let n = q.norm();
        if !n.is_finite() || (n - 1.0).abs() > 1e-6 {
            return Err(GeometryError::InvalidQuaternion);
        }
        if !translation.iter().all(|c| c.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let rotation = UnitQuaternion::from_quaternion(q).to_rotation_matrix();
        Ok(Self::new(rotation, translation))
    }
}

impl Mul for RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

#[derive(Serialize, Deserialize)]
struct TransformRepr {
    quaternion_wxyz: [f64; 4],
    translation_xyz: [f64; 3],
}

impl Serialize for RigidTransform {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        TransformRepr {
            quaternion_wxyz: self.quaternion_wxyz(),
            translation_xyz: self.translation.into(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = TransformRepr::deserialize(deserializer)?;
        RigidTransform::from_quaternion_wxyz(repr.quaternion_wxyz, repr.translation_xyz.into())
            .map_err(serde::de::Error::custom)
    }
}

/// Axis-aligned box in meters. Containment is boundary-inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self, GeometryError> {
        if !min.iter().chain(max.iter()).all(|c| c.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if (0..3).any(|i| min[i] > max[i]) {
            return Err(GeometryError::InvertedBox);
        }
        Ok(Self { min, max })
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vec3>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = *it.next()?;
        let (min, max) = it.fold((first, first), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
        Some(Self { min, max })
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// True when the interiors intersect; touching faces do not count.
    pub fn overlaps(&self, other: &Aabb) -> bool {
        (0..3).all(|i| self.min[i] < other.max[i] && other.min[i] < self.max[i])
    }

    pub fn intersection(&self, other: &Aabb) -> Option<Aabb> {
        let min = self.min.sup(&other.min);
        let max = self.max.inf(&other.max);
        (0..3).all(|i| min[i] <= max[i]).then_some(Aabb { min, max })
    }

    pub fn expanded(&self, margin: f64) -> Aabb {
        let m = Vec3::repeat(margin);
        Aabb {
            min: self.min - m,
            max: self.max + m,
        }
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn corners(&self) -> [Vec3; 8] {
        let (a, b) = (self.min, self.max);
        [
            Vec3::new(a.x, a.y, a.z),
            Vec3::new(b.x, a.y, a.z),
            Vec3::new(a.x, b.y, a.z),
            Vec3::new(b.x, b.y, a.z),
            Vec3::new(a.x, a.y, b.z),
            Vec3::new(b.x, a.y, b.z),
            Vec3::new(a.x, b.y, b.z),
            Vec3::new(b.x, b.y, b.z),
        ]
    }

    /// World-axis-aligned box around this box after a rigid motion.
    pub fn transformed(&self, t: &RigidTransform) -> Aabb {
        let corners = self.corners().map(|c| t.transform_point(&c));
        Aabb::from_points(corners.iter()).expect("eight corners")
    }
}

/// Plane `{p : normal·p + offset = 0}`.
///
/// Fitted planes are stored in canonical orientation: `offset <= 0`, i.e. the
/// normal points away from the origin. For planes through the origin the
/// largest-magnitude normal component is made positive. Callers that need a
/// semantic orientation (toward the floor, up out of a table) flip explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub normal: UnitVec3,
    pub offset: f64,
}

impl Plane {
    pub fn new(normal: UnitVec3, offset: f64) -> Self {
        Self { normal, offset }
    }

    pub fn from_point_normal(point: &Vec3, normal: UnitVec3) -> Self {
        Self::new(normal, -normal.dot(point))
    }

    /// Plane through three points, `None` when they are collinear.
    pub fn from_points(a: &Vec3, b: &Vec3, c: &Vec3) -> Option<Self> {
        let n = (b - a).cross(&(c - a));
        let scale = (b - a).norm() * (c - a).norm();
        if !(n.norm() > 1e-12 * scale.max(1e-300)) {
            return None;
        }
        Some(Self::from_point_normal(a, Unit::new_normalize(n)))
    }

    /// Least-squares plane through `points` (smallest principal axis of the
    /// scatter about the centroid), `None` below three points.
    pub fn fit(points: &[Vec3]) -> Option<Self> {
        Self::fit_weighted(points, &vec![1.0; points.len()])
    }

    /// Weighted total least squares; weights must be non-negative.
    pub fn fit_weighted(points: &[Vec3], weights: &[f64]) -> Option<Self> {
        if points.len() < 3 || weights.len() != points.len() {
            return None;
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return None;
        }
        let centroid = points.iter().zip(weights).map(|(p, w)| p * *w).sum::<Vec3>() / total;
        let mut cov = Matrix3::zeros();
        for (p, w) in points.iter().zip(weights) {
            let d = p - centroid;
            cov += d * d.transpose() * *w;
        }
        let eig = cov.symmetric_eigen();
        let normal = Unit::try_new(eig.eigenvectors.column(eig.eigenvalues.imin()).into_owned(), 0.5)?;
        Some(Self::from_point_normal(&centroid, normal))
    }

    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(p) + self.offset
    }

    /// Orthogonal projection of `p` onto the plane.
    pub fn project(&self, p: &Vec3) -> Vec3 {
        p - self.normal.into_inner() * self.signed_distance(p)
    }

    pub fn flipped(&self) -> Plane {
        Plane::new(-self.normal, -self.offset)
    }

    pub fn canonical(&self) -> Plane {
        if self.offset > 0.0 {
            return self.flipped();
        }
        if self.offset == 0.0 {
            let n = self.normal;
            let (i, _) = n.iamax_full();
            if n[i] < 0.0 {
                return self.flipped();
            }
        }
        *self
    }

    /// Same plane with the normal turned to agree with `dir`.
    pub fn oriented_toward(&self, dir: &Vec3) -> Plane {
        if self.normal.dot(dir) < 0.0 {
            self.flipped()
        } else {
            *self
        }
    }

    /// Orthonormal in-plane basis `(u, v)` with `u × v = normal`.
    pub fn basis(&self) -> (Vec3, Vec3) {
        let n = self.normal.into_inner();
        let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let u = (helper - n * n.dot(&helper)).normalize();
        let v = n.cross(&u);
        (u, v)
    }
}

/// Positions in meters with optional per-point unit normals.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub normals: Option<Vec<UnitVec3>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self { points, normals: None }
    }

    pub fn with_normals(points: Vec<Vec3>, normals: Vec<UnitVec3>) -> Result<Self, GeometryError> {
        if points.len() != normals.len() {
            return Err(GeometryError::NormalsLengthMismatch {
                points: points.len(),
                normals: normals.len(),
            });
        }
        Ok(Self {
            points,
            normals: Some(normals),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn has_normals(&self) -> bool {
        self.normals.is_some()
    }

    pub fn bounding_box(&self) -> Option<Aabb> {
        Aabb::from_points(self.points.iter())
    }

    pub fn transformed(&self, t: &RigidTransform) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| t.transform_point(p)).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| ns.iter().map(|n| Unit::new_unchecked(t.rotation * n.into_inner())).collect()),
        }
    }

    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            normals: self.normals.as_ref().map(|ns| indices.iter().map(|&i| ns[i]).collect()),
        }
    }

    /// Indices of points inside `region`.
    pub fn indices_within(&self, region: &Aabb) -> Vec<usize> {
        (0..self.len()).filter(|&i| region.contains(&self.points[i])).collect()
    }

    /// Keeps the first point (in index order) of every occupied voxel.
    pub fn voxel_downsample_indices(&self, voxel: f64) -> Vec<usize> {
        if !(voxel > 0.0) {
            return (0..self.len()).collect();
        }
        let mut seen: HashMap<(i64, i64, i64), ()> = HashMap::with_capacity(self.len());
        let mut keep = Vec::new();
        for (i, p) in self.points.iter().enumerate() {
            let key = (
                (p.x / voxel).floor() as i64,
                (p.y / voxel).floor() as i64,
                (p.z / voxel).floor() as i64,
            );
            if seen.insert(key, ()).is_none() {
                keep.push(i);
            }
        }
        keep
    }
}
