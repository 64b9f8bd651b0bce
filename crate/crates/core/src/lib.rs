//! Multi-room point cloud stitching anchored on panoramic keypoint matches,
//! support-plane extraction and asset placement, and the evaluation metrics
//! used to compare simulated and real policy rollouts.

pub mod epipolar;
pub mod geometry;
pub mod icp;
pub mod kdtree;
pub mod metrics;
pub mod panorama;
pub mod pipeline;
pub mod ply;
pub mod scale;
pub mod scene;
pub mod seed;
pub mod testkit;

pub use geometry::{Aabb, GeometryError, Plane, PointCloud, RigidTransform, Rotation, UnitVec3, Vec3};
pub use kdtree::{KdTree, Neighbor};
