//! Stitch manifest: the room pairs to register and their inputs.

use panostitch::epipolar::RansacConfig;
use panostitch::icp::IcpConfig;
use panostitch::scale::{GroundConfig, DEFAULT_CAMERA_HEIGHT};
use panostitch::geometry::unit;
use panostitch::{UnitVec3, Vec3};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StitchManifest {
    pub root_room: String,
    /// Room order in the output; defaults to first appearance in `pairs`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rooms: Option<Vec<String>>,
    pub pairs: Vec<PairSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// One registration edge. File paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSpec {
    pub room_a: String,
    pub room_b: String,
    pub match_file: String,
    pub cloud_a: String,
    pub cloud_b: String,
    #[serde(default = "default_height")]
    pub camera_height_m: f64,
    #[serde(default)]
    pub gravity_axis: GravityAxis,
    #[serde(default)]
    pub min_score: f64,
    #[serde(default)]
    pub ransac: RansacConfig,
    /// Ground-plane settings; `camera_height` and `seed` are replaced by
    /// `camera_height_m` and the run seed.
    #[serde(default)]
    pub ground: GroundConfig,
    #[serde(default)]
    pub icp: IcpConfig,
}

fn default_height() -> f64 {
    DEFAULT_CAMERA_HEIGHT
}

/// Gravity direction in camera a's frame: `"-z"`-style axis names or an
/// explicit vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GravityAxis {
    Named(String),
    Vector([f64; 3]),
}

impl Default for GravityAxis {
    fn default() -> Self {
        GravityAxis::Named("-z".into())
    }
}

impl GravityAxis {
    pub fn direction(&self) -> Result<UnitVec3, CliError> {
        let v = match self {
            GravityAxis::Vector(v) => Vec3::from(*v),
            GravityAxis::Named(name) => {
                let name = name.trim().to_ascii_lowercase();
                let (sign, axis) = match name.as_bytes() {
                    [b'-', a] => (-1.0, *a),
                    [b'+', a] | [a] => (1.0, *a),
                    _ => (0.0, 0),
                };
                match axis {
                    b'x' => Vec3::x() * sign,
                    b'y' => Vec3::y() * sign,
                    b'z' => Vec3::z() * sign,
                    _ => return Err(CliError::Input(format!("invalid gravity_axis {name:?}"))),
                }
            }
        };
        unit(v).map_err(|e| CliError::Input(format!("invalid gravity_axis: {e}")))
    }
}

impl StitchManifest {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Input(format!("invalid stitch manifest: {e}")))
    }

    /// Explicit room list, or rooms in order of first appearance.
    pub fn room_ids(&self) -> Vec<String> {
        if let Some(rooms) = &self.rooms {
            return rooms.clone();
        }
        let mut out: Vec<String> = Vec::new();
        for p in &self.pairs {
            for id in [&p.room_a, &p.room_b] {
                if !out.contains(id) {
                    out.push(id.clone());
                }
            }
        }
        out
    }
}
