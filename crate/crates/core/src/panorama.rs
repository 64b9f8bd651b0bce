//! Equirectangular panoramas: pixel <-> bearing conversion and match files.
//!
//! Camera frame is x-forward, y-left, z-up (right-handed), gravity-leveled.
//! Pixel coordinates are continuous: `u = W/2` is longitude 0 and `v = 0` is
//! the north pole.
//!
//! ```text
//! longitude = 2π·u/W − π        latitude = π/2 − π·v/H
//! bearing   = (cos lat · cos lon, cos lat · sin lon, sin lat)
//! ```

use std::f64::consts::{FRAC_PI_2, PI};
use std::path::Path;

use nalgebra::Unit;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{UnitVec3, Vec3};

/// Matches needed for the eight-point estimator.
pub const MIN_MATCHES: usize = 8;

/// Default lower bound on matcher confidence kept at load time.
pub const DEFAULT_MIN_SCORE: f64 = 0.2;

#[derive(Debug, Error)]
pub enum PanoramaError {
    #[error("io error reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed match file: {0}")]
    Malformed(String),
    #[error("invalid panorama size {width}x{height}: width must be 2x height and both positive")]
    InvalidSpec { width: u32, height: u32 },
    #[error("pixel ({u}, {v}) outside {width}x{height} panorama")]
    PixelOutOfRange { u: f64, v: f64, width: u32, height: u32 },
    #[error("match {index}: keypoint in panorama {side} outside declared {width}x{height}")]
    DimensionMismatch { index: usize, side: char, width: u32, height: u32 },
    #[error("insufficient matches: {found} usable, at least {required} required")]
    InsufficientMatches { found: usize, required: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanoramaSpec {
    pub width: u32,
    pub height: u32,
}

impl PanoramaSpec {
    pub fn new(width: u32, height: u32) -> Result<Self, PanoramaError> {
        let spec = Self { width, height };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), PanoramaError> {
        if self.height == 0 || self.width as u64 != 2 * self.height as u64 {
            return Err(PanoramaError::InvalidSpec {
                width: self.width,
                height: self.height,
            });
        }
        Ok(())
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        (0.0..self.width as f64).contains(&u) && (0.0..self.height as f64).contains(&v)
    }
}

pub fn pixel_to_bearing(u: f64, v: f64, spec: PanoramaSpec) -> Result<UnitVec3, PanoramaError> {
    if !spec.contains(u, v) {
        return Err(PanoramaError::PixelOutOfRange {
            u,
            v,
            width: spec.width,
            height: spec.height,
        });
    }
    let lon = 2.0 * PI * u / spec.width as f64 - PI;
    let lat = FRAC_PI_2 - PI * v / spec.height as f64;
    let (slon, clon) = lon.sin_cos();
    let (slat, clat) = lat.sin_cos();
    // Already unit up to rounding; renormalize so the norm is exact to 1 ulp.
    Ok(Unit::new_normalize(Vec3::new(clat * clon, clat * slon, slat)))
}

/// Inverse of [`pixel_to_bearing`]; `u` wraps into `[0, W)`.
pub fn bearing_to_pixel(bearing: &Vec3, spec: PanoramaSpec) -> (f64, f64) {
    let b = bearing.normalize();
    let lon = b.y.atan2(b.x);
    let lat = b.z.atan2(b.x.hypot(b.y));
    let w = spec.width as f64;
    let mut u = (lon + PI) * w / (2.0 * PI);
    if u >= w {
        u -= w;
    }
    let v = (FRAC_PI_2 - lat) * spec.height as f64 / PI;
    (u, v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeypointMatch {
    pub ua: f64,
    pub va: f64,
    pub ub: f64,
    pub vb: f64,
    pub score: f64,
}

/// On-disk match file produced by the external feature matcher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchFile {
    pub pano_a: PanoramaSpec,
    pub pano_b: PanoramaSpec,
    pub matches: Vec<KeypointMatch>,
}

impl MatchFile {
    pub fn from_json(text: &str) -> Result<Self, PanoramaError> {
        serde_json::from_str(text).map_err(|e| PanoramaError::Malformed(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("match file serializes")
    }
}

/// Bearing pairs `(in camera a, in camera b)` in match-file order.
#[derive(Debug, Clone, PartialEq)]
pub struct BearingMatchSet {
    pub pairs: Vec<(UnitVec3, UnitVec3)>,
    pub source: (PanoramaSpec, PanoramaSpec),
    /// Index of each pair in the originating match file.
    pub source_indices: Vec<usize>,
}

impl BearingMatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchLoadOptions {
    pub min_score: f64,
}

impl Default for MatchLoadOptions {
    fn default() -> Self {
        Self {
            min_score: DEFAULT_MIN_SCORE,
        }
    }
}

/// Converts keypoint matches to bearings, dropping low-score matches.
pub fn bearings_from_matches(file: &MatchFile, opts: &MatchLoadOptions) -> Result<BearingMatchSet, PanoramaError> {
    file.pano_a.validate()?;
    file.pano_b.validate()?;
    let mut pairs = Vec::with_capacity(file.matches.len());
    let mut source_indices = Vec::with_capacity(file.matches.len());
    for (index, m) in file.matches.iter().enumerate() {
        if !file.pano_a.contains(m.ua, m.va) {
            return Err(PanoramaError::DimensionMismatch {
                index,
                side: 'a',
                width: file.pano_a.width,
                height: file.pano_a.height,
            });
        }
        if !file.pano_b.contains(m.ub, m.vb) {
            return Err(PanoramaError::DimensionMismatch {
                index,
                side: 'b',
                width: file.pano_b.width,
                height: file.pano_b.height,
            });
        }
        if !(m.score >= opts.min_score) {
            continue;
        }
        let a = pixel_to_bearing(m.ua, m.va, file.pano_a)?;
        let b = pixel_to_bearing(m.ub, m.vb, file.pano_b)?;
        pairs.push((a, b));
        source_indices.push(index);
    }
    if pairs.len() < MIN_MATCHES {
        return Err(PanoramaError::InsufficientMatches {
            found: pairs.len(),
            required: MIN_MATCHES,
        });
    }
    Ok(BearingMatchSet {
        pairs,
        source: (file.pano_a, file.pano_b),
        source_indices,
    })
}

pub fn load_matches(path: impl AsRef<Path>, opts: &MatchLoadOptions) -> Result<BearingMatchSet, PanoramaError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| PanoramaError::Io {
        path: path.display().to_string(),
        source,
    })?;
    bearings_from_matches(&MatchFile::from_json(&text)?, opts)
}
