//! PLY point cloud reading and writing.
//!
//! Supports `ascii 1.0` and `binary_little_endian 1.0` with a `vertex` element
//! carrying `x y z` (any scalar type on read, `float` on write), optional
//! `nx ny nz`, and an optional integer `room_id` label.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::Unit;
use thiserror::Error;

use crate::geometry::{PointCloud, UnitVec3, Vec3};

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed ply header: {0}")]
    Header(String),
    #[error("unsupported ply feature: {0}")]
    Unsupported(String),
    #[error("vertex count mismatch: header declares {declared}, data holds {found}")]
    VertexCountMismatch { declared: usize, found: String },
    #[error("malformed vertex data at vertex {vertex}: {reason}")]
    Data { vertex: usize, reason: String },
    #[error("label count {labels} does not match point count {points}")]
    LabelMismatch { points: usize, labels: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

/// A decoded cloud plus the optional per-point `room_id` labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlyCloud {
    pub cloud: PointCloud,
    pub room_ids: Option<Vec<i32>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn parse_ascii(self, token: &str) -> Option<f64> {
        match self {
            Scalar::F32 => token.parse::<f32>().ok().map(f64::from),
            Scalar::F64 => token.parse::<f64>().ok(),
            _ => token.parse::<i64>().ok().map(|v| v as f64),
        }
    }

    fn decode_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

struct Header {
    format: PlyFormat,
    vertex_count: usize,
    properties: Vec<(String, Scalar)>,
    vertex_is_last: bool,
}

fn read_header<R: BufRead>(reader: &mut R) -> Result<Header, PlyError> {
    let mut line = String::new();
    let mut next_line = |reader: &mut R| -> Result<String, PlyError> {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(PlyError::Header("unexpected end of file in header".into()));
        }
        Ok(line.trim_end_matches(['\n', '\r']).to_string())
    };

    if next_line(reader)?.trim() != "ply" {
        return Err(PlyError::Header("missing 'ply' magic".into()));
    }
    let mut format = None;
    let mut elements: Vec<(String, usize)> = Vec::new();
    let mut properties = Vec::new();
    loop {
        let l = next_line(reader)?;
        let tokens: Vec<&str> = l.split_whitespace().collect();
        match tokens.as_slice() {
            [] => continue,
            ["comment", ..] | ["obj_info", ..] => continue,
            ["format", kind, _version] => {
                format = Some(match *kind {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    other => return Err(PlyError::Unsupported(format!("format {other}"))),
                });
            }
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| PlyError::Header(format!("bad element count '{count}'")))?;
                elements.push((name.to_string(), count));
            }
            ["property", "list", ..] => {
                if elements.last().is_some_and(|(n, _)| n == "vertex") {
                    return Err(PlyError::Unsupported("list property on vertex".into()));
                }
            }
            ["property", ty, name] => match elements.last() {
                Some((el, _)) if el == "vertex" => {
                    let scalar = Scalar::parse(ty)
                        .ok_or_else(|| PlyError::Header(format!("unknown property type '{ty}'")))?;
                    properties.push((name.to_string(), scalar));
                }
                Some(_) => {}
                None => return Err(PlyError::Header("property before any element".into())),
            },
            ["end_header"] => break,
            _ => return Err(PlyError::Header(format!("unrecognized header line '{l}'"))),
        }
    }
    let format = format.ok_or_else(|| PlyError::Header("missing format line".into()))?;
    let vertex_pos = elements
        .iter()
        .position(|(n, _)| n == "vertex")
        .ok_or_else(|| PlyError::Header("no vertex element".into()))?;
    if vertex_pos != 0 {
        return Err(PlyError::Unsupported("elements before vertex".into()));
    }
    Ok(Header {
        format,
        vertex_count: elements[0].1,
        properties,
        vertex_is_last: elements.len() == 1,
    })
}

struct Layout {
    xyz: [usize; 3],
    normal: Option<[usize; 3]>,
    room_id: Option<usize>,
}

fn layout(props: &[(String, Scalar)]) -> Result<Layout, PlyError> {
    let find = |name: &str| props.iter().position(|(n, _)| n == name);
    let xyz = match (find("x"), find("y"), find("z")) {
        (Some(x), Some(y), Some(z)) => [x, y, z],
        _ => return Err(PlyError::Header("vertex element lacks x, y, z".into())),
    };
    let normal = match (find("nx"), find("ny"), find("nz")) {
        (Some(x), Some(y), Some(z)) => Some([x, y, z]),
        (None, None, None) => None,
        _ => return Err(PlyError::Header("partial normal properties".into())),
    };
    Ok(Layout {
        xyz,
        normal,
        room_id: find("room_id"),
    })
}

fn assemble(values: &[f64], layout: &Layout, vertex: usize, out: &mut Builder) -> Result<(), PlyError> {
    let p = Vec3::new(values[layout.xyz[0]], values[layout.xyz[1]], values[layout.xyz[2]]);
    if !p.iter().all(|c| c.is_finite()) {
        return Err(PlyError::Data {
            vertex,
            reason: "non-finite coordinate".into(),
        });
    }
    out.points.push(p);
    if let Some(n) = layout.normal {
        let n = Vec3::new(values[n[0]], values[n[1]], values[n[2]]);
        let n = Unit::try_new(n, 1e-12).ok_or_else(|| PlyError::Data {
            vertex,
            reason: "zero or invalid normal".into(),
        })?;
        out.normals.push(n);
    }
    if let Some(r) = layout.room_id {
        out.room_ids.push(values[r] as i32);
    }
    Ok(())
}

#[derive(Default)]
struct Builder {
    points: Vec<Vec3>,
    normals: Vec<UnitVec3>,
    room_ids: Vec<i32>,
}

/// Decodes a PLY stream.
pub fn read_ply_from<R: BufRead>(mut reader: R) -> Result<PlyCloud, PlyError> {
    let header = read_header(&mut reader)?;
    let layout = layout(&header.properties)?;
    let n = header.vertex_count;
    let mut out = Builder::default();
    out.points.reserve(n);
    let mut values = vec![0.0; header.properties.len()];

    match header.format {
        PlyFormat::Ascii => {
            let mut lines = reader.lines();
            let mut read = 0;
            while read < n {
                let line = match lines.next() {
                    Some(l) => l?,
                    None => {
                        return Err(PlyError::VertexCountMismatch {
                            declared: n,
                            found: read.to_string(),
                        })
                    }
                };
                if line.trim().is_empty() {
                    continue;
                }
                let tokens: Vec<&str> = line.split_whitespace().collect();
                if tokens.len() != values.len() {
                    return Err(PlyError::Data {
                        vertex: read,
                        reason: format!("expected {} values, found {}", values.len(), tokens.len()),
                    });
                }
                for ((v, t), (_, scalar)) in values.iter_mut().zip(&tokens).zip(&header.properties) {
                    *v = scalar.parse_ascii(t).ok_or_else(|| PlyError::Data {
                        vertex: read,
                        reason: format!("bad number '{t}'"),
                    })?;
                }
                assemble(&values, &layout, read, &mut out)?;
                read += 1;
            }
            if header.vertex_is_last {
                let extra = lines.filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty())).count();
                if extra > 0 {
                    return Err(PlyError::VertexCountMismatch {
                        declared: n,
                        found: format!("{} or more", n + extra),
                    });
                }
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let stride: usize = header.properties.iter().map(|(_, s)| s.size()).sum();
            let mut record = vec![0u8; stride];
            for vertex in 0..n {
                if let Err(e) = reader.read_exact(&mut record) {
                    if e.kind() == std::io::ErrorKind::UnexpectedEof {
                        return Err(PlyError::VertexCountMismatch {
                            declared: n,
                            found: vertex.to_string(),
                        });
                    }
                    return Err(e.into());
                }
                let mut offset = 0;
                for (v, (_, s)) in values.iter_mut().zip(&header.properties) {
                    *v = s.decode_le(&record[offset..offset + s.size()]);
                    offset += s.size();
                }
                assemble(&values, &layout, vertex, &mut out)?;
            }
            if header.vertex_is_last {
                let mut rest = Vec::new();
                reader.read_to_end(&mut rest)?;
                if !rest.is_empty() {
                    return Err(PlyError::VertexCountMismatch {
                        declared: n,
                        found: format!("{} plus {} trailing bytes", n, rest.len()),
                    });
                }
            }
        }
    }

    let cloud = if layout.normal.is_some() {
        PointCloud::with_normals(out.points, out.normals).expect("normals read per vertex")
    } else {
        PointCloud::new(out.points)
    };
    Ok(PlyCloud {
        cloud,
        room_ids: layout.room_id.map(|_| out.room_ids),
    })
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<PlyCloud, PlyError> {
    read_ply_from(BufReader::new(File::open(path)?))
}

/// Encodes `cloud` (and optional labels) as PLY with `float` coordinates.
pub fn write_ply_to<W: Write>(
    mut w: W,
    cloud: &PointCloud,
    room_ids: Option<&[i32]>,
    format: PlyFormat,
) -> Result<(), PlyError> {
    if let Some(ids) = room_ids {
        if ids.len() != cloud.len() {
            return Err(PlyError::LabelMismatch {
                points: cloud.len(),
                labels: ids.len(),
            });
        }
    }
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    writeln!(w, "ply\nformat {fmt} 1.0\nelement vertex {}", cloud.len())?;
    writeln!(w, "property float x\nproperty float y\nproperty float z")?;
    if cloud.normals.is_some() {
        writeln!(w, "property float nx\nproperty float ny\nproperty float nz")?;
    }
    if room_ids.is_some() {
        writeln!(w, "property int room_id")?;
    }
    writeln!(w, "end_header")?;

    for i in 0..cloud.len() {
        let mut floats: [f32; 6] = [0.0; 6];
        let p = cloud.points[i];
        floats[..3].copy_from_slice(&[p.x as f32, p.y as f32, p.z as f32]);
        let nfloat = if let Some(ns) = &cloud.normals {
            let n = ns[i];
            floats[3..].copy_from_slice(&[n.x as f32, n.y as f32, n.z as f32]);
            6
        } else {
            3
        };
        match format {
            PlyFormat::Ascii => {
                let mut line = floats[..nfloat].iter().map(|f| f.to_string()).collect::<Vec<_>>().join(" ");
                if let Some(ids) = room_ids {
                    line.push(' ');
                    line.push_str(&ids[i].to_string());
                }
                writeln!(w, "{line}")?;
            }
            PlyFormat::BinaryLittleEndian => {
                for f in &floats[..nfloat] {
                    w.write_all(&f.to_le_bytes())?;
                }
                if let Some(ids) = room_ids {
                    w.write_all(&ids[i].to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_ply(
    path: impl AsRef<Path>,
    cloud: &PointCloud,
    room_ids: Option<&[i32]>,
    format: PlyFormat,
) -> Result<(), PlyError> {
    write_ply_to(BufWriter::new(File::create(path)?), cloud, room_ids, format)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Cursor;

    fn sample_cloud() -> PointCloud {
        PointCloud::with_normals(
            vec![Vec3::new(0.5, -1.25, 3.0), Vec3::new(1e-3, 2.0, -7.5)],
            vec![Vec3::z_axis(), Unit::new_normalize(Vec3::new(1.0, 1.0, 0.0))],
        )
        .unwrap()
    }

    fn encode(cloud: &PointCloud, ids: Option<&[i32]>, format: PlyFormat) -> Vec<u8> {
        let mut buf = Vec::new();
        write_ply_to(&mut buf, cloud, ids, format).unwrap();
        buf
    }

    #[test]
    fn ascii_and_binary_agree() {
        let cloud = sample_cloud();
        let ids = [3, -1];
        for format in [PlyFormat::Ascii, PlyFormat::BinaryLittleEndian] {
            let back = read_ply_from(Cursor::new(encode(&cloud, Some(&ids), format))).unwrap();
            assert_eq!(back.room_ids.as_deref(), Some(&ids[..]));
            for (a, b) in cloud.points.iter().zip(&back.cloud.points) {
                assert!((a - b).norm() < 1e-6);
            }
            let normals = back.cloud.normals.unwrap();
            assert!((normals[1].into_inner() - cloud.normals.as_ref().unwrap()[1].into_inner()).norm() < 1e-6);
        }
    }

    #[test]
    fn reads_foreign_header_with_doubles_and_extra_props() {
        let text = "ply\nformat ascii 1.0\ncomment made elsewhere\nelement vertex 2\nproperty double x\nproperty double y\n\
                    property double z\nproperty uchar red\nelement face 0\nproperty list uchar int vertex_indices\nend_header\n\
                    1 2 3 255\n4 5 6 0\n";
        let back = read_ply_from(Cursor::new(text)).unwrap();
        assert_eq!(back.cloud.points, vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(4.0, 5.0, 6.0)]);
        assert!(back.cloud.normals.is_none());
        assert!(back.room_ids.is_none());
    }

    #[test]
    fn rejects_short_ascii_body() {
        let text = "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 1 1\n";
        assert!(matches!(
            read_ply_from(Cursor::new(text)),
            Err(PlyError::VertexCountMismatch { declared: 3, .. })
        ));
    }

    #[test]
    fn rejects_long_ascii_body() {
        let text = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 1 1\n";
        assert!(matches!(
            read_ply_from(Cursor::new(text)),
            Err(PlyError::VertexCountMismatch { declared: 1, .. })
        ));
    }

    #[test]
    fn rejects_truncated_and_padded_binary() {
        let cloud = PointCloud::new(vec![Vec3::zeros(), Vec3::x(), Vec3::y()]);
        let mut bytes = encode(&cloud, None, PlyFormat::BinaryLittleEndian);
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(
            read_ply_from(Cursor::new(bytes.clone())),
            Err(PlyError::VertexCountMismatch { declared: 3, .. })
        ));
        bytes.extend_from_slice(&[0u8; 16]);
        assert!(matches!(
            read_ply_from(Cursor::new(bytes)),
            Err(PlyError::VertexCountMismatch { declared: 3, .. })
        ));
    }

    #[test]
    fn rejects_big_endian_and_missing_coordinates() {
        let be = "ply\nformat binary_big_endian 1.0\nelement vertex 0\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
        assert!(matches!(read_ply_from(Cursor::new(be)), Err(PlyError::Unsupported(_))));
        let no_z = "ply\nformat ascii 1.0\nelement vertex 0\nproperty float x\nproperty float y\nend_header\n";
        assert!(matches!(read_ply_from(Cursor::new(no_z)), Err(PlyError::Header(_))));
    }

    #[test]
    fn empty_cloud_round_trips() {
        let back = read_ply_from(Cursor::new(encode(&PointCloud::default(), None, PlyFormat::Ascii))).unwrap();
        assert!(back.cloud.is_empty());
    }

    proptest! {
        #[test]
        fn float_coordinates_round_trip_exactly(
            coords in proptest::collection::vec((-1e3f32..1e3, -1e3f32..1e3, -1e3f32..1e3), 0..40),
            binary in any::<bool>(),
        ) {
            let cloud = PointCloud::new(coords.iter().map(|&(x, y, z)| Vec3::new(x as f64, y as f64, z as f64)).collect());
            let format = if binary { PlyFormat::BinaryLittleEndian } else { PlyFormat::Ascii };
            let back = read_ply_from(Cursor::new(encode(&cloud, None, format))).unwrap();
            prop_assert_eq!(back.cloud, cloud);
        }
    }
}
