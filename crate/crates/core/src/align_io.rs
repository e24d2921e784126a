//! Alignment file formats: PLY clouds, `id,X,Y,Z,u,v` correspondences,
//! intrinsics JSON and transform JSON `{s, quat, t}`.

use std::io::{BufRead, Write};
use std::path::Path;

use thiserror::Error;

use crate::geom::{SimilarityTransform, Vec3};
use crate::sim2real::{AlignError, CameraIntrinsics, Correspondence, PointCloud};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("ply: {0}")]
    Ply(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn ply_err(m: impl Into<String>) -> FormatError {
    FormatError::Ply(m.into())
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
    fn parse(s: &str) -> Result<Self, FormatError> {
        Ok(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return Err(ply_err(format!("unknown scalar type {s}"))),
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

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug)]
enum Property {
    Scalar(String, Scalar),
    List(Scalar, Scalar),
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

#[derive(Debug, PartialEq)]
enum Encoding {
    Ascii,
    BinaryLe,
}

/// Reads vertex `x, y, z` from ASCII or binary little-endian PLY.
pub fn parse_ply(bytes: &[u8]) -> Result<PointCloud, FormatError> {
    let mut cursor = std::io::Cursor::new(bytes);
    let mut line = String::new();
    let mut next = |line: &mut String| -> Result<(), FormatError> {
        line.clear();
        if cursor.read_line(line)? == 0 {
            return Err(ply_err("unexpected end of header"));
        }
        Ok(())
    };
    next(&mut line)?;
    if line.trim() != "ply" {
        return Err(ply_err("missing magic"));
    }
    let mut encoding = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        next(&mut line)?;
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => encoding = Some(Encoding::Ascii),
            ["format", "binary_little_endian", _] => encoding = Some(Encoding::BinaryLe),
            ["format", f, ..] => return Err(ply_err(format!("unsupported format {f}"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| ply_err(format!("bad element count {count}")))?,
                props: Vec::new(),
            }),
            ["property", "list", c, t, _] => elements
                .last_mut()
                .ok_or_else(|| ply_err("property before element"))?
                .props
                .push(Property::List(Scalar::parse(c)?, Scalar::parse(t)?)),
            ["property", t, name] => elements
                .last_mut()
                .ok_or_else(|| ply_err("property before element"))?
                .props
                .push(Property::Scalar(name.to_string(), Scalar::parse(t)?)),
            _ => return Err(ply_err(format!("unrecognized header line {:?}", line.trim()))),
        }
    }
    let encoding = encoding.ok_or_else(|| ply_err("missing format line"))?;
    let body = &bytes[cursor.position() as usize..];
    let vi = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| ply_err("no vertex element"))?;
    let axis = |n: &str| {
        elements[vi]
            .props
            .iter()
            .position(|p| matches!(p, Property::Scalar(name, _) if name == n))
            .ok_or_else(|| ply_err(format!("vertex has no {n} property")))
    };
    let xyz = [axis("x")?, axis("y")?, axis("z")?];
    let points = match encoding {
        Encoding::Ascii => read_ascii(body, &elements, vi, xyz)?,
        Encoding::BinaryLe => read_binary(body, &elements, vi, xyz)?,
    };
    Ok(PointCloud::new(points)?)
}

fn read_ascii(body: &[u8], elements: &[Element], vi: usize, xyz: [usize; 3]) -> Result<Vec<Vec3>, FormatError> {
    let text = std::str::from_utf8(body).map_err(|_| ply_err("ASCII body is not UTF-8"))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let skip: usize = elements[..vi].iter().map(|e| e.count).sum();
    for _ in 0..skip {
        lines.next().ok_or_else(|| ply_err("truncated body"))?;
    }
    let mut pts = Vec::with_capacity(elements[vi].count);
    for _ in 0..elements[vi].count {
        let l = lines.next().ok_or_else(|| ply_err("truncated vertex list"))?;
        let vals: Vec<&str> = l.split_whitespace().collect();
        let get = |i: usize| -> Result<f64, FormatError> {
            vals.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| ply_err(format!("bad vertex line {l:?}")))
        };
        pts.push(Vec3::new(get(xyz[0])?, get(xyz[1])?, get(xyz[2])?));
    }
    Ok(pts)
}

fn read_binary(body: &[u8], elements: &[Element], vi: usize, xyz: [usize; 3]) -> Result<Vec<Vec3>, FormatError> {
    let mut off = 0usize;
    let need = |off: usize, n: usize| {
        if off + n > body.len() {
            Err(ply_err("truncated binary body"))
        } else {
            Ok(())
        }
    };
    let mut pts = Vec::new();
    for (ei, e) in elements.iter().enumerate().take(vi + 1) {
        for _ in 0..e.count {
            let mut vals = [0.0; 3];
            for (pi, p) in e.props.iter().enumerate() {
                match p {
                    Property::Scalar(_, t) => {
                        need(off, t.size())?;
                        if ei == vi {
                            if let Some(k) = xyz.iter().position(|&i| i == pi) {
                                vals[k] = t.read_le(&body[off..]);
                            }
                        }
                        off += t.size();
                    }
                    Property::List(c, t) => {
                        need(off, c.size())?;
                        let n = c.read_le(&body[off..]) as usize;
                        off += c.size() + n * t.size();
                        need(off, 0)?;
                    }
                }
            }
            if ei == vi {
                pts.push(Vec3::new(vals[0], vals[1], vals[2]));
            }
        }
    }
    Ok(pts)
}

pub fn read_ply(path: &Path) -> Result<PointCloud, FormatError> {
    parse_ply(&std::fs::read(path)?)
}

/// Writes `x y z` vertices as doubles.
pub fn write_ply(path: &Path, cloud: &PointCloud, binary: bool) -> Result<(), FormatError> {
    let mut out = Vec::new();
    let fmt = if binary { "binary_little_endian" } else { "ascii" };
    write!(
        out,
        "ply\nformat {fmt} 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        cloud.len()
    )?;
    for p in &cloud.points {
        if binary {
            for v in p.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        } else {
            writeln!(out, "{} {} {}", p.x, p.y, p.z)?;
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(serde::Deserialize, serde::Serialize)]
#[allow(non_snake_case)]
struct CorrRow {
    id: u32,
    X: f64,
    Y: f64,
    Z: f64,
    u: f64,
    v: f64,
}

pub fn parse_correspondences(text: &str) -> Result<Vec<Correspondence>, FormatError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    rdr.deserialize::<CorrRow>()
        .map(|r| {
            let r = r?;
            Ok(Correspondence {
                id: r.id,
                point: Vec3::new(r.X, r.Y, r.Z),
                pixel: [r.u, r.v],
            })
        })
        .collect()
}

pub fn read_correspondences(path: &Path) -> Result<Vec<Correspondence>, FormatError> {
    parse_correspondences(&std::fs::read_to_string(path)?)
}

pub fn write_correspondences(path: &Path, corr: &[Correspondence]) -> Result<(), FormatError> {
    let mut w = csv::Writer::from_path(path)?;
    for c in corr {
        w.serialize(CorrRow {
            id: c.id,
            X: c.point.x,
            Y: c.point.y,
            Z: c.point.z,
            u: c.pixel[0],
            v: c.pixel[1],
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_intrinsics(path: &Path) -> Result<CameraIntrinsics, FormatError> {
    let k: CameraIntrinsics = serde_json::from_slice(&std::fs::read(path)?)?;
    k.validate()?;
    Ok(k)
}

pub fn read_transform(path: &Path) -> Result<SimilarityTransform, FormatError> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

pub fn transform_json(t: &SimilarityTransform) -> serde_json::Value {
    serde_json::to_value(t).expect("transform serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud() -> PointCloud {
        PointCloud::new(vec![
            Vec3::new(0.1, 0.2, 0.3),
            Vec3::new(-1.5, 2.25, 1e-3),
            Vec3::new(7.0, -8.0, 9.5),
        ])
        .unwrap()
    }

    #[test]
    fn ply_round_trips_in_both_encodings() {
        let dir = tempfile::tempdir().unwrap();
        for binary in [false, true] {
            let p = dir.path().join(format!("c{binary}.ply"));
            write_ply(&p, &cloud(), binary).unwrap();
            assert_eq!(read_ply(&p).unwrap(), cloud());
        }
    }

    #[test]
    fn ply_with_extra_properties_and_faces() {
        let text = "ply\nformat ascii 1.0\ncomment made by hand\nelement vertex 2\nproperty float nx\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n9 1 2 3 255\n9 4 5 6 0\n3 0 1 1\n";
        let c = parse_ply(text.as_bytes()).unwrap();
        assert_eq!(c.points, vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(4.0, 5.0, 6.0)]);

        let mut b = b"ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty uchar flag\nproperty float x\nproperty float y\nproperty float z\nend_header\n".to_vec();
        b.push(7);
        for v in [1.5f32, -2.0, 0.25] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(parse_ply(&b).unwrap().points, vec![Vec3::new(1.5, -2.0, 0.25)]);
        b.pop();
        assert!(parse_ply(&b).is_err());
    }

    #[test]
    fn ply_rejects_unsupported_input() {
        assert!(parse_ply(b"ply\nformat binary_big_endian 1.0\nend_header\n").is_err());
        assert!(parse_ply(b"PLY\n").is_err());
        assert!(parse_ply(b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nend_header\n1\n").is_err());
    }

    #[test]
    fn correspondences_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        let c = vec![Correspondence { id: 3, point: Vec3::new(0.5, -0.25, 2.0), pixel: [320.5, 10.0] }];
        write_correspondences(&p, &c).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("id,X,Y,Z,u,v"));
        assert_eq!(read_correspondences(&p).unwrap(), c);
    }

    #[test]
    fn transform_json_shape() {
        let t = SimilarityTransform::identity();
        let v = transform_json(&t);
        assert_eq!(v["s"], 1.0);
        assert_eq!(v["quat"].as_array().unwrap().len(), 4);
        assert_eq!(v["t"].as_array().unwrap().len(), 3);
    }
}
