//! ASCII OBJ / PLY export and point-cloud import.
//!
//! Coordinates are written with Rust's shortest round-trip float formatting,
//! so re-reading an exported file reproduces the same `f64` values.
//!
//! * OBJ: one `v x y z` line per vertex, one `f a b c d` line per quad
//!   (1-based indices). Quads are always preserved.
//! * PLY: `format ascii 1.0`, `double` x/y/z vertex properties (plus an
//!   optional extra `double` scalar), faces as `property list uchar int
//!   vertex_indices`. Quads are kept by default; [`PlyFaces::Triangles`]
//!   writes the fixed-diagonal triangulation instead.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    Ply,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "obj" => Some(Self::Obj),
            "ply" => Some(Self::Ply),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PlyFaces {
    #[default]
    Quads,
    Triangles,
}

fn check_mesh(vertices: &[Vec3], faces: &[[u32; 4]]) -> Result<()> {
    if vertices.is_empty() {
        return Err(Error::InvalidArgument("cannot export a mesh without vertices".into()));
    }
    if let Some((f, _)) = faces
        .iter()
        .enumerate()
        .find(|(_, face)| face.iter().any(|&i| i as usize >= vertices.len()))
    {
        return Err(Error::InvalidArgument(format!("face {f} references a missing vertex")));
    }
    Ok(())
}

pub fn write_obj(out: &mut impl Write, vertices: &[Vec3], faces: &[[u32; 4]]) -> Result<()> {
    check_mesh(vertices, faces)?;
    let io = |e| Error::Parse(format!("write failed: {e}"));
    writeln!(out, "# phenobody mesh").map_err(io)?;
    for v in vertices {
        writeln!(out, "v {} {} {}", v.x, v.y, v.z).map_err(io)?;
    }
    for f in faces {
        writeln!(out, "f {} {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1, f[3] + 1).map_err(io)?;
    }
    Ok(())
}

pub fn write_ply(
    out: &mut impl Write,
    vertices: &[Vec3],
    faces: &[[u32; 4]],
    mode: PlyFaces,
    scalar: Option<(&str, &[f64])>,
) -> Result<()> {
    check_mesh(vertices, faces)?;
    if let Some((_, values)) = scalar {
        if values.len() != vertices.len() {
            return Err(Error::DimensionMismatch {
                expected: vertices.len(),
                actual: values.len(),
            });
        }
    }
    let io = |e| Error::Parse(format!("write failed: {e}"));
    let face_count = match mode {
        PlyFaces::Quads => faces.len(),
        PlyFaces::Triangles => 2 * faces.len(),
    };
    write!(
        out,
        "ply\nformat ascii 1.0\ncomment phenobody mesh\nelement vertex {}\n\
         property double x\nproperty double y\nproperty double z\n",
        vertices.len()
    )
    .map_err(io)?;
    if let Some((name, _)) = scalar {
        writeln!(out, "property double {name}").map_err(io)?;
    }
    write!(
        out,
        "element face {face_count}\nproperty list uchar int vertex_indices\nend_header\n"
    )
    .map_err(io)?;
    for (i, v) in vertices.iter().enumerate() {
        match scalar {
            Some((_, values)) => writeln!(out, "{} {} {} {}", v.x, v.y, v.z, values[i]),
            None => writeln!(out, "{} {} {}", v.x, v.y, v.z),
        }
        .map_err(io)?;
    }
    for &[a, b, c, d] in faces {
        match mode {
            PlyFaces::Quads => writeln!(out, "4 {a} {b} {c} {d}"),
            PlyFaces::Triangles => writeln!(out, "3 {a} {b} {c}\n3 {a} {c} {d}"),
        }
        .map_err(io)?;
    }
    Ok(())
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> Result<()>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Write a quad mesh to `path` as ASCII OBJ or PLY (quads kept).
pub fn export_mesh(
    vertices: &[Vec3],
    faces: &[[u32; 4]],
    path: impl AsRef<Path>,
    format: MeshFormat,
) -> Result<()> {
    check_mesh(vertices, faces)?;
    let path = path.as_ref();
    write_file(path, |w| match format {
        MeshFormat::Obj => write_obj(w, vertices, faces),
        MeshFormat::Ply => write_ply(w, vertices, faces, PlyFaces::Quads, None),
    })
}

/// PLY export with one extra per-vertex `double` property.
pub fn export_ply_with_scalar(
    vertices: &[Vec3],
    faces: &[[u32; 4]],
    name: &str,
    values: &[f64],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    write_file(path, |w| {
        write_ply(w, vertices, faces, PlyFaces::Quads, Some((name, values)))
    })
}

/// Read vertex positions from an ASCII PLY (x, y, z among the vertex
/// properties) or an OBJ (`v` lines). Faces are ignored.
pub fn read_point_cloud(path: impl AsRef<Path>) -> Result<Vec<Vec3>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let points = match MeshFormat::from_path(path) {
        Some(MeshFormat::Obj) => parse_obj_points(&text)?,
        Some(MeshFormat::Ply) => parse_ply_points(&text)?,
        None => {
            if text.starts_with("ply") {
                parse_ply_points(&text)?
            } else {
                parse_obj_points(&text)?
            }
        }
    };
    if points.is_empty() {
        return Err(Error::Parse(format!("{} contains no points", path.display())));
    }
    Ok(points)
}

fn parse_f64(tok: Option<&str>, line: usize) -> Result<f64> {
    tok.ok_or_else(|| Error::Parse(format!("line {line}: missing coordinate")))?
        .parse()
        .map_err(|_| Error::Parse(format!("line {line}: bad number")))
}

fn parse_obj_points(text: &str) -> Result<Vec<Vec3>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        if it.next() == Some("v") {
            out.push(Vec3::new(
                parse_f64(it.next(), n + 1)?,
                parse_f64(it.next(), n + 1)?,
                parse_f64(it.next(), n + 1)?,
            ));
        }
    }
    Ok(out)
}

fn parse_ply_points(text: &str) -> Result<Vec<Vec3>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(Error::Parse("missing 'ply' header".into())),
    }
    let mut count = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex = false;
    let mut saw_end = false;
    for (_, line) in lines.by_ref() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", fmt, ..] if *fmt != "ascii" => {
                return Err(Error::Parse(format!("unsupported PLY format '{fmt}'")))
            }
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| Error::Parse("bad vertex count".into()))?);
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", "list", ..] => {}
            ["property", _, name] if in_vertex => props.push(name.to_string()),
            ["end_header"] => {
                saw_end = true;
                break;
            }
            _ => {}
        }
    }
    if !saw_end {
        return Err(Error::Parse("PLY header has no end_header".into()));
    }
    let count = count.ok_or_else(|| Error::Parse("PLY has no vertex element".into()))?;
    let col = |name: &str| {
        props
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| Error::Parse(format!("PLY vertex has no '{name}' property")))
    };
    let (cx, cy, cz) = (col("x")?, col("y")?, col("z")?);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let (n, line) = lines
            .next()
            .ok_or_else(|| Error::Parse("PLY ends before all vertices".into()))?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        let get = |c: usize| parse_f64(toks.get(c).copied(), n + 1);
        out.push(Vec3::new(get(cx)?, get(cy)?, get(cz)?));
    }
    Ok(out)
}
