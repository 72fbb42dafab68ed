//! OBJ (ASCII, grouped, with materials) and binary PLY writers and readers.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mesh::Mesh;

/// One named group of an OBJ file.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjGroup {
    pub name: String,
    pub color: Option<[f64; 3]>,
    pub mesh: Mesh,
}

fn fmt_color(c: [f64; 3]) -> String {
    format!("{} {} {}", c[0], c[1], c[2])
}

/// Write `groups` to `path`; colored groups get a material in a `.mtl` next to it.
pub fn write_obj(groups: &[ObjGroup], path: &Path) -> Result<()> {
    let mtl_path = path.with_extension("mtl");
    let has_colors = groups.iter().any(|g| g.color.is_some());
    let mut obj = String::new();
    let mut mtl = String::new();
    if has_colors {
        let name = mtl_path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        writeln!(obj, "mtllib {name}").unwrap();
    }
    let mut base = 1usize;
    for g in groups {
        writeln!(obj, "g {}", g.name).unwrap();
        if let Some(c) = g.color {
            writeln!(obj, "usemtl {}", g.name).unwrap();
            writeln!(mtl, "newmtl {}\nKd {}\n", g.name, fmt_color(c)).unwrap();
        }
        for v in &g.mesh.vertices {
            writeln!(obj, "v {} {} {}", v[0], v[1], v[2]).unwrap();
        }
        for t in &g.mesh.triangles {
            let [a, b, c] = t.map(|i| i as usize + base);
            writeln!(obj, "f {a} {b} {c}").unwrap();
        }
        base += g.mesh.vertices.len();
    }
    std::fs::write(path, obj).map_err(|e| Error::io(path, e))?;
    if has_colors {
        std::fs::write(&mtl_path, mtl).map_err(|e| Error::io(&mtl_path, e))?;
    }
    Ok(())
}

fn obj_error(line: usize, reason: impl std::fmt::Display) -> Error {
    Error::Format {
        format: "OBJ",
        reason: format!("line {line}: {reason}"),
    }
}

/// Parse an OBJ file into its groups. Faces with more than three corners are
/// fan-triangulated; texture and normal indices are ignored. Material colors
/// are not resolved.
pub fn parse_obj(text: &str) -> Result<Vec<ObjGroup>> {
    let mut positions: Vec<[f64; 3]> = Vec::new();
    // (name, first vertex declared in the group, faces as global 0-based indices)
    let mut groups: Vec<(String, usize, Vec<[usize; 3]>)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let mut it = raw.split_whitespace();
        match it.next() {
            Some("v") => {
                let xs: Vec<f64> = it
                    .take(3)
                    .map(|s| s.parse::<f64>().map_err(|e| obj_error(line, e)))
                    .collect::<Result<_>>()?;
                if xs.len() != 3 {
                    return Err(obj_error(line, "vertex needs three coordinates"));
                }
                positions.push([xs[0], xs[1], xs[2]]);
            }
            Some("g") | Some("o") => {
                groups.push((it.collect::<Vec<_>>().join(" "), positions.len(), Vec::new()));
            }
            Some("f") => {
                let idx: Vec<usize> = it
                    .map(|tok| {
                        let first = tok.split('/').next().unwrap_or("");
                        let i: i64 = first.parse().map_err(|e| obj_error(line, e))?;
                        let resolved = if i < 0 { positions.len() as i64 + i } else { i - 1 };
                        if resolved < 0 || resolved as usize >= positions.len() {
                            return Err(obj_error(line, format!("vertex index {i} out of range")));
                        }
                        Ok(resolved as usize)
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(obj_error(line, "face needs at least three vertices"));
                }
                if groups.is_empty() {
                    groups.push(("default".into(), 0, Vec::new()));
                }
                let faces = &mut groups.last_mut().expect("group").2;
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    // A group owns the vertices declared after it, in file order; vertices it
    // borrows from elsewhere are appended.
    let ends: Vec<usize> = groups
        .iter()
        .skip(1)
        .map(|g| g.1)
        .chain(std::iter::once(positions.len()))
        .collect();
    Ok(groups
        .into_iter()
        .zip(ends)
        .map(|((name, start, faces), end)| {
            let mut mesh = Mesh {
                vertices: positions[start..end].to_vec(),
                triangles: Vec::new(),
            };
            let mut borrowed = std::collections::BTreeMap::new();
            for f in faces {
                let tri = f.map(|g| {
                    if (start..end).contains(&g) {
                        (g - start) as u32
                    } else {
                        *borrowed.entry(g).or_insert_with(|| {
                            mesh.vertices.push(positions[g]);
                            (mesh.vertices.len() - 1) as u32
                        })
                    }
                });
                mesh.triangles.push(tri);
            }
            ObjGroup { name, color: None, mesh }
        })
        .collect())
}

pub fn read_obj(path: &Path) -> Result<Vec<ObjGroup>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text)
}

/// Binary little-endian PLY with `float` positions and `int` triangle indices.
pub fn write_ply(mesh: &Mesh, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    write!(
        out,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.vertices.len(),
        mesh.triangles.len()
    )
    .expect("write to vec");
    for v in &mesh.vertices {
        for c in v {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    for t in &mesh.triangles {
        out.push(3);
        for i in t {
            out.extend_from_slice(&(*i as i32).to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn ply_error(reason: impl Into<String>) -> Error {
    Error::Format {
        format: "PLY",
        reason: reason.into(),
    }
}

/// Read the subset of binary PLY produced by [`write_ply`]: float `x y z`
/// vertices (extra float properties ignored) and polygon faces with a
/// `uchar` count and `int`/`uint` indices.
pub fn read_ply(path: &Path) -> Result<Mesh> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let marker = b"end_header\n";
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| ply_error("missing end_header"))?
        + marker.len();
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| ply_error("header is not UTF-8"))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(ply_error("missing ply magic"));
    }
    let mut n_vertices = 0usize;
    let mut n_faces = 0usize;
    let mut vertex_props = 0usize;
    let mut element = "";
    for line in lines {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", fmt, _] if *fmt != "binary_little_endian" => {
                return Err(ply_error(format!("unsupported format {fmt}")));
            }
            ["element", "vertex", n] => {
                element = "vertex";
                n_vertices = n.parse().map_err(|_| ply_error("bad vertex count"))?;
            }
            ["element", "face", n] => {
                element = "face";
                n_faces = n.parse().map_err(|_| ply_error("bad face count"))?;
            }
            ["element", other, _] => return Err(ply_error(format!("unsupported element {other}"))),
            ["property", "float", _] if element == "vertex" => vertex_props += 1,
            ["property", "list", "uchar", "int" | "uint", _] if element == "face" => {}
            ["property", ..] => return Err(ply_error(format!("unsupported property `{line}`"))),
            _ => {}
        }
    }
    if vertex_props < 3 {
        return Err(ply_error("vertices need x, y, z"));
    }
    let mut pos = end;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| ply_error("truncated body"))?;
        pos += n;
        Ok(s)
    };
    let mut mesh = Mesh::default();
    for _ in 0..n_vertices {
        let raw = take(4 * vertex_props)?;
        let f = |k: usize| f32::from_le_bytes(raw[4 * k..4 * k + 4].try_into().expect("4 bytes")) as f64;
        mesh.vertices.push([f(0), f(1), f(2)]);
    }
    for _ in 0..n_faces {
        let count = take(1)?[0] as usize;
        let raw = take(4 * count)?;
        let idx: Vec<u32> = raw
            .chunks_exact(4)
            .map(|b| i32::from_le_bytes(b.try_into().expect("4 bytes")) as u32)
            .collect();
        if idx.len() < 3 || idx.iter().any(|&i| i as usize >= n_vertices) {
            return Err(ply_error("face with fewer than 3 or out-of-range indices"));
        }
        for k in 1..idx.len() - 1 {
            mesh.triangles.push([idx[0], idx[k], idx[k + 1]]);
        }
    }
    Ok(mesh)
}
