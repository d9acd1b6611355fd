//! Wavefront OBJ subset: `v x y z` and triangular `f i j k` records.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

use super::{Mesh, Vec3};

/// Parsed OBJ plus the number of ignored record lines (`vn`, `vt`, `o`, ...).
#[derive(Clone, Debug)]
pub struct ObjFile {
    pub mesh: Mesh,
    pub ignored_records: usize,
}

pub fn load_obj(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let obj = parse_obj(&text, path)?;
    if obj.ignored_records > 0 {
        log::warn!("{}: ignored {} unsupported records", path.display(), obj.ignored_records);
    }
    Ok(obj.mesh)
}

pub fn parse_obj(text: &str, path: &Path) -> Result<ObjFile> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut vertices = Vec::new();
    let mut raw_faces: Vec<(usize, [i64; 3])> = Vec::new();
    let mut ignored = 0;

    for (ln, line) in text.lines().enumerate() {
        let ln = ln + 1;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("v") => {
                let coords: Vec<&str> = tok.collect();
                if coords.len() < 3 {
                    return Err(err(ln, format!("vertex needs 3 coordinates, got {}", coords.len())));
                }
                let mut p = [0.0; 3];
                for (k, c) in coords.iter().take(3).enumerate() {
                    p[k] = c
                        .parse()
                        .map_err(|_| err(ln, format!("bad coordinate {c:?}")))?;
                }
                vertices.push(Vec3::new(p[0], p[1], p[2]));
            }
            Some("f") => {
                let idx: Vec<&str> = tok.collect();
                if idx.len() != 3 {
                    return Err(err(ln, format!("only triangles are supported, face has {} indices", idx.len())));
                }
                let mut f = [0i64; 3];
                for (k, s) in idx.iter().enumerate() {
                    let head = s.split('/').next().unwrap_or("");
                    f[k] = head
                        .parse()
                        .map_err(|_| err(ln, format!("bad face index {s:?}")))?;
                    if f[k] == 0 {
                        return Err(err(ln, "face index 0 (OBJ indices are 1-based)".into()));
                    }
                }
                raw_faces.push((ln, f));
            }
            Some(_) => ignored += 1,
            None => {}
        }
    }

    let n = vertices.len() as i64;
    let mut faces = Vec::with_capacity(raw_faces.len());
    for (ln, f) in raw_faces {
        let mut out = [0usize; 3];
        for k in 0..3 {
            let i = if f[k] > 0 { f[k] - 1 } else { n + f[k] };
            if i < 0 || i >= n {
                return Err(err(ln, format!("face index {} out of range (1..={n})", f[k])));
            }
            out[k] = i as usize;
        }
        if out[0] == out[1] || out[1] == out[2] || out[0] == out[2] {
            return Err(err(ln, format!("degenerate face {:?}", f)));
        }
        faces.push(out);
    }
    Ok(ObjFile {
        mesh: Mesh::new(vertices, faces)?,
        ignored_records: ignored,
    })
}

/// OBJ text with shortest round-trip coordinates; vertices first, then faces.
pub fn write_obj(mesh: &Mesh) -> String {
    let mut s = String::with_capacity(mesh.vertex_count() * 40 + mesh.face_count() * 20);
    for v in mesh.vertices() {
        let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
    }
    for f in mesh.faces() {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

pub fn save_obj(mesh: &Mesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_obj(mesh)).map_err(|e| Error::io(path, e))
}
