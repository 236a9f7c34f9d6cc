//! ASCII PLY and Wavefront OBJ reading and writing.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;

use super::{MeshTopology, SurfaceMesh};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Ply,
    Obj,
}

impl MeshFormat {
    /// Guess from the file extension; anything but `.obj` is PLY.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("obj") => MeshFormat::Obj,
            _ => MeshFormat::Ply,
        }
    }
}

struct RawMesh {
    vertices: Vec<[f64; 3]>,
    faces: Vec<[usize; 3]>,
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_ply(text: &str) -> Result<RawMesh> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        Some((n, _)) => return Err(parse_err(n, "missing `ply` magic")),
        None => return Err(parse_err(0, "empty file")),
    }
    let mut n_vertices = None;
    let mut n_faces = 0usize;
    let mut vertex_props: Vec<String> = Vec::new();
    let mut current = "";
    let mut header_end = None;
    for (n, line) in lines.by_ref() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["format", "ascii", ..] => {}
            ["format", other, ..] => return Err(parse_err(n, format!("unsupported format `{other}`"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", "vertex", count] => {
                current = "vertex";
                n_vertices = Some(count.parse().map_err(|_| parse_err(n, "bad vertex count"))?);
            }
            ["element", "face", count] => {
                current = "face";
                n_faces = count.parse().map_err(|_| parse_err(n, "bad face count"))?;
            }
            ["element", ..] => current = "other",
            ["property", "list", ..] => {}
            ["property", _, name] => {
                if current == "vertex" {
                    vertex_props.push(name.to_string());
                }
            }
            ["end_header"] => {
                header_end = Some(n);
                break;
            }
            _ => return Err(parse_err(n, format!("unexpected header line `{line}`"))),
        }
    }
    let header_end = header_end.ok_or_else(|| parse_err(0, "missing end_header"))?;
    let n_vertices = n_vertices.ok_or_else(|| parse_err(header_end, "no vertex element"))?;
    let pos = |name: &str| {
        vertex_props
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| parse_err(header_end, format!("vertex property `{name}` missing")))
    };
    let (ix, iy, iz) = (pos("x")?, pos("y")?, pos("z")?);

    let mut body = lines.filter(|(_, l)| !l.is_empty());
    let mut vertices = Vec::with_capacity(n_vertices);
    for _ in 0..n_vertices {
        let (n, line) = body
            .next()
            .ok_or_else(|| parse_err(header_end, "truncated vertex list"))?;
        let values: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(n, "non-numeric vertex field"))?;
        if values.len() < vertex_props.len() {
            return Err(parse_err(n, "too few vertex fields"));
        }
        vertices.push([values[ix], values[iy], values[iz]]);
    }
    let mut faces = Vec::with_capacity(n_faces);
    for _ in 0..n_faces {
        let (n, line) = body
            .next()
            .ok_or_else(|| parse_err(header_end, "truncated face list"))?;
        let idx: Vec<usize> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(n, "non-integer face field"))?;
        if idx.len() != 4 || idx[0] != 3 {
            return Err(parse_err(n, "only triangle faces are supported"));
        }
        faces.push(checked_face(n, [idx[1], idx[2], idx[3]], n_vertices)?);
    }
    Ok(RawMesh { vertices, faces })
}

fn checked_face(line: usize, face: [usize; 3], n_vertices: usize) -> Result<[usize; 3]> {
    if let Some(i) = face.iter().find(|&&i| i >= n_vertices) {
        return Err(parse_err(
            line,
            format!("face index {i} out of range for {n_vertices} vertices"),
        ));
    }
    Ok(face)
}

fn parse_obj(text: &str) -> Result<RawMesh> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut face_lines = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let c: Vec<f64> = tokens
                    .take(3)
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| parse_err(n, "non-numeric vertex coordinate"))?;
                if c.len() != 3 {
                    return Err(parse_err(n, "vertex needs three coordinates"));
                }
                vertices.push([c[0], c[1], c[2]]);
            }
            Some("f") => {
                // `f 1/1/1 2/2/2 3/3/3` keeps only the position index.
                let idx: Vec<usize> = tokens
                    .map(|t| t.split('/').next().unwrap_or("").parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| parse_err(n, "bad face index"))?;
                if idx.len() != 3 || idx.contains(&0) {
                    return Err(parse_err(n, "faces must be triangles with 1-based indices"));
                }
                face_lines.push(n);
                faces.push([idx[0] - 1, idx[1] - 1, idx[2] - 1]);
            }
            _ => {}
        }
    }
    if vertices.is_empty() {
        return Err(parse_err(0, "no vertices"));
    }
    for (face, &n) in faces.iter_mut().zip(&face_lines) {
        *face = checked_face(n, *face, vertices.len())?;
    }
    Ok(RawMesh { vertices, faces })
}

fn read_raw(path: &Path) -> Result<RawMesh> {
    let text = fs::read_to_string(path)?;
    if text.trim().is_empty() {
        return Err(parse_err(0, "empty file"));
    }
    match MeshFormat::from_path(path) {
        MeshFormat::Ply => parse_ply(&text),
        MeshFormat::Obj => parse_obj(&text),
    }
}

fn vertex_array(raw: &RawMesh) -> Array2<f64> {
    Array2::from_shape_fn((raw.vertices.len(), 3), |(i, j)| raw.vertices[i][j])
}

/// Read a mesh and build its own topology.
pub fn read_mesh(path: &Path) -> Result<SurfaceMesh> {
    let raw = read_raw(path)?;
    let topology = MeshTopology::new(raw.faces.clone(), raw.vertices.len())?;
    SurfaceMesh::new(Arc::new(topology), vertex_array(&raw))
}

/// Read a mesh that must share the connectivity of `template`; the result
/// reuses the template topology.
pub fn read_mesh_with_template(path: &Path, template: &Arc<MeshTopology>) -> Result<SurfaceMesh> {
    let raw = read_raw(path)?;
    if raw.vertices.len() != template.vertex_count() || raw.faces != template.faces() {
        return Err(Error::TopologyMismatch(format!(
            "{} does not match the template connectivity",
            path.display()
        )));
    }
    SurfaceMesh::new(Arc::clone(template), vertex_array(&raw))
}

/// Write in the format implied by the extension.
pub fn write_mesh(mesh: &SurfaceMesh, path: &Path) -> Result<()> {
    match MeshFormat::from_path(path) {
        MeshFormat::Ply => write_ply(mesh, path),
        MeshFormat::Obj => write_obj(mesh, path),
    }
}

pub fn write_ply(mesh: &SurfaceMesh, path: &Path) -> Result<()> {
    fs::write(path, ply_text(mesh, None))?;
    Ok(())
}

/// PLY with an extra per-vertex `signed_disp_mm` property.
pub fn write_ply_with_scalar(mesh: &SurfaceMesh, scalar: &[f64], path: &Path) -> Result<()> {
    if scalar.len() != mesh.vertex_count() {
        return Err(Error::DimensionMismatch(format!(
            "{} scalars for {} vertices",
            scalar.len(),
            mesh.vertex_count()
        )));
    }
    fs::write(path, ply_text(mesh, Some(scalar)))?;
    Ok(())
}

fn ply_text(mesh: &SurfaceMesh, scalar: Option<&[f64]>) -> String {
    let faces = mesh.topology().faces();
    let mut s = String::with_capacity(64 * (mesh.vertex_count() + faces.len()));
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", mesh.vertex_count());
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    if scalar.is_some() {
        s.push_str("property double signed_disp_mm\n");
    }
    let _ = writeln!(s, "element face {}", faces.len());
    s.push_str("property list uchar int vertex_indices\nend_header\n");
    for (i, row) in mesh.vertices().rows().into_iter().enumerate() {
        // `{:?}` prints the shortest representation that round-trips.
        let _ = write!(s, "{:?} {:?} {:?}", row[0], row[1], row[2]);
        if let Some(d) = scalar {
            let _ = write!(s, " {:?}", d[i]);
        }
        s.push('\n');
    }
    for f in faces {
        let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
    }
    s
}

fn write_obj(mesh: &SurfaceMesh, path: &Path) -> Result<()> {
    let mut s = String::new();
    for row in mesh.vertices().rows() {
        let _ = writeln!(s, "v {:?} {:?} {:?}", row[0], row[1], row[2]);
    }
    for f in mesh.topology().faces() {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::make_icosphere;
    use crate::mesh::ved;

    #[test]
    fn ply_and_obj_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_icosphere(2);
        for name in ["a.ply", "a.obj"] {
            let p = dir.path().join(name);
            write_mesh(&m, &p).unwrap();
            let back = read_mesh(&p).unwrap();
            assert_eq!(back.topology().faces(), m.topology().faces());
            assert!(ved(&back, &m).unwrap() < 1e-6);
            let shared = read_mesh_with_template(&p, m.topology()).unwrap();
            assert!(Arc::ptr_eq(shared.topology(), m.topology()));
        }
    }

    #[test]
    fn scalar_property_is_skipped_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_icosphere(1);
        let p = dir.path().join("d.ply");
        let d: Vec<f64> = (0..m.vertex_count()).map(|i| i as f64 * 0.1).collect();
        write_ply_with_scalar(&m, &d, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains("property double signed_disp_mm"));
        assert!(ved(&read_mesh(&p).unwrap(), &m).unwrap() < 1e-12);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.ply");
        fs::write(&empty, "").unwrap();
        assert!(matches!(read_mesh(&empty), Err(Error::Parse { .. })));

        let bad = dir.path().join("bad.ply");
        fs::write(
            &bad,
            "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\n\
             element face 1\nproperty list uchar int vertex_indices\nend_header\n\
             0 0 0\n1 0 0\n0 1 0\n3 0 1 3\n",
        )
        .unwrap();
        assert!(matches!(read_mesh(&bad), Err(Error::Parse { line: 13, .. })));

        let bad_obj = dir.path().join("bad.obj");
        fs::write(&bad_obj, "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 4\n").unwrap();
        assert!(matches!(read_mesh(&bad_obj), Err(Error::Parse { line: 4, .. })));
    }

    #[test]
    fn template_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ply");
        write_mesh(&make_icosphere(1), &p).unwrap();
        let other = make_icosphere(2);
        assert!(matches!(
            read_mesh_with_template(&p, other.topology()),
            Err(Error::TopologyMismatch(_))
        ));
    }
}
