use super::SurfaceMesh;
use crate::{Error, Result};

/// Vertex Euclidean distance: mean per-vertex distance between two meshes
/// on the same topology.
pub fn ved(x: &SurfaceMesh, y: &SurfaceMesh) -> Result<f64> {
    if !x.same_topology(y) {
        return Err(Error::TopologyMismatch("VED needs a shared topology".into()));
    }
    Ok(ved_flat(x.vertices().as_slice().unwrap(), y.vertices().as_slice().unwrap()))
}

/// [`ved`] on flat `[x0, y0, z0, x1, ...]` buffers of equal length.
pub(crate) fn ved_flat(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let n = x.len() / 3;
    let total: f64 = x
        .chunks_exact(3)
        .zip(y.chunks_exact(3))
        .map(|(a, b)| {
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
        })
        .sum();
    total / n as f64
}

/// Symmetric mean nearest-neighbour distance between the vertex sets.
pub fn chamfer_distance(x: &SurfaceMesh, y: &SurfaceMesh) -> f64 {
    let px = x.vertices().as_slice().unwrap();
    let py = y.vertices().as_slice().unwrap();
    (one_sided_chamfer(px, py) + one_sided_chamfer(py, px)) / 2.0
}

fn one_sided_chamfer(from: &[f64], to: &[f64]) -> f64 {
    let n = from.len() / 3;
    from.chunks_exact(3)
        .map(|a| {
            to.chunks_exact(3)
                .map(|b| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum::<f64>()
        / n as f64
}

/// Mean distance of the vertices from their centroid.
pub fn mean_radius(mesh: &SurfaceMesh) -> f64 {
    let v = mesh.vertices();
    let n = v.nrows() as f64;
    let c = [
        v.column(0).sum() / n,
        v.column(1).sum() / n,
        v.column(2).sum() / n,
    ];
    v.rows()
        .into_iter()
        .map(|r| ((r[0] - c[0]).powi(2) + (r[1] - c[1]).powi(2) + (r[2] - c[2]).powi(2)).sqrt())
        .sum::<f64>()
        / n
}

/// Area-weighted unit vertex normals, `|V| x 3`.
pub fn vertex_normals(mesh: &SurfaceMesh) -> Vec<[f64; 3]> {
    let v = mesh.vertices();
    let mut normals = vec![[0.0; 3]; mesh.vertex_count()];
    for f in mesh.topology().faces() {
        let p = |i: usize| [v[[f[i], 0]], v[[f[i], 1]], v[[f[i], 2]]];
        let (a, b, c) = (p(0), p(1), p(2));
        let e1 = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let e2 = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let n = [
            e1[1] * e2[2] - e1[2] * e2[1],
            e1[2] * e2[0] - e1[0] * e2[2],
            e1[0] * e2[1] - e1[1] * e2[0],
        ];
        for &i in f {
            for k in 0..3 {
                normals[i][k] += n[k];
            }
        }
    }
    for n in &mut normals {
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        if len > 0.0 {
            n.iter_mut().for_each(|c| *c /= len);
        }
    }
    normals
}

/// Per-vertex displacement from `reference` to `moved` projected on the
/// reference normals; positive means outward.
pub fn signed_displacement(reference: &SurfaceMesh, moved: &SurfaceMesh) -> Result<Vec<f64>> {
    if !reference.same_topology(moved) {
        return Err(Error::TopologyMismatch("displacement needs a shared topology".into()));
    }
    let (r, m) = (reference.vertices(), moved.vertices());
    Ok(vertex_normals(reference)
        .iter()
        .enumerate()
        .map(|(i, n)| (0..3).map(|k| (m[[i, k]] - r[[i, k]]) * n[k]).sum())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::make_icosphere;
    use crate::mesh::build_topology;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use std::sync::Arc;

    #[test]
    fn inflation_has_positive_displacement() {
        let m = make_icosphere(2);
        for n in vertex_normals(&m).iter().zip(m.vertices().rows()) {
            let (n, p) = n;
            assert!((n[0] * p[0] + n[1] * p[1] + n[2] * p[2]) > 0.99);
        }
        let grown = SurfaceMesh::new(Arc::clone(m.topology()), m.vertices() * 1.5).unwrap();
        let d = signed_displacement(&m, &grown).unwrap();
        assert!(d.iter().all(|&x| x > 0.49 && x <= 0.5 + 1e-12));
        assert!(signed_displacement(&m, &m).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn ved_examples() {
        let m = make_icosphere(1);
        assert_eq!(ved(&m, &m).unwrap(), 0.0);
        let shifted = m.vertices() + &array![[1.0, 0.0, 0.0]];
        let s = SurfaceMesh::new(m.topology().clone(), shifted).unwrap();
        assert!((ved(&m, &s).unwrap() - 1.0).abs() < 1e-12);

        // Two-vertex toy: offsets (3, 4, 0) and (0, 0, 0).
        assert!((ved_flat(&[0.0; 6], &[3.0, 4.0, 0.0, 0.0, 0.0, 0.0]) - 2.5).abs() < 1e-15);
    }

    #[test]
    fn ved_rejects_other_topology() {
        let a = make_icosphere(0);
        let b = make_icosphere(1);
        assert!(ved(&a, &b).is_err());
    }

    #[test]
    fn chamfer_is_zero_on_identical_sets() {
        let m = make_icosphere(1);
        assert_eq!(chamfer_distance(&m, &m), 0.0);
        assert!((mean_radius(&m) - 1.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn ved_is_a_metric(
            a in prop::collection::vec(-5.0f64..5.0, 12),
            b in prop::collection::vec(-5.0f64..5.0, 12),
            c in prop::collection::vec(-5.0f64..5.0, 12),
        ) {
            let t = Arc::new(build_topology(vec![[0, 1, 2], [0, 2, 3], [0, 3, 1], [1, 3, 2]], 4).unwrap());
            let mk = |v: &Vec<f64>| SurfaceMesh::new(t.clone(), Array2::from_shape_vec((4, 3), v.clone()).unwrap()).unwrap();
            let (x, y, z) = (mk(&a), mk(&b), mk(&c));
            let dxy = ved(&x, &y).unwrap();
            prop_assert_eq!(ved(&x, &x).unwrap(), 0.0);
            prop_assert!((dxy - ved(&y, &x).unwrap()).abs() < 1e-12);
            prop_assert!(dxy <= ved(&x, &z).unwrap() + ved(&z, &y).unwrap() + 1e-12);
            if a != b { prop_assert!(dxy > 0.0); }
        }
    }
}
