//! Least-squares similarity alignment (Kabsch–Umeyama).

use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;

use super::SurfaceMesh;
use crate::{Error, Result};

/// `x -> scale * rotation * x + translation`.
#[derive(Debug, Clone, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, vertices: &Array2<f64>) -> Array2<f64> {
        let mut out = vertices.clone();
        for mut row in out.rows_mut() {
            let p = self.scale * self.rotation * Vector3::new(row[0], row[1], row[2]) + self.translation;
            row[0] = p.x;
            row[1] = p.y;
            row[2] = p.z;
        }
        out
    }
}

fn to_points(v: &Array2<f64>) -> Vec<Vector3<f64>> {
    v.rows()
        .into_iter()
        .map(|r| Vector3::new(r[0], r[1], r[2]))
        .collect()
}

/// Transform minimising `sum |s R src_i + t - dst_i|^2` with `det R = +1`.
/// Without `with_scale` the scale is fixed to one (rigid alignment).
pub fn similarity_transform(src: &Array2<f64>, dst: &Array2<f64>, with_scale: bool) -> Result<Similarity> {
    if src.dim() != dst.dim() || src.ncols() != 3 {
        return Err(Error::TopologyMismatch(format!(
            "cannot align {:?} to {:?}",
            src.dim(),
            dst.dim()
        )));
    }
    let p = to_points(src);
    let q = to_points(dst);
    let n = p.len() as f64;
    let mu_p = p.iter().sum::<Vector3<f64>>() / n;
    let mu_q = q.iter().sum::<Vector3<f64>>() / n;
    let var_p = p.iter().map(|x| (x - mu_p).norm_squared()).sum::<f64>() / n;
    if var_p <= f64::EPSILON * (1.0 + mu_p.norm_squared()) {
        return Err(Error::DegenerateAlignment);
    }
    let cov = p
        .iter()
        .zip(&q)
        .map(|(x, y)| (y - mu_q) * (x - mu_p).transpose())
        .sum::<Matrix3<f64>>()
        / n;
    let svd = cov.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let mut d = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        // Singular values are not sorted; flip the smallest.
        let smallest = svd.singular_values.imin();
        d[(smallest, smallest)] = -1.0;
    }
    let rotation = u * d * v_t;
    let scale = if with_scale {
        (Matrix3::from_diagonal(&svd.singular_values) * d).trace() / var_p
    } else {
        1.0
    };
    let translation = mu_q - scale * rotation * mu_p;
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

/// Register `mesh` onto `template` with the optimal similarity transform.
pub fn kabsch_umeyama_align(mesh: &SurfaceMesh, template: &SurfaceMesh) -> Result<SurfaceMesh> {
    if !mesh.same_topology(template) {
        return Err(Error::TopologyMismatch("alignment needs vertex correspondence".into()));
    }
    let t = similarity_transform(mesh.vertices(), template.vertices(), true)?;
    SurfaceMesh::new(mesh.topology().clone(), t.apply(mesh.vertices()))
}
