use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::mesh::SurfaceMesh;
use crate::{Error, Result};

/// Linear shape model on flattened `3|V|` coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// Orthonormal rows, ordered by decreasing variance.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
}

/// Eigenvalues below this fraction of the largest count as numerically zero.
const RANK_TOLERANCE: f64 = 1e-12;

impl PcaModel {
    /// Full eigendecomposition of the sample covariance; keeps `k` modes
    /// (all `3|V|` when `None`).
    pub fn fit(meshes: &[&SurfaceMesh], k: Option<usize>) -> Result<Self> {
        let rows: Vec<Vec<f64>> = meshes.iter().map(|m| m.flatten()).collect();
        Self::fit_flat(&rows, k)
    }

    pub fn fit_flat(rows: &[Vec<f64>], k: Option<usize>) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::EmptyInput("PCA needs at least two samples".into()));
        }
        let dim = rows[0].len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch("PCA samples differ in size".into()));
        }
        let n = rows.len();
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, x) in mean.iter_mut().zip(r) {
                *m += x / n as f64;
            }
        }
        let centred = DMatrix::from_fn(n, dim, |i, j| rows[i][j] - mean[j]);
        let cov = (centred.transpose() * &centred) / (n - 1) as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let keep = k.unwrap_or(dim).min(dim);
        let components = order[..keep]
            .iter()
            .map(|&j| {
                let col = eig.eigenvectors.column(j);
                // Sign convention: largest-magnitude entry positive.
                let pivot = col.iter().copied().fold(0.0f64, |p, x| if x.abs() > p.abs() { x } else { p });
                let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
                col.iter().map(|x| sign * x).collect()
            })
            .collect();
        let explained_variance = order[..keep].iter().map(|&j| eig.eigenvalues[j].max(0.0)).collect();
        Ok(Self {
            mean,
            components,
            explained_variance,
        })
    }

    pub fn modes(&self) -> usize {
        self.components.len()
    }

    /// Number of modes with non-negligible variance.
    pub fn rank(&self) -> usize {
        let top = self.explained_variance.first().copied().unwrap_or(0.0);
        self.explained_variance.iter().filter(|&&l| l > top * RANK_TOLERANCE).count()
    }

    /// Projection on the leading `k` modes.
    pub fn project(&self, flat: &[f64], k: usize) -> Result<Vec<f64>> {
        if flat.len() != self.mean.len() {
            return Err(Error::DimensionMismatch("sample size differs from PCA mean".into()));
        }
        if k > self.modes() {
            return Err(Error::DimensionMismatch(format!("{k} modes requested, {} fitted", self.modes())));
        }
        let centred: Vec<f64> = flat.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        Ok(self.components[..k]
            .iter()
            .map(|c| c.iter().zip(&centred).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn reconstruct_flat(&self, flat: &[f64], k: usize) -> Result<Vec<f64>> {
        let coeffs = self.project(flat, k)?;
        let mut out = self.mean.clone();
        for (c, comp) in coeffs.iter().zip(&self.components) {
            for (o, x) in out.iter_mut().zip(comp) {
                *o += c * x;
            }
        }
        Ok(out)
    }

    pub fn reconstruct(&self, mesh: &SurfaceMesh, k: usize) -> Result<SurfaceMesh> {
        let flat = self.reconstruct_flat(&mesh.flatten(), k)?;
        SurfaceMesh::from_flat(std::sync::Arc::clone(mesh.topology()), &flat)
    }

    /// `lambda_k / sum_j lambda_j` for every fitted mode.
    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        let total: f64 = self.explained_variance.iter().sum();
        if total <= 0.0 {
            return vec![0.0; self.modes()];
        }
        self.explained_variance.iter().map(|l| l / total).collect()
    }
}
