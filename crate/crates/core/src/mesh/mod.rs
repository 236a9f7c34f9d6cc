//! Triangle meshes on a fixed shared triangulation, the spectral operators
//! defined on them, and the geometric utilities used by the shape model.

mod align;
mod chebyshev;
mod io;
mod laplacian;
mod metrics;
mod simplify;

use std::sync::Arc;

use ndarray::Array2;
use sha2::{Digest, Sha256};

pub use align::{kabsch_umeyama_align, similarity_transform, Similarity};
pub use chebyshev::{
    cheb_conv, cheb_filter, chebyshev_basis, chebyshev_basis_adjoint, gather_rows,
};
pub use io::{read_mesh, read_mesh_with_template, write_mesh, write_ply, write_ply_with_scalar, MeshFormat};
pub use laplacian::{lambda_max_power_iteration, CsrMatrix, POWER_ITERATION_TOLERANCE};
pub use metrics::{chamfer_distance, mean_radius, signed_displacement, ved, vertex_normals};
pub(crate) use metrics::ved_flat;
pub use simplify::{
    quadric_simplify, replay_contractions, unsimplify, Contraction, SimplificationHierarchy,
    SimplificationLevel,
};

use crate::{Error, Result};

/// Connectivity shared by every mesh of a cohort, with its cached spectral
/// operators.
#[derive(Debug, Clone)]
pub struct MeshTopology {
    faces: Vec<[usize; 3]>,
    vertex_count: usize,
    laplacian: CsrMatrix,
    lambda_max: f64,
    scaled: Arc<CsrMatrix>,
}

impl PartialEq for MeshTopology {
    fn eq(&self, other: &Self) -> bool {
        self.vertex_count == other.vertex_count && self.faces == other.faces
    }
}

impl MeshTopology {
    /// Validate faces and compute the normalised Laplacian and its largest
    /// eigenvalue.
    pub fn new(faces: Vec<[usize; 3]>, vertex_count: usize) -> Result<Self> {
        if vertex_count == 0 {
            return Err(Error::InvalidTopology("vertex count must be positive".into()));
        }
        if faces.is_empty() {
            return Err(Error::InvalidTopology("mesh has no faces".into()));
        }
        for (fi, face) in faces.iter().enumerate() {
            if let Some(&index) = face.iter().find(|&&i| i >= vertex_count) {
                return Err(Error::IndexOutOfRange {
                    face: fi,
                    index,
                    vertex_count,
                });
            }
            if face[0] == face[1] || face[1] == face[2] || face[0] == face[2] {
                return Err(Error::DegenerateFace { face: fi });
            }
        }
        let adjacency = laplacian::adjacency(&faces, vertex_count);
        let laplacian = laplacian::normalized_laplacian(&adjacency);
        let lambda_max = lambda_max_power_iteration(&laplacian, POWER_ITERATION_TOLERANCE);
        let scaled = Arc::new(laplacian::rescale(&laplacian, lambda_max));
        Ok(Self {
            faces,
            vertex_count,
            laplacian,
            lambda_max,
            scaled,
        })
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    /// Normalised graph Laplacian `I - D^{-1/2} A D^{-1/2}`.
    pub fn laplacian(&self) -> &CsrMatrix {
        &self.laplacian
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    /// `2 L / lambda_max - I`, spectrum in `[-1, 1]`.
    pub fn scale_laplacian(&self) -> Arc<CsrMatrix> {
        Arc::clone(&self.scaled)
    }

    /// Combinatorial Laplacian `D - A` (rows sum to zero).
    pub fn combinatorial_laplacian(&self) -> CsrMatrix {
        laplacian::combinatorial_laplacian(&laplacian::adjacency(&self.faces, self.vertex_count))
    }

    /// Sorted neighbour lists derived from the faces.
    pub fn neighbours(&self) -> Vec<Vec<usize>> {
        laplacian::adjacency(&self.faces, self.vertex_count)
    }

    /// Stable content hash of the connectivity, used to match checkpoints to
    /// templates.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.vertex_count as u64).to_le_bytes());
        for f in &self.faces {
            for &i in f {
                hasher.update((i as u64).to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Convenience wrapper for [`MeshTopology::new`].
pub fn build_topology(faces: Vec<[usize; 3]>, vertex_count: usize) -> Result<MeshTopology> {
    MeshTopology::new(faces, vertex_count)
}

/// Vertex positions (millimetres) on a shared topology.
#[derive(Debug, Clone)]
pub struct SurfaceMesh {
    topology: Arc<MeshTopology>,
    vertices: Array2<f64>,
}

impl SurfaceMesh {
    pub fn new(topology: Arc<MeshTopology>, vertices: Array2<f64>) -> Result<Self> {
        if vertices.dim() != (topology.vertex_count(), 3) {
            return Err(Error::DimensionMismatch(format!(
                "vertex array {:?}, expected ({}, 3)",
                vertices.dim(),
                topology.vertex_count()
            )));
        }
        if vertices.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mesh vertices".into()));
        }
        Ok(Self { topology, vertices })
    }

    /// Build from a flat `3|V|` vector laid out `[x0, y0, z0, x1, ...]`.
    pub fn from_flat(topology: Arc<MeshTopology>, flat: &[f64]) -> Result<Self> {
        let n = topology.vertex_count();
        if flat.len() != 3 * n {
            return Err(Error::DimensionMismatch(format!(
                "flat vector of length {}, expected {}",
                flat.len(),
                3 * n
            )));
        }
        let vertices = Array2::from_shape_vec((n, 3), flat.to_vec()).expect("shape checked");
        Self::new(topology, vertices)
    }

    pub fn topology(&self) -> &Arc<MeshTopology> {
        &self.topology
    }

    pub fn vertices(&self) -> &Array2<f64> {
        &self.vertices
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.nrows()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.vertices.iter().copied().collect()
    }

    pub fn same_topology(&self, other: &SurfaceMesh) -> bool {
        Arc::ptr_eq(&self.topology, &other.topology) || *self.topology == *other.topology
    }
}
