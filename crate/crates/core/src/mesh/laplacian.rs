use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative residual at which power iteration stops.
pub const POWER_ITERATION_TOLERANCE: f64 = 1e-6;
const POWER_ITERATION_MAX_STEPS: usize = 200_000;
const POWER_ITERATION_SEED: u64 = 0x1a9_1ac1a;

/// Square sparse matrix in compressed-row form.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let n = rows.len();
        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(j, _)| j);
            for (j, w) in row {
                indices.push(j);
                values.push(w);
            }
            indptr.push(indices.len());
        }
        Self {
            n,
            indptr,
            indices,
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.indptr[i]..self.indptr[i + 1];
        self.indices[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).map(|(j, w)| w * x[j]).sum())
            .collect()
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut d = Array2::zeros((self.n, self.n));
        for i in 0..self.n {
            for (j, w) in self.row(i) {
                d[[i, j]] += w;
            }
        }
        d
    }
}

pub(crate) fn adjacency(faces: &[[usize; 3]], n: usize) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for f in faces {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            adj[a].push(b);
            adj[b].push(a);
        }
    }
    for row in &mut adj {
        row.sort_unstable();
        row.dedup();
    }
    adj
}

pub(crate) fn combinatorial_laplacian(adj: &[Vec<usize>]) -> CsrMatrix {
    CsrMatrix::from_rows(
        adj.iter()
            .enumerate()
            .map(|(i, nb)| {
                let mut row: Vec<(usize, f64)> = nb.iter().map(|&j| (j, -1.0)).collect();
                row.push((i, nb.len() as f64));
                row
            })
            .collect(),
    )
}

pub(crate) fn normalized_laplacian(adj: &[Vec<usize>]) -> CsrMatrix {
    let inv_sqrt_deg: Vec<f64> = adj
        .iter()
        .map(|nb| if nb.is_empty() { 0.0 } else { 1.0 / (nb.len() as f64).sqrt() })
        .collect();
    CsrMatrix::from_rows(
        adj.iter()
            .enumerate()
            .map(|(i, nb)| {
                let mut row: Vec<(usize, f64)> = nb
                    .iter()
                    .map(|&j| (j, -inv_sqrt_deg[i] * inv_sqrt_deg[j]))
                    .collect();
                // Isolated vertices get an all-zero row.
                row.push((i, if nb.is_empty() { 0.0 } else { 1.0 }));
                row
            })
            .collect(),
    )
}

/// `2 L / lambda - I`.
pub(crate) fn rescale(l: &CsrMatrix, lambda: f64) -> CsrMatrix {
    let k = 2.0 / lambda;
    CsrMatrix::from_rows(
        (0..l.dim())
            .map(|i| {
                let mut row: Vec<(usize, f64)> = l.row(i).map(|(j, w)| (j, k * w)).collect();
                match row.iter_mut().find(|(j, _)| *j == i) {
                    Some(d) => d.1 -= 1.0,
                    None => row.push((i, -1.0)),
                }
                row
            })
            .collect(),
    )
}

/// Largest eigenvalue of a symmetric positive semi-definite matrix with
/// spectrum in `[0, 2]`.
///
/// Iterates until the residual `|Lx - rho x|` falls below `tol * rho` and
/// returns `rho + |Lx - rho x|`, which bounds the top eigenvalue from above
/// once the iterate is dominated by the top eigenspace. The rescaled
/// operator therefore never leaves `[-1, 1]`.
pub fn lambda_max_power_iteration(l: &CsrMatrix, tol: f64) -> f64 {
    let n = l.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_ITERATION_SEED);
    let mut x: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    normalise(&mut x);
    let mut estimate = 0.0;
    for _ in 0..POWER_ITERATION_MAX_STEPS {
        let y = l.mul_vec(&x);
        let rho: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let residual = y
            .iter()
            .zip(&x)
            .map(|(yi, xi)| (yi - rho * xi).powi(2))
            .sum::<f64>()
            .sqrt();
        estimate = rho + residual;
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if residual <= tol * rho.abs() || norm == 0.0 {
            break;
        }
        x = y.into_iter().map(|v| v / norm).collect();
    }
    estimate.min(2.0)
}

fn normalise(x: &mut [f64]) {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    x.iter_mut().for_each(|v| *v /= norm);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_topology;
    use nalgebra::DMatrix;

    fn dense_eigenvalues(m: &Array2<f64>) -> Vec<f64> {
        let n = m.nrows();
        let d = DMatrix::from_fn(n, n, |i, j| m[[i, j]]);
        let mut ev: Vec<f64> = d.symmetric_eigen().eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    #[test]
    fn lambda_two_gives_l_minus_identity() {
        let l = normalized_laplacian(&adjacency(&[[0, 1, 2]], 3));
        let scaled = rescale(&l, 2.0).to_dense();
        let expected = l.to_dense() - Array2::<f64>::eye(3);
        assert!((scaled - expected).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn regular_graph_does_not_break_power_iteration() {
        // Triangle: 2-regular, spectrum {0, 1.5, 1.5}.
        let t = build_topology(vec![[0, 1, 2]], 3).unwrap();
        assert!((t.lambda_max() - 1.5).abs() < 1e-5);
        assert!(t.lambda_max() >= 1.5 - 1e-12);
    }

    #[test]
    fn constant_vector_maps_to_scaled_constant() {
        // L * D^{1/2} 1 = 0; on a regular graph D^{1/2} 1 is constant.
        let mesh = crate::cohort::make_icosphere(0);
        let t = mesh.topology();
        let ones = vec![1.0; t.vertex_count()];
        let out = t.scale_laplacian().mul_vec(&ones);
        assert!(out.iter().all(|v| (v + 1.0).abs() < 1e-12));
    }

    #[test]
    fn power_iteration_bounds_dense_spectrum() {
        let mesh = crate::cohort::make_icosphere(1);
        let t = mesh.topology();
        let ev = dense_eigenvalues(&t.laplacian().to_dense());
        let top = *ev.last().unwrap();
        assert!(t.lambda_max() >= top - 1e-12);
        assert!((t.lambda_max() - top) / top < 1e-5);
        let scaled = dense_eigenvalues(&t.scale_laplacian().to_dense());
        assert!(scaled.iter().all(|e| e.abs() <= 1.0 + 1e-9));
    }
}
