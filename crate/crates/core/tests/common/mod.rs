//! Oracles and fixtures shared by the integration tests and the acceptance
//! harness.
#![allow(dead_code)]

use csm_core::flows::{AffineNormalisation, CovariateFlows, FlowMechanism};
use csm_core::mesh::MeshTopology;
use csm_core::nn::ParamStore;
use nalgebra::DMatrix;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Connected graph built from triangles: every new vertex joins a triangle
/// with two earlier vertices, plus a few extra random triangles.
pub fn random_topology(rng: &mut ChaCha8Rng) -> MeshTopology {
    let n = rng.random_range(3..=50);
    let mut faces = vec![[0, 1, 2]];
    for i in 3..n {
        let a = rng.random_range(0..i);
        let mut b = rng.random_range(0..i);
        while b == a {
            b = rng.random_range(0..i);
        }
        faces.push([i, a, b]);
    }
    for _ in 0..rng.random_range(0..n) {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        let c = rng.random_range(0..n);
        if a != b && b != c && a != c {
            faces.push([a, b, c]);
        }
    }
    MeshTopology::new(faces, n).unwrap()
}

pub fn dense_normalised_laplacian(t: &MeshTopology) -> DMatrix<f64> {
    let n = t.vertex_count();
    let mut adj = DMatrix::<f64>::zeros(n, n);
    for f in t.faces() {
        for (i, j) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
            adj[(i, j)] = 1.0;
            adj[(j, i)] = 1.0;
        }
    }
    let deg: Vec<f64> = (0..n).map(|i| adj.row(i).sum()).collect();
    DMatrix::from_fn(n, n, |i, j| {
        let d = if i == j { 1.0 } else { 0.0 };
        d - adj[(i, j)] / (deg[i] * deg[j]).sqrt()
    })
}

pub fn chebyshev(k: usize, x: f64) -> f64 {
    let (mut a, mut b) = (1.0, x);
    match k {
        0 => a,
        _ => {
            for _ in 1..k {
                (a, b) = (b, 2.0 * x * b - a);
            }
            b
        }
    }
}

/// `sum_k U T_k(diag(lambda~)) U^T x theta_k` from a dense eigendecomposition.
pub fn spectral_oracle(t: &MeshTopology, x: &Array2<f64>, theta: &Array3<f64>) -> Array2<f64> {
    let n = t.vertex_count();
    let eig = dense_normalised_laplacian(t).symmetric_eigen();
    let u = &eig.eigenvectors;
    let lambda = t.lambda_max();
    let (k, f_in, f_out) = theta.dim();
    let xm = DMatrix::from_fn(n, f_in, |i, j| x[[i, j]]);
    let coeffs = u.transpose() * xm;
    let mut y = DMatrix::<f64>::zeros(n, f_out);
    for order in 0..k {
        let w = DMatrix::from_fn(f_in, f_out, |i, j| theta[[order, i, j]]);
        let filtered = DMatrix::from_fn(n, f_in, |r, c| {
            chebyshev(order, 2.0 * eig.eigenvalues[r] / lambda - 1.0) * coeffs[(r, c)]
        });
        y += u * filtered * w;
    }
    Array2::from_shape_fn((n, f_out), |(i, j)| y[(i, j)])
}

/// Flows with every parameter perturbed away from the identity.
pub fn random_flows(seed: u64) -> (ParamStore, CovariateFlows) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut flows = CovariateFlows::new(&mut store, &mut rng);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).mapv_inplace(|_| rng.random_range(-0.8..0.8));
    }
    flows.age.normalisation = AffineNormalisation::new(3.9, 0.2).unwrap();
    flows.brain.normalisation = AffineNormalisation::new(7.1, 0.1).unwrap();
    flows.structure.normalisation = AffineNormalisation::new(1.4, 0.15).unwrap();
    (store, flows)
}

pub fn contexts(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()
}

pub fn mechanisms(flows: &CovariateFlows) -> [&FlowMechanism; 3] {
    [&flows.age, &flows.brain, &flows.structure]
}

