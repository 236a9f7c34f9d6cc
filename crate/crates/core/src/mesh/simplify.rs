//! Quadric-error edge-collapse simplification and the vertex transfer maps
//! between hierarchy levels.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};
use std::sync::Arc;

use nalgebra::{Matrix4, Vector4};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{MeshTopology, SurfaceMesh};
use crate::{Error, Result};

const QUADRIC_REGULARISER: f64 = 1e-9;
const MINIMUM_VERTICES: usize = 4;

/// One edge collapse `(kept, removed) -> target`, indices in the fine level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contraction {
    pub error: f64,
    pub target: [f64; 3],
    pub kept: usize,
    pub removed: usize,
}

/// One simplification step between a fine and a coarse topology.
#[derive(Debug, Clone)]
pub struct SimplificationLevel {
    pub factor: f64,
    pub fine: Arc<MeshTopology>,
    pub coarse: Arc<MeshTopology>,
    pub contractions: Vec<Contraction>,
    /// Coarse vertex `i` is fine vertex `survivors[i]`.
    pub survivors: Arc<Vec<usize>>,
    /// Fine vertex `j` collapsed into coarse vertex `parent[j]`.
    pub parent: Arc<Vec<usize>>,
}

impl SimplificationLevel {
    /// Restrict fine-level features to the surviving vertices.
    pub fn transfer_down(&self, fine: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if fine.nrows() != self.fine.vertex_count() {
            return Err(Error::DimensionMismatch(format!(
                "{} feature rows for a {}-vertex level",
                fine.nrows(),
                self.fine.vertex_count()
            )));
        }
        Ok(gather(fine, &self.survivors))
    }
}

fn gather(x: ArrayView2<'_, f64>, index: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((index.len(), x.ncols()));
    for (i, &src) in index.iter().enumerate() {
        out.row_mut(i).assign(&x.row(src));
    }
    out
}

/// Reverse the contractions: every fine vertex takes the feature of the
/// coarse vertex it was collapsed into.
pub fn unsimplify(coarse: ArrayView2<'_, f64>, level: &SimplificationLevel) -> Result<Array2<f64>> {
    if coarse.nrows() != level.coarse.vertex_count() {
        return Err(Error::DimensionMismatch(format!(
            "{} feature rows for a {}-vertex coarse level",
            coarse.nrows(),
            level.coarse.vertex_count()
        )));
    }
    Ok(gather(coarse, &level.parent))
}

/// Ordered list of levels from finest to coarsest.
#[derive(Debug, Clone)]
pub struct SimplificationHierarchy {
    pub levels: Vec<SimplificationLevel>,
}

impl SimplificationHierarchy {
    pub fn build(mesh: &SurfaceMesh, factors: &[f64]) -> Result<Self> {
        let mut levels = Vec::with_capacity(factors.len());
        let mut current = mesh.clone();
        for &factor in factors {
            let (coarse, level) = quadric_simplify(&current, factor)?;
            levels.push(level);
            current = coarse;
        }
        Ok(Self { levels })
    }

    /// Vertex counts from finest to coarsest.
    pub fn vertex_counts(&self) -> Vec<usize> {
        let mut counts: Vec<usize> = self.levels.iter().map(|l| l.fine.vertex_count()).collect();
        if let Some(last) = self.levels.last() {
            counts.push(last.coarse.vertex_count());
        }
        counts
    }

    /// Topology at depth `d` (0 = finest).
    pub fn topology(&self, depth: usize) -> &Arc<MeshTopology> {
        if depth == 0 {
            &self.levels[0].fine
        } else {
            &self.levels[depth - 1].coarse
        }
    }
}

type Quadric = Matrix4<f64>;

fn face_quadric(p: [[f64; 3]; 3]) -> Quadric {
    let e1 = [p[1][0] - p[0][0], p[1][1] - p[0][1], p[1][2] - p[0][2]];
    let e2 = [p[2][0] - p[0][0], p[2][1] - p[0][1], p[2][2] - p[0][2]];
    let n = [
        e1[1] * e2[2] - e1[2] * e2[1],
        e1[2] * e2[0] - e1[0] * e2[2],
        e1[0] * e2[1] - e1[1] * e2[0],
    ];
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    if len == 0.0 {
        return Quadric::zeros();
    }
    let n = [n[0] / len, n[1] / len, n[2] / len];
    let d = -(n[0] * p[0][0] + n[1] * p[0][1] + n[2] * p[0][2]);
    let plane = Vector4::new(n[0], n[1], n[2], d);
    plane * plane.transpose()
}

fn quadric_error(q: &Quadric, p: [f64; 3]) -> f64 {
    let v = Vector4::new(p[0], p[1], p[2], 1.0);
    (v.transpose() * (q + Quadric::identity() * QUADRIC_REGULARISER) * v)[(0, 0)]
}

#[derive(Debug, Clone)]
struct Candidate {
    error: f64,
    a: usize,
    b: usize,
    target: [f64; 3],
    stamp: (u64, u64),
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate {
    // Reversed so BinaryHeap pops the smallest (error, a, b).
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .error
            .total_cmp(&self.error)
            .then_with(|| other.a.cmp(&self.a))
            .then_with(|| other.b.cmp(&self.b))
    }
}

/// Mutable collapse state shared by the greedy simplifier and log replay.
struct CollapseState {
    positions: Vec<[f64; 3]>,
    faces: Vec<[usize; 3]>,
    face_alive: Vec<bool>,
    incident: Vec<BTreeSet<usize>>,
    alive: Vec<bool>,
    merged_into: Vec<usize>,
    live_vertices: usize,
}

impl CollapseState {
    fn new(mesh: &SurfaceMesh) -> Self {
        let n = mesh.vertex_count();
        let faces = mesh.topology().faces().to_vec();
        let mut incident = vec![BTreeSet::new(); n];
        for (fi, f) in faces.iter().enumerate() {
            for &v in f {
                incident[v].insert(fi);
            }
        }
        let positions = mesh
            .vertices()
            .rows()
            .into_iter()
            .map(|r| [r[0], r[1], r[2]])
            .collect();
        Self {
            positions,
            face_alive: vec![true; faces.len()],
            faces,
            incident,
            alive: vec![true; n],
            merged_into: (0..n).collect(),
            live_vertices: n,
        }
    }

    fn neighbours(&self, v: usize) -> BTreeSet<usize> {
        self.incident[v]
            .iter()
            .flat_map(|&fi| self.faces[fi])
            .filter(|&u| u != v)
            .collect()
    }

    /// Edge collapse is safe when the shared neighbours are exactly the
    /// apexes of the faces containing the edge.
    fn link_condition(&self, a: usize, b: usize) -> bool {
        let na = self.neighbours(a);
        let nb = self.neighbours(b);
        let common = na.intersection(&nb).count();
        let shared_faces = self.incident[a].intersection(&self.incident[b]).count();
        common == shared_faces && self.live_vertices > MINIMUM_VERTICES
    }

    fn contract(&mut self, kept: usize, removed: usize, target: [f64; 3]) {
        self.positions[kept] = target;
        self.alive[removed] = false;
        self.merged_into[removed] = kept;
        self.live_vertices -= 1;
        let faces: Vec<usize> = self.incident[removed].iter().copied().collect();
        for fi in faces {
            let face = &mut self.faces[fi];
            for v in face.iter_mut() {
                if *v == removed {
                    *v = kept;
                }
            }
            let f = *face;
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                self.face_alive[fi] = false;
                for v in f {
                    self.incident[v].remove(&fi);
                }
            } else {
                self.incident[kept].insert(fi);
            }
        }
        self.incident[removed].clear();
    }

    fn finish(self) -> Result<(Vec<[f64; 3]>, Vec<[usize; 3]>, Vec<usize>, Vec<usize>)> {
        let survivors: Vec<usize> = (0..self.alive.len()).filter(|&v| self.alive[v]).collect();
        let mut new_index = vec![usize::MAX; self.alive.len()];
        for (i, &v) in survivors.iter().enumerate() {
            new_index[v] = i;
        }
        let mut seen = BTreeSet::new();
        let mut faces = Vec::new();
        for (fi, f) in self.faces.iter().enumerate() {
            if !self.face_alive[fi] {
                continue;
            }
            let mapped = [new_index[f[0]], new_index[f[1]], new_index[f[2]]];
            let mut key = mapped;
            key.sort_unstable();
            if seen.insert(key) {
                faces.push(mapped);
            }
        }
        let parent = (0..self.alive.len())
            .map(|mut v| {
                while self.merged_into[v] != v {
                    v = self.merged_into[v];
                }
                new_index[v]
            })
            .collect();
        let positions = survivors.iter().map(|&v| self.positions[v]).collect();
        Ok((positions, faces, survivors, parent))
    }
}

fn build_level(
    mesh: &SurfaceMesh,
    factor: f64,
    contractions: Vec<Contraction>,
    state: CollapseState,
) -> Result<(SurfaceMesh, SimplificationLevel)> {
    let (positions, faces, survivors, parent) = state.finish()?;
    let coarse = Arc::new(MeshTopology::new(faces, survivors.len())?);
    let flat: Vec<f64> = positions.iter().flatten().copied().collect();
    let coarse_mesh = SurfaceMesh::from_flat(Arc::clone(&coarse), &flat)?;
    let level = SimplificationLevel {
        factor,
        fine: Arc::clone(mesh.topology()),
        coarse,
        contractions,
        survivors: Arc::new(survivors),
        parent: Arc::new(parent),
    };
    Ok((coarse_mesh, level))
}

/// Greedy quadric edge collapse down to exactly `ceil(|V| / factor)`
/// vertices. Ties break on `(error, min index, max index)`.
pub fn quadric_simplify(mesh: &SurfaceMesh, factor: f64) -> Result<(SurfaceMesh, SimplificationLevel)> {
    if !(factor > 1.0) {
        return Err(Error::InvalidTopology(format!("pooling factor {factor} must exceed 1")));
    }
    let n = mesh.vertex_count();
    let target_count = (n as f64 / factor).ceil() as usize;
    if target_count < MINIMUM_VERTICES {
        return Err(Error::SimplificationCollapse {
            target: target_count,
            minimum: MINIMUM_VERTICES,
        });
    }

    let mut state = CollapseState::new(mesh);
    let mut quadrics = vec![Quadric::zeros(); n];
    for f in &state.faces {
        let q = face_quadric([state.positions[f[0]], state.positions[f[1]], state.positions[f[2]]]);
        for &v in f {
            quadrics[v] += q;
        }
    }
    let mut version = vec![0u64; n];

    let candidate = |state: &CollapseState, quadrics: &[Quadric], version: &[u64], a: usize, b: usize| {
        let (a, b) = (a.min(b), a.max(b));
        let q = quadrics[a] + quadrics[b];
        let (pa, pb) = (state.positions[a], state.positions[b]);
        let mid = [(pa[0] + pb[0]) / 2.0, (pa[1] + pb[1]) / 2.0, (pa[2] + pb[2]) / 2.0];
        let (error, target) = [pa, pb, mid]
            .into_iter()
            .map(|p| (quadric_error(&q, p), p))
            .min_by(|x, y| x.0.total_cmp(&y.0))
            .expect("three candidates");
        Candidate {
            error,
            a,
            b,
            target,
            stamp: (version[a], version[b]),
        }
    };

    let mut heap = BinaryHeap::new();
    for a in 0..n {
        for b in state.neighbours(a) {
            if a < b {
                heap.push(candidate(&state, &quadrics, &version, a, b));
            }
        }
    }

    let mut contractions = Vec::with_capacity(n - target_count);
    while state.live_vertices > target_count {
        let Some(c) = heap.pop() else {
            return Err(Error::SimplificationCollapse {
                target: target_count,
                minimum: MINIMUM_VERTICES,
            });
        };
        if !state.alive[c.a] || !state.alive[c.b] || c.stamp != (version[c.a], version[c.b]) {
            continue;
        }
        if !state.link_condition(c.a, c.b) {
            continue;
        }
        state.contract(c.a, c.b, c.target);
        quadrics[c.a] = quadrics[c.a] + quadrics[c.b];
        contractions.push(Contraction {
            error: c.error,
            target: c.target,
            kept: c.a,
            removed: c.b,
        });
        // Neighbourhoods around the kept vertex changed: refresh their edges.
        let ring = state.neighbours(c.a);
        version[c.a] += 1;
        for &u in &ring {
            version[u] += 1;
        }
        for &u in std::iter::once(&c.a).chain(ring.iter()) {
            for w in state.neighbours(u) {
                heap.push(candidate(&state, &quadrics, &version, u, w));
            }
        }
    }
    build_level(mesh, factor, contractions, state)
}

/// Re-apply a contraction log to the fine mesh without any heap search.
pub fn replay_contractions(
    mesh: &SurfaceMesh,
    factor: f64,
    contractions: &[Contraction],
) -> Result<(SurfaceMesh, SimplificationLevel)> {
    let mut state = CollapseState::new(mesh);
    for c in contractions {
        if c.kept >= state.alive.len()
            || c.removed >= state.alive.len()
            || !state.alive[c.kept]
            || !state.alive[c.removed]
        {
            return Err(Error::InvalidTopology(format!(
                "contraction ({}, {}) does not apply to this mesh",
                c.kept, c.removed
            )));
        }
        state.contract(c.kept, c.removed, c.target);
    }
    build_level(mesh, factor, contractions.to_vec(), state)
}
