//! Synthetic cohort: template icosphere meshes deformed by a closed-form
//! ground-truth causal model, with exact counterfactual oracles.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::mesh::{read_mesh_with_template, write_ply, MeshTopology, SurfaceMesh};
use crate::scm::{CovariateRecord, Intervention, Node};
use crate::{Error, Result};

/// Unit icosphere with `10 * 4^n + 2` vertices and outward winding.
pub fn make_icosphere(subdivisions: u32) -> SurfaceMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<[f64; 3]> = vec![
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ];
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for v in &mut vertices {
        normalise(v);
    }
    for _ in 0..subdivisions {
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, vertices: &mut Vec<[f64; 3]>| {
            *midpoints.entry((a.min(b), a.max(b))).or_insert_with(|| {
                let (p, q) = (vertices[a], vertices[b]);
                let mut m = [(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0, (p[2] + q[2]) / 2.0];
                normalise(&mut m);
                vertices.push(m);
                vertices.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for &[a, b, c] in &faces {
            let ab = midpoint(a, b, &mut vertices);
            let bc = midpoint(b, c, &mut vertices);
            let ca = midpoint(c, a, &mut vertices);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    let n = vertices.len();
    let topology = MeshTopology::new(faces, n).expect("icosphere faces are valid");
    let coords = Array2::from_shape_fn((n, 3), |(i, j)| vertices[i][j]);
    SurfaceMesh::new(Arc::new(topology), coords).expect("finite unit vectors")
}

fn normalise(v: &mut [f64; 3]) {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    v.iter_mut().for_each(|c| *c /= n);
}

/// Coefficients of the closed-form generating model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmParameters {
    pub age_offset: f64,
    pub age_shape: f64,
    pub age_scale: f64,
    pub male_fraction: f64,
    pub reference_age: f64,
    /// `log b = brain_log_base + sex * s + age_slope * (a - reference_age) + noise`.
    pub brain_log_base: f64,
    pub brain_sex_effect: f64,
    pub brain_age_slope: f64,
    pub brain_noise: f64,
    /// `log v = base + elasticity * (log b - brain_log_reference) + age_slope * (a - reference_age) + noise`.
    pub structure_log_base: f64,
    pub structure_elasticity: f64,
    pub brain_log_reference: f64,
    pub structure_age_slope: f64,
    pub structure_noise: f64,
    /// Ellipsoid semi-axis ratios of the template (product 1).
    pub axes: [f64; 3],
    /// Radial gain of the zonal bump per unit of `log b - brain_log_reference`.
    pub brain_shape_gain: f64,
    /// Radial gains of the two latent bump fields.
    pub latent_gains: [f64; 2],
    /// Standard deviation (mm) of per-vertex subject noise.
    pub vertex_jitter: f64,
}

impl Default for ScmParameters {
    fn default() -> Self {
        Self {
            age_offset: 40.0,
            age_shape: 9.0,
            age_scale: 2.5,
            male_fraction: 0.48,
            reference_age: 62.0,
            brain_log_base: 1100f64.ln(),
            brain_sex_effect: 0.09,
            brain_age_slope: -0.004,
            brain_noise: 0.06,
            structure_log_base: 22f64.ln(),
            structure_elasticity: 0.8,
            brain_log_reference: 1150f64.ln(),
            structure_age_slope: 0.002,
            structure_noise: 0.05,
            axes: [1.0, 0.8, 1.25],
            brain_shape_gain: 0.6,
            latent_gains: [0.05, 0.05],
            vertex_jitter: 0.05,
        }
    }
}

/// Every random quantity of one synthetic subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectNoise {
    pub id: usize,
    /// Gamma draw; `a = age_offset + age_draw`.
    pub age_draw: f64,
    pub sex: f64,
    pub brain_noise: f64,
    pub structure_noise: f64,
    pub shape_latent: [f64; 2],
    /// `|V| x 3` displacement in mm.
    pub jitter: Array2<f64>,
}

/// The closed-form generating model over a fixed template triangulation.
#[derive(Debug, Clone)]
pub struct GroundTruthScm {
    pub params: ScmParameters,
    sphere: SurfaceMesh,
}

impl GroundTruthScm {
    pub fn new(subdivisions: u32, params: ScmParameters) -> Self {
        Self {
            params,
            sphere: make_icosphere(subdivisions),
        }
    }

    pub fn topology(&self) -> &Arc<MeshTopology> {
        self.sphere.topology()
    }

    /// Noise for subject `id`, drawn from its own stream of the cohort seed.
    pub fn subject_noise(&self, seed: u64, id: usize) -> SubjectNoise {
        let p = &self.params;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id as u64);
        let age_draw = Gamma::new(p.age_shape, p.age_scale)
            .expect("positive gamma parameters")
            .sample(&mut rng);
        let male = Bernoulli::new(p.male_fraction)
            .expect("probability in [0, 1]")
            .sample(&mut rng);
        let brain_noise: f64 = rng.sample(StandardNormal);
        let structure_noise: f64 = rng.sample(StandardNormal);
        let shape_latent = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let n = self.sphere.vertex_count();
        let jitter = Array2::from_shape_simple_fn((n, 3), || {
            p.vertex_jitter * rng.sample::<f64, _>(StandardNormal)
        });
        SubjectNoise {
            id,
            age_draw,
            sex: if male { 1.0 } else { 0.0 },
            brain_noise,
            structure_noise,
            shape_latent,
            jitter,
        }
    }

    pub fn brain_volume(&self, a: f64, s: f64, noise: f64) -> f64 {
        let p = &self.params;
        (p.brain_log_base + p.brain_sex_effect * s + p.brain_age_slope * (a - p.reference_age)
            + p.brain_noise * noise)
            .exp()
    }

    pub fn structure_volume(&self, a: f64, b: f64, noise: f64) -> f64 {
        let p = &self.params;
        (p.structure_log_base
            + p.structure_elasticity * (b.ln() - p.brain_log_reference)
            + p.structure_age_slope * (a - p.reference_age)
            + p.structure_noise * noise)
            .exp()
    }

    /// Mesh as a function of the two volumes, the shape latent and the
    /// per-vertex noise.
    pub fn shape(&self, b: f64, v: f64, latent: [f64; 2], jitter: Option<&Array2<f64>>) -> SurfaceMesh {
        let p = &self.params;
        // Radius of a sphere of volume v (ml -> mm^3).
        let radius = (3.0 * 1000.0 * v / (4.0 * std::f64::consts::PI)).cbrt();
        let brain_weight = p.brain_shape_gain * (b.ln() - p.brain_log_reference);
        let mut out = self.sphere.vertices().clone();
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let (x, y, z) = (row[0], row[1], row[2]);
            let zonal = (3.0 * z * z - 1.0) / 2.0;
            let saddle = 3.0 * x * y;
            let odd = (5.0 * z * z * z - 3.0 * z) / 2.0;
            let radial = 1.0
                + brain_weight * zonal
                + p.latent_gains[0] * latent[0] * saddle
                + p.latent_gains[1] * latent[1] * odd;
            for k in 0..3 {
                row[k] *= radius * p.axes[k] * radial;
                if let Some(j) = jitter {
                    row[k] += j[[i, k]];
                }
            }
        }
        SurfaceMesh::new(Arc::clone(self.sphere.topology()), out).expect("finite deformation")
    }

    /// Reference shape at the population centre, without subject noise.
    pub fn template(&self) -> SurfaceMesh {
        let p = &self.params;
        self.shape(p.brain_log_reference.exp(), p.structure_log_base.exp(), [0.0, 0.0], None)
    }

    /// Re-evaluate the model with fixed subject noise under an intervention.
    pub fn evaluate(&self, noise: &SubjectNoise, iv: &Intervention) -> (CovariateRecord, SurfaceMesh) {
        let a = iv.get(Node::A).unwrap_or(self.params.age_offset + noise.age_draw);
        let s = iv.get(Node::S).unwrap_or(noise.sex);
        let b = iv.get(Node::B).unwrap_or_else(|| self.brain_volume(a, s, noise.brain_noise));
        let v = iv.get(Node::V).unwrap_or_else(|| self.structure_volume(a, b, noise.structure_noise));
        let mesh = self.shape(b, v, noise.shape_latent, Some(&noise.jitter));
        (CovariateRecord { a, s, b, v }, mesh)
    }

    /// Cohort drawn in memory; subjects are numbered consecutively train,
    /// then validation, then test.
    pub fn sample_subjects(&self, sizes: SplitSizes, seed: u64) -> Vec<Subject> {
        sizes
            .assignments()
            .map(|(id, split)| {
                let noise = self.subject_noise(seed, id);
                let (record, mesh) = self.evaluate(&noise, &Intervention::none());
                Subject {
                    id,
                    split,
                    record,
                    mesh,
                }
            })
            .collect()
    }
}

/// Exact counterfactual of the generating model for one subject.
pub fn oracle_counterfactual(
    scm: &GroundTruthScm,
    noise: &SubjectNoise,
    iv: &Intervention,
) -> (CovariateRecord, SurfaceMesh) {
    scm.evaluate(noise, iv)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    /// 10441/1160/2901 as in the reference cohort.
    pub const FULL: SplitSizes = SplitSizes {
        train: 10441,
        val: 1160,
        test: 2901,
    };
    pub const DESK: SplitSizes = SplitSizes {
        train: 2000,
        val: 250,
        test: 500,
    };

    /// `n` subjects split in the reference proportions.
    pub fn proportional(n: usize) -> Self {
        let total = Self::FULL.total() as f64;
        let train = (n as f64 * Self::FULL.train as f64 / total).round() as usize;
        let val = ((n as f64 * Self::FULL.val as f64 / total).round() as usize).min(n - train);
        Self {
            train,
            val,
            test: n - train - val,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    fn assignments(&self) -> impl Iterator<Item = (usize, Split)> {
        let (tr, va) = (self.train, self.val);
        (0..self.total()).map(move |id| {
            let split = if id < tr {
                Split::Train
            } else if id < tr + va {
                Split::Val
            } else {
                Split::Test
            };
            (id, split)
        })
    }
}

/// One observed subject.
#[derive(Debug, Clone)]
pub struct Subject {
    pub id: usize,
    pub split: Split,
    pub record: CovariateRecord,
    pub mesh: SurfaceMesh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: usize,
    pub age: f64,
    pub sex: f64,
    pub brain_volume: f64,
    pub structure_volume: f64,
    /// Relative to the manifest directory.
    pub mesh_path: String,
    pub split: Split,
}

impl ManifestRow {
    pub fn record(&self) -> CovariateRecord {
        CovariateRecord {
            a: self.age,
            s: self.sex,
            b: self.brain_volume,
            v: self.structure_volume,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortManifest {
    /// Directory holding `manifest.csv`; mesh paths resolve against it.
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const TEMPLATE_FILE: &str = "template.ply";

impl CohortManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let rows = reader.deserialize().collect::<std::result::Result<Vec<ManifestRow>, _>>()?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, rows })
    }

    pub fn write(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_FILE);
        let mut writer = csv::Writer::from_path(&path)?;
        if self.rows.is_empty() {
            writer.write_record([
                "id",
                "age",
                "sex",
                "brain_volume",
                "structure_volume",
                "mesh_path",
                "split",
            ])?;
        }
        for row in &self.rows {
            writer.serialize(row)?;
        }
        writer.flush()?;
        Ok(path)
    }

    pub fn mesh_path(&self, row: &ManifestRow) -> PathBuf {
        self.root.join(&row.mesh_path)
    }

    /// Load the subjects of one split (all splits when `None`) on a shared
    /// template topology.
    pub fn load(&self, split: Option<Split>, template: &Arc<MeshTopology>) -> Result<Vec<Subject>> {
        self.rows
            .iter()
            .filter(|r| split.is_none_or(|s| r.split == s))
            .map(|row| {
                let record = row.record();
                record.validate()?;
                Ok(Subject {
                    id: row.id,
                    split: row.split,
                    record,
                    mesh: read_mesh_with_template(&self.mesh_path(row), template)?,
                })
            })
            .collect()
    }
}

/// Draw a cohort and write its meshes, template and manifest under `out_dir`.
pub fn sample_cohort(
    scm: &GroundTruthScm,
    sizes: SplitSizes,
    seed: u64,
    out_dir: &Path,
) -> Result<CohortManifest> {
    let mesh_dir = out_dir.join("meshes");
    fs::create_dir_all(&mesh_dir)?;
    write_ply(&scm.template(), &out_dir.join(TEMPLATE_FILE))?;
    let mut rows = Vec::with_capacity(sizes.total());
    for subject in scm.sample_subjects(sizes, seed) {
        let rel = format!("meshes/subject_{:05}.ply", subject.id);
        write_ply(&subject.mesh, &out_dir.join(&rel))?;
        let r = subject.record;
        rows.push(ManifestRow {
            id: subject.id,
            age: r.a,
            sex: r.s,
            brain_volume: r.b,
            structure_volume: r.v,
            mesh_path: rel,
            split: subject.split,
        });
    }
    let manifest = CohortManifest {
        root: out_dir.to_path_buf(),
        rows,
    };
    manifest.write()?;
    Ok(manifest)
}

/// Subject with the given id.
pub fn find_subject(subjects: &[Subject], id: usize) -> Result<&Subject> {
    subjects
        .iter()
        .find(|s| s.id == id)
        .ok_or_else(|| Error::EmptyInput(format!("no subject with id {id}")))
}
