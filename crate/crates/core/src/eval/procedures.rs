use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{median, spearman, summarise, EvalReport, PcaModel, Series, Table};
use crate::cohort::Subject;
use crate::mesh::{chamfer_distance, signed_displacement, ved, ved_flat, SurfaceMesh};
use crate::model::CausalShapeModel;
use crate::scm::{CovariateRecord, ExogenousState, Intervention, LatentAbduction, Node};
use crate::{Error, Result};

/// Independent seed for a named sub-task of a seeded run.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng.next_u64()
}

fn split(subjects: &[Subject]) -> (Vec<CovariateRecord>, Vec<&SurfaceMesh>) {
    (subjects.iter().map(|s| s.record).collect(), subjects.iter().map(|s| &s.mesh).collect())
}

fn require(subjects: &[Subject], what: &str) -> Result<()> {
    if subjects.is_empty() {
        return Err(Error::EmptyInput(format!("no {what} subjects")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReconstructionMode {
    /// Inferred latent, fresh `u ~ N(0, I)`.
    SampledU,
    /// Inferred latent and inferred residual.
    InferredU,
    /// PCA baseline with this many modes, fitted on the training split.
    Pca(usize),
}

/// One row of the reconstruction table per mode: VED and Chamfer against the
/// input meshes.
pub fn reconstruction_table(
    model: &CausalShapeModel,
    train: &[Subject],
    test: &[Subject],
    modes: &[ReconstructionMode],
    seed: u64,
) -> Result<EvalReport> {
    require(test, "test")?;
    let (records, meshes) = split(test);
    let max_k = modes
        .iter()
        .filter_map(|m| match m {
            ReconstructionMode::Pca(k) => Some(*k),
            _ => None,
        })
        .max();
    let pca = match max_k {
        Some(k) => Some(PcaModel::fit(&split(train).1, Some(k))?),
        None => None,
    };
    let needs_model = modes.iter().any(|m| !matches!(m, ReconstructionMode::Pca(_)));
    let exogenous = if needs_model {
        model.abduct_batch(&records, &meshes, LatentAbduction::Mean)?
    } else {
        Vec::new()
    };
    let none = vec![Intervention::none(); test.len()];
    let mut table = Table::new(
        "reconstruction",
        &["model_type", "latent_dim", "mean_ved_mm", "std_ved_mm", "median_ved_mm", "chamfer_mm"],
    );
    for mode in modes {
        let (label, dim, outputs): (&str, usize, Vec<SurfaceMesh>) = match *mode {
            ReconstructionMode::Pca(k) => {
                let pca = pca.as_ref().expect("fitted above");
                let out = meshes.iter().map(|m| pca.reconstruct(m, k)).collect::<Result<_>>()?;
                ("pca", k, out)
            }
            ReconstructionMode::InferredU => {
                let out = model.predict_batch(&exogenous, Some(&records), &none)?;
                ("inferred_u", model.cvae.latent_dim(), out.into_iter().map(|(_, m)| m).collect())
            }
            ReconstructionMode::SampledU => {
                let tag = derive_seed(seed, 1);
                let resampled: Vec<ExogenousState> = exogenous
                    .iter()
                    .enumerate()
                    .map(|(i, e)| {
                        let mut rng = ChaCha8Rng::seed_from_u64(tag);
                        rng.set_stream(i as u64);
                        ExogenousState {
                            u: e.u.iter().map(|_| StandardNormal.sample(&mut rng)).collect(),
                            ..e.clone()
                        }
                    })
                    .collect();
                let out = model.predict_batch(&resampled, Some(&records), &none)?;
                ("sampled_u", model.cvae.latent_dim(), out.into_iter().map(|(_, m)| m).collect())
            }
        };
        let veds = outputs.iter().zip(&meshes).map(|(o, m)| ved(o, m)).collect::<Result<Vec<_>>>()?;
        let chamfers: Vec<f64> = outputs.iter().zip(&meshes).map(|(o, m)| chamfer_distance(o, m)).collect();
        let s = summarise(&veds)?;
        table.push(vec![
            label.into(),
            dim.into(),
            s.mean.into(),
            s.std.into(),
            s.median.into(),
            (chamfers.iter().sum::<f64>() / chamfers.len() as f64).into(),
        ]);
    }
    Ok(EvalReport {
        seed,
        tables: vec![table],
        series: Vec::new(),
    })
}

/// Explained-variance-ratio curves of two mesh sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Compactness {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub first_rank: usize,
    pub second_rank: usize,
    /// Modes requested but not supported by the data.
    pub rank_deficient: bool,
}

pub fn pca_compactness(first: &[&SurfaceMesh], second: &[&SurfaceMesh], modes: usize) -> Result<Compactness> {
    let a = PcaModel::fit(first, None)?;
    let b = PcaModel::fit(second, None)?;
    let curve = |p: &PcaModel| p.explained_variance_ratio().into_iter().take(modes).collect::<Vec<_>>();
    Ok(Compactness {
        first: curve(&a),
        second: curve(&b),
        first_rank: a.rank(),
        second_rank: b.rank(),
        rank_deficient: a.rank() < modes || b.rank() < modes,
    })
}

impl Compactness {
    pub fn series(&self, first: &str, second: &str) -> Vec<Series> {
        let make = |name: &str, c: &[f64]| Series {
            name: name.to_string(),
            x_label: "mode".into(),
            y_label: "explained variance ratio".into(),
            points: c.iter().enumerate().map(|(i, r)| ((i + 1) as f64, *r)).collect(),
        };
        vec![make(first, &self.first), make(second, &self.second)]
    }
}

/// A labelled set of population-level interventions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionFamily {
    pub label: String,
    pub settings: Vec<Intervention>,
}

fn quantile_values(norm: &crate::flows::AffineNormalisation) -> [f64; 3] {
    // 10th, 50th and 90th percentiles of the fitted log-normal.
    [-1.2815515655446004, 0.0, 1.2815515655446004].map(|q| norm.forward(q).exp())
}

impl InterventionFamily {
    /// `do(a, s)` over age deciles and both sexes; `do(b, v)` over volume
    /// deciles.
    pub fn defaults(model: &CausalShapeModel) -> Result<Vec<Self>> {
        let stats = model.flows.statistics();
        let mut age_sex = Vec::new();
        for a in quantile_values(&stats.age) {
            for s in [0.0, 1.0] {
                age_sex.push(Intervention::new([(Node::A, a), (Node::S, s)])?);
            }
        }
        let mut volumes = Vec::new();
        for b in quantile_values(&stats.brain) {
            for v in quantile_values(&stats.structure) {
                volumes.push(Intervention::new([(Node::B, b), (Node::V, v)])?);
            }
        }
        Ok(vec![
            Self {
                label: "do(a, s)".into(),
                settings: age_sex,
            },
            Self {
                label: "do(b, v)".into(),
                settings: volumes,
            },
        ])
    }
}

/// Specificity errors: each generated mesh's mean VED to the whole test set,
/// summarised per family.
pub fn specificity(
    model: &CausalShapeModel,
    z: &[f64],
    families: &[InterventionFamily],
    per_setting: usize,
    test: &[Subject],
    seed: u64,
) -> Result<EvalReport> {
    require(test, "test")?;
    let test_flat: Vec<Vec<f64>> = test.iter().map(|s| s.mesh.flatten()).collect();
    let mut table = Table::new("specificity", &["intervention", "mean_mm", "std_mm", "median_mm"]);
    let mut tag = 0u64;
    for family in families {
        let mut errors = Vec::new();
        for iv in &family.settings {
            tag += 1;
            for sample in model.intervene_population(iv, z, per_setting, derive_seed(seed, 100 + tag))? {
                let x = sample.mesh.flatten();
                let e = test_flat.iter().map(|t| ved_flat(&x, t)).sum::<f64>() / test_flat.len() as f64;
                errors.push(e);
            }
        }
        let s = summarise(&errors)?;
        table.push(vec![family.label.clone().into(), s.mean.into(), s.std.into(), s.median.into()]);
    }
    Ok(EvalReport {
        seed,
        tables: vec![table],
        series: Vec::new(),
    })
}

#[derive(Debug, Clone)]
pub struct InterpolationEntry {
    pub dim: usize,
    pub offset: f64,
    pub mesh: SurfaceMesh,
    /// Signed displacement from the mean shape along its normals, mm.
    pub displacement: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct InterpolationGrid {
    pub mean: SurfaceMesh,
    pub entries: Vec<InterpolationEntry>,
}

impl InterpolationGrid {
    pub fn table(&self) -> Table {
        let mut t = Table::new(
            "latent_interpolation",
            &["dim", "offset", "ved_to_mean_mm", "max_abs_displacement_mm"],
        );
        for e in &self.entries {
            let max = e.displacement.iter().fold(0.0f64, |m, d| m.max(d.abs()));
            let d = ved(&e.mesh, &self.mean).expect("shared topology");
            t.push(vec![e.dim.into(), e.offset.into(), d.into(), max.into()]);
        }
        t
    }
}

/// Decoder means at `z = 0` and at `z = offset * e_dim`, for fixed volumes.
pub fn latent_interpolation(
    model: &CausalShapeModel,
    dims: &[usize],
    offsets: &[f64],
    v_bar: f64,
    b_bar: f64,
) -> Result<InterpolationGrid> {
    let d = model.cvae.latent_dim();
    if let Some(&bad) = dims.iter().find(|&&k| k >= d) {
        return Err(Error::DimensionMismatch(format!("latent dimension {bad} with D = {d}")));
    }
    let v_hat = model.flows.structure.intermediate(v_bar)?;
    let b_hat = model.flows.brain.intermediate(b_bar)?;
    let zero_u = vec![0.0; 3 * model.cvae.vertex_count()];
    let decode = |z: &[f64]| -> Result<SurfaceMesh> {
        let p = model.cvae.decode(&model.store, z, v_hat, b_hat)?;
        model.cvae.reparam_forward(&zero_u, &p)
    };
    let mean = decode(&vec![0.0; d])?;
    let mut entries = Vec::new();
    for &dim in dims {
        for &offset in offsets {
            let mut z = vec![0.0; d];
            z[dim] = offset;
            let mesh = decode(&z)?;
            let displacement = signed_displacement(&mean, &mesh)?;
            entries.push(InterpolationEntry {
                dim,
                offset,
                mesh,
                displacement,
            });
        }
    }
    Ok(InterpolationGrid { mean, entries })
}

/// Mean brain and structure volume of a subject set, `(v_bar, b_bar)`.
pub fn mean_volumes(subjects: &[Subject]) -> Result<(f64, f64)> {
    require(subjects, "reference")?;
    let n = subjects.len() as f64;
    Ok((
        subjects.iter().map(|s| s.record.v).sum::<f64>() / n,
        subjects.iter().map(|s| s.record.b).sum::<f64>() / n,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TraitIntervention {
    /// `do(a := a + delta)`.
    AgeShift(f64),
    /// `do(s := target)` on subjects of the opposite sex.
    SexFlip { target: f64 },
}

impl TraitIntervention {
    pub fn label(&self) -> String {
        match self {
            Self::AgeShift(d) => format!("do(a{d:+})"),
            Self::SexFlip { target } if *target == 0.0 => "do(s=0) male".into(),
            Self::SexFlip { .. } => "do(s=1) female".into(),
        }
    }

    fn applies(&self, r: &CovariateRecord) -> bool {
        match self {
            Self::AgeShift(d) => r.a + d > 0.0,
            Self::SexFlip { target } => r.s == 1.0 - target,
        }
    }

    fn intervention(&self, r: &CovariateRecord) -> Result<Intervention> {
        match self {
            Self::AgeShift(d) => Intervention::new([(Node::A, r.a + d)]),
            Self::SexFlip { target } => Intervention::new([(Node::S, *target)]),
        }
    }
}

/// Bucket grid: age shifts plus both sex flips.
pub fn trait_grid(age_offsets: &[f64]) -> Vec<TraitIntervention> {
    let mut grid: Vec<TraitIntervention> = age_offsets.iter().map(|&d| TraitIntervention::AgeShift(d)).collect();
    grid.push(TraitIntervention::SexFlip { target: 0.0 });
    grid.push(TraitIntervention::SexFlip { target: 1.0 });
    grid
}

pub const DEFAULT_AGE_OFFSETS: [f64; 9] = [-20.0, -15.0, -10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitBucket {
    pub intervention: TraitIntervention,
    pub veds: Vec<f64>,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitPreservation {
    pub buckets: Vec<TraitBucket>,
    /// Rank correlation of `|delta a|` with the bucket median over age buckets.
    pub age_trend: f64,
}

impl TraitPreservation {
    pub fn report(&self, seed: u64) -> EvalReport {
        let mut t = Table::new(
            "trait_preservation",
            &["bucket", "delta", "subjects", "median_ved_mm", "mean_ved_mm"],
        );
        for b in &self.buckets {
            let delta = match b.intervention {
                TraitIntervention::AgeShift(d) => d,
                TraitIntervention::SexFlip { target } => target,
            };
            let mean = b.veds.iter().sum::<f64>() / b.veds.len().max(1) as f64;
            t.push(vec![
                b.intervention.label().into(),
                delta.into(),
                b.veds.len().into(),
                b.median.into(),
                mean.into(),
            ]);
        }
        let mut trend = Table::new("trait_preservation_trend", &["statistic", "value"]);
        trend.push(vec!["spearman_abs_age_shift_vs_median".into(), self.age_trend.into()]);
        EvalReport {
            seed,
            tables: vec![t, trend],
            series: Vec::new(),
        }
    }
}

/// Counterfactual under each trait intervention, then back under
/// `do(b := b_obs, v := v_obs)`; VED of the recovered mesh to the original.
pub fn trait_preservation(
    model: &CausalShapeModel,
    test: &[Subject],
    grid: &[TraitIntervention],
) -> Result<TraitPreservation> {
    require(test, "test")?;
    let mut buckets = Vec::new();
    for ti in grid {
        let chosen: Vec<&Subject> = test.iter().filter(|s| ti.applies(&s.record)).collect();
        let records: Vec<CovariateRecord> = chosen.iter().map(|s| s.record).collect();
        let meshes: Vec<&SurfaceMesh> = chosen.iter().map(|s| &s.mesh).collect();
        let forward_ivs = records.iter().map(|r| ti.intervention(r)).collect::<Result<Vec<_>>>()?;
        let cf = model.counterfactual_batch(&records, &meshes, &forward_ivs, LatentAbduction::Mean)?;
        let back_ivs = records
            .iter()
            .map(|r| Intervention::new([(Node::B, r.b), (Node::V, r.v)]))
            .collect::<Result<Vec<_>>>()?;
        let cf_records: Vec<CovariateRecord> = cf.iter().map(|(r, _)| *r).collect();
        let cf_meshes: Vec<&SurfaceMesh> = cf.iter().map(|(_, m)| m).collect();
        let back = model.counterfactual_batch(&cf_records, &cf_meshes, &back_ivs, LatentAbduction::Mean)?;
        let veds = back
            .iter()
            .zip(&meshes)
            .map(|((_, m), x)| ved(m, x))
            .collect::<Result<Vec<_>>>()?;
        buckets.push(TraitBucket {
            intervention: *ti,
            median: median(&veds),
            veds,
        });
    }
    let (shifts, medians): (Vec<f64>, Vec<f64>) = buckets
        .iter()
        .filter_map(|b| match b.intervention {
            TraitIntervention::AgeShift(d) if !b.veds.is_empty() => Some((d.abs(), b.median)),
            _ => None,
        })
        .unzip();
    let age_trend = if shifts.len() > 1 { spearman(&shifts, &medians) } else { f64::NAN };
    Ok(TraitPreservation { buckets, age_trend })
}

/// Intervention grids for subject trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryGrid {
    pub age_offsets: Vec<f64>,
    pub sex_values: Vec<f64>,
    pub brain_volumes: Vec<f64>,
    pub structure_volumes: Vec<f64>,
}

impl TrajectoryGrid {
    /// Age steps `{5, 10, 15, 20}`, sex `{0, 0.2, 0.4, 0.6, 1}` and volumes
    /// spanning +-2 standard deviations of the fitted log-volumes.
    pub fn defaults(model: &CausalShapeModel) -> Self {
        let stats = model.flows.statistics();
        let span = |n: &crate::flows::AffineNormalisation| [-2.0, -1.0, 0.0, 1.0, 2.0].map(|q| n.forward(q).exp()).to_vec();
        Self {
            age_offsets: vec![5.0, 10.0, 15.0, 20.0],
            sex_values: vec![0.0, 0.2, 0.4, 0.6, 1.0],
            brain_volumes: span(&stats.brain),
            structure_volumes: span(&stats.structure),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: usize,
    pub a: f64,
    pub s: f64,
    pub b: f64,
    pub v: f64,
    pub ved_to_observed: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub name: String,
    pub interventions: Vec<Intervention>,
    pub rows: Vec<TrajectoryRow>,
    pub meshes: Vec<SurfaceMesh>,
}

impl Trajectory {
    pub const COLUMNS: [&'static str; 6] = ["step", "a", "s", "b", "v", "ved_to_observed"];

    pub fn table(&self, name: &str) -> Table {
        let mut t = Table::new(name, &Self::COLUMNS);
        for r in &self.rows {
            t.push(vec![r.step.into(), r.a.into(), r.s.into(), r.b.into(), r.v.into(), r.ved_to_observed.into()]);
        }
        t
    }
}

/// Evaluate a list of interventions for one subject from a single
/// abduction; step 0 of each list is conventionally the factual value.
pub fn counterfactual_path(
    model: &CausalShapeModel,
    subject: &Subject,
    name: &str,
    interventions: Vec<Intervention>,
) -> Result<Trajectory> {
    let exo = model.abduct(&subject.record, &subject.mesh, LatentAbduction::Mean)?;
    let n = interventions.len();
    let out = model.predict_batch(&vec![exo; n], Some(&vec![subject.record; n]), &interventions)?;
    let mut rows = Vec::with_capacity(n);
    let mut meshes = Vec::with_capacity(n);
    for (step, (r, m)) in out.into_iter().enumerate() {
        rows.push(TrajectoryRow {
            step,
            a: r.a,
            s: r.s,
            b: r.b,
            v: r.v,
            ved_to_observed: ved(&m, &subject.mesh)?,
        });
        meshes.push(m);
    }
    Ok(Trajectory {
        name: name.to_string(),
        interventions,
        rows,
        meshes,
    })
}

/// `(b, v)` paths under `do(a +- T)`, `do(s = S)`, `do(a +- T, s = S')`,
/// `do(b)` and `do(v)`.
pub fn counterfactual_trajectories(
    model: &CausalShapeModel,
    subject: &Subject,
    grid: &TrajectoryGrid,
) -> Result<Vec<Trajectory>> {
    let r = subject.record;
    let one = |n: Node, v: f64| Intervention::new([(n, v)]);
    let flipped = if r.s == 0.0 || r.s == 1.0 { Some(1.0 - r.s) } else { None };
    let mut out = Vec::new();
    for (name, sign) in [("do(a+T)", 1.0), ("do(a-T)", -1.0)] {
        let mut ivs = vec![one(Node::A, r.a)?];
        for t in &grid.age_offsets {
            let a = r.a + sign * t;
            if a > 0.0 {
                ivs.push(one(Node::A, a)?);
            }
        }
        out.push(counterfactual_path(model, subject, name, ivs)?);
    }
    let mut ivs = vec![one(Node::S, r.s)?];
    for &s in &grid.sex_values {
        ivs.push(one(Node::S, s)?);
    }
    out.push(counterfactual_path(model, subject, "do(s=S)", ivs)?);
    if let Some(s_flip) = flipped {
        for (name, sign) in [("do(a+T,s=S')", 1.0), ("do(a-T,s=S')", -1.0)] {
            let mut ivs = vec![Intervention::new([(Node::A, r.a), (Node::S, r.s)])?];
            for t in &grid.age_offsets {
                let a = r.a + sign * t;
                if a > 0.0 {
                    ivs.push(Intervention::new([(Node::A, a), (Node::S, s_flip)])?);
                }
            }
            out.push(counterfactual_path(model, subject, name, ivs)?);
        }
    }
    for (name, node, values) in [
        ("do(b)", Node::B, &grid.brain_volumes),
        ("do(v)", Node::V, &grid.structure_volumes),
    ] {
        let mut ivs = vec![one(node, r.get(node).expect("covariate"))?];
        for &x in values {
            ivs.push(one(node, x)?);
        }
        out.push(counterfactual_path(model, subject, name, ivs)?);
    }
    Ok(out)
}

/// A 2D embedding of flattened meshes.
pub trait Embedding2d {
    fn name(&self) -> &str;
    fn embed(&self, rows: &[Vec<f64>]) -> Result<Vec<[f64; 2]>>;
}

/// Projection on the two leading principal components.
#[derive(Debug, Clone, Copy, Default)]
pub struct PcaEmbedding;

impl Embedding2d for PcaEmbedding {
    fn name(&self) -> &str {
        "pca"
    }

    fn embed(&self, rows: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
        let pca = PcaModel::fit_flat(rows, Some(2))?;
        let k = pca.modes();
        rows.iter()
            .map(|r| {
                let c = pca.project(r, k)?;
                Ok([c.first().copied().unwrap_or(0.0), c.get(1).copied().unwrap_or(0.0)])
            })
            .collect()
    }
}

pub const DEFAULT_PROJECTION_SAMPLES: usize = 5000;

/// Population samples at a fixed latent code, embedded in 2D with their
/// covariates.
pub fn shape_projection(
    model: &CausalShapeModel,
    z: &[f64],
    n: usize,
    seed: u64,
    embedding: &dyn Embedding2d,
) -> Result<Table> {
    let samples = model.intervene_population(&Intervention::none(), z, n, seed)?;
    let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.mesh.flatten()).collect();
    let coords = if rows.len() >= 2 { embedding.embed(&rows)? } else { vec![[0.0, 0.0]; rows.len()] };
    let mut t = Table::new("shape_projection", &["x_embed", "y_embed", "a", "s", "b", "v"]);
    for (c, s) in coords.iter().zip(&samples) {
        let r = s.record;
        t.push(vec![c[0].into(), c[1].into(), r.a.into(), r.s.into(), r.b.into(), r.v.into()]);
    }
    Ok(t)
}

/// Evaluation selector for the suite runner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    All,
    Reconstruction,
    Compactness,
    Specificity,
    Interpolation,
    Traits,
    Trajectories,
    Projection,
}

impl Suite {
    pub const NAMES: [&'static str; 8] = [
        "all",
        "reconstruction",
        "compactness",
        "specificity",
        "interpolation",
        "traits",
        "trajectories",
        "projection",
    ];

    fn includes(self, other: Suite) -> bool {
        self == Suite::All || self == other
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => Self::All,
            "reconstruction" => Self::Reconstruction,
            "compactness" => Self::Compactness,
            "specificity" => Self::Specificity,
            "interpolation" => Self::Interpolation,
            "traits" => Self::Traits,
            "trajectories" => Self::Trajectories,
            "projection" => Self::Projection,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown suite `{other}` (expected one of {})",
                    Self::NAMES.join(", ")
                )))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub pca_modes: Vec<usize>,
    pub specificity_samples: usize,
    pub projection_samples: usize,
    pub age_offsets: Vec<f64>,
    pub interpolation_dims: Vec<usize>,
    pub interpolation_offset: f64,
    /// Subject ids for trajectories; the first test subject when empty.
    pub trajectory_subjects: Vec<usize>,
    pub compactness_modes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pca_modes: vec![8, 16, 32, 64],
            specificity_samples: 100,
            projection_samples: DEFAULT_PROJECTION_SAMPLES,
            age_offsets: DEFAULT_AGE_OFFSETS.to_vec(),
            interpolation_dims: (0..7).collect(),
            interpolation_offset: 0.8,
            trajectory_subjects: Vec::new(),
            compactness_modes: 32,
        }
    }
}

/// Everything a suite run produces besides its tables.
#[derive(Debug, Clone, Default)]
pub struct SuiteOutput {
    pub report: EvalReport,
    pub interpolation: Option<InterpolationGrid>,
    pub trajectories: Vec<(usize, Vec<Trajectory>)>,
}

pub fn run_suite(
    model: &CausalShapeModel,
    train: &[Subject],
    test: &[Subject],
    config: &EvalConfig,
    suite: Suite,
    seed: u64,
) -> Result<SuiteOutput> {
    require(test, "test")?;
    let mut out = SuiteOutput {
        report: EvalReport {
            seed,
            ..EvalReport::default()
        },
        ..SuiteOutput::default()
    };
    let z0 = vec![0.0; model.cvae.latent_dim()];
    if suite.includes(Suite::Reconstruction) {
        let mut modes: Vec<ReconstructionMode> = config.pca_modes.iter().map(|&k| ReconstructionMode::Pca(k)).collect();
        modes.extend([ReconstructionMode::SampledU, ReconstructionMode::InferredU]);
        out.report.merge(reconstruction_table(model, train, test, &modes, seed)?);
    }
    if suite.includes(Suite::Compactness) {
        let (records, meshes) = split(test);
        let shifted = records
            .iter()
            .map(|r| Intervention::new([(Node::A, r.a + 10.0)]))
            .collect::<Result<Vec<_>>>()?;
        let cf = model.counterfactual_batch(&records, &meshes, &shifted, LatentAbduction::Mean)?;
        let cf_meshes: Vec<&SurfaceMesh> = cf.iter().map(|(_, m)| m).collect();
        let c = pca_compactness(&meshes, &cf_meshes, config.compactness_modes)?;
        let mut t = Table::new("compactness", &["mode", "observed_ratio", "counterfactual_ratio"]);
        for (i, (a, b)) in c.first.iter().zip(&c.second).enumerate() {
            t.push(vec![(i + 1).into(), (*a).into(), (*b).into()]);
        }
        out.report.tables.push(t);
        out.report.series.extend(c.series("observed", "counterfactual do(a+10)"));
    }
    if suite.includes(Suite::Specificity) {
        let families = InterventionFamily::defaults(model)?;
        out.report
            .merge(specificity(model, &z0, &families, config.specificity_samples, test, derive_seed(seed, 2))?);
    }
    if suite.includes(Suite::Interpolation) {
        let (v_bar, b_bar) = mean_volumes(if train.is_empty() { test } else { train })?;
        let offsets = [-config.interpolation_offset, config.interpolation_offset];
        let grid = latent_interpolation(model, &config.interpolation_dims, &offsets, v_bar, b_bar)?;
        out.report.tables.push(grid.table());
        out.interpolation = Some(grid);
    }
    if suite.includes(Suite::Traits) {
        let tp = trait_preservation(model, test, &trait_grid(&config.age_offsets))?;
        out.report.merge(tp.report(seed));
    }
    if suite.includes(Suite::Trajectories) {
        let grid = TrajectoryGrid::defaults(model);
        let ids = if config.trajectory_subjects.is_empty() {
            vec![test[0].id]
        } else {
            config.trajectory_subjects.clone()
        };
        for id in ids {
            let subject = test
                .iter()
                .chain(train)
                .find(|s| s.id == id)
                .ok_or_else(|| Error::InvalidConfig(format!("no subject with id {id}")))?;
            let paths = counterfactual_trajectories(model, subject, &grid)?;
            for p in &paths {
                out.report.tables.push(p.table(&format!("trajectory_{id}_{}", slug(&p.name))));
            }
            out.trajectories.push((id, paths));
        }
    }
    if suite.includes(Suite::Projection) {
        out.report.tables.push(shape_projection(
            model,
            &z0,
            config.projection_samples,
            derive_seed(seed, 3),
            &PcaEmbedding,
        )?);
    }
    Ok(out)
}

/// File-name-safe form of an intervention label.
pub fn slug(label: &str) -> String {
    let mut s = String::new();
    for c in label.chars() {
        match c {
            'a'..='z' | 'A'..='Z' | '0'..='9' => s.push(c),
            '+' => s.push_str("plus"),
            '-' => s.push_str("minus"),
            '\'' => s.push_str("flip"),
            '=' => s.push('_'),
            _ => {}
        }
    }
    s
}
