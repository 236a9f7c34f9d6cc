use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use csm_core::cohort::{
    find_subject, sample_cohort, CohortManifest, GroundTruthScm, ScmParameters, Split, Subject, MANIFEST_FILE,
    TEMPLATE_FILE,
};
use csm_core::eval::{plot, run_suite, slug, Cell, EvalReport, Suite, SuiteOutput, Table};
use csm_core::mesh::{read_mesh, read_mesh_with_template, signed_displacement, ved, write_mesh, write_ply_with_scalar, MeshFormat, SurfaceMesh};
use csm_core::model::{CausalShapeModel, EpochLog, TrainingLog};
use csm_core::scm::{Intervention, LatentAbduction};
use csm_core::Error as CoreError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{seed_tag, RunConfig};
use crate::error::CliError;
use crate::{CounterfactArgs, EvaluateArgs, ExportArgs, InterveneArgs, SubjectArgs, TrainArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOG_FILE: &str = "training_log.csv";
pub const CONFIG_FILE: &str = "config.toml";

struct Cohort {
    manifest: CohortManifest,
    template: SurfaceMesh,
}

impl Cohort {
    fn open(config: &RunConfig) -> Result<Self, CliError> {
        let dir = config.data_dir();
        let path = dir.join(MANIFEST_FILE);
        if !path.is_file() {
            return Err(CliError::data(format!(
                "no cohort manifest at {}; run `csm generate-data` or set data.dir",
                path.display()
            )));
        }
        let manifest = CohortManifest::read(&path)?;
        let template = read_mesh(&dir.join(TEMPLATE_FILE))?;
        Ok(Self { manifest, template })
    }

    fn split(&self, split: Option<Split>) -> Result<Vec<Subject>, CliError> {
        Ok(self.manifest.load(split, self.template.topology())?)
    }

    fn subject(&self, id: usize) -> Result<Subject, CliError> {
        let row = self
            .manifest
            .rows
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| CliError::usage(format!("no subject with id {id} in {}", self.manifest.root.display())))?;
        let subjects = self.split(Some(row.split))?;
        Ok(find_subject(&subjects, id)?.clone())
    }
}

fn checkpoint_path(config: &RunConfig, explicit: &Option<PathBuf>) -> PathBuf {
    explicit.clone().unwrap_or_else(|| config.output_dir().join(CHECKPOINT_FILE))
}

fn load_model(path: &Path, cohort: &Cohort) -> Result<CausalShapeModel, CliError> {
    if !path.is_file() {
        return Err(CliError::from(CoreError::Checkpoint(format!(
            "no checkpoint at {}; run `csm train` first",
            path.display()
        ))));
    }
    Ok(CausalShapeModel::load_for_template(path, cohort.template.topology())?)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))
}

/// Mesh plus its per-vertex displacement from `reference`.
fn write_displaced(mesh: &SurfaceMesh, reference: &SurfaceMesh, path: &Path) -> Result<(), CliError> {
    let disp = signed_displacement(reference, mesh)?;
    Ok(write_ply_with_scalar(mesh, &disp, path)?)
}

fn parse_intervention(text: &str) -> Result<Intervention, CliError> {
    text.parse::<Intervention>().map_err(|e| match e {
        CoreError::UnknownNode(n) => CliError::usage(format!("unknown node `{n}` in --do (expected a, s, b or v)")),
        other => CliError::from(other),
    })
}

pub fn generate_data(config: &RunConfig) -> Result<(), CliError> {
    let dir = config.data_dir();
    create_dir(&dir)?;
    let scm = GroundTruthScm::new(config.template.subdivisions, ScmParameters::default());
    let manifest = sample_cohort(&scm, config.split_sizes(), config.seed_for(seed_tag::COHORT), &dir)?;
    println!(
        "{} subjects on a {}-vertex template",
        manifest.rows.len(),
        scm.template().vertex_count()
    );
    println!("{}", dir.join(MANIFEST_FILE).display());
    Ok(())
}

fn print_epoch(e: &EpochLog) {
    println!(
        "epoch {:>5}  elbo {:>11.3}  log_lik {:>11.3}  kl {:>8.3}  ved {:.4} mm  {:.1} s",
        e.epoch, e.terms.elbo, e.terms.log_likelihood, e.terms.kl, e.terms.reconstruction_ved, e.seconds
    );
}

pub fn train(config: &RunConfig, args: &TrainArgs) -> Result<(), CliError> {
    let cohort = Cohort::open(config)?;
    let train = cohort.split(Some(Split::Train))?;
    let out = config.output_dir();
    create_dir(&out)?;
    let mut model = match &args.resume {
        Some(path) => {
            let model = load_model(path, &cohort)?;
            if model.config() != &config.model {
                eprintln!("note: resuming with the architecture stored in {}", path.display());
            }
            println!("resuming from epoch {}", model.epochs_trained);
            model
        }
        None => CausalShapeModel::initialise(
            config.model.clone(),
            cohort.template.clone(),
            config.seed_for(seed_tag::INIT),
            &train,
        )?,
    };
    let checkpoint = out.join(CHECKPOINT_FILE);
    let mut completed = TrainingLog::default();
    let result = model.train(&train, &config.train_config(), |e| {
        print_epoch(e);
        completed.epochs.push(e.clone());
    });
    completed.append_csv(&out.join(LOG_FILE))?;
    write_text(&out.join(CONFIG_FILE), &config.to_toml())?;
    model.save(&checkpoint)?;
    match result {
        Ok(_) => {
            println!("{}", checkpoint.display());
            Ok(())
        }
        Err(e @ CoreError::Divergence { .. }) => {
            let mut err = CliError::from(e);
            err.message = format!(
                "{}; state after epoch {} saved to {}; lower training.lr_covariate or training.lr_mesh and resume",
                err.message,
                model.epochs_trained,
                checkpoint.display()
            );
            Err(err)
        }
        Err(e) => Err(e.into()),
    }
}

pub fn reconstruct(config: &RunConfig, args: &SubjectArgs) -> Result<(), CliError> {
    let cohort = Cohort::open(config)?;
    let model = load_model(&checkpoint_path(config, &args.checkpoint.checkpoint), &cohort)?;
    let subject = cohort.subject(args.subject)?;
    let exo = model.abduct(&subject.record, &subject.mesh, LatentAbduction::Mean)?;
    let none = [Intervention::none()];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed_for(seed_tag::SAMPLING));
    let variants = [
        ("inferred", exo.u.clone()),
        ("mean", vec![0.0; exo.u.len()]),
        ("sampled", exo.u.iter().map(|_| StandardNormal.sample(&mut rng)).collect()),
    ];
    let dir = config.output_dir().join("reconstruct");
    create_dir(&dir)?;
    println!("variant   ved_mm");
    for (name, u) in variants {
        let mut e = exo.clone();
        e.u = u;
        let (_, mesh) = model.predict_batch(&[e], Some(&[subject.record]), &none)?.remove(0);
        write_displaced(&mesh, &subject.mesh, &dir.join(format!("subject_{}_{name}.ply", subject.id)))?;
        println!("{name:<9} {:.6}", ved(&mesh, &subject.mesh)?);
    }
    println!("{}", dir.display());
    Ok(())
}

pub fn intervene(config: &RunConfig, args: &InterveneArgs) -> Result<(), CliError> {
    if args.n == 0 {
        return Err(CliError::usage("-n must be positive"));
    }
    let iv = parse_intervention(&args.assignments.join(","))?;
    let cohort = Cohort::open(config)?;
    let model = load_model(&checkpoint_path(config, &args.checkpoint.checkpoint), &cohort)?;
    let seed = config.seed_for(seed_tag::SAMPLING);
    let samples = if args.zero_latent {
        model.intervene_population(&iv, &vec![0.0; model.cvae.latent_dim()], args.n, seed)?
    } else {
        model.sample_interventional(&iv, args.n, seed)?
    };
    let dir = config.output_dir().join("intervene");
    create_dir(&dir)?;
    let mut table = Table::new("samples", &["sample", "a", "s", "b", "v", "mesh"]);
    for (k, s) in samples.iter().enumerate() {
        let name = format!("sample_{k:04}.ply");
        write_displaced(&s.mesh, &model.template, &dir.join(&name))?;
        let r = s.record;
        table.push(vec![k.into(), r.a.into(), r.s.into(), r.b.into(), r.v.into(), name.into()]);
    }
    table.write_csv(&dir.join("samples.csv"))?;
    println!("{iv}: {} samples", samples.len());
    println!("{}", dir.display());
    Ok(())
}

pub fn counterfact(config: &RunConfig, args: &CounterfactArgs) -> Result<(), CliError> {
    let mut ivs = args.steps.iter().map(|s| parse_intervention(s)).collect::<Result<Vec<_>, _>>()?;
    if ivs.is_empty() {
        ivs.push(Intervention::none());
    }
    let cohort = Cohort::open(config)?;
    let model = load_model(&checkpoint_path(config, &args.checkpoint.checkpoint), &cohort)?;
    let subject = cohort.subject(args.subject)?;
    let path = csm_core::eval::counterfactual_path(&model, &subject, "counterfactual", ivs)?;
    let dir = config.output_dir().join("counterfact").join(format!("subject_{}", subject.id));
    create_dir(&dir)?;
    for (k, mesh) in path.meshes.iter().enumerate() {
        write_displaced(mesh, &subject.mesh, &dir.join(format!("step_{k:02}.ply")))?;
    }
    let table = path.table("trajectory");
    table.write_csv(&dir.join("trajectory.csv"))?;
    println!("{}", table.columns.join(","));
    for row in &table.rows {
        println!("{}", row.iter().map(Cell::render).collect::<Vec<_>>().join(","));
    }
    println!("{}", dir.display());
    Ok(())
}

fn bars(table: &Table, label: impl Fn(&[Cell]) -> String, column: &str) -> Vec<(String, f64)> {
    let Some(j) = table.column(column) else {
        return Vec::new();
    };
    table
        .rows
        .iter()
        .map(|r| (label(r), r[j].as_f64().unwrap_or(f64::NAN)))
        .collect()
}

fn figures(report: &EvalReport) -> Vec<(&'static str, String)> {
    let mut out = Vec::new();
    if let Some(t) = report.table("reconstruction") {
        let b = bars(t, |r| format!("{} {}", r[0].render(), r[1].render()), "mean_ved_mm");
        out.push(("reconstruction.svg", plot::bar_chart("Reconstruction error", "mean VED (mm)", &b)));
    }
    if !report.series.is_empty() {
        out.push(("compactness.svg", plot::line_chart("Cumulative explained variance", &report.series)));
    }
    if let Some(t) = report.table("specificity") {
        let b = bars(t, |r| r[0].render(), "mean_mm");
        out.push(("specificity.svg", plot::bar_chart("Specificity", "mean VED (mm)", &b)));
    }
    if let Some(t) = report.table("trait_preservation") {
        let b = bars(t, |r| r[0].render(), "median_ved_mm");
        out.push(("trait_preservation.svg", plot::bar_chart("Trait preservation", "median VED (mm)", &b)));
    }
    if let Some(t) = report.table("shape_projection") {
        let (x, y, a) = (t.column("x_embed"), t.column("y_embed"), t.column("a"));
        if let (Some(x), Some(y), Some(a)) = (x, y, a) {
            let points: Vec<(f64, f64, f64)> = t
                .rows
                .iter()
                .filter_map(|r| Some((r[x].as_f64()?, r[y].as_f64()?, r[a].as_f64()?)))
                .collect();
            out.push(("shape_projection.svg", plot::scatter("Shape projection, coloured by age", "x", "y", &points)));
        }
    }
    out
}

fn write_meshes(output: &SuiteOutput, subjects: &[&Subject], dir: &Path) -> Result<(), CliError> {
    if let Some(grid) = &output.interpolation {
        let d = dir.join("interpolation");
        create_dir(&d)?;
        write_mesh(&grid.mean, &d.join("mean.ply"))?;
        for e in &grid.entries {
            let name = format!("dim{}_{}.ply", e.dim, slug(&format!("{:+}", e.offset)));
            write_ply_with_scalar(&e.mesh, &e.displacement, &d.join(name))?;
        }
    }
    for (id, paths) in &output.trajectories {
        let observed = &subjects
            .iter()
            .find(|s| s.id == *id)
            .ok_or_else(|| CliError::internal(format!("trajectory subject {id} not loaded")))?
            .mesh;
        for p in paths {
            let d = dir.join("trajectories").join(format!("subject_{id}")).join(slug(&p.name));
            create_dir(&d)?;
            for (k, m) in p.meshes.iter().enumerate() {
                write_displaced(m, observed, &d.join(format!("step_{k:02}.ply")))?;
            }
        }
    }
    Ok(())
}

pub fn evaluate(config: &RunConfig, args: &EvaluateArgs) -> Result<(), CliError> {
    let suite: Suite = args.suite.parse().map_err(|e: CoreError| CliError::usage(e.to_string()))?;
    let cohort = Cohort::open(config)?;
    let model = load_model(&checkpoint_path(config, &args.checkpoint.checkpoint), &cohort)?;
    let train = cohort.split(Some(Split::Train))?;
    let test = cohort.split(Some(Split::Test))?;
    let output = run_suite(&model, &train, &test, &config.evaluation, suite, config.seed_for(seed_tag::EVALUATION))?;
    let dir = config.output_dir().join("report");
    output.report.write(&dir)?;
    for (name, svg) in figures(&output.report) {
        write_text(&dir.join(name), &svg)?;
    }
    let all: Vec<&Subject> = test.iter().chain(&train).collect();
    write_meshes(&output, &all, &dir)?;
    for t in &output.report.tables {
        println!("{:<40} {} rows", t.name, t.rows.len());
    }
    println!("{}", dir.display());
    Ok(())
}

pub fn export_mesh(args: &ExportArgs) -> Result<(), CliError> {
    let mesh = read_mesh(&args.input)?;
    match &args.reference {
        Some(reference) => {
            if MeshFormat::from_path(&args.output) != MeshFormat::Ply {
                return Err(CliError::usage("--reference needs a .ply output to carry signed_disp_mm"));
            }
            let reference = read_mesh_with_template(reference, &Arc::clone(mesh.topology()))?;
            write_displaced(&mesh, &reference, &args.output)?;
        }
        None => write_mesh(&mesh, &args.output)?,
    }
    println!("{}", args.output.display());
    Ok(())
}
