use csm_core::cohort::{GroundTruthScm, ScmParameters, Split, SplitSizes, Subject};
use csm_core::cvae::MeshCvaeConfig;
use csm_core::eval::*;
use csm_core::mesh::ved;
use csm_core::model::{CausalShapeModel, TrainConfig};
use csm_core::scm::{Intervention, Node};

fn setup() -> (CausalShapeModel, Vec<Subject>, Vec<Subject>) {
    let scm = GroundTruthScm::new(1, ScmParameters::default());
    let all = scm.sample_subjects(SplitSizes { train: 60, val: 0, test: 12 }, 3);
    let train: Vec<Subject> = all.iter().filter(|s| s.split == Split::Train).cloned().collect();
    let test: Vec<Subject> = all.iter().filter(|s| s.split == Split::Test).cloned().collect();
    let config = MeshCvaeConfig {
        latent_dim: 4,
        cheb_order: 3,
        channels: vec![6, 6],
        ..MeshCvaeConfig::default()
    };
    let mut model = CausalShapeModel::initialise(config, scm.template(), 2, &train).unwrap();
    let tc = TrainConfig {
        epochs: 3,
        batch_size: 16,
        lr_covariate: 1e-2,
        lr_mesh: 1e-3,
        seed: 1,
    };
    model.train(&train, &tc, |_| {}).unwrap();
    (model, train, test)
}

#[test]
fn reconstruction_table_layout_and_orderings() {
    let (model, train, test) = setup();
    let modes = [
        ReconstructionMode::Pca(4),
        ReconstructionMode::Pca(126),
        ReconstructionMode::SampledU,
        ReconstructionMode::InferredU,
    ];
    let report = reconstruction_table(&model, &train, &test, &modes, 5).unwrap();
    let t = report.table("reconstruction").unwrap();
    assert_eq!(
        t.columns,
        ["model_type", "latent_dim", "mean_ved_mm", "std_ved_mm", "median_ved_mm", "chamfer_mm"]
    );
    assert_eq!(t.rows.len(), 4);
    let mean = |row: usize| t.rows[row][2].as_f64().unwrap();
    // A complete basis reproduces every mesh.
    assert!(mean(1) < 1e-9, "{}", mean(1));
    assert!(mean(0) > mean(1));
    assert!(mean(3) < 1e-5);
    assert!(mean(2) > mean(3));
    assert_eq!(report, reconstruction_table(&model, &train, &test, &modes, 5).unwrap());
    assert!(reconstruction_table(&model, &train, &[], &modes, 5).is_err());
}

#[test]
fn compactness_curves() {
    let (_, train, _) = setup();
    let meshes: Vec<_> = train.iter().map(|s| &s.mesh).collect();
    let c = pca_compactness(&meshes, &meshes, 10).unwrap();
    assert_eq!(c.first, c.second);
    assert_eq!(c.first.len(), 10);
    let full = pca_compactness(&meshes, &meshes, 200).unwrap();
    assert!((full.first.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(full.rank_deficient);
}

#[test]
fn specificity_self_test_is_zero() {
    let (model, _, test) = setup();
    let z = vec![0.0; 4];
    let iv = Intervention::new([(Node::A, 60.0), (Node::S, 1.0)]).unwrap();
    let family = InterventionFamily {
        label: "do(a, s)".into(),
        settings: vec![iv.clone()],
    };
    let generated = model.intervene_population(&iv, &z, 1, derive_seed(9, 101)).unwrap();
    let own = Subject {
        id: 0,
        split: Split::Test,
        record: generated[0].record,
        mesh: generated[0].mesh.clone(),
    };
    let r = specificity(&model, &z, std::slice::from_ref(&family), 1, &[own], 9).unwrap();
    assert_eq!(r.table("specificity").unwrap().lookup("do(a, s)", "mean_mm"), Some(&Cell::Number(0.0)));

    let families = InterventionFamily::defaults(&model).unwrap();
    let r = specificity(&model, &z, &families, 3, &test, 9).unwrap();
    let t = r.table("specificity").unwrap();
    assert_eq!(t.columns, ["intervention", "mean_mm", "std_mm", "median_mm"]);
    let labels: Vec<_> = t.rows.iter().map(|r| r[0].clone()).collect();
    assert_eq!(labels, [Cell::from("do(a, s)"), Cell::from("do(b, v)")]);
    assert!(t.rows.iter().all(|r| r[1].as_f64().unwrap() > 0.0));
    assert_eq!(r, specificity(&model, &z, &families, 3, &test, 9).unwrap());
}

#[test]
fn latent_interpolation_grid() {
    let (model, train, _) = setup();
    let (v, b) = mean_volumes(&train).unwrap();
    let still = latent_interpolation(&model, &[0, 1], &[0.0], v, b).unwrap();
    for e in &still.entries {
        assert_eq!(ved(&e.mesh, &still.mean).unwrap(), 0.0);
    }
    let grid = latent_interpolation(&model, &[0, 1, 2, 3], &[-0.8, 0.8], v, b).unwrap();
    assert_eq!(grid.entries.len(), 8);
    assert!(grid.entries.iter().all(|e| e.mesh.same_topology(&grid.mean)));
    assert!(latent_interpolation(&model, &[4], &[0.8], v, b).is_err());
}

#[test]
fn trait_preservation_buckets() {
    let (model, _, test) = setup();
    let grid = trait_grid(&[-10.0, 0.0, 10.0]);
    let tp = trait_preservation(&model, &test, &grid).unwrap();
    let labels: Vec<String> = tp.buckets.iter().map(|b| b.intervention.label()).collect();
    assert_eq!(labels, ["do(a-10)", "do(a+0)", "do(a+10)", "do(s=0) male", "do(s=1) female"]);
    let identity = &tp.buckets[1];
    assert_eq!(identity.veds.len(), test.len());
    assert!(identity.median < 1e-5);
    let males = test.iter().filter(|s| s.record.s == 1.0).count();
    assert_eq!(tp.buckets[3].veds.len(), males);
    let report = tp.report(0);
    let t = report.table("trait_preservation").unwrap();
    assert_eq!(t.columns, ["bucket", "delta", "subjects", "median_ved_mm", "mean_ved_mm"]);
}

#[test]
fn trajectories_follow_the_graph() {
    let (model, _, test) = setup();
    let subject = &test[0];
    let grid = TrajectoryGrid::defaults(&model);
    assert_eq!(grid.age_offsets, [5.0, 10.0, 15.0, 20.0]);
    let paths = counterfactual_trajectories(&model, subject, &grid).unwrap();
    let names: Vec<&str> = paths.iter().map(|p| p.name.as_str()).collect();
    assert_eq!(
        names,
        ["do(a+T)", "do(a-T)", "do(s=S)", "do(a+T,s=S')", "do(a-T,s=S')", "do(b)", "do(v)"]
    );
    for p in &paths {
        let first = p.rows[0];
        assert!((first.b - subject.record.b).abs() < 1e-6 * subject.record.b, "{}", p.name);
        assert!((first.v - subject.record.v).abs() < 1e-6 * subject.record.v, "{}", p.name);
    }
    let dv = paths.iter().find(|p| p.name == "do(v)").unwrap();
    assert!(dv.rows.iter().all(|r| r.b == subject.record.b));
    assert_eq!(dv.rows.len(), 1 + grid.structure_volumes.len());
    let t = dv.table("trajectory");
    assert_eq!(t.columns, ["step", "a", "s", "b", "v", "ved_to_observed"]);
}

#[test]
fn shape_projection_is_seeded() {
    let (model, _, _) = setup();
    let z = vec![0.0; 4];
    let a = shape_projection(&model, &z, 40, 3, &PcaEmbedding).unwrap();
    assert_eq!(a.rows.len(), 40);
    assert_eq!(a.columns, ["x_embed", "y_embed", "a", "s", "b", "v"]);
    assert_eq!(a, shape_projection(&model, &z, 40, 3, &PcaEmbedding).unwrap());
    assert_eq!(DEFAULT_PROJECTION_SAMPLES, 5000);
}

#[test]
fn suite_runs_and_is_reproducible() {
    let (model, train, test) = setup();
    let config = EvalConfig {
        pca_modes: vec![4, 8],
        specificity_samples: 2,
        projection_samples: 20,
        interpolation_dims: vec![0, 1],
        compactness_modes: 5,
        ..EvalConfig::default()
    };
    let a = run_suite(&model, &train, &test, &config, Suite::All, 0).unwrap();
    let b = run_suite(&model, &train, &test, &config, Suite::All, 0).unwrap();
    assert_eq!(a.report.to_json().unwrap(), b.report.to_json().unwrap());
    for name in ["reconstruction", "compactness", "specificity", "latent_interpolation", "trait_preservation", "shape_projection"] {
        assert!(a.report.table(name).is_some(), "{name}");
    }
    let dir = tempfile::tempdir().unwrap();
    a.report.write(dir.path()).unwrap();
    assert!(dir.path().join("report.json").exists());
    assert!(dir.path().join("trait_preservation.csv").exists());
    assert!("bogus".parse::<Suite>().is_err());
    assert_eq!("traits".parse::<Suite>().unwrap(), Suite::Traits);
}
