//! Versioned JSON checkpoints of a [`CausalShapeModel`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cvae::{MeshCvaeConfig, MeshNormalisation};
use crate::flows::CovariateStatistics;
use crate::mesh::{MeshTopology, SurfaceMesh};
use crate::model::CausalShapeModel;
use crate::nn::{Adam, ParamRecord};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "csm-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TemplateRecord {
    hash: String,
    vertices: Vec<[f64; 3]>,
    faces: Vec<[usize; 3]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: MeshCvaeConfig,
    init_seed: u64,
    epochs_trained: usize,
    template: TemplateRecord,
    statistics: CovariateStatistics,
    normalisation: MeshNormalisation,
    params: Vec<ParamRecord>,
    optimizer: Option<Adam>,
}

impl CausalShapeModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let topo = self.template.topology();
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.cvae.config.clone(),
            init_seed: self.init_seed,
            epochs_trained: self.epochs_trained,
            template: TemplateRecord {
                hash: topo.content_hash(),
                vertices: self.template.vertices().rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect(),
                faces: topo.faces().to_vec(),
            },
            statistics: self.flows.statistics(),
            normalisation: self.cvae.normalisation.clone(),
            params: self.store.to_records(),
            optimizer: self.optimizer.clone(),
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &file)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_reader(BufReader::new(File::open(path)?))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("not a checkpoint (format `{}`)", file.format)));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                file.version
            )));
        }
        let t = &file.template;
        let topology = Arc::new(MeshTopology::new(t.faces.clone(), t.vertices.len())?);
        if topology.content_hash() != t.hash {
            return Err(Error::Checkpoint("template hash does not match stored faces".into()));
        }
        let vertices = Array2::from_shape_vec(
            (t.vertices.len(), 3),
            t.vertices.iter().flatten().copied().collect(),
        )
        .expect("three columns");
        let template = SurfaceMesh::new(topology, vertices)?;
        let mut model = CausalShapeModel::new(file.config, template, file.init_seed)?;
        model.store.load_records(&file.params)?;
        model.flows.set_statistics(file.statistics);
        if file.normalisation.mean.len() != 3 * model.cvae.vertex_count() {
            return Err(Error::Checkpoint("mesh normalisation has the wrong size".into()));
        }
        model.cvae.normalisation = file.normalisation;
        model.epochs_trained = file.epochs_trained;
        model.optimizer = file.optimizer;
        Ok(model)
    }

    /// Load and refuse a checkpoint trained on a different template.
    pub fn load_for_template(path: &Path, template: &MeshTopology) -> Result<Self> {
        let model = Self::load(path)?;
        let (expected, found) = (template.content_hash(), model.template.topology().content_hash());
        if expected != found {
            return Err(Error::Checkpoint(format!(
                "checkpoint template {} does not match {}",
                &found[..12],
                &expected[..12]
            )));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{make_icosphere, GroundTruthScm, ScmParameters, Split, SplitSizes};
    use crate::model::TrainConfig;

    #[test]
    fn round_trip_reproduces_elbo_and_resumes() {
        let scm = GroundTruthScm::new(1, ScmParameters::default());
        let subjects = scm.sample_subjects(SplitSizes { train: 24, val: 0, test: 8 }, 5);
        let train: Vec<_> = subjects.iter().filter(|s| s.split == Split::Train).cloned().collect();
        let config = MeshCvaeConfig {
            latent_dim: 3,
            cheb_order: 2,
            channels: vec![4, 4],
            ..MeshCvaeConfig::default()
        };
        let mut model = CausalShapeModel::initialise(config, scm.template(), 7, &train).unwrap();
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 8,
            lr_mesh: 1e-3,
            ..TrainConfig::default()
        };
        model.train(&train, &tc, |_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        let loaded = CausalShapeModel::load(&path).unwrap();
        assert_eq!(loaded.epochs_trained, 2);
        let (a, b) = (model.elbo(&subjects, 1).unwrap(), loaded.elbo(&subjects, 1).unwrap());
        assert!((a.elbo - b.elbo).abs() < 1e-9, "{a:?} {b:?}");

        // Continuing from the checkpoint matches uninterrupted training.
        let more = TrainConfig { epochs: 3, ..tc };
        let mut resumed = loaded;
        let log = resumed.train(&train, &more, |_| {}).unwrap();
        assert_eq!(log.epochs.iter().map(|e| e.epoch).collect::<Vec<_>>(), vec![3]);
        model.train(&train, &more, |_| {}).unwrap();
        for id in model.store.ids() {
            assert_eq!(model.store.get(id), resumed.store.get(id));
        }

        assert!(CausalShapeModel::load_for_template(&path, scm.topology()).is_ok());
        let other = make_icosphere(2);
        assert!(matches!(
            CausalShapeModel::load_for_template(&path, other.topology()),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, "{\"format\": 3}").unwrap();
        assert!(matches!(CausalShapeModel::load(&path), Err(Error::Checkpoint(_))));
        assert!(matches!(CausalShapeModel::load(&dir.path().join("missing.json")), Err(Error::Io(_))));
    }
}
