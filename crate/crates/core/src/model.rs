//! The full causal shape model: covariate flows plus the mesh CVAE, trained
//! jointly on the evidence lower bound.

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape, Var};
use crate::cohort::Subject;
use crate::cvae::{tape_kl, tape_log_likelihood, MeshCvae, MeshCvaeConfig, MeshNormalisation};
use crate::flows::CovariateFlows;
use crate::mesh::SurfaceMesh;
use crate::nn::{Adam, Binding, ParamStore};
use crate::scm::{CausalGraph, CovariateRecord};
use crate::{Error, Result};

pub(crate) const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Total epochs; a resumed model continues up to this count.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_covariate: f64,
    pub lr_mesh: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 256,
            lr_covariate: 1e-3,
            lr_mesh: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        for (name, lr) in [("lr_covariate", self.lr_covariate), ("lr_mesh", self.lr_mesh)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be a non-negative number")));
            }
        }
        Ok(())
    }
}

/// Per-subject means of the objective and its parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub elbo: f64,
    /// Covariate log evidence `log p(a, s, b, v)`.
    pub alpha: f64,
    /// `log p(x | z, b, v)` in mm.
    pub log_likelihood: f64,
    pub kl: f64,
    /// Mean VED between the decoded mean shape and the input, mm.
    pub reconstruction_ved: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    #[serde(flatten)]
    pub terms: ElboTerms,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainingLog {
    /// Trailing moving average of the epoch ELBO.
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        let values: Vec<f64> = self.epochs.iter().map(|e| e.terms.elbo).collect();
        (0..values.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(window.max(1));
                values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
            })
            .collect()
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        self.write_rows(csv::Writer::from_path(path)?, true)
    }

    /// Append rows to an existing log, or start a new one with a header.
    pub fn append_csv(&self, path: &std::path::Path) -> Result<()> {
        if !path.exists() {
            return self.write_csv(path);
        }
        let file = std::fs::OpenOptions::new().append(true).open(path)?;
        self.write_rows(csv::Writer::from_writer(file), false)
    }

    fn write_rows<W: std::io::Write>(&self, mut w: csv::Writer<W>, header: bool) -> Result<()> {
        if header {
            w.write_record(["epoch", "elbo", "alpha", "log_likelihood", "kl", "reconstruction_ved", "seconds"])?;
        }
        for e in &self.epochs {
            let t = e.terms;
            w.write_record([
                e.epoch.to_string(),
                t.elbo.to_string(),
                t.alpha.to_string(),
                t.log_likelihood.to_string(),
                t.kl.to_string(),
                t.reconstruction_ved.to_string(),
                e.seconds.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Inputs of the objective for a set of subjects, precomputed once.
pub(crate) struct PreparedData {
    pub records: Vec<CovariateRecord>,
    /// `[n, 3|V|]` normalised coordinates.
    pub coords: Matrix,
    /// `[n, 2]` rows `(v_hat, b_hat)`.
    pub conds: Matrix,
}

impl PreparedData {
    fn batch(&self, index: &[usize]) -> PreparedData {
        let gather = |m: &Matrix| {
            let mut out = Array2::zeros((index.len(), m.ncols()));
            for (r, &i) in index.iter().enumerate() {
                out.row_mut(r).assign(&m.row(i));
            }
            out
        };
        PreparedData {
            records: index.iter().map(|&i| self.records[i]).collect(),
            coords: gather(&self.coords),
            conds: gather(&self.conds),
        }
    }

    fn len(&self) -> usize {
        self.records.len()
    }
}

/// Tape handles of one objective evaluation, all `[batch, 1]` except `mu`.
struct BatchObjective {
    alpha: Var,
    log_likelihood: Var,
    kl: Var,
    elbo: Var,
    /// Decoded mean in network units, `[batch, 3|V|]`.
    mu: Var,
}

/// Covariate flows, mesh CVAE and their shared parameters.
#[derive(Debug, Clone)]
pub struct CausalShapeModel {
    pub graph: CausalGraph,
    pub init_seed: u64,
    pub store: ParamStore,
    pub flows: CovariateFlows,
    pub cvae: MeshCvae,
    pub template: SurfaceMesh,
    pub epochs_trained: usize,
    pub optimizer: Option<Adam>,
}

impl CausalShapeModel {
    /// Fresh parameters; statistics still need [`Self::fit_statistics`].
    pub fn new(config: MeshCvaeConfig, template: SurfaceMesh, init_seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut store = ParamStore::new();
        let flows = CovariateFlows::new(&mut store, &mut rng);
        let cvae = MeshCvae::new(config, &template, &mut store, &mut rng)?;
        Ok(Self {
            graph: CausalGraph::default(),
            init_seed,
            store,
            flows,
            cvae,
            template,
            epochs_trained: 0,
            optimizer: None,
        })
    }

    /// Build a model and fit its frozen statistics on the training split.
    pub fn initialise(config: MeshCvaeConfig, template: SurfaceMesh, init_seed: u64, train: &[Subject]) -> Result<Self> {
        let mut model = Self::new(config, template, init_seed)?;
        model.fit_statistics(train)?;
        Ok(model)
    }

    pub fn fit_statistics(&mut self, train: &[Subject]) -> Result<()> {
        let records: Vec<CovariateRecord> = train.iter().map(|s| s.record).collect();
        self.flows.fit_statistics(&records)?;
        let meshes: Vec<&SurfaceMesh> = train.iter().map(|s| &s.mesh).collect();
        self.cvae.normalisation = MeshNormalisation::fit(&meshes)?;
        Ok(())
    }

    pub fn config(&self) -> &MeshCvaeConfig {
        &self.cvae.config
    }

    pub(crate) fn prepare(&self, records: &[CovariateRecord], meshes: &[&SurfaceMesh]) -> Result<PreparedData> {
        let n = records.len();
        let coords = self.cvae.normalised_batch(meshes)?;
        let coords = coords
            .into_shape_with_order((n, 3 * self.cvae.vertex_count()))
            .expect("row-major batch");
        let mut conds = Array2::zeros((n, 2));
        for (i, r) in records.iter().enumerate() {
            let h = self.flows.intermediates(r)?;
            conds[[i, 0]] = h.v_hat;
            conds[[i, 1]] = h.b_hat;
        }
        Ok(PreparedData {
            records: records.to_vec(),
            coords,
            conds,
        })
    }

    fn prepare_subjects(&self, subjects: &[Subject]) -> Result<PreparedData> {
        let records: Vec<CovariateRecord> = subjects.iter().map(|s| s.record).collect();
        let meshes: Vec<&SurfaceMesh> = subjects.iter().map(|s| &s.mesh).collect();
        self.prepare(&records, &meshes)
    }

    fn objective(&self, tape: &Tape, binding: &Binding, data: &PreparedData, noise: &Matrix) -> Result<BatchObjective> {
        let n = data.len();
        let v = self.cvae.vertex_count();
        let alpha = self.flows.tape_log_evidence(tape, binding, &self.store, &data.records)?;
        let cond = tape.constant(data.conds.clone());
        let x_rows = tape.constant(data.coords.clone());
        let x_stacked = tape.reshape(x_rows, n * v, 3);
        let (mu_z, log_var) = self.cvae.tape_encode(tape, binding, x_stacked, cond);
        let std = tape.exp(tape.scale(log_var, 0.5));
        let z = tape.add(mu_z, tape.mul(std, tape.constant(noise.clone())));
        let (mu, sigma) = self.cvae.tape_decode(tape, binding, z, cond);
        // Jacobian of the millimetre rescaling.
        let log_likelihood = tape.add_scalar(
            tape_log_likelihood(tape, x_rows, mu, sigma),
            -((3 * v) as f64) * self.cvae.normalisation.scale.ln(),
        );
        let kl = tape_kl(tape, mu_z, log_var);
        let elbo = tape.sub(tape.add(alpha, log_likelihood), kl);
        Ok(BatchObjective {
            alpha,
            log_likelihood,
            kl,
            elbo,
            mu,
        })
    }

    fn latent_noise(&self, rng: &mut ChaCha8Rng, n: usize) -> Matrix {
        Array2::from_shape_simple_fn((n, self.cvae.latent_dim()), || StandardNormal.sample(rng))
    }

    /// Sums of each term over the batch, checked for finiteness.
    fn batch_sums(&self, tape: &Tape, obj: &BatchObjective, data: &PreparedData, epoch: usize) -> Result<ElboTerms> {
        let sum = |v: Var| tape.value(v).sum();
        let (alpha, ll, kl) = (sum(obj.alpha), sum(obj.log_likelihood), sum(obj.kl));
        for (term, value) in [("alpha", alpha), ("log_likelihood", ll), ("kl", kl)] {
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    term: term.into(),
                });
            }
        }
        let mu = tape.value(obj.mu);
        let scale = self.cvae.normalisation.scale;
        let mut ved = 0.0;
        for (m, x) in mu.rows().into_iter().zip(data.coords.rows()) {
            let m = m.as_slice().expect("row");
            let x = x.as_slice().expect("row");
            ved += scale * crate::mesh::ved_flat(m, x);
        }
        Ok(ElboTerms {
            elbo: alpha + ll - kl,
            alpha,
            log_likelihood: ll,
            kl,
            reconstruction_ved: ved,
        })
    }

    /// Single-sample ELBO estimate averaged over subjects; deterministic in
    /// `seed`.
    pub fn elbo(&self, subjects: &[Subject], seed: u64) -> Result<ElboTerms> {
        if subjects.is_empty() {
            return Err(Error::EmptyInput("no subjects for the ELBO".into()));
        }
        let data = self.prepare_subjects(subjects)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut total = ElboTerms::zero();
        let index: Vec<usize> = (0..data.len()).collect();
        for chunk in index.chunks(EVAL_BATCH) {
            let batch = data.batch(chunk);
            let noise = self.latent_noise(&mut rng, chunk.len());
            let tape = Tape::new();
            let binding = self.store.bind(&tape, false);
            let obj = self.objective(&tape, &binding, &batch, &noise)?;
            total.accumulate(&self.batch_sums(&tape, &obj, &batch, self.epochs_trained)?);
        }
        Ok(total.divided(data.len() as f64))
    }

    /// [`Self::elbo`] together with its gradient for every parameter, in
    /// store order.
    pub fn elbo_gradient(&self, subjects: &[Subject], seed: u64) -> Result<(ElboTerms, Vec<Matrix>)> {
        if subjects.is_empty() {
            return Err(Error::EmptyInput("no subjects for the ELBO".into()));
        }
        let data = self.prepare_subjects(subjects)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut total = ElboTerms::zero();
        let mut grads: Vec<Matrix> = self.store.ids().map(|id| Array2::zeros(self.store.get(id).dim())).collect();
        let index: Vec<usize> = (0..data.len()).collect();
        for chunk in index.chunks(EVAL_BATCH) {
            let batch = data.batch(chunk);
            let noise = self.latent_noise(&mut rng, chunk.len());
            let tape = Tape::new();
            let binding = self.store.bind(&tape, true);
            let obj = self.objective(&tape, &binding, &batch, &noise)?;
            total.accumulate(&self.batch_sums(&tape, &obj, &batch, self.epochs_trained)?);
            let g = tape.backward(tape.sum(obj.elbo));
            for (id, acc) in self.store.ids().zip(grads.iter_mut()) {
                if let Some(d) = g.get(binding.var(id)) {
                    *acc += d;
                }
            }
        }
        let n = data.len() as f64;
        grads.iter_mut().for_each(|g| *g /= n);
        Ok((total.divided(n), grads))
    }

    /// Gradient ascent on the ELBO over all mechanisms jointly. Runs until
    /// `config.epochs` epochs have been trained in total. On a non-finite
    /// loss the parameters of the last completed epoch are restored and a
    /// divergence error is returned.
    pub fn train(
        &mut self,
        train: &[Subject],
        config: &TrainConfig,
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<TrainingLog> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::EmptyInput("no training subjects".into()));
        }
        let data = self.prepare_subjects(train)?;
        let mut optimizer = self
            .optimizer
            .take()
            .unwrap_or_else(|| Adam::new(&self.store, config.lr_covariate, config.lr_mesh));
        optimizer.lr_covariate = config.lr_covariate;
        optimizer.lr_mesh = config.lr_mesh;
        let mut log = TrainingLog::default();
        while self.epochs_trained < config.epochs {
            let epoch = self.epochs_trained + 1;
            let started = Instant::now();
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(epoch as u64);
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut rng);
            let snapshot = (self.store.clone(), optimizer.clone());
            let mut total = ElboTerms::zero();
            for chunk in order.chunks(config.batch_size) {
                let batch = data.batch(chunk);
                let noise = self.latent_noise(&mut rng, chunk.len());
                let tape = Tape::new();
                let binding = self.store.bind(&tape, true);
                let step = self
                    .objective(&tape, &binding, &batch, &noise)
                    .and_then(|obj| Ok((self.batch_sums(&tape, &obj, &batch, epoch)?, obj)));
                let (sums, obj) = match step {
                    Ok(v) => v,
                    Err(e) => {
                        (self.store, optimizer) = snapshot;
                        self.optimizer = Some(optimizer);
                        return Err(match e {
                            Error::NonFinite(term) => Error::Divergence { epoch, term },
                            other => other,
                        });
                    }
                };
                total.accumulate(&sums);
                let loss = tape.scale(tape.mean(obj.elbo), -1.0);
                let grads = tape.backward(loss);
                optimizer.step(&mut self.store, &binding, &grads);
            }
            self.epochs_trained = epoch;
            let entry = EpochLog {
                epoch,
                terms: total.divided(data.len() as f64),
                seconds: started.elapsed().as_secs_f64(),
            };
            on_epoch(&entry);
            log.epochs.push(entry);
        }
        self.optimizer = Some(optimizer);
        Ok(log)
    }
}

impl ElboTerms {
    fn zero() -> Self {
        Self {
            elbo: 0.0,
            alpha: 0.0,
            log_likelihood: 0.0,
            kl: 0.0,
            reconstruction_ved: 0.0,
        }
    }

    fn accumulate(&mut self, o: &ElboTerms) {
        self.elbo += o.elbo;
        self.alpha += o.alpha;
        self.log_likelihood += o.log_likelihood;
        self.kl += o.kl;
        self.reconstruction_ved += o.reconstruction_ved;
    }

    fn divided(self, n: f64) -> Self {
        Self {
            elbo: self.elbo / n,
            alpha: self.alpha / n,
            log_likelihood: self.log_likelihood / n,
            kl: self.kl / n,
            reconstruction_ved: self.reconstruction_ved / n,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{GroundTruthScm, ScmParameters, Split, SplitSizes};
    use crate::cvae::{gaussian_log_likelihood, kl_standard_normal};
    use crate::flows::std_normal_log_density;
    use crate::nn::ParamGroup;

    fn tiny() -> (CausalShapeModel, Vec<Subject>) {
        let scm = GroundTruthScm::new(1, ScmParameters::default());
        let subjects: Vec<Subject> = scm
            .sample_subjects(SplitSizes { train: 20, val: 0, test: 0 }, 4)
            .into_iter()
            .filter(|s| s.split == Split::Train)
            .collect();
        let config = MeshCvaeConfig {
            latent_dim: 2,
            cheb_order: 2,
            channels: vec![3, 3],
            ..MeshCvaeConfig::default()
        };
        (CausalShapeModel::initialise(config, scm.template(), 3, &subjects).unwrap(), subjects)
    }

    #[test]
    fn elbo_is_alpha_plus_mesh_terms() {
        let (model, subjects) = tiny();
        let t = model.elbo(&subjects, 0).unwrap();
        assert!((t.elbo - (t.alpha + t.log_likelihood - t.kl)).abs() < 1e-9);
        let alpha: f64 = subjects
            .iter()
            .map(|s| model.covariate_log_evidence(&s.record).unwrap())
            .sum::<f64>()
            / subjects.len() as f64;
        assert!((t.alpha - alpha).abs() < 1e-9);
        assert!(t.kl >= 0.0);
        assert_eq!(t, model.elbo(&subjects, 0).unwrap());
    }

    #[test]
    fn elbo_lower_bounds_importance_sampled_evidence() {
        let (model, subjects) = tiny();
        let s = &subjects[0];
        let h = model.flows.intermediates(&s.record).unwrap();
        let q = model.cvae.encode(&model.store, &s.mesh, h.v_hat, h.b_hat).unwrap();
        let x = s.mesh.flatten();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut log_w = Vec::new();
        let mut ll = Vec::new();
        for _ in 0..1000 {
            let e: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
            let z: Vec<f64> = (0..2).map(|i| q.mu[i] + (0.5 * q.log_var[i]).exp() * e[i]).collect();
            let p = model.cvae.decode(&model.store, &z, h.v_hat, h.b_hat).unwrap();
            let lx = gaussian_log_likelihood(&x, &p);
            let log_prior: f64 = z.iter().map(|&v| std_normal_log_density(v)).sum();
            let log_q: f64 = (0..2)
                .map(|i| std_normal_log_density(e[i]) - 0.5 * q.log_var[i])
                .sum();
            log_w.push(lx + log_prior - log_q);
            ll.push(lx);
        }
        let m = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_evidence = m + (log_w.iter().map(|w| (w - m).exp()).sum::<f64>() / 1000.0).ln();
        let elbo = ll.iter().sum::<f64>() / 1000.0 - kl_standard_normal(&q.mu, &q.log_var);
        assert!(elbo <= log_evidence + 1e-9, "{elbo} vs {log_evidence}");
    }

    #[test]
    fn divergence_names_the_term() {
        let (mut model, subjects) = tiny();
        let id = model
            .store
            .ids()
            .find(|&id| model.store.name(id) == "decoder.output.bias")
            .unwrap();
        assert_eq!(model.store.group(id), ParamGroup::Mesh);
        model.store.get_mut(id)[[0, 0]] = f64::NAN;
        let err = model.train(&subjects, &TrainConfig { epochs: 1, batch_size: 8, ..TrainConfig::default() }, |_| {});
        match err {
            Err(Error::Divergence { epoch, term }) => {
                assert_eq!(epoch, 1);
                assert_eq!(term, "log_likelihood");
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(model.epochs_trained, 0);
        assert!(model.optimizer.is_some());
    }

    #[test]
    fn config_and_log_helpers() {
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr_mesh: f64::NAN, ..TrainConfig::default() }.validate().is_err());
        let d = TrainConfig::default();
        assert_eq!((d.epochs, d.batch_size, d.lr_covariate, d.lr_mesh), (1000, 256, 1e-3, 1e-4));
        let entry = |epoch, elbo| EpochLog {
            epoch,
            terms: ElboTerms { elbo, ..ElboTerms::zero() },
            seconds: 0.0,
        };
        let log = TrainingLog {
            epochs: vec![entry(1, 1.0), entry(2, 3.0), entry(3, 2.0)],
        };
        assert_eq!(log.moving_average(2), vec![1.0, 2.0, 2.5]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        log.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("epoch,elbo,alpha,log_likelihood,kl,reconstruction_ved,seconds\n1,1,"));
        log.append_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert_eq!(text.matches("epoch").count(), 1);
    }

    #[test]
    fn elbo_gradient_matches_finite_differences() {
        let (mut model, subjects) = tiny();
        let subjects = &subjects[..4];
        let (terms, grads) = model.elbo_gradient(subjects, 2).unwrap();
        assert_eq!(terms, model.elbo(subjects, 2).unwrap());
        let h = 1e-6;
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let g = grads[id.0].clone();
            for idx in [0, g.len() - 1] {
                let (r, c) = (idx / g.ncols(), idx % g.ncols());
                let orig = model.store.get(id)[[r, c]];
                model.store.get_mut(id)[[r, c]] = orig + h;
                let up = model.elbo(subjects, 2).unwrap().elbo;
                model.store.get_mut(id)[[r, c]] = orig - h;
                let down = model.elbo(subjects, 2).unwrap().elbo;
                model.store.get_mut(id)[[r, c]] = orig;
                let fd = (up - down) / (2.0 * h);
                assert!((fd - g[[r, c]]).abs() <= 1e-4 * (1.0 + fd.abs()), "{}: {fd} vs {}", model.store.name(id), g[[r, c]]);
            }
        }
    }

    #[test]
    fn short_training_improves_the_elbo() {
        let (mut model, subjects) = tiny();
        let before = model.elbo(&subjects, 1).unwrap().elbo;
        let tc = TrainConfig { epochs: 5, batch_size: 5, lr_covariate: 1e-2, lr_mesh: 1e-3, seed: 0 };
        let log = model.train(&subjects, &tc, |_| {}).unwrap();
        assert_eq!(log.epochs.len(), 5);
        assert_eq!(model.epochs_trained, 5);
        assert!(model.elbo(&subjects, 1).unwrap().elbo > before);
    }
}
