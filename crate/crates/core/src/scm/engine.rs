//! Sampling, abduction, interventions and counterfactuals over a
//! [`CausalShapeModel`].

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{CovariateRecord, Intervention, Node};
use crate::flows::CovariateNoise;
use crate::mesh::SurfaceMesh;
use crate::model::{CausalShapeModel, EVAL_BATCH};
use crate::{Error, Result};

/// Every inferred noise term of one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExogenousState {
    pub covariates: CovariateNoise,
    pub z: Vec<f64>,
    /// Standardised mesh residual, flat `3|V|`.
    pub u: Vec<f64>,
}

/// One generated or counterfactual subject.
#[derive(Debug, Clone)]
pub struct ModelSample {
    pub record: CovariateRecord,
    pub mesh: SurfaceMesh,
    pub exogenous: ExogenousState,
}

/// How the latent code is chosen during abduction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LatentAbduction {
    /// Posterior mean; deterministic counterfactuals.
    #[default]
    Mean,
    /// Average of `count` posterior draws from the given seed.
    Sampled { count: usize, seed: u64 },
}

impl LatentAbduction {
    /// `0` selects the posterior mean.
    pub fn from_count(count: usize, seed: u64) -> Self {
        if count == 0 {
            Self::Mean
        } else {
            Self::Sampled { count, seed }
        }
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

impl CausalShapeModel {
    /// `log p(a) + log p(s) + log p(b | a, s) + log p(v | a, b)`.
    pub fn covariate_log_evidence(&self, record: &CovariateRecord) -> Result<f64> {
        self.flows.log_evidence(&self.store, record)
    }

    /// Conditioning vector of a covariate mechanism.
    fn context(&self, node: Node, r: &CovariateRecord) -> Result<Vec<f64>> {
        Ok(match node {
            Node::A | Node::S | Node::X => Vec::new(),
            Node::B => vec![r.s, self.flows.age.intermediate(r.a)?],
            Node::V => vec![self.flows.brain.intermediate(r.b)?, self.flows.age.intermediate(r.a)?],
        })
    }

    /// Covariates in topological order. Nodes outside the intervention's
    /// downstream set keep their factual values verbatim when `factual` is
    /// given; everything else is recomputed from the noise.
    pub fn propagate(
        &self,
        noise: &CovariateNoise,
        factual: Option<&CovariateRecord>,
        iv: &Intervention,
    ) -> Result<CovariateRecord> {
        let mut affected = BTreeSet::new();
        for (node, _) in iv.iter() {
            affected.insert(node);
            affected.extend(self.graph.descendants(node));
        }
        let mut r = CovariateRecord {
            a: f64::NAN,
            s: f64::NAN,
            b: f64::NAN,
            v: f64::NAN,
        };
        for node in self.graph.topological_order()? {
            if node == Node::X {
                continue;
            }
            let value = match (iv.get(node), factual) {
                (Some(v), _) => v,
                (None, Some(f)) if !affected.contains(&node) => f.get(node).expect("covariate node"),
                _ => {
                    let eps = match node {
                        Node::A => noise.eps_a,
                        Node::S => noise.eps_s,
                        Node::B => noise.eps_b,
                        _ => noise.eps_v,
                    };
                    let ctx = self.context(node, &r)?;
                    self.flows.mechanism(node)?.forward(&self.store, eps, &ctx)?.0
                }
            };
            r.set(node, value);
        }
        Ok(r)
    }

    fn conditioning(&self, r: &CovariateRecord) -> Result<(f64, f64)> {
        let h = self.flows.intermediates(r)?;
        Ok((h.v_hat, h.b_hat))
    }

    /// Mesh mechanism `x = mu(z; v, b) + sigma(z; v, b) * u`, batched.
    fn decode_meshes(&self, items: &[(&[f64], &[f64], CovariateRecord)]) -> Result<Vec<SurfaceMesh>> {
        let d = self.cvae.latent_dim();
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(EVAL_BATCH) {
            let mut zs = Array2::zeros((chunk.len(), d));
            let mut conds = Vec::with_capacity(chunk.len());
            for (i, (z, _, r)) in chunk.iter().enumerate() {
                if z.len() != d {
                    return Err(Error::DimensionMismatch(format!("latent of size {} for D = {d}", z.len())));
                }
                zs.row_mut(i).assign(&ndarray::ArrayView1::from(*z));
                conds.push(self.conditioning(r)?);
            }
            let params = self.cvae.decode_batch(&self.store, &zs, &conds)?;
            for ((_, u, _), p) in chunk.iter().zip(&params) {
                out.push(self.cvae.reparam_forward(u, p)?);
            }
        }
        Ok(out)
    }

    /// Prediction step for many subjects: propagate covariates, then
    /// regenerate every mesh from its `(z, u)`.
    pub fn predict_batch(
        &self,
        exogenous: &[ExogenousState],
        factual: Option<&[CovariateRecord]>,
        ivs: &[Intervention],
    ) -> Result<Vec<(CovariateRecord, SurfaceMesh)>> {
        if ivs.len() != exogenous.len() || factual.is_some_and(|f| f.len() != exogenous.len()) {
            return Err(Error::DimensionMismatch("one intervention and record per subject".into()));
        }
        let records = exogenous
            .iter()
            .enumerate()
            .map(|(i, e)| self.propagate(&e.covariates, factual.map(|f| &f[i]), &ivs[i]))
            .collect::<Result<Vec<_>>>()?;
        let items: Vec<_> = exogenous
            .iter()
            .zip(&records)
            .map(|(e, r)| (e.z.as_slice(), e.u.as_slice(), *r))
            .collect();
        let meshes = self.decode_meshes(&items)?;
        Ok(records.into_iter().zip(meshes).collect())
    }

    /// Replay exogenous noise through every mechanism.
    pub fn forward(&self, exogenous: &ExogenousState, iv: &Intervention) -> Result<(CovariateRecord, SurfaceMesh)> {
        Ok(self
            .predict_batch(std::slice::from_ref(exogenous), None, std::slice::from_ref(iv))?
            .remove(0))
    }

    /// Exact covariate inversion, latent from the encoder, then the exact
    /// residual `u = (x - mu) / sigma`.
    pub fn abduct_batch(
        &self,
        records: &[CovariateRecord],
        meshes: &[&SurfaceMesh],
        latent: LatentAbduction,
    ) -> Result<Vec<ExogenousState>> {
        if records.len() != meshes.len() {
            return Err(Error::DimensionMismatch("one record per mesh".into()));
        }
        let d = self.cvae.latent_dim();
        let mut out = Vec::with_capacity(records.len());
        for (offset, (rs, ms)) in records.chunks(EVAL_BATCH).zip(meshes.chunks(EVAL_BATCH)).enumerate() {
            let covariates = rs
                .iter()
                .map(|r| self.flows.abduct(&self.store, r))
                .collect::<Result<Vec<_>>>()?;
            let conds = rs.iter().map(|r| self.conditioning(r)).collect::<Result<Vec<_>>>()?;
            let posteriors = self.cvae.encode_batch(&self.store, ms, &conds)?;
            let mut zs = Array2::zeros((rs.len(), d));
            for (i, q) in posteriors.iter().enumerate() {
                let mut z = q.mu.clone();
                if let LatentAbduction::Sampled { count, seed } = latent {
                    let mut rng = stream_rng(seed, (offset * EVAL_BATCH + i) as u64);
                    let mut mean = vec![0.0; d];
                    for _ in 0..count {
                        for (m, e) in mean.iter_mut().zip(normal_vec(&mut rng, d)) {
                            *m += e / count as f64;
                        }
                    }
                    for ((z, lv), e) in z.iter_mut().zip(&q.log_var).zip(mean) {
                        *z += (0.5 * lv).exp() * e;
                    }
                }
                zs.row_mut(i).assign(&ndarray::Array1::from(z));
            }
            let params = self.cvae.decode_batch(&self.store, &zs, &conds)?;
            for (i, (p, m)) in params.iter().zip(ms).enumerate() {
                out.push(ExogenousState {
                    covariates: covariates[i],
                    z: zs.row(i).to_vec(),
                    u: self.cvae.reparam_inverse(m, p)?,
                });
            }
        }
        Ok(out)
    }

    pub fn abduct(&self, record: &CovariateRecord, mesh: &SurfaceMesh, latent: LatentAbduction) -> Result<ExogenousState> {
        Ok(self.abduct_batch(std::slice::from_ref(record), &[mesh], latent)?.remove(0))
    }

    /// Abduction, action and prediction for many subjects, each with its
    /// own intervention.
    pub fn counterfactual_batch(
        &self,
        records: &[CovariateRecord],
        meshes: &[&SurfaceMesh],
        ivs: &[Intervention],
        latent: LatentAbduction,
    ) -> Result<Vec<(CovariateRecord, SurfaceMesh)>> {
        let exogenous = self.abduct_batch(records, meshes, latent)?;
        self.predict_batch(&exogenous, Some(records), ivs)
    }

    /// Subject-specific counterfactual with the posterior-mean latent.
    pub fn counterfactual(
        &self,
        record: &CovariateRecord,
        mesh: &SurfaceMesh,
        iv: &Intervention,
    ) -> Result<(CovariateRecord, SurfaceMesh)> {
        Ok(self
            .counterfactual_batch(std::slice::from_ref(record), &[mesh], std::slice::from_ref(iv), LatentAbduction::Mean)?
            .remove(0))
    }

    fn draw_exogenous(&self, rng: &mut ChaCha8Rng, z: Option<&[f64]>) -> ExogenousState {
        let covariates = CovariateNoise {
            eps_a: StandardNormal.sample(rng),
            eps_s: if rng.random::<f64>() < self.flows.sex.theta { 1.0 } else { 0.0 },
            eps_b: StandardNormal.sample(rng),
            eps_v: StandardNormal.sample(rng),
        };
        let z = match z {
            Some(z) => z.to_vec(),
            None => normal_vec(rng, self.cvae.latent_dim()),
        };
        ExogenousState {
            covariates,
            z,
            u: normal_vec(rng, 3 * self.cvae.vertex_count()),
        }
    }

    fn generate(&self, n: usize, seed: u64, iv: &Intervention, z: Option<&[f64]>) -> Result<Vec<ModelSample>> {
        let exogenous: Vec<ExogenousState> = (0..n).map(|k| self.draw_exogenous(&mut stream_rng(seed, k as u64), z)).collect();
        let out = self.predict_batch(&exogenous, None, &vec![iv.clone(); n])?;
        Ok(out
            .into_iter()
            .zip(exogenous)
            .map(|((record, mesh), exogenous)| ModelSample { record, mesh, exogenous })
            .collect())
    }

    /// Ancestral samples; sample `k` uses RNG stream `k` of `seed`.
    pub fn sample_observational(&self, n: usize, seed: u64) -> Result<Vec<ModelSample>> {
        self.generate(n, seed, &Intervention::none(), None)
    }

    /// Post-interventional population with every exogenous variable,
    /// including the latent code, resampled per draw.
    pub fn sample_interventional(&self, iv: &Intervention, n: usize, seed: u64) -> Result<Vec<ModelSample>> {
        self.generate(n, seed, iv, None)
    }

    /// Post-interventional population at a fixed latent code: all other
    /// noise is resampled per draw.
    pub fn intervene_population(&self, iv: &Intervention, z: &[f64], n: usize, seed: u64) -> Result<Vec<ModelSample>> {
        if z.len() != self.cvae.latent_dim() {
            return Err(Error::DimensionMismatch(format!(
                "latent of size {} for D = {}",
                z.len(),
                self.cvae.latent_dim()
            )));
        }
        self.generate(n, seed, iv, Some(z))
    }
}
