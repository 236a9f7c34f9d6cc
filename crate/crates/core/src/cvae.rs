//! The amortised mesh mechanism: a conditional VAE built from Chebyshev
//! convolutions over a quadric simplification hierarchy, with a
//! location-scale head `x = mu + sigma * u`.

use std::sync::Arc;

use ndarray::{Array2, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape, Var};
use crate::mesh::{cheb_conv, gather_rows, CsrMatrix, SimplificationHierarchy, SurfaceMesh};
use crate::nn::{fan_in_uniform, Binding, Dense, ParamGroup, ParamId, ParamStore};
use crate::{Error, Result};

/// Width of the conditioning vector `[v_hat, b_hat]`.
pub const CONDITIONING_DIM: usize = 2;
const LOG_VAR_LIMIT: f64 = 12.0;
const HALF_LOG_TWO_PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshCvaeConfig {
    pub latent_dim: usize,
    pub cheb_order: usize,
    pub pool_factor: f64,
    /// Encoder channels per level, finest first; the decoder mirrors them.
    pub channels: Vec<usize>,
    /// Lower bound on the likelihood scale, mm.
    pub sigma_floor: f64,
}

impl Default for MeshCvaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            cheb_order: 10,
            pool_factor: 2.0,
            channels: vec![32, 64, 128],
            sigma_floor: 1e-4,
        }
    }
}

impl MeshCvaeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.latent_dim == 0 {
            return bad("latent_dim must be at least 1");
        }
        if self.cheb_order == 0 {
            return bad("cheb_order must be at least 1");
        }
        if !(self.pool_factor > 1.0 && self.pool_factor.is_finite()) {
            return bad("pool_factor must be > 1");
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad("channels must be a non-empty list of positive widths");
        }
        if !(self.sigma_floor > 0.0) {
            return bad("sigma_floor must be positive");
        }
        Ok(())
    }
}

/// `(mu, log_var)` of the diagonal Gaussian posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

/// Per-coordinate Gaussian likelihood parameters in mm, flattened
/// `[x0, y0, z0, x1, ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodParams {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Affine map between millimetres and network units: `x = mean + scale * x_n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshNormalisation {
    pub mean: Vec<f64>,
    pub scale: f64,
}

impl MeshNormalisation {
    /// Mean shape and pooled coordinate standard deviation.
    pub fn fit(meshes: &[&SurfaceMesh]) -> Result<Self> {
        let first = meshes
            .first()
            .ok_or_else(|| Error::EmptyInput("no meshes to normalise".into()))?;
        let dim = 3 * first.vertex_count();
        let mut mean = vec![0.0; dim];
        for m in meshes {
            for (acc, x) in mean.iter_mut().zip(m.vertices().iter()) {
                *acc += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= meshes.len() as f64);
        let mut ss = 0.0;
        for m in meshes {
            ss += m.vertices().iter().zip(&mean).map(|(x, mu)| (x - mu).powi(2)).sum::<f64>();
        }
        let scale = (ss / (meshes.len() * dim) as f64).sqrt();
        if !(scale > 0.0) {
            return Err(Error::ZeroVariance);
        }
        Ok(Self { mean, scale })
    }

    fn normalise_into(&self, mesh: &SurfaceMesh, out: &mut [f64]) {
        for ((o, x), mu) in out.iter_mut().zip(mesh.vertices().iter()).zip(&self.mean) {
            *o = (x - mu) / self.scale;
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ChebLayer {
    weight: ParamId,
    bias: ParamId,
    order: usize,
}

impl ChebLayer {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, order: usize, f_in: usize, f_out: usize) -> Self {
        let fan_in = order * f_in;
        Self {
            weight: store.add(
                format!("{name}.weight"),
                ParamGroup::Mesh,
                fan_in_uniform(rng, fan_in, f_out, fan_in),
            ),
            bias: store.add(format!("{name}.bias"), ParamGroup::Mesh, Array2::zeros((1, f_out))),
            order,
        }
    }

    fn forward(&self, tape: &Tape, b: &Binding, lap: &Arc<CsrMatrix>, x: Var) -> Var {
        let y = cheb_conv(tape, lap, x, b.var(self.weight), self.order);
        tape.add(y, b.var(self.bias))
    }
}

/// Encoder, decoder and likelihood head of the mesh mechanism.
#[derive(Debug, Clone)]
pub struct MeshCvae {
    pub config: MeshCvaeConfig,
    pub hierarchy: SimplificationHierarchy,
    pub normalisation: MeshNormalisation,
    laplacians: Vec<Arc<CsrMatrix>>,
    encoder: Vec<ChebLayer>,
    encoder_head: Dense,
    decoder_lift: Dense,
    decoder: Vec<ChebLayer>,
    output: ChebLayer,
}

impl MeshCvae {
    /// Build the hierarchy from `template` and register all parameters.
    pub fn new(
        config: MeshCvaeConfig,
        template: &SurfaceMesh,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let depth = config.channels.len();
        let hierarchy = SimplificationHierarchy::build(template, &vec![config.pool_factor; depth])?;
        let mut laplacians = vec![template.topology().scale_laplacian()];
        laplacians.extend(hierarchy.levels.iter().map(|l| l.coarse.scale_laplacian()));
        let k = config.cheb_order;
        let ch = &config.channels;
        let coarsest = *hierarchy.vertex_counts().last().expect("non-empty hierarchy");
        let flat = coarsest * ch[depth - 1];

        let encoder = (0..depth)
            .map(|i| {
                let f_in = if i == 0 { 3 } else { ch[i - 1] };
                ChebLayer::new(store, rng, &format!("encoder.cheb{i}"), k, f_in, ch[i])
            })
            .collect();
        let encoder_head = Dense::new(
            store,
            rng,
            "encoder.head",
            ParamGroup::Mesh,
            flat + CONDITIONING_DIM,
            2 * config.latent_dim,
        );
        let decoder_lift = Dense::new(
            store,
            rng,
            "decoder.lift",
            ParamGroup::Mesh,
            config.latent_dim + CONDITIONING_DIM,
            flat,
        );
        // decoder[i] runs at level i after unpooling from level i + 1.
        let decoder = (0..depth)
            .map(|i| {
                let f_in = if i == depth - 1 { ch[depth - 1] } else { ch[i + 1] };
                ChebLayer::new(store, rng, &format!("decoder.cheb{i}"), k, f_in, ch[i])
            })
            .collect();
        let output = ChebLayer::new(store, rng, "decoder.output", k, ch[0], 6);
        let normalisation = MeshNormalisation {
            mean: template.flatten(),
            scale: 1.0,
        };
        Ok(Self {
            config,
            hierarchy,
            normalisation,
            laplacians,
            encoder,
            encoder_head,
            decoder_lift,
            decoder,
            output,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.hierarchy.levels[0].fine.vertex_count()
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn check_mesh(&self, mesh: &SurfaceMesh) -> Result<()> {
        let template = &self.hierarchy.levels[0].fine;
        if !Arc::ptr_eq(mesh.topology(), template) && **mesh.topology() != **template {
            return Err(Error::TopologyMismatch("mesh does not share the model template".into()));
        }
        Ok(())
    }

    /// Normalised coordinates stacked as `[batch * |V|, 3]`.
    pub fn normalised_batch(&self, meshes: &[&SurfaceMesh]) -> Result<Matrix> {
        let n = self.vertex_count();
        let mut out = Array2::zeros((meshes.len() * n, 3));
        let data = out.as_slice_mut().expect("standard layout");
        for (i, m) in meshes.iter().enumerate() {
            self.check_mesh(m)?;
            self.normalise_into(m, &mut data[i * 3 * n..(i + 1) * 3 * n]);
        }
        Ok(out)
    }

    fn normalise_into(&self, mesh: &SurfaceMesh, out: &mut [f64]) {
        self.normalisation.normalise_into(mesh, out)
    }

    /// Posterior parameters `([batch, D], [batch, D])` from normalised
    /// meshes `[batch * |V|, 3]` and conditioning `[batch, 2]`.
    pub fn tape_encode(&self, tape: &Tape, b: &Binding, x: Var, cond: Var) -> (Var, Var) {
        let batch = tape.shape(cond).0;
        let mut h = x;
        for (i, layer) in self.encoder.iter().enumerate() {
            h = tape.elu(layer.forward(tape, b, &self.laplacians[i], h));
            let level = &self.hierarchy.levels[i];
            h = gather_rows(tape, h, &level.survivors, level.fine.vertex_count());
        }
        let rows = tape.shape(h).0;
        let flat = tape.reshape(h, batch, rows / batch * tape.shape(h).1);
        let head = self.encoder_head.forward(tape, b, tape.concat_cols(&[flat, cond]));
        let d = self.config.latent_dim;
        let mu = tape.slice_cols(head, 0, d);
        let log_var = tape.clamp(tape.slice_cols(head, d, 2 * d), -LOG_VAR_LIMIT, LOG_VAR_LIMIT);
        (mu, log_var)
    }

    /// Normalised likelihood parameters, each `[batch, 3|V|]`; the scale
    /// includes the floor expressed in network units.
    pub fn tape_decode(&self, tape: &Tape, b: &Binding, z: Var, cond: Var) -> (Var, Var) {
        let batch = tape.shape(z).0;
        let depth = self.config.channels.len();
        let coarse_channels = self.config.channels[depth - 1];
        let lifted = self.decoder_lift.forward(tape, b, tape.concat_cols(&[z, cond]));
        let coarsest = tape.shape(lifted).1 / coarse_channels;
        let mut h = tape.reshape(lifted, batch * coarsest, coarse_channels);
        for i in (0..depth).rev() {
            let level = &self.hierarchy.levels[i];
            h = gather_rows(tape, h, &level.parent, level.coarse.vertex_count());
            h = tape.elu(self.decoder[i].forward(tape, b, &self.laplacians[i], h));
        }
        let out = self.output.forward(tape, b, &self.laplacians[0], h);
        let n = self.vertex_count();
        let mu = tape.reshape(tape.slice_cols(out, 0, 3), batch, 3 * n);
        let pre = tape.reshape(tape.slice_cols(out, 3, 6), batch, 3 * n);
        let floor = self.config.sigma_floor / self.normalisation.scale;
        let sigma = tape.add_scalar(tape.softplus(pre), floor);
        (mu, sigma)
    }

    fn conditioning(v_hat: &[f64], b_hat: &[f64]) -> Matrix {
        Array2::from_shape_fn((v_hat.len(), CONDITIONING_DIM), |(i, j)| if j == 0 { v_hat[i] } else { b_hat[i] })
    }

    /// Batched encoder; `conds` rows are `(v_hat, b_hat)`.
    pub fn encode_batch(&self, store: &ParamStore, meshes: &[&SurfaceMesh], conds: &[(f64, f64)]) -> Result<Vec<EncoderOutput>> {
        if meshes.len() != conds.len() {
            return Err(Error::DimensionMismatch("one conditioning pair per mesh".into()));
        }
        if meshes.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.normalised_batch(meshes)?;
        let (v, b): (Vec<f64>, Vec<f64>) = conds.iter().copied().unzip();
        let tape = Tape::new();
        let binding = store.bind(&tape, false);
        let (mu, lv) = self.tape_encode(&tape, &binding, tape.constant(x), tape.constant(Self::conditioning(&v, &b)));
        let (mu, lv) = (tape.value(mu), tape.value(lv));
        Ok(mu
            .rows()
            .into_iter()
            .zip(lv.rows())
            .map(|(m, l)| EncoderOutput {
                mu: m.to_vec(),
                log_var: l.to_vec(),
            })
            .collect())
    }

    pub fn encode(&self, store: &ParamStore, mesh: &SurfaceMesh, v_hat: f64, b_hat: f64) -> Result<EncoderOutput> {
        Ok(self.encode_batch(store, &[mesh], &[(v_hat, b_hat)])?.remove(0))
    }

    /// Batched decoder; `zs` is `[batch, D]`.
    pub fn decode_batch(&self, store: &ParamStore, zs: &Matrix, conds: &[(f64, f64)]) -> Result<Vec<LikelihoodParams>> {
        if zs.ncols() != self.config.latent_dim || zs.nrows() != conds.len() {
            return Err(Error::DimensionMismatch(format!(
                "latent batch {:?} with {} conditioning pairs, D = {}",
                zs.dim(),
                conds.len(),
                self.config.latent_dim
            )));
        }
        if zs.iter().chain(conds.iter().flat_map(|(a, b)| [a, b])).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("decoder input".into()));
        }
        if conds.is_empty() {
            return Ok(Vec::new());
        }
        let (v, b): (Vec<f64>, Vec<f64>) = conds.iter().copied().unzip();
        let tape = Tape::new();
        let binding = store.bind(&tape, false);
        let (mu, sigma) = self.tape_decode(&tape, &binding, tape.constant(zs.clone()), tape.constant(Self::conditioning(&v, &b)));
        let (mu, sigma) = (tape.value(mu), tape.value(sigma));
        let norm = &self.normalisation;
        Ok(mu
            .axis_iter(Axis(0))
            .zip(sigma.axis_iter(Axis(0)))
            .map(|(m, s)| LikelihoodParams {
                mu: m.iter().zip(&norm.mean).map(|(m, c)| c + norm.scale * m).collect(),
                sigma: s.iter().map(|s| norm.scale * s).collect(),
            })
            .collect())
    }

    pub fn decode(&self, store: &ParamStore, z: &[f64], v_hat: f64, b_hat: f64) -> Result<LikelihoodParams> {
        let zs = Array2::from_shape_vec((1, z.len()), z.to_vec()).expect("row");
        Ok(self.decode_batch(store, &zs, &[(v_hat, b_hat)])?.remove(0))
    }

    /// `x = u * sigma + mu` on the model topology.
    pub fn reparam_forward(&self, u: &[f64], params: &LikelihoodParams) -> Result<SurfaceMesh> {
        let flat = reparam_forward(u, params, self.config.sigma_floor)?;
        SurfaceMesh::from_flat(Arc::clone(&self.hierarchy.levels[0].fine), &flat)
    }

    pub fn reparam_inverse(&self, x: &SurfaceMesh, params: &LikelihoodParams) -> Result<Vec<f64>> {
        self.check_mesh(x)?;
        reparam_inverse(x.vertices().as_slice().expect("standard layout"), params, self.config.sigma_floor)
    }
}

fn check_params(len: usize, params: &LikelihoodParams, floor: f64) -> Result<()> {
    if params.mu.len() != len || params.sigma.len() != len {
        return Err(Error::DimensionMismatch(format!(
            "likelihood of size {}/{} for {len} coordinates",
            params.mu.len(),
            params.sigma.len()
        )));
    }
    // Relative slack for the floor added in network units and rescaled.
    if let Some(s) = params.sigma.iter().find(|&&s| !(s >= floor * (1.0 - 1e-9))) {
        return Err(Error::Domain(format!("likelihood scale {s} below floor {floor}")));
    }
    Ok(())
}

/// Location-scale map `u -> mu + sigma * u` on flat vectors.
pub fn reparam_forward(u: &[f64], params: &LikelihoodParams, floor: f64) -> Result<Vec<f64>> {
    check_params(u.len(), params, floor)?;
    Ok(u.iter()
        .zip(&params.mu)
        .zip(&params.sigma)
        .map(|((u, m), s)| m + s * u)
        .collect())
}

/// Exact inverse `x -> (x - mu) / sigma`.
pub fn reparam_inverse(x: &[f64], params: &LikelihoodParams, floor: f64) -> Result<Vec<f64>> {
    check_params(x.len(), params, floor)?;
    Ok(x.iter()
        .zip(&params.mu)
        .zip(&params.sigma)
        .map(|((x, m), s)| (x - m) / s)
        .collect())
}

/// `log p(x | z)` by change of variables through the location-scale head.
pub fn gaussian_log_likelihood(x: &[f64], params: &LikelihoodParams) -> f64 {
    x.iter()
        .zip(&params.mu)
        .zip(&params.sigma)
        .map(|((x, m), s)| {
            let u = (x - m) / s;
            crate::flows::std_normal_log_density(u) - s.ln()
        })
        .sum()
}

/// `KL(N(mu, exp(log_var)) || N(0, I))`.
pub fn kl_standard_normal(mu: &[f64], log_var: &[f64]) -> f64 {
    mu.iter()
        .zip(log_var)
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

/// Differentiable per-row KL, `[batch, 1]`.
pub fn tape_kl(tape: &Tape, mu: Var, log_var: Var) -> Var {
    let d = tape.shape(mu).1 as f64;
    let inner = tape.sub(tape.add(tape.square(mu), tape.exp(log_var)), log_var);
    tape.add_scalar(tape.scale(tape.sum_cols(inner), 0.5), -0.5 * d)
}

/// Differentiable per-row `log p(x | z)` in network units, `[batch, 1]`;
/// add `-3|V| log(scale)` for millimetres.
pub fn tape_log_likelihood(tape: &Tape, x: Var, mu: Var, sigma: Var) -> Var {
    let u = tape.div(tape.sub(x, mu), sigma);
    let log_density = tape.add_scalar(tape.scale(tape.square(u), -0.5), -HALF_LOG_TWO_PI);
    tape.sum_cols(tape.sub(log_density, tape.ln(sigma)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::make_icosphere;
    use rand::SeedableRng;

    fn toy() -> (MeshCvae, ParamStore, SurfaceMesh) {
        let template = make_icosphere(1);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let config = MeshCvaeConfig {
            latent_dim: 4,
            cheb_order: 3,
            channels: vec![4, 6],
            ..MeshCvaeConfig::default()
        };
        let cvae = MeshCvae::new(config, &template, &mut store, &mut rng).unwrap();
        (cvae, store, template)
    }

    #[test]
    fn encode_decode_shapes_and_determinism() {
        let (cvae, store, template) = toy();
        let e = cvae.encode(&store, &template, 0.3, -0.2).unwrap();
        assert_eq!(e.mu.len(), 4);
        assert_eq!(e, cvae.encode(&store, &template, 0.3, -0.2).unwrap());
        let d = cvae.decode(&store, &e.mu, 0.3, -0.2).unwrap();
        assert_eq!(d.mu.len(), 3 * 42);
        assert!(d.sigma.iter().all(|&s| s >= cvae.config.sigma_floor));
    }

    #[test]
    fn conditioning_changes_the_decoder_output() {
        let (cvae, store, _) = toy();
        let z = [0.1, -0.4, 0.2, 0.0];
        let a = cvae.decode(&store, &z, 0.0, 0.0).unwrap();
        let b = cvae.decode(&store, &z, 1.5, 0.0).unwrap();
        let c = cvae.decode(&store, &z, 0.0, 1.5).unwrap();
        assert_ne!(a.mu, b.mu);
        assert_ne!(a.mu, c.mu);
    }

    #[test]
    fn batched_decode_matches_single() {
        let (cvae, store, _) = toy();
        let zs = ndarray::array![[0.1, 0.2, 0.3, 0.4], [-1.0, 0.0, 1.0, 2.0]];
        let conds = [(0.1, 0.2), (-0.5, 0.7)];
        let batch = cvae.decode_batch(&store, &zs, &conds).unwrap();
        for (i, row) in zs.rows().into_iter().enumerate() {
            let single = cvae.decode(&store, &row.to_vec(), conds[i].0, conds[i].1).unwrap();
            for (x, y) in single.mu.iter().zip(&batch[i].mu) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reparam_round_trip_and_log_det() {
        let (cvae, store, template) = toy();
        let params = cvae.decode(&store, &[0.0; 4], 0.0, 0.0).unwrap();
        let u = cvae.reparam_inverse(&template, &params).unwrap();
        let back = cvae.reparam_forward(&u, &params).unwrap();
        let err = crate::mesh::ved(&back, &template).unwrap();
        assert!(err < 1e-9, "{err}");
        // log p(x) = sum log N(u) - sum log sigma
        let direct = gaussian_log_likelihood(&template.flatten(), &params);
        let via_u: f64 = u.iter().map(|&u| crate::flows::std_normal_log_density(u)).sum::<f64>()
            - params.sigma.iter().map(|s| s.ln()).sum::<f64>();
        assert!((direct - via_u).abs() < 1e-9);
    }

    #[test]
    fn reparam_rejects_scale_below_floor() {
        let params = LikelihoodParams {
            mu: vec![0.0; 3],
            sigma: vec![1.0, 1e-6, 1.0],
        };
        assert!(matches!(reparam_forward(&[0.0; 3], &params, 1e-4), Err(Error::Domain(_))));
        assert!(matches!(reparam_forward(&[0.0; 2], &params, 1e-4), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn kl_vanishes_at_the_prior() {
        assert_eq!(kl_standard_normal(&[0.0; 5], &[0.0; 5]), 0.0);
        assert!(kl_standard_normal(&[0.5], &[0.1]) > 0.0);
        let tape = Tape::new();
        let mu = tape.constant(ndarray::array![[0.0, 0.0], [0.5, -1.0]]);
        let lv = tape.constant(ndarray::array![[0.0, 0.0], [0.2, -0.3]]);
        let kl = tape.to_owned(tape_kl(&tape, mu, lv));
        assert!(kl[[0, 0]].abs() < 1e-15);
        let expect = kl_standard_normal(&[0.5, -1.0], &[0.2, -0.3]);
        assert!((kl[[1, 0]] - expect).abs() < 1e-12);
    }

    #[test]
    fn decoder_rejects_bad_latents() {
        let (cvae, store, _) = toy();
        assert!(matches!(cvae.decode(&store, &[0.0; 3], 0.0, 0.0), Err(Error::DimensionMismatch(_))));
        assert!(matches!(cvae.decode(&store, &[f64::NAN, 0.0, 0.0, 0.0], 0.0, 0.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn encoder_rejects_foreign_topology() {
        let (cvae, store, _) = toy();
        let other = make_icosphere(2);
        assert!(matches!(cvae.encode(&store, &other, 0.0, 0.0), Err(Error::TopologyMismatch(_))));
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let (cvae, mut store, template) = toy();
        let x = cvae.normalised_batch(&[&template]).unwrap();
        let cond = ndarray::array![[0.2, -0.1]];
        let eps = ndarray::array![[0.3, -0.2, 0.5, 0.1]];
        let objective = |store: &ParamStore, trainable: bool| {
            let tape = Tape::new();
            let b = store.bind(&tape, trainable);
            let c = tape.constant(cond.clone());
            let (mu, lv) = cvae.tape_encode(&tape, &b, tape.constant(x.clone()), c);
            let z = tape.add(mu, tape.mul(tape.exp(tape.scale(lv, 0.5)), tape.constant(eps.clone())));
            let (m, s) = cvae.tape_decode(&tape, &b, z, c);
            let x_rows = tape.constant(x.clone().into_shape_with_order((1, 126)).unwrap());
            let ll = tape_log_likelihood(&tape, x_rows, m, s);
            let loss = tape.sum(tape.sub(ll, tape_kl(&tape, mu, lv)));
            let value = tape.scalar(loss);
            let grads = trainable.then(|| {
                let g = tape.backward(loss);
                store.ids().map(|id| g.get(b.var(id)).cloned()).collect::<Vec<_>>()
            });
            (value, grads)
        };
        let (_, grads) = objective(&store, true);
        let grads = grads.unwrap();
        let h = 1e-6;
        for id in store.ids().collect::<Vec<_>>() {
            let g = grads[id.0].clone().unwrap();
            for idx in [0, g.len() / 2, g.len() - 1] {
                let (r, c) = (idx / g.ncols(), idx % g.ncols());
                let orig = store.get(id)[[r, c]];
                store.get_mut(id)[[r, c]] = orig + h;
                let up = objective(&store, false).0;
                store.get_mut(id)[[r, c]] = orig - h;
                let down = objective(&store, false).0;
                store.get_mut(id)[[r, c]] = orig;
                let fd = (up - down) / (2.0 * h);
                let tol = 1e-5 * (1.0 + fd.abs());
                assert!((fd - g[[r, c]]).abs() < tol, "{} [{r},{c}]: fd {fd} vs {}", store.name(id), g[[r, c]]);
            }
        }
    }
}
