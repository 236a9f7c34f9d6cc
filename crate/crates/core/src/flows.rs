//! Invertible covariate mechanisms: a linear spline for age, conditional
//! affine flows for the volumes, all under an `exp` of a fixed whitening in
//! log space, and a Bernoulli root for sex.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape, Var};
use crate::nn::{Binding, Dense, ParamGroup, ParamId, ParamStore};
use crate::scm::{CovariateRecord, Node};
use crate::{Error, Result};

pub const SPLINE_BINS: usize = 8;
pub const SPLINE_BOUND: f64 = 3.0;
/// Every bin keeps at least this fraction of the interval.
const MIN_BIN_FRACTION: f64 = 1e-3;
pub const LOG_SCALE_LIMIT: f64 = 7.0;
const HIDDEN: [usize; 2] = [8, 16];
const LEAKY_SLOPE: f64 = 0.1;
const HALF_LOG_TWO_PI: f64 = 0.918_938_533_204_672_8;

pub fn std_normal_log_density(x: f64) -> f64 {
    -0.5 * x * x - HALF_LOG_TWO_PI
}

fn check_finite(x: f64, what: &str) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Whitening in log space: `log x = location + scale * x_hat`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineNormalisation {
    pub location: f64,
    pub scale: f64,
}

impl Default for AffineNormalisation {
    fn default() -> Self {
        Self {
            location: 0.0,
            scale: 1.0,
        }
    }
}

impl AffineNormalisation {
    pub fn new(location: f64, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite() && location.is_finite()) {
            return Err(Error::Domain(format!("normalisation ({location}, {scale})")));
        }
        Ok(Self { location, scale })
    }

    pub fn forward(&self, whitened: f64) -> f64 {
        self.location + self.scale * whitened
    }

    pub fn inverse(&self, log_value: f64) -> f64 {
        (log_value - self.location) / self.scale
    }
}

/// Mean and standard deviation of `log(samples)`.
pub fn fit_normalisation(samples: &[f64]) -> Result<AffineNormalisation> {
    if samples.len() < 2 {
        return Err(Error::EmptyInput("normalisation needs at least two samples".into()));
    }
    if let Some(x) = samples.iter().find(|&&x| !(x > 0.0)) {
        return Err(Error::Domain(format!("normalisation sample {x} is not positive")));
    }
    let logs: Vec<f64> = samples.iter().map(|x| x.ln()).collect();
    let n = logs.len() as f64;
    let mean = logs.iter().sum::<f64>() / n;
    let var = logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    if sd <= 1e-12 * mean.abs().max(1.0) {
        return Err(Error::ZeroVariance);
    }
    AffineNormalisation::new(mean, sd)
}

/// Knot positions of the spline for the current parameters.
struct Knots {
    xs: [f64; SPLINE_BINS + 1],
    ys: [f64; SPLINE_BINS + 1],
    widths: [f64; SPLINE_BINS],
    heights: [f64; SPLINE_BINS],
    soft_w: [f64; SPLINE_BINS],
    soft_h: [f64; SPLINE_BINS],
}

fn softmax(logits: &[f64]) -> [f64; SPLINE_BINS] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = [0.0; SPLINE_BINS];
    let mut total = 0.0;
    for (o, l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
    out
}

/// Derivative of a bin size with respect to its softmax input.
const BIN_GAIN: f64 = 2.0 * SPLINE_BOUND * (1.0 - SPLINE_BINS as f64 * MIN_BIN_FRACTION);

impl Knots {
    fn new(width_logits: &[f64], height_logits: &[f64]) -> Self {
        let soft_w = softmax(width_logits);
        let soft_h = softmax(height_logits);
        let floor = 2.0 * SPLINE_BOUND * MIN_BIN_FRACTION;
        let mut widths = [0.0; SPLINE_BINS];
        let mut heights = [0.0; SPLINE_BINS];
        let mut xs = [-SPLINE_BOUND; SPLINE_BINS + 1];
        let mut ys = [-SPLINE_BOUND; SPLINE_BINS + 1];
        for k in 0..SPLINE_BINS {
            widths[k] = floor + BIN_GAIN * soft_w[k];
            heights[k] = floor + BIN_GAIN * soft_h[k];
            xs[k + 1] = xs[k] + widths[k];
            ys[k + 1] = ys[k] + heights[k];
        }
        // Pin the last knot so rounding cannot move the tails.
        xs[SPLINE_BINS] = SPLINE_BOUND;
        ys[SPLINE_BINS] = SPLINE_BOUND;
        Self {
            xs,
            ys,
            widths,
            heights,
            soft_w,
            soft_h,
        }
    }

    fn bin(knots: &[f64; SPLINE_BINS + 1], t: f64) -> Option<usize> {
        if !(-SPLINE_BOUND..SPLINE_BOUND).contains(&t) {
            return None;
        }
        Some(knots[1..SPLINE_BINS].partition_point(|&k| k <= t))
    }

    fn forward(&self, x: f64) -> (f64, f64) {
        match Self::bin(&self.xs, x) {
            None => (x, 0.0),
            Some(k) => {
                let slope = self.heights[k] / self.widths[k];
                (self.ys[k] + (x - self.xs[k]) * slope, slope.ln())
            }
        }
    }

    fn inverse(&self, y: f64) -> (f64, f64) {
        match Self::bin(&self.ys, y) {
            None => (y, 0.0),
            Some(k) => {
                let slope = self.widths[k] / self.heights[k];
                (self.xs[k] + (y - self.ys[k]) * slope, slope.ln())
            }
        }
    }
}

/// Softmax backward for `size_j = floor + gain * softmax(theta)_j`.
fn bin_logit_grad(grad_size: &[f64; SPLINE_BINS], soft: &[f64; SPLINE_BINS]) -> Matrix {
    let dot: f64 = grad_size.iter().zip(soft).map(|(g, s)| g * s).sum();
    Array2::from_shape_fn((1, SPLINE_BINS), |(_, i)| BIN_GAIN * soft[i] * (grad_size[i] - dot))
}

/// Monotone piecewise-linear map of `[-B, B]` onto itself with identity
/// tails; bin widths and heights are softmax-parameterised.
#[derive(Debug, Clone, Copy)]
pub struct LinearSpline {
    pub width_logits: ParamId,
    pub height_logits: ParamId,
}

impl LinearSpline {
    /// Zero logits give the identity.
    pub fn new(store: &mut ParamStore, name: &str) -> Self {
        let zeros = || Array2::zeros((1, SPLINE_BINS));
        Self {
            width_logits: store.add(format!("{name}.width_logits"), ParamGroup::Covariate, zeros()),
            height_logits: store.add(format!("{name}.height_logits"), ParamGroup::Covariate, zeros()),
        }
    }

    fn knots(&self, store: &ParamStore) -> Knots {
        Knots::new(
            store.get(self.width_logits).as_slice().expect("row vector"),
            store.get(self.height_logits).as_slice().expect("row vector"),
        )
    }

    /// `(spline(x), log spline'(x))`.
    pub fn forward(&self, store: &ParamStore, x: f64) -> (f64, f64) {
        self.knots(store).forward(x)
    }

    /// `(spline^-1(y), log |d spline^-1 / dy|)`.
    pub fn inverse(&self, store: &ParamStore, y: f64) -> (f64, f64) {
        self.knots(store).inverse(y)
    }

    /// Differentiable inverse over a batch of fixed outputs; returns the
    /// noise and the inverse log-derivative, each `[n, 1]`.
    pub fn tape_inverse(&self, tape: &Tape, binding: &Binding, store: &ParamStore, ys: &[f64]) -> (Var, Var) {
        let knots = self.knots(store);
        let n = ys.len();
        let mut value = Array2::zeros((n, 2));
        let mut bins = Vec::with_capacity(n);
        for (i, &y) in ys.iter().enumerate() {
            let (x, ld) = knots.inverse(y);
            value[[i, 0]] = x;
            value[[i, 1]] = ld;
            bins.push(Knots::bin(&knots.ys, y));
        }
        let ys = ys.to_vec();
        let out = tape.custom(
            &[binding.var(self.width_logits), binding.var(self.height_logits)],
            value,
            Box::new(move |c| {
                let mut gw = [0.0; SPLINE_BINS];
                let mut gh = [0.0; SPLINE_BINS];
                for (i, bin) in bins.iter().enumerate() {
                    let Some(k) = *bin else { continue };
                    let (g_eps, g_ld) = (c.grad[[i, 0]], c.grad[[i, 1]]);
                    let (w, h) = (knots.widths[k], knots.heights[k]);
                    let offset = ys[i] - knots.ys[k];
                    for j in 0..k {
                        gw[j] += g_eps;
                        gh[j] -= g_eps * w / h;
                    }
                    gw[k] += g_eps * offset / h + g_ld / w;
                    gh[k] -= g_eps * offset * w / (h * h) + g_ld / h;
                }
                vec![
                    c.needs[0].then(|| bin_logit_grad(&gw, &knots.soft_w)),
                    c.needs[1].then(|| bin_logit_grad(&gh, &knots.soft_h)),
                ]
            }),
        );
        (tape.slice_cols(out, 0, 1), tape.slice_cols(out, 1, 2))
    }
}

/// `y = loc(ctx) + exp(log_scale(ctx)) * x`, with separate two-hidden-layer
/// networks for location and log-scale.
#[derive(Debug, Clone)]
pub struct ConditionalAffine {
    pub context_dim: usize,
    loc: [Dense; 3],
    log_scale: [Dense; 3],
}

fn mlp(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input: usize) -> [Dense; 3] {
    let g = ParamGroup::Covariate;
    [
        Dense::new(store, rng, &format!("{name}.0"), g, input, HIDDEN[0]),
        Dense::new(store, rng, &format!("{name}.1"), g, HIDDEN[0], HIDDEN[1]),
        Dense::new(store, rng, &format!("{name}.2"), g, HIDDEN[1], 1),
    ]
}

fn mlp_tape(layers: &[Dense; 3], tape: &Tape, binding: &Binding, x: Var) -> Var {
    let h = tape.leaky_relu(layers[0].forward(tape, binding, x), LEAKY_SLOPE);
    let h = tape.leaky_relu(layers[1].forward(tape, binding, h), LEAKY_SLOPE);
    layers[2].forward(tape, binding, h)
}

fn mlp_plain(layers: &[Dense; 3], store: &ParamStore, x: &Matrix) -> Matrix {
    let leaky = |m: Matrix| m.mapv(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v });
    let h = leaky(layers[0].apply(store, x));
    let h = leaky(layers[1].apply(store, &h));
    layers[2].apply(store, &h)
}

impl ConditionalAffine {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, context_dim: usize) -> Self {
        Self {
            context_dim,
            loc: mlp(store, rng, &format!("{name}.loc"), context_dim),
            log_scale: mlp(store, rng, &format!("{name}.log_scale"), context_dim),
        }
    }

    fn check_context(&self, context: &[f64]) -> Result<()> {
        if context.len() != self.context_dim {
            return Err(Error::DimensionMismatch(format!(
                "context of length {}, expected {}",
                context.len(),
                self.context_dim
            )));
        }
        Ok(())
    }

    /// `(location, clamped log-scale)` for one context.
    pub fn params(&self, store: &ParamStore, context: &[f64]) -> Result<(f64, f64)> {
        self.check_context(context)?;
        let x = Array2::from_shape_vec((1, context.len()), context.to_vec()).expect("row");
        let loc = mlp_plain(&self.loc, store, &x)[[0, 0]];
        let ls = mlp_plain(&self.log_scale, store, &x)[[0, 0]];
        Ok((
            check_finite(loc, "affine location")?,
            check_finite(ls, "affine log-scale")?.clamp(-LOG_SCALE_LIMIT, LOG_SCALE_LIMIT),
        ))
    }

    /// `(y, log dy/dx)`.
    pub fn forward(&self, store: &ParamStore, x: f64, context: &[f64]) -> Result<(f64, f64)> {
        let (loc, ls) = self.params(store, context)?;
        Ok((loc + ls.exp() * x, ls))
    }

    /// `(x, log dx/dy)`.
    pub fn inverse(&self, store: &ParamStore, y: f64, context: &[f64]) -> Result<(f64, f64)> {
        let (loc, ls) = self.params(store, context)?;
        Ok(((y - loc) * (-ls).exp(), -ls))
    }

    /// Batched `(location, log-scale)` on the tape, each `[n, 1]`.
    pub fn tape_params(&self, tape: &Tape, binding: &Binding, context: Var) -> (Var, Var) {
        let loc = mlp_tape(&self.loc, tape, binding, context);
        let ls = mlp_tape(&self.log_scale, tape, binding, context);
        (loc, tape.clamp(ls, -LOG_SCALE_LIMIT, LOG_SCALE_LIMIT))
    }
}

/// The invertible part below the `exp` head.
#[derive(Debug, Clone)]
pub enum Transform {
    Spline(LinearSpline),
    Affine(ConditionalAffine),
}

/// `value = exp(normalisation(transform(eps; context)))`.
#[derive(Debug, Clone)]
pub struct FlowMechanism {
    pub node: Node,
    pub transform: Transform,
    pub normalisation: AffineNormalisation,
}

impl FlowMechanism {
    pub fn context_dim(&self) -> usize {
        match &self.transform {
            Transform::Spline(_) => 0,
            Transform::Affine(a) => a.context_dim,
        }
    }

    fn below_head(&self, store: &ParamStore, eps: f64, context: &[f64]) -> Result<(f64, f64)> {
        match &self.transform {
            Transform::Spline(s) => {
                if !context.is_empty() {
                    return Err(Error::DimensionMismatch("root mechanism takes no context".into()));
                }
                Ok(s.forward(store, eps))
            }
            Transform::Affine(a) => a.forward(store, eps, context),
        }
    }

    /// `(value, intermediate)`.
    pub fn forward(&self, store: &ParamStore, eps: f64, context: &[f64]) -> Result<(f64, f64)> {
        let (hat, _) = self.below_head(store, eps, context)?;
        check_finite(hat, &format!("{} intermediate", self.node))?;
        let value = self.normalisation.forward(hat).exp();
        Ok((check_finite(value, &format!("{} value", self.node))?, hat))
    }

    /// Partial inversion of the `exp` head.
    pub fn intermediate(&self, value: f64) -> Result<f64> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{} value", self.node)));
        }
        if value <= 0.0 {
            return Err(Error::Domain(format!("{} = {value} must be positive", self.node)));
        }
        Ok(self.normalisation.inverse(value.ln()))
    }

    /// `(eps, intermediate)`.
    pub fn inverse(&self, store: &ParamStore, value: f64, context: &[f64]) -> Result<(f64, f64)> {
        let hat = self.intermediate(value)?;
        let eps = match &self.transform {
            Transform::Spline(s) => s.inverse(store, hat).0,
            Transform::Affine(a) => a.inverse(store, hat, context)?.0,
        };
        Ok((eps, hat))
    }

    /// `log |d value / d eps|`.
    pub fn log_abs_det_jacobian(&self, store: &ParamStore, eps: f64, context: &[f64]) -> Result<f64> {
        let (hat, ld) = self.below_head(store, eps, context)?;
        Ok(self.normalisation.forward(hat) + self.normalisation.scale.ln() + ld)
    }

    pub fn log_prob(&self, store: &ParamStore, value: f64, context: &[f64]) -> Result<f64> {
        let (eps, _) = self.inverse(store, value, context)?;
        Ok(std_normal_log_density(eps) - self.log_abs_det_jacobian(store, eps, context)?)
    }
}

/// Sex: `s = eps_s` with `eps_s ~ Bernoulli(theta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BernoulliMechanism {
    pub theta: f64,
}

impl BernoulliMechanism {
    /// Closed-form maximum likelihood: the sample mean.
    pub fn fit(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyInput("no sex samples".into()));
        }
        if let Some(s) = samples.iter().find(|&&s| s != 0.0 && s != 1.0) {
            return Err(Error::Domain(format!("sex value {s} is not binary")));
        }
        Ok(Self {
            theta: samples.iter().sum::<f64>() / samples.len() as f64,
        })
    }

    pub fn forward(&self, eps: f64) -> f64 {
        eps
    }

    pub fn inverse(&self, s: f64) -> f64 {
        s
    }

    pub fn log_prob(&self, s: f64) -> Result<f64> {
        match s {
            1.0 => Ok(self.theta.ln()),
            0.0 => Ok((1.0 - self.theta).ln()),
            v => Err(Error::Domain(format!("sex value {v} has no probability mass"))),
        }
    }
}

/// A single node's assignment, for uniform access across node kinds.
#[derive(Debug, Clone, Copy)]
pub enum CovariateMechanism<'a> {
    Flow(&'a FlowMechanism),
    Bernoulli(&'a BernoulliMechanism),
}

impl CovariateMechanism<'_> {
    pub fn forward(&self, store: &ParamStore, eps: f64, context: &[f64]) -> Result<(f64, f64)> {
        match self {
            Self::Flow(f) => f.forward(store, eps, context),
            Self::Bernoulli(b) => Ok((b.forward(eps), eps)),
        }
    }

    pub fn inverse(&self, store: &ParamStore, value: f64, context: &[f64]) -> Result<(f64, f64)> {
        match self {
            Self::Flow(f) => f.inverse(store, value, context),
            Self::Bernoulli(b) => Ok((b.inverse(value), value)),
        }
    }

    pub fn log_prob(&self, store: &ParamStore, value: f64, context: &[f64]) -> Result<f64> {
        match self {
            Self::Flow(f) => f.log_prob(store, value, context),
            Self::Bernoulli(b) => b.log_prob(value),
        }
    }
}

/// Whitened log values below the `exp` heads; these condition every
/// downstream network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intermediates {
    pub a_hat: f64,
    pub b_hat: f64,
    pub v_hat: f64,
}

/// Exogenous noise of the covariate mechanisms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovariateNoise {
    pub eps_a: f64,
    pub eps_s: f64,
    pub eps_b: f64,
    pub eps_v: f64,
}

/// Frozen statistics of the covariate mechanisms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovariateStatistics {
    pub age: AffineNormalisation,
    pub brain: AffineNormalisation,
    pub structure: AffineNormalisation,
    pub male_fraction: f64,
}

/// The four covariate mechanisms.
#[derive(Debug, Clone)]
pub struct CovariateFlows {
    pub age: FlowMechanism,
    pub sex: BernoulliMechanism,
    pub brain: FlowMechanism,
    pub structure: FlowMechanism,
}

impl CovariateFlows {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let flow = |node, transform| FlowMechanism {
            node,
            transform,
            normalisation: AffineNormalisation::default(),
        };
        Self {
            age: flow(Node::A, Transform::Spline(LinearSpline::new(store, "age.spline"))),
            sex: BernoulliMechanism { theta: 0.5 },
            brain: flow(Node::B, Transform::Affine(ConditionalAffine::new(store, rng, "brain.affine", 2))),
            structure: flow(
                Node::V,
                Transform::Affine(ConditionalAffine::new(store, rng, "structure.affine", 2)),
            ),
        }
    }

    pub fn mechanism(&self, node: Node) -> Result<CovariateMechanism<'_>> {
        match node {
            Node::A => Ok(CovariateMechanism::Flow(&self.age)),
            Node::S => Ok(CovariateMechanism::Bernoulli(&self.sex)),
            Node::B => Ok(CovariateMechanism::Flow(&self.brain)),
            Node::V => Ok(CovariateMechanism::Flow(&self.structure)),
            Node::X => Err(Error::UnknownNode("x is not a covariate".into())),
        }
    }

    pub fn statistics(&self) -> CovariateStatistics {
        CovariateStatistics {
            age: self.age.normalisation,
            brain: self.brain.normalisation,
            structure: self.structure.normalisation,
            male_fraction: self.sex.theta,
        }
    }

    pub fn set_statistics(&mut self, stats: CovariateStatistics) {
        self.age.normalisation = stats.age;
        self.brain.normalisation = stats.brain;
        self.structure.normalisation = stats.structure;
        self.sex.theta = stats.male_fraction;
    }

    /// Fit whitening statistics and the sex probability on (training) records.
    pub fn fit_statistics(&mut self, records: &[CovariateRecord]) -> Result<()> {
        let column = |f: fn(&CovariateRecord) -> f64| records.iter().map(f).collect::<Vec<_>>();
        self.age.normalisation = fit_normalisation(&column(|r| r.a))?;
        self.brain.normalisation = fit_normalisation(&column(|r| r.b))?;
        self.structure.normalisation = fit_normalisation(&column(|r| r.v))?;
        self.sex = BernoulliMechanism::fit(&column(|r| r.s))?;
        Ok(())
    }

    pub fn intermediates(&self, record: &CovariateRecord) -> Result<Intermediates> {
        Ok(Intermediates {
            a_hat: self.age.intermediate(record.a)?,
            b_hat: self.brain.intermediate(record.b)?,
            v_hat: self.structure.intermediate(record.v)?,
        })
    }

    /// Per-node log densities `[log p(a), log p(s), log p(b|a,s), log p(v|a,b)]`.
    pub fn log_prob_terms(&self, store: &ParamStore, record: &CovariateRecord) -> Result<[f64; 4]> {
        record.validate()?;
        let h = self.intermediates(record)?;
        Ok([
            self.age.log_prob(store, record.a, &[])?,
            self.sex.log_prob(record.s)?,
            self.brain.log_prob(store, record.b, &[record.s, h.a_hat])?,
            self.structure.log_prob(store, record.v, &[h.b_hat, h.a_hat])?,
        ])
    }

    /// `log p(a, s, b, v)`.
    pub fn log_evidence(&self, store: &ParamStore, record: &CovariateRecord) -> Result<f64> {
        Ok(self.log_prob_terms(store, record)?.iter().sum())
    }

    /// Exact inversion of every covariate mechanism.
    pub fn abduct(&self, store: &ParamStore, record: &CovariateRecord) -> Result<CovariateNoise> {
        record.validate()?;
        let h = self.intermediates(record)?;
        Ok(CovariateNoise {
            eps_a: self.age.inverse(store, record.a, &[])?.0,
            eps_s: self.sex.inverse(record.s),
            eps_b: self.brain.inverse(store, record.b, &[record.s, h.a_hat])?.0,
            eps_v: self.structure.inverse(store, record.v, &[h.b_hat, h.a_hat])?.0,
        })
    }

    /// Differentiable `log p(a, s, b, v)` per record, `[n, 1]`.
    pub fn tape_log_evidence(
        &self,
        tape: &Tape,
        binding: &Binding,
        store: &ParamStore,
        records: &[CovariateRecord],
    ) -> Result<Var> {
        let n = records.len();
        let mut hats = Vec::with_capacity(n);
        let mut constant = Array2::zeros((n, 1));
        for (i, r) in records.iter().enumerate() {
            r.validate()?;
            let h = self.intermediates(r)?;
            // Parameter-free parts: the sex term and the log-derivatives of
            // the exp and whitening heads.
            constant[[i, 0]] = self.sex.log_prob(r.s)?
                - (r.a.ln() + self.age.normalisation.scale.ln())
                - (r.b.ln() + self.brain.normalisation.scale.ln())
                - (r.v.ln() + self.structure.normalisation.scale.ln());
            hats.push(h);
        }
        let column = |f: &dyn Fn(&Intermediates, &CovariateRecord) -> f64| {
            Array2::from_shape_fn((n, 1), |(i, _)| f(&hats[i], &records[i]))
        };
        let log_normal = |eps: Var| {
            tape.add_scalar(tape.scale(tape.square(eps), -0.5), -HALF_LOG_TWO_PI)
        };

        let Transform::Spline(spline) = &self.age.transform else {
            unreachable!("age uses a spline");
        };
        let a_hats: Vec<f64> = hats.iter().map(|h| h.a_hat).collect();
        let (eps_a, ld_a) = spline.tape_inverse(tape, binding, store, &a_hats);
        let mut total = tape.add(log_normal(eps_a), ld_a);

        for (mech, ctx, target) in [
            (
                &self.brain,
                tape.constant(ndarray::concatenate![
                    ndarray::Axis(1),
                    column(&|_, r| r.s),
                    column(&|h, _| h.a_hat)
                ]),
                column(&|h, _| h.b_hat),
            ),
            (
                &self.structure,
                tape.constant(ndarray::concatenate![
                    ndarray::Axis(1),
                    column(&|h, _| h.b_hat),
                    column(&|h, _| h.a_hat)
                ]),
                column(&|h, _| h.v_hat),
            ),
        ] {
            let Transform::Affine(affine) = &mech.transform else {
                unreachable!("volumes use conditional affine flows");
            };
            let (loc, ls) = affine.tape_params(tape, binding, ctx);
            let centred = tape.sub(tape.constant(target), loc);
            let eps = tape.mul(centred, tape.exp(tape.neg(ls)));
            total = tape.add(total, tape.sub(log_normal(eps), ls));
        }
        Ok(tape.add(total, tape.constant(constant)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn randomised(seed: u64) -> (ParamStore, CovariateFlows) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut flows = CovariateFlows::new(&mut store, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            store
                .get_mut(id)
                .mapv_inplace(|v| v + rng.random_range(-0.5..0.5));
        }
        flows.set_statistics(CovariateStatistics {
            age: AffineNormalisation::new(4.1, 0.12).unwrap(),
            brain: AffineNormalisation::new(7.0, 0.07).unwrap(),
            structure: AffineNormalisation::new(3.1, 0.08).unwrap(),
            male_fraction: 0.476,
        });
        (store, flows)
    }

    #[test]
    fn identity_chain_maps_zero_to_one() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let flows = CovariateFlows::new(&mut store, &mut rng);
        let (a, hat) = flows.age.forward(&store, 0.0, &[]).unwrap();
        assert_eq!(a, 1.0);
        assert_eq!(hat, 0.0);
        // log p(1) = log N(0) - log|d exp / d eps| = -0.5 log 2 pi - 0.
        assert!((flows.age.log_prob(&store, 1.0, &[]).unwrap() + HALF_LOG_TWO_PI).abs() < 1e-12);
        assert_eq!(flows.sex.forward(1.0), 1.0);
    }

    #[test]
    fn spline_is_monotone_and_continuous_at_knots() {
        let (store, flows) = randomised(3);
        let Transform::Spline(s) = &flows.age.transform else { panic!() };
        let knots = s.knots(&store);
        for k in 1..SPLINE_BINS {
            let left = knots.forward(knots.xs[k] - 1e-12).0;
            let right = knots.forward(knots.xs[k]).0;
            assert!((left - right).abs() < 1e-10);
        }
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=2000 {
            let x = -4.0 + 8.0 * i as f64 / 2000.0;
            let y = s.forward(&store, x).0;
            assert!(y > prev);
            prev = y;
        }
    }

    #[test]
    fn inverse_of_domain_violations() {
        let (store, flows) = randomised(1);
        assert!(matches!(flows.brain.inverse(&store, 0.0, &[1.0, 0.0]), Err(Error::Domain(_))));
        assert!(matches!(flows.brain.inverse(&store, -3.0, &[1.0, 0.0]), Err(Error::Domain(_))));
        assert!(flows.brain.inverse(&store, 1000.0, &[1.0]).is_err());
    }

    #[test]
    fn partial_inversion_matches_forward_intermediate() {
        let (store, flows) = randomised(2);
        for eps in [-3.5, -1.0, 0.2, 2.9] {
            let (a, hat) = flows.age.forward(&store, eps, &[]).unwrap();
            assert!((flows.age.intermediate(a).unwrap() - hat).abs() < 1e-9);
        }
    }

    #[test]
    fn bernoulli_mle_and_log_prob() {
        let s: Vec<f64> = (0..1000).map(|i| if i < 476 { 1.0 } else { 0.0 }).collect();
        let b = BernoulliMechanism::fit(&s).unwrap();
        assert!((b.theta - 0.476).abs() < 1e-15);
        assert!((b.log_prob(1.0).unwrap() - 0.476f64.ln()).abs() < 1e-15);
        assert!(b.log_prob(0.5).is_err());
    }

    #[test]
    fn normalisation_fitting() {
        assert!(matches!(fit_normalisation(&[2.0, 2.0, 2.0]), Err(Error::ZeroVariance)));
        assert!(fit_normalisation(&[1.0]).is_err());
        assert!(fit_normalisation(&[1.0, -1.0]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let samples: Vec<f64> = (0..20000)
            .map(|_| (1.5 + 0.3 * rng.sample::<f64, _>(rand_distr::StandardNormal)).exp())
            .collect();
        let n = fit_normalisation(&samples).unwrap();
        assert!((n.location - 1.5).abs() < 4.0 * 0.3 / (20000f64).sqrt());
        assert!((n.scale - 0.3).abs() < 0.01);
        let w: Vec<f64> = samples.iter().map(|x| n.inverse(x.ln())).collect();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn tape_log_evidence_matches_plain_evaluation() {
        let (store, flows) = randomised(4);
        let records = [
            CovariateRecord { a: 55.0, s: 1.0, b: 1180.0, v: 23.0 },
            CovariateRecord { a: 71.0, s: 0.0, b: 1050.0, v: 20.5 },
            // Outside the spline interval on the whitened scale.
            CovariateRecord { a: 140.0, s: 0.0, b: 1100.0, v: 21.0 },
        ];
        let tape = Tape::new();
        let binding = store.bind(&tape, true);
        let alpha = flows.tape_log_evidence(&tape, &binding, &store, &records).unwrap();
        for (i, r) in records.iter().enumerate() {
            let plain = flows.log_evidence(&store, r).unwrap();
            assert!((tape.value(alpha)[[i, 0]] - plain).abs() < 1e-10);
        }
    }

    #[test]
    fn abduction_inverts_forward() {
        let (store, flows) = randomised(5);
        let r = CovariateRecord { a: 63.0, s: 1.0, b: 1120.0, v: 22.4 };
        let n = flows.abduct(&store, &r).unwrap();
        let (a, a_hat) = flows.age.forward(&store, n.eps_a, &[]).unwrap();
        let (b, b_hat) = flows.brain.forward(&store, n.eps_b, &[n.eps_s, a_hat]).unwrap();
        let (v, _) = flows.structure.forward(&store, n.eps_v, &[b_hat, a_hat]).unwrap();
        assert!((a - r.a).abs() < 1e-9 * r.a);
        assert!((b - r.b).abs() < 1e-9 * r.b);
        assert!((v - r.v).abs() < 1e-9 * r.v);
    }
}
