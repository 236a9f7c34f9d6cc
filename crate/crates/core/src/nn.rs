//! Parameter storage, dense layers and the Adam optimiser.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Matrix, Tape, Var};

/// Optimiser parameter groups; each group has its own learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Covariate,
    Mesh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    values: Vec<Matrix>,
}

/// Serialisable form of one parameter tensor.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub group: ParamGroup,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.groups.push(group);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Put every parameter on the tape. With `trainable = false` they are
    /// recorded as constants and no gradient work is done.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Binding {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    tape.variable(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        Binding { vars }
    }

    pub fn to_records(&self) -> Vec<ParamRecord> {
        self.ids()
            .map(|id| {
                let v = self.get(id);
                ParamRecord {
                    name: self.name(id).to_owned(),
                    group: self.group(id),
                    rows: v.nrows(),
                    cols: v.ncols(),
                    data: v.iter().copied().collect(),
                }
            })
            .collect()
    }

    /// Overwrite values from records, matching by position and name.
    pub fn load_records(&mut self, records: &[ParamRecord]) -> crate::Result<()> {
        if records.len() != self.len() {
            return Err(crate::Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                self.len(),
                records.len()
            )));
        }
        for (id, rec) in self.ids().collect::<Vec<_>>().into_iter().zip(records) {
            let current = &self.values[id.0];
            if rec.name != self.names[id.0] || (rec.rows, rec.cols) != current.dim() {
                return Err(crate::Error::Checkpoint(format!(
                    "parameter `{}` {:?} does not match stored `{}` ({}, {})",
                    self.names[id.0],
                    current.dim(),
                    rec.name,
                    rec.rows,
                    rec.cols
                )));
            }
            self.values[id.0] = Array2::from_shape_vec((rec.rows, rec.cols), rec.data.clone())
                .map_err(|e| crate::Error::Checkpoint(e.to_string()))?;
        }
        Ok(())
    }
}

/// Tape handles for every parameter of a [`ParamStore`].
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Uniform fan-in initialisation in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn fan_in_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

/// Fully connected layer `y = x W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: ParamGroup,
        input: usize,
        output: usize,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            group,
            fan_in_uniform(rng, input, output, input),
        );
        let bias = store.add(
            format!("{name}.bias"),
            group,
            fan_in_uniform(rng, 1, output, input),
        );
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &Tape, params: &Binding, x: Var) -> Var {
        let h = tape.matmul(x, params.var(self.weight));
        tape.add(h, params.var(self.bias))
    }

    /// Tape-free evaluation for inference.
    pub fn apply(&self, store: &ParamStore, x: &Matrix) -> Matrix {
        x.dot(store.get(self.weight)) + store.get(self.bias)
    }
}

/// Adam with one learning rate per [`ParamGroup`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr_covariate: f64,
    pub lr_mesh: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr_covariate: f64, lr_mesh: f64) -> Self {
        let zeros = || {
            store
                .ids()
                .map(|id| Array2::zeros(store.get(id).dim()))
                .collect::<Vec<_>>()
        };
        Self {
            lr_covariate,
            lr_mesh,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One descent step on the loss whose gradients are in `grads`.
    pub fn step(&mut self, store: &mut ParamStore, binding: &Binding, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(binding.var(id)) else {
                continue;
            };
            let lr = match store.group(id) {
                ParamGroup::Covariate => self.lr_covariate,
                ParamGroup::Mesh => self.lr_mesh,
            };
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let p = store.get_mut(id);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        }
    }
}
