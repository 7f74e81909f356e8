use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numkernel::RealMatrix;

/// Handle to a parameter tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Named trainable tensors plus Adam moment buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<RealMatrix>,
    first_moment: Vec<RealMatrix>,
    second_moment: Vec<RealMatrix>,
    index: HashMap<String, usize>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, value: RealMatrix) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.first_moment.push(RealMatrix::zeros(value.rows(), value.cols()));
        self.second_moment.push(RealMatrix::zeros(value.rows(), value.cols()));
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.data().len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn get(&self, id: ParamId) -> &RealMatrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut RealMatrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &RealMatrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients { tensors: self.values.iter().map(|v| RealMatrix::zeros(v.rows(), v.cols())).collect() }
    }

    /// Rounds every value to the nearest `f32` so snapshots written in the
    /// 32-bit checkpoint format reload bit-exactly.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            for x in v.data_mut() {
                *x = *x as f32 as f64;
            }
        }
    }

    pub fn snapshot(&self) -> Vec<(String, RealMatrix)> {
        self.names.iter().cloned().zip(self.values.iter().cloned()).collect()
    }

    /// Overwrites values by name; names and shapes must match exactly.
    pub fn load_named(&mut self, tensors: &[(String, RealMatrix)]) -> Result<()> {
        if tensors.len() != self.values.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, model expects {}",
                tensors.len(),
                self.values.len()
            )));
        }
        for (name, value) in tensors {
            let id = self.index.get(name).ok_or_else(|| Error::Config(format!("unexpected tensor {name}")))?;
            if self.values[*id].shape() != value.shape() {
                return Err(Error::Config(format!(
                    "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                    value.shape(),
                    self.values[*id].shape()
                )));
            }
            self.values[*id] = value.clone();
        }
        Ok(())
    }

    /// One bias-corrected Adam update. A non-finite gradient aborts the step
    /// without touching any parameter.
    pub fn adam_step(&mut self, grads: &Gradients, cfg: &AdamConfig) -> Result<()> {
        if grads.tensors.len() != self.values.len() {
            return Err(Error::Shape("gradient set does not match parameter store".into()));
        }
        for (i, g) in grads.tensors.iter().enumerate() {
            if g.shape() != self.values[i].shape() {
                return Err(Error::Shape(format!("gradient for {} has shape {:?}", self.names[i], g.shape())));
            }
            if !g.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient for {}", self.names[i])));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..self.values.len() {
            let g = grads.tensors[i].data();
            let m = self.first_moment[i].data_mut();
            for (mj, gj) in m.iter_mut().zip(g) {
                *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj;
            }
            let v = self.second_moment[i].data_mut();
            for (vj, gj) in v.iter_mut().zip(g) {
                *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj;
            }
            let m = self.first_moment[i].data();
            let v = self.second_moment[i].data();
            for ((p, mj), vj) in self.values[i].data_mut().iter_mut().zip(m).zip(v) {
                let m_hat = mj / bc1;
                let v_hat = vj / bc2;
                *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// How a freshly created tensor is filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Xavier,
    Zeros,
    Ones,
}

/// Where layer constructors obtain their parameters: either newly
/// initialized tensors or existing ones looked up by name.
pub trait ParamSource {
    fn param(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> Result<ParamId>;
}

/// Adds new tensors to a store, drawing Xavier-uniform values from `rng`.
pub struct Initializer<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl ParamSource for Initializer<'_> {
    fn param(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> Result<ParamId> {
        if self.store.id(name).is_some() {
            return Err(Error::Config(format!("parameter {name} defined twice")));
        }
        let value = match init {
            Init::Zeros => RealMatrix::zeros(rows, cols),
            Init::Ones => RealMatrix::filled(rows, cols, 1.0),
            Init::Xavier => {
                let bound = (6.0 / (rows + cols) as f64).sqrt();
                RealMatrix::from_fn(rows, cols, |_, _| self.rng.random_range(-bound..bound) as f32 as f64)
            }
        };
        Ok(self.store.add(name, value))
    }
}

/// Resolves tensors already present in a store, checking their shapes.
pub struct Binder<'a> {
    pub store: &'a ParamStore,
}

impl ParamSource for Binder<'_> {
    fn param(&mut self, name: &str, rows: usize, cols: usize, _init: Init) -> Result<ParamId> {
        let id = self.store.id(name).ok_or_else(|| Error::Config(format!("parameter {name} missing from store")))?;
        if self.store.get(id).shape() != (rows, cols) {
            return Err(Error::Shape(format!(
                "parameter {name} has shape {:?}, expected {:?}",
                self.store.get(id).shape(),
                (rows, cols)
            )));
        }
        Ok(id)
    }
}

/// Gradient tensors aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub(crate) tensors: Vec<RealMatrix>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &RealMatrix {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut RealMatrix {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &RealMatrix> {
        self.tensors.iter()
    }

    pub fn scale(&mut self, c: f64) {
        for t in &mut self.tensors {
            for x in t.data_mut() {
                *x *= c;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }
}
