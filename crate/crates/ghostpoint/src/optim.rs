//! Named parameter storage and the Adam optimizer with decoupled weight
//! decay.
//!
//! A [`ParamStore`] owns the canonical parameter values plus per-parameter
//! optimizer moments, in stable insertion order (the order defines the
//! checkpoint layout). Each training step binds every parameter into a fresh
//! [`Graph`] as a differentiable leaf, accumulates per-sample gradients into
//! a [`GradBuffer`], and applies one optimizer step.

use crate::scalar::Scalar;
use crate::tensor::{Graph, TensorError, TensorId};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("parameter {0:?} registered twice")]
    Duplicate(String),
    #[error("unknown parameter {0:?}")]
    Unknown(String),
    #[error("parameter {name:?}: data length {got} does not match shape {shape:?}")]
    DataLength { name: String, got: usize, shape: Vec<usize> },
    #[error("gradient buffer built for {expected} parameters, store has {got}")]
    BufferMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone)]
pub struct ParamEntry<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<F>,
    /// Adam first moment.
    pub m: Vec<F>,
    /// Adam second moment.
    pub v: Vec<F>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    entries: Vec<ParamEntry<F>>,
    index: HashMap<String, usize>,
    /// Number of optimizer steps taken so far.
    pub step: u64,
}

/// Graph leaves for one forward/backward pass, aligned with store order.
#[derive(Debug, Clone)]
pub struct ParamBinding {
    ids: Vec<TensorId>,
    by_name: HashMap<String, TensorId>,
}

impl ParamBinding {
    pub fn id(&self, name: &str) -> Result<TensorId, OptimError> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| OptimError::Unknown(name.to_string()))
    }

    /// Build a binding from explicit (name, leaf) pairs, for callers that
    /// manage graph leaves themselves (e.g. finite-difference harnesses).
    pub fn from_pairs<I>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (String, TensorId)>,
    {
        let mut ids = Vec::new();
        let mut by_name = HashMap::new();
        for (name, id) in pairs {
            ids.push(id);
            by_name.insert(name, id);
        }
        Self { ids, by_name }
    }
}

/// Accumulated gradients aligned with store order.
#[derive(Debug, Clone)]
pub struct GradBuffer<F> {
    bufs: Vec<Vec<F>>,
    /// Number of samples accumulated (for reporting; scaling is explicit).
    pub samples: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    /// Decoupled weight decay (applied directly to parameters, not through
    /// the moments).
    pub weight_decay: F,
}

impl<F: Scalar> Default for AdamConfig<F> {
    fn default() -> Self {
        Self {
            lr: F::from_f64(1e-4),
            beta1: F::from_f64(0.9),
            beta2: F::from_f64(0.999),
            eps: F::from_f64(1e-8),
            weight_decay: F::from_f64(1e-4),
        }
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new(), step: 0 }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], value: Vec<F>) -> Result<(), OptimError> {
        if self.index.contains_key(name) {
            return Err(OptimError::Duplicate(name.to_string()));
        }
        let n: usize = shape.iter().product();
        if value.len() != n {
            return Err(OptimError::DataLength {
                name: name.to_string(),
                got: value.len(),
                shape: shape.to_vec(),
            });
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            value,
            m: vec![F::zero(); n],
            v: vec![F::zero(); n],
        });
        Ok(())
    }

    /// Restore a parameter together with its optimizer moments (checkpoint
    /// loading). Moment lengths must match the value length.
    pub fn add_with_state(
        &mut self,
        name: &str,
        shape: &[usize],
        value: Vec<F>,
        m: Vec<F>,
        v: Vec<F>,
    ) -> Result<(), OptimError> {
        let n = value.len();
        if m.len() != n || v.len() != n {
            return Err(OptimError::DataLength {
                name: name.to_string(),
                got: m.len().max(v.len()),
                shape: shape.to_vec(),
            });
        }
        self.add(name, shape, value)?;
        let e = self.entries.last_mut().expect("just added");
        e.m = m;
        e.v = v;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry<F>, OptimError> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| OptimError::Unknown(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry<F>, OptimError> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i]),
            None => Err(OptimError::Unknown(name.to_string())),
        }
    }

    /// Entries in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry<F>> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of learned scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Insert every parameter into `graph` as a differentiable leaf.
    pub fn bind(&self, graph: &mut Graph<F>) -> Result<ParamBinding, OptimError> {
        let mut ids = Vec::with_capacity(self.entries.len());
        let mut by_name = HashMap::with_capacity(self.entries.len());
        for e in &self.entries {
            let id = graph.param(&e.shape, e.value.clone())?;
            ids.push(id);
            by_name.insert(e.name.clone(), id);
        }
        Ok(ParamBinding { ids, by_name })
    }

    pub fn zero_grad_buffer(&self) -> GradBuffer<F> {
        GradBuffer {
            bufs: self.entries.iter().map(|e| vec![F::zero(); e.value.len()]).collect(),
            samples: 0,
        }
    }

    /// Add this graph's parameter gradients (after `backward`) into `buf`.
    pub fn accumulate(
        &self,
        graph: &Graph<F>,
        binding: &ParamBinding,
        buf: &mut GradBuffer<F>,
    ) -> Result<(), OptimError> {
        if buf.bufs.len() != self.entries.len() || binding.ids.len() != self.entries.len() {
            return Err(OptimError::BufferMismatch {
                expected: buf.bufs.len(),
                got: self.entries.len(),
            });
        }
        for (i, id) in binding.ids.iter().enumerate() {
            if let Some(g) = graph.grad(*id)? {
                for (dst, src) in buf.bufs[i].iter_mut().zip(g) {
                    *dst = *dst + *src;
                }
            }
        }
        buf.samples += 1;
        Ok(())
    }

    /// One Adam step with decoupled weight decay. `scale` multiplies the
    /// accumulated gradients first (use `1/batch_size` for a mean).
    pub fn adam_step(
        &mut self,
        buf: &GradBuffer<F>,
        scale: F,
        cfg: &AdamConfig<F>,
    ) -> Result<(), OptimError> {
        if buf.bufs.len() != self.entries.len() {
            return Err(OptimError::BufferMismatch {
                expected: buf.bufs.len(),
                got: self.entries.len(),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = F::one() - cfg.beta1.powi(t);
        let bc2 = F::one() - cfg.beta2.powi(t);
        for (e, gbuf) in self.entries.iter_mut().zip(&buf.bufs) {
            for j in 0..e.value.len() {
                let g = gbuf[j] * scale;
                e.m[j] = cfg.beta1 * e.m[j] + (F::one() - cfg.beta1) * g;
                e.v[j] = cfg.beta2 * e.v[j] + (F::one() - cfg.beta2) * g * g;
                let m_hat = e.m[j] / bc1;
                let v_hat = e.v[j] / bc2;
                e.value[j] = e.value[j]
                    - cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * e.value[j]);
            }
        }
        Ok(())
    }
}
