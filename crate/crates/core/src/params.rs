//! Named parameter sets, tape binding and the Adam optimiser.

use std::cell::RefCell;
use std::sync::Arc;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{DType, Tape, Tensor, Var};

/// Ordered name → tensor map. Names ending in `running_mean` or
/// `running_var` are buffers: serialized with the model but never trained.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: IndexMap<String, Tensor>,
}

pub fn is_buffer(name: &str) -> bool {
    name.ends_with("running_mean") || name.ends_with("running_var")
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Bundle { name: name.to_string(), reason: "missing parameter".into() })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Scalar count over trainable tensors.
    pub fn num_params(&self) -> usize {
        self.tensors.iter().filter(|(n, _)| !is_buffer(n)).map(|(_, t)| t.numel()).sum()
    }

    /// Entries whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamSet) {
        self.tensors.extend(other.tensors);
    }

    /// Every tensor cast to `dtype`.
    pub fn cast(&self, dtype: DType) -> ParamSet {
        ParamSet {
            tensors: self.tensors.iter().map(|(n, t)| (n.clone(), t.cast(dtype))).collect(),
        }
    }

    /// SHA-256 over names, shapes and the exact value bits.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            h.update([0]);
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parameters placed on a tape.
pub struct Binding<'a> {
    params: &'a ParamSet,
    vars: IndexMap<String, Var>,
    batch_norms: RefCell<Vec<(String, Var)>>,
}

impl<'a> Binding<'a> {
    /// Binds every non-buffer tensor whose name starts with one of
    /// `trainable` as a tape parameter; everything else becomes a constant.
    pub fn new(tape: &mut Tape, params: &'a ParamSet, trainable: &[&str]) -> Self {
        let vars = params
            .iter()
            .filter(|(n, _)| !is_buffer(n))
            .map(|(n, t)| {
                let v = if trainable.iter().any(|p| n.starts_with(p)) {
                    tape.param(n, t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (n.clone(), v)
            })
            .collect();
        Self {
            params,
            vars,
            batch_norms: RefCell::new(Vec::new()),
        }
    }

    /// Binds caller-made vars by name; buffers are still read from `params`.
    pub fn from_vars(params: &'a ParamSet, vars: IndexMap<String, Var>) -> Self {
        Self {
            params,
            vars,
            batch_norms: RefCell::new(Vec::new()),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Bundle { name: name.to_string(), reason: "missing parameter".into() })
    }

    pub fn buffer(&self, name: &str) -> Result<Arc<Vec<f64>>> {
        Ok(Arc::new(self.params.get(name)?.data().to_vec()))
    }

    /// Notes a batch-norm node computed from batch statistics so the
    /// running statistics of `prefix` can be refreshed after the step.
    pub fn note_batch_norm(&self, prefix: &str, node: Var) {
        self.batch_norms.borrow_mut().push((prefix.to_string(), node));
    }

    /// Exponential update of running statistics from the noted nodes.
    pub fn running_stat_updates(&self, tape: &Tape, momentum: f64) -> Result<Vec<(String, Tensor)>> {
        let mut out = Vec::new();
        for (prefix, node) in self.batch_norms.borrow().iter() {
            let saved = tape.saved(*node);
            if saved.len() < 4 {
                return Err(Error::Config(format!("{prefix}: batch-norm statistics were not recorded")));
            }
            for (suffix, batch) in [("running_mean", &saved[2]), ("running_var", &saved[3])] {
                let name = format!("{prefix}.{suffix}");
                let old = self.params.get(&name)?;
                let data = old
                    .data()
                    .iter()
                    .zip(batch.iter())
                    .map(|(o, b)| DType::F32.round((1.0 - momentum) * o + momentum * b))
                    .collect();
                out.push((name, Tensor::new(old.shape().to_vec(), data)?.cast(DType::F32)));
            }
        }
        Ok(out)
    }
}

pub fn trunc_normal(shape: &[usize], std: f64, rng: &mut RngStream) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| DType::F32.round(rng.trunc_normal(std))).collect();
    Tensor::new(shape.to_vec(), data).expect("extent matches").cast(DType::F32)
}

pub fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape).cast(DType::F32)
}

pub fn ones(shape: &[usize]) -> Tensor {
    Tensor::full(shape, 1.0).cast(DType::F32)
}

/// Linear warmup followed by cosine decay to zero, optionally restarted
/// `cycles` times over the post-warmup span.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarmupCosine {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub cycles: usize,
}

impl WarmupCosine {
    pub fn new(base_lr: f64, warmup_fraction: f64, total_steps: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&warmup_fraction) {
            return Err(Error::Config(format!("warmup fraction {warmup_fraction} outside [0,1)")));
        }
        Ok(Self {
            base_lr,
            warmup_steps: (warmup_fraction * total_steps as f64).round() as usize,
            total_steps,
            cycles: 1,
        })
    }

    pub fn with_restarts(self, cycles: usize) -> Self {
        Self {
            cycles: cycles.max(1),
            ..self
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let cycle = span.div_ceil(self.cycles).max(1);
        let t = step - self.warmup_steps;
        let progress = if t >= span {
            1.0
        } else {
            (t % cycle) as f64 / cycle as f64
        };
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adam with decoupled weight decay. Updated weights are rounded to FP32.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
    t: i32,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            m: IndexMap::new(),
            v: IndexMap::new(),
            t: 0,
        }
    }
}

impl Adam {
    pub fn with_weight_decay(weight_decay: f64) -> Self {
        Self {
            weight_decay,
            ..Self::default()
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &IndexMap<String, Tensor>, lr: f64) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFinite { node: 0, op: "gradient" });
            }
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape("adam", format!("{name}: {:?} vs gradient {:?}", p.shape(), g.shape())));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            let mut data = p.data().to_vec();
            for i in 0..data.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                data[i] = DType::F32.round(data[i] - lr * (update + self.weight_decay * data[i]));
            }
            let shape = p.shape().to_vec();
            params.insert(name.clone(), Tensor::new(shape, data)?.cast(DType::F32));
        }
        Ok(())
    }
}
