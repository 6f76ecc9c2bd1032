//! Named parameter collections and the two optimizers used by the training
//! loops (SGD with momentum for the contrastive encoder, Adam for the
//! denoiser).

use std::collections::BTreeMap;

use crate::autodiff::{Gradients, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered map from parameter name to value. Iteration order is the sorted
/// name order, which keeps every downstream computation deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter; names must be unique.
    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::param(format!("duplicate parameter '{name}'")));
        }
        self.params.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::param(format!("unknown parameter '{name}'")))
    }

    /// Replaces the value of an existing parameter; the shape must match.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::param(format!("unknown parameter '{name}'")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "param_set",
                format!("'{name}': stored {:?}, new {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Binds one parameter into `g` as a trainable leaf named after it.
    pub fn bind(&self, g: &mut Graph, name: &str) -> Result<NodeId> {
        Ok(g.param(name, self.get(name)?.clone()))
    }

    /// Binds one parameter into `g` as a constant: it contributes values to
    /// the forward pass but never receives gradient.
    pub fn bind_frozen(&self, g: &mut Graph, name: &str) -> Result<NodeId> {
        Ok(g.constant(self.get(name)?.clone()))
    }
}

impl FromIterator<(String, Tensor)> for ParamStore {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamStore {
            params: iter.into_iter().collect(),
        }
    }
}

fn updated(
    store: &mut ParamStore,
    grads: &Gradients,
    mut rule: impl FnMut(&str, &[f64], &[f64]) -> Result<Vec<f64>>,
) -> Result<()> {
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in &names {
        let theta = store.get(name)?.clone();
        let grad = grads
            .get(name)
            .ok_or_else(|| Error::contract(format!("no gradient for parameter '{name}'")))?;
        if grad.shape() != theta.shape() {
            return Err(Error::shape(
                "optimizer_step",
                format!("'{name}': value {:?}, gradient {:?}", theta.shape(), grad.shape()),
            ));
        }
        let new_data = rule(name, theta.data(), grad.data())?;
        store.set(name, Tensor::new(theta.shape(), new_data)?)?;
    }
    Ok(())
}

/// Stochastic gradient descent with classical momentum and decoupled-style
/// L2 weight decay folded into the gradient:
/// `v ← μ·v + (g + λ·θ)`, `θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) || !weight_decay.is_finite() || weight_decay < 0.0 {
            return Err(Error::param(format!(
                "momentum must be in [0,1) and weight decay >= 0, got {momentum}, {weight_decay}"
            )));
        }
        Ok(SgdMomentum {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        })
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::param(format!("learning rate must be >= 0, got {lr}")));
        }
        let (mu, wd) = (self.momentum, self.weight_decay);
        let velocity = &mut self.velocity;
        updated(store, grads, |name, theta, grad| {
            let v = velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; theta.len()]);
            if v.len() != theta.len() {
                return Err(Error::state(format!("stale velocity buffer for '{name}'")));
            }
            let mut out = Vec::with_capacity(theta.len());
            for i in 0..theta.len() {
                v[i] = mu * v[i] + grad[i] + wd * theta[i];
                out.push(theta[i] - lr * v[i]);
            }
            Ok(out)
        })
    }

    /// Serializable optimizer state: one `velocity/<param>` tensor per
    /// parameter touched so far.
    pub fn export_state(&self) -> Vec<(String, Tensor)> {
        self.velocity
            .iter()
            .map(|(name, v)| {
                (format!("velocity/{name}"), Tensor::new(&[v.len()], v.clone()).expect("velocities are finite"))
            })
            .collect()
    }

    pub fn import_state(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        self.velocity.clear();
        for (name, t) in entries {
            let param = name
                .strip_prefix("velocity/")
                .ok_or_else(|| Error::contract(format!("unexpected optimizer state entry '{name}'")))?;
            self.velocity.insert(param.to_string(), t.data().to_vec());
        }
        Ok(())
    }
}

/// Adam with bias correction:
/// `m ← β₁m + (1−β₁)g`, `v ← β₂v + (1−β₂)g²`,
/// `θ ← θ − lr·m̂/(√v̂ + ε)`.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
            return Err(Error::param(format!(
                "need beta1, beta2 in [0,1) and eps > 0, got {beta1}, {beta2}, {eps}"
            )));
        }
        Ok(Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        })
    }

    /// Conventional defaults: β₁=0.9, β₂=0.999, ε=1e-8.
    pub fn with_defaults() -> Self {
        Adam::new(0.9, 0.999, 1e-8).expect("defaults are in range")
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::param(format!("learning rate must be >= 0, got {lr}")));
        }
        self.t += 1;
        let (b1, b2, eps, t) = (self.beta1, self.beta2, self.eps, self.t);
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);
        let (ms, vs) = (&mut self.m, &mut self.v);
        updated(store, grads, |name, theta, grad| {
            let m = ms.entry(name.to_string()).or_insert_with(|| vec![0.0; theta.len()]);
            let v = vs.entry(name.to_string()).or_insert_with(|| vec![0.0; theta.len()]);
            if m.len() != theta.len() || v.len() != theta.len() {
                return Err(Error::state(format!("stale moment buffer for '{name}'")));
            }
            let mut out = Vec::with_capacity(theta.len());
            for i in 0..theta.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                out.push(theta[i] - lr * mhat / (vhat.sqrt() + eps));
            }
            Ok(out)
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Serializable optimizer state: `adam_t` plus first/second moment
    /// tensors per parameter.
    pub fn export_state(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("adam_t".to_string(), Tensor::new(&[1], vec![self.t as f64]).unwrap())];
        for (name, m) in &self.m {
            out.push((format!("adam_m/{name}"), Tensor::new(&[m.len()], m.clone()).expect("moments are finite")));
        }
        for (name, v) in &self.v {
            out.push((format!("adam_v/{name}"), Tensor::new(&[v.len()], v.clone()).expect("moments are finite")));
        }
        out
    }

    pub fn import_state(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        self.m.clear();
        self.v.clear();
        self.t = 0;
        for (name, tensor) in entries {
            if name == "adam_t" {
                self.t = tensor.item()? as u64;
            } else if let Some(p) = name.strip_prefix("adam_m/") {
                self.m.insert(p.to_string(), tensor.data().to_vec());
            } else if let Some(p) = name.strip_prefix("adam_v/") {
                self.v.insert(p.to_string(), tensor.data().to_vec());
            } else {
                return Err(Error::contract(format!("unexpected optimizer state entry '{name}'")));
            }
        }
        Ok(())
    }
}
