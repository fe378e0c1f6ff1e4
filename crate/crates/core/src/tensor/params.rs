use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::array::Tensor;
use super::rng::Rng;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Learning-rate group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Main,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub group: ParamGroup,
}

/// Owns every learnable array of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, grad, group });
        ParamId(self.params.len() - 1)
    }

    /// Xavier/Glorot uniform matrix `[fan_out, fan_in]`.
    pub fn add_xavier(&mut self, name: impl Into<String>, fan_out: usize, fan_in: usize, group: ParamGroup, rng: &mut Rng) -> ParamId {
        let bound = if fan_in + fan_out == 0 { 0.0 } else { (6.0 / (fan_in + fan_out) as f64).sqrt() };
        let data = (0..fan_in * fan_out).map(|_| rng.uniform_range(-bound, bound)).collect();
        let t = Tensor::new(&[fan_out, fan_in], data).expect("shape matches data");
        self.add(name, t, group)
    }

    /// Standard-normal table `[rows, cols]`, used for embeddings.
    pub fn add_normal(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut Rng) -> ParamId {
        let data = (0..rows * cols).map(|_| rng.normal()).collect();
        let t = Tensor::new(&[rows, cols], data).expect("shape matches data");
        self.add(name, t, ParamGroup::Main)
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: &[usize], value: f64, group: ParamGroup) -> ParamId {
        self.add(name, Tensor::full(shape, value), group)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params.iter().map(|p| p.grad.l2_norm_sq()).sum::<f64>().sqrt()
    }

    pub fn accumulate(&mut self, grads: &ParamGrads) {
        for (id, g) in &grads.0 {
            let dst = self.params[id.0].grad.data_mut();
            dst.iter_mut().zip(g).for_each(|(d, s)| *d += s);
        }
    }

    /// Replaces values by name, requiring every name to match in shape.
    pub fn load_values(&mut self, arrays: &[(String, Tensor)]) -> Result<()> {
        if arrays.len() != self.params.len() {
            return Err(Error::Container(format!(
                "checkpoint holds {} arrays, model expects {}",
                arrays.len(),
                self.params.len()
            )));
        }
        for (name, t) in arrays {
            let idx = *self
                .by_name
                .get(name)
                .ok_or_else(|| Error::Container(format!("unexpected array {name}")))?;
            if self.params[idx].value.shape() != t.shape() {
                return Err(Error::Container(format!(
                    "array {name}: shape {:?} vs expected {:?}",
                    t.shape(),
                    self.params[idx].value.shape()
                )));
            }
            self.params[idx].value = t.clone();
        }
        Ok(())
    }
}

/// Gradients harvested from a tape, keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads(pub Vec<(ParamId, Vec<f64>)>);

/// A tape bound to a parameter store, with optional dropout randomness.
///
/// Parameters are materialized lazily as tape leaves, once per graph.
pub struct Graph<'p> {
    pub tape: Tape,
    params: &'p ParamStore,
    bound: HashMap<ParamId, Var>,
    rng: Option<Rng>,
}

impl<'p> Graph<'p> {
    /// Evaluation graph: dropout disabled.
    pub fn eval(params: &'p ParamStore) -> Self {
        Graph { tape: Tape::new(), params, bound: HashMap::new(), rng: None }
    }

    /// Training graph: dropout draws masks from `rng`.
    pub fn train(params: &'p ParamStore, rng: Rng) -> Self {
        Graph { tape: Tape::new(), params, bound: HashMap::new(), rng: Some(rng) }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn p(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound.get(&id) {
            return Ok(*v);
        }
        let v = self.tape.variable(self.params.get(id).value.clone())?;
        self.bound.insert(id, v);
        Ok(v)
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        self.tape.dropout(x, rate, self.rng.as_mut())
    }

    /// Returns the dropout stream so the caller can continue it.
    pub fn take_rng(&mut self) -> Option<Rng> {
        self.rng.take()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Back-propagates `loss` and collects the gradient of every bound parameter.
    pub fn backward(&mut self, loss: Var) -> Result<ParamGrads> {
        self.tape.backward(loss)?;
        let mut out: Vec<(ParamId, Vec<f64>)> = self
            .bound
            .iter()
            .filter_map(|(id, v)| self.tape.grad(*v).map(|g| (*id, g.to_vec())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        Ok(ParamGrads(out))
    }
}
