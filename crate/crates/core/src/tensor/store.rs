use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::{Gradients, Scalar, Tensor};
use crate::error::{contract_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named weight with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub trainable: bool,
}

/// Owns every parameter of a model, addressable by id or by dotted name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: HashMap::new() }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value, grad: None, trainable });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Sets the trainable flag on every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
        }
    }

    /// Number of scalars in parameters matching `filter`.
    pub fn count(&self, filter: impl Fn(&Param<T>) -> bool) -> usize {
        self.params.iter().filter(|p| filter(p)).map(|p| p.value.numel()).sum()
    }

    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.count(|p| p.name.starts_with(prefix))
    }

    /// Resets gradients: zeros for trainable parameters, `None` for frozen ones.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = p.trainable.then(|| Tensor::zeros(p.value.shape()));
        }
    }

    /// Adds a backward pass's parameter gradients into the stored gradients.
    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            if !p.trainable {
                continue;
            }
            match &mut p.grad {
                Some(acc) => {
                    if acc.shape() != g.shape() {
                        return contract_err(format!("gradient shape mismatch for {}", p.name));
                    }
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += *b;
                    }
                }
                None => p.grad = Some(g.clone()),
            }
        }
        Ok(())
    }

    pub fn scale_grads(&mut self, factor: T) {
        for g in self.params.iter_mut().filter_map(|p| p.grad.as_mut()) {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    /// A copy in another precision; gradients are dropped.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), grad: None, trainable: p.trainable })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// SHA-256 over names, shapes and little-endian values of every
    /// parameter whose name starts with `prefix`, as lowercase hex.
    pub fn checksum(&self, prefix: &str) -> String {
        let mut hasher = Sha256::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            hasher.update(p.name.as_bytes());
            for d in p.value.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                hasher.update(v.to_f64_lossy().to_le_bytes());
            }
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
