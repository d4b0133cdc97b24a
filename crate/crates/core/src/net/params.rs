use serde::{Deserialize, Serialize};

use crate::real::{cast_slice, Real};

/// What a parameter tensor is for; decides initialization and whether the
/// optimizer touches it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    ConvWeight,
    DeconvWeight,
    Bias,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
    HeadWeight,
    HeadBias,
    DenseWeight,
    DenseBias,
}

impl ParamRole {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamRole::BnRunningMean | ParamRole::BnRunningVar)
    }
}

/// Index of a tensor inside a [`ParameterStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    /// Adam first moment.
    pub m: Vec<T>,
    /// Adam second moment.
    pub v: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn trainable(&self) -> bool {
        self.role.trainable()
    }
}

/// Named parameter tensors with gradient and Adam buffers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterStore<T = f32> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, role: ParamRole, value: Vec<T>) -> ParamId {
        let n: usize = shape.iter().product();
        assert_eq!(n, value.len(), "parameter shape/value mismatch");
        self.params.push(Param {
            name: name.into(),
            shape,
            role,
            value,
            grad: vec![T::zero(); n],
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &[T] {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds a full set of gradients (one vector per parameter, empty for
    /// untouched parameters) into the gradient buffers.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            if g.is_empty() {
                continue;
            }
            p.grad.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
        }
    }

    /// Count of scalar trainable values.
    pub fn trainable_len(&self) -> usize {
        self.params.iter().filter(|p| p.trainable()).map(|p| p.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    role: p.role,
                    value: cast_slice(&p.value),
                    grad: cast_slice(&p.grad),
                    m: cast_slice(&p.m),
                    v: cast_slice(&p.v),
                })
                .collect(),
        }
    }

    /// Flat view of trainable values, in store order.
    pub fn flat_trainable(&self) -> Vec<T> {
        self.params
            .iter()
            .filter(|p| p.trainable())
            .flat_map(|p| p.value.iter().copied())
            .collect()
    }
}

/// Per-parameter gradient vectors aligned with a [`ParameterStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T>(pub Vec<Vec<T>>);

impl<T: Real> Gradients<T> {
    pub fn empty(n: usize) -> Self {
        Gradients(vec![Vec::new(); n])
    }

    pub fn add(&mut self, id: ParamId, g: &[T]) {
        let slot = &mut self.0[id.0];
        if slot.is_empty() {
            *slot = g.to_vec();
        } else {
            slot.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
        }
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.0[id.0]
    }

    /// Flattens trainable gradients in store order, filling untouched
    /// tensors with zeros.
    pub fn flat_trainable(&self, store: &ParameterStore<T>) -> Vec<T> {
        let mut out = Vec::with_capacity(store.trainable_len());
        for (p, g) in store.iter().zip(&self.0) {
            if !p.trainable() {
                continue;
            }
            if g.is_empty() {
                out.extend(std::iter::repeat(T::zero()).take(p.len()));
            } else {
                out.extend_from_slice(g);
            }
        }
        out
    }
}
