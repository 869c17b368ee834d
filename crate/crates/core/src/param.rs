//! Named parameter collections.
//!
//! Model components declare their parameters into a [`ParamStore`] and keep
//! only [`ParamId`] handles. The same layout then serves any store with the
//! same names and shapes: online weights, EMA teacher weights, gradients and
//! optimizer moments are all `ParamStore`s.

use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Tape variables for every parameter of one store.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    #[inline]
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        self.params.push(Param { name: name.into(), value, decay });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Same names, shapes and decay flags, all values zero.
    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: Tensor::zeros(p.value.rows(), p.value.cols()), decay: p.decay })
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
    }

    /// Registers every parameter on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| if trainable { tape.leaf(p.value.clone()) } else { tape.constant(p.value.clone()) })
            .collect();
        Bound { vars }
    }

    /// Gradients for the parameters bound in `bound`, zero where none arrived.
    pub fn collect_grads(&self, bound: &Bound, grads: &mut Gradients) -> ParamStore {
        let mut out = self.zeros_like();
        for (p, &v) in out.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.take(v) {
                p.value = g;
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &ParamStore) {
        assert!(self.same_layout(other), "parameter layout mismatch");
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            a.value.add_assign(&b.value);
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for p in &mut self.params {
            p.value.scale_in_place(s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    pub fn sq_norm(&self) -> f64 {
        self.params.iter().map(|p| p.value.sq_norm()).sum()
    }

    /// Squared distance between two stores of identical layout.
    pub fn sq_distance(&self, other: &ParamStore) -> f64 {
        assert!(self.same_layout(other), "parameter layout mismatch");
        self.params.iter().zip(&other.params).map(|(a, b)| a.value.sub(&b.value).sq_norm()).sum()
    }

    /// Copies values from `other` by position, checking names and shapes.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<(), String> {
        if self.params.len() != other.params.len() {
            return Err(format!("expected {} tensors, found {}", self.params.len(), other.params.len()));
        }
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(format!(
                    "tensor {} {:?} does not match {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                ));
            }
            a.value = b.value.clone();
        }
        Ok(())
    }
}
