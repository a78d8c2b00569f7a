//! Named trainable parameters and the SGD update.

use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    /// Frozen parameters receive zero updates no matter what gradient has
    /// accumulated; gradients still flow through them on the tape.
    pub frozen: bool,
}

/// Flat store of all parameters of a model, addressed by [`ParamId`].
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Parameter { name: name.into(), value, frozen: false });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_frozen(&mut self, ids: &[ParamId], frozen: bool) {
        for &id in ids {
            self.params[id.0].frozen = frozen;
        }
    }

    pub fn clear_grads(&mut self, ids: &[ParamId]) {
        for &id in ids {
            self.params[id.0].value.clear_grad();
        }
    }

    /// Vanilla SGD with decoupled-from-nothing weight decay:
    /// `p <- p - lr * (grad + weight_decay * p)`. Gradients of every listed
    /// parameter are cleared afterwards; frozen parameters are left
    /// untouched but still cleared. A non-frozen parameter without an
    /// accumulated gradient is an error.
    pub fn sgd_step(&mut self, ids: &[ParamId], lr: f64, weight_decay: f64) -> Result<()> {
        for &id in ids {
            let p = &mut self.params[id.0];
            if p.frozen {
                p.value.clear_grad();
                continue;
            }
            let Some(grad) = p.value.grad() else {
                return Err(TensorError::MissingGrad { name: p.name.clone() });
            };
            let update: Vec<f64> = p
                .value
                .data()
                .iter()
                .zip(grad)
                .map(|(&v, &g)| lr * (g + weight_decay * v))
                .collect();
            for (v, u) in p.value.data_mut().iter_mut().zip(update) {
                *v -= u;
            }
            super::ensure_finite(p.value.data(), "sgd_step")?;
            p.value.clear_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_plain_step() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::scalar(1.0));
        store.get_mut(id).value.accumulate_grad(&[1.0]).unwrap();
        store.sgd_step(&[id], 0.1, 0.0).unwrap();
        assert!((store.get(id).value.item() - 0.9).abs() < 1e-15);
        assert!(store.get(id).value.grad().is_none());
    }

    #[test]
    fn sgd_weight_decay_only() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::scalar(1.0));
        store.get_mut(id).value.accumulate_grad(&[0.0]).unwrap();
        store.sgd_step(&[id], 0.1, 0.1).unwrap();
        assert!((store.get(id).value.item() - 0.99).abs() < 1e-15);
    }

    #[test]
    fn frozen_parameter_never_moves() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::scalar(2.0));
        store.set_frozen(&[id], true);
        store.get_mut(id).value.accumulate_grad(&[123.0]).unwrap();
        store.sgd_step(&[id], 0.5, 0.1).unwrap();
        assert_eq!(store.get(id).value.item(), 2.0);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::scalar(1.0));
        assert!(matches!(
            store.sgd_step(&[id], 0.1, 0.0),
            Err(TensorError::MissingGrad { .. })
        ));
    }
}
