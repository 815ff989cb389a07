use super::{Gradients, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered trainable tensors. Order is registration order and is
/// what checkpoints serialize.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<R> {
    names: Vec<String>,
    tensors: Vec<Tensor<R>>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<R>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<R> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<R> {
        &mut self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<R>) -> Result<()> {
        if value.shape() != self.tensors[id.0].shape() {
            return Err(Error::shape(
                "ParamStore::set",
                format!("{}: {:?} vs {:?}", self.names[id.0], value.shape(), self.tensors[id.0].shape()),
            ));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<R>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total scalar count.
    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment buffers, one per parameter, plus the shared step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<R> {
    pub step: u64,
    pub m: Vec<Tensor<R>>,
    pub v: Vec<Tensor<R>>,
}

impl<R: Real> AdamState<R> {
    pub fn zeros(store: &ParamStore<R>) -> Self {
        AdamState {
            step: 0,
            m: store.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: store.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }
}

impl AdamW {
    /// One decoupled-weight-decay Adam update on flat buffers; `step` is the
    /// 1-based index of this update.
    pub fn update<R: Real>(
        &self,
        params: &mut [R],
        grads: &[R],
        m: &mut [R],
        v: &mut [R],
        step: u64,
    ) -> Result<()> {
        let n = params.len();
        if grads.len() != n || m.len() != n || v.len() != n {
            return Err(Error::shape(
                "adamw_step",
                format!("params {n}, grads {}, m {}, v {}", grads.len(), m.len(), v.len()),
            ));
        }
        if step == 0 {
            return Err(Error::invalid("adamw_step", "step index starts at 1"));
        }
        let (b1, b2) = (R::lit(self.beta1), R::lit(self.beta2));
        let bc1 = R::lit(1.0 - self.beta1.powi(step as i32));
        let bc2 = R::lit(1.0 - self.beta2.powi(step as i32));
        let lr = R::lit(self.lr);
        let decay = R::lit(1.0 - self.lr * self.weight_decay);
        let eps = R::lit(self.eps);
        for i in 0..n {
            let g = grads[i];
            m[i] = b1 * m[i] + (R::one() - b1) * g;
            v[i] = b2 * v[i] + (R::one() - b2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            params[i] = params[i] * decay - lr * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }

    /// Applies one update to every parameter accepted by `filter` that
    /// received a gradient. Parameters without a gradient are left untouched.
    pub fn step<R: Real>(
        &self,
        store: &mut ParamStore<R>,
        grads: &Gradients<R>,
        state: &mut AdamState<R>,
        filter: impl Fn(ParamId, &str) -> bool,
    ) -> Result<()> {
        if state.m.len() != store.len() || state.v.len() != store.len() {
            return Err(Error::shape(
                "adamw_step",
                format!("state holds {} buffers for {} params", state.m.len(), store.len()),
            ));
        }
        state.step += 1;
        for i in 0..store.len() {
            let id = ParamId(i);
            if !filter(id, &store.names[i]) {
                continue;
            }
            let Some(g) = grads.param(id) else { continue };
            if g.shape() != store.tensors[i].shape() {
                return Err(Error::shape(
                    "adamw_step",
                    format!("{}: grad {:?} vs param {:?}", store.names[i], g.shape(), store.tensors[i].shape()),
                ));
            }
            self.update(
                store.tensors[i].data_mut(),
                g.data(),
                state.m[i].data_mut(),
                state.v[i].data_mut(),
                state.step,
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(wd: f64) -> AdamW {
        AdamW {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = g and v_hat = g^2 after bias correction, so the step is lr * g/(|g|+eps).
        let mut p = [1.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        cfg(0.0).update(&mut p, &[1.0], &mut m, &mut v, 1).unwrap();
        let expected = 1.0 - 1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15, "{}", p[0]);
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-10);
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut p = [0.3f64, -2.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        for s in 1..5 {
            cfg(0.0).update(&mut p, &[0.0, 0.0], &mut m, &mut v, s).unwrap();
        }
        assert_eq!(p, [0.3, -2.0]);
    }

    #[test]
    fn zero_grad_with_decay_is_pure_shrink() {
        let mut p = [2.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        cfg(0.1).update(&mut p, &[0.0], &mut m, &mut v, 1).unwrap();
        assert_eq!(p[0], 2.0 * (1.0 - 1e-3 * 0.1));
    }

    #[test]
    fn mismatched_buffers_rejected() {
        let mut p = [1.0f32, 2.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 1]);
        assert!(cfg(0.0).update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1).is_err());
    }
}
