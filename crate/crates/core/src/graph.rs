//! A tape bound to a parameter table, a random state and a mode.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Deref, DerefMut};

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::ops::activation::{check_rate, dropout_mask};
use crate::ops::norm::update_running;
use crate::param::{BufferId, ParamId, ParamStore};
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How stochastic and stateful layers behave during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Batch statistics, dropout active, running statistics updated.
    Train,
    /// Running statistics, no dropout.
    Eval,
    /// Batch statistics without dropout or running-statistic updates; a
    /// deterministic function of the parameters for finite differencing.
    Check,
}

impl Mode {
    pub fn uses_batch_stats(self) -> bool {
        matches!(self, Mode::Train | Mode::Check)
    }
}

/// Forward-pass context. Parameters are read through a shared borrow, so
/// several eval graphs may run concurrently over one table; running-stat
/// updates are collected and applied afterwards by the owner.
pub struct Graph<'a, T> {
    tape: Tape<T>,
    store: &'a ParamStore<T>,
    rng: &'a mut RngState,
    mode: Mode,
    bound: Vec<Option<Var>>,
    updates: Vec<(BufferId, Tensor<T>)>,
}

impl<T> Deref for Graph<'_, T> {
    type Target = Tape<T>;

    fn deref(&self) -> &Tape<T> {
        &self.tape
    }
}

impl<T> DerefMut for Graph<'_, T> {
    fn deref_mut(&mut self) -> &mut Tape<T> {
        &mut self.tape
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new(store: &'a ParamStore<T>, rng: &'a mut RngState, mode: Mode) -> Self {
        Self { tape: Tape::new(), bound: vec![None; store.params().len()], store, rng, mode, updates: Vec::new() }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.tape.leaf(value)
    }

    /// The node holding parameter `id`; repeated calls share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.param_leaf(self.store.param(id).value.clone(), id);
        self.bound[id.0] = Some(v);
        v
    }

    /// Batch norm along `axis`, choosing statistics by mode.
    pub fn batch_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId, mean: BufferId, var: BufferId, axis: usize) -> Result<Var> {
        let (g, b) = (self.param(gamma), self.param(beta));
        if !self.mode.uses_batch_stats() {
            let (m, v) = (&self.store.buffer(mean).value, &self.store.buffer(var).value);
            return self.tape.batch_norm_eval(x, g, b, m, v, axis);
        }
        let y = self.tape.batch_norm_train(x, g, b, axis)?;
        if self.mode == Mode::Train {
            let stats = self.tape.batch_stats(y).expect("train-mode batch norm saves statistics");
            let mut m = self.store.buffer(mean).value.clone();
            let mut v = self.store.buffer(var).value.clone();
            update_running(stats, &mut m, &mut v);
            self.updates.push((mean, m));
            self.updates.push((var, v));
        }
        Ok(y)
    }

    /// Inverted dropout; the identity outside train mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        check_rate(rate)?;
        if self.mode != Mode::Train || rate == 0.0 {
            return Ok(x);
        }
        let mask = dropout_mask(self.tape.shape(x), rate, self.rng)?;
        self.tape.mul_const(x, mask)
    }

    /// Gradients of `root` with respect to every parameter it touched.
    pub fn param_gradients(&self, root: Var) -> Result<Vec<(ParamId, Tensor<T>)>> {
        let grads = self.tape.backward(root)?;
        Ok(self
            .bound
            .iter()
            .flatten()
            .filter_map(|&v| {
                let id = self.tape.param_of(v)?;
                Some((id, grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(self.tape.shape(v)))))
            })
            .collect())
    }

    /// Running-statistic updates recorded in train mode.
    pub fn into_updates(self) -> Vec<(BufferId, Tensor<T>)> {
        self.updates
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bn_store() -> (ParamStore<f64>, [ParamId; 2], [BufferId; 2]) {
        let mut s = ParamStore::new();
        let g = s.add_param("bn.gamma", Tensor::ones(&[1]), false).unwrap();
        let b = s.add_param("bn.beta", Tensor::zeros(&[1]), false).unwrap();
        let m = s.add_buffer("bn.running_mean", Tensor::zeros(&[1])).unwrap();
        let v = s.add_buffer("bn.running_var", Tensor::ones(&[1])).unwrap();
        (s, [g, b], [m, v])
    }

    #[test]
    fn only_train_mode_updates_running_stats() {
        let (s, [g, b], [m, v]) = bn_store();
        let x = Tensor::from_f64(&[2, 1], &[1.0, 3.0]).unwrap();
        for (mode, expect) in [(Mode::Train, 2), (Mode::Check, 0), (Mode::Eval, 0)] {
            let mut rng = RngState::new(0);
            let mut graph = Graph::new(&s, &mut rng, mode);
            let xv = graph.input(x.clone());
            graph.batch_norm(xv, g, b, m, v, 1).unwrap();
            assert_eq!(graph.into_updates().len(), expect, "{mode:?}");
        }
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let (s, ..) = bn_store();
        let x = Tensor::<f64>::ones(&[32]);
        let mut rng = RngState::new(3);
        let mut graph = Graph::new(&s, &mut rng, Mode::Check);
        let xv = graph.input(x.clone());
        let y = graph.dropout(xv, 0.5).unwrap();
        assert_eq!(graph.value(y), &x);
        drop(graph);
        assert_eq!(rng.counter, 0);
        let mut graph = Graph::new(&s, &mut rng, Mode::Train);
        let xv = graph.input(x.clone());
        let y = graph.dropout(xv, 0.5).unwrap();
        assert_ne!(graph.value(y), &x);
    }

    #[test]
    fn param_gradient_reaches_store_order() {
        let (mut s, [g, b], [m, v]) = bn_store();
        let x = Tensor::from_f64(&[2, 1], &[1.0, 3.0]).unwrap();
        let mut rng = RngState::new(0);
        let grads = {
            let mut graph = Graph::new(&s, &mut rng, Mode::Eval);
            let xv = graph.input(x);
            let y = graph.batch_norm(xv, g, b, m, v, 1).unwrap();
            let w = graph.input(Tensor::from_f64(&[1, 2], &[1.0, 1.0]).unwrap());
            let r = graph.matmul(w, y).unwrap();
            graph.param_gradients(r).unwrap()
        };
        s.accumulate_grads(&grads);
        // beta receives one per element; gamma receives the sum of x_hat
        assert!((s.param(b).grad.item() - 2.0).abs() < 1e-12);
        let xhat_sum = 4.0 / (1.0f64 + 1e-5).sqrt();
        assert!((s.param(g).grad.item() - xhat_sum).abs() < 1e-9);
    }
}
