use crate::error::{Error, Result};
use crate::ndcore::Tensor;
use crate::params::{ParamGroup, ParamStore};

/// Adam moments for every parameter of a store, with one shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(store: &ParamStore, beta1: f64) -> Self {
        let zeros: Vec<Tensor> = store
            .ids()
            .map(|id| {
                let v = store.value(id);
                Tensor::zeros(v.rows(), v.cols())
            })
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One descent step on the parameters whose group is `active`; `grads`
    /// are gradients of the loss, indexed like the store.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Tensor],
        lr: f64,
        active: impl Fn(ParamGroup) -> bool,
    ) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} parameters, store has {}, got {} gradients",
                self.m.len(),
                store.len(),
                grads.len()
            )));
        }
        for id in store.ids() {
            let g = &grads[id.index()];
            if g.shape() != store.value(id).shape() {
                return Err(Error::Dimension {
                    op: "adam",
                    lhs: store.value(id).shape(),
                    rhs: g.shape(),
                });
            }
            if active(store.group(id)) && !g.is_finite() {
                return Err(Error::Training(format!("non-finite gradient for `{}`", store.name(id))));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for id in store.ids() {
            if !active(store.group(id)) {
                continue;
            }
            let k = id.index();
            let g = grads[k].data();
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            let p = store.value_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
