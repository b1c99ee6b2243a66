//! Squared-exponential covariance with automatic relevance determination.
//!
//! Hyperparameters are stored unconstrained and mapped through softplus.
//! Multi-output GPs in this crate share one univariate kernel across
//! outputs, so all algebra works on the `n×m` univariate Gram matrix.

use crate::error::{Error, Result};
use crate::ndcore::{inv_softplus, softplus_scalar, Tensor, Var};
use crate::params::{Binding, ParamGroup, ParamId, ParamStore};

/// Constrained kernel values, for evaluation outside a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct RbfArd {
    pub lengthscales: Vec<f64>,
    pub variance: f64,
}

impl RbfArd {
    pub fn new(lengthscales: Vec<f64>, variance: f64) -> Self {
        RbfArd {
            lengthscales,
            variance,
        }
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn eval(&self, x: &[f64], x2: &[f64]) -> Result<f64> {
        if x.len() != self.dim() || x2.len() != self.dim() {
            return Err(Error::contract(format!(
                "kernel of dimension {} evaluated at points of dimension {} and {}",
                self.dim(),
                x.len(),
                x2.len()
            )));
        }
        let s: f64 = x
            .iter()
            .zip(x2)
            .zip(&self.lengthscales)
            .map(|((a, b), l)| ((a - b) / l).powi(2))
            .sum();
        Ok(self.variance * (-0.5 * s).exp())
    }

    pub fn gram(&self, x: &Tensor, z: &Tensor) -> Result<Tensor> {
        if x.cols() != self.dim() || z.cols() != self.dim() {
            return Err(Error::contract(format!(
                "gram of kernel dimension {} with inputs {:?} and {:?}",
                self.dim(),
                x.shape(),
                z.shape()
            )));
        }
        let mut out = Tensor::zeros(x.rows(), z.rows());
        for i in 0..x.rows() {
            for j in 0..z.rows() {
                out.set(i, j, self.eval(x.row_slice(i), z.row_slice(j))?);
            }
        }
        Ok(out)
    }
}

/// Trainable kernel: handles into a [`ParamStore`].
#[derive(Debug, Clone, Copy)]
pub struct RbfArdKernel {
    pub lengthscales: ParamId,
    pub variance: ParamId,
    dim: usize,
}

impl RbfArdKernel {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        group: ParamGroup,
        dim: usize,
        lengthscale: f64,
        variance: f64,
    ) -> Self {
        let lengthscales = store.add(
            format!("{prefix}.lengthscales"),
            group,
            Tensor::full(1, dim, inv_softplus(lengthscale)),
        );
        let variance = store.add(
            format!("{prefix}.variance"),
            group,
            Tensor::scalar(inv_softplus(variance)),
        );
        RbfArdKernel {
            lengthscales,
            variance,
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self, store: &ParamStore) -> RbfArd {
        RbfArd {
            lengthscales: store
                .value(self.lengthscales)
                .data()
                .iter()
                .map(|&v| softplus_scalar(v))
                .collect(),
            variance: softplus_scalar(store.value(self.variance).item()),
        }
    }

    pub fn bind<'t>(&self, params: &Binding<'t>) -> BoundRbf<'t> {
        BoundRbf {
            lengthscales: params.get(self.lengthscales).softplus(),
            variance: params.get(self.variance).softplus(),
        }
    }
}

/// Kernel with constrained hyperparameters on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundRbf<'t> {
    pub lengthscales: Var<'t>,
    pub variance: Var<'t>,
}

impl<'t> BoundRbf<'t> {
    pub fn gram(&self, x: Var<'t>, z: Var<'t>) -> Result<Var<'t>> {
        Var::rbf_gram(x, z, self.lengthscales, self.variance)
    }

    /// `k(x, x)`, identical for every input.
    pub fn variance(&self) -> Var<'t> {
        self.variance
    }
}
