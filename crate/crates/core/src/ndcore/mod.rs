//! Dense matrices, Cholesky-based linear algebra, and a reverse-mode tape.

pub mod linalg;
mod tape;
mod tensor;

pub use linalg::Jitter;
pub use tape::{inv_softplus, softplus_scalar, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Central finite-difference gradient of `f` at `x`.
///
/// Used as the independent oracle for the tape in tests across the crate.
pub fn finite_difference(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut grad = Tensor::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Largest relative discrepancy `|a−b| / max(|a|,|b|,floor)` over entries.
pub fn max_relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
