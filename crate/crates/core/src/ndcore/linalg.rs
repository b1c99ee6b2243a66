//! Value-level dense factorizations used by the tape and by inference-only code.

use super::Tensor;
use crate::error::{Error, Result};

/// Diagonal jitter policy for Cholesky factorizations.
///
/// The jitter is relative: `factor * mean(diag(A))` is added to the diagonal.
/// On failure the factor is raised tenfold (starting from at least `1e-6`)
/// until it exceeds `max_factor`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    pub factor: f64,
    pub max_factor: f64,
}

impl Jitter {
    pub const DEFAULT: Jitter = Jitter {
        factor: 1e-6,
        max_factor: 1e-2,
    };

    /// No jitter unless the plain factorization fails.
    pub const EXACT: Jitter = Jitter {
        factor: 0.0,
        max_factor: 1e-2,
    };

    fn escalation(self) -> impl Iterator<Item = f64> {
        let mut next = Some(self.factor);
        let max = self.max_factor;
        std::iter::from_fn(move || {
            let cur = next?;
            let raised = if cur <= 0.0 { 1e-6 } else { cur * 10.0 };
            // tolerate rounding in the repeated multiplication
            next = (raised <= max * (1.0 + 1e-9)).then_some(raised);
            Some(cur)
        })
    }
}

impl Default for Jitter {
    fn default() -> Self {
        Jitter::DEFAULT
    }
}

fn check_square(a: &Tensor, op: &'static str) -> Result<usize> {
    if a.rows() != a.cols() {
        return Err(Error::Dimension {
            op,
            lhs: a.shape(),
            rhs: [a.cols(), a.rows()],
        });
    }
    Ok(a.rows())
}

/// Unjittered Cholesky; on failure reports the first non-positive pivot.
fn cholesky_plain(a: &Tensor, shift: f64) -> std::result::Result<Tensor, usize> {
    let n = a.rows();
    let mut l = Tensor::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j) + shift;
        for k in 0..j {
            let v = l.get(j, k);
            d -= v * v;
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(j);
        }
        let djj = d.sqrt();
        l.set(j, j, djj);
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / djj);
        }
    }
    Ok(l)
}

/// Cholesky factor of `a + jitter·mean(diag a)·I`, reading only the lower triangle.
///
/// Returns the factor and the relative jitter factor that succeeded.
pub fn cholesky(a: &Tensor, jitter: Jitter) -> Result<(Tensor, f64)> {
    let n = check_square(a, "cholesky")?;
    if n == 0 {
        return Ok((Tensor::zeros(0, 0), 0.0));
    }
    let mean_diag = a.diag().iter().sum::<f64>() / n as f64;
    let mut last = (0, 0.0);
    for factor in jitter.escalation() {
        let shift = factor * mean_diag;
        match cholesky_plain(a, shift) {
            Ok(l) => return Ok((l, factor)),
            Err(pivot) => last = (pivot, shift),
        }
    }
    Err(Error::NotPositiveDefinite {
        pivot: last.0,
        jitter: last.1,
    })
}

fn check_lower(l: &Tensor, b: &Tensor, op: &'static str) -> Result<usize> {
    let n = check_square(l, op)?;
    if b.rows() != n {
        return Err(Error::Dimension {
            op,
            lhs: l.shape(),
            rhs: b.shape(),
        });
    }
    for i in 0..n {
        if l.get(i, i) == 0.0 {
            return Err(Error::Singular { index: i });
        }
    }
    Ok(n)
}

/// Solves `l·x = b` for lower-triangular `l` (upper part ignored).
pub fn solve_lower(l: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = check_lower(l, b, "solve_lower")?;
    let m = b.cols();
    let mut x = b.clone();
    for i in 0..n {
        let lii = l.get(i, i);
        for k in 0..i {
            let lik = l.get(i, k);
            if lik == 0.0 {
                continue;
            }
            for c in 0..m {
                let v = x.get(i, c) - lik * x.get(k, c);
                x.set(i, c, v);
            }
        }
        for c in 0..m {
            let v = x.get(i, c) / lii;
            x.set(i, c, v);
        }
    }
    Ok(x)
}

/// Solves `lᵀ·x = b` for lower-triangular `l`.
pub fn solve_lower_transposed(l: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = check_lower(l, b, "solve_lower_transposed")?;
    let m = b.cols();
    let mut x = b.clone();
    for i in (0..n).rev() {
        let lii = l.get(i, i);
        for k in i + 1..n {
            let lki = l.get(k, i);
            if lki == 0.0 {
                continue;
            }
            for c in 0..m {
                let v = x.get(i, c) - lki * x.get(k, c);
                x.set(i, c, v);
            }
        }
        for c in 0..m {
            let v = x.get(i, c) / lii;
            x.set(i, c, v);
        }
    }
    Ok(x)
}

/// `2·Σ log L_ii` for a Cholesky factor.
pub fn log_det_from_cholesky(l: &Tensor) -> f64 {
    l.diag().iter().map(|d| 2.0 * d.abs().ln()).sum()
}

/// Moore–Penrose pseudo-inverse of a full-row-rank or full-column-rank matrix.
pub fn pseudo_inverse(a: &Tensor) -> Result<Tensor> {
    let at = a.transpose();
    if a.rows() <= a.cols() {
        // A⁺ = Aᵀ (A Aᵀ)⁻¹
        let gram = a.matmul(&at)?;
        let (l, _) = cholesky(&gram, Jitter::EXACT)?;
        let inv_t = solve_lower_transposed(&l, &solve_lower(&l, &a.clone())?)?;
        Ok(inv_t.transpose())
    } else {
        // A⁺ = (Aᵀ A)⁻¹ Aᵀ
        let gram = at.matmul(a)?;
        let (l, _) = cholesky(&gram, Jitter::EXACT)?;
        solve_lower_transposed(&l, &solve_lower(&l, &at)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_factor_is_identity() {
        let (l, f) = cholesky(&Tensor::identity(3), Jitter::EXACT).unwrap();
        assert_eq!(l, Tensor::identity(3));
        assert_eq!(f, 0.0);
    }

    #[test]
    fn two_by_two_hand_case() {
        let a = Tensor::from_rows(&[[4.0, 2.0], [2.0, 3.0]]);
        let (l, _) = cholesky(&a, Jitter::EXACT).unwrap();
        let expect = Tensor::from_rows(&[[2.0, 0.0], [1.0, 2f64.sqrt()]]);
        assert!(l.sub(&expect).unwrap().max_abs() < 1e-15);
        let back = l.matmul(&l.transpose()).unwrap();
        assert!(back.sub(&a).unwrap().frobenius_norm() / a.frobenius_norm() < 1e-12);
    }

    #[test]
    fn default_jitter_reconstructs_shifted_matrix() {
        let a = Tensor::from_rows(&[[4.0, 2.0], [2.0, 3.0]]);
        let (l, f) = cholesky(&a, Jitter::DEFAULT).unwrap();
        let shifted = a.add(&Tensor::identity(2).scale(f * 3.5)).unwrap();
        let back = l.matmul(&l.transpose()).unwrap();
        assert!(back.sub(&shifted).unwrap().frobenius_norm() / shifted.frobenius_norm() < 1e-10);
    }

    #[test]
    fn singular_psd_matrix_needs_escalation() {
        // rank one: plain factorization fails at pivot 1
        let a = Tensor::from_rows(&[[1.0, 1.0], [1.0, 1.0]]);
        let (l, f) = cholesky(&a, Jitter::EXACT).unwrap();
        assert!(f >= 1e-6);
        assert!(l.get(1, 1) > 0.0);
    }

    #[test]
    fn indefinite_matrix_reports_pivot() {
        let a = Tensor::from_rows(&[[1.0, 0.0], [0.0, -5.0]]);
        match cholesky(&a, Jitter::DEFAULT) {
            Err(Error::NotPositiveDefinite { pivot, .. }) => assert_eq!(pivot, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn triangular_solve_cases() {
        let b = Tensor::column(&[2.0, 3.0]);
        assert_eq!(solve_lower(&Tensor::identity(2), &b).unwrap(), b);
        let l = Tensor::from_rows(&[[2.0, 0.0], [1.0, 1.0]]);
        let x = solve_lower(&l, &b).unwrap();
        assert_eq!(x.data(), &[1.0, 2.0]);
        let zero = Tensor::from_rows(&[[1.0, 0.0], [1.0, 0.0]]);
        assert!(matches!(
            solve_lower(&zero, &b),
            Err(Error::Singular { index: 1 })
        ));
    }

    #[test]
    fn solve_round_trips() {
        let l = Tensor::from_rows(&[[1.5, 0.0, 0.0], [0.3, 2.0, 0.0], [-0.7, 0.2, 0.9]]);
        let x = Tensor::from_rows(&[[1.0, -2.0], [0.5, 0.25], [3.0, 1.0]]);
        let b = l.matmul(&x).unwrap();
        assert!(solve_lower(&l, &b).unwrap().sub(&x).unwrap().max_abs() < 1e-10);
        let bt = l.transpose().matmul(&x).unwrap();
        assert!(
            solve_lower_transposed(&l, &bt)
                .unwrap()
                .sub(&x)
                .unwrap()
                .max_abs()
                < 1e-10
        );
    }

    #[test]
    fn pseudo_inverse_of_wide_matrix() {
        let a = Tensor::from_rows(&[[1.0, 0.0, 1.0], [0.0, 2.0, 0.0]]);
        let p = pseudo_inverse(&a).unwrap();
        let ap = a.matmul(&p).unwrap();
        assert!(ap.sub(&Tensor::identity(2)).unwrap().max_abs() < 1e-12);
    }
}
