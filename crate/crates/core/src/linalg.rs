//! Thin helpers over `faer` dense matrices.

use crate::error::{Error, Result};
use faer::linalg::solvers::{PartialPivLu, Solve};
use faer::Mat;

pub type Matrix = Mat<f64>;

/// Dense LU factorization with partial pivoting.
pub struct DenseLu {
    lu: PartialPivLu<f64>,
    n: usize,
}

impl DenseLu {
    /// Factor a square matrix, rejecting numerically singular ones.
    pub fn factor(a: &Matrix, what: &str) -> Result<Self> {
        let n = a.nrows();
        if n != a.ncols() {
            return Err(Error::Input(format!("{what}: matrix is not square")));
        }
        let lu = a.partial_piv_lu();
        let u = lu.U();
        let mut max_piv = 0.0f64;
        let mut min_piv = f64::INFINITY;
        for i in 0..n {
            let p = u[(i, i)].abs();
            if !p.is_finite() {
                return Err(Error::Singular(format!("{what}: non-finite pivot")));
            }
            max_piv = max_piv.max(p);
            min_piv = min_piv.min(p);
        }
        if n > 0 && (max_piv == 0.0 || min_piv <= 1e-14 * max_piv) {
            return Err(Error::Singular(format!(
                "{what}: pivot ratio {:.3e}",
                if max_piv > 0.0 { min_piv / max_piv } else { 0.0 }
            )));
        }
        Ok(Self { lu, n })
    }

    /// Factor without the conditioning check; callers validate the solutions.
    pub fn factor_unchecked(a: &Matrix) -> Self {
        Self { lu: a.partial_piv_lu(), n: a.nrows() }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let mut rhs = Mat::<f64>::from_fn(self.n, 1, |i, _| b[i]);
        self.lu.solve_in_place(rhs.as_mut());
        (0..self.n).map(|i| rhs[(i, 0)]).collect()
    }

    pub fn solve_mat(&self, b: &Matrix) -> Matrix {
        let mut rhs = b.clone();
        self.lu.solve_in_place(rhs.as_mut());
        rhs
    }
}

pub fn mat_vec(a: &Matrix, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; a.nrows()];
    for j in 0..a.ncols() {
        let xj = x[j];
        if xj == 0.0 {
            continue;
        }
        for (i, yi) in y.iter_mut().enumerate() {
            *yi += a[(i, j)] * xj;
        }
    }
    y
}

pub fn mat_mul(a: &Matrix, b: &Matrix) -> Matrix {
    a * b
}

/// Copy of the sub-matrix `a[rows, cols]`.
pub fn submatrix(a: &Matrix, rows: &[usize], cols: &[usize]) -> Matrix {
    Mat::from_fn(rows.len(), cols.len(), |i, j| a[(rows[i], cols[j])])
}

pub fn row(a: &Matrix, i: usize) -> Vec<f64> {
    (0..a.ncols()).map(|j| a[(i, j)]).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Neumaier compensated summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn merge(&mut self, other: &KahanSum) {
        self.add(other.sum);
        self.add(other.comp);
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lu_solves_small_system() {
        let a = Mat::from_fn(3, 3, |i, j| if i == j { 4.0 } else { 1.0 });
        let lu = DenseLu::factor(&a, "test").unwrap();
        let x = lu.solve_vec(&[6.0, 6.0, 6.0]);
        for v in x {
            assert!((v - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn singular_matrix_is_rejected() {
        let a = Mat::from_fn(2, 2, |_, _| 1.0);
        assert!(matches!(DenseLu::factor(&a, "t"), Err(Error::Singular(_))));
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut s = KahanSum::default();
        s.add(1e16);
        for _ in 0..1000 {
            s.add(1.0);
        }
        s.add(-1e16);
        assert_eq!(s.value(), 1000.0);
    }
}
