//! Small dense helpers on top of nalgebra.

use nalgebra::DMatrix;
use num_complex::Complex64;

/// Eigenvalues of a Hermitian matrix, ascending.
pub fn hermitian_eigenvalues(m: &DMatrix<Complex64>) -> Vec<f64> {
    let mut eig: Vec<f64> = m.clone().symmetric_eigenvalues().iter().copied().collect();
    eig.sort_by(f64::total_cmp);
    eig
}

/// Eigenvalues of a real symmetric matrix, ascending.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut eig: Vec<f64> = m.clone().symmetric_eigenvalues().iter().copied().collect();
    eig.sort_by(f64::total_cmp);
    eig
}

pub fn min_hermitian_eigenvalue(m: &DMatrix<Complex64>) -> f64 {
    hermitian_eigenvalues(m).first().copied().unwrap_or(0.0)
}

/// `[[Re, −Im], [Im, Re]]`, positive semidefinite iff `m` is.
pub fn real_embedding(m: &DMatrix<Complex64>) -> DMatrix<f64> {
    let (r, c) = m.shape();
    DMatrix::from_fn(2 * r, 2 * c, |i, j| {
        let z = m[(i % r, j % c)];
        match (i < r, j < c) {
            (true, true) | (false, false) => z.re,
            (true, false) => -z.im,
            (false, true) => z.im,
        }
    })
}

/// Inverse of [`real_embedding`] (reads the left column blocks).
pub fn from_real_embedding(e: &DMatrix<f64>) -> DMatrix<Complex64> {
    let r = e.nrows() / 2;
    let c = e.ncols() / 2;
    DMatrix::from_fn(r, c, |i, j| Complex64::new(e[(i, j)], e[(i + r, j)]))
}

pub fn is_projector(p: &DMatrix<Complex64>, tol: f64) -> bool {
    p.is_square() && (p * p - p).norm() <= tol && (p.adjoint() - p).norm() <= tol
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_round_trip_and_spectrum() {
        let m = DMatrix::from_row_slice(
            2,
            2,
            &[
                Complex64::new(2.0, 0.0),
                Complex64::new(0.5, -0.7),
                Complex64::new(0.5, 0.7),
                Complex64::new(1.0, 0.0),
            ],
        );
        let e = real_embedding(&m);
        assert_eq!(from_real_embedding(&e), m);
        let h = hermitian_eigenvalues(&m);
        let s = symmetric_eigenvalues(&e);
        // Every eigenvalue appears twice in the embedding.
        for (k, l) in h.iter().enumerate() {
            assert!((s[2 * k] - l).abs() < 1e-12 && (s[2 * k + 1] - l).abs() < 1e-12);
        }
    }
}
