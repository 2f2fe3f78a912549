//! Small dense symmetric-positive-definite solves (Cholesky).

use crate::error::TensorError;

/// Lower-triangular Cholesky factor of a row-major n x n SPD matrix.
pub fn cholesky(m: &[f64], n: usize) -> Result<Vec<f64>, TensorError> {
    assert_eq!(m.len(), n * n);
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = m[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(TensorError::NotPositiveDefinite);
                }
                l[i * n + j] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Solve L L^T X = B for X, with B row-major n x k.
pub fn cholesky_solve(l: &[f64], n: usize, b: &[f64], k: usize) -> Vec<f64> {
    assert_eq!(b.len(), n * k);
    let mut x = b.to_vec();
    // forward substitution: L y = b
    for i in 0..n {
        for j in 0..i {
            let lij = l[i * n + j];
            for c in 0..k {
                x[i * k + c] -= lij * x[j * k + c];
            }
        }
        let d = l[i * n + i];
        for c in 0..k {
            x[i * k + c] /= d;
        }
    }
    // back substitution: L^T x = y
    for i in (0..n).rev() {
        for j in (i + 1)..n {
            let lji = l[j * n + i];
            for c in 0..k {
                x[i * k + c] -= lji * x[j * k + c];
            }
        }
        let d = l[i * n + i];
        for c in 0..k {
            x[i * k + c] /= d;
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_known_spd_system() {
        // M = A^T A + I for A = [[1,2],[3,4]]
        let m = [11.0, 14.0, 14.0, 21.0];
        let l = cholesky(&m, 2).unwrap();
        let b = [1.0, 0.0, 0.0, 1.0];
        let x = cholesky_solve(&l, 2, &b, 2);
        // check M x = I
        for i in 0..2 {
            for j in 0..2 {
                let v: f64 = (0..2).map(|k| m[i * 2 + k] * x[k * 2 + j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((v - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_indefinite() {
        let m = [1.0, 2.0, 2.0, 1.0]; // eigenvalues 3, -1
        assert!(cholesky(&m, 2).is_err());
    }
}
