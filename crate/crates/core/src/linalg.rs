//! Small dense linear algebra used by the GP and the latent-prior machinery.
//!
//! Everything here targets matrices of modest size (kernel matrices up to a
//! few hundred rows, covariances of the latent dimension), so simple
//! textbook algorithms are the right tool: unblocked Cholesky and cyclic
//! Jacobi for the symmetric eigenproblem.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
/// Returns `None` if a non-positive pivot is encountered.
pub fn cholesky(a: &ArrayView2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[[i, i]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    Some(l)
}

/// Solves `L x = b` for lower-triangular `L`.
pub fn solve_lower(l: &Array2<f64>, b: &ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[[i, k]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Solves `L^T x = b` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &Array2<f64>, b: &ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Solves `A x = b` given the Cholesky factor `L` of `A`.
pub fn chol_solve(l: &Array2<f64>, b: &ArrayView1<f64>) -> Array1<f64> {
    let y = solve_lower(l, b);
    solve_lower_transpose(l, &y.view())
}

/// Inverse of an SPD matrix from its Cholesky factor.
pub fn chol_inverse(l: &Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut inv = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut e = Array1::<f64>::zeros(n);
        e[j] = 1.0;
        let col = chol_solve(l, &e.view());
        inv.column_mut(j).assign(&col);
    }
    // symmetrize away round-off
    for i in 0..n {
        for j in 0..i {
            let m = 0.5 * (inv[[i, j]] + inv[[j, i]]);
            inv[[i, j]] = m;
            inv[[j, i]] = m;
        }
    }
    inv
}

/// `ln det A` from the Cholesky factor of `A`.
pub fn chol_log_det(l: &Array2<f64>) -> f64 {
    (0..l.nrows()).map(|i| l[[i, i]].ln()).sum::<f64>() * 2.0
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors as columns), unordered.
pub fn symmetric_eigen(a: &ArrayView2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut m = a.to_owned();
    let mut v = Array2::<f64>::eye(n);
    let off = |m: &Array2<f64>| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[[i, j]] * m[[i, j]];
                }
            }
        }
        s
    };
    let scale = (0..n).map(|i| m[[i, i]].abs()).fold(1e-300, f64::max);
    let tol = (scale * 1e-14).powi(2) * (n as f64);
    for _sweep in 0..100 {
        if off(&m) <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let vals = Array1::from_iter((0..n).map(|i| m[[i, i]]));
    (vals, v)
}

/// Symmetrizes `a` and floors its eigenvalues at `floor`, keeping the result
/// usable as a covariance (SPD) matrix even when the input has collapsed or
/// slightly indefinite directions.
pub fn floor_spd(a: &ArrayView2<f64>, floor: f64) -> Array2<f64> {
    let n = a.nrows();
    let mut sym = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            sym[[i, j]] = 0.5 * (a[[i, j]] + a[[j, i]]);
        }
    }
    let (vals, vecs) = symmetric_eigen(&sym.view());
    if vals.iter().all(|&l| l >= floor) {
        return sym;
    }
    let mut out = Array2::<f64>::zeros((n, n));
    for k in 0..n {
        let lam = vals[k].max(floor);
        for i in 0..n {
            for j in 0..n {
                out[[i, j]] += lam * vecs[[i, k]] * vecs[[j, k]];
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            let m = 0.5 * (out[[i, j]] + out[[j, i]]);
            out[[i, j]] = m;
            out[[j, i]] = m;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn cholesky_reconstructs() {
        let a = array![[4.0, 2.0, 0.6], [2.0, 5.0, 1.2], [0.6, 1.2, 3.0]];
        let l = cholesky(&a.view()).unwrap();
        let back = l.dot(&l.t());
        assert!(max_abs_diff(&a, &back) < 1e-12);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(cholesky(&a.view()).is_none());
    }

    #[test]
    fn solve_round_trip() {
        let a = array![[4.0, 2.0], [2.0, 5.0]];
        let l = cholesky(&a.view()).unwrap();
        let b = array![1.0, -3.0];
        let x = chol_solve(&l, &b.view());
        let back = a.dot(&x);
        for i in 0..2 {
            assert!((back[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn inverse_matches_identity() {
        let a = array![[4.0, 2.0, 0.6], [2.0, 5.0, 1.2], [0.6, 1.2, 3.0]];
        let l = cholesky(&a.view()).unwrap();
        let inv = chol_inverse(&l);
        let eye = a.dot(&inv);
        let id = Array2::<f64>::eye(3);
        assert!(max_abs_diff(&eye, &id) < 1e-12);
    }

    #[test]
    fn log_det_matches_direct_2x2() {
        let a = array![[4.0, 2.0], [2.0, 5.0]];
        let l = cholesky(&a.view()).unwrap();
        let det: f64 = 4.0 * 5.0 - 2.0 * 2.0;
        assert!((chol_log_det(&l) - det.ln()).abs() < 1e-12);
    }

    #[test]
    fn jacobi_eigen_reconstructs() {
        let a = array![[2.0, 1.0, 0.0], [1.0, 3.0, 0.5], [0.0, 0.5, 1.0]];
        let (vals, vecs) = symmetric_eigen(&a.view());
        let mut back = Array2::<f64>::zeros((3, 3));
        for k in 0..3 {
            for i in 0..3 {
                for j in 0..3 {
                    back[[i, j]] += vals[k] * vecs[[i, k]] * vecs[[j, k]];
                }
            }
        }
        assert!(max_abs_diff(&a, &back) < 1e-10);
    }

    #[test]
    fn floor_spd_lifts_collapsed_direction() {
        let a = array![[1.0, 0.0], [0.0, 1e-18]];
        let f = floor_spd(&a.view(), 1e-10);
        let l = cholesky(&f.view()).unwrap();
        // smallest eigenvalue is now at least the floor
        let (vals, _) = symmetric_eigen(&f.view());
        assert!(vals.iter().all(|&v| v >= 1e-10 * (1.0 - 1e-9)));
        drop(l);
    }
}
