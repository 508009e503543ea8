//! Dense symmetric linear algebra: Cholesky factorization and a full
//! symmetric eigendecomposition (Householder tridiagonalization followed by
//! implicit-shift QL). Both are deterministic.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
pub struct Cholesky {
    l: Array2<f64>,
}

/// Factor a symmetric positive-definite matrix as `L * L^T`.
///
/// Only the lower triangle of `a` is read. Fails with a numeric error when a
/// pivot is non-positive or non-finite.
pub fn cholesky(a: &ArrayView2<f64>) -> Result<Cholesky> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: a.ncols(),
            context: "cholesky requires a square matrix",
        });
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let dot = {
                let (ri, rj) = (l.row(i), l.row(j));
                let (si, sj) = (
                    ri.as_slice().expect("row-major"),
                    rj.as_slice().expect("row-major"),
                );
                si[..j]
                    .iter()
                    .zip(&sj[..j])
                    .map(|(x, y)| x * y)
                    .sum::<f64>()
            };
            if j < i {
                let ljj = l[[j, j]];
                l[[i, j]] = (a[[i, j]] - dot) / ljj;
            } else {
                let d = a[[i, i]] - dot;
                if !d.is_finite() || d <= 0.0 {
                    return Err(Error::Numeric(format!(
                        "cholesky pivot {d:.3e} at index {i} is not positive"
                    )));
                }
                l[[i, i]] = d.sqrt();
            }
        }
    }
    Ok(Cholesky { l })
}

impl Cholesky {
    /// Solve `A x = b` using the stored factor.
    pub fn solve(&self, b: &ArrayView1<f64>) -> Array1<f64> {
        let n = self.l.nrows();
        assert_eq!(b.len(), n, "rhs length mismatch");
        let mut y = b.to_owned();
        // forward substitution L y = b
        for i in 0..n {
            let row = self.l.row(i);
            let s = row.as_slice().expect("row-major")[..i]
                .iter()
                .zip(y.as_slice().expect("contiguous")[..i].iter())
                .map(|(l, v)| l * v)
                .sum::<f64>();
            y[i] = (y[i] - s) / self.l[[i, i]];
        }
        // back substitution L^T x = y
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= self.l[[k, i]] * y[k];
            }
            y[i] = s / self.l[[i, i]];
        }
        y
    }
}

/// Eigendecomposition of a symmetric matrix: `a = V diag(values) V^T` with
/// eigenvalues in ascending order and orthonormal eigenvectors in the
/// columns of `vectors`.
pub struct SymmetricEigen {
    pub values: Array1<f64>,
    pub vectors: Array2<f64>,
}

/// Full eigendecomposition of a dense symmetric matrix.
///
/// Householder reduction to tridiagonal form with accumulated
/// transformations, then implicit-shift QL iteration. Only the lower
/// triangle of `a` is read. Errors if the QL iteration fails to converge
/// within the iteration cap.
pub fn symmetric_eigen(a: &ArrayView2<f64>) -> Result<SymmetricEigen> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: a.ncols(),
            context: "symmetric_eigen requires a square matrix",
        });
    }
    if n == 0 {
        return Ok(SymmetricEigen {
            values: Array1::zeros(0),
            vectors: Array2::zeros((0, 0)),
        });
    }
    // symmetrize defensively; callers pass numerically symmetric input
    let mut v = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            v[[i, j]] = 0.5 * (a[[i, j]] + a[[j, i]]);
        }
    }
    let mut d = Array1::<f64>::zeros(n);
    let mut e = Array1::<f64>::zeros(n);
    tred2(&mut v, &mut d, &mut e);
    tql2(&mut v, &mut d, &mut e)?;
    // ascending sort with matching eigenvector columns
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].partial_cmp(&d[j]).expect("finite eigenvalues"));
    let values = Array1::from_iter(order.iter().map(|&k| d[k]));
    let mut vectors = Array2::<f64>::zeros((n, n));
    for (new_col, &old_col) in order.iter().enumerate() {
        for r in 0..n {
            vectors[[r, new_col]] = v[[r, old_col]];
        }
    }
    Ok(SymmetricEigen { values, vectors })
}

/// Householder reduction of a real symmetric matrix to tridiagonal form.
/// On exit `v` holds the accumulated orthogonal transformation, `d` the
/// diagonal, and `e` the subdiagonal (in `e[1..]`).
fn tred2(v: &mut Array2<f64>, d: &mut Array1<f64>, e: &mut Array1<f64>) {
    let n = v.nrows();
    for j in 0..n {
        d[j] = v[[n - 1, j]];
    }
    for i in (1..n).rev() {
        let l = i;
        let mut h = 0.0;
        let mut scale = 0.0;
        if l > 1 {
            for k in 0..l {
                scale += d[k].abs();
            }
        }
        if scale == 0.0 {
            e[i] = if l > 0 { d[l - 1] } else { 0.0 };
            for j in 0..l {
                d[j] = v[[l - 1, j]];
                v[[i, j]] = 0.0;
                v[[j, i]] = 0.0;
            }
        } else {
            for k in 0..l {
                d[k] /= scale;
                h += d[k] * d[k];
            }
            let mut f = d[l - 1];
            let mut g = if f > 0.0 { -h.sqrt() } else { h.sqrt() };
            e[i] = scale * g;
            h -= f * g;
            d[l - 1] = f - g;
            for j in 0..l {
                e[j] = 0.0;
            }
            for j in 0..l {
                f = d[j];
                v[[j, i]] = f;
                g = e[j] + v[[j, j]] * f;
                for k in (j + 1)..l {
                    g += v[[k, j]] * d[k];
                    e[k] += v[[k, j]] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..l {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..l {
                e[j] -= hh * d[j];
            }
            for j in 0..l {
                f = d[j];
                g = e[j];
                for k in j..l {
                    v[[k, j]] -= f * e[k] + g * d[k];
                }
                d[j] = v[[l - 1, j]];
                v[[i, j]] = 0.0;
            }
        }
        d[i] = h;
    }
    // accumulate transformations
    for i in 0..(n - 1) {
        v[[n - 1, i]] = v[[i, i]];
        v[[i, i]] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[[k, i + 1]] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[[k, i + 1]] * v[[k, j]];
                }
                for k in 0..=i {
                    v[[k, j]] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[[k, i + 1]] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[[n - 1, j]];
        v[[n - 1, j]] = 0.0;
    }
    v[[n - 1, n - 1]] = 1.0;
    e[0] = 0.0;
}

/// Implicit-shift QL iteration on the tridiagonal form produced by `tred2`.
fn tql2(v: &mut Array2<f64>, d: &mut Array1<f64>, e: &mut Array1<f64>) -> Result<()> {
    let n = v.nrows();
    const MAX_SWEEPS: usize = 50;
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    let mut f = 0.0_f64;
    let mut tst1 = 0.0_f64;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m >= n {
            m = n - 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > MAX_SWEEPS {
                    return Err(Error::Numeric(format!(
                        "QL iteration failed to converge for eigenvalue {l} after {MAX_SWEEPS} sweeps \
                         (off-diagonal {:.3e}, scale {:.3e})",
                        e[l], tst1
                    )));
                }
                // implicit shift
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for i in (l + 2)..n {
                    d[i] -= h;
                }
                f += h;
                // QL sweep
                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for k in 0..n {
                        h = v[[k, i + 1]];
                        v[[k, i + 1]] = s * v[[k, i]] + c * h;
                        v[[k, i]] = c * v[[k, i]] - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}

/// Frobenius norm of `a`.
pub fn fro_norm(a: &ArrayView2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0));
        let mut a = b.t().dot(&b);
        for i in 0..n {
            a[[i, i]] += 0.5;
        }
        a
    }

    #[test]
    fn cholesky_solves_spd_system() {
        let a = random_spd(40, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x_true = Array1::from_shape_fn(40, |_| rng.gen_range(-2.0..2.0));
        let b = a.dot(&x_true);
        let f = cholesky(&a.view()).unwrap();
        let x = f.solve(&b.view());
        let err = (&x - &x_true).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "solve error {err}");
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(cholesky(&a.view()).is_err());
    }

    #[test]
    fn eigen_reconstructs_and_is_orthonormal() {
        for seed in [0u64, 1, 2] {
            let a = random_spd(30, seed);
            let eig = symmetric_eigen(&a.view()).unwrap();
            let n = 30;
            // reconstruction
            let lam = Array2::from_diag(&eig.values);
            let rec = eig.vectors.dot(&lam).dot(&eig.vectors.t());
            let rel = fro_norm(&(&rec - &a).view()) / fro_norm(&a.view());
            assert!(rel < 1e-12, "reconstruction rel err {rel}");
            // orthonormality
            let vtv = eig.vectors.t().dot(&eig.vectors);
            let eye = Array2::<f64>::eye(n);
            let o = fro_norm(&(&vtv - &eye).view());
            assert!(o < 1e-12, "orthonormality err {o}");
            // ascending
            for i in 1..n {
                assert!(eig.values[i] >= eig.values[i - 1]);
            }
        }
    }

    #[test]
    fn eigen_known_2x2() {
        let a = array![[2.0, 1.0], [1.0, 2.0]];
        let eig = symmetric_eigen(&a.view()).unwrap();
        assert!((eig.values[0] - 1.0).abs() < 1e-12);
        assert!((eig.values[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn eigen_handles_diagonal_and_zero() {
        let a = Array2::from_diag(&array![4.0, 1.0, 0.0]);
        let eig = symmetric_eigen(&a.view()).unwrap();
        assert!((eig.values[0] - 0.0).abs() < 1e-14);
        assert!((eig.values[1] - 1.0).abs() < 1e-14);
        assert!((eig.values[2] - 4.0).abs() < 1e-14);
        let z = Array2::<f64>::zeros((5, 5));
        let eig = symmetric_eigen(&z.view()).unwrap();
        assert!(eig.values.iter().all(|v| v.abs() < 1e-300));
    }
}
