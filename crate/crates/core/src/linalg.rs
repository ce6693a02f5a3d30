//! Dense kernels: a strided GEMM used by the layers and a blocked Cholesky solver.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const CHOLESKY_BLOCK: usize = 64;

/// Strided matrix view `(data, rows, cols, row_stride, col_stride)`.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        View {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        View {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

/// `c = alpha * a * b + beta * c` where `c` is row-major `[a.rows, b.cols]`.
pub(crate) fn gemm(alpha: f64, a: View, b: View, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner extent");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(a.data.len() >= a.span() && b.data.len() >= b.span());
    assert_eq!(c.len(), m * n, "gemm output extent");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    // SAFETY: extents and strides were checked against the slice lengths above,
    // and `c` is an exclusive borrow disjoint from `a` and `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_symmetric(a: &Tensor) -> Result<()> {
    let n = a.rows();
    let scale = a.max_abs().max(1.0);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..i {
            worst = worst.max((a.at(i, j) - a.at(j, i)).abs());
        }
    }
    if worst > 1e-9 * scale {
        return Err(Error::NotSymmetric { asymmetry: worst });
    }
    Ok(())
}

/// Lower Cholesky factor `L` (row-major, upper triangle left as garbage) of an SPD matrix.
pub(crate) fn cholesky_in_place(a: &mut [f64], n: usize) -> Result<()> {
    let mut j0 = 0;
    while j0 < n {
        let j1 = (j0 + CHOLESKY_BLOCK).min(n);
        // Diagonal block.
        for j in j0..j1 {
            let mut d = a[j * n + j];
            for p in j0..j {
                d -= a[j * n + p] * a[j * n + p];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Factorization { pivot: j, value: d });
            }
            let ljj = d.sqrt();
            a[j * n + j] = ljj;
            for i in j + 1..j1 {
                let mut s = a[i * n + j];
                for p in j0..j {
                    s -= a[i * n + p] * a[j * n + p];
                }
                a[i * n + j] = s / ljj;
            }
        }
        // Panel below the diagonal block.
        for i in j1..n {
            for j in j0..j1 {
                let mut s = a[i * n + j];
                for p in j0..j {
                    s -= a[i * n + p] * a[j * n + p];
                }
                a[i * n + j] = s / a[j * n + j];
            }
        }
        // Trailing update of the lower triangle, one block row at a time.
        let k = j1 - j0;
        let mut r0 = j1;
        while r0 < n {
            let r1 = (r0 + CHOLESKY_BLOCK).min(n);
            let rows = r1 - r0;
            let cols = r1 - j1;
            // SAFETY: reads touch columns [j0, j1), writes touch columns [j1, r1);
            // the regions are disjoint and all offsets lie inside `a` (n*n).
            unsafe {
                let base = a.as_mut_ptr();
                matrixmultiply::dgemm(
                    rows,
                    k,
                    cols,
                    -1.0,
                    base.add(r0 * n + j0),
                    n as isize,
                    1,
                    base.add(j1 * n + j0),
                    1,
                    n as isize,
                    1.0,
                    base.add(r0 * n + j1),
                    n as isize,
                    1,
                );
            }
            r0 = r1;
        }
        j0 = j1;
    }
    Ok(())
}

/// Solves `A X = B` for symmetric positive definite `A` by Cholesky factorization.
pub fn solve_spd(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || a.rows() != a.cols() || b.ndim() != 2 || b.rows() != a.rows() {
        return Err(Error::dim("solve_spd", a.shape(), b.shape()));
    }
    check_symmetric(a)?;
    let n = a.rows();
    let c = b.cols();
    let mut l = a.data().to_vec();
    cholesky_in_place(&mut l, n)?;

    let mut x = b.data().to_vec();
    // Forward substitution L Y = B.
    for i in 0..n {
        for p in 0..i {
            let lip = l[i * n + p];
            if lip != 0.0 {
                for q in 0..c {
                    x[i * c + q] -= lip * x[p * c + q];
                }
            }
        }
        let d = l[i * n + i];
        for q in 0..c {
            x[i * c + q] /= d;
        }
    }
    // Back substitution L^T X = Y.
    for i in (0..n).rev() {
        let d = l[i * n + i];
        for q in 0..c {
            x[i * c + q] /= d;
        }
        for p in 0..i {
            let lip = l[i * n + p];
            if lip != 0.0 {
                for q in 0..c {
                    x[p * c + q] -= lip * x[i * c + q];
                }
            }
        }
    }
    Tensor::new(&[n, c], x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::gauss_jordan_solve;
    use crate::rng::Rng;

    fn random_spd(rng: &mut Rng, n: usize) -> Tensor {
        let a = rng.normal(&[n, n]);
        let mut g = a.transpose().unwrap().matmul(&a).unwrap();
        for i in 0..n {
            let v = g.at(i, i) + 1.0;
            g.set(i, i, v);
        }
        g
    }

    #[test]
    fn identity_returns_rhs() {
        let b = Rng::new(1).normal(&[4, 3]);
        let x = solve_spd(&Tensor::eye(4), &b).unwrap();
        assert!(x.max_abs_diff(&b) <= 1e-15);
    }

    #[test]
    fn diagonal_case() {
        let a = Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, 5.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0], vec![10.0]]).unwrap();
        let x = solve_spd(&a, &b).unwrap();
        assert!((x.at(0, 0) - 1.0).abs() < 1e-15);
        assert!((x.at(1, 0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn matches_gauss_jordan() {
        let mut rng = Rng::new(6);
        let a = random_spd(&mut rng, 6);
        let b = rng.normal(&[6, 2]);
        let x = solve_spd(&a, &b).unwrap();
        let oracle = gauss_jordan_solve(&a, &b).unwrap();
        assert!(x.max_abs_diff(&oracle) <= 1e-9);
    }

    #[test]
    fn blocked_path_residual() {
        // Larger than one block so the GEMM trailing update runs.
        let mut rng = Rng::new(7);
        let n = 150;
        let a = random_spd(&mut rng, n);
        let b = rng.normal(&[n, 3]);
        let x = solve_spd(&a, &b).unwrap();
        let r = a.matmul(&x).unwrap().sub(&b).unwrap();
        assert!(r.max_abs() <= 1e-8 * b.max_abs(), "residual {}", r.max_abs());
        let oracle = gauss_jordan_solve(&a, &b).unwrap();
        assert!(x.max_abs_diff(&oracle) <= 1e-8);
    }

    #[test]
    fn non_spd_reports_pivot() {
        let a = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 2.0, 0.0],
            vec![0.0, 0.0, -1.0],
        ])
        .unwrap();
        match solve_spd(&a, &Tensor::zeros(&[3, 1])) {
            Err(Error::Factorization { pivot, .. }) => assert_eq!(pivot, 2),
            other => panic!("expected factorization error, got {other:?}"),
        }
    }

    #[test]
    fn asymmetric_rejected() {
        let a = Tensor::from_rows(&[vec![2.0, 1.0], vec![0.0, 2.0]]).unwrap();
        assert!(matches!(
            solve_spd(&a, &Tensor::zeros(&[2, 1])),
            Err(Error::NotSymmetric { .. })
        ));
    }

    #[test]
    fn gemm_transposed_views() {
        let mut rng = Rng::new(4);
        let a = rng.normal(&[5, 3]);
        let b = rng.normal(&[5, 4]);
        let mut c = vec![0.0; 12];
        gemm(
            1.0,
            View::row_major(a.data(), 5, 3).t(),
            View::row_major(b.data(), 5, 4),
            0.0,
            &mut c,
        );
        let expected = a.transpose().unwrap().matmul(&b).unwrap();
        let got = Tensor::new(&[3, 4], c).unwrap();
        assert!(got.max_abs_diff(&expected) <= 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn solve_then_multiply_back(seed in 0u64..500, n in 1usize..12) {
            let mut rng = Rng::new(seed);
            let a = random_spd(&mut rng, n);
            let b = rng.normal(&[n, 2]);
            let x = solve_spd(&a, &b).unwrap();
            let r = a.matmul(&x).unwrap().sub(&b).unwrap();
            proptest::prop_assert!(r.max_abs() <= 1e-8);
        }
    }
}
