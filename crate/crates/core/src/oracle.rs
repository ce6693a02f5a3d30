//! Reference implementations used to cross-check the fast paths.
//!
//! Everything here is written directly from the textbook definition and shares
//! no code with the kernels it checks. Used by the unit tests, the integration
//! suites and `dilhyfs selfcheck`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Dense Gauss-Jordan elimination with partial pivoting.
pub fn gauss_jordan_solve(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    let c = b.cols();
    if a.cols() != n || b.rows() != n {
        return Err(Error::dim("gauss_jordan_solve", a.shape(), b.shape()));
    }
    let w = n + c;
    let mut aug = vec![0.0; n * w];
    for i in 0..n {
        for j in 0..n {
            aug[i * w + j] = a.at(i, j);
        }
        for j in 0..c {
            aug[i * w + n + j] = b.at(i, j);
        }
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| aug[x * w + col].abs().total_cmp(&aug[y * w + col].abs()))
            .unwrap();
        if aug[pivot * w + col] == 0.0 {
            return Err(Error::Numeric("singular matrix".into()));
        }
        for j in 0..w {
            aug.swap(col * w + j, pivot * w + j);
        }
        let d = aug[col * w + col];
        for j in 0..w {
            aug[col * w + j] /= d;
        }
        for i in 0..n {
            if i != col {
                let f = aug[i * w + col];
                if f != 0.0 {
                    for j in 0..w {
                        aug[i * w + j] -= f * aug[col * w + j];
                    }
                }
            }
        }
    }
    let mut x = Tensor::zeros(&[n, c]);
    for i in 0..n {
        for j in 0..c {
            x.set(i, j, aug[i * w + n + j]);
        }
    }
    Ok(x)
}

/// Direct sliding-window 3x3 cross-correlation with zero padding 1.
pub fn conv3x3_sliding(x: &Tensor, w: &Tensor, bias: &Tensor, stride: usize) -> Tensor {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let cout = w.shape()[0];
    let ho = h.div_ceil(stride);
    let wo = wd.div_ceil(stride);
    let mut out = Tensor::zeros(&[cout, ho, wo]);
    for co in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = bias.data()[co];
                for ci in 0..cin {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * stride + ky) as isize - 1;
                            let ix = (ox * stride + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            let xv = x.data()[(ci * h + iy as usize) * wd + ix as usize];
                            let wv = w.data()[((co * cin + ci) * 3 + ky) * 3 + kx];
                            s += xv * wv;
                        }
                    }
                }
                out.data_mut()[(co * ho + oy) * wo + ox] = s;
            }
        }
    }
    out
}

/// Circular convolution `y[p] = sum_q x[q] k[(p - q) mod N]` on one 2-D plane.
pub fn circular_convolve2(x: &[f64], kernel: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut y = vec![0.0; h * w];
    for py in 0..h {
        for px in 0..w {
            let mut s = 0.0;
            for qy in 0..h {
                for qx in 0..w {
                    let ky = (py + h - qy) % h;
                    let kx = (px + w - qx) % w;
                    s += x[qy * w + qx] * kernel[ky * w + kx];
                }
            }
            y[py * w + px] = s;
        }
    }
    y
}

/// Central finite difference of a scalar function of one tensor.
pub fn numeric_gradient(x: &Tensor, eps: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    grad
}

/// Largest coordinate-wise relative error `|a - n| / max(|a|, |n|, floor)`.
///
/// `floor` keeps coordinates whose true gradient is ~0 from dominating.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_jordan_small() {
        let a = Tensor::from_rows(&[vec![0.0, 2.0], vec![1.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![4.0], vec![3.0]]).unwrap();
        let x = gauss_jordan_solve(&a, &b).unwrap();
        assert!((x.at(0, 0) - 1.0).abs() < 1e-15);
        assert!((x.at(1, 0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn circular_delta_kernel_is_identity() {
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let mut k = vec![0.0; 16];
        k[0] = 1.0;
        assert_eq!(circular_convolve2(&x, &k, 4, 4), x);
    }
}
