//! 2-D DFTs and the global-filter frequency mixer.
//!
//! Conventions: the forward transform is unnormalized with kernel
//! `exp(-2 pi i (u y / H + v x / W))`; the inverse carries the `1 / (H W)` factor.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{ComplexTensor, Tensor};

fn require_pow2(op: &'static str, h: usize, w: usize) -> Result<()> {
    if !h.is_power_of_two() || !w.is_power_of_two() {
        return Err(Error::Config(format!(
            "{op}: extents {h}x{w} must be powers of two"
        )));
    }
    Ok(())
}

/// In-place iterative radix-2 FFT of one contiguous line. Unnormalized in both directions.
fn fft_line(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = re.len();
    debug_assert!(n.is_power_of_two());
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        for k in 0..half {
            let angle = sign * 2.0 * PI * k as f64 / len as f64;
            let (wi, wr) = angle.sin_cos();
            let mut start = 0;
            while start < n {
                let a = start + k;
                let b = a + half;
                let tr = wr * re[b] - wi * im[b];
                let ti = wr * im[b] + wi * re[b];
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                start += len;
            }
        }
        len <<= 1;
    }
}

/// Transforms one `h x w` plane in place (rows, then columns).
fn fft2_plane(re: &mut [f64], im: &mut [f64], h: usize, w: usize, inverse: bool) {
    for r in 0..h {
        fft_line(&mut re[r * w..(r + 1) * w], &mut im[r * w..(r + 1) * w], inverse);
    }
    let mut cr = vec![0.0; h];
    let mut ci = vec![0.0; h];
    for c in 0..w {
        for r in 0..h {
            cr[r] = re[r * w + c];
            ci[r] = im[r * w + c];
        }
        fft_line(&mut cr, &mut ci, inverse);
        for r in 0..h {
            re[r * w + c] = cr[r];
            im[r * w + c] = ci[r];
        }
    }
    if inverse {
        let s = 1.0 / (h * w) as f64;
        re.iter_mut().for_each(|v| *v *= s);
        im.iter_mut().for_each(|v| *v *= s);
    }
}

fn plane_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [h, w] => Ok((*h, *w)),
        _ => Err(Error::shape(op, format!("expected [H, W], got {shape:?}"))),
    }
}

pub fn fft2(x: &Tensor) -> Result<ComplexTensor> {
    let (h, w) = plane_dims("fft2", x.shape())?;
    require_pow2("fft2", h, w)?;
    let mut out = ComplexTensor::from_real(x);
    fft2_plane(&mut out.re, &mut out.im, h, w, false);
    Ok(out)
}

pub fn fft2_complex(x: &ComplexTensor) -> Result<ComplexTensor> {
    let (h, w) = plane_dims("fft2", x.shape())?;
    require_pow2("fft2", h, w)?;
    let mut out = x.clone();
    fft2_plane(&mut out.re, &mut out.im, h, w, false);
    Ok(out)
}

pub fn ifft2(x: &ComplexTensor) -> Result<ComplexTensor> {
    let (h, w) = plane_dims("ifft2", x.shape())?;
    require_pow2("ifft2", h, w)?;
    let mut out = x.clone();
    fft2_plane(&mut out.re, &mut out.im, h, w, true);
    Ok(out)
}

/// Direct double-sum 2-D DFT; any extents.
pub fn naive_dft2(x: &Tensor) -> ComplexTensor {
    let (h, w) = match x.shape() {
        [h, w] => (*h, *w),
        [n] => (1, *n),
        s => panic!("naive_dft2 expects a 2-D tensor, got {s:?}"),
    };
    let mut out = ComplexTensor::zeros(&[h, w]);
    for u in 0..h {
        for v in 0..w {
            let (mut sr, mut si) = (0.0, 0.0);
            for y in 0..h {
                for xx in 0..w {
                    let phase = -2.0
                        * PI
                        * (((u * y) % h) as f64 / h as f64 + ((v * xx) % w) as f64 / w as f64);
                    let val = x.data()[y * w + xx];
                    sr += val * phase.cos();
                    si += val * phase.sin();
                }
            }
            out.re[u * w + v] = sr;
            out.im[u * w + v] = si;
        }
    }
    out
}

/// Learnable frequency-domain filter stored as a half spectrum `[C, H, W/2 + 1]`.
///
/// The full spectrum is the Hermitian expansion of the stored half; on the
/// self-conjugate columns (`v = 0` and `v = W/2`) the effective value is
/// `(k[u, v] + conj(k[-u, v])) / 2`, so filtering a real map is always real.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalFilter {
    pub k: ComplexTensor,
    height: usize,
    width: usize,
}

impl GlobalFilter {
    pub fn half_width(width: usize) -> usize {
        width / 2 + 1
    }

    pub fn new(k: ComplexTensor, height: usize, width: usize) -> Result<Self> {
        require_pow2("GlobalFilter", height, width)?;
        let hw = Self::half_width(width);
        match k.shape() {
            [_, h, w] if *h == height && *w == hw => Ok(GlobalFilter { k, height, width }),
            s => Err(Error::dim("GlobalFilter", s, &[0, height, hw])),
        }
    }

    pub fn constant(channels: usize, height: usize, width: usize, re: f64, im: f64) -> Result<Self> {
        let n = channels * height * Self::half_width(width);
        let k = ComplexTensor::new(
            &[channels, height, Self::half_width(width)],
            vec![re; n],
            vec![im; n],
        )?;
        Self::new(k, height, width)
    }

    pub fn channels(&self) -> usize {
        self.k.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Effective full `H x W` spectrum of one channel.
    pub fn expand(&self, ch: usize) -> (Vec<f64>, Vec<f64>) {
        let (h, w) = (self.height, self.width);
        let hw = Self::half_width(w);
        let off = ch * h * hw;
        let kr = &self.k.re[off..off + h * hw];
        let ki = &self.k.im[off..off + h * hw];
        let mut re = vec![0.0; h * w];
        let mut im = vec![0.0; h * w];
        for u in 0..h {
            let nu = (h - u) % h;
            for v in 0..w {
                let (r, i) = if v < hw {
                    if v == 0 || 2 * v == w {
                        (
                            0.5 * (kr[u * hw + v] + kr[nu * hw + v]),
                            0.5 * (ki[u * hw + v] - ki[nu * hw + v]),
                        )
                    } else {
                        (kr[u * hw + v], ki[u * hw + v])
                    }
                } else {
                    (kr[nu * hw + (w - v)], -ki[nu * hw + (w - v)])
                };
                re[u * w + v] = r;
                im[u * w + v] = i;
            }
        }
        (re, im)
    }

    /// Spatial-domain kernel of one channel (real by construction).
    pub fn spatial_kernel(&self, ch: usize) -> Vec<f64> {
        let (mut re, mut im) = self.expand(ch);
        fft2_plane(&mut re, &mut im, self.height, self.width, true);
        re
    }
}

fn check_filter_input(op: &'static str, x: &Tensor, k: &GlobalFilter) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [c, h, w] if *c == k.channels() && *h == k.height && *w == k.width => Ok((*c, *h, *w)),
        s => Err(Error::dim(op, s, &[k.channels(), k.height, k.width])),
    }
}

fn imag_residue_ok(re: &[f64], im: &[f64]) -> bool {
    let scale = re.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    im.iter().all(|v| v.abs() <= 1e-10 * scale)
}

/// `x <- IFFT2(K * FFT2(x))` per channel; returns the real part.
pub fn apply_global_filter(x: &Tensor, k: &GlobalFilter) -> Result<Tensor> {
    let (c, h, w) = check_filter_input("apply_global_filter", x, k)?;
    let plane = h * w;
    let mut out = vec![0.0; c * plane];
    let mut re = vec![0.0; plane];
    let mut im = vec![0.0; plane];
    for ch in 0..c {
        re.copy_from_slice(&x.data()[ch * plane..(ch + 1) * plane]);
        im.iter_mut().for_each(|v| *v = 0.0);
        fft2_plane(&mut re, &mut im, h, w, false);
        let (kr, ki) = k.expand(ch);
        for p in 0..plane {
            let (a, b) = (re[p], im[p]);
            re[p] = a * kr[p] - b * ki[p];
            im[p] = a * ki[p] + b * kr[p];
        }
        fft2_plane(&mut re, &mut im, h, w, true);
        debug_assert!(imag_residue_ok(&re, &im), "global filter produced a complex output");
        out[ch * plane..(ch + 1) * plane].copy_from_slice(&re);
    }
    Tensor::new(&[c, h, w], out)
}

/// Exact adjoints of [`apply_global_filter`].
///
/// The filter gradient treats the real and imaginary parts of every stored
/// half-spectrum coefficient as independent real parameters.
pub fn global_filter_backward(
    x: &Tensor,
    k: &GlobalFilter,
    grad_out: &Tensor,
) -> Result<(Tensor, ComplexTensor)> {
    let (c, h, w) = check_filter_input("global_filter_backward", x, k)?;
    if grad_out.shape() != x.shape() {
        return Err(Error::dim("global_filter_backward", grad_out.shape(), x.shape()));
    }
    let plane = h * w;
    let hw = GlobalFilter::half_width(w);
    let inv_n = 1.0 / plane as f64;
    let mut grad_x = vec![0.0; c * plane];
    let mut grad_k = ComplexTensor::zeros(k.k.shape());

    let mut xr = vec![0.0; plane];
    let mut xi = vec![0.0; plane];
    let mut gr = vec![0.0; plane];
    let mut gi = vec![0.0; plane];
    let mut gam_r = vec![0.0; plane];
    let mut gam_i = vec![0.0; plane];
    for ch in 0..c {
        xr.copy_from_slice(&x.data()[ch * plane..(ch + 1) * plane]);
        xi.iter_mut().for_each(|v| *v = 0.0);
        fft2_plane(&mut xr, &mut xi, h, w, false);
        gr.copy_from_slice(&grad_out.data()[ch * plane..(ch + 1) * plane]);
        gi.iter_mut().for_each(|v| *v = 0.0);
        fft2_plane(&mut gr, &mut gi, h, w, false);

        // Gamma = conj(X) * G / N, the gradient w.r.t. the effective full spectrum.
        for p in 0..plane {
            gam_r[p] = (xr[p] * gr[p] + xi[p] * gi[p]) * inv_n;
            gam_i[p] = (xr[p] * gi[p] - xi[p] * gr[p]) * inv_n;
        }
        let off = ch * h * hw;
        for u in 0..h {
            let nu = (h - u) % h;
            for v in 0..hw {
                let idx = off + u * hw + v;
                if v == 0 || 2 * v == w {
                    grad_k.re[idx] = 0.5 * (gam_r[u * w + v] + gam_r[nu * w + v]);
                    grad_k.im[idx] = 0.5 * (gam_i[u * w + v] - gam_i[nu * w + v]);
                } else {
                    grad_k.re[idx] = gam_r[u * w + v] + gam_r[nu * w + (w - v)];
                    grad_k.im[idx] = gam_i[u * w + v] - gam_i[nu * w + (w - v)];
                }
            }
        }

        // grad_x = Re IFFT2(conj(K) * G).
        let (kr, ki) = k.expand(ch);
        for p in 0..plane {
            let (a, b) = (gr[p], gi[p]);
            gr[p] = a * kr[p] + b * ki[p];
            gi[p] = b * kr[p] - a * ki[p];
        }
        fft2_plane(&mut gr, &mut gi, h, w, true);
        grad_x[ch * plane..(ch + 1) * plane].copy_from_slice(&gr);
    }
    Ok((Tensor::new(&[c, h, w], grad_x)?, grad_k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{circular_convolve2, max_relative_error, numeric_gradient};
    use crate::rng::Rng;

    fn random_filter(rng: &mut Rng, c: usize, h: usize, w: usize) -> GlobalFilter {
        let hw = GlobalFilter::half_width(w);
        let re = rng.normal(&[c, h, hw]).into_data();
        let im = rng.normal(&[c, h, hw]).into_data();
        GlobalFilter::new(ComplexTensor::new(&[c, h, hw], re, im).unwrap(), h, w).unwrap()
    }

    #[test]
    fn delta_gives_flat_spectrum() {
        let mut x = Tensor::zeros(&[4, 8]);
        x.data_mut()[0] = 1.0;
        let s = fft2(&x).unwrap();
        assert!(s.re.iter().all(|v| (v - 1.0).abs() < 1e-15));
        assert!(s.im.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn constant_image_dc_only() {
        let x = Tensor::full(&[8, 8], 2.5);
        let s = fft2(&x).unwrap();
        assert!((s.re[0] - 64.0 * 2.5).abs() < 1e-12);
        for p in 1..64 {
            assert!(s.re[p].hypot(s.im[p]) <= 1e-12);
        }
    }

    #[test]
    fn fft_matches_naive_up_to_32() {
        let mut rng = Rng::new(42);
        for &h in &[1usize, 2, 4, 8, 16, 32] {
            for &w in &[1usize, 2, 4, 8, 16, 32] {
                let x = rng.normal(&[h, w]);
                let fast = fft2(&x).unwrap();
                let slow = naive_dft2(&x);
                assert!(fast.max_abs_diff(&slow) <= 1e-10, "{h}x{w}");
            }
        }
    }

    #[test]
    fn round_trip_16() {
        let x = Rng::new(1).normal(&[16, 16]);
        let back = ifft2(&fft2(&x).unwrap()).unwrap();
        assert!(back.real().max_abs_diff(&x) <= 1e-10);
        assert!(back.imag().max_abs() <= 1e-10);
    }

    #[test]
    fn ones_spectrum_inverts_to_delta() {
        let s = ComplexTensor::new(&[4, 4], vec![1.0; 16], vec![0.0; 16]).unwrap();
        let x = ifft2(&s).unwrap();
        assert!((x.re[0] - 1.0).abs() < 1e-15);
        assert!(x.re[1..].iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn ifft_linearity() {
        let mut rng = Rng::new(2);
        let mk = |rng: &mut Rng| {
            ComplexTensor::new(&[8, 8], rng.normal(&[64]).into_data(), rng.normal(&[64]).into_data())
                .unwrap()
        };
        let (x, y) = (mk(&mut rng), mk(&mut rng));
        let (a, b) = (1.7, -0.3);
        let lhs = ifft2(&x.scale(a).add(&y.scale(b)).unwrap()).unwrap();
        let rhs = ifft2(&x).unwrap().scale(a).add(&ifft2(&y).unwrap().scale(b)).unwrap();
        assert!(lhs.max_abs_diff(&rhs) <= 1e-10);
    }

    #[test]
    fn naive_single_element() {
        let s = naive_dft2(&Tensor::new(&[1, 1], vec![3.5]).unwrap());
        assert_eq!(s.re, vec![3.5]);
        assert_eq!(s.im, vec![0.0]);
    }

    #[test]
    fn naive_handles_odd_sizes_and_parseval() {
        let x = Rng::new(9).normal(&[3, 5]);
        let s = naive_dft2(&x);
        let energy: f64 = x.data().iter().map(|v| v * v).sum();
        let spec: f64 = s.re.iter().zip(&s.im).map(|(r, i)| r * r + i * i).sum::<f64>() / 15.0;
        assert!((energy - spec).abs() / energy <= 1e-12);
    }

    #[test]
    fn non_power_of_two_rejected() {
        assert!(matches!(fft2(&Tensor::zeros(&[6, 8])), Err(Error::Config(_))));
        assert!(ifft2(&ComplexTensor::zeros(&[8, 3])).is_err());
    }

    #[test]
    fn unit_filter_is_identity() {
        let x = Rng::new(3).normal(&[2, 8, 8]);
        let k = GlobalFilter::constant(2, 8, 8, 1.0, 0.0).unwrap();
        assert!(apply_global_filter(&x, &k).unwrap().max_abs_diff(&x) <= 1e-10);
    }

    #[test]
    fn zero_filter_annihilates() {
        let x = Rng::new(3).normal(&[2, 8, 8]);
        let k = GlobalFilter::constant(2, 8, 8, 0.0, 0.0).unwrap();
        assert!(apply_global_filter(&x, &k).unwrap().max_abs() == 0.0);
    }

    #[test]
    fn filter_equals_circular_convolution() {
        let mut rng = Rng::new(5);
        let k = random_filter(&mut rng, 2, 8, 8);
        let x = rng.normal(&[2, 8, 8]);
        let y = apply_global_filter(&x, &k).unwrap();
        for ch in 0..2 {
            let kernel = k.spatial_kernel(ch);
            let expected = circular_convolve2(&x.data()[ch * 64..(ch + 1) * 64], &kernel, 8, 8);
            for p in 0..64 {
                assert!((y.data()[ch * 64 + p] - expected[p]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn expanded_spectrum_is_hermitian() {
        let k = random_filter(&mut Rng::new(12), 1, 8, 8);
        let (re, im) = k.expand(0);
        for u in 0..8 {
            for v in 0..8 {
                let (nu, nv) = ((8 - u) % 8, (8 - v) % 8);
                assert!((re[u * 8 + v] - re[nu * 8 + nv]).abs() < 1e-15);
                assert!((im[u * 8 + v] + im[nu * 8 + nv]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn filter_is_linear() {
        let mut rng = Rng::new(6);
        let k = random_filter(&mut rng, 3, 4, 8);
        let x1 = rng.normal(&[3, 4, 8]);
        let x2 = rng.normal(&[3, 4, 8]);
        let mix = x1.scale(2.0).add(&x2.scale(-0.5)).unwrap();
        let lhs = apply_global_filter(&mix, &k).unwrap();
        let rhs = apply_global_filter(&x1, &k)
            .unwrap()
            .scale(2.0)
            .add(&apply_global_filter(&x2, &k).unwrap().scale(-0.5))
            .unwrap();
        assert!(lhs.max_abs_diff(&rhs) <= 1e-10);
    }

    #[test]
    fn backward_zero_cotangent() {
        let mut rng = Rng::new(7);
        let k = random_filter(&mut rng, 1, 4, 4);
        let x = rng.normal(&[1, 4, 4]);
        let (gx, gk) = global_filter_backward(&x, &k, &Tensor::zeros(&[1, 4, 4])).unwrap();
        assert_eq!(gx.max_abs(), 0.0);
        assert!(gk.re.iter().chain(&gk.im).all(|v| *v == 0.0));
    }

    #[test]
    fn backward_unit_filter_passthrough() {
        let mut rng = Rng::new(8);
        let k = GlobalFilter::constant(2, 4, 4, 1.0, 0.0).unwrap();
        let x = rng.normal(&[2, 4, 4]);
        let g = rng.normal(&[2, 4, 4]);
        let (gx, _) = global_filter_backward(&x, &k, &g).unwrap();
        assert!(gx.max_abs_diff(&g) <= 1e-10);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(10);
        let k = random_filter(&mut rng, 2, 4, 4);
        let x = rng.normal(&[2, 4, 4]);
        let g = rng.normal(&[2, 4, 4]);
        let loss = |x: &Tensor, k: &GlobalFilter| -> f64 {
            let y = apply_global_filter(x, k).unwrap();
            y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };
        let (gx, gk) = global_filter_backward(&x, &k, &g).unwrap();

        let num_x = numeric_gradient(&x, 1e-5, |xp| loss(xp, &k));
        assert!(max_relative_error(&gx, &num_x, 1e-8) <= 1e-6);

        let shape = k.k.shape().to_vec();
        let kre = Tensor::new(&shape, k.k.re.clone()).unwrap();
        let num_re = numeric_gradient(&kre, 1e-5, |p| {
            let kk = GlobalFilter::new(
                ComplexTensor::new(&shape, p.data().to_vec(), k.k.im.clone()).unwrap(),
                4,
                4,
            )
            .unwrap();
            loss(&x, &kk)
        });
        let kim = Tensor::new(&shape, k.k.im.clone()).unwrap();
        let num_im = numeric_gradient(&kim, 1e-5, |p| {
            let kk = GlobalFilter::new(
                ComplexTensor::new(&shape, k.k.re.clone(), p.data().to_vec()).unwrap(),
                4,
                4,
            )
            .unwrap();
            loss(&x, &kk)
        });
        let an_re = Tensor::new(&shape, gk.re.clone()).unwrap();
        let an_im = Tensor::new(&shape, gk.im.clone()).unwrap();
        assert!(max_relative_error(&an_re, &num_re, 1e-8) <= 1e-6);
        assert!(max_relative_error(&an_im, &num_im, 1e-8) <= 1e-6);
    }

    proptest::proptest! {
        #[test]
        fn parseval(seed in 0u64..1000, hp in 0u32..6, wp in 0u32..6) {
            let (h, w) = (1usize << hp, 1usize << wp);
            let x = Rng::new(seed).normal(&[h, w]);
            let s = fft2(&x).unwrap();
            let energy: f64 = x.data().iter().map(|v| v * v).sum();
            let spec: f64 = s.re.iter().zip(&s.im).map(|(r, i)| r * r + i * i).sum::<f64>()
                / (h * w) as f64;
            proptest::prop_assert!((energy - spec).abs() <= 1e-12 * energy);
        }
    }
}
