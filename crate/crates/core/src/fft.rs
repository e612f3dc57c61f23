//! 2D discrete Fourier transform over the trailing two axes.
//!
//! Forward transforms are unnormalized; the inverse carries the `1/(H*W)`
//! factor. Power-of-two extents use an iterative radix-2 Cooley-Tukey
//! kernel, everything else falls back to a direct O(N^2) DFT.

use alloc::vec;
use core::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{ComplexTensor, Tensor};

/// Relative bound on the imaginary residual accepted by [`ifft2`].
pub const IMAG_RESIDUAL_TOL: f64 = 1e-8;

fn bit_reverse_permute(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
}

fn radix2(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = re.len();
    bit_reverse_permute(re, im);
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        for k in 0..half {
            let angle = sign * 2.0 * PI * k as f64 / len as f64;
            let (wr, wi) = (libm::cos(angle), libm::sin(angle));
            let mut start = 0;
            while start < n {
                let (a, b) = (start + k, start + k + half);
                let tr = re[b] * wr - im[b] * wi;
                let ti = re[b] * wi + im[b] * wr;
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

fn naive(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = re.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    let (mut out_re, mut out_im) = (vec![0.0; n], vec![0.0; n]);
    for k in 0..n {
        let (mut sr, mut si) = (0.0, 0.0);
        for t in 0..n {
            // Reduce k*t mod n before scaling so large products keep precision.
            let angle = sign * 2.0 * PI * ((k * t) % n) as f64 / n as f64;
            let (c, s) = (libm::cos(angle), libm::sin(angle));
            sr += re[t] * c - im[t] * s;
            si += re[t] * s + im[t] * c;
        }
        out_re[k] = sr;
        out_im[k] = si;
    }
    re.copy_from_slice(&out_re);
    im.copy_from_slice(&out_im);
}

fn fft1d(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = re.len();
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        radix2(re, im, inverse);
    } else {
        naive(re, im, inverse);
    }
}

/// Unscaled 2D transform of every `h x w` plane in place.
fn transform_planes(re: &mut [f64], im: &mut [f64], h: usize, w: usize, inverse: bool) {
    let (mut col_re, mut col_im) = (vec![0.0; h], vec![0.0; h]);
    for (pr, pi) in re.chunks_mut(h * w).zip(im.chunks_mut(h * w)) {
        for (rr, ri) in pr.chunks_mut(w).zip(pi.chunks_mut(w)) {
            fft1d(rr, ri, inverse);
        }
        for c in 0..w {
            for r in 0..h {
                col_re[r] = pr[r * w + c];
                col_im[r] = pi[r * w + c];
            }
            fft1d(&mut col_re, &mut col_im, inverse);
            for r in 0..h {
                pr[r * w + c] = col_re[r];
                pi[r * w + c] = col_im[r];
            }
        }
    }
}

/// Forward 2D DFT of each trailing `H x W` plane.
pub fn fft2(t: &Tensor) -> Result<ComplexTensor> {
    let (_, h, w) = t.planes("fft2")?;
    t.ensure_finite("fft2")?;
    let mut re = t.data().to_vec();
    let mut im = vec![0.0; re.len()];
    transform_planes(&mut re, &mut im, h, w, false);
    ComplexTensor::new(t.shape().to_vec(), re, im)
}

/// Inverse 2D DFT keeping the complex result.
pub fn ifft2_complex(c: &ComplexTensor) -> Result<ComplexTensor> {
    let shape = c.shape().to_vec();
    let probe = Tensor::zeros(shape.clone());
    let (_, h, w) = probe.planes("ifft2")?;
    let mut re = c.re().to_vec();
    let mut im = c.im().to_vec();
    transform_planes(&mut re, &mut im, h, w, true);
    let norm = 1.0 / (h * w) as f64;
    re.iter_mut().chain(im.iter_mut()).for_each(|v| *v *= norm);
    ComplexTensor::new(shape, re, im)
}

/// Inverse 2D DFT returning the real part.
///
/// Fails with [`Error::NonHermitian`] when `max|im| >= 1e-8 * max(1, max|re|)`,
/// which means the spectrum did not come from a real signal.
pub fn ifft2(c: &ComplexTensor) -> Result<Tensor> {
    let out = ifft2_complex(c)?;
    let max_re = out.re().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let max_im = out.im().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let bound = IMAG_RESIDUAL_TOL * max_re.max(1.0);
    if !(max_im < bound) {
        return Err(Error::NonHermitian { residual: max_im, bound });
    }
    let (shape, re, _) = out.into_parts();
    Tensor::new(shape, re)
}

/// Signed frequency of bin `k` on an axis of length `n`, in `[-n/2, n/2)`.
pub fn signed_frequency(k: usize, n: usize) -> f64 {
    if k < n.div_ceil(2) {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Index of the negated frequency `(-k) mod n`.
pub fn negate_bin(k: usize, n: usize) -> usize {
    (n - k) % n
}
