//! Normalization, softmax, error maps and resizing.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Stabilizer used by every layer norm in the model.
pub const LAYER_NORM_EPS: f64 = 1e-6;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Normalizes each row of the trailing axis to zero mean and unit
/// population variance: `(x - mean) / sqrt(var + eps)`.
pub fn layer_norm(t: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(layer_norm_with_stats(t, eps)?.0)
}

/// Layer norm that also returns the per-row `1/sqrt(var + eps)`.
pub fn layer_norm_with_stats(t: &Tensor, eps: f64) -> Result<(Tensor, Vec<f64>)> {
    let d = t.last_dim();
    if d == 0 || t.ndim() == 0 {
        return Err(invalid("layer_norm", format!("feature axis must be non-empty, shape {:?}", t.shape())));
    }
    let mut out = t.clone();
    let mut inv_std = Vec::with_capacity(t.len() / d);
    for row in out.data_mut().chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / libm::sqrt(var + eps);
        for v in row.iter_mut() {
            *v = (*v - mean) * r;
        }
        inv_std.push(r);
    }
    Ok((out, inv_std))
}

/// Max-shifted softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Empty("softmax"));
    }
    if let Some(index) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite { op: "softmax", index });
    }
    Ok(softmax_unchecked(v))
}

pub(crate) fn softmax_unchecked(v: &[f64]) -> Vec<f64> {
    let max = v.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let exps: Vec<f64> = v.iter().map(|&x| libm::exp(x - max)).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Elementwise `(pred - target)^2`.
pub fn sq_err_map(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    pred.ensure_same_shape(target, "sq_err_map")?;
    pred.zip_map(target, |p, t| (p - t) * (p - t))
}

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(GELU_K * (x + GELU_C * x * x * x)))
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_K * (x + GELU_C * x * x * x);
    let th = libm::tanh(inner);
    let sech2 = 1.0 - th * th;
    0.5 * (1.0 + th) + 0.5 * x * sech2 * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// Source coordinate of output index `i` under align-corners sampling.
/// A single output sample reads the centre of the input axis.
fn source_coord(i: usize, n_in: usize, n_out: usize) -> f64 {
    if n_out == 1 {
        (n_in - 1) as f64 / 2.0
    } else {
        i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
    }
}

/// Bilinear resize of an `H x W` map with align-corners semantics.
/// Output values are clamped to the input's range.
pub fn resize_bilinear(m: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [h, w] = m.dims2("resize_bilinear")?;
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(invalid(
            "resize_bilinear",
            format!("extents must be >= 1: input {h}x{w}, output {out_h}x{out_w}"),
        ));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(m.clone());
    }
    let data = m.data();
    let lo = data.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = data.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut out = Tensor::zeros([out_h, out_w]);
    for i in 0..out_h {
        let y = source_coord(i, h, out_h);
        let y0 = (libm::floor(y) as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fy = y - y0 as f64;
        for j in 0..out_w {
            let x = source_coord(j, w, out_w);
            let x0 = (libm::floor(x) as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fx = x - x0 as f64;
            let top = data[y0 * w + x0] * (1.0 - fx) + data[y0 * w + x1] * fx;
            let bottom = data[y1 * w + x0] * (1.0 - fx) + data[y1 * w + x1] * fx;
            let v = top * (1.0 - fy) + bottom * fy;
            out.data_mut()[i * out_w + j] = v.clamp(lo, hi);
        }
    }
    Ok(out)
}
