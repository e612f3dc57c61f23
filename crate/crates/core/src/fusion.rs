//! Fourier fusion of reference feature maps.
//!
//! Each `d x H x W` feature map is transformed per channel, split into high
//! and low frequency bands by a radial binary mask, summed band-wise across
//! references and transformed back. Summation runs in a canonical order
//! derived from the inputs' contents, so any permutation of the inputs
//! produces bit-identical output.

use alloc::format;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{invalid, shape_err, Error, Result};
use crate::fft::{fft2, ifft2, signed_frequency};
use crate::rng::mix64;
use crate::tensor::{ComplexTensor, Tensor};

pub const DEFAULT_CUTOFF: f64 = 0.25;

/// Binary `H x W` spectral mask; `1` marks the high-frequency band.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyMask {
    grid: Tensor,
    cutoff_ratio: f64,
}

impl FrequencyMask {
    pub fn grid(&self) -> &Tensor {
        &self.grid
    }

    pub fn cutoff_ratio(&self) -> f64 {
        self.cutoff_ratio
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.grid.shape()[0], self.grid.shape()[1])
    }

    /// Per-bin gain `w_hf * M + w_lf * (1 - M)`.
    fn gains(&self, weights: BandWeights) -> Vec<f64> {
        self.grid
            .data()
            .iter()
            .map(|&m| weights.high * m + weights.low * (1.0 - m))
            .collect()
    }
}

/// Radial frequency mask: bins whose normalized radius exceeds
/// `cutoff_ratio` are high frequency.
///
/// The radius of bin `(u, v)` is `sqrt((u'/H)^2 + (v'/W)^2)` over signed
/// frequencies `u', v'` in `[-H/2, H/2)`, divided by the largest radius on
/// the grid. The DC bin is always low frequency.
pub fn radial_mask(h: usize, w: usize, cutoff_ratio: f64) -> Result<FrequencyMask> {
    if !(cutoff_ratio > 0.0 && cutoff_ratio < 1.0) {
        return Err(invalid("radial_mask", format!("cutoff ratio must lie in (0, 1), got {cutoff_ratio}")));
    }
    if h == 0 || w == 0 {
        return Err(invalid("radial_mask", format!("empty grid {h}x{w}")));
    }
    let radius = |u: usize, v: usize| {
        let fu = signed_frequency(u, h) / h as f64;
        let fv = signed_frequency(v, w) / w as f64;
        libm::sqrt(fu * fu + fv * fv)
    };
    let mut r_max: f64 = 0.0;
    for u in 0..h {
        for v in 0..w {
            r_max = r_max.max(radius(u, v));
        }
    }
    let mut grid = Tensor::zeros([h, w]);
    if r_max > 0.0 {
        for u in 0..h {
            for v in 0..w {
                if radius(u, v) / r_max > cutoff_ratio {
                    grid.data_mut()[u * w + v] = 1.0;
                }
            }
        }
    }
    Ok(FrequencyMask { grid, cutoff_ratio })
}

fn check_extent(shape: &[usize], mask: &FrequencyMask, op: &'static str) -> Result<()> {
    let n = shape.len();
    if n < 2 || (shape[n - 2], shape[n - 1]) != mask.extent() {
        return Err(shape_err(op, format!("spectrum {:?} vs mask {:?}", shape, mask.extent())));
    }
    Ok(())
}

/// Splits a spectrum into `(M * X, (1 - M) * X)`, broadcasting the mask over
/// leading axes. The two parts add back to `X` bit for bit.
pub fn decompose(spectrum: &ComplexTensor, mask: &FrequencyMask) -> Result<(ComplexTensor, ComplexTensor)> {
    check_extent(spectrum.shape(), mask, "decompose")?;
    let m = mask.grid.data();
    let plane = m.len();
    let band = |keep_high: bool| {
        let pick = |i: usize| {
            let mi = m[i % plane];
            if keep_high {
                mi
            } else {
                1.0 - mi
            }
        };
        let re = spectrum.re().iter().enumerate().map(|(i, &v)| pick(i) * v).collect();
        let im = spectrum.im().iter().enumerate().map(|(i, &v)| pick(i) * v).collect();
        ComplexTensor::new(spectrum.shape().to_vec(), re, im)
    };
    Ok((band(true)?, band(false)?))
}

/// Gains applied to the summed high and low bands before reconstruction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandWeights {
    pub high: f64,
    pub low: f64,
}

impl Default for BandWeights {
    fn default() -> Self {
        Self { high: 1.0, low: 1.0 }
    }
}

/// Order in which per-reference spectra are accumulated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Summation {
    /// Sorted by content, independent of input order.
    #[default]
    Canonical,
    /// The order the references were supplied in.
    AsGiven,
}

/// The fused, order-independent reference condition.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedCondition {
    pub feature: Tensor,
    pub n_refs: usize,
    pub cutoff_ratio: f64,
    pub band_weights: BandWeights,
}

fn content_hash(t: &Tensor) -> u64 {
    let mut h = mix64(t.ndim() as u64);
    for &d in t.shape() {
        h = mix64(h ^ d as u64);
    }
    for v in t.data() {
        h = mix64(h ^ v.to_bits());
    }
    h
}

fn content_cmp(a: &Tensor, b: &Tensor) -> Ordering {
    a.shape().cmp(b.shape()).then_with(|| {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| x.to_bits().cmp(&y.to_bits()))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Accumulation order for `features` under `summation`. Canonical order sorts
/// by content hash, then by raw contents, then by index; inputs that tie on
/// contents are interchangeable.
pub fn summation_order(features: &[&Tensor], summation: Summation) -> Vec<usize> {
    let mut order: Vec<usize> = (0..features.len()).collect();
    if summation == Summation::Canonical {
        let hashes: Vec<u64> = features.iter().map(|t| content_hash(t)).collect();
        order.sort_by(|&i, &j| {
            hashes[i]
                .cmp(&hashes[j])
                .then_with(|| content_cmp(features[i], features[j]))
                .then(i.cmp(&j))
        });
    }
    order
}

fn validate_features(features: &[&Tensor]) -> Result<()> {
    let first = features.first().ok_or(Error::Empty("fuse"))?;
    if first.ndim() != 3 {
        return Err(shape_err("fuse", format!("features must be d x H x W, got {:?}", first.shape())));
    }
    for f in features {
        if f.shape() != first.shape() {
            return Err(shape_err("fuse", format!("{:?} vs {:?}", f.shape(), first.shape())));
        }
        f.ensure_finite("fuse")?;
    }
    Ok(())
}

/// Fuses `features` (each `d x H x W`):
/// `IFFT(w_hf * sum_i M * FFT(F_i) + w_lf * sum_i (1 - M) * FFT(F_i))`.
pub fn fuse(
    features: &[&Tensor],
    cutoff_ratio: f64,
    band_weights: BandWeights,
    summation: Summation,
) -> Result<FusedCondition> {
    validate_features(features)?;
    let shape = features[0].shape().to_vec();
    let mask = radial_mask(shape[1], shape[2], cutoff_ratio)?;
    let mut high = ComplexTensor::zeros(shape.clone());
    let mut low = ComplexTensor::zeros(shape.clone());
    for i in summation_order(features, summation) {
        let (hf, lf) = decompose(&fft2(features[i])?, &mask)?;
        high = high.add(&hf)?;
        low = low.add(&lf)?;
    }
    let combined = high.scale(band_weights.high).add(&low.scale(band_weights.low))?;
    let feature = ifft2(&combined)?;
    Ok(FusedCondition { feature, n_refs: features.len(), cutoff_ratio, band_weights })
}

/// Applies the fused band gains to a single map: `IFFT(G * FFT(x))` with
/// `G = w_hf * M + w_lf * (1 - M)`.
///
/// `G` is real and symmetric under frequency negation, so this operator is
/// self-adjoint; it is also the derivative of [`fuse`] with respect to each
/// input, which is how the tape backpropagates through fusion.
pub fn band_filter(x: &Tensor, mask: &FrequencyMask, band_weights: BandWeights) -> Result<Tensor> {
    check_extent(x.shape(), mask, "band_filter")?;
    let gains = mask.gains(band_weights);
    let mut spec = fft2(x)?;
    let plane = gains.len();
    let (re, im) = spec.parts_mut();
    for (i, (r, m)) in re.iter_mut().zip(im.iter_mut()).enumerate() {
        *r *= gains[i % plane];
        *m *= gains[i % plane];
    }
    ifft2(&spec)
}
