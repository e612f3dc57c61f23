//! 8-bit PNG rasters for frames, references and masks.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use mofu_core::conditioning::ReferenceImage;
use mofu_core::Tensor;

use crate::error::{CliError, CliResult};

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[3, H, W]` tensor in `[0, 1]`.
pub fn write_rgb(path: &Path, t: &Tensor) -> CliResult<()> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(CliError::Failed(format!("expected a [3, H, W] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([0, 1, 2].map(|c| to_u8(t.data()[c * h * w + i])))
    });
    img.save(path).map_err(|e| CliError::io(path, e))
}

/// Writes an `[H, W]` mask; non-zero entries become white.
pub fn write_mask(path: &Path, m: &Tensor) -> CliResult<()> {
    let [h, w] = m.dims2("write_mask").map_err(|e| CliError::Failed(e.to_string()))?;
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if m.data()[y as usize * w + x as usize] != 0.0 { 255 } else { 0 }])
    });
    img.save(path).map_err(|e| CliError::io(path, e))
}

pub fn read_rgb(path: &Path) -> CliResult<Tensor> {
    let img = image::open(path).map_err(|e| CliError::io(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + i] = px.0[c] as f64 / 255.0;
        }
    }
    Tensor::new([3, h, w], data).map_err(|e| CliError::io(path, e))
}

/// Reads a mask, thresholding luma at one half.
pub fn read_mask(path: &Path) -> CliResult<Tensor> {
    let img = image::open(path).map_err(|e| CliError::io(path, e))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| if p.0[0] >= 128 { 1.0 } else { 0.0 }).collect();
    Tensor::new([h, w], data).map_err(|e| CliError::io(path, e))
}

pub fn read_reference(image: &Path, mask: &Path) -> CliResult<ReferenceImage> {
    let pixels = read_rgb(image)?;
    let m = read_mask(mask)?;
    ReferenceImage::new(pixels, m).map_err(|e| CliError::io(image, e))
}

/// Frame `t` of a `[4, T, H, W]` latent as RGB, inverting `2c - 1`.
pub fn latent_frame_rgb(video: &Tensor, t: usize) -> Tensor {
    let s = video.shape();
    let (frames, h, w) = (s[1], s[2], s[3]);
    Tensor::from_fn([3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        (video.data()[(c * frames + t) * h * w + p] + 1.0) / 2.0
    })
}

/// Frame `t` of a `[T, H, W]` mask stack.
pub fn mask_frame(masks: &Tensor, t: usize) -> Tensor {
    let s = masks.shape();
    let hw = s[1] * s[2];
    Tensor::new([s[1], s[2]], masks.data()[t * hw..(t + 1) * hw].to_vec()).expect("frame slice")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_bit_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let t = Tensor::from_fn([3, 2, 5], |i| (i * 17 % 256) as f64 / 255.0);
        write_rgb(&p, &t).unwrap();
        assert!(read_rgb(&p).unwrap().bitwise_eq(&t));
        let m = Tensor::from_fn([2, 5], |i| (i % 3 == 0) as u8 as f64);
        write_mask(&dir.path().join("m.png"), &m).unwrap();
        assert!(read_mask(&dir.path().join("m.png")).unwrap().bitwise_eq(&m));
    }

    #[test]
    fn latent_colors_invert() {
        let video = Tensor::from_fn([4, 2, 1, 1], |i| [0.5, -0.5, 1.0, -1.0, 0.0, 0.0, 1.0, 1.0][i]);
        let f1 = latent_frame_rgb(&video, 1);
        assert_eq!(f1.data(), &[0.25, 0.0, 0.5]);
    }
}
