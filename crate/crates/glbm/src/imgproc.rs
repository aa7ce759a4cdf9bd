//! Shared raster utilities: color conversion, resampling, filtering,
//! thresholding, and PNG I/O between `image` buffers and `ndarray` tensors.
//!
//! Color images are `Array3<f64>` in `[H, W, C]` layout with intensities in
//! `[0, 1]`; grayscale images are `Array2<f64>`.

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};
use ndarray::{Array2, Array3};

use crate::error::{GlbmError, Result};

/// ITU-R BT.601 luma weights for R, G, B.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Convert an `[H, W, 3]` color image to luma, same intensity scale as input.
pub fn to_gray(img: &Array3<f64>) -> Array2<f64> {
    let (h, w, _) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        LUMA_WEIGHTS[0] * img[[y, x, 0]] + LUMA_WEIGHTS[1] * img[[y, x, 1]] + LUMA_WEIGHTS[2] * img[[y, x, 2]]
    })
}

/// BT.601 YUV conversion on `[0, 255]`-scaled values. Chroma is offset by 128.
pub fn to_yuv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let y = 0.299 * r + 0.587 * g + 0.114 * b;
    let u = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0;
    let v = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0;
    (y, u, v)
}

/// Sample a grayscale image at a fractional position with clamped borders.
pub fn sample_bilinear(img: &Array2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = img.dim();
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    let top = img[[y0, x0]] * (1.0 - fx) + img[[y0, x1]] * fx;
    let bot = img[[y1, x0]] * (1.0 - fx) + img[[y1, x1]] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Bilinear resize of a color image to `(out_h, out_w)`, pixel-center aligned.
pub fn resize_bilinear(img: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (h, w, c) = img.dim();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = Array3::zeros((out_h, out_w, c));
    for oy in 0..out_h {
        let y = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = y - y0 as f64;
        for ox in 0..out_w {
            let x = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = x - x0 as f64;
            for ch in 0..c {
                let top = img[[y0, x0, ch]] * (1.0 - fx) + img[[y0, x1, ch]] * fx;
                let bot = img[[y1, x0, ch]] * (1.0 - fx) + img[[y1, x1, ch]] * fx;
                out[[oy, ox, ch]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(img: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0;
    for i in -radius..=radius {
        let v = (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for v in kernel.iter_mut() {
        *v /= sum;
    }

    let (h, w) = img.dim();
    let mut tmp = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let xi = (x as i64 + ki as i64 - radius).clamp(0, w as i64 - 1) as usize;
                acc += img[[y, xi]] * kv;
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let yi = (y as i64 + ki as i64 - radius).clamp(0, h as i64 - 1) as usize;
                acc += tmp[[yi, x]] * kv;
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Halve both dimensions by sampling every other pixel of a pre-blurred image.
pub fn downsample_2x(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let nh = (h + 1) / 2;
    let nw = (w + 1) / 2;
    Array2::from_shape_fn((nh, nw), |(y, x)| img[[y * 2, x * 2]])
}

/// 3x3 median filter on a binary (0/1) mask.
pub fn median_filter_3x3(mask: &Array2<u8>) -> Array2<u8> {
    let (h, w) = mask.dim();
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut ones = 0u32;
            let mut total = 0u32;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let yy = y as i64 + dy;
                    let xx = x as i64 + dx;
                    if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                        total += 1;
                        ones += mask[[yy as usize, xx as usize]] as u32;
                    }
                }
            }
            out[[y, x]] = (2 * ones > total) as u8;
        }
    }
    out
}

/// Otsu's threshold over a 256-bin histogram of values in `[0, 1]`.
///
/// Returns the threshold in `[0, 1]` units; pixels strictly above it are
/// classified as foreground by the callers.
pub fn otsu_threshold(values: impl Iterator<Item = f64>) -> f64 {
    let mut hist = [0u64; 256];
    let mut count = 0u64;
    for v in values {
        let bin = (v.clamp(0.0, 1.0) * 255.0).round() as usize;
        hist[bin] += 1;
        count += 1;
    }
    if count == 0 {
        return 0.0;
    }
    let total_sum: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let mut best_t = 0usize;
    let mut best_var = -1.0;
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    for t in 0..256 {
        w0 += hist[t] as f64;
        if w0 == 0.0 {
            continue;
        }
        let w1 = count as f64 - w0;
        if w1 == 0.0 {
            break;
        }
        sum0 += t as f64 * hist[t] as f64;
        let mu0 = sum0 / w0;
        let mu1 = (total_sum - sum0) / w1;
        let between = w0 * w1 * (mu0 - mu1).powi(2);
        if between > best_var {
            best_var = between;
            best_t = t;
        }
    }
    best_t as f64 / 255.0
}

/// Decode an image file into an `[H, W, 3]` tensor scaled to `[0, 1]`.
/// Grayscale sources are replicated across the three channels.
pub fn load_image(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path).map_err(|e| GlbmError::image(path, e))?;
    Ok(dynamic_to_array(&img))
}

pub fn dynamic_to_array(img: &DynamicImage) -> Array3<f64> {
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let mut out = Array3::zeros((h as usize, w as usize, 3));
    for (x, y, p) in rgb.enumerate_pixels() {
        for ch in 0..3 {
            out[[y as usize, x as usize, ch]] = p.0[ch] as f64 / 255.0;
        }
    }
    out
}

/// Write an `[H, W, 3]` tensor in `[0, 1]` as an 8-bit PNG.
pub fn save_image(img: &Array3<f64>, path: &Path) -> Result<()> {
    let (h, w, _) = img.dim();
    let mut rgb = RgbImage::new(w as u32, h as u32);
    for (x, y, p) in rgb.enumerate_pixels_mut() {
        for ch in 0..3 {
            p.0[ch] = (img[[y as usize, x as usize, ch]].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    rgb.save(path).map_err(|e| GlbmError::image(path, e))
}

/// Write a binary (0/1) mask as an 8-bit PNG with values 0/255.
pub fn save_mask(mask: &ndarray::ArrayView2<u8>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let mut gray = GrayImage::new(w as u32, h as u32);
    for (x, y, p) in gray.enumerate_pixels_mut() {
        p.0[0] = if mask[[y as usize, x as usize]] > 0 { 255 } else { 0 };
    }
    gray.save(path).map_err(|e| GlbmError::image(path, e))
}

/// Read a 0/255 PNG back into a binary (0/1) mask. Any nonzero pixel is 1.
pub fn load_mask(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path).map_err(|e| GlbmError::image(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        (img.get_pixel(x as u32, y as u32).0[0] > 127) as u8
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn gray_uses_luma_weights() {
        let mut img = Array3::zeros((1, 1, 3));
        img[[0, 0, 0]] = 1.0;
        let g = to_gray(&img);
        assert!((g[[0, 0]] - 0.299).abs() < 1e-12);
    }

    #[test]
    fn resize_preserves_constant_images() {
        let img = Array3::from_elem((8, 8, 3), 0.37);
        let out = resize_bilinear(&img, 5, 11);
        for v in out.iter() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn otsu_splits_bimodal_values() {
        let vals: Vec<f64> = (0..100)
            .map(|i| if i < 50 { 0.1 } else { 0.8 })
            .collect();
        let t = otsu_threshold(vals.into_iter());
        assert!(t > 0.1 && t < 0.8, "t = {t}");
    }

    #[test]
    fn otsu_on_constant_values_is_degenerate() {
        let t = otsu_threshold(std::iter::repeat(0.0).take(64));
        assert_eq!(t, 0.0);
    }

    #[test]
    fn median_filter_removes_isolated_pixel() {
        let mut m = Array2::<u8>::zeros((5, 5));
        m[[2, 2]] = 1;
        let f = median_filter_3x3(&m);
        assert_eq!(f.sum(), 0);
    }

    #[test]
    fn yuv_chroma_of_gray_is_neutral() {
        let (_, u, v) = to_yuv(128.0, 128.0, 128.0);
        assert!((u - 128.0).abs() < 1e-9);
        assert!((v - 128.0).abs() < 1e-9);
    }
}
