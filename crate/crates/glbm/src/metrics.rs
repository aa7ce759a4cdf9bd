//! Background-quality metrics (AGE, pEPs, pCEPS, PSNR, MS-SSIM, CQM) and
//! pixel-level background-subtraction scores.
//!
//! Gray conversion uses BT.601 luma; CQM evaluates per-band PSNRs in BT.601
//! YUV. PSNR uses peak 255 and is capped at 100 dB when the MSE vanishes,
//! so identical images produce a finite report. All image inputs are
//! `[H, W, 3]` tensors in `[0, 1]`.

use ndarray::{Array2, Array3};

use crate::error::{GlbmError, Result};
use crate::imgproc::{to_gray, to_yuv};

pub const PSNR_CAP_DB: f64 = 100.0;
/// CQM luma/chroma weights.
pub const CQM_LUMA_WEIGHT: f64 = 0.9449;
pub const CQM_CHROMA_WEIGHT: f64 = 0.0551;
/// Per-scale MS-SSIM exponents.
pub const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Background-quality metrics for one (ground truth, estimate) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub age: f64,
    pub peps: f64,
    pub pceps: f64,
    pub psnr: f64,
    pub msssim: f64,
    pub cqm: f64,
}

/// Pixel-aggregated precision/recall/F-measure over mask sequences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BsScore {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
}

fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// All six background metrics. `ep_threshold` is in gray levels (0..255);
/// `peak` is the PSNR peak, 255 by convention.
pub fn sbm_metrics_with_peak(
    gt: &Array3<f64>,
    est: &Array3<f64>,
    ep_threshold: f64,
    peak: f64,
) -> Result<MetricReport> {
    if gt.dim() != est.dim() {
        return Err(GlbmError::InvalidArgument(format!(
            "resolution mismatch: {:?} vs {:?}",
            gt.dim(),
            est.dim()
        )));
    }
    let gray_gt = to_gray(gt).mapv(|v| v * 255.0);
    let gray_est = to_gray(est).mapv(|v| v * 255.0);
    let (h, w) = gray_gt.dim();
    let total = (h * w) as f64;

    let mut age_sum = 0.0;
    let mut mse_sum = 0.0;
    let mut error = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            let d = gray_gt[[y, x]] - gray_est[[y, x]];
            age_sum += d.abs();
            mse_sum += d * d;
            if d.abs() > ep_threshold {
                error[[y, x]] = true;
            }
        }
    }
    let age = age_sum / total;
    let psnr = psnr_from_mse(mse_sum / total, peak);

    let mut ep = 0usize;
    let mut cep = 0usize;
    for y in 0..h {
        for x in 0..w {
            if !error[[y, x]] {
                continue;
            }
            ep += 1;
            // 4-connected neighbors; missing neighbors at the border do not
            // disqualify, so a fully wrong image scores pceps = 1
            let mut clustered = true;
            if y > 0 && !error[[y - 1, x]] {
                clustered = false;
            }
            if y + 1 < h && !error[[y + 1, x]] {
                clustered = false;
            }
            if x > 0 && !error[[y, x - 1]] {
                clustered = false;
            }
            if x + 1 < w && !error[[y, x + 1]] {
                clustered = false;
            }
            if clustered {
                cep += 1;
            }
        }
    }
    let peps = ep as f64 / total;
    let pceps = cep as f64 / total;

    let gray01_gt = gray_gt.mapv(|v| v / 255.0);
    let gray01_est = gray_est.mapv(|v| v / 255.0);
    let msssim = ms_ssim(&gray01_gt, &gray01_est);

    // per-band PSNRs in YUV
    let mut mse_y = 0.0;
    let mut mse_u = 0.0;
    let mut mse_v = 0.0;
    for y in 0..h {
        for x in 0..w {
            let a = to_yuv(gt[[y, x, 0]] * 255.0, gt[[y, x, 1]] * 255.0, gt[[y, x, 2]] * 255.0);
            let b = to_yuv(
                est[[y, x, 0]] * 255.0,
                est[[y, x, 1]] * 255.0,
                est[[y, x, 2]] * 255.0,
            );
            mse_y += (a.0 - b.0).powi(2);
            mse_u += (a.1 - b.1).powi(2);
            mse_v += (a.2 - b.2).powi(2);
        }
    }
    let psnr_y = psnr_from_mse(mse_y / total, peak);
    let psnr_u = psnr_from_mse(mse_u / total, peak);
    let psnr_v = psnr_from_mse(mse_v / total, peak);
    let cqm = psnr_y * CQM_LUMA_WEIGHT + 0.5 * CQM_CHROMA_WEIGHT * (psnr_u + psnr_v);

    Ok(MetricReport {
        age,
        peps,
        pceps,
        psnr,
        msssim,
        cqm,
    })
}

/// [`sbm_metrics_with_peak`] at the conventional peak of 255.
pub fn sbm_metrics(gt: &Array3<f64>, est: &Array3<f64>, ep_threshold: f64) -> Result<MetricReport> {
    sbm_metrics_with_peak(gt, est, ep_threshold, 255.0)
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let mut w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Separable valid-mode convolution with a symmetric 1-D window.
fn conv_valid(img: &Array2<f64>, win: &[f64]) -> Array2<f64> {
    let k = win.len();
    let (h, w) = img.dim();
    let oh = h - k + 1;
    let ow = w - k + 1;
    let mut tmp = Array2::zeros((h, ow));
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, wi) in win.iter().enumerate() {
                acc += img[[y, x + i]] * wi;
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, wi) in win.iter().enumerate() {
                acc += tmp[[y + i, x]] * wi;
            }
            out[[y, x]] = acc;
        }
    }
    out
}

fn downsample_avg_2x(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let nh = (h / 2).max(1);
    let nw = (w / 2).max(1);
    let mut out = Array2::zeros((nh, nw));
    for y in 0..nh {
        for x in 0..nw {
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for dy in 0..2 {
                for dx in 0..2 {
                    let yy = y * 2 + dy;
                    let xx = x * 2 + dx;
                    if yy < h && xx < w {
                        acc += img[[yy, xx]];
                        cnt += 1.0;
                    }
                }
            }
            out[[y, x]] = acc / cnt;
        }
    }
    out
}

/// Mean luminance-ssim and contrast-structure terms at one scale.
/// Falls back to global statistics when the image is smaller than the
/// 11x11 window.
fn ssim_components(a: &Array2<f64>, b: &Array2<f64>) -> (f64, f64) {
    const C1: f64 = 0.01 * 0.01; // (K1 * L)^2 with L = 1
    const C2: f64 = 0.03 * 0.03;
    let (h, w) = a.dim();
    let win = gaussian_window(11, 1.5);
    if h < 11 || w < 11 {
        let n = (h * w) as f64;
        let mu1 = a.sum() / n;
        let mu2 = b.sum() / n;
        let var1 = a.iter().map(|&v| (v - mu1).powi(2)).sum::<f64>() / n;
        let var2 = b.iter().map(|&v| (v - mu2).powi(2)).sum::<f64>() / n;
        let cov = a
            .iter()
            .zip(b.iter())
            .map(|(&x, &y)| (x - mu1) * (y - mu2))
            .sum::<f64>()
            / n;
        let l = (2.0 * mu1 * mu2 + C1) / (mu1 * mu1 + mu2 * mu2 + C1);
        let cs = (2.0 * cov + C2) / (var1 + var2 + C2);
        return (l * cs, cs);
    }
    let mu1 = conv_valid(a, &win);
    let mu2 = conv_valid(b, &win);
    let aa = conv_valid(&(a * a), &win);
    let bb = conv_valid(&(b * b), &win);
    let ab = conv_valid(&(a * b), &win);
    let mut ssim_sum = 0.0;
    let mut cs_sum = 0.0;
    let n = mu1.len() as f64;
    for ((&m1, &m2), ((&paa, &pbb), &pab)) in mu1
        .iter()
        .zip(mu2.iter())
        .zip(aa.iter().zip(bb.iter()).zip(ab.iter()))
    {
        let var1 = paa - m1 * m1;
        let var2 = pbb - m2 * m2;
        let cov = pab - m1 * m2;
        let l = (2.0 * m1 * m2 + C1) / (m1 * m1 + m2 * m2 + C1);
        let cs = (2.0 * cov + C2) / (var1 + var2 + C2);
        ssim_sum += l * cs;
        cs_sum += cs;
    }
    (ssim_sum / n, cs_sum / n)
}

/// Multi-scale SSIM over 5 scales with the standard exponents, on
/// grayscale images in `[0, 1]`.
pub fn ms_ssim(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let mut ca = a.clone();
    let mut cb = b.clone();
    let scales = MSSSIM_WEIGHTS.len();
    let mut result = 1.0;
    for (j, &weight) in MSSSIM_WEIGHTS.iter().enumerate() {
        let (ssim, cs) = ssim_components(&ca, &cb);
        if j + 1 < scales {
            // negative covariance would make the fractional power undefined
            result *= cs.max(0.0).powf(weight);
            ca = downsample_avg_2x(&ca);
            cb = downsample_avg_2x(&cb);
        } else {
            result *= ssim.max(0.0).powf(weight);
        }
    }
    result
}

/// Pixel-level background-subtraction scores aggregated over all frames.
pub fn bs_scores(pred: &[Array2<u8>], gt: &[Array2<u8>]) -> Result<BsScore> {
    if pred.len() != gt.len() {
        return Err(GlbmError::InvalidArgument(format!(
            "{} predicted masks vs {} ground-truth masks",
            pred.len(),
            gt.len()
        )));
    }
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fneg = 0u64;
    for (p, g) in pred.iter().zip(gt.iter()) {
        if p.dim() != g.dim() {
            return Err(GlbmError::InvalidArgument(format!(
                "mask shape mismatch: {:?} vs {:?}",
                p.dim(),
                g.dim()
            )));
        }
        for (&pv, &gv) in p.iter().zip(g.iter()) {
            match (pv != 0, gv != 0) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                (false, false) => {}
            }
        }
    }
    let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let recall = if tp + fneg > 0 { tp as f64 / (tp + fneg) as f64 } else { 0.0 };
    let f_measure = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(BsScore {
        precision,
        recall,
        f_measure,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gray_image(h: usize, w: usize, v: f64) -> Array3<f64> {
        Array3::from_elem((h, w, 3), v)
    }

    fn random_image(h: usize, w: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((h, w, 3), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn identical_images_saturate_the_report() {
        let img = random_image(32, 48, 1);
        let r = sbm_metrics(&img, &img, 20.0).unwrap();
        assert_eq!(r.age, 0.0);
        assert_eq!(r.peps, 0.0);
        assert_eq!(r.pceps, 0.0);
        assert_eq!(r.psnr, 100.0);
        assert_relative_eq!(r.msssim, 1.0, epsilon = 1e-6);
        // cqm weights satisfy 0.9449 + 0.0551 = 1, so the cap passes through
        assert_relative_eq!(r.cqm, 100.0, epsilon = 1e-6);
    }

    #[test]
    fn black_versus_white_saturates_the_other_way() {
        let gt = gray_image(16, 16, 0.0);
        let est = gray_image(16, 16, 1.0);
        let r = sbm_metrics(&gt, &est, 20.0).unwrap();
        assert_relative_eq!(r.age, 255.0, epsilon = 1e-9);
        assert_eq!(r.peps, 1.0);
        assert_eq!(r.pceps, 1.0);
        // MSE = 255^2 = (L-1)^2, so PSNR = 0 dB
        assert_relative_eq!(r.psnr, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn single_error_pixel_counts() {
        let gt = gray_image(100, 100, 0.2);
        let mut est = gt.clone();
        for ch in 0..3 {
            est[[40, 60, ch]] = 0.8; // 153 gray levels away, above threshold
        }
        let r = sbm_metrics(&gt, &est, 20.0).unwrap();
        assert_relative_eq!(r.peps, 1e-4, epsilon = 1e-12);
        assert_eq!(r.pceps, 0.0);
    }

    #[test]
    fn resolution_mismatch_is_rejected() {
        let a = gray_image(8, 8, 0.5);
        let b = gray_image(8, 9, 0.5);
        assert!(sbm_metrics(&a, &b, 20.0).is_err());
    }

    #[test]
    fn age_is_symmetric() {
        let a = random_image(24, 24, 2);
        let b = random_image(24, 24, 3);
        let r1 = sbm_metrics(&a, &b, 20.0).unwrap();
        let r2 = sbm_metrics(&b, &a, 20.0).unwrap();
        assert_relative_eq!(r1.age, r2.age, epsilon = 1e-12);
    }

    #[test]
    fn psnr_strictly_decreases_in_mse() {
        let gt = gray_image(16, 16, 0.5);
        let mut last = f64::INFINITY;
        for delta in [0.01, 0.05, 0.1, 0.3, 0.5] {
            let est = gray_image(16, 16, 0.5 + delta);
            let r = sbm_metrics(&gt, &est, 20.0).unwrap();
            assert!(r.psnr < last, "psnr {} not below {last}", r.psnr);
            last = r.psnr;
        }
    }

    #[test]
    fn msssim_self_similarity_and_bound() {
        let img = random_image(64, 64, 4);
        let gray = to_gray(&img);
        assert_relative_eq!(ms_ssim(&gray, &gray), 1.0, epsilon = 1e-6);
        let other = to_gray(&random_image(64, 64, 5));
        let v = ms_ssim(&gray, &other);
        assert!(v <= 1.0 + 1e-9 && v >= 0.0, "msssim = {v}");
    }

    #[test]
    fn msssim_small_image_fallback() {
        // too small for even one 11x11 window at the first scale
        let a = to_gray(&random_image(8, 8, 6));
        assert_relative_eq!(ms_ssim(&a, &a), 1.0, epsilon = 1e-6);
    }

    #[test]
    fn bs_scores_exact_cases() {
        let gt = vec![Array2::from_shape_fn((8, 8), |(y, x)| ((2..6).contains(&y) && (2..6).contains(&x)) as u8)];
        // perfect prediction
        let s = bs_scores(&gt, &gt).unwrap();
        assert_eq!((s.precision, s.recall, s.f_measure), (1.0, 1.0, 1.0));
        // empty prediction
        let empty = vec![Array2::zeros((8, 8))];
        let s = bs_scores(&empty, &gt).unwrap();
        assert_eq!(s.recall, 0.0);
        assert_eq!(s.f_measure, 0.0);
        // half the rectangle covered
        let half = vec![Array2::from_shape_fn((8, 8), |(y, x)| ((2..4).contains(&y) && (2..6).contains(&x)) as u8)];
        let s = bs_scores(&half, &gt).unwrap();
        assert_relative_eq!(s.precision, 1.0, epsilon = 1e-12);
        assert_relative_eq!(s.recall, 0.5, epsilon = 1e-12);
        assert_relative_eq!(s.f_measure, 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn bs_scores_frame_order_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let masks: Vec<Array2<u8>> = (0..4)
            .map(|_| Array2::from_shape_fn((6, 6), |_| rng.random_bool(0.3) as u8))
            .collect();
        let gts: Vec<Array2<u8>> = (0..4)
            .map(|_| Array2::from_shape_fn((6, 6), |_| rng.random_bool(0.3) as u8))
            .collect();
        let fwd = bs_scores(&masks, &gts).unwrap();
        let rev_masks: Vec<_> = masks.iter().rev().cloned().collect();
        let rev_gts: Vec<_> = gts.iter().rev().cloned().collect();
        let rev = bs_scores(&rev_masks, &rev_gts).unwrap();
        assert_eq!(fwd, rev);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn pceps_never_exceeds_peps(seed in 0u64..500) {
            let gt = random_image(12, 12, seed);
            let est = random_image(12, 12, seed.wrapping_add(1000));
            let r = sbm_metrics(&gt, &est, 20.0).unwrap();
            prop_assert!(r.pceps <= r.peps + 1e-12);
            prop_assert!((0.0..=1.0).contains(&r.peps));
            prop_assert!((0.0..=1.0).contains(&r.pceps));
        }

        #[test]
        fn msssim_bounded_above_by_one(seed in 0u64..500) {
            let a = to_gray(&random_image(24, 24, seed));
            let b = to_gray(&random_image(24, 24, seed.wrapping_add(7777)));
            prop_assert!(ms_ssim(&a, &b) <= 1.0 + 1e-9);
        }
    }
}
