//! Dense coarse-to-fine optical flow and the adaptive motion mask.
//!
//! The estimator is a pyramidal Lucas-Kanade scheme with iterative warping
//! refinement: any estimator passing the global-translation contract
//! (median endpoint error <= 0.5 px up to 5 px shifts) may be swapped in
//! behind [`estimate_flow`]. Windows with insufficient texture get no
//! update, so untextured static regions keep exactly zero flow.
//!
//! The motion mask marks a pixel as moving when its flow magnitude exceeds
//! the adaptive threshold `tau = kappa * mean(all flow magnitudes)` over
//! the clip. The first frame has no predecessor and copies the mask of the
//! second frame, keeping mask count equal to frame count.

use std::path::Path;

use ndarray::{Array2, Array3};

use crate::dataset::SceneDescriptor;
use crate::error::{GlbmError, Result};
use crate::imgproc::{self, downsample_2x, gaussian_blur, sample_bilinear, to_gray};

/// Dense displacement field in pixels; `u` horizontal, `v` vertical.
#[derive(Debug, Clone)]
pub struct FlowField {
    pub u: Array2<f64>,
    pub v: Array2<f64>,
}

impl FlowField {
    pub fn magnitude(&self) -> Array2<f64> {
        ndarray::Zip::from(&self.u)
            .and(&self.v)
            .map_collect(|&u, &v| (u * u + v * v).sqrt())
    }
}

/// Per-frame binary moving/static partition: 1 = moving.
#[derive(Debug, Clone)]
pub struct MotionMask {
    pub moving: Array3<u8>,
    pub tau: f64,
}

impl MotionMask {
    pub fn frames(&self) -> usize {
        self.moving.dim().0
    }

    /// Fraction of moving pixels in frame `t`.
    pub fn moving_fraction(&self, t: usize) -> f64 {
        let frame = self.moving.index_axis(ndarray::Axis(0), t);
        frame.iter().map(|&m| m as f64).sum::<f64>() / frame.len() as f64
    }
}

const LK_WINDOW_RADIUS: usize = 2;
const LK_MIN_EIGEN: f64 = 1e-4;
// residual after pyramid initialization is sub-pixel, so larger updates
// only ever come from ill-conditioned windows
const LK_MAX_STEP: f64 = 1.0;

/// Box-filter sum over a (2r+1)^2 window with zero padding outside.
fn box_sum(img: &Array2<f64>, r: usize) -> Array2<f64> {
    let (h, w) = img.dim();
    let mut rows = Array2::zeros((h, w));
    for y in 0..h {
        let mut acc = 0.0;
        for x in 0..(r.min(w.saturating_sub(1)) + 1).min(w) {
            acc += img[[y, x]];
        }
        rows[[y, 0]] = acc;
        for x in 1..w {
            if x + r < w {
                acc += img[[y, x + r]];
            }
            if x > r {
                acc -= img[[y, x - r - 1]];
            }
            rows[[y, x]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for x in 0..w {
        let mut acc = 0.0;
        for y in 0..(r.min(h.saturating_sub(1)) + 1).min(h) {
            acc += rows[[y, x]];
        }
        out[[0, x]] = acc;
        for y in 1..h {
            if y + r < h {
                acc += rows[[y + r, x]];
            }
            if y > r {
                acc -= rows[[y - r - 1, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

fn gradients(img: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = img.dim();
    let gx = Array2::from_shape_fn((h, w), |(y, x)| {
        let xm = x.saturating_sub(1);
        let xp = (x + 1).min(w - 1);
        (img[[y, xp]] - img[[y, xm]]) / (xp - xm).max(1) as f64
    });
    let gy = Array2::from_shape_fn((h, w), |(y, x)| {
        let ym = y.saturating_sub(1);
        let yp = (y + 1).min(h - 1);
        (img[[yp, x]] - img[[ym, x]]) / (yp - ym).max(1) as f64
    });
    (gx, gy)
}

fn warp(img: &Array2<f64>, u: &Array2<f64>, v: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        sample_bilinear(img, y as f64 + v[[y, x]], x as f64 + u[[y, x]])
    })
}

fn upscale_flow(flow: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let src = flow.mapv(|x| x * 2.0);
    let as3 = src.insert_axis(ndarray::Axis(2));
    imgproc::resize_bilinear(&as3, h, w).index_axis_move(ndarray::Axis(2), 0)
}

/// One Lucas-Kanade refinement at a single pyramid level. Pixels whose
/// warped sample would leave the image carry no data (shifted-in content
/// has no counterpart in the template) and are masked out of the window
/// sums entirely.
fn lk_refine(a: &Array2<f64>, b: &Array2<f64>, u: &mut Array2<f64>, v: &mut Array2<f64>) {
    let (h, w) = a.dim();
    let warped = warp(b, u, v);
    let (mut ix, mut iy) = gradients(a);
    let mut it = &warped - a;
    let mut valid = Array2::from_elem((h, w), true);
    for y in 0..h {
        for x in 0..w {
            let px = x as f64 + u[[y, x]];
            let py = y as f64 + v[[y, x]];
            if px < 0.0 || px > (w - 1) as f64 || py < 0.0 || py > (h - 1) as f64 {
                valid[[y, x]] = false;
                ix[[y, x]] = 0.0;
                iy[[y, x]] = 0.0;
                it[[y, x]] = 0.0;
            }
        }
    }
    let sxx = box_sum(&(&ix * &ix), LK_WINDOW_RADIUS);
    let sxy = box_sum(&(&ix * &iy), LK_WINDOW_RADIUS);
    let syy = box_sum(&(&iy * &iy), LK_WINDOW_RADIUS);
    let sxt = box_sum(&(&ix * &it), LK_WINDOW_RADIUS);
    let syt = box_sum(&(&iy * &it), LK_WINDOW_RADIUS);
    for y in 0..h {
        for x in 0..w {
            if !valid[[y, x]] {
                continue;
            }
            let gxx = sxx[[y, x]];
            let gxy = sxy[[y, x]];
            let gyy = syy[[y, x]];
            let tr = gxx + gyy;
            let det = gxx * gyy - gxy * gxy;
            let disc = (tr * tr - 4.0 * det).max(0.0).sqrt();
            let min_eig = 0.5 * (tr - disc);
            if min_eig < LK_MIN_EIGEN {
                continue;
            }
            let bx = -sxt[[y, x]];
            let by = -syt[[y, x]];
            let du = ((gyy * bx - gxy * by) / det).clamp(-LK_MAX_STEP, LK_MAX_STEP);
            let dv = ((gxx * by - gxy * bx) / det).clamp(-LK_MAX_STEP, LK_MAX_STEP);
            u[[y, x]] += du;
            v[[y, x]] += dv;
        }
    }
}

/// 3x3 median filter for flow components; standard outlier cleanup after
/// each pyramid level.
fn median_filter_flow(f: &Array2<f64>) -> Array2<f64> {
    let (h, w) = f.dim();
    let mut out = Array2::zeros((h, w));
    let mut buf = Vec::with_capacity(9);
    for y in 0..h {
        for x in 0..w {
            buf.clear();
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let yy = y as i64 + dy;
                    let xx = x as i64 + dx;
                    if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                        buf.push(f[[yy as usize, xx as usize]]);
                    }
                }
            }
            buf.sort_by(|a, b| a.partial_cmp(b).unwrap());
            out[[y, x]] = buf[buf.len() / 2];
        }
    }
    out
}

/// Dense flow mapping `frame_a` to `frame_b` over a coarse-to-fine pyramid.
pub fn estimate_flow(
    frame_a: &Array3<f64>,
    frame_b: &Array3<f64>,
    levels: usize,
    iterations: usize,
) -> Result<FlowField> {
    if frame_a.dim() != frame_b.dim() {
        return Err(GlbmError::InvalidArgument(format!(
            "frame shapes differ: {:?} vs {:?}",
            frame_a.dim(),
            frame_b.dim()
        )));
    }
    estimate_flow_gray(&to_gray(frame_a), &to_gray(frame_b), levels, iterations)
}

/// Grayscale entry point of [`estimate_flow`].
pub fn estimate_flow_gray(
    a: &Array2<f64>,
    b: &Array2<f64>,
    levels: usize,
    iterations: usize,
) -> Result<FlowField> {
    if a.dim() != b.dim() {
        return Err(GlbmError::InvalidArgument("frame shapes differ".into()));
    }
    let levels = levels.max(1);
    let iterations = iterations.max(1);

    let mut pyr_a = vec![a.clone()];
    let mut pyr_b = vec![b.clone()];
    for _ in 1..levels {
        let last_a = pyr_a.last().unwrap();
        let (h, w) = last_a.dim();
        if h.min(w) < 16 {
            break;
        }
        pyr_a.push(downsample_2x(&gaussian_blur(last_a, 1.0)));
        pyr_b.push(downsample_2x(&gaussian_blur(pyr_b.last().unwrap(), 1.0)));
    }

    let coarse = pyr_a.last().unwrap().dim();
    let mut u = Array2::zeros(coarse);
    let mut v = Array2::zeros(coarse);
    for level in (0..pyr_a.len()).rev() {
        let (h, w) = pyr_a[level].dim();
        if u.dim() != (h, w) {
            u = upscale_flow(&u, h, w);
            v = upscale_flow(&v, h, w);
        }
        for _ in 0..iterations {
            lk_refine(&pyr_a[level], &pyr_b[level], &mut u, &mut v);
        }
        u = median_filter_flow(&u);
        v = median_filter_flow(&v);
    }
    Ok(FlowField { u, v })
}

/// Binary motion mask over a clip from its consecutive-pair flows.
///
/// `tau = kappa * mean(all flow magnitudes)`; a pixel is moving iff its
/// magnitude strictly exceeds `tau`. Frame 0 copies the mask of frame 1.
pub fn motion_mask(flows: &[FlowField], kappa: f64) -> Result<MotionMask> {
    if flows.is_empty() {
        return Err(GlbmError::InvalidArgument(
            "motion mask requires at least one flow field".into(),
        ));
    }
    if kappa <= 0.0 {
        return Err(GlbmError::InvalidArgument("kappa must be positive".into()));
    }
    let dim = flows[0].u.dim();
    if flows.iter().any(|f| f.u.dim() != dim || f.v.dim() != dim) {
        return Err(GlbmError::InvalidArgument("flow fields must share one shape".into()));
    }
    let mags: Vec<Array2<f64>> = flows.iter().map(|f| f.magnitude()).collect();
    let total: f64 = mags.iter().map(|m| m.sum()).sum();
    let count: usize = mags.iter().map(|m| m.len()).sum();
    let tau = kappa * total / count as f64;

    let (h, w) = dim;
    let c = flows.len() + 1;
    let mut moving = Array3::zeros((c, h, w));
    for (t, mag) in mags.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                moving[[t + 1, y, x]] = (mag[[y, x]] > tau) as u8;
            }
        }
    }
    let second = moving.index_axis(ndarray::Axis(0), 1).to_owned();
    moving.index_axis_mut(ndarray::Axis(0), 0).assign(&second);
    Ok(MotionMask { moving, tau })
}

/// Write one 0/255 PNG per frame under `dir/<scene_id>/`, mirroring the
/// input frame file names.
pub fn write_mask_cache(dir: &Path, scene: &SceneDescriptor, mask: &MotionMask) -> Result<()> {
    if mask.frames() != scene.frame_count() {
        return Err(GlbmError::InvalidArgument(format!(
            "mask has {} frames, scene '{}' has {}",
            mask.frames(),
            scene.scene_id,
            scene.frame_count()
        )));
    }
    let scene_dir = dir.join(&scene.scene_id);
    std::fs::create_dir_all(&scene_dir).map_err(|e| GlbmError::io(&scene_dir, e))?;
    for (t, frame_path) in scene.frame_paths.iter().enumerate() {
        let stem = frame_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("{t:06}"));
        let out = scene_dir.join(format!("{stem}.png"));
        imgproc::save_mask(&mask.moving.index_axis(ndarray::Axis(0), t), &out)?;
    }
    Ok(())
}

/// Read a cached mask stack for a scene. Returns `Ok(None)` when the cache
/// is absent or does not match the expected `(H, W)`.
pub fn read_mask_cache(
    dir: &Path,
    scene: &SceneDescriptor,
    size: (usize, usize),
) -> Result<Option<Array3<u8>>> {
    let scene_dir = dir.join(&scene.scene_id);
    if !scene_dir.is_dir() {
        return Ok(None);
    }
    let c = scene.frame_count();
    let mut moving = Array3::zeros((c, size.0, size.1));
    for (t, frame_path) in scene.frame_paths.iter().enumerate() {
        let stem = frame_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("{t:06}"));
        let path = scene_dir.join(format!("{stem}.png"));
        if !path.is_file() {
            return Ok(None);
        }
        let m = imgproc::load_mask(&path)?;
        if m.dim() != size {
            return Ok(None);
        }
        moving.index_axis_mut(ndarray::Axis(0), t).assign(&m);
    }
    Ok(Some(moving))
}
