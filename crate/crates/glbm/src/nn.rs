//! Minimal convolutional layer kit with hand-written backward passes.
//!
//! Images flow through as `[H, W, C]` tensors in f64. Convolutions are
//! im2col + GEMM; backward passes recompute the column matrix from the
//! cached layer input instead of holding it, which keeps per-frame memory
//! at activation size.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{GlbmError, Result};

/// Numerically stable softplus.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Derivative of softplus (the logistic function).
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of softplus, used to seed the scale head bias.
pub fn softplus_inverse(y: f64) -> f64 {
    // ln(e^y - 1), stable for both small and large y
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    Relu,
    #[default]
    LeakyRelu,
    Tanh,
}

impl Activation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "leaky_relu" => Ok(Activation::LeakyRelu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(GlbmError::Config(format!(
                "unknown activation '{other}' (expected relu|leaky_relu|tanh)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::LeakyRelu => "leaky_relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu => {
                if x >= 0.0 {
                    x
                } else {
                    0.1 * x
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative as a function of the preactivation.
    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if x >= 0.0 {
                    1.0
                } else {
                    0.1
                }
            }
            Activation::Tanh => 1.0 - x.tanh().powi(2),
        }
    }
}

/// 2-D convolution with square kernel; weights stored as
/// `[out_ch, in_ch * k * k]` for the im2col GEMM.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn init<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_ch * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let w = Array2::from_shape_fn((out_ch, in_ch * k * k), |_| {
            let g: f64 = rng.sample(StandardNormal);
            g * std
        });
        Conv2d {
            w,
            b: Array1::zeros(out_ch),
            in_ch,
            out_ch,
            k,
            stride,
            pad,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (h, w, _) = x.dim();
        let (oh, ow) = self.out_size(h, w);
        let col = im2col(x, self.k, self.stride, self.pad);
        let y_flat = self.w.dot(&col);
        let mut y = Array3::zeros((oh, ow, self.out_ch));
        for co in 0..self.out_ch {
            let bias = self.b[co];
            for oy in 0..oh {
                for ox in 0..ow {
                    y[[oy, ox, co]] = y_flat[[co, oy * ow + ox]] + bias;
                }
            }
        }
        y
    }

    /// Backward pass; recomputes im2col from the cached input `x`.
    /// Accumulates parameter gradients into `gw`/`gb` and returns the
    /// gradient w.r.t. the input.
    pub fn backward(
        &self,
        x: &Array3<f64>,
        grad_y: &Array3<f64>,
        gw: &mut Array2<f64>,
        gb: &mut Array1<f64>,
    ) -> Array3<f64> {
        let (h, w, _) = x.dim();
        let (oh, ow, _) = grad_y.dim();
        let mut gy_flat = Array2::zeros((self.out_ch, oh * ow));
        for co in 0..self.out_ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    gy_flat[[co, oy * ow + ox]] = grad_y[[oy, ox, co]];
                }
            }
        }
        for co in 0..self.out_ch {
            gb[co] += gy_flat.row(co).sum();
        }
        let col = im2col(x, self.k, self.stride, self.pad);
        *gw += &gy_flat.dot(&col.t());
        let grad_col = self.w.t().dot(&gy_flat);
        col2im(&grad_col, h, w, self.in_ch, self.k, self.stride, self.pad)
    }
}

/// Fully connected layer, `y = w x + b`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn init<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let std = (2.0 / in_dim as f64).sqrt();
        let w = Array2::from_shape_fn((out_dim, in_dim), |_| {
            let g: f64 = rng.sample(StandardNormal);
            g * std
        });
        Dense {
            w,
            b: Array1::zeros(out_dim),
        }
    }

    pub fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        self.w.dot(x) + &self.b
    }

    pub fn backward(
        &self,
        x: &Array1<f64>,
        grad_y: &Array1<f64>,
        gw: &mut Array2<f64>,
        gb: &mut Array1<f64>,
    ) -> Array1<f64> {
        for (i, &g) in grad_y.iter().enumerate() {
            gb[i] += g;
            let mut row = gw.row_mut(i);
            row.scaled_add(g, x);
        }
        self.w.t().dot(grad_y)
    }
}

/// Gather padded k x k windows into a `[C*k*k, Ho*Wo]` column matrix.
pub fn im2col(x: &Array3<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (h, w, c) = x.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut col = Array2::zeros((c * k * k, oh * ow));
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as i64 - pad as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as i64 - pad as i64;
                        if ix < 0 || ix >= w as i64 {
                            continue;
                        }
                        col[[row, oy * ow + ox]] = x[[iy as usize, ix as usize, ch]];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add inverse of [`im2col`].
pub fn col2im(
    grad_col: &Array2<f64>,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut gx = Array3::zeros((h, w, c));
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as i64 - pad as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as i64 - pad as i64;
                        if ix < 0 || ix >= w as i64 {
                            continue;
                        }
                        gx[[iy as usize, ix as usize, ch]] += grad_col[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
    gx
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample_2x(x: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = x.dim();
    Array3::from_shape_fn((h * 2, w * 2, c), |(y, xx, ch)| x[[y / 2, xx / 2, ch]])
}

/// Backward of [`upsample_2x`]: sum gradients over each 2x2 block.
pub fn upsample_2x_backward(grad_y: &Array3<f64>) -> Array3<f64> {
    let (h2, w2, c) = grad_y.dim();
    let mut gx = Array3::zeros((h2 / 2, w2 / 2, c));
    for y in 0..h2 {
        for x in 0..w2 {
            for ch in 0..c {
                gx[[y / 2, x / 2, ch]] += grad_y[[y, x, ch]];
            }
        }
    }
    gx
}
