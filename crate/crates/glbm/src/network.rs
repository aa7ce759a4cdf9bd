//! Convolutional encoder (mean and scale heads) and decoder.
//!
//! The encoder applies `channels.len()` stride-2 conv stages followed by a
//! dense head mapping to `2 * latent_dim` outputs; the first half is the
//! latent mean, the second half passes through softplus (+ 1e-4 floor) to
//! give a strictly positive precision-scale. The decoder mirrors the
//! encoder with nearest-neighbor upsampling + stride-1 convs and a sigmoid
//! output layer, so frames land in the open interval (0, 1).
//!
//! Frames are processed independently; there is no temporal mixing inside
//! either network.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array3, Array4, ArrayView1, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::FrameClip;
use crate::error::{GlbmError, Result};
use crate::nn::{
    sigmoid, softplus, softplus_inverse, upsample_2x, upsample_2x_backward, Activation, Conv2d,
    Dense,
};
use crate::posterior::LatentSample;

pub const SCALE_FLOOR: f64 = 1e-4;
const COLOR_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub channels: Vec<usize>,
    pub latent_dim: usize,
    pub activation: Activation,
    pub seed: u64,
    /// Initial value of the scale head output (seeds the head bias).
    pub scale_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_h: 128,
            input_w: 128,
            channels: vec![32, 64, 128, 256, 256],
            latent_dim: 32,
            activation: Activation::default(),
            seed: 42,
            scale_init: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn stages(&self) -> usize {
        self.channels.len()
    }

    /// Spatial size of the bottleneck feature map.
    pub fn feature_hw(&self) -> (usize, usize) {
        let f = 1 << self.stages();
        (self.input_h / f, self.input_w / f)
    }

    pub fn feature_len(&self) -> usize {
        let (h, w) = self.feature_hw();
        h * w * self.channels[self.stages() - 1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(GlbmError::Config("latent_dim must be >= 1".into()));
        }
        if self.channels.is_empty() {
            return Err(GlbmError::Config("at least one encoder stage required".into()));
        }
        let f = 1usize << self.stages();
        if self.input_h % f != 0 || self.input_w % f != 0 {
            return Err(GlbmError::Config(format!(
                "input size {}x{} not divisible by 2^{} stages",
                self.input_h,
                self.input_w,
                self.stages()
            )));
        }
        if self.input_h / f == 0 || self.input_w / f == 0 {
            return Err(GlbmError::Config("too many stages for input size".into()));
        }
        if self.scale_init <= SCALE_FLOOR {
            return Err(GlbmError::Config(format!(
                "scale_init must exceed the scale floor {SCALE_FLOOR}"
            )));
        }
        Ok(())
    }
}

/// All learnable arrays of encoder and decoder.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub enc_convs: Vec<Conv2d>,
    pub enc_head: Dense,
    pub dec_head: Dense,
    pub dec_convs: Vec<Conv2d>,
    pub dec_out: Conv2d,
}

/// Gradient buffer mirroring [`ModelParams`] tensor-for-tensor.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub enc_convs: Vec<(Array2<f64>, Array1<f64>)>,
    pub enc_head: (Array2<f64>, Array1<f64>),
    pub dec_head: (Array2<f64>, Array1<f64>),
    pub dec_convs: Vec<(Array2<f64>, Array1<f64>)>,
    pub dec_out: (Array2<f64>, Array1<f64>),
}

impl ModelGrads {
    pub fn zeros(params: &ModelParams) -> Self {
        let conv_zeros = |cs: &[Conv2d]| {
            cs.iter()
                .map(|c| (Array2::zeros(c.w.dim()), Array1::zeros(c.b.len())))
                .collect::<Vec<_>>()
        };
        ModelGrads {
            enc_convs: conv_zeros(&params.enc_convs),
            enc_head: (
                Array2::zeros(params.enc_head.w.dim()),
                Array1::zeros(params.enc_head.b.len()),
            ),
            dec_head: (
                Array2::zeros(params.dec_head.w.dim()),
                Array1::zeros(params.dec_head.b.len()),
            ),
            dec_convs: conv_zeros(&params.dec_convs),
            dec_out: (
                Array2::zeros(params.dec_out.w.dim()),
                Array1::zeros(params.dec_out.b.len()),
            ),
        }
    }

    pub fn add_assign(&mut self, other: &ModelGrads) {
        for (a, b) in self.flat_mut().into_iter().zip(other.flat()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += y;
            }
        }
    }

    pub fn flat(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for (w, b) in &self.enc_convs {
            out.push(w.as_slice().unwrap());
            out.push(b.as_slice().unwrap());
        }
        out.push(self.enc_head.0.as_slice().unwrap());
        out.push(self.enc_head.1.as_slice().unwrap());
        out.push(self.dec_head.0.as_slice().unwrap());
        out.push(self.dec_head.1.as_slice().unwrap());
        for (w, b) in &self.dec_convs {
            out.push(w.as_slice().unwrap());
            out.push(b.as_slice().unwrap());
        }
        out.push(self.dec_out.0.as_slice().unwrap());
        out.push(self.dec_out.1.as_slice().unwrap());
        out
    }

    pub fn flat_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for (w, b) in &mut self.enc_convs {
            out.push(w.as_slice_mut().unwrap());
            out.push(b.as_slice_mut().unwrap());
        }
        out.push(self.enc_head.0.as_slice_mut().unwrap());
        out.push(self.enc_head.1.as_slice_mut().unwrap());
        out.push(self.dec_head.0.as_slice_mut().unwrap());
        out.push(self.dec_head.1.as_slice_mut().unwrap());
        for (w, b) in &mut self.dec_convs {
            out.push(w.as_slice_mut().unwrap());
            out.push(b.as_slice_mut().unwrap());
        }
        out.push(self.dec_out.0.as_slice_mut().unwrap());
        out.push(self.dec_out.1.as_slice_mut().unwrap());
        out
    }

    pub fn global_norm(&self) -> f64 {
        self.flat()
            .iter()
            .map(|s| s.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_by(&mut self, factor: f64) {
        for s in self.flat_mut() {
            for v in s.iter_mut() {
                *v *= factor;
            }
        }
    }
}

impl ModelParams {
    /// Tensor names in serialization order, mirroring [`ModelGrads::flat`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.enc_convs.len() {
            names.push(format!("enc_conv{i}.w"));
            names.push(format!("enc_conv{i}.b"));
        }
        names.push("enc_head.w".into());
        names.push("enc_head.b".into());
        names.push("dec_head.w".into());
        names.push("dec_head.b".into());
        for i in 0..self.dec_convs.len() {
            names.push(format!("dec_conv{i}.w"));
            names.push(format!("dec_conv{i}.b"));
        }
        names.push("dec_out.w".into());
        names.push("dec_out.b".into());
        names
    }

    pub fn flat(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for c in &self.enc_convs {
            out.push(c.w.as_slice().unwrap());
            out.push(c.b.as_slice().unwrap());
        }
        out.push(self.enc_head.w.as_slice().unwrap());
        out.push(self.enc_head.b.as_slice().unwrap());
        out.push(self.dec_head.w.as_slice().unwrap());
        out.push(self.dec_head.b.as_slice().unwrap());
        for c in &self.dec_convs {
            out.push(c.w.as_slice().unwrap());
            out.push(c.b.as_slice().unwrap());
        }
        out.push(self.dec_out.w.as_slice().unwrap());
        out.push(self.dec_out.b.as_slice().unwrap());
        out
    }

    pub fn flat_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for c in &mut self.enc_convs {
            out.push(c.w.as_slice_mut().unwrap());
            out.push(c.b.as_slice_mut().unwrap());
        }
        out.push(self.enc_head.w.as_slice_mut().unwrap());
        out.push(self.enc_head.b.as_slice_mut().unwrap());
        out.push(self.dec_head.w.as_slice_mut().unwrap());
        out.push(self.dec_head.b.as_slice_mut().unwrap());
        for c in &mut self.dec_convs {
            out.push(c.w.as_slice_mut().unwrap());
            out.push(c.b.as_slice_mut().unwrap());
        }
        out.push(self.dec_out.w.as_slice_mut().unwrap());
        out.push(self.dec_out.b.as_slice_mut().unwrap());
        out
    }

    pub fn param_count(&self) -> usize {
        self.flat().iter().map(|s| s.len()).sum()
    }
}

/// Deterministic fan-in-scaled initialization.
pub fn init_params(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.latent_dim;
    let stages = config.stages();

    let mut enc_convs = Vec::with_capacity(stages);
    let mut in_ch = COLOR_CHANNELS;
    for &out_ch in &config.channels {
        enc_convs.push(Conv2d::init(in_ch, out_ch, 3, 2, 1, &mut rng));
        in_ch = out_ch;
    }
    let feature_len = config.feature_len();
    let mut enc_head = Dense::init(feature_len, 2 * d, &mut rng);
    // seed the scale head so softplus(bias) + floor == scale_init
    let scale_bias = softplus_inverse(config.scale_init - SCALE_FLOOR);
    for k in 0..d {
        enc_head.b[d + k] = scale_bias;
    }

    let dec_head = Dense::init(d, feature_len, &mut rng);
    let rev: Vec<usize> = config.channels.iter().rev().copied().collect();
    let mut dec_convs = Vec::with_capacity(stages);
    for i in 0..stages {
        let cin = rev[i];
        let cout = if i + 1 < stages { rev[i + 1] } else { rev[stages - 1] };
        dec_convs.push(Conv2d::init(cin, cout, 3, 1, 1, &mut rng));
    }
    let dec_out = Conv2d::init(*rev.last().unwrap(), COLOR_CHANNELS, 3, 1, 1, &mut rng);

    Ok(ModelParams {
        config: config.clone(),
        enc_convs,
        enc_head,
        dec_head,
        dec_convs,
        dec_out,
    })
}

/// Per-frame encoder activations retained for the backward pass.
pub struct EncCache {
    stage_inputs: Vec<Array3<f64>>,
    stage_preacts: Vec<Array3<f64>>,
    flat: Array1<f64>,
    head_raw: Array1<f64>,
}

/// Per-frame decoder activations retained for the backward pass.
pub struct DecCache {
    z: Array1<f64>,
    head_preact: Array1<f64>,
    stage_inputs: Vec<Array3<f64>>,
    stage_preacts: Vec<Array3<f64>>,
    out_input: Array3<f64>,
    out_preact: Array3<f64>,
}

pub fn encoder_forward_frame(
    params: &ModelParams,
    frame: ArrayView3<f64>,
) -> (Array1<f64>, Array1<f64>, EncCache) {
    let act = params.config.activation;
    let d = params.config.latent_dim;
    let mut stage_inputs = Vec::with_capacity(params.enc_convs.len());
    let mut stage_preacts = Vec::with_capacity(params.enc_convs.len());
    let mut x = frame.to_owned();
    for conv in &params.enc_convs {
        let pre = conv.forward(&x);
        stage_inputs.push(x);
        x = pre.mapv(|v| act.apply(v));
        stage_preacts.push(pre);
    }
    let flat = Array1::from_iter(x.iter().copied());
    let head_raw = params.enc_head.forward(&flat);
    let mu = head_raw.slice(ndarray::s![0..d]).to_owned();
    let scale = head_raw
        .slice(ndarray::s![d..2 * d])
        .mapv(|v| softplus(v) + SCALE_FLOOR);
    (
        mu,
        scale,
        EncCache {
            stage_inputs,
            stage_preacts,
            flat,
            head_raw,
        },
    )
}

pub fn encoder_backward_frame(
    params: &ModelParams,
    cache: &EncCache,
    grad_mu: ArrayView1<f64>,
    grad_scale: ArrayView1<f64>,
    grads: &mut ModelGrads,
) {
    let act = params.config.activation;
    let d = params.config.latent_dim;
    let mut grad_raw = Array1::zeros(2 * d);
    for k in 0..d {
        grad_raw[k] = grad_mu[k];
        grad_raw[d + k] = grad_scale[k] * sigmoid(cache.head_raw[d + k]);
    }
    let grad_flat = params
        .enc_head
        .backward(&cache.flat, &grad_raw, &mut grads.enc_head.0, &mut grads.enc_head.1);
    let last_pre = cache.stage_preacts.last().unwrap();
    let mut grad_x = Array3::from_shape_vec(last_pre.dim(), grad_flat.to_vec()).unwrap();
    for (i, conv) in params.enc_convs.iter().enumerate().rev() {
        let pre = &cache.stage_preacts[i];
        let grad_pre = ndarray::Zip::from(&grad_x)
            .and(pre)
            .map_collect(|&g, &p| g * act.derivative(p));
        let (gw, gb) = &mut grads.enc_convs[i];
        grad_x = conv.backward(&cache.stage_inputs[i], &grad_pre, gw, gb);
    }
}

pub fn decoder_forward_frame(params: &ModelParams, z: ArrayView1<f64>) -> (Array3<f64>, DecCache) {
    let act = params.config.activation;
    let (fh, fw) = params.config.feature_hw();
    let c_last = *params.config.channels.last().unwrap();
    let head_preact = params.dec_head.forward(&z.to_owned());
    let a0 = head_preact.mapv(|v| act.apply(v));
    let mut x = Array3::from_shape_vec((fh, fw, c_last), a0.to_vec()).unwrap();
    let mut stage_inputs = Vec::with_capacity(params.dec_convs.len());
    let mut stage_preacts = Vec::with_capacity(params.dec_convs.len());
    for conv in &params.dec_convs {
        let up = upsample_2x(&x);
        let pre = conv.forward(&up);
        stage_inputs.push(up);
        x = pre.mapv(|v| act.apply(v));
        stage_preacts.push(pre);
    }
    let out_preact = params.dec_out.forward(&x);
    let out = out_preact.mapv(sigmoid);
    (
        out,
        DecCache {
            z: z.to_owned(),
            head_preact,
            stage_inputs,
            stage_preacts,
            out_input: x,
            out_preact,
        },
    )
}

/// Returns the gradient w.r.t. the latent row.
pub fn decoder_backward_frame(
    params: &ModelParams,
    cache: &DecCache,
    grad_out: &Array3<f64>,
    grads: &mut ModelGrads,
) -> Array1<f64> {
    let act = params.config.activation;
    let grad_pre_out = ndarray::Zip::from(grad_out)
        .and(&cache.out_preact)
        .map_collect(|&g, &p| {
            let s = sigmoid(p);
            g * s * (1.0 - s)
        });
    let mut grad_x = params.dec_out.backward(
        &cache.out_input,
        &grad_pre_out,
        &mut grads.dec_out.0,
        &mut grads.dec_out.1,
    );
    for (i, conv) in params.dec_convs.iter().enumerate().rev() {
        let grad_pre = ndarray::Zip::from(&grad_x)
            .and(&cache.stage_preacts[i])
            .map_collect(|&g, &p| g * act.derivative(p));
        let (gw, gb) = &mut grads.dec_convs[i];
        let grad_up = conv.backward(&cache.stage_inputs[i], &grad_pre, gw, gb);
        grad_x = upsample_2x_backward(&grad_up);
    }
    let grad_a0 = Array1::from_iter(grad_x.iter().copied());
    let grad_head_pre = ndarray::Zip::from(&grad_a0)
        .and(&cache.head_preact)
        .map_collect(|&g, &p| g * act.derivative(p));
    params.dec_head.backward(
        &cache.z,
        &grad_head_pre,
        &mut grads.dec_head.0,
        &mut grads.dec_head.1,
    )
}

fn check_frame_shape(params: &ModelParams, frames: &Array4<f64>) -> Result<()> {
    let (_, h, w, c) = frames.dim();
    if h != params.config.input_h || w != params.config.input_w || c != COLOR_CHANNELS {
        return Err(GlbmError::InvalidArgument(format!(
            "frames are {h}x{w}x{c} but the model expects {}x{}x{}",
            params.config.input_h, params.config.input_w, COLOR_CHANNELS
        )));
    }
    Ok(())
}

/// Encode a stack of frames `[c, H, W, 3]` into per-frame `(mu, scale)`
/// rows. Frames are independent, so rows for identical frames are identical.
pub fn encode_frames(params: &ModelParams, frames: &Array4<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    check_frame_shape(params, frames)?;
    let n = frames.dim().0;
    let d = params.config.latent_dim;
    let rows: Vec<(Array1<f64>, Array1<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (mu, scale, _) = encoder_forward_frame(params, frames.index_axis(Axis(0), i));
            (mu, scale)
        })
        .collect();
    let mut mu = Array2::zeros((n, d));
    let mut scale = Array2::zeros((n, d));
    for (i, (m, s)) in rows.into_iter().enumerate() {
        mu.row_mut(i).assign(&m);
        scale.row_mut(i).assign(&s);
    }
    Ok((mu, scale))
}

/// Encoder over a clip (see [`encode_frames`]).
pub fn encode(params: &ModelParams, clip: &FrameClip) -> Result<(Array2<f64>, Array2<f64>)> {
    encode_frames(params, &clip.frames)
}

/// Decode latent rows `[c, d]` into frames `[c, H, W, 3]` in (0, 1).
pub fn decode_rows(params: &ModelParams, z: &Array2<f64>) -> Result<Array4<f64>> {
    if z.ncols() != params.config.latent_dim {
        return Err(GlbmError::InvalidArgument(format!(
            "latent rows have {} dims but the model expects {}",
            z.ncols(),
            params.config.latent_dim
        )));
    }
    let n = z.nrows();
    let (h, w) = (params.config.input_h, params.config.input_w);
    let frames: Vec<Array3<f64>> = (0..n)
        .into_par_iter()
        .map(|i| decoder_forward_frame(params, z.row(i)).0)
        .collect();
    let mut out = Array4::zeros((n, h, w, COLOR_CHANNELS));
    for (i, f) in frames.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&f);
    }
    Ok(out)
}

/// Decoder over a latent sample (see [`decode_rows`]).
pub fn decode(params: &ModelParams, z: &LatentSample) -> Result<Array4<f64>> {
    decode_rows(params, &z.z)
}

const CKPT_MAGIC: &str = "GLBM-CKPT 1";

/// Write a checkpoint: plain-text header (config echo, version, epoch)
/// followed by named parameter arrays in fixed order. Round-trips bit-exact.
pub fn save_checkpoint(params: &ModelParams, epoch: u64, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| GlbmError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let cfg = &params.config;
    let channels = cfg
        .channels
        .iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(",");
    let mut header = String::new();
    header.push_str(CKPT_MAGIC);
    header.push('\n');
    header.push_str(&format!("epoch = {epoch}\n"));
    header.push_str(&format!("model.input_h = {}\n", cfg.input_h));
    header.push_str(&format!("model.input_w = {}\n", cfg.input_w));
    header.push_str(&format!("model.channels = {channels}\n"));
    header.push_str(&format!("model.latent_dim = {}\n", cfg.latent_dim));
    header.push_str(&format!("model.activation = {}\n", cfg.activation.as_str()));
    header.push_str(&format!("model.seed = {}\n", cfg.seed));
    header.push_str(&format!("model.scale_init = {:?}\n", cfg.scale_init));
    header.push_str("binary:\n");
    w.write_all(header.as_bytes()).map_err(|e| GlbmError::io(path, e))?;

    let names = params.tensor_names();
    let tensors = params.flat();
    let io_err = |e| GlbmError::io(path, e);
    w.write_all(&(names.len() as u32).to_le_bytes()).map_err(io_err)?;
    for (name, data) in names.iter().zip(tensors) {
        w.write_all(&(name.len() as u32).to_le_bytes())
            .map_err(|e| GlbmError::io(path, e))?;
        w.write_all(name.as_bytes()).map_err(|e| GlbmError::io(path, e))?;
        w.write_all(&(data.len() as u64).to_le_bytes())
            .map_err(|e| GlbmError::io(path, e))?;
        for v in data {
            w.write_all(&v.to_le_bytes()).map_err(|e| GlbmError::io(path, e))?;
        }
    }
    w.flush().map_err(|e| GlbmError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, u64)> {
    let file = File::open(path).map_err(|e| GlbmError::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut header = Vec::new();
    // read text lines up to the binary marker
    loop {
        let mut line = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            r.read_exact(&mut byte).map_err(|e| GlbmError::io(path, e))?;
            if byte[0] == b'\n' {
                break;
            }
            line.push(byte[0]);
        }
        let text = String::from_utf8(line)
            .map_err(|_| GlbmError::Checkpoint("non-utf8 header line".into()))?;
        if text == "binary:" {
            break;
        }
        header.push(text);
    }
    if header.first().map(String::as_str) != Some(CKPT_MAGIC) {
        return Err(GlbmError::Checkpoint("bad checkpoint magic".into()));
    }
    let mut kv = std::collections::HashMap::new();
    for line in &header[1..] {
        if let Some((k, v)) = line.split_once('=') {
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let get = |key: &str| -> Result<&String> {
        kv.get(key)
            .ok_or_else(|| GlbmError::Checkpoint(format!("missing header key {key}")))
    };
    let parse_usize = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| GlbmError::Checkpoint(format!("bad value for {key}")))
    };
    let channels: Vec<usize> = get("model.channels")?
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| GlbmError::Checkpoint("bad model.channels".into()))?;
    let config = ModelConfig {
        input_h: parse_usize("model.input_h")?,
        input_w: parse_usize("model.input_w")?,
        channels,
        latent_dim: parse_usize("model.latent_dim")?,
        activation: Activation::parse(get("model.activation")?)?,
        seed: get("model.seed")?
            .parse()
            .map_err(|_| GlbmError::Checkpoint("bad model.seed".into()))?,
        scale_init: get("model.scale_init")?
            .parse()
            .map_err(|_| GlbmError::Checkpoint("bad model.scale_init".into()))?,
    };
    let epoch: u64 = get("epoch")?
        .parse()
        .map_err(|_| GlbmError::Checkpoint("bad epoch".into()))?;

    let mut params = init_params(&config)?;
    let names = params.tensor_names();

    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u32buf).map_err(|e| GlbmError::io(path, e))?;
    let count = u32::from_le_bytes(u32buf) as usize;
    if count != names.len() {
        return Err(GlbmError::Checkpoint(format!(
            "checkpoint has {count} tensors, model expects {}",
            names.len()
        )));
    }
    for (name, slot) in names.iter().zip(params.flat_mut()) {
        r.read_exact(&mut u32buf).map_err(|e| GlbmError::io(path, e))?;
        let nlen = u32::from_le_bytes(u32buf) as usize;
        let mut nbuf = vec![0u8; nlen];
        r.read_exact(&mut nbuf).map_err(|e| GlbmError::io(path, e))?;
        let found = String::from_utf8(nbuf)
            .map_err(|_| GlbmError::Checkpoint("non-utf8 tensor name".into()))?;
        if &found != name {
            return Err(GlbmError::Checkpoint(format!(
                "tensor order mismatch: expected {name}, found {found}"
            )));
        }
        r.read_exact(&mut u64buf).map_err(|e| GlbmError::io(path, e))?;
        let len = u64::from_le_bytes(u64buf) as usize;
        if len != slot.len() {
            return Err(GlbmError::Checkpoint(format!(
                "tensor {name} has {len} values, model expects {}",
                slot.len()
            )));
        }
        for v in slot.iter_mut() {
            r.read_exact(&mut u64buf).map_err(|e| GlbmError::io(path, e))?;
            *v = f64::from_le_bytes(u64buf);
        }
    }
    Ok((params, epoch))
}
