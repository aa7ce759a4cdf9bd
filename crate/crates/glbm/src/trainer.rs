//! Training loop and inference: optimize the masked-VAE loss with Adam,
//! learning-rate scheduling, and gradient clipping; estimate backgrounds
//! from a trained model; subtract backgrounds to produce foreground masks.
//!
//! Determinism: batch sampling, noise, and initialization all derive from
//! seeds, and per-frame gradient contributions are accumulated over a fixed
//! chunk grid in index order, so a run is reproducible for any thread count.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::dataset::{make_batches, Batch, BatchConfig, SceneDescriptor};
use crate::error::{GlbmError, Result};
use crate::flow::{estimate_flow_gray, motion_mask, read_mask_cache, FlowField, MotionMask};
use crate::graph::{clique_adjacency, laplacian, prior_precision, PriorPrecision};
use crate::imgproc;
use crate::network::{
    decoder_backward_frame, decoder_forward_frame, encoder_backward_frame, encoder_forward_frame,
    init_params, load_checkpoint, save_checkpoint, ModelConfig, ModelGrads, ModelParams,
};
use crate::objective::{
    posterior_gradients, recon_gradient, total_loss, LossBreakdown, LossWeights,
};
use crate::posterior::{
    assemble_posterior, sample, sample_grad_scale, sample_mean_field, LatentSample, ScaleSemantics,
    StructuredPosterior,
};

/// Fixed number of gradient-accumulation chunks; reductions run in chunk
/// order so results do not depend on the worker count.
const GRAD_CHUNKS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    None,
    /// Multiply by `factor` every `every` epochs.
    Step { every: usize, factor: f64 },
    /// Multiply by `factor` after `patience` epochs without improvement of
    /// the epoch-mean total loss.
    Plateau { patience: usize, factor: f64 },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Plateau {
            patience: 10,
            factor: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub clips_per_batch: usize,
    pub clip_len: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub grad_clip_norm: f64,
    /// Prior regularizer.
    pub lambda: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub model: ModelConfig,
    /// Motion-mask threshold factor.
    pub kappa: f64,
    pub flow_levels: usize,
    pub flow_iterations: usize,
    pub max_frames_per_scene: usize,
    /// Checkpoint save interval in epochs.
    pub save_every: usize,
    /// Optional on-disk mask cache (one 0/255 PNG per frame).
    pub mask_dir: Option<PathBuf>,
    pub scale_semantics: ScaleSemantics,
    /// Sample with the mean-field fallback instead of the structured factor.
    pub mean_field: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            clips_per_batch: 3,
            clip_len: 40,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::default(),
            grad_clip_norm: 5.0,
            lambda: 1.0,
            weights: LossWeights::default(),
            seed: 7,
            model: ModelConfig::default(),
            kappa: 2.0,
            flow_levels: 4,
            flow_iterations: 3,
            max_frames_per_scene: 0,
            save_every: 50,
            mask_dir: None,
            scale_semantics: ScaleSemantics::default(),
            mean_field: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.clips_per_batch == 0 || self.clip_len == 0 {
            return Err(GlbmError::Config("epochs, clips, and clip length must be positive".into()));
        }
        if self.learning_rate <= 0.0 || self.grad_clip_norm <= 0.0 {
            return Err(GlbmError::Config("learning rate and clip norm must be positive".into()));
        }
        if self.lambda <= 0.0 {
            return Err(GlbmError::Config("prior lambda must be positive".into()));
        }
        self.weights.validate()?;
        self.model.validate()
    }

    fn target_size(&self) -> (usize, usize) {
        (self.model.input_h, self.model.input_w)
    }
}

/// One optimization-step record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub epoch: usize,
    pub step: u64,
    pub loss: LossBreakdown,
    pub lr: f64,
    /// Global gradient norm after clipping.
    pub grad_norm: f64,
    pub wall_ms: u128,
}

/// Per-step records with a monotone step counter.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    fn push(&mut self, rec: TrainRecord) {
        if let Some(last) = self.records.last() {
            debug_assert!(rec.step > last.step, "step counter must be monotone");
        }
        self.records.push(rec);
    }

    /// Mean of the raw (unweighted) per-clique nuclear norm over the final
    /// epoch's steps.
    pub fn mean_nuclear_last_epoch(&self, clips_per_batch: usize) -> Option<f64> {
        let last_epoch = self.records.last()?.epoch;
        let vals: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.epoch == last_epoch)
            .map(|r| r.loss.nuclear / clips_per_batch as f64)
            .collect();
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// One `key=value` record per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!(
                "epoch={} step={} recon={:?} kl={:?} sparsity={:?} nuclear={:?} total={:?} lr={:?} grad_norm={:?} wall_ms={}\n",
                r.epoch, r.step, r.loss.recon, r.loss.kl, r.loss.sparsity, r.loss.nuclear,
                r.loss.total, r.lr, r.grad_norm, r.wall_ms
            ));
        }
        std::fs::write(path, out).map_err(|e| GlbmError::io(path, e))
    }
}

/// Adam optimizer state over the flattened parameter tensors.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(params: &ModelParams) -> Self {
        let shapes: Vec<usize> = params.flat().iter().map(|s| s.len()).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelGrads, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for ((slot, grad), (m, v)) in params
            .flat_mut()
            .into_iter()
            .zip(grads.flat())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..slot.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                slot[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Scale gradients in place so the global norm is at most `max_norm`.
/// Returns the post-clip norm.
pub fn clip_gradients(grads: &mut ModelGrads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale_by(max_norm / norm);
        max_norm
    } else {
        norm
    }
}

/// Compute the per-scene motion mask at `size`, preferring the on-disk
/// cache when it matches.
pub fn scene_motion_mask(
    scene: &SceneDescriptor,
    cap: usize,
    size: (usize, usize),
    levels: usize,
    iterations: usize,
    kappa: f64,
    mask_dir: Option<&Path>,
) -> Result<MotionMask> {
    let n = if cap == 0 {
        scene.frame_count()
    } else {
        scene.frame_count().min(cap)
    };
    if let Some(dir) = mask_dir {
        if let Some(moving) = read_mask_cache(dir, scene, size)? {
            let moving = moving.slice_move(ndarray::s![0..n, .., ..]);
            return Ok(MotionMask { moving, tau: 0.0 });
        }
    }
    if n < 2 {
        warn!("scene {}: single frame, motion mask is all-static", scene.scene_id);
        return Ok(MotionMask {
            moving: Array3::zeros((n, size.0, size.1)),
            tau: 0.0,
        });
    }
    let mut flows: Vec<FlowField> = Vec::with_capacity(n - 1);
    let mut prev = imgproc::to_gray(&load_resized(scene, 0, size)?);
    for t in 1..n {
        let cur = imgproc::to_gray(&load_resized(scene, t, size)?);
        flows.push(estimate_flow_gray(&prev, &cur, levels, iterations)?);
        prev = cur;
    }
    motion_mask(&flows, kappa)
}

fn load_resized(scene: &SceneDescriptor, index: usize, size: (usize, usize)) -> Result<Array3<f64>> {
    let img = imgproc::load_image(&scene.frame_paths[index])?;
    Ok(if img.dim() == (size.0, size.1, 3) {
        img
    } else {
        imgproc::resize_bilinear(&img, size.0, size.1)
    })
}

/// Mutable training state; [`train`] drives it, tests can poke at it.
pub struct TrainState {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub adam: Adam,
    pub lr: f64,
    masks: HashMap<String, Array3<u8>>,
    priors: HashMap<Vec<usize>, PriorPrecision>,
    noise_rng: ChaCha8Rng,
    step: u64,
}

impl TrainState {
    pub fn new(config: TrainConfig, scenes: &[SceneDescriptor]) -> Result<Self> {
        config.validate()?;
        if scenes.is_empty() {
            return Err(GlbmError::Config("no scenes to train on".into()));
        }
        let params = init_params(&config.model)?;
        let adam = Adam::new(&params);
        let size = config.target_size();
        let mut masks = HashMap::new();
        for scene in scenes {
            let mask = scene_motion_mask(
                scene,
                config.max_frames_per_scene,
                size,
                config.flow_levels,
                config.flow_iterations,
                config.kappa,
                config.mask_dir.as_deref(),
            )?;
            info!(
                "scene {}: motion mask tau={:.4}, moving fraction {:.4}",
                scene.scene_id,
                mask.tau,
                mask.moving.iter().map(|&m| m as f64).sum::<f64>() / mask.moving.len() as f64
            );
            masks.insert(scene.scene_id.clone(), mask.moving);
        }
        let noise_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e3779b97f4a7c15));
        Ok(TrainState {
            lr: config.learning_rate,
            config,
            params,
            adam,
            masks,
            priors: HashMap::new(),
            noise_rng,
            step: 0,
        })
    }

    fn prior_for(&mut self, clique_sizes: &[usize]) -> Result<PriorPrecision> {
        if !self.priors.contains_key(clique_sizes) {
            let q = prior_precision(
                &laplacian(&clique_adjacency(clique_sizes)?),
                self.config.lambda,
            )?;
            self.priors.insert(clique_sizes.to_vec(), q);
        }
        Ok(self.priors[clique_sizes].clone())
    }

    /// Concatenate clips and their mask slices into batch-level tensors.
    fn gather_batch(&self, batch: &Batch) -> Result<(Array4<f64>, MotionMask)> {
        let (h, w) = self.config.target_size();
        let n = batch.total_frames();
        let mut frames = Array4::zeros((n, h, w, 3));
        let mut moving = Array3::zeros((n, h, w));
        let mut off = 0;
        for clip in &batch.clips {
            let scene_mask = self.masks.get(&clip.scene_id).ok_or_else(|| {
                GlbmError::InvalidArgument(format!("no motion mask for scene {}", clip.scene_id))
            })?;
            for t in 0..clip.len() {
                frames
                    .index_axis_mut(Axis(0), off + t)
                    .assign(&clip.frames.index_axis(Axis(0), t));
                moving
                    .index_axis_mut(Axis(0), off + t)
                    .assign(&scene_mask.index_axis(Axis(0), clip.start_index + t));
            }
            off += clip.len();
        }
        // batch-level mask; tau is a per-scene quantity and not meaningful here
        Ok((frames, MotionMask { moving, tau: 0.0 }))
    }

    /// One optimization step. Returns the loss breakdown and post-clip
    /// gradient norm.
    pub fn step_batch(&mut self, batch: &Batch, epoch: usize) -> Result<TrainRecord> {
        let start = Instant::now();
        let (frames, mask) = self.gather_batch(batch)?;
        let n = frames.dim().0;
        let d = self.config.model.latent_dim;

        // encoder forward, fixed chunk grid
        let chunk = n.div_ceil(GRAD_CHUNKS.min(n));
        let enc_results: Vec<Vec<(Array1<f64>, Array1<f64>, crate::network::EncCache)>> = (0..n)
            .collect::<Vec<_>>()
            .par_chunks(chunk)
            .map(|idxs| {
                idxs.iter()
                    .map(|&i| encoder_forward_frame(&self.params, frames.index_axis(Axis(0), i)))
                    .collect()
            })
            .collect();
        let mut mu = Array2::zeros((n, d));
        let mut scale_raw = Array2::zeros((n, d));
        let mut enc_caches = Vec::with_capacity(n);
        for (i, (m, s, cache)) in enc_results.into_iter().flatten().enumerate() {
            mu.row_mut(i).assign(&m);
            scale_raw.row_mut(i).assign(&s);
            enc_caches.push(cache);
        }

        let scale_eff = self.config.scale_semantics.effective(&scale_raw);
        let semantics_jac = self.config.scale_semantics.effective_jacobian(&scale_raw);
        let mean_field = self.config.mean_field;
        let weights = self.config.weights;
        let q = self.prior_for(&batch.clique_sizes)?;
        let post = assemble_posterior(mu.clone(), scale_eff, q)?;

        let noise = Array2::from_shape_fn((n, d), |_| self.noise_rng.sample(StandardNormal));
        let z = if mean_field {
            sample_mean_field(&post, &noise)?
        } else {
            sample(&post, &noise)?
        };

        // decoder forward
        let dec_results: Vec<Vec<(Array3<f64>, crate::network::DecCache)>> = (0..n)
            .collect::<Vec<_>>()
            .par_chunks(chunk)
            .map(|idxs| {
                idxs.iter()
                    .map(|&i| decoder_forward_frame(&self.params, z.z.row(i)))
                    .collect()
            })
            .collect();
        let mut recon = Array4::zeros(frames.dim());
        let mut dec_caches = Vec::with_capacity(n);
        for (i, (out, cache)) in dec_results.into_iter().flatten().enumerate() {
            recon.index_axis_mut(Axis(0), i).assign(&out);
            dec_caches.push(cache);
        }

        let loss = match total_loss(&frames, &recon, &post, q, &mask, &weights) {
            Ok(l) => l,
            Err(e) => {
                self.dump_diagnostic(batch, &format!("{e}"))?;
                return Err(e);
            }
        };
        if !loss.total.is_finite() {
            self.dump_diagnostic(batch, "non-finite loss")?;
            return Err(GlbmError::Numeric("non-finite loss".into()));
        }

        // gradients of the loss w.r.t. reconstruction and posterior params
        let grad_recon = recon_gradient(&frames, &recon, &mask, weights.beta)?;
        let (mut grad_mu, grad_scale_post) = posterior_gradients(&post, q, &weights)?;

        // decoder backward: parameter grads per chunk + grad_z rows
        let dec_backward: Vec<(ModelGrads, Vec<(usize, Array1<f64>)>)> = (0..n)
            .collect::<Vec<_>>()
            .par_chunks(chunk)
            .map(|idxs| {
                let mut grads = ModelGrads::zeros(&self.params);
                let mut gz = Vec::with_capacity(idxs.len());
                for &i in idxs {
                    let g = grad_recon.index_axis(Axis(0), i).to_owned();
                    let gzi = decoder_backward_frame(&self.params, &dec_caches[i], &g, &mut grads);
                    gz.push((i, gzi));
                }
                (grads, gz)
            })
            .collect();
        let mut total_grads = ModelGrads::zeros(&self.params);
        let mut grad_z = Array2::zeros((n, d));
        for (g, gz) in dec_backward {
            total_grads.add_assign(&g);
            for (i, row) in gz {
                grad_z.row_mut(i).assign(&row);
            }
        }

        // chain z -> (mu, scale): dz/dmu = I, dz/ds = -(z - mu)/s
        grad_mu += &grad_z;
        let grad_scale_eff = grad_scale_post + sample_grad_scale(&post, &z, &grad_z);
        let grad_scale_raw = grad_scale_eff * &semantics_jac;

        // encoder backward
        let enc_backward: Vec<ModelGrads> = (0..n)
            .collect::<Vec<_>>()
            .par_chunks(chunk)
            .map(|idxs| {
                let mut grads = ModelGrads::zeros(&self.params);
                for &i in idxs {
                    encoder_backward_frame(
                        &self.params,
                        &enc_caches[i],
                        grad_mu.row(i),
                        grad_scale_raw.row(i),
                        &mut grads,
                    );
                }
                grads
            })
            .collect();
        for g in enc_backward {
            total_grads.add_assign(&g);
        }

        let grad_norm = clip_gradients(&mut total_grads, self.config.grad_clip_norm);
        debug_assert!(grad_norm <= self.config.grad_clip_norm + 1e-6);
        self.adam.step(&mut self.params, &total_grads, self.lr);

        self.step += 1;
        Ok(TrainRecord {
            epoch,
            step: self.step,
            loss,
            lr: self.lr,
            grad_norm,
            wall_ms: start.elapsed().as_millis(),
        })
    }

    fn dump_diagnostic(&self, batch: &Batch, reason: &str) -> Result<()> {
        let mut text = format!("training aborted: {reason}\nstep = {}\n", self.step);
        for clip in &batch.clips {
            text.push_str(&format!(
                "clip scene={} start={} len={}\n",
                clip.scene_id,
                clip.start_index,
                clip.len()
            ));
        }
        warn!("{text}");
        Ok(())
    }
}

/// Train on the given scenes; checkpoints and the step log land in
/// `out_dir`. Returns the final parameters and the full log.
pub fn train(
    config: &TrainConfig,
    scenes: &[SceneDescriptor],
    out_dir: &Path,
) -> Result<(ModelParams, TrainLog)> {
    std::fs::create_dir_all(out_dir).map_err(|e| GlbmError::io(out_dir, e))?;
    let mut state = TrainState::new(config.clone(), scenes)?;
    let cap = config.max_frames_per_scene;
    let batch_cfg = BatchConfig {
        clips_per_batch: config.clips_per_batch,
        clip_len: config.clip_len,
        target_size: config.target_size(),
        seed: config.seed,
        max_frames_per_scene: cap,
    };
    let mut stream = make_batches(scenes, &batch_cfg)?;
    let total_frames: usize = scenes
        .iter()
        .map(|s| {
            if cap == 0 {
                s.frame_count()
            } else {
                s.frame_count().min(cap)
            }
        })
        .sum();
    let steps_per_epoch = (total_frames / (config.clips_per_batch * config.clip_len)).max(1);

    let mut log = TrainLog::default();
    let mut best = f64::INFINITY;
    let mut stagnant = 0usize;
    let ckpt_path = out_dir.join("checkpoint.ckpt");
    for epoch in 1..=config.epochs {
        let mut epoch_total = 0.0;
        for _ in 0..steps_per_epoch {
            let batch = stream
                .next()
                .expect("batch stream is infinite")
                .map_err(|e| e)?;
            let rec = state.step_batch(&batch, epoch)?;
            epoch_total += rec.loss.total;
            log.push(rec);
        }
        let epoch_mean = epoch_total / steps_per_epoch as f64;

        match config.lr_schedule {
            LrSchedule::None => {}
            LrSchedule::Step { every, factor } => {
                if every > 0 && epoch % every == 0 {
                    state.lr *= factor;
                }
            }
            LrSchedule::Plateau { patience, factor } => {
                if epoch_mean < best - 1e-12 {
                    best = epoch_mean;
                    stagnant = 0;
                } else {
                    stagnant += 1;
                    if stagnant >= patience {
                        state.lr *= factor;
                        stagnant = 0;
                        info!("epoch {epoch}: plateau, lr -> {}", state.lr);
                    }
                }
            }
        }

        if epoch % config.save_every == 0 || epoch == config.epochs {
            save_checkpoint(&state.params, epoch as u64, &ckpt_path)?;
        }
    }
    log.save(&out_dir.join("train.log"))?;
    Ok((state.params, log))
}

/// Aggregation mode of [`estimate_background`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackgroundMode {
    PerFrame,
    Median,
}

impl BackgroundMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "per_frame" => Ok(BackgroundMode::PerFrame),
            "median" => Ok(BackgroundMode::Median),
            other => Err(GlbmError::Config(format!(
                "unknown background mode '{other}' (expected per_frame|median)"
            ))),
        }
    }
}

/// Run the trained model over all frames of a scene using the posterior
/// mean (no sampling) and return backgrounds at the scene's resolution.
/// `Median` aggregates pixelwise into a single image.
pub fn estimate_background(
    params: &ModelParams,
    scene: &SceneDescriptor,
    mode: BackgroundMode,
) -> Result<Vec<Array3<f64>>> {
    let size = (params.config.input_h, params.config.input_w);
    let n = scene.frame_count();
    let outputs: Vec<Array3<f64>> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(8)
        .map(|idxs| {
            idxs.iter()
                .map(|&i| {
                    let frame = load_resized(scene, i, size)?;
                    let (mu, _scale, _) = encoder_forward_frame(params, frame.view());
                    let (out, _) = decoder_forward_frame(params, mu.view());
                    debug_assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
                    if scene.resolution != size {
                        Ok(imgproc::resize_bilinear(&out, scene.resolution.0, scene.resolution.1))
                    } else {
                        Ok(out)
                    }
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    match mode {
        BackgroundMode::PerFrame => Ok(outputs),
        BackgroundMode::Median => {
            let (h, w, c) = outputs[0].dim();
            let mut median = Array3::zeros((h, w, c));
            let mut buf = Vec::with_capacity(outputs.len());
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        buf.clear();
                        buf.extend(outputs.iter().map(|o| o[[y, x, ch]]));
                        buf.sort_by(|a, b| a.partial_cmp(b).unwrap());
                        let m = buf.len();
                        median[[y, x, ch]] = if m % 2 == 1 {
                            buf[m / 2]
                        } else {
                            0.5 * (buf[m / 2 - 1] + buf[m / 2])
                        };
                    }
                }
            }
            Ok(vec![median])
        }
    }
}

/// Load a checkpoint and estimate a scene's background (CLI entry point).
pub fn estimate_background_from_ckpt(
    ckpt: &Path,
    scene: &SceneDescriptor,
    mode: BackgroundMode,
) -> Result<Vec<Array3<f64>>> {
    let (params, _) = load_checkpoint(ckpt)?;
    estimate_background(&params, scene, mode)
}

/// Thresholding rule for background subtraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    /// Fixed threshold in [0, 1] intensity units.
    Fixed(f64),
    /// Otsu's method on each frame's difference histogram.
    Otsu,
}

/// Classify pixels as foreground by thresholding the gray-level absolute
/// difference between each frame and its background. `backgrounds` holds
/// either one shared image or one per frame.
pub fn subtract(
    frames: &Array4<f64>,
    backgrounds: &[Array3<f64>],
    threshold: Threshold,
    postproc: bool,
) -> Result<Vec<Array2<u8>>> {
    let (n, h, w, _) = frames.dim();
    if backgrounds.is_empty() || (backgrounds.len() != 1 && backgrounds.len() != n) {
        return Err(GlbmError::InvalidArgument(format!(
            "expected 1 or {n} backgrounds, got {}",
            backgrounds.len()
        )));
    }
    if backgrounds.iter().any(|b| b.dim() != (h, w, 3)) {
        return Err(GlbmError::InvalidArgument("background resolution mismatch".into()));
    }
    let bg_grays: Vec<Array2<f64>> = backgrounds.iter().map(imgproc::to_gray).collect();
    let mut masks = Vec::with_capacity(n);
    for i in 0..n {
        let frame_gray = imgproc::to_gray(&frames.index_axis(Axis(0), i).to_owned());
        let bg = &bg_grays[if bg_grays.len() == 1 { 0 } else { i }];
        let diff = ndarray::Zip::from(&frame_gray)
            .and(bg)
            .map_collect(|&a, &b| (a - b).abs());
        let t = match threshold {
            Threshold::Fixed(t) => t,
            Threshold::Otsu => imgproc::otsu_threshold(diff.iter().copied()),
        };
        let mut mask = diff.mapv(|d| (d > t) as u8);
        if postproc {
            mask = imgproc::median_filter_3x3(&mask);
        }
        masks.push(mask);
    }
    Ok(masks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{scan_dataset, Layout};
    use crate::nn::Activation;
    use crate::synth::{synth_generate, SynthSpec};
    use tempfile::TempDir;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            input_h: 32,
            input_w: 32,
            channels: vec![8, 16],
            latent_dim: 8,
            activation: Activation::LeakyRelu,
            seed: 5,
            scale_init: 10.0,
        }
    }

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            clips_per_batch: 2,
            clip_len: 4,
            learning_rate: 2e-3,
            lr_schedule: LrSchedule::None,
            grad_clip_norm: 5.0,
            lambda: 0.1,
            seed: 9,
            model: tiny_model(),
            flow_levels: 3,
            flow_iterations: 2,
            save_every: 1000,
            ..TrainConfig::default()
        }
    }

    fn tiny_dataset(dir: &Path) -> Vec<SceneDescriptor> {
        let spec = SynthSpec {
            scenes: 3,
            frames: 12,
            height: 32,
            width: 32,
            objects: 1,
            object_size: 8,
            velocity: 2.0,
            seed: 31,
            ..SynthSpec::default()
        };
        synth_generate(&spec, dir).unwrap();
        scan_dataset(dir, Layout::SbmStyle).unwrap()
    }

    #[test]
    fn default_config_echoes_training_recipe() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.clips_per_batch, 3);
        assert_eq!(cfg.clip_len, 40);
        assert_eq!(cfg.epochs, 500);
        assert_eq!(cfg.learning_rate, 1e-3);
        assert!(matches!(cfg.lr_schedule, LrSchedule::Plateau { .. }));
        assert!(cfg.grad_clip_norm > 0.0);
    }

    #[test]
    fn smoke_train_reduces_reconstruction() {
        let tmp = TempDir::new().unwrap();
        let scenes = tiny_dataset(&tmp.path().join("data"));
        let mut cfg = tiny_train_config();
        // 12*3 frames / (2*4 per batch) = 4 steps per epoch; 50 epochs = 200 steps
        cfg.epochs = 50;
        let out = tmp.path().join("run");
        let (_params, log) = train(&cfg, &scenes, &out).unwrap();
        assert_eq!(log.records.len(), 200);
        let first = log.records.first().unwrap().loss.recon;
        let last = log.records.last().unwrap().loss.recon;
        assert!(
            last < first,
            "reconstruction did not improve: {first} -> {last}"
        );
        assert!(out.join("checkpoint.ckpt").is_file());
        assert!(out.join("train.log").is_file());
    }

    #[test]
    fn training_is_deterministic() {
        let tmp = TempDir::new().unwrap();
        let scenes = tiny_dataset(&tmp.path().join("data"));
        let cfg = tiny_train_config();
        let (_p1, log1) = train(&cfg, &scenes, &tmp.path().join("a")).unwrap();
        let (_p2, log2) = train(&cfg, &scenes, &tmp.path().join("b")).unwrap();
        assert_eq!(log1.records.len(), log2.records.len());
        for (a, b) in log1.records.iter().zip(log2.records.iter()) {
            assert_eq!(a.loss.total.to_bits(), b.loss.total.to_bits());
        }
    }

    #[test]
    fn gradient_clipping_contract_holds() {
        let tmp = TempDir::new().unwrap();
        let scenes = tiny_dataset(&tmp.path().join("data"));
        let mut cfg = tiny_train_config();
        cfg.grad_clip_norm = 0.01; // force clipping on every step
        cfg.epochs = 2;
        let (_p, log) = train(&cfg, &scenes, &tmp.path().join("run")).unwrap();
        for r in &log.records {
            assert!(r.grad_norm <= cfg.grad_clip_norm + 1e-6);
        }
    }

    #[test]
    fn checkpoint_round_trip_reproduces_outputs() {
        let tmp = TempDir::new().unwrap();
        let scenes = tiny_dataset(&tmp.path().join("data"));
        let cfg = tiny_train_config();
        let out = tmp.path().join("run");
        let mut cfg2 = cfg.clone();
        cfg2.save_every = 1;
        let (params, _) = train(&cfg2, &scenes, &out).unwrap();
        let (loaded, _) = load_checkpoint(&out.join("checkpoint.ckpt")).unwrap();
        let a = estimate_background(&params, &scenes[0], BackgroundMode::Median).unwrap();
        let b = estimate_background(&loaded, &scenes[0], BackgroundMode::Median).unwrap();
        for (x, y) in a[0].iter().zip(b[0].iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn nan_parameters_abort_with_error() {
        let tmp = TempDir::new().unwrap();
        let scenes = tiny_dataset(&tmp.path().join("data"));
        let cfg = tiny_train_config();
        let mut state = TrainState::new(cfg.clone(), &scenes).unwrap();
        for s in state.params.flat_mut() {
            for v in s.iter_mut() {
                *v = f64::NAN;
            }
        }
        let batch_cfg = BatchConfig {
            clips_per_batch: cfg.clips_per_batch,
            clip_len: cfg.clip_len,
            target_size: (32, 32),
            seed: 1,
            max_frames_per_scene: 0,
        };
        let batch = make_batches(&scenes, &batch_cfg).unwrap().next().unwrap().unwrap();
        assert!(state.step_batch(&batch, 1).is_err());
    }

    #[test]
    fn constant_scene_gives_identical_backgrounds() {
        let tmp = TempDir::new().unwrap();
        // constant-color scene
        let dir = tmp.path().join("data/s0/input");
        std::fs::create_dir_all(&dir).unwrap();
        for t in 0..4 {
            image::RgbImage::from_pixel(32, 32, image::Rgb([90, 120, 150]))
                .save(dir.join(format!("{t:06}.png")))
                .unwrap();
        }
        let scenes = scan_dataset(&tmp.path().join("data"), Layout::SbmStyle).unwrap();
        let params = init_params(&tiny_model()).unwrap();
        let outs = estimate_background(&params, &scenes[0], BackgroundMode::PerFrame).unwrap();
        assert_eq!(outs.len(), 4);
        for o in &outs[1..] {
            for (a, b) in o.iter().zip(outs[0].iter()) {
                assert_eq!(a, b);
            }
        }
        // median of identical outputs is that output
        let med = estimate_background(&params, &scenes[0], BackgroundMode::Median).unwrap();
        for (a, b) in med[0].iter().zip(outs[0].iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn subtract_perfect_background_is_empty() {
        let bg = Array3::from_elem((16, 16, 3), 0.5);
        let mut frames = Array4::zeros((3, 16, 16, 3));
        for i in 0..3 {
            frames.index_axis_mut(Axis(0), i).assign(&bg);
        }
        let masks = subtract(&frames, &[bg], Threshold::Fixed(25.0 / 255.0), false).unwrap();
        for m in &masks {
            assert_eq!(m.sum(), 0);
        }
    }

    #[test]
    fn subtract_fixed_threshold_recovers_exact_square() {
        let bg = Array3::from_elem((32, 32, 3), 0.3);
        let mut frame = bg.clone();
        for y in 10..20 {
            for x in 5..15 {
                for c in 0..3 {
                    frame[[y, x, c]] = 0.9;
                }
            }
        }
        let mut frames = Array4::zeros((1, 32, 32, 3));
        frames.index_axis_mut(Axis(0), 0).assign(&frame);
        let masks = subtract(&frames, &[bg.clone()], Threshold::Fixed(25.0 / 255.0), false).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let expect = (10..20).contains(&y) && (5..15).contains(&x);
                assert_eq!(masks[0][[y, x]] == 1, expect, "pixel ({y},{x})");
            }
        }
        // otsu on the same bimodal difference finds the square within a
        // 1 px boundary band
        let otsu_masks = subtract(&frames, &[bg], Threshold::Otsu, false).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let inner = (11..19).contains(&y) && (6..14).contains(&x);
                let outer = (9..21).contains(&y) && (4..16).contains(&x);
                let m = otsu_masks[0][[y, x]] == 1;
                if inner {
                    assert!(m, "interior pixel ({y},{x}) missing");
                }
                if !outer {
                    assert!(!m, "exterior pixel ({y},{x}) set");
                }
            }
        }
    }

    #[test]
    fn subtract_validates_background_count() {
        let frames = Array4::zeros((3, 8, 8, 3));
        let bg = Array3::zeros((8, 8, 3));
        assert!(subtract(&frames, &[bg.clone(), bg], Threshold::Otsu, false).is_err());
    }
}
