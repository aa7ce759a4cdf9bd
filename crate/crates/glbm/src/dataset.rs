//! Frame-directory ingestion and training batch assembly.
//!
//! A scene is a directory of numbered image files; all frames of one scene
//! form one clique in the neighborhood graph. Batches hold a fixed number
//! of clips, each a run of consecutive frames from one scene, decoded and
//! resized on demand.

use std::path::{Path, PathBuf};
use std::sync::mpsc;

use log::warn;
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{GlbmError, Result};
use crate::imgproc;

/// Directory layout of a dataset root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Layout {
    /// `root/<scene>/*.png`
    Flat,
    /// `root/<scene>/input/*.png`
    #[default]
    SbmStyle,
}

impl Layout {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(Layout::Flat),
            "sbm-style" => Ok(Layout::SbmStyle),
            other => Err(GlbmError::Config(format!(
                "unknown layout '{other}' (expected flat|sbm-style)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Layout::Flat => "flat",
            Layout::SbmStyle => "sbm-style",
        }
    }
}

/// One scene: an ordered list of readable frame paths.
#[derive(Debug, Clone)]
pub struct SceneDescriptor {
    pub scene_id: String,
    pub frame_paths: Vec<PathBuf>,
    /// (height, width) of the first readable frame.
    pub resolution: (usize, usize),
}

impl SceneDescriptor {
    pub fn frame_count(&self) -> usize {
        self.frame_paths.len()
    }
}

/// A contiguous block of frames from one scene, `[c, H, W, 3]` in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct FrameClip {
    pub scene_id: String,
    pub start_index: usize,
    pub frames: Array4<f64>,
}

impl FrameClip {
    pub fn len(&self) -> usize {
        self.frames.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A set of clips sampled for one optimization step.
#[derive(Debug, Clone)]
pub struct Batch {
    pub clips: Vec<FrameClip>,
    pub clique_sizes: Vec<usize>,
}

impl Batch {
    pub fn total_frames(&self) -> usize {
        self.clique_sizes.iter().sum()
    }
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png") | Some("jpg") | Some("jpeg")
    )
}

/// Enumerate scenes under `root`. Unreadable frames and empty scenes are
/// skipped with a warning; descriptors come back ordered by scene id.
pub fn scan_dataset(root: &Path, layout: Layout) -> Result<Vec<SceneDescriptor>> {
    if !root.is_dir() {
        return Err(GlbmError::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root not found"),
        ));
    }
    let mut scene_dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| GlbmError::io(root, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    scene_dirs.sort();

    let mut scenes = Vec::new();
    for dir in scene_dirs {
        let scene_id = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let frames_dir = match layout {
            Layout::Flat => dir.clone(),
            Layout::SbmStyle => dir.join("input"),
        };
        if !frames_dir.is_dir() {
            warn!("scene {scene_id}: no frame directory at {}", frames_dir.display());
            continue;
        }
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&frames_dir)
            .map_err(|e| GlbmError::io(&frames_dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file() && is_image_file(p))
            .collect();
        paths.sort();

        let mut readable = Vec::with_capacity(paths.len());
        let mut resolution = None;
        for p in paths {
            match image::image_dimensions(&p) {
                Ok((w, h)) => {
                    if resolution.is_none() {
                        resolution = Some((h as usize, w as usize));
                    }
                    readable.push(p);
                }
                Err(e) => warn!("scene {scene_id}: skipping unreadable frame {}: {e}", p.display()),
            }
        }
        if readable.is_empty() {
            warn!("scene {scene_id}: no readable frames, skipping scene");
            continue;
        }
        scenes.push(SceneDescriptor {
            scene_id,
            frame_paths: readable,
            resolution: resolution.unwrap(),
        });
    }
    scenes.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));
    Ok(scenes)
}

/// Decode `length` frames starting at `start`, bilinearly resized to
/// `target_size = (H, W)` and scaled to `[0, 1]`.
pub fn load_clip(
    scene: &SceneDescriptor,
    start: usize,
    length: usize,
    target_size: (usize, usize),
) -> Result<FrameClip> {
    if length == 0 {
        return Err(GlbmError::InvalidArgument("clip length must be >= 1".into()));
    }
    if start + length > scene.frame_count() {
        return Err(GlbmError::InvalidArgument(format!(
            "clip window [{start}, {}) exceeds scene '{}' with {} frames",
            start + length,
            scene.scene_id,
            scene.frame_count()
        )));
    }
    let (th, tw) = target_size;
    if th == 0 || tw == 0 {
        return Err(GlbmError::InvalidArgument("target size must be positive".into()));
    }
    let mut frames = Array4::zeros((length, th, tw, 3));
    for (i, path) in scene.frame_paths[start..start + length].iter().enumerate() {
        let img = imgproc::load_image(path)?;
        let resized = if img.dim() == (th, tw, 3) {
            img
        } else {
            imgproc::resize_bilinear(&img, th, tw)
        };
        frames.index_axis_mut(ndarray::Axis(0), i).assign(&resized);
    }
    debug_assert!(
        frames.iter().all(|&v| (0.0..=1.0).contains(&v)),
        "clip intensities must lie in [0, 1]"
    );
    Ok(FrameClip {
        scene_id: scene.scene_id.clone(),
        start_index: start,
        frames,
    })
}

/// Batch sampling configuration.
#[derive(Debug, Clone)]
pub struct BatchConfig {
    pub clips_per_batch: usize,
    pub clip_len: usize,
    pub target_size: (usize, usize),
    pub seed: u64,
    /// Cap on usable frames per scene; 0 means use all frames.
    pub max_frames_per_scene: usize,
}

/// Deterministic infinite stream of batches: each clip is a uniformly
/// random (scene, start) window, so one batch may repeat scenes.
pub struct BatchStream {
    scenes: Vec<SceneDescriptor>,
    eligible: Vec<usize>,
    cfg: BatchConfig,
    rng: ChaCha8Rng,
}

impl BatchStream {
    fn effective_len(&self, scene: &SceneDescriptor) -> usize {
        if self.cfg.max_frames_per_scene == 0 {
            scene.frame_count()
        } else {
            scene.frame_count().min(self.cfg.max_frames_per_scene)
        }
    }
}

pub fn make_batches(scenes: &[SceneDescriptor], cfg: &BatchConfig) -> Result<BatchStream> {
    if cfg.clips_per_batch == 0 || cfg.clip_len == 0 {
        return Err(GlbmError::Config("clips_per_batch and clip_len must be >= 1".into()));
    }
    let cap = cfg.max_frames_per_scene;
    let eligible: Vec<usize> = scenes
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            let n = if cap == 0 { s.frame_count() } else { s.frame_count().min(cap) };
            n >= cfg.clip_len
        })
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        return Err(GlbmError::Config(format!(
            "no scene has at least clip_len = {} frames",
            cfg.clip_len
        )));
    }
    for (i, s) in scenes.iter().enumerate() {
        if !eligible.contains(&i) {
            warn!("scene {} too short for clip_len {}, excluded", s.scene_id, cfg.clip_len);
        }
    }
    Ok(BatchStream {
        scenes: scenes.to_vec(),
        eligible,
        cfg: cfg.clone(),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    })
}

impl Iterator for BatchStream {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        let mut clips = Vec::with_capacity(self.cfg.clips_per_batch);
        let mut clique_sizes = Vec::with_capacity(self.cfg.clips_per_batch);
        for _ in 0..self.cfg.clips_per_batch {
            let pick = self.eligible[self.rng.random_range(0..self.eligible.len())];
            let scene = &self.scenes[pick];
            let span = self.effective_len(scene) - self.cfg.clip_len;
            let start = self.rng.random_range(0..=span);
            match load_clip(scene, start, self.cfg.clip_len, self.cfg.target_size) {
                Ok(clip) => {
                    clique_sizes.push(clip.len());
                    clips.push(clip);
                }
                Err(e) => return Some(Err(e)),
            }
        }
        Some(Ok(Batch { clips, clique_sizes }))
    }
}

/// Wrap a batch stream in a background prefetcher with a bounded buffer.
/// Emitted batches are immutable, so the handoff is the only synchronization.
pub fn prefetch<I>(stream: I, buffer: usize) -> impl Iterator<Item = Result<Batch>>
where
    I: Iterator<Item = Result<Batch>> + Send + 'static,
{
    let (tx, rx) = mpsc::sync_channel(buffer.max(1));
    std::thread::spawn(move || {
        for item in stream {
            if tx.send(item).is_err() {
                break;
            }
        }
    });
    rx.into_iter()
}
