//! Deterministic synthetic video generator: known backgrounds, moving
//! foreground objects with exact masks, optional camera jitter and
//! illumination drift. This is the ground-truth source for the end-to-end
//! tests, since real benchmark datasets have no exact desk-scale oracle.
//!
//! Output layout per scene (sbm-style):
//!
//! ```text
//! out/s0/input/000000.png ...
//! out/s0/GT_background/background.png
//! out/s0/GT_masks/000000.png ...
//! out/manifest.txt
//! ```

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{GlbmError, Result};
use crate::imgproc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BackgroundKind {
    #[default]
    Gradient,
    Texture,
}

impl BackgroundKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gradient" => Ok(BackgroundKind::Gradient),
            "texture" => Ok(BackgroundKind::Texture),
            other => Err(GlbmError::Config(format!(
                "unknown background kind '{other}' (expected gradient|texture)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            BackgroundKind::Gradient => "gradient",
            BackgroundKind::Texture => "texture",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub scenes: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub background: BackgroundKind,
    /// Upper bound on moving objects per scene; each scene draws a count in
    /// `1..=objects` (0 disables foreground entirely).
    pub objects: usize,
    /// Square side / disk diameter in pixels.
    pub object_size: usize,
    /// Speed in px/frame.
    pub velocity: f64,
    /// Base object intensity in [0, 1].
    pub intensity: f64,
    /// Max global-translation jitter in px (integer shifts).
    pub jitter: usize,
    /// Sinusoidal illumination drift amplitude (fraction of intensity).
    pub drift: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            scenes: 3,
            frames: 60,
            height: 96,
            width: 96,
            background: BackgroundKind::Gradient,
            objects: 2,
            object_size: 14,
            velocity: 2.5,
            intensity: 0.9,
            jitter: 0,
            drift: 0.0,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.scenes == 0 || self.frames == 0 || self.height < 8 || self.width < 8 {
            return Err(GlbmError::Config("synthetic spec too small".into()));
        }
        if !self.velocity.is_finite() || !self.drift.is_finite() {
            return Err(GlbmError::Config("velocity and drift must be finite".into()));
        }
        let fg_area = (self.objects * self.object_size * self.object_size) as f64;
        if fg_area > 0.3 * (self.height * self.width) as f64 {
            return Err(GlbmError::Config(format!(
                "foreground area fraction {} exceeds 0.3",
                fg_area / (self.height * self.width) as f64
            )));
        }
        if self.object_size as usize + 2 * self.jitter >= self.height.min(self.width) {
            return Err(GlbmError::Config("object size plus jitter exceeds frame".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect,
    Disk,
}

#[derive(Debug, Clone)]
struct MovingObject {
    shape: Shape,
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    size: f64,
    color: [f64; 3],
    alt_color: [f64; 3],
}

impl MovingObject {
    /// Advance with reflection so the object stays fully inside the frame.
    fn step(&mut self, h: f64, w: f64) {
        let half = self.size / 2.0;
        self.x += self.vx;
        self.y += self.vy;
        if self.x - half < 0.0 {
            self.x = 2.0 * half - self.x;
            self.vx = -self.vx;
        }
        if self.x + half > w {
            self.x = 2.0 * (w - half) - self.x;
            self.vx = -self.vx;
        }
        if self.y - half < 0.0 {
            self.y = 2.0 * half - self.y;
            self.vy = -self.vy;
        }
        if self.y + half > h {
            self.y = 2.0 * (h - half) - self.y;
            self.vy = -self.vy;
        }
    }

    fn covers(&self, y: usize, x: usize) -> bool {
        let cx = self.x.round();
        let cy = self.y.round();
        let half = (self.size / 2.0).round();
        match self.shape {
            Shape::Rect => {
                let dx = x as f64 - (cx - half);
                let dy = y as f64 - (cy - half);
                dx >= 0.0 && dx < self.size && dy >= 0.0 && dy < self.size
            }
            Shape::Disk => {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                dx * dx + dy * dy <= half * half
            }
        }
    }

    /// Two-tone fill so the objects carry internal texture for the flow
    /// estimator.
    fn color_at(&self, y: usize, x: usize) -> [f64; 3] {
        if ((x / 3) + (y / 3)) % 2 == 0 {
            self.color
        } else {
            self.alt_color
        }
    }
}

/// In-memory truth for one scene.
pub struct SceneTruth {
    pub background: Array3<f64>,
    pub frames: Vec<Array3<f64>>,
    pub masks: Vec<Array2<u8>>,
    pub object_count: usize,
}

fn scene_background(spec: &SynthSpec, rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array3<f64> {
    match spec.background {
        BackgroundKind::Gradient => {
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (gy, gx) = angle.sin_cos();
            let c0: [f64; 3] = [
                rng.random_range(0.15..0.5),
                rng.random_range(0.15..0.5),
                rng.random_range(0.15..0.5),
            ];
            let c1: [f64; 3] = [
                rng.random_range(0.5..0.85),
                rng.random_range(0.5..0.85),
                rng.random_range(0.5..0.85),
            ];
            let diag = (h * h + w * w) as f64;
            Array3::from_shape_fn((h, w, 3), |(y, x, ch)| {
                let t = 0.5 + (x as f64 * gx + y as f64 * gy) / diag.sqrt();
                let t = t.clamp(0.0, 1.0);
                c0[ch] + (c1[ch] - c0[ch]) * t
            })
        }
        BackgroundKind::Texture => {
            let mut img = Array3::zeros((h, w, 3));
            for ch in 0..3 {
                let noise = Array2::from_shape_fn((h, w), |_| rng.random_range(0.0..1.0));
                let smooth = imgproc::gaussian_blur(&noise, 3.0);
                let lo = smooth.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = smooth.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let span = (hi - lo).max(1e-9);
                for y in 0..h {
                    for x in 0..w {
                        img[[y, x, ch]] = 0.2 + 0.6 * (smooth[[y, x]] - lo) / span;
                    }
                }
            }
            img
        }
    }
}

/// Generate one scene deterministically; scene `index` derives its own RNG
/// stream from the master seed.
pub fn synth_scene(spec: &SynthSpec, index: usize) -> Result<SceneTruth> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1 + index as u64 * 7919));
    let (h, w) = (spec.height, spec.width);
    let pad = spec.jitter;
    // render on a padded canvas so jitter crops never interpolate
    let canvas = scene_background(spec, &mut rng, h + 2 * pad, w + 2 * pad);
    let background = Array3::from_shape_fn((h, w, 3), |(y, x, c)| canvas[[y + pad, x + pad, c]]);

    let object_count = if spec.objects == 0 {
        0
    } else {
        rng.random_range(1..=spec.objects)
    };
    let mut objects: Vec<MovingObject> = (0..object_count)
        .map(|k| {
            let size = spec.object_size as f64;
            let half = size / 2.0;
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let tint = rng.random_range(-0.15..0.15);
            let base = (spec.intensity + tint).clamp(0.05, 0.95);
            MovingObject {
                shape: if k % 2 == 0 { Shape::Rect } else { Shape::Disk },
                x: rng.random_range(half..(w as f64 - half)),
                y: rng.random_range(half..(h as f64 - half)),
                vx: spec.velocity * angle.cos(),
                vy: spec.velocity * angle.sin(),
                size,
                color: [base, (base * 0.8).clamp(0.05, 0.95), (base * 0.6).clamp(0.05, 0.95)],
                alt_color: [
                    (base * 0.45).clamp(0.05, 0.95),
                    (base * 0.4).clamp(0.05, 0.95),
                    (base * 0.9).clamp(0.05, 0.95),
                ],
            }
        })
        .collect();

    let mut frames = Vec::with_capacity(spec.frames);
    let mut masks = Vec::with_capacity(spec.frames);
    let period = spec.frames.max(2) as f64;
    for t in 0..spec.frames {
        let (jx, jy) = if pad > 0 {
            (
                rng.random_range(-(pad as i64)..=pad as i64),
                rng.random_range(-(pad as i64)..=pad as i64),
            )
        } else {
            (0, 0)
        };
        let gain = 1.0 + spec.drift * (std::f64::consts::TAU * t as f64 / period).sin();
        let mut frame = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
            let yy = (y as i64 + pad as i64 + jy) as usize;
            let xx = (x as i64 + pad as i64 + jx) as usize;
            (canvas[[yy, xx, c]] * gain).clamp(0.0, 1.0)
        });
        let mut mask = Array2::zeros((h, w));
        for obj in &objects {
            for y in 0..h {
                for x in 0..w {
                    if obj.covers(y, x) {
                        mask[[y, x]] = 1;
                        let col = obj.color_at(y, x);
                        for c in 0..3 {
                            frame[[y, x, c]] = (col[c] * gain).clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
        frames.push(frame);
        masks.push(mask);
        for obj in objects.iter_mut() {
            obj.step(h as f64, w as f64);
        }
    }
    Ok(SceneTruth {
        background,
        frames,
        masks,
        object_count,
    })
}

/// Write the full synthetic dataset plus manifest under `out`.
pub fn synth_generate(spec: &SynthSpec, out: &Path) -> Result<()> {
    spec.validate()?;
    std::fs::create_dir_all(out).map_err(|e| GlbmError::io(out, e))?;
    let mut manifest = String::new();
    manifest.push_str(&format!("synth.scenes = {}\n", spec.scenes));
    manifest.push_str(&format!("synth.frames = {}\n", spec.frames));
    manifest.push_str(&format!("synth.height = {}\n", spec.height));
    manifest.push_str(&format!("synth.width = {}\n", spec.width));
    manifest.push_str(&format!("synth.background = {}\n", spec.background.as_str()));
    manifest.push_str(&format!("synth.objects = {}\n", spec.objects));
    manifest.push_str(&format!("synth.object_size = {}\n", spec.object_size));
    manifest.push_str(&format!("synth.velocity = {:?}\n", spec.velocity));
    manifest.push_str(&format!("synth.intensity = {:?}\n", spec.intensity));
    manifest.push_str(&format!("synth.jitter = {}\n", spec.jitter));
    manifest.push_str(&format!("synth.drift = {:?}\n", spec.drift));
    manifest.push_str(&format!("synth.seed = {}\n", spec.seed));

    for s in 0..spec.scenes {
        let truth = synth_scene(spec, s)?;
        let scene_dir = out.join(format!("s{s}"));
        let input_dir = scene_dir.join("input");
        let gt_bg_dir = scene_dir.join("GT_background");
        let gt_mask_dir = scene_dir.join("GT_masks");
        for d in [&input_dir, &gt_bg_dir, &gt_mask_dir] {
            std::fs::create_dir_all(d).map_err(|e| GlbmError::io(d, e))?;
        }
        imgproc::save_image(&truth.background, &gt_bg_dir.join("background.png"))?;
        for (t, frame) in truth.frames.iter().enumerate() {
            imgproc::save_image(frame, &input_dir.join(format!("{t:06}.png")))?;
        }
        for (t, mask) in truth.masks.iter().enumerate() {
            imgproc::save_mask(&mask.view(), &gt_mask_dir.join(format!("{t:06}.png")))?;
        }
        manifest.push_str(&format!("scene.s{s}.objects = {}\n", truth.object_count));
    }
    let manifest_path = out.join("manifest.txt");
    std::fs::write(&manifest_path, manifest).map_err(|e| GlbmError::io(&manifest_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn no_fg_spec() -> SynthSpec {
        SynthSpec {
            scenes: 1,
            frames: 4,
            height: 32,
            width: 32,
            objects: 0,
            jitter: 0,
            drift: 0.0,
            seed: 5,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn static_scene_frames_equal_background() {
        let truth = synth_scene(&no_fg_spec(), 0).unwrap();
        for frame in &truth.frames {
            assert_eq!(frame, &truth.background);
        }
        for mask in &truth.masks {
            assert_eq!(mask.sum(), 0);
        }
    }

    #[test]
    fn square_mask_has_exact_area() {
        let spec = SynthSpec {
            scenes: 1,
            frames: 10,
            height: 64,
            width: 64,
            objects: 1,
            object_size: 12,
            velocity: 3.0,
            jitter: 0,
            drift: 0.0,
            seed: 11,
            ..SynthSpec::default()
        };
        let truth = synth_scene(&spec, 0).unwrap();
        assert_eq!(truth.object_count, 1);
        for (t, mask) in truth.masks.iter().enumerate() {
            let area: u64 = mask.iter().map(|&m| m as u64).sum();
            assert_eq!(area, 144, "frame {t}: area {area}");
        }
    }

    #[test]
    fn moving_object_changes_position() {
        let spec = SynthSpec {
            scenes: 1,
            frames: 6,
            height: 48,
            width: 48,
            objects: 1,
            object_size: 10,
            velocity: 4.0,
            seed: 3,
            ..SynthSpec::default()
        };
        let truth = synth_scene(&spec, 0).unwrap();
        assert_ne!(truth.masks[0], truth.masks[3]);
    }

    #[test]
    fn generation_is_byte_deterministic() {
        let spec = SynthSpec {
            scenes: 2,
            frames: 3,
            height: 24,
            width: 24,
            objects: 2,
            object_size: 6,
            jitter: 2,
            drift: 0.1,
            seed: 21,
            ..SynthSpec::default()
        };
        let hash_dir = |dir: &Path| -> Vec<(String, Vec<u8>)> {
            let mut entries = Vec::new();
            let mut stack = vec![dir.to_path_buf()];
            while let Some(d) = stack.pop() {
                for e in std::fs::read_dir(&d).unwrap() {
                    let p = e.unwrap().path();
                    if p.is_dir() {
                        stack.push(p);
                    } else {
                        let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                        entries.push((rel, std::fs::read(&p).unwrap()));
                    }
                }
            }
            entries.sort();
            entries
        };
        let t1 = TempDir::new().unwrap();
        let t2 = TempDir::new().unwrap();
        synth_generate(&spec, t1.path()).unwrap();
        synth_generate(&spec, t2.path()).unwrap();
        assert_eq!(hash_dir(t1.path()), hash_dir(t2.path()));
    }

    #[test]
    fn scenes_have_distinct_backgrounds() {
        let spec = SynthSpec {
            scenes: 2,
            ..no_fg_spec()
        };
        let a = synth_scene(&spec, 0).unwrap();
        let b = synth_scene(&spec, 1).unwrap();
        let diff: f64 = a
            .background
            .iter()
            .zip(b.background.iter())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(diff > 1.0, "backgrounds nearly identical: {diff}");
    }

    #[test]
    fn oversized_foreground_is_rejected() {
        let spec = SynthSpec {
            scenes: 1,
            frames: 2,
            height: 32,
            width: 32,
            objects: 3,
            object_size: 20,
            ..SynthSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn generated_tree_matches_expected_layout() {
        let spec = no_fg_spec();
        let tmp = TempDir::new().unwrap();
        synth_generate(&spec, tmp.path()).unwrap();
        assert!(tmp.path().join("s0/input/000000.png").is_file());
        assert!(tmp.path().join("s0/GT_background/background.png").is_file());
        assert!(tmp.path().join("s0/GT_masks/000003.png").is_file());
        assert!(tmp.path().join("manifest.txt").is_file());
    }
}
