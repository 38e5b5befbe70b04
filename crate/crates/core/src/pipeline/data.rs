//! Synthetic video clips: rigid textured shapes sliding over a textured
//! background, with per-frame sensor noise and exact label maps.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::{rng, Error, Result};

/// Dense per-pixel class labels, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<usize>,
}

impl SegMap {
    pub fn new(height: usize, width: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape {
                what: "segmentation map",
                expected: vec![height, width],
                found: vec![labels.len()],
            });
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn get(&self, y: usize, x: usize) -> usize {
        self.labels[y * self.width + x]
    }

    /// Labels sampled at every `stride`-th pixel.
    pub fn subsample(&self, stride: usize) -> Self {
        let (h, w) = (self.height.div_ceil(stride), self.width.div_ceil(stride));
        let labels = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .map(|(y, x)| self.get(y * stride, x * stride))
            .collect();
        Self {
            height: h,
            width: w,
            labels,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rect,
    Disc,
}

/// One shape moving at constant integer velocity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeTrack {
    pub class: usize,
    pub kind: ShapeKind,
    /// Top-left corner of the bounding box in frame 0.
    pub y0: i64,
    pub x0: i64,
    pub vy: i64,
    pub vx: i64,
    pub size: i64,
}

impl ShapeTrack {
    pub fn origin(&self, t: usize) -> (i64, i64) {
        (self.y0 + self.vy * t as i64, self.x0 + self.vx * t as i64)
    }

    pub fn contains(&self, t: usize, y: i64, x: i64) -> bool {
        let (oy, ox) = self.origin(t);
        let (dy, dx) = (y - oy, x - ox);
        if dy < 0 || dx < 0 || dy >= self.size || dx >= self.size {
            return false;
        }
        match self.kind {
            ShapeKind::Rect => true,
            ShapeKind::Disc => {
                // Twice the offset from the center, to stay in integers.
                let (cy, cx) = (2 * dy + 1 - self.size, 2 * dx + 1 - self.size);
                cy * cy + cx * cx <= self.size * self.size
            }
        }
    }

    /// Shape-anchored coordinates, so textures move with the shape.
    fn local(&self, t: usize, y: i64, x: i64) -> (i64, i64) {
        let (oy, ox) = self.origin(t);
        (y - oy, x - ox)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub height: usize,
    pub width: usize,
    /// Class count including background (class 0).
    pub classes: usize,
    pub clip_len: usize,
    pub train_clips: usize,
    pub val_clips: usize,
    pub min_size: usize,
    pub max_size: usize,
    /// Largest per-axis speed in pixels per frame.
    pub max_speed: usize,
    /// Standard deviation of the per-frame pixel noise.
    pub noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            classes: 4,
            clip_len: 4,
            train_clips: 8,
            val_clips: 4,
            min_size: 7,
            max_size: 12,
            max_speed: 2,
            noise: 0.7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.height == 0 || self.width == 0 {
            errs.push("frame size must be nonzero".into());
        }
        if self.classes < 2 {
            errs.push(format!(
                "need background plus at least one shape class, got {}",
                self.classes
            ));
        }
        if self.classes > 256 {
            errs.push(format!(
                "at most 256 classes fit a map file, got {}",
                self.classes
            ));
        }
        if self.clip_len == 0 {
            errs.push("clip length must be nonzero".into());
        }
        if self.train_clips == 0 || self.val_clips == 0 {
            errs.push("need at least one train and one val clip".into());
        }
        if self.min_size == 0 || self.min_size > self.max_size {
            errs.push(format!(
                "shape sizes {}..={} are degenerate",
                self.min_size, self.max_size
            ));
        }
        if self.max_speed > 2 {
            errs.push(format!("max speed {} exceeds 2 px/frame", self.max_speed));
        }
        let travel = self.max_speed * self.clip_len.saturating_sub(1);
        if self.max_size + travel > self.height.min(self.width) {
            errs.push(format!(
                "shapes of size {} moving {travel} px do not fit a {}x{} frame",
                self.max_size, self.height, self.width
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            errs.push(format!(
                "noise {} must be finite and nonnegative",
                self.noise
            ));
        }
        errs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    /// Grayscale frames, each `[H, W]`.
    pub frames: Vec<Tensor>,
    pub labels: Vec<SegMap>,
    /// Shapes in drawing order; later shapes occlude earlier ones.
    pub shapes: Vec<ShapeTrack>,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Class count including background.
    pub classes: usize,
    pub train: Vec<Clip>,
    pub val: Vec<Clip>,
}

/// Mean intensity and checker amplitude of a shape class. The background
/// is centered on zero.
fn appearance(class: usize, classes: usize) -> (f64, f64) {
    let mean = if classes <= 2 {
        0.7
    } else {
        -0.7 + 1.4 * (class - 1) as f64 / (classes - 2) as f64
    };
    // Classes whose mean sits near the background are told apart by texture.
    let checker = if mean.abs() < 0.4 { 0.6 } else { 0.0 };
    (mean, checker)
}

/// Label of pixel `(y, x)` at frame `t`: the last drawn shape covering it.
pub fn label_at(shapes: &[ShapeTrack], t: usize, y: i64, x: i64) -> usize {
    shapes
        .iter()
        .rev()
        .find(|s| s.contains(t, y, x))
        .map_or(0, |s| s.class)
}

fn make_clip<R: Rng>(cfg: &SyntheticConfig, r: &mut R) -> Clip {
    let (h, w) = (cfg.height as i64, cfg.width as i64);
    let speed = cfg.max_speed as i64;
    let steps = cfg.clip_len as i64 - 1;
    let mut shapes: Vec<ShapeTrack> = (1..cfg.classes)
        .map(|class| {
            let size = r.gen_range(cfg.min_size..=cfg.max_size) as i64;
            let kind = if r.gen_bool(0.5) {
                ShapeKind::Rect
            } else {
                ShapeKind::Disc
            };
            let vy = r.gen_range(-speed..=speed);
            let vx = r.gen_range(-speed..=speed);
            // Start so that the whole trajectory stays inside the frame.
            let span =
                |extent: i64, v: i64| ((-v * steps).max(0), extent - size - (v * steps).max(0));
            let (ylo, yhi) = span(h, vy);
            let (xlo, xhi) = span(w, vx);
            ShapeTrack {
                class,
                kind,
                y0: r.gen_range(ylo..=yhi),
                x0: r.gen_range(xlo..=xhi),
                vy,
                vx,
                size,
            }
        })
        .collect();
    shapes.shuffle(r);

    let phase: f64 = r.gen_range(0.0..std::f64::consts::TAU);
    let (fy, fx): (f64, f64) = (r.gen_range(0.1..0.4), r.gen_range(0.1..0.4));
    let noise = Normal::new(0.0, cfg.noise).expect("validated noise");
    let mut frames = Vec::with_capacity(cfg.clip_len);
    let mut labels = Vec::with_capacity(cfg.clip_len);
    for t in 0..cfg.clip_len {
        let mut img = Vec::with_capacity((h * w) as usize);
        let mut lab = Vec::with_capacity((h * w) as usize);
        for y in 0..h {
            for x in 0..w {
                let top = shapes.iter().rev().find(|s| s.contains(t, y, x));
                let clean = match top {
                    None => 0.16 * (fy * y as f64 + fx * x as f64 + phase).sin(),
                    Some(s) => {
                        let (mean, checker) = appearance(s.class, cfg.classes);
                        let (ly, lx) = s.local(t, y, x);
                        let sign = if (ly + lx) % 2 == 0 { 1.0 } else { -1.0 };
                        mean + checker * sign
                    }
                };
                img.push(clean + noise.sample(r));
                lab.push(top.map_or(0, |s| s.class));
            }
        }
        frames.push(Tensor::new(vec![cfg.height, cfg.width], img).expect("validated frame size"));
        labels.push(SegMap::new(cfg.height, cfg.width, lab).expect("one label per pixel"));
    }
    Clip {
        frames,
        labels,
        shapes,
    }
}

/// Deterministic train/val clip sets for `seed`.
pub fn generate_synthetic(seed: u64, cfg: &SyntheticConfig) -> Result<Dataset> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs.join("; ")));
    }
    let mut r = rng::stream(seed, "data.train");
    let train = (0..cfg.train_clips)
        .map(|_| make_clip(cfg, &mut r))
        .collect();
    let mut r = rng::stream(seed, "data.val");
    let val = (0..cfg.val_clips).map(|_| make_clip(cfg, &mut r)).collect();
    Ok(Dataset {
        classes: cfg.classes,
        train,
        val,
    })
}
