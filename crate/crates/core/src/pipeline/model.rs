use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{Clip, SegMap};
use crate::attention::BlockPartition;
use crate::mar::{argmax, Mar, MemoryBank, DEFAULT_K_HIGH, DEFAULT_K_LOW};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{fan_in_uniform, Binding, ParamStore};
use crate::stf::{Stf, StfConfig};
use crate::{Error, Result};

/// Per-pixel feature extractor over a clamped square neighborhood, as
/// `linear → relu → linear`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyBackbone {
    pub window: usize,
    pub hidden: usize,
    pub dim: usize,
    pub stride: usize,
}

impl ToyBackbone {
    pub fn input_dim(&self) -> usize {
        self.window * self.window
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let (i, h, d) = (self.input_dim(), self.hidden, self.dim);
        store.insert("backbone.w1", fan_in_uniform(&[i, h], i, rng))?;
        store.insert("backbone.b1", fan_in_uniform(&[h], i, rng))?;
        store.insert("backbone.w2", fan_in_uniform(&[h, d], h, rng))?;
        store.insert("backbone.b2", fan_in_uniform(&[d], h, rng))?;
        Ok(())
    }

    /// `[H_f·W_f, window²]` neighborhoods around every `stride`-th pixel,
    /// clamped at the image border.
    pub fn patches(&self, image: &Tensor) -> Result<Tensor> {
        if image.rank() != 2 {
            return Err(Error::Shape {
                what: "grayscale frame",
                expected: vec![0, 0],
                found: image.shape().to_vec(),
            });
        }
        let (h, w) = (image.shape()[0], image.shape()[1]);
        let (hf, wf) = self.output_size(h, w);
        let r = (self.window / 2) as i64;
        let mut data = Vec::with_capacity(hf * wf * self.input_dim());
        for y in 0..hf {
            for x in 0..wf {
                let (cy, cx) = ((y * self.stride) as i64, (x * self.stride) as i64);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let sy = (cy + dy).clamp(0, h as i64 - 1) as usize;
                        let sx = (cx + dx).clamp(0, w as i64 - 1) as usize;
                        data.push(image.data()[sy * w + sx]);
                    }
                }
            }
        }
        Ok(Tensor::new(vec![hf * wf, self.input_dim()], data)?)
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, patches: Var) -> Result<Var> {
        let h = g.linear(patches, b.var("backbone.w1")?, b.var("backbone.b1")?)?;
        let h = g.relu(h);
        Ok(g.linear(h, b.var("backbone.w2")?, b.var("backbone.b2")?)?)
    }

    /// Token-major `[H_f·W_f, d]` features of one frame.
    pub fn features(&self, store: &ParamStore, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = Binding::frozen(&mut g, store);
        let p = g.constant(self.patches(image)?);
        let out = self.forward(&mut g, &b, p)?;
        Ok(g.value(out).clone())
    }
}

/// Per-pixel linear map from features to class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub dim: usize,
    pub classes: usize,
}

impl Classifier {
    pub const PREFIX: &'static str = "cls.";

    /// Inserts fresh weights, replacing any existing ones.
    pub fn reset<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        store.set(
            "cls.w",
            fan_in_uniform(&[self.dim, self.classes], self.dim, rng),
        );
        store.set("cls.b", fan_in_uniform(&[self.classes], self.dim, rng));
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, x: Var) -> Result<Var> {
        Ok(g.linear(x, b.var("cls.w")?, b.var("cls.b")?)?)
    }

    pub fn logits(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = Binding::frozen(&mut g, store);
        let x = g.constant(x.clone());
        let out = self.forward(&mut g, &b, x)?;
        Ok(g.value(out).clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub partition: BlockPartition,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub mar_ffn_dim: usize,
    pub k_low: usize,
    pub k_high: usize,
    pub window: usize,
    pub backbone_hidden: usize,
    pub stride: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 8,
            heads: 1,
            ffn_dim: 16,
            partition: BlockPartition::new(4, 4),
            encoder_layers: 1,
            decoder_layers: 1,
            mar_ffn_dim: 16,
            k_low: DEFAULT_K_LOW,
            k_high: DEFAULT_K_HIGH,
            window: 3,
            backbone_hidden: 16,
            stride: 1,
        }
    }
}

impl ModelConfig {
    /// Every problem with the configuration, for frames of `h × w`.
    pub fn validate(&self, h: usize, w: usize) -> Vec<String> {
        let mut errs = Vec::new();
        let positive = [
            ("dim", self.dim),
            ("heads", self.heads),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("mar_ffn_dim", self.mar_ffn_dim),
            ("k_low", self.k_low),
            ("k_high", self.k_high),
            ("backbone_hidden", self.backbone_hidden),
            ("stride", self.stride),
            ("partition.b_h", self.partition.b_h),
            ("partition.b_w", self.partition.b_w),
        ];
        for (name, v) in positive {
            if v == 0 {
                errs.push(format!("model.{name} must be positive"));
            }
        }
        if self.heads > 0 && !self.dim.is_multiple_of(self.heads) {
            errs.push(format!(
                "model.dim {} is not divisible by {} heads",
                self.dim, self.heads
            ));
        }
        if self.ffn_dim < self.dim {
            errs.push(format!(
                "model.ffn_dim {} is below dim {}",
                self.ffn_dim, self.dim
            ));
        }
        if self.window.is_multiple_of(2) {
            errs.push(format!("model.window {} must be odd", self.window));
        }
        if self.stride > 0 && self.partition.b_h > 0 && self.partition.b_w > 0 {
            let (hf, wf) = (h.div_ceil(self.stride), w.div_ceil(self.stride));
            if hf % self.partition.b_h != 0 || wf % self.partition.b_w != 0 {
                errs.push(format!(
                    "partition {}x{} does not divide the {hf}x{wf} feature map",
                    self.partition.b_h, self.partition.b_w
                ));
            }
        }
        errs
    }
}

/// Which enhancement modules sit between the backbone and the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Stf,
    Mar,
    StfMar,
}

impl Variant {
    pub fn uses_stf(self) -> bool {
        matches!(self, Variant::Stf | Variant::StfMar)
    }

    pub fn uses_mar(self) -> bool {
        matches!(self, Variant::Mar | Variant::StfMar)
    }
}

/// The full segmentation model: backbone, fusion, refinement, classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmenter {
    pub config: ModelConfig,
    pub classes: usize,
    pub backbone: ToyBackbone,
    pub stf: Stf,
    pub mar: Mar,
    pub classifier: Classifier,
}

impl Segmenter {
    pub fn new(config: &ModelConfig, classes: usize, height: usize, width: usize) -> Result<Self> {
        let errs = config.validate(height, width);
        if !errs.is_empty() {
            return Err(Error::Config(errs.join("; ")));
        }
        let backbone = ToyBackbone {
            window: config.window,
            hidden: config.backbone_hidden,
            dim: config.dim,
            stride: config.stride,
        };
        let (hf, wf) = backbone.output_size(height, width);
        let stf = Stf::new(StfConfig {
            dim: config.dim,
            heads: config.heads,
            ffn_dim: config.ffn_dim,
            partition: config.partition,
            encoder_layers: config.encoder_layers,
            decoder_layers: config.decoder_layers,
            height: hf,
            width: wf,
        })?;
        Ok(Self {
            config: config.clone(),
            classes,
            backbone,
            stf,
            mar: Mar::new(config.dim, config.mar_ffn_dim)?,
            classifier: Classifier {
                dim: config.dim,
                classes,
            },
        })
    }

    pub fn feature_size(&self) -> (usize, usize) {
        let c = self.stf.config();
        (c.height, c.width)
    }

    /// Enhanced features of the current frame given backbone features of
    /// the window `[prev, cur, next]`.
    pub fn enhance(
        &self,
        store: &ParamStore,
        bank: Option<&MemoryBank>,
        window: [&Tensor; 3],
        variant: Variant,
    ) -> Result<Tensor> {
        let [prev, cur, next] = window;
        let fused = if variant.uses_stf() {
            self.stf.infer(store, prev, cur, next)?
        } else {
            cur.clone()
        };
        if variant.uses_mar() {
            let bank =
                bank.ok_or_else(|| Error::Contract("refinement needs a memory bank".into()))?;
            self.mar.infer(store, &fused, bank)
        } else {
            Ok(fused)
        }
    }

    /// Per-pixel argmax of the classifier over `[n, d]` features.
    pub fn predict(&self, store: &ParamStore, features: &Tensor) -> Result<SegMap> {
        let logits = self.classifier.logits(store, features)?;
        let labels = (0..logits.rows()).map(|i| argmax(logits.row(i))).collect();
        let (h, w) = self.feature_size();
        SegMap::new(h, w, labels)
    }
}

/// Index triple `[T−1, T, T+1]` clamped to `0..n`.
pub fn window_indices(t: usize, n: usize) -> [usize; 3] {
    [t.saturating_sub(1), t, (t + 1).min(n - 1)]
}

/// Segments every frame of a clip from backbone features of frames passed
/// through `variant`, one window per frame with edge clamping.
pub fn infer_features(
    model: &Segmenter,
    store: &ParamStore,
    bank: Option<&MemoryBank>,
    features: &[Tensor],
    variant: Variant,
) -> Result<Vec<SegMap>> {
    if features.is_empty() {
        return Err(Error::Contract("cannot segment an empty clip".into()));
    }
    (0..features.len())
        .into_par_iter()
        .map(|t| {
            let [p, c, n] = window_indices(t, features.len());
            let enhanced = model.enhance(
                store,
                bank,
                [&features[p], &features[c], &features[n]],
                variant,
            )?;
            model.predict(store, &enhanced)
        })
        .collect()
}

/// Backbone features of every frame.
pub fn clip_features(model: &Segmenter, store: &ParamStore, clip: &Clip) -> Result<Vec<Tensor>> {
    clip.frames
        .par_iter()
        .map(|f| model.backbone.features(store, f))
        .collect()
}

/// Full pipeline over a clip: backbone, fusion, refinement, classifier.
pub fn sliding_window_infer(
    model: &Segmenter,
    store: &ParamStore,
    bank: &MemoryBank,
    clip: &Clip,
) -> Result<Vec<SegMap>> {
    sliding_window_infer_variant(model, store, Some(bank), clip, Variant::StfMar)
}

pub fn sliding_window_infer_variant(
    model: &Segmenter,
    store: &ParamStore,
    bank: Option<&MemoryBank>,
    clip: &Clip,
    variant: Variant,
) -> Result<Vec<SegMap>> {
    if clip.is_empty() {
        return Err(Error::Contract("cannot segment an empty clip".into()));
    }
    let feats = clip_features(model, store, clip)?;
    infer_features(model, store, bank, &feats, variant)
}
