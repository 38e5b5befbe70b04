//! Three-stage training: backbone and classifier per frame; then fusion and
//! a fresh classifier over a frozen backbone; then refinement and a fresh
//! classifier over frozen fusion, against a memory built from stage-two
//! features.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::data::{Clip, Dataset, SegMap};
use super::metrics::miou_many;
use super::model::{
    clip_features, infer_features, window_indices, ModelConfig, Segmenter, Variant,
};
use crate::mar::{build_memory, MemoryBank};
use crate::numerics::{Graph, Tensor};
use crate::params::{Binding, ParamStore};
use crate::{rng, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage3_epochs: usize,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    pub stage3_lr: f64,
    /// Frames per step in the per-frame stages.
    pub batch_frames: usize,
    /// Windows per step in the fusion stage.
    pub batch_windows: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 60,
            stage2_epochs: 20,
            stage3_epochs: 150,
            stage1_lr: 1.0,
            stage2_lr: 0.3,
            stage3_lr: 0.5,
            batch_frames: 4,
            batch_windows: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, lr) in [
            ("stage1_lr", self.stage1_lr),
            ("stage2_lr", self.stage2_lr),
            ("stage3_lr", self.stage3_lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                errs.push(format!(
                    "train.{name} must be a positive finite number, got {lr}"
                ));
            }
        }
        if self.batch_frames == 0 || self.batch_windows == 0 {
            errs.push("train.batch_frames and train.batch_windows must be positive".into());
        }
        errs
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub stage: u8,
    pub epoch: usize,
    pub split: String,
    pub miou: f64,
}

pub fn write_metrics_log<W: Write>(records: &[MetricRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Fresh parameters for every module, each from its own named stream.
pub fn init_params(model: &Segmenter, seed: u64) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    model
        .backbone
        .init(&mut store, &mut rng::stream(seed, "init.backbone"))?;
    model
        .stf
        .init(&mut store, &mut rng::stream(seed, "init.stf"))?;
    model
        .mar
        .init(&mut store, &mut rng::stream(seed, "init.mar"))?;
    model
        .classifier
        .reset(&mut store, &mut rng::stream(seed, "init.cls"));
    Ok(store)
}

/// Per-frame features with their label maps.
#[derive(Clone, Debug)]
pub struct FrameSet {
    pub features: Vec<Tensor>,
    pub labels: Vec<SegMap>,
}

impl FrameSet {
    fn flat_labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter()
            .flat_map(|&i| self.labels[i].labels.iter().copied())
            .collect()
    }

    fn stacked(&self, idx: &[usize]) -> Result<Tensor> {
        let parts: Vec<&Tensor> = idx.iter().map(|&i| &self.features[i]).collect();
        Ok(Tensor::concat(&parts)?)
    }
}

fn prefixed(prefixes: &'static [&'static str]) -> impl Fn(&str) -> bool {
    move |n: &str| prefixes.iter().any(|p| n.starts_with(p))
}

/// Trains refinement and a fresh classifier on frozen per-frame features.
/// Returns the val mIoU after every epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_refinement(
    model: &Segmenter,
    store: &mut ParamStore,
    bank: &MemoryBank,
    train: &FrameSet,
    val: &FrameSet,
    epochs: usize,
    lr: f64,
    batch: usize,
    seed: u64,
    tag: &str,
) -> Result<Vec<f64>> {
    model
        .classifier
        .reset(store, &mut rng::stream(seed, &format!("{tag}.cls")));
    let mut order_rng = rng::stream(seed, &format!("{tag}.order"));
    let mut order: Vec<usize> = (0..train.features.len()).collect();
    let trainable = prefixed(&["mar.", "cls."]);
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(&mut order_rng);
        for idx in order.chunks(batch) {
            let mut g = Graph::new();
            let b = Binding::bind(&mut g, store, &trainable);
            let x = g.constant(train.stacked(idx)?);
            let r = model.mar.forward(&mut g, &b, x, bank)?;
            let logits = model.classifier.forward(&mut g, &b, r)?;
            let loss = g.cross_entropy(logits, &train.flat_labels(idx))?;
            let grads = g.backward(loss)?;
            store.sgd_step(&b, &grads, lr);
        }
        let preds = val
            .features
            .iter()
            .map(|f| model.predict(store, &model.mar.infer(store, f, bank)?))
            .collect::<Result<Vec<_>>>()?;
        history.push(miou_many(preds.iter().zip(&val.labels), model.classes)?);
    }
    Ok(history)
}

/// Where the stage-two classifier is kept once the memory has been built,
/// since stage three replaces `cls.*`.
pub const MEMORY_CLASSIFIER_PREFIX: &str = "memory.cls.";

/// Fused features of every frame of a clip, from its backbone features.
fn fuse_clip(model: &Segmenter, store: &ParamStore, feats: &[Tensor]) -> Result<Vec<Tensor>> {
    (0..feats.len())
        .map(|t| {
            let [p, c, n] = window_indices(t, feats.len());
            model.stf.infer(store, &feats[p], &feats[c], &feats[n])
        })
        .collect()
}

/// Fused features and labels of every frame of `clips`.
pub fn fused_frames(model: &Segmenter, store: &ParamStore, clips: &[Clip]) -> Result<FrameSet> {
    let mut features = Vec::new();
    for clip in clips {
        features.extend(fuse_clip(
            model,
            store,
            &clip_features(model, store, clip)?,
        )?);
    }
    Ok(FrameSet {
        features,
        labels: labels_of(clips, model.config.stride),
    })
}

/// Rebuilds the memory from trained parameters, judging correctness with
/// the classifier that was current when the memory was first built.
pub fn rebuild_bank(model: &Segmenter, store: &ParamStore, clips: &[Clip]) -> Result<MemoryBank> {
    let mut judged = store.clone();
    for suffix in ["w", "b"] {
        let t = store
            .get(&format!("{MEMORY_CLASSIFIER_PREFIX}{suffix}"))?
            .clone();
        judged.set(format!("cls.{suffix}"), t);
    }
    build_bank(model, &judged, &fused_frames(model, store, clips)?)
}

/// Builds the memory from per-frame features and the current classifier.
pub fn build_bank(model: &Segmenter, store: &ParamStore, train: &FrameSet) -> Result<MemoryBank> {
    let all: Vec<usize> = (0..train.features.len()).collect();
    let feats = train.stacked(&all)?;
    let logits = model.classifier.logits(store, &feats)?;
    build_memory(
        &feats,
        &train.flat_labels(&all),
        &logits,
        model.config.k_low,
        model.config.k_high,
    )
}

/// Stepwise driver of the three-stage schedule.
pub struct Trainer<'a> {
    model: Segmenter,
    cfg: TrainConfig,
    data: &'a Dataset,
    seed: u64,
    store: ParamStore,
    bank: Option<MemoryBank>,
    log: Vec<MetricRecord>,
    finished: u8,
    backbone_train: Option<Vec<Vec<Tensor>>>,
    backbone_val: Option<Vec<Vec<Tensor>>>,
    fused_train: Option<FrameSet>,
    fused_val: Option<FrameSet>,
}

fn labels_of(clips: &[Clip], stride: usize) -> Vec<SegMap> {
    clips
        .iter()
        .flat_map(|c| c.labels.iter().map(|l| l.subsample(stride)))
        .collect()
}

impl<'a> Trainer<'a> {
    pub fn new(model: Segmenter, cfg: TrainConfig, data: &'a Dataset, seed: u64) -> Result<Self> {
        let errs = cfg.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs.join("; ")));
        }
        if data.train.is_empty()
            || data.val.is_empty()
            || data.train.iter().chain(&data.val).any(Clip::is_empty)
        {
            return Err(Error::Contract(
                "training needs nonempty train and val clips".into(),
            ));
        }
        let store = init_params(&model, seed)?;
        Ok(Self {
            model,
            cfg,
            data,
            seed,
            store,
            bank: None,
            log: Vec::new(),
            finished: 0,
            backbone_train: None,
            backbone_val: None,
            fused_train: None,
            fused_val: None,
        })
    }

    pub fn model(&self) -> &Segmenter {
        &self.model
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn bank(&self) -> Option<&MemoryBank> {
        self.bank.as_ref()
    }

    pub fn log(&self) -> &[MetricRecord] {
        &self.log
    }

    pub fn stages_finished(&self) -> u8 {
        self.finished
    }

    fn require(&self, stage: u8) -> Result<()> {
        if self.finished + 1 < stage {
            return Err(Error::Contract(format!(
                "stage {stage} needs stage {} to finish first",
                stage - 1
            )));
        }
        Ok(())
    }

    fn record(&mut self, stage: u8, history: &[f64]) {
        for (i, &m) in history.iter().enumerate() {
            self.log.push(MetricRecord {
                stage,
                epoch: i + 1,
                split: "val".into(),
                miou: m,
            });
        }
    }

    /// Last val mIoU logged for `stage`.
    pub fn final_miou(&self, stage: u8) -> Option<f64> {
        self.log
            .iter()
            .rev()
            .find(|r| r.stage == stage)
            .map(|r| r.miou)
    }

    /// Backbone and classifier, trained per frame.
    pub fn stage1(&mut self) -> Result<()> {
        let model = &self.model;
        let stride = model.config.stride;
        let frames: Vec<(Tensor, Vec<usize>)> = self
            .data
            .train
            .iter()
            .flat_map(|c| c.frames.iter().zip(&c.labels))
            .map(|(f, l)| Ok((model.backbone.patches(f)?, l.subsample(stride).labels)))
            .collect::<Result<_>>()?;
        let val_labels = labels_of(&self.data.val, stride);
        let trainable = prefixed(&["backbone.", "cls."]);
        let mut order_rng = rng::stream(self.seed, "stage1.order");
        let mut order: Vec<usize> = (0..frames.len()).collect();
        let mut history = Vec::new();
        for _ in 0..self.cfg.stage1_epochs {
            order.shuffle(&mut order_rng);
            for idx in order.chunks(self.cfg.batch_frames) {
                let parts: Vec<&Tensor> = idx.iter().map(|&i| &frames[i].0).collect();
                let targets: Vec<usize> = idx
                    .iter()
                    .flat_map(|&i| frames[i].1.iter().copied())
                    .collect();
                let mut g = Graph::new();
                let b = Binding::bind(&mut g, &self.store, &trainable);
                let x = g.constant(Tensor::concat(&parts)?);
                let f = model.backbone.forward(&mut g, &b, x)?;
                let logits = model.classifier.forward(&mut g, &b, f)?;
                let loss = g.cross_entropy(logits, &targets)?;
                let grads = g.backward(loss)?;
                self.store.sgd_step(&b, &grads, self.cfg.stage1_lr);
            }
            let mut preds = Vec::new();
            for clip in &self.data.val {
                preds.extend(infer_features(
                    model,
                    &self.store,
                    None,
                    &clip_features(model, &self.store, clip)?,
                    Variant::Baseline,
                )?);
            }
            history.push(miou_many(preds.iter().zip(&val_labels), model.classes)?);
        }
        self.record(1, &history);
        self.finished = 1;
        Ok(())
    }

    fn backbone_features(&self, clips: &[Clip]) -> Result<Vec<Vec<Tensor>>> {
        clips
            .iter()
            .map(|c| clip_features(&self.model, &self.store, c))
            .collect()
    }

    /// Per-frame backbone features of the train and val splits.
    pub fn backbone_frames(&mut self) -> Result<(FrameSet, FrameSet)> {
        self.require(2)?;
        self.cache_backbone()?;
        let stride = self.model.config.stride;
        let flat = |f: &Vec<Vec<Tensor>>| f.iter().flatten().cloned().collect();
        Ok((
            FrameSet {
                features: flat(self.backbone_train.as_ref().expect("cached")),
                labels: labels_of(&self.data.train, stride),
            },
            FrameSet {
                features: flat(self.backbone_val.as_ref().expect("cached")),
                labels: labels_of(&self.data.val, stride),
            },
        ))
    }

    fn cache_backbone(&mut self) -> Result<()> {
        if self.backbone_train.is_none() {
            self.backbone_train = Some(self.backbone_features(&self.data.train)?);
            self.backbone_val = Some(self.backbone_features(&self.data.val)?);
        }
        Ok(())
    }

    fn check_frozen(&self, before: &[(&str, [u8; 32])], stage: u8) -> Result<()> {
        for (prefix, digest) in before {
            if self.store.digest(prefix) != *digest {
                return Err(Error::Contract(format!(
                    "stage {stage} modified frozen parameters {prefix}*"
                )));
            }
        }
        Ok(())
    }

    /// Fusion and a fresh classifier over the frozen backbone.
    pub fn stage2(&mut self) -> Result<()> {
        self.require(2)?;
        let frozen = [("backbone.", self.store.digest("backbone."))];
        self.cache_backbone()?;
        let model = &self.model;
        let train = self.backbone_train.as_ref().expect("cached");
        let val = self.backbone_val.as_ref().expect("cached");
        let stride = model.config.stride;
        model
            .classifier
            .reset(&mut self.store, &mut rng::stream(self.seed, "stage2.cls"));
        let windows: Vec<(usize, usize)> = train
            .iter()
            .enumerate()
            .flat_map(|(c, f)| (0..f.len()).map(move |t| (c, t)))
            .collect();
        let val_labels = labels_of(&self.data.val, stride);
        let trainable = prefixed(&["stf.", "cls."]);
        let mut order_rng = rng::stream(self.seed, "stage2.order");
        let mut order: Vec<usize> = (0..windows.len()).collect();
        let mut history = Vec::new();
        for _ in 0..self.cfg.stage2_epochs {
            order.shuffle(&mut order_rng);
            for batch in order.chunks(self.cfg.batch_windows) {
                let mut g = Graph::new();
                let b = Binding::bind(&mut g, &self.store, &trainable);
                let mut outs = Vec::with_capacity(batch.len());
                let mut targets = Vec::new();
                for &w in batch {
                    let (c, t) = windows[w];
                    let feats = &train[c];
                    let [p, cur, n] = window_indices(t, feats.len());
                    let (vp, vc, vn) = (
                        g.constant(feats[p].clone()),
                        g.constant(feats[cur].clone()),
                        g.constant(feats[n].clone()),
                    );
                    outs.push(model.stf.forward(&mut g, &b, vp, vc, vn)?);
                    targets.extend(self.data.train[c].labels[t].subsample(stride).labels);
                }
                let fused = g.concat(&outs)?;
                let logits = model.classifier.forward(&mut g, &b, fused)?;
                let loss = g.cross_entropy(logits, &targets)?;
                let grads = g.backward(loss)?;
                self.store.sgd_step(&b, &grads, self.cfg.stage2_lr);
            }
            let mut preds = Vec::new();
            for feats in val {
                preds.extend(infer_features(
                    model,
                    &self.store,
                    None,
                    feats,
                    Variant::Stf,
                )?);
            }
            history.push(miou_many(preds.iter().zip(&val_labels), model.classes)?);
        }
        self.check_frozen(&frozen, 2)?;
        self.record(2, &history);
        self.finished = 2;
        self.fused_train = None;
        self.fused_val = None;
        Ok(())
    }

    /// Stage-two fused features of the train and val splits.
    pub fn fused_frames(&mut self) -> Result<(FrameSet, FrameSet)> {
        if self.finished < 2 {
            return Err(Error::Contract(
                "fused features need stage 2 to finish first".into(),
            ));
        }
        if self.fused_train.is_none() {
            let stride = self.model.config.stride;
            let fuse = |per_clip: &Vec<Vec<Tensor>>, clips: &[Clip]| -> Result<FrameSet> {
                Ok(FrameSet {
                    features: per_clip
                        .iter()
                        .map(|f| fuse_clip(&self.model, &self.store, f))
                        .collect::<Result<Vec<_>>>()?
                        .concat(),
                    labels: labels_of(clips, stride),
                })
            };
            let train = fuse(
                self.backbone_train.as_ref().expect("cached"),
                &self.data.train,
            )?;
            let val = fuse(self.backbone_val.as_ref().expect("cached"), &self.data.val)?;
            self.fused_train = Some(train);
            self.fused_val = Some(val);
        }
        Ok((
            self.fused_train.clone().expect("cached"),
            self.fused_val.clone().expect("cached"),
        ))
    }

    /// Builds the memory from stage-two features and classifier.
    pub fn build_memory(&mut self) -> Result<&MemoryBank> {
        let (train, _) = self.fused_frames()?;
        self.bank = Some(build_bank(&self.model, &self.store, &train)?);
        for suffix in ["w", "b"] {
            let t = self.store.get(&format!("cls.{suffix}"))?.clone();
            self.store
                .set(format!("{MEMORY_CLASSIFIER_PREFIX}{suffix}"), t);
        }
        Ok(self.bank.as_ref().expect("just built"))
    }

    /// Refinement and a fresh classifier over frozen fusion.
    pub fn stage3(&mut self) -> Result<()> {
        self.require(3)?;
        let bank = self.bank.clone().ok_or_else(|| {
            Error::Contract("stage 3 needs a memory bank; build it after stage 2".into())
        })?;
        let frozen = [
            ("backbone.", self.store.digest("backbone.")),
            ("stf.", self.store.digest("stf.")),
            (
                MEMORY_CLASSIFIER_PREFIX,
                self.store.digest(MEMORY_CLASSIFIER_PREFIX),
            ),
        ];
        let (train, val) = self.fused_frames()?;
        let history = train_refinement(
            &self.model,
            &mut self.store,
            &bank,
            &train,
            &val,
            self.cfg.stage3_epochs,
            self.cfg.stage3_lr,
            self.cfg.batch_frames,
            self.seed,
            "stage3",
        )?;
        self.check_frozen(&frozen, 3)?;
        self.record(3, &history);
        self.finished = 3;
        Ok(())
    }

    pub fn into_parts(self) -> (Segmenter, ParamStore, Option<MemoryBank>, Vec<MetricRecord>) {
        (self.model, self.store, self.bank, self.log)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Segmenter,
    pub store: ParamStore,
    pub bank: MemoryBank,
    pub log: Vec<MetricRecord>,
}

pub fn train_multistage(
    data: &Dataset,
    model: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let (h, w) = frame_size(data)?;
    let seg = Segmenter::new(model, data.classes, h, w)?;
    let mut tr = Trainer::new(seg, cfg.clone(), data, seed)?;
    tr.stage1()?;
    tr.stage2()?;
    tr.build_memory()?;
    tr.stage3()?;
    let (model, store, bank, log) = tr.into_parts();
    Ok(TrainOutcome {
        model,
        store,
        bank: bank.expect("built before stage 3"),
        log,
    })
}

/// Final val mIoU of the four module combinations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub baseline: f64,
    pub stf: f64,
    pub mar: f64,
    pub stf_mar: f64,
}

/// Runs the schedule plus a refinement branch trained directly on the
/// stage-one backbone (memory built from stage-one features and classifier).
pub fn run_ablation(
    data: &Dataset,
    model: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<AblationResult> {
    let (h, w) = frame_size(data)?;
    let seg = Segmenter::new(model, data.classes, h, w)?;
    let mut tr = Trainer::new(seg, cfg.clone(), data, seed)?;
    tr.stage1()?;
    let baseline = tr.final_miou(1).expect("stage 1 logged");

    let (train, val) = tr.backbone_frames()?;
    let mut branch = tr.store().clone();
    let bank = build_bank(tr.model(), &branch, &train)?;
    let history = train_refinement(
        tr.model(),
        &mut branch,
        &bank,
        &train,
        &val,
        cfg.stage3_epochs,
        cfg.stage3_lr,
        cfg.batch_frames,
        seed,
        "ablation",
    )?;
    let mar = *history.last().unwrap_or(&baseline);

    tr.stage2()?;
    tr.build_memory()?;
    tr.stage3()?;
    Ok(AblationResult {
        baseline,
        stf: tr.final_miou(2).expect("stage 2 logged"),
        mar,
        stf_mar: tr.final_miou(3).expect("stage 3 logged"),
    })
}

fn frame_size(data: &Dataset) -> Result<(usize, usize)> {
    let f = data
        .train
        .first()
        .and_then(|c| c.frames.first())
        .ok_or_else(|| Error::Contract("empty training split".into()))?;
    Ok((f.shape()[0], f.shape()[1]))
}
