use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use stfmar_core::attention::BlockPartition;
use stfmar_core::pipeline::{CostConfig, ModelConfig, SyntheticConfig, TrainConfig};

/// Everything a run needs, read from one TOML file. Missing sections and
/// fields take their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: SyntheticConfig,
    pub train: TrainConfig,
    pub paths: Paths,
    pub bench: BenchConfig,
}

/// Output locations. File names are relative to `out_dir`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub out_dir: PathBuf,
    pub params: PathBuf,
    pub bank: PathBuf,
    pub metrics: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            out_dir: "out".into(),
            params: "params.ntc".into(),
            bank: "bank.marb".into(),
            metrics: "metrics.jsonl".into(),
        }
    }
}

/// Volume whose attention cost `bench` reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub frames: u64,
    pub height: u64,
    pub width: u64,
    pub partition: BlockPartition,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            frames: 3,
            height: 128,
            width: 256,
            partition: BlockPartition::new(16, 16),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Every problem with the configuration at once.
    pub fn validate(&self) -> Vec<String> {
        let mut errs: Vec<String> = self
            .data
            .validate()
            .into_iter()
            .map(|e| format!("data: {e}"))
            .collect();
        errs.extend(self.model.validate(self.data.height, self.data.width));
        errs.extend(self.train.validate());
        for (name, p) in [
            ("params", &self.paths.params),
            ("bank", &self.paths.bank),
            ("metrics", &self.paths.metrics),
        ] {
            if !is_plain_relative(p) {
                errs.push(format!(
                    "paths.{name} `{}` must be a file name inside out_dir",
                    p.display()
                ));
            }
        }
        if self.paths.out_dir.as_os_str().is_empty() {
            errs.push("paths.out_dir must not be empty".into());
        }
        let b = &self.bench;
        if b.partition.b_h == 0 || b.partition.b_w == 0 {
            errs.push("bench.partition entries must be positive".into());
        } else if !b.height.is_multiple_of(b.partition.b_h as u64)
            || !b.width.is_multiple_of(b.partition.b_w as u64)
        {
            errs.push(format!(
                "bench.partition {}x{} does not divide {}x{}",
                b.partition.b_h, b.partition.b_w, b.height, b.width
            ));
        }
        errs
    }

    pub fn out_path(&self, name: &Path) -> PathBuf {
        self.paths.out_dir.join(name)
    }

    /// Cost model of the configured network over the bench volume.
    pub fn cost_config(&self) -> CostConfig {
        let m = &self.model;
        CostConfig {
            dim: m.dim as u64,
            heads: m.heads as u64,
            ffn_dim: m.ffn_dim as u64,
            frames: self.bench.frames,
            height: self.bench.height,
            width: self.bench.width,
            partition: self.bench.partition,
            encoder_layers: m.encoder_layers as u64,
            decoder_layers: m.decoder_layers as u64,
            classes: self.data.classes as u64,
            memory_keys: (self.data.classes * m.k_low) as u64,
            mar_ffn_dim: m.mar_ffn_dim as u64,
        }
    }
}

fn is_plain_relative(p: &Path) -> bool {
    !p.as_os_str().is_empty() && p.components().all(|c| matches!(c, Component::Normal(_)))
}
