//! Closed-form attention cost counts. Only matrix-product multiply-adds are
//! counted (projections, scores, weighted sums, FFN); normalization and
//! softmax are free.

use serde::{Deserialize, Serialize};

use crate::attention::BlockPartition;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostConfig {
    pub dim: u64,
    pub heads: u64,
    pub ffn_dim: u64,
    /// Frames in the fused volume.
    pub frames: u64,
    pub height: u64,
    pub width: u64,
    pub partition: BlockPartition,
    pub encoder_layers: u64,
    pub decoder_layers: u64,
    pub classes: u64,
    /// Memory keys `C·K_L`.
    pub memory_keys: u64,
    pub mar_ffn_dim: u64,
}

impl CostConfig {
    /// Volume of `frames × height × width` tokens with the toy model defaults.
    pub fn new(frames: u64, height: u64, width: u64, partition: BlockPartition) -> Self {
        Self {
            dim: 8,
            heads: 2,
            ffn_dim: 16,
            frames,
            height,
            width,
            partition,
            encoder_layers: 1,
            decoder_layers: 1,
            classes: 4,
            memory_keys: 40,
            mar_ffn_dim: 16,
        }
    }
}

/// Cost of one attention layer over a query volume and a key/value volume.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionCost {
    /// Affinity entries of the long-range stage (zero for dense attention).
    pub long_entries: u64,
    /// Affinity entries of the short-range stage, or of the single dense map.
    pub short_entries: u64,
    pub macs: u64,
}

impl AttentionCost {
    pub fn total_entries(&self) -> u64 {
        self.long_entries + self.short_entries
    }

    /// Largest affinity map alive at any one time.
    pub fn peak_entries(&self) -> u64 {
        self.long_entries.max(self.short_entries)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub config: CostConfig,
    /// `N = T·H·W`.
    pub tokens: u64,
    /// Self-attention over the whole volume, dense.
    pub dense: AttentionCost,
    /// The same layer as interlaced long/short-range attention.
    pub icsa: AttentionCost,
    pub stf_macs: u64,
    pub mar_macs: u64,
    pub classifier_macs: u64,
}

impl CostReport {
    pub fn dense_entries(&self) -> u64 {
        self.dense.total_entries()
    }

    /// Dense entries over the summed ICSA entries of both stages.
    pub fn reduction(&self) -> f64 {
        ratio(self.dense.total_entries(), self.icsa.total_entries())
    }

    /// Dense entries over the larger of the two ICSA stages.
    pub fn peak_reduction(&self) -> f64 {
        ratio(self.dense.peak_entries(), self.icsa.peak_entries())
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn projections(n_q: u64, n_kv: u64, d: u64) -> u64 {
    2 * n_q * d * d + 2 * n_kv * d * d
}

pub fn dense_cost(t_q: u64, t_kv: u64, h: u64, w: u64, d: u64) -> AttentionCost {
    let (n_q, n_kv) = (t_q * h * w, t_kv * h * w);
    let entries = n_q * n_kv;
    AttentionCost {
        long_entries: 0,
        short_entries: entries,
        macs: projections(n_q, n_kv, d) + 2 * entries * d,
    }
}

pub fn icsa_cost(t_q: u64, t_kv: u64, h: u64, w: u64, p: BlockPartition, d: u64) -> AttentionCost {
    let (b_h, b_w) = (p.b_h as u64, p.b_w as u64);
    if b_h == 0 || b_w == 0 {
        return AttentionCost::default();
    }
    let k = b_h * b_w;
    let block_pixels = (h / b_h) * (w / b_w);
    let (n_q, n_kv) = (t_q * h * w, t_kv * h * w);
    // Each query sees the k·T_kv tokens sharing its in-block offset, then
    // every token of its own block in the query-shaped volume.
    let long = n_q * k * t_kv;
    let short = n_q * t_q * block_pixels;
    AttentionCost {
        long_entries: long,
        short_entries: short,
        macs: projections(n_q, n_kv, d) + 2 * long * d + projections(n_q, n_q, d) + 2 * short * d,
    }
}

pub fn estimate_cost(cfg: &CostConfig) -> CostReport {
    let (t, h, w, d) = (cfg.frames, cfg.height, cfg.width, cfg.dim);
    let p = cfg.partition;
    let n = t * h * w;
    let frame = h * w;
    let ffn = |tokens: u64| 2 * tokens * d * cfg.ffn_dim;
    let encoder = icsa_cost(t, t, h, w, p, d).macs + ffn(n);
    let decoder = icsa_cost(1, 1, h, w, p, d).macs + icsa_cost(1, t, h, w, p, d).macs + ffn(frame);
    let m = cfg.memory_keys;
    if n == 0 {
        return CostReport {
            config: *cfg,
            tokens: 0,
            dense: AttentionCost::default(),
            icsa: AttentionCost::default(),
            stf_macs: 0,
            mar_macs: 0,
            classifier_macs: 0,
        };
    }
    CostReport {
        config: *cfg,
        tokens: n,
        dense: dense_cost(t, t, h, w, d),
        icsa: icsa_cost(t, t, h, w, p, d),
        stf_macs: cfg.encoder_layers * encoder + cfg.decoder_layers * decoder,
        mar_macs: frame * d * d + m * d * d + 2 * frame * m * d + 2 * frame * d * cfg.mar_ffn_dim,
        classifier_macs: frame * d * cfg.classes,
    }
}

/// Reports for every square grid `b × b` that divides both spatial extents.
pub fn partition_sweep(cfg: &CostConfig) -> Vec<CostReport> {
    (1..=cfg.height.min(cfg.width))
        .filter(|b| cfg.height.is_multiple_of(*b) && cfg.width.is_multiple_of(*b))
        .map(|b| {
            estimate_cost(&CostConfig {
                partition: BlockPartition::new(b as usize, b as usize),
                ..*cfg
            })
        })
        .collect()
}
