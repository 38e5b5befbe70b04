//! Scaled dot-product, multi-head, block-wise and interlaced cross-self attention.

mod icsa;
mod mha;
mod reference;
mod volume;

pub use icsa::Icsa;
pub use mha::{bwa, sda, MultiHeadAttention};
pub use reference::{dense_attention_reference, isa_reference};
pub use volume::{
    combine_blocks, inverse_index, long_range_groups, long_range_index, long_range_permute,
    long_range_restore, partition_blocks, partition_index, BlockPartition, FeatureVolume,
    GroupedTokens, VolumeShape, VolumeVar,
};
