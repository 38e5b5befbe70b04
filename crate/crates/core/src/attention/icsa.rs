use rand::Rng;

use super::mha::{bwa_ordered, check_grids, MultiHeadAttention};
use super::volume::{
    inverse_index, long_range_groups, long_range_index_ordered, BlockPartition, VolumeShape,
    VolumeVar,
};
use crate::numerics::{Graph, Tensor};
use crate::params::{Binding, ParamStore};
use crate::{Error, Result};

/// Interlaced cross-self attention.
///
/// Long-range cross-attention runs over groups of tokens that share an
/// in-block spatial offset (across all blocks and frames); short-range
/// self-attention then runs inside each block of the result. Learnable
/// positional encodings are added to queries and keys at both stages, never
/// to values.
#[derive(Clone, Debug, PartialEq)]
pub struct Icsa {
    prefix: String,
    partition: BlockPartition,
    query_shape: VolumeShape,
    kv_shape: VolumeShape,
    long: MultiHeadAttention,
    short: MultiHeadAttention,
}

impl Icsa {
    pub fn new(
        prefix: impl Into<String>,
        heads: usize,
        partition: BlockPartition,
        query_shape: VolumeShape,
        kv_shape: VolumeShape,
    ) -> Result<Self> {
        let prefix = prefix.into();
        if query_shape.d != kv_shape.d || query_shape.h != kv_shape.h || query_shape.w != kv_shape.w
        {
            return Err(Error::Shape {
                what: "icsa query/key grids",
                expected: vec![query_shape.d, query_shape.h, query_shape.w],
                found: vec![kv_shape.d, kv_shape.h, kv_shape.w],
            });
        }
        partition.block_size(query_shape.h, query_shape.w)?;
        let d = query_shape.d;
        Ok(Self {
            long: MultiHeadAttention::new(format!("{prefix}.long"), d, heads)?,
            short: MultiHeadAttention::new(format!("{prefix}.short"), d, heads)?,
            prefix,
            partition,
            query_shape,
            kv_shape,
        })
    }

    pub fn long(&self) -> &MultiHeadAttention {
        &self.long
    }

    pub fn short(&self) -> &MultiHeadAttention {
        &self.short
    }

    pub fn partition(&self) -> BlockPartition {
        self.partition
    }

    pub fn pe_long_q(&self) -> String {
        format!("{}.pe_long_q", self.prefix)
    }

    pub fn pe_long_k(&self) -> String {
        format!("{}.pe_long_k", self.prefix)
    }

    pub fn pe_short(&self) -> String {
        format!("{}.pe_short", self.prefix)
    }

    /// Random projections, zero positional encodings.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.long.init(store, rng)?;
        self.short.init(store, rng)?;
        let qm = self.query_shape.matrix_shape();
        store.insert(self.pe_long_q(), Tensor::zeros(&qm))?;
        store.insert(
            self.pe_long_k(),
            Tensor::zeros(&self.kv_shape.matrix_shape()),
        )?;
        store.insert(self.pe_short(), Tensor::zeros(&qm))?;
        Ok(())
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Binding,
        query: VolumeVar,
        kv: VolumeVar,
    ) -> Result<VolumeVar> {
        self.forward_ordered(g, b, query, kv, &self.partition.natural_order())
    }

    /// Same computation with blocks enumerated in `order`.
    pub(crate) fn forward_ordered(
        &self,
        g: &mut Graph,
        b: &Binding,
        query: VolumeVar,
        kv: VolumeVar,
        order: &[usize],
    ) -> Result<VolumeVar> {
        if query.shape != self.query_shape || kv.shape != self.kv_shape {
            return Err(Error::Shape {
                what: "icsa inputs",
                expected: vec![self.query_shape.t, self.kv_shape.t],
                found: vec![query.shape.t, kv.shape.t],
            });
        }
        check_grids(query, kv, kv)?;
        let p = self.partition;

        // Long-range cross-attention over same-offset groups.
        let pe_q = b.var(&self.pe_long_q())?;
        let pe_k = b.var(&self.pe_long_k())?;
        let q = g.add(query.var, pe_q)?;
        let k = g.add(kv.var, pe_k)?;
        let qi = long_range_index_ordered(query.shape, p, order)?;
        let ki = long_range_index_ordered(kv.shape, p, order)?;
        let qg = g.gather_rows(q, &qi)?;
        let kg = g.gather_rows(k, &ki)?;
        let vg = g.gather_rows(kv.var, &ki)?;
        let groups = long_range_groups(query.shape, p)?;
        let long = self.long.forward_grouped(g, b, qg, kg, vg, groups)?;
        let long = g.gather_rows(long, &inverse_index(&qi))?;

        // Short-range self-attention inside each block.
        let pe_s = b.var(&self.pe_short())?;
        let qk = g.add(long, pe_s)?;
        let qk = VolumeVar::new(g, qk, query.shape)?;
        let value = VolumeVar::new(g, long, query.shape)?;
        bwa_ordered(g, b, &self.short, qk, qk, value, p, order)
    }
}
