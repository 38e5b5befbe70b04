use rand::Rng;

use super::volume::{inverse_index, partition_index_ordered, BlockPartition, VolumeVar};
use crate::numerics::{Graph, NumericsError, Var};
use crate::params::{fan_in_uniform, Binding, ParamStore};
use crate::{Error, Result};

/// Scaled dot-product attention `softmax(Q·Kᵀ/√d_k)·V`, composed from tape ops.
pub fn sda(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    let (sq, sk, sv) = (g.shape(q), g.shape(k), g.shape(v));
    if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
        return Err(NumericsError::ShapeMismatch {
            op: "sda",
            lhs: sq.to_vec(),
            rhs: sk.to_vec(),
        }
        .into());
    }
    if sv.len() != 2 || sv[0] != sk[0] {
        return Err(NumericsError::ShapeMismatch {
            op: "sda",
            lhs: sk.to_vec(),
            rhs: sv.to_vec(),
        }
        .into());
    }
    let dk = sq[1] as f64;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / dk.sqrt());
    let weights = g.softmax(scores, 1)?;
    Ok(g.matmul(weights, v)?)
}

/// Multi-head attention whose weights live in a [`ParamStore`] under `prefix`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    prefix: String,
    dim: usize,
    heads: usize,
}

const PROJECTIONS: [&str; 4] = ["q", "k", "v", "o"];

impl MultiHeadAttention {
    pub fn new(prefix: impl Into<String>, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(NumericsError::HeadSplit { dim, heads }.into());
        }
        Ok(Self {
            prefix: prefix.into(),
            dim,
            heads,
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn weight_name(&self, proj: &str) -> String {
        format!("{}.w{proj}", self.prefix)
    }

    pub fn bias_name(&self, proj: &str) -> String {
        format!("{}.b{proj}", self.prefix)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let d = self.dim;
        for p in PROJECTIONS {
            store.insert(self.weight_name(p), fan_in_uniform(&[d, d], d, rng))?;
            store.insert(self.bias_name(p), fan_in_uniform(&[d], d, rng))?;
        }
        Ok(())
    }

    fn project(&self, g: &mut Graph, b: &Binding, x: Var, proj: &str) -> Result<Var> {
        let w = b.var(&self.weight_name(proj))?;
        let bias = b.var(&self.bias_name(proj))?;
        Ok(g.linear(x, w, bias)?)
    }

    /// Attention over token matrices split into `groups` contiguous query and
    /// key/value groups; group `i` of the queries sees only group `i` of the keys.
    pub fn forward_grouped(
        &self,
        g: &mut Graph,
        b: &Binding,
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
    ) -> Result<Var> {
        for x in [q, k, v] {
            if g.shape(x).len() != 2 || g.shape(x)[1] != self.dim {
                return Err(Error::Shape {
                    what: "attention tokens",
                    expected: vec![g.shape(x)[0], self.dim],
                    found: g.shape(x).to_vec(),
                });
            }
        }
        let qp = self.project(g, b, q, "q")?;
        let kp = self.project(g, b, k, "k")?;
        let vp = self.project(g, b, v, "v")?;
        let o = g.grouped_attention(qp, kp, vp, groups, self.heads)?;
        self.project(g, b, o, "o")
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, q: Var, k: Var, v: Var) -> Result<Var> {
        self.forward_grouped(g, b, q, k, v, 1)
    }
}

/// Block-wise attention: query block `i` attends only to key/value block `i`.
pub fn bwa(
    g: &mut Graph,
    b: &Binding,
    mha: &MultiHeadAttention,
    q: VolumeVar,
    k: VolumeVar,
    v: VolumeVar,
    p: BlockPartition,
) -> Result<VolumeVar> {
    bwa_ordered(g, b, mha, q, k, v, p, &p.natural_order())
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn bwa_ordered(
    g: &mut Graph,
    b: &Binding,
    mha: &MultiHeadAttention,
    q: VolumeVar,
    k: VolumeVar,
    v: VolumeVar,
    p: BlockPartition,
    order: &[usize],
) -> Result<VolumeVar> {
    check_grids(q, k, v)?;
    let qi = partition_index_ordered(q.shape, p, order)?;
    let ki = partition_index_ordered(k.shape, p, order)?;
    let qs = g.gather_rows(q.var, &qi)?;
    let ks = g.gather_rows(k.var, &ki)?;
    let vs = g.gather_rows(v.var, &ki)?;
    let o = mha.forward_grouped(g, b, qs, ks, vs, p.blocks())?;
    let out = g.gather_rows(o, &inverse_index(&qi))?;
    VolumeVar::new(g, out, q.shape)
}

pub(crate) fn check_grids(q: VolumeVar, k: VolumeVar, v: VolumeVar) -> Result<()> {
    let (qs, ks) = (q.shape, k.shape);
    if k.shape != v.shape || qs.d != ks.d || qs.h != ks.h || qs.w != ks.w {
        return Err(Error::Shape {
            what: "query/key/value grids",
            expected: vec![qs.d, ks.t, qs.h, qs.w],
            found: vec![
                ks.d, ks.t, ks.h, ks.w, v.shape.d, v.shape.t, v.shape.h, v.shape.w,
            ],
        });
    }
    Ok(())
}
