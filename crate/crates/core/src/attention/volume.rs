//! Feature volumes, block partitions, and the token index maps that regroup
//! a volume for block-wise (short-range) and interlaced (long-range) attention.
//!
//! Volumes are stored token-major: row `t·H·W + y·W + x` holds the `d`
//! features of position `(t, y, x)`.

use crate::numerics::{Graph, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VolumeShape {
    pub d: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl VolumeShape {
    pub fn new(d: usize, t: usize, h: usize, w: usize) -> Self {
        Self { d, t, h, w }
    }

    pub fn tokens(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn token(&self, t: usize, y: usize, x: usize) -> usize {
        (t * self.h + y) * self.w + x
    }

    pub fn with_t(self, t: usize) -> Self {
        Self { t, ..self }
    }

    pub fn matrix_shape(&self) -> [usize; 2] {
        [self.tokens(), self.d]
    }
}

/// A `d × T × H × W` block of features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume {
    shape: VolumeShape,
    tokens: Tensor,
}

impl FeatureVolume {
    /// Wraps a token-major `[T·H·W, d]` matrix.
    pub fn from_tokens(shape: VolumeShape, tokens: Tensor) -> Result<Self> {
        if tokens.shape() != shape.matrix_shape() {
            return Err(Error::Shape {
                what: "feature volume tokens",
                expected: shape.matrix_shape().to_vec(),
                found: tokens.shape().to_vec(),
            });
        }
        Ok(Self { shape, tokens })
    }

    /// From a channel-major `[d, T, H, W]` tensor.
    pub fn from_channel_major(t: &Tensor) -> Result<Self> {
        let &[d, tt, h, w] = t.shape() else {
            return Err(Error::Shape {
                what: "channel-major volume",
                expected: vec![0; 4],
                found: t.shape().to_vec(),
            });
        };
        let tokens = t.permute(&[1, 2, 3, 0])?.reshape(&[tt * h * w, d])?;
        Ok(Self {
            shape: VolumeShape::new(d, tt, h, w),
            tokens,
        })
    }

    pub fn to_channel_major(&self) -> Tensor {
        let s = self.shape;
        self.tokens
            .reshape(&[s.t, s.h, s.w, s.d])
            .and_then(|t| t.permute(&[3, 0, 1, 2]))
            .expect("volume invariant holds")
    }

    pub fn shape(&self) -> VolumeShape {
        self.shape
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn into_tokens(self) -> Tensor {
        self.tokens
    }
}

/// A volume living on a [`Graph`].
#[derive(Clone, Copy, Debug)]
pub struct VolumeVar {
    pub var: Var,
    pub shape: VolumeShape,
}

impl VolumeVar {
    pub fn new(g: &Graph, var: Var, shape: VolumeShape) -> Result<Self> {
        if g.shape(var) != shape.matrix_shape() {
            return Err(Error::Shape {
                what: "volume variable",
                expected: shape.matrix_shape().to_vec(),
                found: g.shape(var).to_vec(),
            });
        }
        Ok(Self { var, shape })
    }
}

/// Spatial block grid: `b_h` blocks down, `b_w` blocks across.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct BlockPartition {
    pub b_h: usize,
    pub b_w: usize,
}

impl BlockPartition {
    pub fn new(b_h: usize, b_w: usize) -> Self {
        Self { b_h, b_w }
    }

    /// Block count `k`.
    pub fn blocks(&self) -> usize {
        self.b_h * self.b_w
    }

    /// Spatial size `(H / b_h, W / b_w)` of one block.
    pub fn block_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.b_h == 0
            || self.b_w == 0
            || !h.is_multiple_of(self.b_h)
            || !w.is_multiple_of(self.b_w)
        {
            return Err(Error::Partition {
                b_h: self.b_h,
                b_w: self.b_w,
                h,
                w,
            });
        }
        Ok((h / self.b_h, w / self.b_w))
    }

    /// Natural block enumeration, row-major over the grid.
    pub fn natural_order(&self) -> Vec<usize> {
        (0..self.blocks()).collect()
    }
}

impl Default for BlockPartition {
    fn default() -> Self {
        Self::new(2, 2)
    }
}

fn check_order(p: &BlockPartition, order: &[usize]) {
    let mut seen = vec![false; p.blocks()];
    assert_eq!(order.len(), seen.len(), "block order must list every block");
    for &b in order {
        assert!(
            !std::mem::replace(&mut seen[b], true),
            "block {b} listed twice"
        );
    }
}

/// Block-major token order: blocks in `order`, then `t`, then the in-block
/// offset row-major. Group `i` (of `k`) is the contiguous run of
/// `T·(H/b_h)·(W/b_w)` tokens of the `i`-th listed block.
pub(crate) fn partition_index_ordered(
    s: VolumeShape,
    p: BlockPartition,
    order: &[usize],
) -> Result<Vec<usize>> {
    let (sh, sw) = p.block_size(s.h, s.w)?;
    check_order(&p, order);
    let mut idx = Vec::with_capacity(s.tokens());
    for &b in order {
        let (bi, bj) = (b / p.b_w, b % p.b_w);
        for t in 0..s.t {
            for y in 0..sh {
                for x in 0..sw {
                    idx.push(s.token(t, bi * sh + y, bj * sw + x));
                }
            }
        }
    }
    Ok(idx)
}

/// Offset-major token order: in-block offset `(y', x')` row-major, then `t`,
/// then blocks in `order`. Group `j` is the contiguous run of `k·T` tokens
/// sharing the `j`-th spatial offset across every block and frame.
pub(crate) fn long_range_index_ordered(
    s: VolumeShape,
    p: BlockPartition,
    order: &[usize],
) -> Result<Vec<usize>> {
    let (sh, sw) = p.block_size(s.h, s.w)?;
    check_order(&p, order);
    let mut idx = Vec::with_capacity(s.tokens());
    for y in 0..sh {
        for x in 0..sw {
            for t in 0..s.t {
                for &b in order {
                    let (bi, bj) = (b / p.b_w, b % p.b_w);
                    idx.push(s.token(t, bi * sh + y, bj * sw + x));
                }
            }
        }
    }
    Ok(idx)
}

/// Index map for short-range blocks: position `j` holds source token `index[j]`.
pub fn partition_index(s: VolumeShape, p: BlockPartition) -> Result<Vec<usize>> {
    partition_index_ordered(s, p, &p.natural_order())
}

/// Index map for long-range groups: position `j` holds source token `index[j]`.
pub fn long_range_index(s: VolumeShape, p: BlockPartition) -> Result<Vec<usize>> {
    long_range_index_ordered(s, p, &p.natural_order())
}

/// Number of long-range groups, one per in-block spatial offset.
pub fn long_range_groups(s: VolumeShape, p: BlockPartition) -> Result<usize> {
    let (sh, sw) = p.block_size(s.h, s.w)?;
    Ok(sh * sw)
}

pub fn inverse_index(index: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; index.len()];
    for (j, &i) in index.iter().enumerate() {
        inv[i] = j;
    }
    inv
}

fn gather_tokens(t: &Tensor, index: &[usize]) -> Tensor {
    let d = t.last_dim();
    let data = index
        .iter()
        .flat_map(|&i| t.row(i).iter().copied())
        .collect();
    Tensor::new(vec![index.len(), d], data).expect("gathered rows keep width")
}

/// Splits a volume into its `k` blocks, each `d × T × (H/b_h) × (W/b_w)`, in
/// row-major grid order.
pub fn partition_blocks(x: &FeatureVolume, p: BlockPartition) -> Result<Vec<FeatureVolume>> {
    let s = x.shape();
    let (sh, sw) = p.block_size(s.h, s.w)?;
    let idx = partition_index(s, p)?;
    let block_shape = VolumeShape::new(s.d, s.t, sh, sw);
    let per = block_shape.tokens();
    idx.chunks(per)
        .map(|chunk| FeatureVolume::from_tokens(block_shape, gather_tokens(&x.tokens, chunk)))
        .collect()
}

/// Inverse of [`partition_blocks`].
pub fn combine_blocks(
    blocks: &[FeatureVolume],
    p: BlockPartition,
    shape: VolumeShape,
) -> Result<FeatureVolume> {
    let (sh, sw) = p.block_size(shape.h, shape.w)?;
    let block_shape = VolumeShape::new(shape.d, shape.t, sh, sw);
    if blocks.len() != p.blocks() || blocks.iter().any(|b| b.shape() != block_shape) {
        return Err(Error::Shape {
            what: "blocks to combine",
            expected: vec![p.blocks(), shape.d, shape.t, sh, sw],
            found: vec![blocks.len()],
        });
    }
    let parts: Vec<&Tensor> = blocks.iter().map(|b| &b.tokens).collect();
    let stacked = Tensor::concat(&parts)?;
    let inv = inverse_index(&partition_index(shape, p)?);
    FeatureVolume::from_tokens(shape, gather_tokens(&stacked, &inv))
}

/// Tokens regrouped so that each long-range group is contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedTokens {
    pub source: VolumeShape,
    pub partition: BlockPartition,
    pub groups: usize,
    pub group_len: usize,
    pub tokens: Tensor,
}

pub fn long_range_permute(x: &FeatureVolume, p: BlockPartition) -> Result<GroupedTokens> {
    let s = x.shape();
    let idx = long_range_index(s, p)?;
    let groups = long_range_groups(s, p)?;
    Ok(GroupedTokens {
        source: s,
        partition: p,
        groups,
        group_len: s.tokens() / groups,
        tokens: gather_tokens(&x.tokens, &idx),
    })
}

/// Puts long-range grouped tokens back at their original positions.
pub fn long_range_restore(g: &GroupedTokens) -> Result<FeatureVolume> {
    let inv = inverse_index(&long_range_index(g.source, g.partition)?);
    FeatureVolume::from_tokens(g.source, gather_tokens(&g.tokens, &inv))
}
