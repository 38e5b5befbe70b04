//! Loop-based oracles with no tape and no index maps.

use super::mha::MultiHeadAttention;
use super::volume::BlockPartition;
use crate::numerics::Tensor;
use crate::params::ParamStore;
use crate::Result;

/// Dense multi-head attention over all tokens, written with plain loops and
/// no tape. Serves as the quadratic-cost oracle for the blocked paths.
pub fn dense_attention_reference(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    store: &ParamStore,
    mha: &MultiHeadAttention,
) -> Result<Tensor> {
    let d = mha.dim();
    let project = |x: &Tensor, proj: &str| -> Result<Vec<Vec<f64>>> {
        let w = store.get(&mha.weight_name(proj))?;
        let bias = store.get(&mha.bias_name(proj))?;
        Ok((0..x.rows())
            .map(|r| {
                let row = x.row(r);
                (0..d)
                    .map(|j| {
                        bias.data()[j] + (0..d).map(|i| row[i] * w.data()[i * d + j]).sum::<f64>()
                    })
                    .collect()
            })
            .collect())
    };
    let (qp, kp, vp) = (project(q, "q")?, project(k, "k")?, project(v, "v")?);
    let dh = d / mha.heads();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut concat = vec![vec![0.0; d]; qp.len()];
    for h in 0..mha.heads() {
        let cols = h * dh..(h + 1) * dh;
        for (qi, out) in qp.iter().zip(concat.iter_mut()) {
            let scores: Vec<f64> = kp
                .iter()
                .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() * scale)
                .collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in cols.clone() {
                out[c] = exps.iter().zip(&vp).map(|(e, vj)| e / z * vj[c]).sum();
            }
        }
    }
    let o = Tensor::from_rows(&concat)?;
    let out = project(&o, "o")?;
    Ok(Tensor::from_rows(&out)?)
}

/// Interlaced sparse self-attention on a single frame `[H·W, d]`, coded
/// directly from coordinates: long-range attention among tokens sharing an
/// in-block offset, then short-range attention within each block, each stage
/// a dense attention over the gathered tokens.
pub fn isa_reference(
    x: &Tensor,
    h: usize,
    w: usize,
    p: BlockPartition,
    store: &ParamStore,
    long: &MultiHeadAttention,
    short: &MultiHeadAttention,
) -> Result<Tensor> {
    let (sh, sw) = p.block_size(h, w)?;
    let d = x.last_dim();
    let run = |src: &Tensor,
               coords: &[(usize, usize)],
               mha: &MultiHeadAttention,
               dst: &mut Vec<Vec<f64>>|
     -> Result<()> {
        let rows: Vec<Vec<f64>> = coords
            .iter()
            .map(|&(y, xx)| src.row(y * w + xx).to_vec())
            .collect();
        let t = Tensor::from_rows(&rows)?;
        let out = dense_attention_reference(&t, &t, &t, store, mha)?;
        for (i, &(y, xx)) in coords.iter().enumerate() {
            dst[y * w + xx] = out.row(i).to_vec();
        }
        Ok(())
    };

    let mut stage1 = vec![vec![0.0; d]; h * w];
    for oy in 0..sh {
        for ox in 0..sw {
            let coords: Vec<(usize, usize)> = (0..p.b_h)
                .flat_map(|bi| (0..p.b_w).map(move |bj| (bi * sh + oy, bj * sw + ox)))
                .collect();
            run(x, &coords, long, &mut stage1)?;
        }
    }
    let stage1 = Tensor::from_rows(&stage1)?;

    let mut stage2 = vec![vec![0.0; d]; h * w];
    for bi in 0..p.b_h {
        for bj in 0..p.b_w {
            let coords: Vec<(usize, usize)> = (0..sh)
                .flat_map(|y| (0..sw).map(move |xx| (bi * sh + y, bj * sw + xx)))
                .collect();
            run(&stage1, &coords, short, &mut stage2)?;
        }
    }
    Ok(Tensor::from_rows(&stage2)?)
}
