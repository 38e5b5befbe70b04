//! Fast invariant suite runnable from the command line.

use std::time::Instant;

use crate::attention::{
    bwa, dense_attention_reference, inverse_index, isa_reference, long_range_index,
    partition_index, BlockPartition, Icsa, MultiHeadAttention, VolumeShape, VolumeVar,
};
use crate::mar::{mar_attend, mar_scores, Mar, MemoryBank};
use crate::numerics::{grad_check, Graph, Tensor, Var};
use crate::params::{Binding, ParamStore};
use crate::rng;
use crate::stf::{Stf, StfConfig};
use crate::Result;

/// Deliberate defects for checking that the suite notices them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Overwrites one entry of every permutation under test.
    FlipPermutationIndex,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Check = fn(Option<Fault>) -> Result<(bool, String)>;

pub fn run_selftest(fault: Option<Fault>) -> Vec<CheckOutcome> {
    let checks: [(&'static str, Check); 6] = [
        ("permutation bijections", permutations),
        ("bwa single block equals dense", bwa_dense),
        ("icsa on one frame equals isa", icsa_isa),
        ("mar readout in prototype hull", mar_hull),
        ("attention gradients", attention_gradients),
        ("stf and mar gradients", block_gradients),
    ];
    checks
        .iter()
        .map(|&(name, check)| {
            let start = Instant::now();
            let (passed, detail) = check(fault).unwrap_or_else(|e| (false, format!("error: {e}")));
            CheckOutcome {
                name,
                passed,
                detail,
                seconds: start.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

fn is_bijection(index: &[usize]) -> bool {
    let mut seen = vec![false; index.len()];
    for &i in index {
        if i >= seen.len() || seen[i] {
            return false;
        }
        seen[i] = true;
    }
    true
}

fn permutations(fault: Option<Fault>) -> Result<(bool, String)> {
    let mut checked = 0;
    for (t, h, w, b_h, b_w) in [
        (1, 4, 4, 2, 2),
        (3, 4, 6, 2, 3),
        (2, 8, 8, 4, 2),
        (3, 6, 6, 1, 1),
    ] {
        let shape = VolumeShape::new(2, t, h, w);
        let p = BlockPartition::new(b_h, b_w);
        for mut index in [partition_index(shape, p)?, long_range_index(shape, p)?] {
            if fault == Some(Fault::FlipPermutationIndex) {
                index[1] = index[0];
            }
            let inv = inverse_index(&index);
            let round_trip = (0..index.len()).all(|j| inv.get(index[j]) == Some(&j));
            if !is_bijection(&index) || !round_trip {
                return Ok((
                    false,
                    format!("map for T={t} {h}x{w} grid {b_h}x{b_w} is not a bijection"),
                ));
            }
            checked += 1;
        }
    }
    let index = long_range_index(VolumeShape::new(1, 1, 4, 4), BlockPartition::new(2, 2))?;
    if index[..4] != [0, 2, 8, 10] {
        return Ok((
            false,
            format!("first long-range group is {:?}", &index[..4]),
        ));
    }
    Ok((true, format!("{checked} maps")))
}

fn mha_store(mha: &MultiHeadAttention, seed: u64) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    mha.init(&mut store, &mut rng::stream(seed, "selftest.mha"))?;
    Ok(store)
}

fn bwa_dense(_: Option<Fault>) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mut r = rng::stream(seed, "selftest.bwa");
        let d = [4, 8][seed as usize % 2];
        let shape = VolumeShape::new(d, 1 + seed as usize % 2, 2 + seed as usize % 3, 4);
        let mha = MultiHeadAttention::new("m", d, [1, 2, 4][seed as usize % 3])?;
        let store = mha_store(&mha, seed)?;
        let mut g = Graph::new();
        let b = Binding::frozen(&mut g, &store);
        let q = Tensor::uniform(&shape.matrix_shape(), 1.0, &mut r);
        let kv = Tensor::uniform(&shape.matrix_shape(), 1.0, &mut r);
        let (qv, kvv) = (g.constant(q.clone()), g.constant(kv.clone()));
        let (qv, kvv) = (
            VolumeVar::new(&g, qv, shape)?,
            VolumeVar::new(&g, kvv, shape)?,
        );
        let out = bwa(&mut g, &b, &mha, qv, kvv, kvv, BlockPartition::new(1, 1))?;
        let reference = dense_attention_reference(&q, &kv, &kv, &store, &mha)?;
        worst = worst.max(g.value(out.var).max_abs_diff(&reference));
    }
    Ok((
        worst < 1e-10,
        format!("max abs diff {worst:.2e} over 20 instances"),
    ))
}

fn icsa_isa(_: Option<Fault>) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let shape = VolumeShape::new(4, 1, 4, 6);
        let p = BlockPartition::new(2, 3);
        let icsa = Icsa::new("icsa", 2, p, shape, shape)?;
        let mut store = ParamStore::new();
        icsa.init(&mut store, &mut rng::stream(seed, "selftest.icsa"))?;
        let x = Tensor::uniform(
            &shape.matrix_shape(),
            1.0,
            &mut rng::stream(seed, "selftest.x"),
        );
        let mut g = Graph::new();
        let b = Binding::frozen(&mut g, &store);
        let xv = g.constant(x.clone());
        let xv = VolumeVar::new(&g, xv, shape)?;
        let out = icsa.forward(&mut g, &b, xv, xv)?;
        let reference = isa_reference(&x, 4, 6, p, &store, icsa.long(), icsa.short())?;
        worst = worst.max(g.value(out.var).max_abs_diff(&reference));
    }
    Ok((
        worst < 1e-12,
        format!("max abs diff {worst:.2e} over 5 instances"),
    ))
}

fn mar_hull(_: Option<Fault>) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let mut r = rng::stream(seed, "selftest.hull");
        let keys = Tensor::uniform(&[6, 3], 2.0, &mut r);
        let protos = Tensor::uniform(&[3, 3], 2.0, &mut r);
        let bank = MemoryBank::new(keys, vec![0, 0, 1, 1, 2, 2], protos)?;
        let q = Tensor::uniform(&[10, 3], 2.0, &mut r);
        let wt = Tensor::uniform(&[3, 3], 1.5, &mut r);
        let wp = Tensor::uniform(&[3, 3], 1.5, &mut r);
        let s = mar_scores(&q, bank.keys(), &wt, &wp)?;
        let out = mar_attend(&s, &bank)?;
        // Per-class weights reconstruct the readout as a convex combination.
        for i in 0..q.rows() {
            let mut lam = [0.0; 3];
            for (j, &l) in bank.labels().iter().enumerate() {
                lam[l] += s.row(i)[j];
            }
            if lam.iter().any(|&l| l < 0.0) || (lam.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Ok((false, format!("weights {lam:?} are not convex")));
            }
            for c in 0..3 {
                let p: f64 = (0..3).map(|k| lam[k] * bank.prototypes().row(k)[c]).sum();
                worst = worst.max((p - out.row(i)[c]).abs());
            }
        }
    }
    Ok((
        worst < 1e-12,
        format!("max reconstruction error {worst:.2e}"),
    ))
}

fn probe_loss(g: &mut Graph, out: Var, probe: &Tensor) -> Result<Var> {
    let pr = g.constant(probe.clone());
    let d = g.sub(out, pr)?;
    let t = g.transpose(d)?;
    let m = g.matmul(t, d)?;
    Ok(g.sum(m))
}

fn attention_gradients(_: Option<Fault>) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let mut r = rng::stream(seed, "selftest.grad");
        let shape = VolumeShape::new(4, 2, 2, 4);
        let p = BlockPartition::new(1, 2);
        let icsa = Icsa::new("icsa", 2, p, shape, shape)?;
        let mut store = ParamStore::new();
        icsa.init(&mut store, &mut rng::stream(seed, "selftest.icsa"))?;
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        let mut inputs = vec![Tensor::uniform(&shape.matrix_shape(), 1.0, &mut r)];
        inputs.extend(store.iter().map(|(n, t)| {
            if n.contains(".pe_") {
                Tensor::uniform(t.shape(), 0.3, &mut r)
            } else {
                t.clone()
            }
        }));
        let probe = Tensor::uniform(&shape.matrix_shape(), 1.0, &mut r);
        let err = grad_check(
            |g, x| {
                let b = Binding::from_vars(names.iter().cloned().zip(x[1..].iter().copied()));
                let v = VolumeVar::new(g, x[0], shape)?;
                let out = icsa.forward(g, &b, v, v)?;
                probe_loss(g, out.var, &probe)
            },
            &inputs,
            1e-5,
        )?;
        worst = worst.max(err);
    }
    Ok((worst < 1e-4, format!("max relative error {worst:.2e}")))
}

fn block_gradients(_: Option<Fault>) -> Result<(bool, String)> {
    let cfg = StfConfig::new(4, 2, 4, 4);
    let stf = Stf::new(cfg)?;
    let mut store = ParamStore::new();
    stf.init(&mut store, &mut rng::stream(0, "selftest.stf"))?;
    let mut r = rng::stream(0, "selftest.stf.x");
    let frame = cfg.frame_shape().matrix_shape();
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    let mut inputs: Vec<Tensor> = (0..3)
        .map(|_| Tensor::uniform(&frame, 1.0, &mut r))
        .collect();
    inputs.extend(store.iter().map(|(n, t)| {
        if n.contains(".pe_") {
            Tensor::uniform(t.shape(), 0.3, &mut r)
        } else {
            t.clone()
        }
    }));
    let probe = Tensor::uniform(&frame, 1.0, &mut r);
    let stf_err = grad_check(
        |g, x| {
            let b = Binding::from_vars(names.iter().cloned().zip(x[3..].iter().copied()));
            let out = stf.forward(g, &b, x[0], x[1], x[2])?;
            probe_loss(g, out, &probe)
        },
        &inputs,
        1e-5,
    )?;

    let mar = Mar::new(4, 8)?;
    let mut store = ParamStore::new();
    mar.init(&mut store, &mut rng::stream(0, "selftest.mar"))?;
    let bank = MemoryBank::new(
        Tensor::uniform(&[6, 4], 1.0, &mut r),
        vec![0, 0, 1, 1, 2, 2],
        Tensor::uniform(&[3, 4], 1.0, &mut r),
    )?;
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    let mut inputs = vec![Tensor::uniform(&[5, 4], 1.0, &mut r)];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    let probe = Tensor::uniform(&[5, 4], 1.0, &mut r);
    let mar_err = grad_check(
        |g, x| {
            let b = Binding::from_vars(names.iter().cloned().zip(x[1..].iter().copied()));
            let out = mar.forward(g, &b, x[0], &bank)?;
            probe_loss(g, out, &probe)
        },
        &inputs,
        1e-5,
    )?;
    let worst = stf_err.max(mar_err);
    Ok((
        worst < 1e-4,
        format!("stf {stf_err:.2e}, mar {mar_err:.2e}"),
    ))
}
