use proptest::prelude::*;
use rand::Rng;
use stfmar_core::attention::{
    combine_blocks, inverse_index, isa_reference, long_range_index, long_range_permute,
    long_range_restore, partition_blocks, partition_index, BlockPartition, FeatureVolume, Icsa,
    VolumeShape, VolumeVar,
};
use stfmar_core::mar::{mar_attend, mar_scores, MemoryBank};
use stfmar_core::numerics::{Graph, Tensor};
use stfmar_core::params::{Binding, ParamStore};
use stfmar_core::pipeline::{estimate_cost, miou, CostConfig, SegMap};
use stfmar_core::rng;

fn volume(s: VolumeShape, seed: u64) -> FeatureVolume {
    let mut r = rng::stream(seed, "volume");
    FeatureVolume::from_tokens(s, Tensor::uniform(&s.matrix_shape(), 1.0, &mut r)).unwrap()
}

fn is_permutation(idx: &[usize]) -> bool {
    let mut seen = vec![false; idx.len()];
    idx.iter()
        .all(|&i| i < idx.len() && !std::mem::replace(&mut seen[i], true))
}

fn shape_and_partition() -> impl Strategy<Value = (VolumeShape, BlockPartition)> {
    (
        1usize..4,
        1usize..4,
        1usize..4,
        1usize..4,
        1usize..4,
        1usize..4,
    )
        .prop_map(|(d, t, bh, bw, sh, sw)| {
            (
                VolumeShape::new(d, t, bh * sh, bw * sw),
                BlockPartition::new(bh, bw),
            )
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn index_maps_are_bijections((s, p) in shape_and_partition()) {
        let part = partition_index(s, p).unwrap();
        let long = long_range_index(s, p).unwrap();
        prop_assert!(is_permutation(&part));
        prop_assert!(is_permutation(&long));
        let inv = inverse_index(&long);
        prop_assert!(long.iter().enumerate().all(|(i, &j)| inv[j] == i));
    }

    #[test]
    fn blocks_and_groups_restore_exactly((s, p) in shape_and_partition(), seed in 0u64..1000) {
        let x = volume(s, seed);
        let blocks = partition_blocks(&x, p).unwrap();
        prop_assert_eq!(blocks.len(), p.blocks());
        prop_assert_eq!(combine_blocks(&blocks, p, s).unwrap(), x.clone());
        let grouped = long_range_permute(&x, p).unwrap();
        prop_assert_eq!(grouped.groups * grouped.group_len, s.tokens());
        prop_assert_eq!(long_range_restore(&grouped).unwrap(), x);
    }

    #[test]
    fn zero_pe_icsa_on_one_frame_matches_isa(
        bh in 1usize..3, bw in 1usize..3, sh in 1usize..3, sw in 1usize..3,
        heads in 1usize..3, seed in 0u64..1000,
    ) {
        let s = VolumeShape::new(2 * heads, 1, bh * sh, bw * sw);
        let p = BlockPartition::new(bh, bw);
        let icsa = Icsa::new("icsa", heads, p, s, s).unwrap();
        let mut store = ParamStore::new();
        icsa.init(&mut store, &mut rng::stream(seed, "init")).unwrap();
        let x = volume(s, seed).into_tokens();
        let mut g = Graph::new();
        let b = Binding::frozen(&mut g, &store);
        let xv = g.constant(x.clone());
        let xv = VolumeVar::new(&g, xv, s).unwrap();
        let out = icsa.forward(&mut g, &b, xv, xv).unwrap();
        let reference = isa_reference(&x, s.h, s.w, p, &store, icsa.long(), icsa.short()).unwrap();
        prop_assert!(g.value(out.var).max_abs_diff(&reference) <= 1e-12);
    }

    #[test]
    fn mar_weights_are_stochastic_and_readout_stays_in_the_hull(
        n in 1usize..8, d in 1usize..5, classes in 1usize..4, k in 1usize..4, seed in 0u64..1000,
    ) {
        let mut r = rng::stream(seed, "mar");
        let q = Tensor::uniform(&[n, d], 2.0, &mut r);
        let keys = Tensor::uniform(&[classes * k, d], 2.0, &mut r);
        let protos = Tensor::uniform(&[classes, d], 2.0, &mut r);
        let labels = (0..classes).flat_map(|c| std::iter::repeat(c).take(k)).collect();
        let bank = MemoryBank::new(keys.clone(), labels, protos.clone()).unwrap();
        let w = Tensor::uniform(&[d, d], 1.0, &mut r);
        let scores = mar_scores(&q, &keys, &w, &w).unwrap();
        for i in 0..n {
            let row = scores.row(i);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let out = mar_attend(&scores, &bank).unwrap();
        for c in 0..d {
            let col = (0..classes).map(|j| protos.row(j)[c]);
            let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            prop_assert!((0..n).all(|i| out.row(i)[c] >= lo - 1e-12 && out.row(i)[c] <= hi + 1e-12));
        }
    }

    #[test]
    fn quantized_artifacts_round_trip_bit_exactly(
        d in 1usize..5, classes in 1usize..4, k in 1usize..3, seed in 0u64..1000,
    ) {
        let mut r = rng::stream(seed, "files");
        let mut store = ParamStore::new();
        store.insert("a.w", Tensor::uniform(&[d, d], 3.0, &mut r)).unwrap();
        store.insert("b", Tensor::uniform(&[d], 3.0, &mut r)).unwrap();
        let store = store.quantized();
        let back = ParamStore::from_bytes(&store.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back.digest(""), store.digest(""));

        let labels = (0..classes * k).map(|i| i / k).collect();
        let bank = MemoryBank::new(
            Tensor::uniform(&[classes * k, d], 3.0, &mut r),
            labels,
            Tensor::uniform(&[classes, d], 3.0, &mut r),
        )
        .unwrap()
        .quantized();
        let bytes = bank.to_bytes();
        prop_assert_eq!(MemoryBank::from_bytes(&bytes).unwrap().to_bytes(), bytes);
    }

    #[test]
    fn miou_is_bounded_and_perfect_on_identity(
        h in 1usize..6, w in 1usize..6, classes in 1usize..5, seed in 0u64..1000,
    ) {
        let mut r = rng::stream(seed, "maps");
        let mut map = || SegMap::new(h, w, (0..h * w).map(|_| r.gen_range(0..classes)).collect()).unwrap();
        let (a, b) = (map(), map());
        prop_assert_eq!(miou(&a, &a, classes).unwrap().miou, 1.0);
        let m = miou(&a, &b, classes).unwrap().miou;
        prop_assert!((0.0..=1.0).contains(&m));
    }

    #[test]
    fn icsa_entries_stay_within_two_dense_maps(
        t in 1u64..4, bh in 1u64..9, bw in 1u64..9, sh in 1u64..9, sw in 1u64..9,
    ) {
        let cfg = CostConfig::new(t, bh * sh, bw * sw, BlockPartition::new(bh as usize, bw as usize));
        let r = estimate_cost(&cfg);
        prop_assert_eq!(r.tokens, t * bh * sh * bw * sw);
        prop_assert_eq!(r.dense_entries(), r.tokens * r.tokens);
        prop_assert!(r.icsa.peak_entries() <= r.icsa.total_entries());
        prop_assert!(r.icsa.total_entries() <= 2 * r.dense_entries());
    }
}
