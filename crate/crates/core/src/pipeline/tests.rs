use super::*;
use crate::attention::BlockPartition;
use crate::mar::MemoryBank;
use crate::numerics::Tensor;
use crate::params::ParamStore;
use crate::{rng, Error};

fn small_data() -> SyntheticConfig {
    SyntheticConfig {
        height: 16,
        width: 16,
        clip_len: 3,
        train_clips: 3,
        val_clips: 1,
        min_size: 4,
        max_size: 7,
        noise: 0.1,
        ..SyntheticConfig::default()
    }
}

fn small_model() -> ModelConfig {
    ModelConfig {
        dim: 4,
        heads: 2,
        ffn_dim: 8,
        mar_ffn_dim: 8,
        backbone_hidden: 8,
        k_low: 1,
        k_high: 1,
        ..ModelConfig::default()
    }
}

fn small_train() -> TrainConfig {
    TrainConfig {
        stage1_epochs: 40,
        stage1_lr: 1.0,
        stage2_epochs: 4,
        stage3_epochs: 2,
        stage2_lr: 0.5,
        ..TrainConfig::default()
    }
}

#[test]
fn generation_is_deterministic_per_seed() {
    let cfg = small_data();
    let a = generate_synthetic(5, &cfg).unwrap();
    assert_eq!(a, generate_synthetic(5, &cfg).unwrap());
    assert_ne!(
        a.train[0].frames,
        generate_synthetic(6, &cfg).unwrap().train[0].frames
    );
}

#[test]
fn default_set_covers_every_class() {
    let cfg = SyntheticConfig::default();
    let data = generate_synthetic(0, &cfg).unwrap();
    for split in [&data.train, &data.val] {
        let mut hist = vec![0usize; cfg.classes];
        for clip in split.iter() {
            for map in &clip.labels {
                for &l in &map.labels {
                    hist[l] += 1;
                }
            }
        }
        assert!(hist.iter().all(|&n| n > 0), "{hist:?}");
    }
}

#[test]
fn labels_follow_shape_geometry_and_motion() {
    let cfg = SyntheticConfig::default();
    let data = generate_synthetic(1, &cfg).unwrap();
    for clip in data.train.iter().chain(&data.val) {
        for s in &clip.shapes {
            assert!(s.vy.abs() <= 2 && s.vx.abs() <= 2);
        }
        for (t, map) in clip.labels.iter().enumerate() {
            for y in 0..cfg.height {
                for x in 0..cfg.width {
                    assert_eq!(map.get(y, x), label_at(&clip.shapes, t, y as i64, x as i64));
                }
            }
        }
        for t in 0..clip.len() - 1 {
            for s in &clip.shapes {
                for y in 0..cfg.height as i64 {
                    for x in 0..cfg.width as i64 {
                        assert_eq!(s.contains(t, y, x), s.contains(t + 1, y + s.vy, x + s.vx));
                    }
                }
            }
        }
    }
}

#[test]
fn degenerate_data_configs_are_rejected() {
    for cfg in [
        SyntheticConfig {
            classes: 0,
            ..SyntheticConfig::default()
        },
        SyntheticConfig {
            height: 0,
            ..SyntheticConfig::default()
        },
        SyntheticConfig {
            max_speed: 3,
            ..SyntheticConfig::default()
        },
    ] {
        assert!(matches!(generate_synthetic(0, &cfg), Err(Error::Config(_))));
    }
    let bad = SyntheticConfig {
        classes: 1,
        clip_len: 0,
        ..SyntheticConfig::default()
    };
    assert_eq!(bad.validate().len(), 2);
}

fn map(h: usize, w: usize, labels: &[usize]) -> SegMap {
    SegMap::new(h, w, labels.to_vec()).unwrap()
}

#[test]
fn miou_examples() {
    let gt = map(2, 2, &[0, 1, 1, 1]);
    assert_eq!(miou(&gt, &gt, 2).unwrap().miou, 1.0);

    let r = miou(&map(2, 2, &[0, 0, 1, 1]), &gt, 2).unwrap();
    assert!((r.per_class[0].unwrap() - 0.5).abs() < 1e-15);
    assert!((r.per_class[1].unwrap() - 2.0 / 3.0).abs() < 1e-15);
    assert!((r.miou - 7.0 / 12.0).abs() < 1e-15);

    let r = miou(&map(1, 2, &[1, 1]), &map(1, 2, &[0, 0]), 3).unwrap();
    assert_eq!(r.miou, 0.0);
    assert_eq!(r.per_class[2], None);
}

#[test]
fn per_class_iou_is_symmetric() {
    let mut r = rng::stream(0, "miou");
    for _ in 0..20 {
        use rand::Rng;
        let a = map(
            4,
            5,
            &(0..20).map(|_| r.gen_range(0..3)).collect::<Vec<_>>(),
        );
        let b = map(
            4,
            5,
            &(0..20).map(|_| r.gen_range(0..3)).collect::<Vec<_>>(),
        );
        assert_eq!(
            miou(&a, &b, 3).unwrap().per_class,
            miou(&b, &a, 3).unwrap().per_class
        );
    }
}

#[test]
fn miou_rejects_mismatched_maps() {
    assert!(matches!(
        miou(&map(1, 2, &[0, 0]), &map(2, 1, &[0, 0]), 2),
        Err(Error::Shape { .. })
    ));
    assert!(miou(&map(1, 1, &[3]), &map(1, 1, &[0]), 2).is_err());
}

#[test]
fn pgm_encoding() {
    let bytes = encode_pgm(&map(1, 3, &[0, 1, 3]), 4);
    assert_eq!(bytes, b"P5\n3 1\n255\n\x00\x55\xff");
}

#[test]
fn cost_of_the_full_size_volume() {
    let r = estimate_cost(&CostConfig::new(3, 128, 256, BlockPartition::new(16, 16)));
    assert_eq!(r.tokens, 98304);
    assert_eq!(r.dense_entries(), 98304 * 98304);
    // k·T = 768 long-range keys and 3·8·16 = 384 block keys per query.
    assert_eq!(r.icsa.long_entries, 98304 * 768);
    assert_eq!(r.icsa.short_entries, 98304 * 384);
    assert!(r.peak_reduction() >= 100.0);
    assert!((r.reduction() - 98304.0 / 1152.0).abs() < 1e-9);
}

#[test]
fn zero_extent_costs_nothing() {
    for (t, h, w) in [(0, 128, 256), (3, 0, 256), (3, 128, 0)] {
        let r = estimate_cost(&CostConfig::new(t, h, w, BlockPartition::new(16, 16)));
        assert_eq!(r.tokens, 0);
        assert_eq!(r.dense, AttentionCost::default());
        assert_eq!(r.icsa, AttentionCost::default());
        assert_eq!((r.stf_macs, r.mar_macs, r.classifier_macs), (0, 0, 0));
    }
}

#[test]
fn dense_cost_is_quadratic_and_sweep_minimum_is_near_sqrt_area() {
    let p = BlockPartition::new(2, 2);
    let a = estimate_cost(&CostConfig::new(3, 16, 16, p));
    let b = estimate_cost(&CostConfig::new(3, 32, 32, p));
    assert_eq!(b.dense_entries(), 16 * a.dense_entries());

    let sweep = partition_sweep(&CostConfig::new(3, 128, 256, p));
    assert_eq!(sweep.len(), 8);
    let best = sweep.iter().min_by_key(|r| r.icsa.total_entries()).unwrap();
    let k = best.config.partition.blocks() as f64;
    let target = (128.0f64 * 256.0).sqrt();
    assert!(k / target < 2.0 && target / k < 2.0, "k = {k}");
}

#[test]
fn patches_clamp_at_the_border() {
    let bb = ToyBackbone {
        window: 3,
        hidden: 2,
        dim: 2,
        stride: 1,
    };
    let img = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let p = bb.patches(&img).unwrap();
    assert_eq!(p.shape(), &[6, 9]);
    assert_eq!(p.row(0), &[1.0, 1.0, 2.0, 1.0, 1.0, 2.0, 4.0, 4.0, 5.0]);
    assert_eq!(p.row(5), &[2.0, 3.0, 3.0, 5.0, 6.0, 6.0, 5.0, 6.0, 6.0]);

    let strided = ToyBackbone { stride: 2, ..bb };
    assert_eq!(strided.output_size(5, 4), (3, 2));
    assert_eq!(strided.patches(&img).unwrap().shape(), &[2, 9]);
}

#[test]
fn windows_clamp_at_clip_edges() {
    assert_eq!(window_indices(0, 1), [0, 0, 0]);
    assert_eq!(window_indices(0, 4), [0, 0, 1]);
    assert_eq!(window_indices(2, 4), [1, 2, 3]);
    assert_eq!(window_indices(3, 4), [2, 3, 3]);
}

fn trained_free_model() -> (Segmenter, ParamStore, MemoryBank, Dataset) {
    let data = generate_synthetic(2, &small_data()).unwrap();
    let model = Segmenter::new(&small_model(), data.classes, 16, 16).unwrap();
    let store = init_params(&model, 2).unwrap();
    let mut r = rng::stream(2, "bank");
    let bank = MemoryBank::new(
        Tensor::uniform(&[8, 4], 1.0, &mut r),
        vec![0, 0, 1, 1, 2, 2, 3, 3],
        Tensor::uniform(&[4, 4], 1.0, &mut r),
    )
    .unwrap();
    (model, store, bank, data)
}

#[test]
fn sliding_window_matches_manual_composition() {
    let (model, store, bank, data) = trained_free_model();
    let clip = &data.train[0];
    let maps = sliding_window_infer(&model, &store, &bank, clip).unwrap();
    assert_eq!(maps.len(), clip.len());
    let feats: Vec<Tensor> = clip
        .frames
        .iter()
        .map(|f| model.backbone.features(&store, f).unwrap())
        .collect();
    for (t, got) in maps.iter().enumerate() {
        let [p, c, n] = window_indices(t, clip.len());
        let fused = model
            .stf
            .infer(&store, &feats[p], &feats[c], &feats[n])
            .unwrap();
        let refined = model.mar.infer(&store, &fused, &bank).unwrap();
        let logits = model.classifier.logits(&store, &refined).unwrap();
        let expected: Vec<usize> = (0..logits.rows())
            .map(|i| crate::mar::argmax(logits.row(i)))
            .collect();
        assert_eq!((got.height, got.width), (16, 16));
        assert_eq!(got.labels, expected);
    }
}

#[test]
fn static_and_single_frame_clips() {
    let (model, store, bank, data) = trained_free_model();
    let mut clip = data.train[0].clone();
    let frame = clip.frames[1].clone();
    clip.frames.iter_mut().for_each(|f| *f = frame.clone());
    let maps = sliding_window_infer(&model, &store, &bank, &clip).unwrap();
    assert!(maps.windows(2).all(|w| w[0] == w[1]));

    clip.frames.truncate(1);
    clip.labels.truncate(1);
    assert_eq!(
        sliding_window_infer(&model, &store, &bank, &clip).unwrap(),
        maps[..1]
    );

    clip.frames.clear();
    assert!(matches!(
        sliding_window_infer(&model, &store, &bank, &clip),
        Err(Error::Contract(_))
    ));
}

#[test]
fn refinement_without_memory_is_a_contract_error() {
    let (model, store, _, data) = trained_free_model();
    assert!(matches!(
        sliding_window_infer_variant(&model, &store, None, &data.train[0], Variant::Mar),
        Err(Error::Contract(_))
    ));
}

#[test]
fn stages_must_run_in_order() {
    let data = generate_synthetic(3, &small_data()).unwrap();
    let model = Segmenter::new(&small_model(), data.classes, 16, 16).unwrap();
    let mut tr = Trainer::new(model, small_train(), &data, 3).unwrap();
    assert!(matches!(tr.stage2(), Err(Error::Contract(_))));
    assert!(matches!(tr.stage3(), Err(Error::Contract(_))));
    tr.stage1().unwrap();
    tr.stage2().unwrap();
    let err = tr.stage3().unwrap_err();
    assert!(
        matches!(&err, Error::Contract(m) if m.contains("memory")),
        "{err}"
    );
    tr.build_memory().unwrap();
    let before = (tr.store().digest("backbone."), tr.store().digest("stf."));
    tr.stage3().unwrap();
    assert_eq!(
        before,
        (tr.store().digest("backbone."), tr.store().digest("stf."))
    );
    assert_eq!(tr.stages_finished(), 3);
}

#[test]
fn stage_two_leaves_the_backbone_untouched() {
    let data = generate_synthetic(4, &small_data()).unwrap();
    let model = Segmenter::new(&small_model(), data.classes, 16, 16).unwrap();
    let mut tr = Trainer::new(model, small_train(), &data, 4).unwrap();
    tr.stage1().unwrap();
    let backbone = tr.store().digest("backbone.");
    let stf = tr.store().digest("stf.");
    tr.stage2().unwrap();
    assert_eq!(backbone, tr.store().digest("backbone."));
    assert_ne!(stf, tr.store().digest("stf."));
}

#[test]
fn fixed_seed_reproduces_the_metrics_log() {
    let data = generate_synthetic(5, &small_data()).unwrap();
    let run = || {
        let out = train_multistage(&data, &small_model(), &small_train(), 5).unwrap();
        let mut buf = Vec::new();
        write_metrics_log(&out.log, &mut buf).unwrap();
        (buf, out.bank.to_bytes())
    };
    let (log, bank) = run();
    assert_eq!((log.clone(), bank), run());
    let text = String::from_utf8(log).unwrap();
    let cfg = small_train();
    assert_eq!(
        text.lines().count(),
        cfg.stage1_epochs + cfg.stage2_epochs + cfg.stage3_epochs
    );
    for (line, stage) in text.lines().zip(
        std::iter::repeat_n(1u8, cfg.stage1_epochs)
            .chain(std::iter::repeat_n(2, cfg.stage2_epochs))
            .chain(std::iter::repeat_n(3, cfg.stage3_epochs)),
    ) {
        let rec: MetricRecord = serde_json::from_str(line).unwrap();
        assert_eq!(rec.stage, stage);
        assert_eq!(rec.split, "val");
        assert!((0.0..=1.0).contains(&rec.miou));
    }
}

#[test]
fn insufficient_class_samples_propagate() {
    let data = generate_synthetic(6, &small_data()).unwrap();
    let model = ModelConfig {
        k_low: 100_000,
        ..small_model()
    };
    assert!(matches!(
        train_multistage(&data, &model, &small_train(), 6),
        Err(Error::InsufficientClassSamples {
            required: 100_000,
            ..
        })
    ));
}
