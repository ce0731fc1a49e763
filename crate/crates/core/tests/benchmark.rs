use asg_core::benchmark::{
    accuracy_with, generate, generate_range, pretrain_reference, Dataset, DomainKind, DomainSpec, LabelKind,
    PretrainConfig, IMAGE_SIZE, NUM_CLASSES,
};
use asg_core::nets::DualHeadModel;
use proptest::prelude::*;

#[test]
fn classes_are_balanced_in_every_domain() {
    for kind in [DomainKind::Base, DomainKind::SyntheticSource, DomainKind::RealTarget] {
        let d = generate(&DomainSpec::new(kind, 7), 1000).unwrap();
        let mut counts = [0usize; NUM_CLASSES];
        d.classes.iter().for_each(|&c| counts[c] += 1);
        assert!(counts.iter().all(|&n| n == 250), "{kind}: {counts:?}");
    }
}

#[test]
fn untrained_new_head_is_at_chance() {
    let m = DualHeadModel::build("toy_cnn", 3).unwrap();
    let d = generate(&DomainSpec::new(DomainKind::RealTarget, 3), 1000).unwrap();
    let acc = accuracy_with(&d, |x| m.forward_new(x)).unwrap();
    assert!((acc - 0.25).abs() < 0.1, "accuracy {acc}");
}

#[test]
fn source_and_target_differ_in_pixel_statistics() {
    let std_of = |d: &Dataset| {
        let n = d.images.len() as f64;
        let mean = d.images.iter().map(|&v| v as f64).sum::<f64>() / n;
        (d.images.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
    };
    // flat, noiseless renders have far fewer distinct pixel values
    let distinct = |d: &Dataset| {
        let mut v: Vec<u32> = d.images.iter().map(|x| x.to_bits()).collect();
        v.sort_unstable();
        v.dedup();
        v.len()
    };
    let src = generate(&DomainSpec::new(DomainKind::SyntheticSource, 1), 64).unwrap();
    let tgt = generate(&DomainSpec::new(DomainKind::RealTarget, 1), 64).unwrap();
    assert!(distinct(&src) < 10);
    assert!(distinct(&tgt) > 1000);
    assert!(std_of(&src) > 0.0 && std_of(&tgt) > 0.0);
}

#[test]
fn dataset_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = generate(&DomainSpec::new(DomainKind::RealTarget, 2), 12).unwrap();
    for kind in [LabelKind::Class, LabelKind::Mask] {
        let path = dir.path().join("d.asgd");
        d.save(&path, kind).unwrap();
        let (back, k) = Dataset::load(&path).unwrap();
        assert_eq!(k, kind);
        assert_eq!(back.images, d.images);
        match kind {
            LabelKind::Class => assert_eq!(back.classes, d.classes),
            // mask files carry per-pixel labels only
            LabelKind::Mask => assert_eq!(back.masks, d.masks),
        }
    }
    std::fs::write(dir.path().join("bad.asgd"), b"ASGX\x01\x00").unwrap();
    assert!(Dataset::load(&dir.path().join("bad.asgd")).is_err());
    let mut truncated = d.to_bytes(LabelKind::Class).unwrap();
    truncated.truncate(truncated.len() - 3);
    assert!(Dataset::from_bytes(&truncated).is_err());
}

#[test]
fn pretraining_requires_the_base_domain() {
    let cfg = PretrainConfig { train_count: 8, val_count: 4, max_epochs: 1, ..Default::default() };
    assert!(pretrain_reference(&DomainSpec::new(DomainKind::RealTarget, 0), &cfg).is_err());
}

#[test]
fn pretraining_reports_failure_to_reach_target() {
    let cfg = PretrainConfig {
        train_count: 16,
        val_count: 16,
        max_epochs: 1,
        target_accuracy: 1.01,
        ..Default::default()
    };
    let err = pretrain_reference(&DomainSpec::new(DomainKind::Base, 0), &cfg).unwrap_err();
    assert!(err.to_string().contains("below"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn any_range_renders_the_same_images(seed in 0u64..1000, start in 0u64..50, len in 1u64..6) {
        let spec = DomainSpec::new(DomainKind::RealTarget, seed);
        let whole = generate_range(&spec, 0, start + len).unwrap();
        let part = generate_range(&spec, start, start + len).unwrap();
        let px = IMAGE_SIZE * IMAGE_SIZE;
        prop_assert_eq!(&whole.images[start as usize * px..], &part.images[..]);
        prop_assert_eq!(&whole.classes[start as usize..], &part.classes[..]);
        prop_assert!(part.images.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
