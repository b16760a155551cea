use motok_core::motion::{
    contact_events, fk_frames, fk_positions, FeatureLayout, MotionSequence, NormStats, SkeletonSpec,
};
use motok_core::synth::SynthGenerator;
use motok_core::{Error, Rng, Tensor};
use proptest::prelude::*;

fn zero_seq(n: usize, d: usize) -> MotionSequence {
    MotionSequence::new(Tensor::zeros(&[n, d]), 20.0).unwrap()
}

#[test]
fn same_seed_same_frames() {
    let g = SynthGenerator::default();
    for class in 0..4 {
        let a = g.generate(class, 64, &mut Rng::new(7)).unwrap();
        let b = g.generate(class, 64, &mut Rng::new(7)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 56);
        assert!(a.text.is_some());
        assert_eq!(a.category, Some(class));
    }
}

#[test]
fn walk_contact_event_order_is_shared() {
    let g = SynthGenerator::default();
    let order = |seed| {
        let s = g.generate_named("walk", 64, &mut Rng::new(seed)).unwrap();
        contact_events(&s, &g.layout)
            .into_iter()
            .map(|(_, foot, on)| (foot, on))
            .collect::<Vec<_>>()
    };
    let reference = order(1);
    assert!(reference.len() >= 6);
    for seed in 2..12 {
        let other = order(seed);
        let k = reference.len().min(other.len());
        assert!(k >= 6);
        assert_eq!(reference[..k], other[..k], "seed {seed}");
    }
}

#[test]
fn every_class_has_stable_event_order() {
    let g = SynthGenerator::default();
    for class in ["walk-sit", "sit-stand", "jump"] {
        let order = |seed| {
            let s = g.generate_named(class, 64, &mut Rng::new(seed)).unwrap();
            contact_events(&s, &g.layout)
                .into_iter()
                .map(|(_, foot, on)| (foot, on))
                .collect::<Vec<_>>()
        };
        let reference = order(100);
        for seed in 101..106 {
            let other = order(seed);
            let k = reference.len().min(other.len());
            assert_eq!(reference[..k], other[..k], "{class} seed {seed}");
        }
    }
}

#[test]
fn too_short_and_unknown_class_fail() {
    let g = SynthGenerator::default();
    assert!(g.generate_named("walk", 15, &mut Rng::new(0)).is_err());
    assert!(matches!(
        g.generate_named("crawl", 64, &mut Rng::new(0)),
        Err(Error::UnknownCategory(_))
    ));
    assert!(g.generate(9, 64, &mut Rng::new(0)).is_err());
    assert!(SynthGenerator::with_classes(&["walk", "fly"]).is_err());
}

#[test]
fn contact_flags_match_foot_trajectories() {
    let g = SynthGenerator::default();
    let sk = &g.skeleton;
    for class in 0..4 {
        for seed in 0..4 {
            let s = g.generate(class, 80, &mut Rng::new(seed)).unwrap();
            let pos = fk_positions(&s, sk, &g.layout).unwrap();
            let p = pos.data();
            for t in 1..s.len() {
                for (slot, &fj) in sk.foot_joints.iter().enumerate() {
                    let both = s.frame(t)[g.layout.contacts.start + slot] > 0.5
                        && s.frame(t - 1)[g.layout.contacts.start + slot] > 0.5;
                    if !both {
                        continue;
                    }
                    let at = |f: usize, c: usize| p[(f * 8 + fj) * 3 + c];
                    let dx = at(t, 0) - at(t - 1, 0);
                    let dz = at(t, 2) - at(t - 1, 2);
                    assert!(dx.hypot(dz) < 1e-9, "class {class} seed {seed} t {t} slide");
                    assert!(at(t, 1) < 0.045, "class {class} height {}", at(t, 1));
                }
            }
        }
    }
}

#[test]
fn constant_column_normalizes_to_zero() {
    let mut rng = Rng::new(3);
    let mut frames = Tensor::randn(&[10, 3], 1.0, &mut rng);
    for t in 0..10 {
        frames.data_mut()[t * 3 + 1] = 4.0;
    }
    let seq = MotionSequence::new(frames, 20.0).unwrap();
    let stats = NormStats::compute(std::slice::from_ref(&seq)).unwrap();
    assert_eq!(stats.std[1], 1e-6);
    let n = stats.normalize(&seq).unwrap();
    assert!((0..10).all(|t| n.frame(t)[1] == 0.0));
}

#[test]
fn normalize_round_trip() {
    let mut rng = Rng::new(11);
    let split: Vec<_> = (0..3)
        .map(|_| MotionSequence::new(Tensor::randn(&[20, 6], 3.0, &mut rng), 20.0).unwrap())
        .collect();
    let stats = NormStats::compute(&split).unwrap();
    let seq = MotionSequence::new(Tensor::randn(&[17, 6], 5.0, &mut rng), 20.0).unwrap();
    let back = stats.denormalize(&stats.normalize(&seq).unwrap()).unwrap();
    assert!(back.frames.max_abs_diff(&seq.frames) < 1e-10);
}

#[test]
fn normalization_errors() {
    assert!(NormStats::compute(&[]).is_err());
    let stats = NormStats {
        mean: vec![0.0; 4],
        std: vec![1.0; 4],
    };
    assert!(stats.normalize(&zero_seq(3, 5)).is_err());
}

#[test]
fn zero_features_give_rest_pose() {
    let sk = SkeletonSpec::desk();
    let layout = FeatureLayout::for_skeleton(&sk);
    let pos = fk_positions(&zero_seq(5, layout.dim()), &sk, &layout).unwrap();
    let rest = sk.rest_positions().unwrap();
    for t in 0..5 {
        for (j, r) in rest.iter().enumerate() {
            for c in 0..3 {
                assert_eq!(pos.data()[(t * 8 + j) * 3 + c], r[c]);
            }
        }
    }
    // Left toe = pelvis + knee + ankle + toe offsets.
    for (a, b) in rest[4].iter().zip([0.12, -0.93, 0.1]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn two_joint_chain_tip() {
    let sk = SkeletonSpec {
        parent: vec![0, 0],
        rest_offset: vec![[0.0, 0.0, 1.0], [0.0, 1.0, 0.0]],
        foot_joints: vec![],
        names: vec!["a".into(), "b".into()],
    };
    let layout = FeatureLayout::new(2, 0);
    let pos = fk_frames(&Tensor::zeros(&[1, layout.dim()]), 20.0, &sk, &layout).unwrap();
    assert_eq!(&pos.data()[3..6], &[0.0, 1.0, 1.0]);
}

#[test]
fn constant_velocity_integrates_linearly() {
    let sk = SkeletonSpec::desk();
    let layout = FeatureLayout::for_skeleton(&sk);
    let (v, f) = (1.3, 20.0);
    let mut frames = Tensor::zeros(&[50, layout.dim()]);
    for t in 0..50 {
        frames.data_mut()[t * layout.dim() + layout.planar_velocity.start] = v;
    }
    let pos = fk_frames(&frames, f, &sk, &layout).unwrap();
    for t in 0..50 {
        let x = pos.data()[t * 8 * 3];
        assert!((x - v * t as f64 / f).abs() < 1e-9);
    }
}

#[test]
fn cyclic_parent_links_fail() {
    let mut sk = SkeletonSpec::desk();
    sk.parent[3] = 4;
    sk.parent[4] = 3;
    let layout = FeatureLayout::for_skeleton(&sk);
    assert!(fk_positions(&zero_seq(2, layout.dim()), &sk, &layout).is_err());
}

proptest! {
    #[test]
    fn planar_velocity_offset_translates_every_joint(seed in 0u64..1000, vx in -2.0f64..2.0, vz in -2.0f64..2.0) {
        let g = SynthGenerator::default();
        let mut rng = Rng::new(seed);
        let mut frames = Tensor::randn(&[12, 56], 0.2, &mut rng);
        for t in 0..12 {
            frames.data_mut()[t * 56] = 0.0; // no turning
        }
        let base = fk_frames(&frames, 20.0, &g.skeleton, &g.layout).unwrap();
        let mut shifted = frames.clone();
        for t in 0..12 {
            shifted.data_mut()[t * 56 + 1] += vx;
            shifted.data_mut()[t * 56 + 2] += vz;
        }
        let moved = fk_frames(&shifted, 20.0, &g.skeleton, &g.layout).unwrap();
        for t in 0..12 {
            for j in 0..8 {
                let k = (t * 8 + j) * 3;
                prop_assert!((moved.data()[k] - base.data()[k] - vx * t as f64 / 20.0).abs() < 1e-12);
                prop_assert!((moved.data()[k + 1] - base.data()[k + 1]).abs() < 1e-12);
                prop_assert!((moved.data()[k + 2] - base.data()[k + 2] - vz * t as f64 / 20.0).abs() < 1e-12);
            }
        }
    }
}
