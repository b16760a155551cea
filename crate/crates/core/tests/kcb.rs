use motok_core::gradcheck::{check, CheckConfig};
use motok_core::kcb::{
    contact_confidence, detect_contacts, fk_tape, foot_slide, foot_slide_positions, kinematics, leg_length, Kcb,
    KcbConfig,
};
use motok_core::motion::{fk_frames, MotionSequence, NormStats, SkeletonSpec};
use motok_core::nn::ParamStore;
use motok_core::synth::SynthGenerator;
use motok_core::{Rng, Tape, Tensor};
use proptest::prelude::*;

fn cfg() -> KcbConfig {
    KcbConfig::for_skeleton(&SkeletonSpec::desk()).unwrap()
}

/// One-joint trajectory `[N, 1, 3]`.
fn track(points: &[[f64; 3]]) -> Tensor {
    Tensor::new(&[points.len(), 1, 3], points.iter().flatten().copied().collect()).unwrap()
}

#[test]
fn default_thresholds() {
    let sk = SkeletonSpec::desk();
    let leg = leg_length(&sk).unwrap();
    let expect = (0.45f64 * 0.45 + 0.01).sqrt() + 0.45;
    assert!((leg - expect).abs() < 1e-12);
    let c = cfg();
    assert!((c.height_thresh - 0.05 * expect).abs() < 1e-12);
    assert_eq!(c.speed_thresh, 0.1);
    assert_eq!(c.sigmoid_temp, 0.02);
}

#[test]
fn pinned_foot_is_in_contact() {
    let p = track(&[[0.3, 0.0, 0.2]; 10]);
    let s = detect_contacts(&p, &[0], &cfg()).unwrap();
    assert!(s.labels.iter().all(|r| r[0]));
}

#[test]
fn high_fast_foot_is_not_in_contact() {
    let pts: Vec<[f64; 3]> = (0..10).map(|t| [2.0 * t as f64, 1.0, 0.0]).collect();
    let s = detect_contacts(&track(&pts), &[0], &cfg()).unwrap();
    assert!(s.labels.iter().all(|r| !r[0]));
}

#[test]
fn alternating_speed_alternates_labels() {
    let c = cfg();
    let mut x = 0.0;
    let mut pts = vec![[0.0, 0.0, 0.0]];
    for t in 1..12 {
        if t % 2 == 0 {
            x += 2.0 * c.speed_thresh;
        }
        pts.push([x, 0.0, 0.0]);
    }
    let s = detect_contacts(&track(&pts), &[0], &c).unwrap();
    for t in 1..12 {
        assert_eq!(s.labels[t][0], t % 2 == 1, "frame {t}");
    }
    assert_eq!(s.labels[0][0], s.labels[1][0]);
}

#[test]
fn confidence_values() {
    let c = cfg();
    let v = contact_confidence(&[0.1, 0.0], &c).unwrap();
    assert_eq!(v[0], 0.5);
    assert!((v[1] - 1.0 / (1.0 + (-5.0f64).exp())).abs() < 1e-15);
    assert!((v[1] - 0.9933).abs() < 5e-5);
    let bad = KcbConfig { sigmoid_temp: 0.0, ..c };
    assert!(contact_confidence(&[0.0], &bad).is_err());
}

#[test]
fn sharp_confidence_matches_labels() {
    let sharp = KcbConfig {
        sigmoid_temp: 1e-6,
        ..cfg()
    };
    let g = SynthGenerator::default();
    let seq = g.generate_named("walk", 64, &mut Rng::new(4)).unwrap();
    let pos = fk_frames(&seq.frames, seq.fps, &g.skeleton, &g.layout).unwrap();
    let s = detect_contacts(&pos, &g.skeleton.foot_joints, &sharp).unwrap();
    let mut checked = 0;
    for (t, row) in s.labels.iter().enumerate() {
        for (f, &on) in row.iter().enumerate() {
            let fj = g.skeleton.foot_joints[f];
            let low = pos.data()[(t * 8 + fj) * 3 + 1] < sharp.height_thresh;
            if low {
                assert_eq!(on, s.confidence[t][f] > 0.5);
                checked += 1;
            }
        }
    }
    assert!(checked > 50);
}

#[test]
fn slide_examples() {
    let c = cfg();
    let pinned = track(&[[1.0, 0.0, 1.0]; 8]);
    assert_eq!(foot_slide_positions(&pinned, &[0], &c).unwrap().value, 0.0);

    let drift: Vec<[f64; 3]> = (0..8).map(|t| [0.02 * t as f64, 0.0, 0.0]).collect();
    let s = foot_slide_positions(&track(&drift), &[0], &c).unwrap();
    assert!((s.value - 0.02).abs() < 1e-12);
    assert_eq!(s.contacts, 8);

    let air: Vec<[f64; 3]> = (0..8).map(|_| [0.0, 1.0, 0.0]).collect();
    let s = foot_slide_positions(&track(&air), &[0], &c).unwrap();
    assert_eq!(s.value, 0.0);
    assert!(s.no_contact);
}

#[test]
fn synthetic_ground_truth_barely_slides() {
    let g = SynthGenerator::default();
    for class in 0..4 {
        let seq = g.generate(class, 64, &mut Rng::new(10 + class as u64)).unwrap();
        let s = foot_slide(&seq, &g.skeleton, &g.layout, &cfg()).unwrap();
        assert!(!s.no_contact);
        assert!(s.value < 0.01, "class {class}: {}", s.value);
    }
}

#[test]
fn tape_fk_matches_plain_fk() {
    let g = SynthGenerator::default();
    let mut rng = Rng::new(6);
    let a = g.generate(0, 20, &mut rng).unwrap();
    let b = g.generate(3, 20, &mut rng).unwrap();
    let mut data = a.frames.data().to_vec();
    data.extend_from_slice(b.frames.data());
    let batch = Tensor::new(&[2, 20, 56], data).unwrap();
    let mut tape = Tape::new();
    let m = tape.leaf(batch);
    let xyz = fk_tape(&mut tape, m, &g.skeleton, &g.layout, 20.0).unwrap();
    for (i, seq) in [a, b].iter().enumerate() {
        let pos = fk_frames(&seq.frames, 20.0, &g.skeleton, &g.layout).unwrap();
        for t in 0..20 {
            for j in 0..8 {
                for (c, v) in xyz.iter().enumerate() {
                    let got = tape.value(*v).data()[(i * 20 + t) * 8 + j];
                    assert!((got - pos.data()[(t * 8 + j) * 3 + c]).abs() < 1e-12);
                }
            }
        }
    }
}

fn setup(seed: u64) -> (SynthGenerator, NormStats, Tensor) {
    let g = SynthGenerator::default();
    let mut rng = Rng::new(seed);
    let seqs: Vec<MotionSequence> = (0..4).map(|c| g.generate(c, 16, &mut rng).unwrap()).collect();
    let norm = NormStats::compute(&seqs).unwrap();
    let mut data = Vec::new();
    for s in &seqs[..2] {
        data.extend_from_slice(norm.normalize(s).unwrap().frames.data());
    }
    (g, norm, Tensor::new(&[2, 16, 56], data).unwrap())
}

#[test]
fn zero_initialized_block_is_identity() {
    let (g, norm, m_hat) = setup(1);
    let mut store = ParamStore::new();
    let kcb = Kcb::new(&mut store, cfg(), 56, &g.skeleton, &mut Rng::new(2)).unwrap();
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let x = tape.leaf(m_hat.clone());
    let out = kcb.correct(&mut tape, &p, x, &norm, &g.skeleton, &g.layout, 20.0).unwrap();
    let got = tape.value(out.corrected);
    assert!(got.data().iter().zip(m_hat.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    let conf = tape.value(out.confidence);
    assert!(conf.data().iter().all(|&c| c > 0.0 && c < 1.0));
}

#[test]
fn kcb_gradient_matches_finite_differences() {
    let (g, norm, m_hat) = setup(3);
    let mut rng = Rng::new(4);
    let m_hat = Tensor::new(&[1, 16, 56], m_hat.data()[..16 * 56].to_vec()).unwrap();
    let target = Tensor::randn(&[1, 16, 56], 0.5, &mut rng);
    let small = KcbConfig {
        width: 8,
        heads: 2,
        pos_dim: 4,
        ..cfg()
    };
    for _ in 0..3 {
        let mut store = ParamStore::new();
        let kcb = Kcb::new(&mut store, small, 56, &g.skeleton, &mut rng).unwrap();
        let mut inputs = vec![m_hat.clone()];
        for (name, t) in store.iter() {
            inputs.push(if name.starts_with("kcb.out") {
                Tensor::randn(t.shape(), 0.3, &mut rng)
            } else {
                t.clone()
            });
        }
        let report = check(
            &inputs,
            |tape, v| {
                let p = store.bind_vars(v[1..].to_vec())?;
                let out = kcb.correct(tape, &p, v[0], &norm, &g.skeleton, &g.layout, 20.0)?;
                let t = tape.constant(target.clone())?;
                tape.mse(out.corrected, t)
            },
            CheckConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}

#[test]
fn kinematic_features_gradient() {
    let (g, norm, m_hat) = setup(5);
    let raw = norm.denormalize_tensor(&m_hat).unwrap();
    let raw = Tensor::new(&[1, 16, 56], raw.data()[..16 * 56].to_vec()).unwrap();
    let mut rng = Rng::new(8);
    let w = Tensor::randn(&[1, 16, 64], 1.0, &mut rng);
    let report = check(
        &[raw],
        |tape, v| {
            let k = kinematics(tape, v[0], &g.skeleton, &g.layout, 20.0, &cfg())?;
            let wv = tape.constant(w.clone())?;
            let p = tape.mul(k.features, wv)?;
            tape.sum(p)
        },
        CheckConfig::default(),
        &mut rng,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

proptest! {
    #[test]
    fn confidence_is_monotone_and_open(a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let c = cfg();
        let v = contact_confidence(&[a.min(b), a.max(b)], &c).unwrap();
        prop_assert!(v[0] >= v[1]);
        prop_assert!(v[1] > 0.0 && v[0] < 1.0);
    }

    #[test]
    fn slide_is_translation_invariant(seed in 0u64..500, dx in -5.0f64..5.0, dz in -5.0f64..5.0) {
        let mut rng = Rng::new(seed);
        let mut pts = Vec::new();
        for _ in 0..10 {
            pts.push([rng.uniform_in(-0.05, 0.05), rng.uniform_in(0.0, 0.06), rng.uniform_in(-0.05, 0.05)]);
        }
        let moved: Vec<[f64; 3]> = pts.iter().map(|p| [p[0] + dx, p[1], p[2] + dz]).collect();
        let a = foot_slide_positions(&track(&pts), &[0], &cfg()).unwrap();
        let b = foot_slide_positions(&track(&moved), &[0], &cfg()).unwrap();
        prop_assert_eq!(a.contacts, b.contacts);
        prop_assert!((a.value - b.value).abs() < 1e-9);
        prop_assert!(a.value >= 0.0);
    }
}

