use motok_core::evaluator::{contrastive_loss, Evaluator, EvaluatorConfig};
use motok_core::gradcheck::{check, CheckConfig};
use motok_core::metrics::{mm_dist, r_precision, MmMode};
use motok_core::motion::{MotionSequence, NormStats};
use motok_core::synth::SynthGenerator;
use motok_core::{Rng, Tensor};

fn dataset(per_class: usize, seed: u64) -> Vec<MotionSequence> {
    let gen = SynthGenerator::default();
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    for c in 0..gen.classes.len() as u32 {
        for _ in 0..per_class {
            out.push(gen.generate(c, 32, &mut rng).unwrap());
        }
    }
    out
}

#[test]
fn contrastive_loss_gradcheck() {
    let mut rng = Rng::new(1);
    for _ in 0..20 {
        let m = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let t = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let r = check(&[m, t], |tape, v| contrastive_loss(tape, v[0], v[1]), CheckConfig::default(), &mut rng).unwrap();
        assert!(r.passed, "{r:?}");
    }
}

#[test]
fn contrastive_loss_hand_value() {
    // Squared distances are [[1, 5], [5, 1]] in both directions, so every
    // row contributes -ln(e^-1 / (e^-1 + e^-5)) = ln(1 + e^-4).
    let m = Tensor::new(&[2, 2], vec![0.0, 0.0, 2.0, 0.0]).unwrap();
    let t = Tensor::new(&[2, 2], vec![0.0, 1.0, 2.0, 1.0]).unwrap();
    let mut tape = motok_core::Tape::new();
    let (mv, tv) = (tape.leaf(m), tape.leaf(t));
    let l = contrastive_loss(&mut tape, mv, tv).unwrap();
    let expect = (1.0 + (-4.0f64).exp()).ln();
    assert!((tape.item(l) - expect).abs() < 1e-12);
}

#[test]
fn trained_features_retrieve_matching_text() {
    let train = dataset(12, 3);
    let norm = NormStats::compute(&train).unwrap();
    let cfg = EvaluatorConfig {
        steps: 150,
        ..EvaluatorConfig::default()
    };
    let mut ev = Evaluator::new(cfg, norm, &mut Rng::new(4)).unwrap();
    let losses = ev.fit(&train, &Rng::new(5)).unwrap();
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "{head} -> {tail}");

    let test = dataset(8, 9);
    let frames: Vec<&Tensor> = test.iter().map(|s| &s.frames).collect();
    let prompts: Vec<&str> = test.iter().map(|s| s.text.as_deref().unwrap()).collect();
    let mf = ev.motion_features(&frames).unwrap();
    let tf = ev.text_features(&prompts).unwrap();
    assert_eq!(mf.shape(), &[32, 32]);
    // Chance top-3 in a pool of 32 is 3/32.
    let top3 = r_precision(&mf, &tf, 3, 32, &mut Rng::new(6)).unwrap();
    assert!(top3 > 0.3, "top-3 {top3}");
    assert!(mm_dist(&mf, &tf, MmMode::Euclidean).unwrap().is_finite());

    // Deterministic given weights.
    assert_eq!(mf, ev.motion_features(&frames).unwrap());
}

#[test]
fn rejects_short_motion_and_empty_prompts() {
    let train = dataset(4, 3);
    let norm = NormStats::compute(&train).unwrap();
    let ev = Evaluator::new(EvaluatorConfig::default(), norm, &mut Rng::new(4)).unwrap();
    let short = Tensor::zeros(&[3, 56]);
    assert!(ev.motion_features(&[&short]).is_err());
    assert!(ev.text_features(&[""]).is_err());
    assert!(ev.text_features(&[]).is_err());
}
