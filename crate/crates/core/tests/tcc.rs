use motok_core::gradcheck::{check, CheckConfig};
use motok_core::tape::huber;
use motok_core::tcc::{
    cycle_cls_loss, cycle_loss, cycle_reg_huber_loss, cycle_reg_mse_loss, cycle_stats, reg_from_beta, soft_nn,
    tcc_loss, TccConfig, TccVariant,
};
use motok_core::{Rng, Tape, Tensor};
use proptest::prelude::*;

fn col(v: &[f64]) -> Tensor {
    Tensor::new(&[v.len(), 1], v.to_vec()).unwrap()
}

/// Frames spaced 10 apart along a diagonal in 3-D.
fn separated(n: usize) -> Tensor {
    let data = (0..n).flat_map(|i| [10.0 * i as f64, 0.0, 10.0 * i as f64]).collect();
    Tensor::new(&[n, 3], data).unwrap()
}

#[test]
fn soft_nn_dominance() {
    let v = separated(5);
    let (a, tilde) = soft_nn(v.row(2), &v, 2).unwrap();
    let others: f64 = a.probs.iter().enumerate().filter(|(j, _)| *j != 2).map(|(_, p)| p).sum();
    assert!(others < 1e-40);
    assert!(a.probs[2] >= 1.0 - 1e-40);
    assert!(tilde.iter().zip(v.row(2)).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn soft_nn_symmetry() {
    let v = col(&[-1.0, 3.0]);
    let (a, tilde) = soft_nn(&[1.0], &v, 0).unwrap();
    assert_eq!(a.probs, vec![0.5, 0.5]);
    assert_eq!(tilde, vec![1.0]);
}

#[test]
fn soft_nn_hand_softmax() {
    let (a, tilde) = soft_nn(&[0.0], &col(&[1.0, 2.0]), 0).unwrap();
    let z = (-1.0f64).exp() + (-4.0f64).exp();
    assert!((a.probs[0] - (-1.0f64).exp() / z).abs() < 1e-15);
    assert!((a.probs[0] - 0.9526).abs() < 5e-5);
    assert!((a.probs[1] - 0.0474).abs() < 5e-5);
    assert!((tilde[0] - 1.0474).abs() < 5e-5);
}

fn eval<F: Fn(&mut Tape, motok_core::Var, motok_core::Var) -> motok_core::Result<motok_core::Var>>(
    u: &Tensor,
    v: &Tensor,
    f: F,
) -> f64 {
    let mut t = Tape::new();
    let a = t.leaf(u.clone());
    let b = t.leaf(v.clone());
    let l = f(&mut t, a, b).unwrap();
    t.item(l)
}

#[test]
fn cls_examples() {
    let u = separated(6);
    for i in 0..6 {
        assert!(eval(&u, &u, |t, a, b| cycle_cls_loss(t, a, b, i)) < 1e-6);
    }
    let u = col(&[0.0, 10.0]);
    let l = eval(&u, &u, |t, a, b| cycle_cls_loss(t, a, b, 0));
    assert!(l.abs() < 1e-12);
    // Hand computation: alpha_0 = 1/(1+e^-100), the soft neighbour sits at
    // 10(1-alpha_0), and beta_0 follows from a two-way softmax.
    let a0 = 1.0 / (1.0 + (-100.0f64).exp());
    let vt = 10.0 * (1.0 - a0);
    let b0 = 1.0 / (1.0 + (-(10.0 - vt).powi(2) + vt * vt).exp());
    assert!((l + b0.ln()).abs() < 1e-15);

    let flat = Tensor::full(&[5, 2], 0.7);
    let v = Tensor::randn(&[5, 2], 1.0, &mut Rng::new(1));
    let l = eval(&flat, &v, |t, a, b| cycle_cls_loss(t, a, b, 3));
    assert!((l - 5.0f64.ln()).abs() < 1e-12);
}

#[test]
fn reg_mse_hand_example() {
    let mut t = Tape::new();
    let beta = t.leaf(Tensor::new(&[1, 3], vec![0.1, 0.8, 0.1]).unwrap());
    let l = reg_from_beta(&mut t, beta, &[1], 0.001, None, 1e-4).unwrap();
    let expect = 0.001 * 0.5 * 0.2f64.ln();
    assert!((t.item(l) - expect).abs() < 1e-15);
    assert!((t.item(l) + 8.047e-4).abs() < 1e-7);

    let onehot = t.leaf(Tensor::new(&[1, 4], vec![0.0, 0.0, 1.0, 0.0]).unwrap());
    let l = reg_from_beta(&mut t, onehot, &[2], 0.0, None, 1e-4).unwrap();
    assert_eq!(t.item(l), 0.0);
}

#[test]
fn cycle_stats_match_tape_regression() {
    let mut rng = Rng::new(3);
    let u = Tensor::randn(&[6, 2], 1.0, &mut rng);
    let v = Tensor::randn(&[6, 2], 1.0, &mut rng);
    let (beta, stats) = cycle_stats(&u, &v, 2, 1e-4).unwrap();
    assert!((beta.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let tape_loss = eval(&u, &v, |t, a, b| cycle_reg_mse_loss(t, a, b, 2, 0.01, 1e-4));
    let plain = (2.0 - stats.mu).powi(2) / stats.sigma_sq + 0.01 * 0.5 * stats.sigma_sq.ln();
    assert!((tape_loss - plain).abs() < 1e-12);
}

#[test]
fn huber_branches() {
    assert!((huber(0.05, 0.1) - 1.25e-3).abs() < 1e-18);
    assert!((huber(1.0, 0.1) - 0.095).abs() < 1e-15);
    assert!((huber(-1.0, 0.1) - 0.095).abs() < 1e-15);
    let d = 0.1;
    assert!((huber(d, d) - 0.5 * d * d).abs() < 1e-18);
    assert!((0.5 * d * d - d * (d - d / 2.0)).abs() < 1e-18);
}

fn gradcheck_pair(name: &str, build: impl Fn(&mut Tape, &[motok_core::Var]) -> motok_core::Result<motok_core::Var>) {
    let mut rng = Rng::new(name.len() as u64);
    for _ in 0..20 {
        let n = 3 + rng.below(5);
        let inputs = vec![Tensor::randn(&[n, 3], 0.6, &mut rng), Tensor::randn(&[n, 3], 0.6, &mut rng)];
        let report = check(&inputs, &build, CheckConfig::default(), &mut rng).unwrap();
        assert!(report.passed, "{name}: {report:?}");
    }
}

#[test]
fn cls_gradient() {
    gradcheck_pair("cls", |t, v| cycle_cls_loss(t, v[0], v[1], 1));
}

#[test]
fn reg_mse_gradient() {
    gradcheck_pair("reg_mse", |t, v| cycle_reg_mse_loss(t, v[0], v[1], 2, 1e-3, 1e-4));
}

#[test]
fn reg_huber_gradient() {
    gradcheck_pair("reg_huber", |t, v| cycle_reg_huber_loss(t, v[0], v[1], 0, 1e-3, 0.1, 1e-4));
}

#[test]
fn multi_hop_gradient() {
    let cfg = TccConfig {
        cycle_length: 3,
        ..TccConfig::default()
    };
    let mut rng = Rng::new(12);
    for _ in 0..20 {
        let inputs: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[4, 2], 0.6, &mut rng)).collect();
        let report = check(
            &inputs,
            |t, v| cycle_loss(t, v, &[0, 1, 2, 3], &cfg),
            CheckConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}

#[test]
fn pair_tcc_reduces_to_cycle_loss() {
    let mut rng = Rng::new(2);
    let a = Tensor::randn(&[5, 2], 1.0, &mut rng);
    let b = Tensor::randn(&[5, 2], 1.0, &mut rng);
    for variant in [TccVariant::Cls, TccVariant::RegMse, TccVariant::RegHuber] {
        let cfg = TccConfig {
            variant,
            ..TccConfig::default()
        };
        let mut t = Tape::new();
        let (va, vb) = (t.leaf(a.clone()), t.leaf(b.clone()));
        // Each sequence starts one tuple with the other as partner.
        let out = tcc_loss(&mut t, &[va, vb], &[7, 7], &cfg, &mut rng).unwrap();
        assert_eq!(out.tuples, 2);
        let l_ab = cycle_loss(&mut t, &[va, vb], &[0, 1, 2, 3, 4], &cfg).unwrap();
        let l_ba = cycle_loss(&mut t, &[vb, va], &[0, 1, 2, 3, 4], &cfg).unwrap();
        let expect = 0.5 * (t.item(l_ab) + t.item(l_ba));
        assert!((t.item(out.loss) - expect).abs() < 1e-12);
    }
}

#[test]
fn identical_separated_tuples_have_no_loss() {
    let s = separated(6);
    for cycle_length in 2..5 {
        for variant in [TccVariant::Cls, TccVariant::RegMse, TccVariant::RegHuber] {
            let cfg = TccConfig {
                variant,
                cycle_length,
                ..TccConfig::default()
            };
            let mut t = Tape::new();
            let vars: Vec<_> = (0..4).map(|_| t.leaf(s.clone())).collect();
            let out = tcc_loss(&mut t, &vars, &[0, 0, 0, 0], &cfg, &mut Rng::new(1)).unwrap();
            assert!(t.item(out.loss) < 1e-6);
        }
    }
}

#[test]
fn lonely_sequences_are_skipped() {
    let mut t = Tape::new();
    let vars: Vec<_> = (0..3).map(|_| t.leaf(separated(4))).collect();
    let out = tcc_loss(&mut t, &vars, &[0, 1, 2], &TccConfig::default(), &mut Rng::new(0)).unwrap();
    assert!(out.skipped);
    assert_eq!(t.item(out.loss), 0.0);
}

#[test]
fn unequal_lengths_are_cropped() {
    let mut rng = Rng::new(5);
    let mut t = Tape::new();
    let a = t.leaf(Tensor::randn(&[7, 2], 1.0, &mut rng));
    let b = t.leaf(Tensor::randn(&[4, 2], 1.0, &mut rng));
    let out = tcc_loss(&mut t, &[a, b], &[1, 1], &TccConfig::default(), &mut rng).unwrap();
    assert!(t.item(out.loss).is_finite());
}

proptest! {
    #[test]
    fn alpha_is_permutation_equivariant(seed in 0u64..5000) {
        let mut rng = Rng::new(seed);
        let v = Tensor::randn(&[6, 3], 1.0, &mut rng);
        let u = Tensor::randn(&[3], 1.0, &mut rng);
        let mut perm: Vec<usize> = (0..6).collect();
        rng.shuffle(&mut perm);
        let rows: Vec<Vec<f64>> = perm.iter().map(|&p| v.row(p).to_vec()).collect();
        let vp = Tensor::from_rows(&rows).unwrap();
        let (a, ta) = soft_nn(u.data(), &v, 0).unwrap();
        let (b, tb) = soft_nn(u.data(), &vp, 0).unwrap();
        for (k, &p) in perm.iter().enumerate() {
            prop_assert!((b.probs[k] - a.probs[p]).abs() < 1e-15);
        }
        for (x, y) in ta.iter().zip(&tb) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert!((a.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn losses_are_translation_invariant(seed in 0u64..5000, shift in -3.0f64..3.0) {
        let mut rng = Rng::new(seed);
        let u = Tensor::randn(&[5, 2], 1.0, &mut rng);
        let v = Tensor::randn(&[5, 2], 1.0, &mut rng);
        let moved = |x: &Tensor| Tensor::new(x.shape(), x.data().iter().map(|a| a + shift).collect()).unwrap();
        for variant in [TccVariant::Cls, TccVariant::RegMse, TccVariant::RegHuber] {
            let cfg = TccConfig { variant, ..TccConfig::default() };
            let base = eval(&u, &v, |t, a, b| cycle_loss(t, &[a, b], &[0, 1, 2, 3, 4], &cfg));
            let shifted = eval(&moved(&u), &moved(&v), |t, a, b| cycle_loss(t, &[a, b], &[0, 1, 2, 3, 4], &cfg));
            prop_assert!((base - shifted).abs() < 1e-9 * (1.0 + base.abs()));
            if variant == TccVariant::Cls {
                prop_assert!(base >= 0.0);
            }
        }
    }
}
