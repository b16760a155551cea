use motok_core::metrics::{
    diversity, fid, kendalls_tau, mm_dist, mmodality, nearest_assignment, r_precision, tau_of_assignment,
    GaussianStats, MmMode, SymMatrix,
};
use motok_core::{Error, Rng, Tensor};
use proptest::prelude::*;

/// Pair counting written independently of the library: count, for every
/// unordered pair, whether the assignment preserves, reverses or ties it.
fn brute_tau(pi: &[usize]) -> f64 {
    let n = pi.len();
    let (mut conc, mut disc) = (0usize, 0usize);
    for i in 0..n {
        for j in 0..n {
            if i < j && pi[i] < pi[j] {
                conc += 1;
            }
            if i < j && pi[i] > pi[j] {
                disc += 1;
            }
        }
    }
    (conc as f64 - disc as f64) / (n * (n - 1) / 2) as f64
}

fn line(n: usize) -> Tensor {
    Tensor::new(&[n, 1], (0..n).map(|i| 10.0 * i as f64).collect()).unwrap()
}

#[test]
fn tau_examples() {
    let a = line(6);
    assert_eq!(kendalls_tau(&a, &a).unwrap(), 1.0);
    let rev = Tensor::new(&[6, 1], (0..6).rev().map(|i| 10.0 * i as f64).collect()).unwrap();
    assert_eq!(kendalls_tau(&a, &rev).unwrap(), -1.0);
    assert!((tau_of_assignment(&[1, 0, 2, 3]).unwrap() - 4.0 / 6.0).abs() < 1e-15);
    assert!(matches!(kendalls_tau(&line(1), &line(1)), Err(Error::InvalidArgument(_))));
}

#[test]
fn tau_ties_count_as_neither() {
    assert_eq!(tau_of_assignment(&[0, 0, 0]).unwrap(), 0.0);
    // Pairs: (0,1) tie, (0,2) concordant, (1,2) concordant.
    assert!((tau_of_assignment(&[0, 0, 1]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn tau_matches_brute_force() {
    let mut rng = Rng::new(17);
    for _ in 0..200 {
        let n = 2 + rng.below(49);
        let m = 1 + rng.below(50);
        let pi: Vec<usize> = (0..n).map(|_| rng.below(m)).collect();
        assert_eq!(tau_of_assignment(&pi).unwrap(), brute_tau(&pi));
    }
}

#[test]
fn nearest_assignment_prefers_lowest_index() {
    let a = Tensor::new(&[1, 1], vec![1.0]).unwrap();
    let b = Tensor::new(&[3, 1], vec![0.0, 2.0, 1.0]).unwrap();
    assert_eq!(nearest_assignment(&a, &b).unwrap(), vec![2]);
    let b = Tensor::new(&[2, 1], vec![2.0, 0.0]).unwrap();
    assert_eq!(nearest_assignment(&a, &b).unwrap(), vec![0]);
}

fn random_psd(d: usize, rng: &mut Rng) -> SymMatrix {
    let a = Tensor::randn(&[d, d], 1.0, rng);
    let mut c = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            c[i * d + j] = (0..d).map(|k| a.data()[i * d + k] * a.data()[j * d + k]).sum::<f64>() / d as f64;
        }
    }
    SymMatrix::new(d, c).unwrap()
}

#[test]
fn fid_identical_is_zero() {
    let mut rng = Rng::new(3);
    for d in [1, 3, 8] {
        let s = GaussianStats::new(Tensor::randn(&[d], 1.0, &mut rng).into_data(), random_psd(d, &mut rng)).unwrap();
        assert!(fid(&s, &s).unwrap() < 1e-9);
    }
}

#[test]
fn fid_scalar_closed_form() {
    let a = GaussianStats::new(vec![0.0], SymMatrix::diagonal(&[1.0])).unwrap();
    let b = GaussianStats::new(vec![1.0], SymMatrix::diagonal(&[1.0])).unwrap();
    assert!((fid(&a, &b).unwrap() - 1.0).abs() < 1e-9);
    let c = GaussianStats::new(vec![0.0], SymMatrix::diagonal(&[4.0])).unwrap();
    // (sqrt 1 - sqrt 4)^2 = 1.
    assert!((fid(&a, &c).unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn fid_diagonal_matches_closed_form() {
    let mut rng = Rng::new(5);
    for _ in 0..20 {
        let d = 1 + rng.below(8);
        let va: Vec<f64> = (0..d).map(|_| rng.uniform_in(0.0, 3.0)).collect();
        let vb: Vec<f64> = (0..d).map(|_| rng.uniform_in(0.0, 3.0)).collect();
        let ma: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let mb: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let expect: f64 = (0..d)
            .map(|i| (va[i].sqrt() - vb[i].sqrt()).powi(2) + (ma[i] - mb[i]).powi(2))
            .sum();
        let a = GaussianStats::new(ma, SymMatrix::diagonal(&va)).unwrap();
        let b = GaussianStats::new(mb, SymMatrix::diagonal(&vb)).unwrap();
        assert!((fid(&a, &b).unwrap() - expect).abs() < 1e-9);
    }
}

#[test]
fn fid_is_symmetric_and_nonnegative() {
    let mut rng = Rng::new(8);
    for _ in 0..10 {
        let d = 5;
        let a = GaussianStats::new(Tensor::randn(&[d], 1.0, &mut rng).into_data(), random_psd(d, &mut rng)).unwrap();
        let b = GaussianStats::new(Tensor::randn(&[d], 1.0, &mut rng).into_data(), random_psd(d, &mut rng)).unwrap();
        let (ab, ba) = (fid(&a, &b).unwrap(), fid(&b, &a).unwrap());
        assert!(ab >= 0.0);
        assert!((ab - ba).abs() < 1e-9);
    }
}

#[test]
fn fid_rejects_asymmetric_covariance() {
    assert!(SymMatrix::new(2, vec![1.0, 0.5, 0.0, 1.0]).is_err());
}

#[test]
fn stats_from_features() {
    let f = Tensor::new(&[4, 2], vec![1.0, 0.0, 3.0, 0.0, 1.0, 2.0, 3.0, 2.0]).unwrap();
    let s = GaussianStats::from_features(&f).unwrap();
    assert_eq!(s.mean, vec![2.0, 1.0]);
    let v = 4.0 / 3.0;
    assert_eq!(s.cov.data, vec![v, 0.0, 0.0, v]);
}

#[test]
fn eigen_reconstructs_matrix() {
    let mut rng = Rng::new(9);
    let m = random_psd(6, &mut rng);
    let (vals, vecs) = m.eigen();
    for i in 0..6 {
        for j in 0..6 {
            let r: f64 = (0..6).map(|k| vals[k] * vecs[i * 6 + k] * vecs[j * 6 + k]).sum();
            assert!((r - m.data[i * 6 + j]).abs() < 1e-10);
        }
    }
    let root = m.sqrt_psd().unwrap();
    for i in 0..6 {
        for j in 0..6 {
            let r: f64 = (0..6).map(|k| root.data[i * 6 + k] * root.data[k * 6 + j]).sum();
            assert!((r - m.data[i * 6 + j]).abs() < 1e-10);
        }
    }
}

#[test]
fn r_precision_perfect_and_chance() {
    let mut rng = Rng::new(2);
    let feats = Tensor::randn(&[64, 8], 1.0, &mut rng);
    assert_eq!(r_precision(&feats, &feats, 1, 32, &mut rng).unwrap(), 1.0);

    let b = 32 * 300;
    let motion = Tensor::randn(&[b, 4], 1.0, &mut rng);
    let mut perm: Vec<usize> = (0..b).collect();
    rng.shuffle(&mut perm);
    let text = Tensor::new(&[b, 4], perm.iter().flat_map(|&i| motion.row(i).to_vec()).collect()).unwrap();
    let p = r_precision(&motion, &text, 1, 32, &mut rng).unwrap();
    let chance = 1.0 / 32.0;
    let sigma = (chance * (1.0 - chance) / b as f64).sqrt();
    assert!((p - chance).abs() < 3.0 * sigma, "{p}");

    assert!(r_precision(&feats, &feats, 0, 32, &mut rng).is_err());
    let few = Tensor::randn(&[31, 8], 1.0, &mut rng);
    assert!(r_precision(&few, &few, 1, 32, &mut rng).is_err());
}

#[test]
fn r_precision_top_k_is_monotone() {
    let mut rng = Rng::new(4);
    let m = Tensor::randn(&[96, 4], 1.0, &mut rng);
    let noise = Tensor::randn(&[96, 4], 0.8, &mut rng);
    let t = Tensor::new(&[96, 4], m.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect()).unwrap();
    let tops: Vec<f64> = (1..=3).map(|k| r_precision(&m, &t, k, 32, &mut Rng::new(1)).unwrap()).collect();
    assert!(tops[0] <= tops[1] && tops[1] <= tops[2]);
}

#[test]
fn mm_dist_examples() {
    let mut rng = Rng::new(6);
    let f = Tensor::randn(&[5, 3], 1.0, &mut rng);
    assert_eq!(mm_dist(&f, &f, MmMode::Euclidean).unwrap(), 0.0);
    let a = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
    let b = Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap();
    assert!((mm_dist(&a, &b, MmMode::Euclidean).unwrap() - 2f64.sqrt()).abs() < 1e-15);
    assert_eq!(mm_dist(&a, &b, MmMode::Cosine).unwrap(), 0.0);
    let g = Tensor::randn(&[5, 3], 1.0, &mut rng);
    for mode in [MmMode::Euclidean, MmMode::Cosine] {
        assert_eq!(mm_dist(&f, &g, mode).unwrap(), mm_dist(&g, &f, mode).unwrap());
    }
    assert!(matches!(
        mm_dist(&f, &Tensor::zeros(&[5, 2]), MmMode::Euclidean),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn diversity_and_mmodality_degenerate() {
    let same = Tensor::full(&[10, 3], 0.7);
    assert_eq!(diversity(&same, 300, &mut Rng::new(1)).unwrap(), 0.0);
    assert_eq!(mmodality(&[same.clone(), same]).unwrap(), 0.0);
    assert!(diversity(&Tensor::zeros(&[1, 3]), 300, &mut Rng::new(1)).is_err());
    assert!(mmodality(&[Tensor::zeros(&[1, 3])]).is_err());
    assert!(mmodality(&[]).is_err());
}

#[test]
fn diversity_two_clusters() {
    let mut data = vec![0.0; 8];
    data[4..].fill(2.0);
    let f = Tensor::new(&[8, 1], data).unwrap();
    // Exhaustive expectation over ordered index pairs.
    let mut total = 0.0;
    for i in 0..8 {
        for j in 0..8 {
            total += (f.row(i)[0] - f.row(j)[0]).abs();
        }
    }
    let expect = total / 64.0;
    assert_eq!(expect, 1.0);
    let pairs = 200_000;
    let got = diversity(&f, pairs, &mut Rng::new(3)).unwrap();
    // Each sample is 0 or 2 with probability 1/2.
    assert!((got - expect).abs() < 4.0 / (pairs as f64).sqrt(), "{got}");
    assert_eq!(got, diversity(&f, pairs, &mut Rng::new(3)).unwrap());
}

#[test]
fn mmodality_hand_value() {
    // Two samples at ±1 along one axis: centroid 0, RMS distance 1.
    let g = Tensor::new(&[2, 2], vec![1.0, 0.0, -1.0, 0.0]).unwrap();
    let h = Tensor::new(&[2, 2], vec![0.0, 3.0, 0.0, 0.0]).unwrap();
    assert!((mmodality(&[g, h]).unwrap() - (1.0 + 1.5) / 2.0).abs() < 1e-15);
}

proptest! {
    #[test]
    fn tau_self_is_one(n in 2usize..30, seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let a = Tensor::randn(&[n, 3], 1.0, &mut rng);
        prop_assert_eq!(kendalls_tau(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn tau_flips_when_target_is_reversed(n in 2usize..30, seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let a = Tensor::randn(&[n, 2], 1.0, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let b = Tensor::new(&[n, 2], perm.iter().flat_map(|&i| a.row(i).to_vec()).collect()).unwrap();
        let rev = Tensor::new(&[n, 2], perm.iter().rev().flat_map(|&i| a.row(i).to_vec()).collect()).unwrap();
        let (t, tr) = (kendalls_tau(&a, &b).unwrap(), kendalls_tau(&a, &rev).unwrap());
        prop_assert!((t + tr).abs() < 1e-12);
    }
}
