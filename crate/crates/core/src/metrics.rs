//! Evaluation metrics: temporal alignment (Kendall's tau), FID, retrieval
//! precision, multimodal distance, diversity and multimodality.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_rows(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.rank() != 2 || b.rank() != 2 || a.last_dim() != b.last_dim() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// For every row of `a`, the index of its nearest row of `b` (squared
/// Euclidean, lowest index on ties).
pub fn nearest_assignment(a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    check_rows(a, b, "nearest_assignment")?;
    if b.shape()[0] == 0 {
        return Err(Error::Empty("nearest_assignment"));
    }
    Ok(a.rows()
        .map(|r| {
            let mut best = (0, f64::INFINITY);
            for (j, c) in b.rows().enumerate() {
                let d = sq_dist(r, c);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best.0
        })
        .collect())
}

/// Tau of an assignment against the identity order; tied pairs count as
/// neither concordant nor discordant.
pub fn tau_of_assignment(pi: &[usize]) -> Result<f64> {
    let n = pi.len();
    if n < 2 {
        return Err(invalid!("kendall's tau needs at least two frames, got {n}"));
    }
    let mut score = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            score += match pi[i].cmp(&pi[j]) {
                core::cmp::Ordering::Less => 1,
                core::cmp::Ordering::Greater => -1,
                core::cmp::Ordering::Equal => 0,
            };
        }
    }
    Ok(score as f64 / (n * (n - 1) / 2) as f64)
}

/// Alignment tau between two embedded sequences `[n, d]` and `[m, d]`.
pub fn kendalls_tau(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_rows(a, b, "kendalls_tau")?;
    if a.shape()[0] < 2 {
        return Err(invalid!("kendall's tau needs at least two frames, got {}", a.shape()[0]));
    }
    tau_of_assignment(&nearest_assignment(a, b)?)
}

/// Symmetric matrix, row-major `n × n`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

const SYMMETRY_TOL: f64 = 1e-9;
const EIGEN_CLAMP: f64 = 1e-10;

impl SymMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(invalid!("{} values for a {n}x{n} matrix", data.len()));
        }
        let scale = data.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for i in 0..n {
            for j in 0..i {
                if (data[i * n + j] - data[j * n + i]).abs() > SYMMETRY_TOL * scale {
                    return Err(invalid!("matrix is not symmetric at ({i}, {j})"));
                }
            }
        }
        Ok(Self { n, data })
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let n = values.len();
        let mut data = vec![0.0; n * n];
        for (i, v) in values.iter().enumerate() {
            data[i * n + i] = *v;
        }
        Self { n, data }
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.at(i, i)).sum()
    }

    /// Eigenvalues and column eigenvectors (row-major `n × n`) by cyclic
    /// Jacobi rotations.
    pub fn eigen(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.n;
        let mut a = self.data.clone();
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            v[i * n + i] = 1.0;
        }
        for _ in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[i * n + j] * a[i * n + j])
                .sum();
            let norm: f64 = a.iter().map(|x| x * x).sum();
            if off <= 1e-30 * norm.max(f64::MIN_POSITIVE) {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    let apq = a[p * n + q];
                    if apq == 0.0 {
                        continue;
                    }
                    let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + libm::sqrt(theta * theta + 1.0));
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / libm::sqrt(t * t + 1.0);
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[k * n + p], a[k * n + q]);
                        a[k * n + p] = c * akp - s * akq;
                        a[k * n + q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                        a[p * n + k] = c * apk - s * aqk;
                        a[q * n + k] = s * apk + c * aqk;
                    }
                    for k in 0..n {
                        let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                        v[k * n + p] = c * vkp - s * vkq;
                        v[k * n + q] = s * vkp + c * vkq;
                    }
                }
            }
        }
        ((0..n).map(|i| a[i * n + i]).collect(), v)
    }

    /// `f` applied to the spectrum; eigenvalues below the clamp threshold
    /// are treated as zero.
    fn spectral(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let n = self.n;
        let (vals, vecs) = self.eigen();
        let scale = vals.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let mut out = vec![0.0; n * n];
        for (k, &lam) in vals.iter().enumerate() {
            if lam < -EIGEN_CLAMP * scale {
                return Err(invalid!("matrix is not positive semidefinite (eigenvalue {lam})"));
            }
            let fl = f(lam.max(0.0));
            for i in 0..n {
                for j in 0..n {
                    out[i * n + j] += fl * vecs[i * n + k] * vecs[j * n + k];
                }
            }
        }
        Ok(Self { n, data: out })
    }

    pub fn sqrt_psd(&self) -> Result<Self> {
        self.spectral(libm::sqrt)
    }

    fn mul(&self, other: &Self) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let a = self.at(i, k);
                for j in 0..n {
                    out[i * n + j] += a * other.at(k, j);
                }
            }
        }
        out
    }

    fn symmetrized(n: usize, data: Vec<f64>) -> Self {
        let mut out = data.clone();
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = 0.5 * (data[i * n + j] + data[j * n + i]);
            }
        }
        Self { n, data: out }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    pub cov: SymMatrix,
}

impl GaussianStats {
    pub fn new(mean: Vec<f64>, cov: SymMatrix) -> Result<Self> {
        if cov.n != mean.len() {
            return Err(invalid!("mean has {} entries, covariance is {}x{}", mean.len(), cov.n, cov.n));
        }
        Ok(Self { mean, cov })
    }

    /// Sample mean and unbiased covariance of feature rows `[B, d]`.
    pub fn from_features(feats: &Tensor) -> Result<Self> {
        if feats.rank() != 2 || feats.shape()[0] < 2 {
            return Err(invalid!("need at least two feature rows"));
        }
        let (b, d) = (feats.shape()[0], feats.last_dim());
        let mut mean = vec![0.0; d];
        for r in feats.rows() {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / b as f64;
            }
        }
        let mut cov = vec![0.0; d * d];
        for r in feats.rows() {
            for i in 0..d {
                let di = r[i] - mean[i];
                for j in 0..d {
                    cov[i * d + j] += di * (r[j] - mean[j]) / (b - 1) as f64;
                }
            }
        }
        Ok(Self {
            mean,
            cov: SymMatrix::symmetrized(d, cov),
        })
    }
}

/// Fréchet distance between two Gaussians.
pub fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(invalid!("feature dims differ: {} vs {}", a.mean.len(), b.mean.len()));
    }
    let n = a.cov.n;
    let mean_term = sq_dist(&a.mean, &b.mean);
    let ra = a.cov.sqrt_psd()?;
    let inner = SymMatrix::symmetrized(n, SymMatrix { n, data: ra.mul(&b.cov) }.mul(&ra));
    let cross = inner.sqrt_psd()?.trace();
    Ok((mean_term + a.cov.trace() + b.cov.trace() - 2.0 * cross).max(0.0))
}

/// Top-`k` retrieval accuracy: rows are shuffled into pools of `pool`
/// matched pairs; each motion ranks its own text among the pool's texts by
/// Euclidean distance. Rows left over after the last full pool are dropped.
pub fn r_precision(motion: &Tensor, text: &Tensor, k: usize, pool: usize, rng: &mut Rng) -> Result<f64> {
    check_rows(motion, text, "r_precision")?;
    let b = motion.shape()[0];
    if text.shape()[0] != b {
        return Err(invalid!("{b} motions but {} texts", text.shape()[0]));
    }
    if k == 0 || k > pool {
        return Err(invalid!("k must be in 1..={pool}, got {k}"));
    }
    if pool == 0 || b < pool {
        return Err(invalid!("{b} pairs is fewer than the pool size {pool}"));
    }
    let mut order: Vec<usize> = (0..b).collect();
    rng.shuffle(&mut order);
    let mut hits = 0usize;
    let mut total = 0usize;
    for group in order.chunks_exact(pool) {
        for &i in group {
            let own = sq_dist(motion.row(i), text.row(i));
            let closer = group
                .iter()
                .filter(|&&j| j != i)
                .filter(|&&j| sq_dist(motion.row(i), text.row(j)) < own)
                .count();
            hits += usize::from(closer < k);
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MmMode {
    #[default]
    Euclidean,
    /// Mean cosine similarity (higher is closer).
    Cosine,
}

pub fn mm_dist(motion: &Tensor, text: &Tensor, mode: MmMode) -> Result<f64> {
    check_rows(motion, text, "mm_dist")?;
    let b = motion.shape()[0];
    if text.shape()[0] != b || b == 0 {
        return Err(invalid!("need matching nonempty rows, got {b} and {}", text.shape()[0]));
    }
    let total: f64 = motion
        .rows()
        .zip(text.rows())
        .map(|(m, t)| match mode {
            MmMode::Euclidean => libm::sqrt(sq_dist(m, t)),
            MmMode::Cosine => {
                let dot: f64 = m.iter().zip(t).map(|(a, b)| a * b).sum();
                let nm = libm::sqrt(m.iter().map(|a| a * a).sum());
                let nt = libm::sqrt(t.iter().map(|a| a * a).sum());
                if nm == 0.0 || nt == 0.0 {
                    0.0
                } else {
                    dot / (nm * nt)
                }
            }
        })
        .sum();
    Ok(total / b as f64)
}

/// Mean Euclidean distance over `pairs` index pairs drawn independently and
/// uniformly.
pub fn diversity(feats: &Tensor, pairs: usize, rng: &mut Rng) -> Result<f64> {
    if feats.rank() != 2 || feats.shape()[0] < 2 {
        return Err(invalid!("diversity needs at least two feature rows"));
    }
    if pairs == 0 {
        return Err(invalid!("diversity needs at least one pair"));
    }
    let n = feats.shape()[0];
    let mut total = 0.0;
    for _ in 0..pairs {
        let (i, j) = (rng.below(n), rng.below(n));
        total += libm::sqrt(sq_dist(feats.row(i), feats.row(j)));
    }
    Ok(total / pairs as f64)
}

/// Root-mean-square distance of each prompt's samples to their centroid,
/// averaged over prompts.
pub fn mmodality(groups: &[Tensor]) -> Result<f64> {
    if groups.is_empty() {
        return Err(invalid!("mmodality needs at least one prompt"));
    }
    let mut total = 0.0;
    for g in groups {
        if g.rank() != 2 || g.shape()[0] < 2 {
            return Err(invalid!("mmodality needs at least two samples per prompt"));
        }
        let (s, d) = (g.shape()[0], g.last_dim());
        // Shifted by the first sample so identical samples give exactly 0.
        let origin = g.row(0);
        let shifted: Vec<Vec<f64>> = g.rows().map(|r| r.iter().zip(origin).map(|(a, b)| a - b).collect()).collect();
        let mut mean = vec![0.0; d];
        for r in &shifted {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / s as f64;
            }
        }
        let var: f64 = shifted.iter().map(|r| sq_dist(r, &mean)).sum::<f64>() / s as f64;
        total += libm::sqrt(var);
    }
    Ok(total / groups.len() as f64)
}
