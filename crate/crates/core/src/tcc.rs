//! Temporal cycle-consistency between same-class latent sequences.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::rng::Rng;
use crate::tape::{softmax, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TccVariant {
    Cls,
    RegMse,
    RegHuber,
}

impl TccVariant {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "cls" => Ok(Self::Cls),
            "reg_mse" => Ok(Self::RegMse),
            "reg_huber" => Ok(Self::RegHuber),
            other => Err(invalid!("unknown tcc variant `{other}`")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Cls => "cls",
            Self::RegMse => "reg_mse",
            Self::RegHuber => "reg_huber",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TccConfig {
    pub variant: TccVariant,
    pub lambda: f64,
    pub delta: f64,
    pub cycle_length: usize,
    pub weight: f64,
    pub sigma_floor: f64,
}

impl Default for TccConfig {
    fn default() -> Self {
        Self {
            variant: TccVariant::RegMse,
            lambda: 1e-3,
            delta: 0.1,
            cycle_length: 2,
            weight: 0.1,
            sigma_floor: 1e-4,
        }
    }
}

impl TccConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.weight >= 0.0) {
            return Err(invalid!("tcc.lambda and tcc.weight must be nonnegative"));
        }
        if !(self.delta > 0.0 && self.sigma_floor > 0.0) {
            return Err(invalid!("tcc.delta and tcc.sigma_floor must be positive"));
        }
        if self.cycle_length < 2 {
            return Err(invalid!("tcc.cycle_length must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    UToV,
    VToU,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentDistribution {
    pub probs: Vec<f64>,
    pub anchor_index: usize,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleStats {
    pub soft_nn: Vec<f64>,
    pub mu: f64,
    pub sigma_sq: f64,
}

fn neg_sq_dists(u: &[f64], v: &Tensor) -> Vec<f64> {
    v.rows()
        .map(|r| -r.iter().zip(u).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .collect()
}

/// Soft nearest neighbour of `u` in the rows of `v`.
pub fn soft_nn(u: &[f64], v: &Tensor, anchor: usize) -> Result<(AlignmentDistribution, Vec<f64>)> {
    if v.rank() != 2 || v.shape()[0] == 0 {
        return Err(Error::Empty("soft_nn sequence"));
    }
    if v.shape()[1] != u.len() {
        return Err(Error::ShapeMismatch {
            op: "soft_nn",
            lhs: vec![u.len()],
            rhs: v.shape().to_vec(),
        });
    }
    let probs = softmax(&neg_sq_dists(u, v));
    let mut tilde = vec![0.0; u.len()];
    for (p, row) in probs.iter().zip(v.rows()) {
        for (t, x) in tilde.iter_mut().zip(row) {
            *t += p * x;
        }
    }
    Ok((
        AlignmentDistribution {
            probs,
            anchor_index: anchor,
            direction: Direction::UToV,
        },
        tilde,
    ))
}

/// Out-and-back statistics for anchor `i` of `u` through `v`.
pub fn cycle_stats(u: &Tensor, v: &Tensor, i: usize, sigma_floor: f64) -> Result<(AlignmentDistribution, CycleStats)> {
    if i >= u.shape()[0] {
        return Err(Error::IndexOutOfRange {
            index: i,
            len: u.shape()[0],
        });
    }
    let (_, tilde) = soft_nn(u.row(i), v, i)?;
    let (mut beta, _) = soft_nn(&tilde, u, i)?;
    beta.direction = Direction::VToU;
    let mu: f64 = beta.probs.iter().enumerate().map(|(j, p)| p * j as f64).sum();
    let var: f64 = beta
        .probs
        .iter()
        .enumerate()
        .map(|(j, p)| p * (j as f64 - mu) * (j as f64 - mu))
        .sum();
    Ok((
        beta,
        CycleStats {
            soft_nn: tilde,
            mu,
            sigma_sq: var.max(sigma_floor),
        },
    ))
}

/// Logits of the return distribution β for the given anchors of `seqs[0]`,
/// after hopping through `seqs[1..]` in order. Shape `[anchors, n]`.
pub fn cycle_logits(tape: &mut Tape, seqs: &[Var], anchors: &[usize]) -> Result<Var> {
    if seqs.len() < 2 {
        return Err(invalid!("a cycle needs at least two sequences"));
    }
    let mut query = tape.gather_rows(seqs[0], anchors)?;
    for &next in &seqs[1..] {
        let d = tape.pairwise_sqdist(query, next)?;
        let s = tape.neg(d)?;
        let a = tape.softmax(s)?;
        query = tape.matmul(a, next)?;
    }
    let d = tape.pairwise_sqdist(query, seqs[0])?;
    tape.neg(d)
}

/// Mean over anchors of `−log β_ii`.
pub fn cls_from_logits(tape: &mut Tape, logits: Var, anchors: &[usize]) -> Result<Var> {
    let lp = tape.log_softmax(logits)?;
    let picked = tape.pick(lp, anchors)?;
    let m = tape.mean(picked)?;
    tape.neg(m)
}

/// Mean over anchors of `ℓ(i − μ)/σ² + λ·½·ln σ²` from return
/// distributions `beta` (`[anchors, n]`). `delta = None` uses the squared
/// error, `Some(δ)` the Huber penalty.
pub fn reg_from_beta(
    tape: &mut Tape,
    beta: Var,
    anchors: &[usize],
    lambda: f64,
    delta: Option<f64>,
    sigma_floor: f64,
) -> Result<Var> {
    let shape = tape.shape(beta).to_vec();
    if shape.len() != 2 || shape[0] != anchors.len() {
        return Err(invalid!("beta {shape:?} does not match {} anchors", anchors.len()));
    }
    let n = shape[1];
    let positions = tape.constant(Tensor::new(&[n, 1], (0..n).map(|j| j as f64).collect())?)?;
    let mu = tape.matmul(beta, positions)?;
    let row = tape.constant(Tensor::new(&[1, n], (0..n).map(|j| j as f64).collect())?)?;
    let spread = tape.sub(row, mu)?;
    let spread = tape.square(spread)?;
    let weighted = tape.mul(beta, spread)?;
    let var = tape.sum_axis(weighted, 1)?;
    let var = tape.clamp_min(var, sigma_floor)?;
    let target = tape.constant(Tensor::new(&[anchors.len()], anchors.iter().map(|&i| i as f64).collect())?)?;
    let mu = tape.reshape(mu, &[anchors.len()])?;
    let err = tape.sub(target, mu)?;
    let penalty = match delta {
        None => tape.square(err)?,
        Some(d) => tape.huber(err, d)?,
    };
    let fit = tape.div(penalty, var)?;
    let log_var = tape.log(var)?;
    let reg = tape.scale(log_var, 0.5 * lambda)?;
    let per_anchor = tape.add(fit, reg)?;
    tape.mean(per_anchor)
}

/// Per-anchor loss of one cycle through `seqs`, averaged over `anchors`.
pub fn cycle_loss(tape: &mut Tape, seqs: &[Var], anchors: &[usize], cfg: &TccConfig) -> Result<Var> {
    let logits = cycle_logits(tape, seqs, anchors)?;
    match cfg.variant {
        TccVariant::Cls => cls_from_logits(tape, logits, anchors),
        TccVariant::RegMse | TccVariant::RegHuber => {
            let beta = tape.softmax(logits)?;
            let delta = (cfg.variant == TccVariant::RegHuber).then_some(cfg.delta);
            reg_from_beta(tape, beta, anchors, cfg.lambda, delta, cfg.sigma_floor)
        }
    }
}

pub fn cycle_cls_loss(tape: &mut Tape, u: Var, v: Var, i: usize) -> Result<Var> {
    let logits = cycle_logits(tape, &[u, v], &[i])?;
    cls_from_logits(tape, logits, &[i])
}

pub fn cycle_reg_mse_loss(tape: &mut Tape, u: Var, v: Var, i: usize, lambda: f64, sigma_floor: f64) -> Result<Var> {
    let logits = cycle_logits(tape, &[u, v], &[i])?;
    let beta = tape.softmax(logits)?;
    reg_from_beta(tape, beta, &[i], lambda, None, sigma_floor)
}

pub fn cycle_reg_huber_loss(
    tape: &mut Tape,
    u: Var,
    v: Var,
    i: usize,
    lambda: f64,
    delta: f64,
    sigma_floor: f64,
) -> Result<Var> {
    if delta <= 0.0 {
        return Err(invalid!("huber delta must be positive"));
    }
    let logits = cycle_logits(tape, &[u, v], &[i])?;
    let beta = tape.softmax(logits)?;
    reg_from_beta(tape, beta, &[i], lambda, Some(delta), sigma_floor)
}

#[derive(Debug, Clone)]
pub struct TccOutput {
    pub loss: Var,
    /// Number of cycles averaged.
    pub tuples: usize,
    /// No sequence had a same-class partner.
    pub skipped: bool,
}

/// Same-class tuples: each sequence with a partner starts one tuple; the
/// remaining members are drawn from its class-mates (other than itself).
pub fn sample_tuples(labels: &[u32], cycle_length: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut tuples = Vec::new();
    for (a, &la) in labels.iter().enumerate() {
        let mates: Vec<usize> = (0..labels.len()).filter(|&b| b != a && labels[b] == la).collect();
        if mates.is_empty() {
            continue;
        }
        let mut t = vec![a];
        let mut pool = mates.clone();
        rng.shuffle(&mut pool);
        for k in 0..cycle_length - 1 {
            t.push(if k < pool.len() { pool[k] } else { mates[rng.below(mates.len())] });
        }
        tuples.push(t);
    }
    tuples
}

/// Mean cycle loss over sampled same-class tuples of `latents` (each
/// `[n_b, d]`); every position of the (cropped) first sequence is an anchor.
pub fn tcc_loss(tape: &mut Tape, latents: &[Var], labels: &[u32], cfg: &TccConfig, rng: &mut Rng) -> Result<TccOutput> {
    cfg.validate()?;
    if latents.len() != labels.len() {
        return Err(invalid!("{} latents vs {} labels", latents.len(), labels.len()));
    }
    let flat = tape.discrete(|| sample_tuples(labels, cfg.cycle_length, rng).concat());
    let tuples: Vec<&[usize]> = flat.chunks(cfg.cycle_length).collect();
    if tuples.is_empty() {
        return Ok(TccOutput {
            loss: tape.scalar(0.0)?,
            tuples: 0,
            skipped: true,
        });
    }
    let mut total = tape.scalar(0.0)?;
    for t in &tuples {
        let n = t.iter().map(|&b| tape.shape(latents[b])[0]).min().unwrap_or(0);
        if n == 0 {
            return Err(Error::Empty("tcc sequence"));
        }
        let seqs = t
            .iter()
            .map(|&b| {
                if tape.shape(latents[b])[0] == n {
                    Ok(latents[b])
                } else {
                    tape.slice(latents[b], 0, 0, n)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let anchors: Vec<usize> = (0..n).collect();
        let l = cycle_loss(tape, &seqs, &anchors, cfg)?;
        total = tape.add(total, l)?;
    }
    let loss = tape.scale(total, 1.0 / tuples.len() as f64)?;
    Ok(TccOutput {
        loss,
        tuples: tuples.len(),
        skipped: false,
    })
}
