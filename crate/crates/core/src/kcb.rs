//! Kinematic constraint block: foot contacts, contact confidence, the
//! foot-slide diagnostic and the residual cross-attention correction.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::motion::{fk_frames, frame_velocities, FeatureLayout, MotionSequence, NormStats, SkeletonSpec};
use crate::nn::{sinusoidal_positions, Bound, Linear, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KcbConfig {
    pub height_thresh: f64,
    /// Units per frame.
    pub speed_thresh: f64,
    pub sigmoid_temp: f64,
    pub heads: usize,
    pub width: usize,
    pub pos_dim: usize,
}

impl KcbConfig {
    /// Height threshold at 5% of the leg length of `skeleton`.
    pub fn for_skeleton(skeleton: &SkeletonSpec) -> Result<Self> {
        Ok(Self {
            height_thresh: 0.05 * leg_length(skeleton)?,
            speed_thresh: 0.1,
            sigmoid_temp: 0.02,
            heads: 2,
            width: 64,
            pos_dim: 16,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.height_thresh > 0.0 && self.speed_thresh > 0.0) {
            return Err(invalid!("kcb thresholds must be positive"));
        }
        if !(self.sigmoid_temp > 0.0) {
            return Err(invalid!("kcb.sigmoid_temp must be positive"));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(invalid!("kcb.width must be divisible by kcb.heads"));
        }
        Ok(())
    }
}

/// Summed bone lengths from the first foot joint up to the root.
pub fn leg_length(skeleton: &SkeletonSpec) -> Result<f64> {
    let chains = skeleton.chains()?;
    let foot = *skeleton.foot_joints.first().ok_or(Error::Empty("foot joints"))?;
    Ok(chains[foot]
        .iter()
        .map(|&k| {
            let o = skeleton.rest_offset[k];
            libm::sqrt(o[0] * o[0] + o[1] * o[1] + o[2] * o[2])
        })
        .sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContactState {
    /// `labels[t][f]`
    pub labels: Vec<Vec<bool>>,
    pub confidence: Vec<Vec<f64>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub fn contact_confidence(speeds: &[f64], cfg: &KcbConfig) -> Result<Vec<f64>> {
    if !(cfg.sigmoid_temp > 0.0) {
        return Err(invalid!("sigmoid temperature must be positive, got {}", cfg.sigmoid_temp));
    }
    Ok(speeds
        .iter()
        .map(|&s| sigmoid((cfg.speed_thresh - s) / cfg.sigmoid_temp))
        .collect())
}

fn joint_count(positions: &Tensor) -> Result<(usize, usize)> {
    if positions.rank() != 3 || positions.shape()[2] != 3 {
        return Err(invalid!("positions must be [N, J, 3], got {:?}", positions.shape()));
    }
    Ok((positions.shape()[0], positions.shape()[1]))
}

/// Contact iff the joint is below `height_thresh` and moves slower than
/// `speed_thresh`.
pub fn detect_contacts(positions: &Tensor, foot_joints: &[usize], cfg: &KcbConfig) -> Result<ContactState> {
    let (n, j) = joint_count(positions)?;
    if let Some(&f) = foot_joints.iter().find(|&&f| f >= j) {
        return Err(Error::IndexOutOfRange { index: f, len: j });
    }
    let vel = frame_velocities(positions);
    let (p, v) = (positions.data(), vel.data());
    let mut labels = Vec::with_capacity(n);
    let mut confidence = Vec::with_capacity(n);
    for t in 0..n {
        let speeds: Vec<f64> = foot_joints
            .iter()
            .map(|&f| {
                let k = (t * j + f) * 3;
                libm::sqrt(v[k] * v[k] + v[k + 1] * v[k + 1] + v[k + 2] * v[k + 2])
            })
            .collect();
        labels.push(
            foot_joints
                .iter()
                .zip(&speeds)
                .map(|(&f, &s)| p[(t * j + f) * 3 + 1] < cfg.height_thresh && s < cfg.speed_thresh)
                .collect(),
        );
        confidence.push(contact_confidence(&speeds, cfg)?);
    }
    Ok(ContactState { labels, confidence })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FootSlide {
    /// Mean horizontal displacement per contact (frame, foot) entry.
    pub value: f64,
    pub contacts: usize,
    pub no_contact: bool,
}

pub fn foot_slide_positions(positions: &Tensor, foot_joints: &[usize], cfg: &KcbConfig) -> Result<FootSlide> {
    let (_, j) = joint_count(positions)?;
    let state = detect_contacts(positions, foot_joints, cfg)?;
    let vel = frame_velocities(positions);
    let v = vel.data();
    let mut total = 0.0;
    let mut count = 0;
    for (t, row) in state.labels.iter().enumerate() {
        for (&f, &on) in foot_joints.iter().zip(row) {
            if on {
                let k = (t * j + f) * 3;
                total += libm::sqrt(v[k] * v[k] + v[k + 2] * v[k + 2]);
                count += 1;
            }
        }
    }
    Ok(FootSlide {
        value: if count == 0 { 0.0 } else { total / count as f64 },
        contacts: count,
        no_contact: count == 0,
    })
}

pub fn foot_slide(seq: &MotionSequence, skeleton: &SkeletonSpec, layout: &FeatureLayout, cfg: &KcbConfig) -> Result<FootSlide> {
    let pos = fk_frames(&seq.frames, seq.fps, skeleton, layout)?;
    foot_slide_positions(&pos, &skeleton.foot_joints, cfg)
}

/// World joint coordinates of `[B, N, D]` denormalized features as three
/// `[B, N, J]` tensors (x, y, z), differentiable in the features.
pub fn fk_tape(
    tape: &mut Tape,
    m: Var,
    skeleton: &SkeletonSpec,
    layout: &FeatureLayout,
    fps: f64,
) -> Result<[Var; 3]> {
    let shape = tape.shape(m).to_vec();
    if shape.len() != 3 {
        return Err(invalid!("fk_tape expects [B, N, D], got {shape:?}"));
    }
    layout.validate(shape[2])?;
    let (b, n) = (shape[0], shape[1]);
    let j = skeleton.joint_count();
    if layout.joints() != j {
        return Err(invalid!("layout has {} joints, skeleton {j}", layout.joints()));
    }
    let col = |tape: &mut Tape, c: usize| tape.slice(m, 2, c, c + 1);
    let inv = 1.0 / fps;

    // Exclusive prefix sums: the state at frame t integrates frames 0..t.
    let omega = col(tape, layout.yaw_rate.start)?;
    let incl = tape.cumsum(omega, 1)?;
    let yaw = tape.sub(incl, omega)?;
    let yaw = tape.scale(yaw, inv)?;
    let (c, s) = (tape.cos(yaw)?, tape.sin(yaw)?);

    let vx = col(tape, layout.planar_velocity.start)?;
    let vz = col(tape, layout.planar_velocity.start + 1)?;
    let rot = |tape: &mut Tape, x: Var, z: Var| -> Result<(Var, Var)> {
        let (cx, sz) = (tape.mul(c, x)?, tape.mul(s, z)?);
        let (sx, cz) = (tape.mul(s, x)?, tape.mul(c, z)?);
        Ok((tape.add(cx, sz)?, tape.sub(cz, sx)?))
    };
    let (dx, dz) = rot(tape, vx, vz)?;
    let integrate = |tape: &mut Tape, d: Var| -> Result<Var> {
        let incl = tape.cumsum(d, 1)?;
        let excl = tape.sub(incl, d)?;
        tape.scale(excl, inv)
    };
    let px = integrate(tape, dx)?;
    let pz = integrate(tape, dz)?;
    let h = col(tape, layout.height.start)?;

    let local = tape.slice(m, 2, layout.local_positions.start, layout.local_positions.end)?;
    let local = tape.reshape(local, &[b, n, j, 3])?;
    let rest_t = tape.constant(Tensor::new(
        &[j, 3],
        skeleton.rest_offset.iter().flatten().copied().collect(),
    )?)?;
    let offsets = tape.add(local, rest_t)?;
    let chain_t = {
        let a = skeleton.chain_matrix()?;
        let mut t = vec![0.0; j * j];
        for r in 0..j {
            for k in 0..j {
                t[k * j + r] = a.data()[r * j + k];
            }
        }
        tape.constant(Tensor::new(&[j, j], t)?)?
    };
    let mut chain = Vec::with_capacity(3);
    for axis in 0..3 {
        let o = tape.slice(offsets, 3, axis, axis + 1)?;
        let o = tape.reshape(o, &[b, n, j])?;
        chain.push(tape.matmul(o, chain_t)?);
    }
    let (wx, wz) = rot(tape, chain[0], chain[2])?;
    let x = tape.add(px, wx)?;
    let y = tape.add(h, chain[1])?;
    let z = tape.add(pz, wz)?;
    Ok([x, y, z])
}

/// Backward differences along the frame axis of `[B, N, J]` (frame 0 copies
/// frame 1).
pub fn tape_velocities(tape: &mut Tape, p: Var) -> Result<Var> {
    let n = tape.shape(p)[1];
    if n < 2 {
        return Err(invalid!("velocities need at least two frames"));
    }
    let later = tape.slice(p, 1, 1, n)?;
    let earlier = tape.slice(p, 1, 0, n - 1)?;
    let d = tape.sub(later, earlier)?;
    let first = tape.slice(d, 1, 0, 1)?;
    tape.concat(&[first, d], 1)
}

/// Differentiable kinematic summary of a decoded batch.
#[derive(Debug, Clone)]
pub struct Kinematics {
    /// Contact confidence per foot joint, `[B, N, F]`.
    pub confidence: Var,
    /// `[B, N, 4F + 6J]`: confidence, gated foot velocities, joint
    /// velocities and root-relative joint positions.
    pub features: Var,
}

pub fn kinematics(
    tape: &mut Tape,
    m: Var,
    skeleton: &SkeletonSpec,
    layout: &FeatureLayout,
    fps: f64,
    cfg: &KcbConfig,
) -> Result<Kinematics> {
    let [x, y, z] = fk_tape(tape, m, skeleton, layout, fps)?;
    let j = skeleton.joint_count();
    let f = skeleton.foot_joints.len();
    let mut select = vec![0.0; j * f];
    for (slot, &fj) in skeleton.foot_joints.iter().enumerate() {
        select[fj * f + slot] = 1.0;
    }
    let select = tape.constant(Tensor::new(&[j, f], select)?)?;
    let vel = [tape_velocities(tape, x)?, tape_velocities(tape, y)?, tape_velocities(tape, z)?];
    let mut sq = None;
    let mut foot_vel = Vec::with_capacity(3);
    for &v in &vel {
        let fv = tape.matmul(v, select)?;
        let s = tape.square(fv)?;
        sq = Some(match sq {
            None => s,
            Some(a) => tape.add(a, s)?,
        });
        foot_vel.push(fv);
    }
    let speed = tape.offset(sq.expect("three axes"), 1e-8)?;
    let speed = tape.sqrt(speed)?;
    let arg = tape.offset(speed, -cfg.speed_thresh)?;
    let arg = tape.scale(arg, -1.0 / cfg.sigmoid_temp)?;
    let confidence = tape.sigmoid(arg)?;

    let mut parts = vec![confidence];
    for fv in foot_vel {
        let g = tape.mul(confidence, fv)?;
        parts.push(tape.scale(g, fps)?);
    }
    for v in vel {
        parts.push(tape.scale(v, fps)?);
    }
    let root_x = tape.slice(x, 2, 0, 1)?;
    let root_z = tape.slice(z, 2, 0, 1)?;
    parts.push(tape.sub(x, root_x)?);
    parts.push(y);
    parts.push(tape.sub(z, root_z)?);
    let features = tape.concat(&parts, 2)?;
    Ok(Kinematics { confidence, features })
}

pub fn kinematic_width(skeleton: &SkeletonSpec) -> usize {
    4 * skeleton.foot_joints.len() + 6 * skeleton.joint_count()
}

/// Single residual cross-attention layer: decoder frames attend over
/// kinematic embeddings; the output projection starts at zero.
#[derive(Debug, Clone)]
pub struct Kcb {
    pub cfg: KcbConfig,
    q_motion: Linear,
    q_pos: ParamId,
    k_kin: Linear,
    k_pos: ParamId,
    v_kin: Linear,
    out: Linear,
}

#[derive(Debug, Clone)]
pub struct KcbOutput {
    pub corrected: Var,
    pub confidence: Var,
}

impl Kcb {
    pub fn new(store: &mut ParamStore, cfg: KcbConfig, dim: usize, skeleton: &SkeletonSpec, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let kin = kinematic_width(skeleton);
        let w = cfg.width;
        let bound = 1.0 / libm::sqrt(cfg.pos_dim as f64);
        Ok(Self {
            cfg,
            q_motion: Linear::new(store, "kcb.q", dim, w, rng),
            q_pos: store.add("kcb.q_pos", Tensor::uniform(&[cfg.pos_dim, w], -bound, bound, rng)),
            k_kin: Linear::new(store, "kcb.k", kin, w, rng),
            k_pos: store.add("kcb.k_pos", Tensor::uniform(&[cfg.pos_dim, w], -bound, bound, rng)),
            v_kin: Linear::new(store, "kcb.v", kin, w, rng),
            out: Linear::zeroed(store, "kcb.out", w, dim),
        })
    }

    /// Correct normalized decoder output `m_hat` (`[B, N, D]`).
    #[allow(clippy::too_many_arguments)]
    pub fn correct(
        &self,
        tape: &mut Tape,
        p: &Bound,
        m_hat: Var,
        norm: &NormStats,
        skeleton: &SkeletonSpec,
        layout: &FeatureLayout,
        fps: f64,
    ) -> Result<KcbOutput> {
        let shape = tape.shape(m_hat).to_vec();
        if shape.len() != 3 || shape[2] != norm.dim() {
            return Err(Error::ShapeMismatch {
                op: "kcb_correct",
                lhs: shape,
                rhs: vec![norm.dim()],
            });
        }
        let n = shape[1];
        let std = tape.constant(Tensor::new(&[norm.dim()], norm.std.clone())?)?;
        let mean = tape.constant(Tensor::new(&[norm.dim()], norm.mean.clone())?)?;
        let raw = tape.mul(m_hat, std)?;
        let raw = tape.add(raw, mean)?;
        let kin = kinematics(tape, raw, skeleton, layout, fps, &self.cfg)?;
        self.attend(tape, p, m_hat, kin.features, n).map(|corrected| KcbOutput {
            corrected,
            confidence: kin.confidence,
        })
    }

    fn attend(&self, tape: &mut Tape, p: &Bound, m_hat: Var, kin: Var, n: usize) -> Result<Var> {
        let pos = tape.constant(sinusoidal_positions(n, self.cfg.pos_dim))?;
        let qp = tape.matmul(pos, p[self.q_pos])?;
        let kp = tape.matmul(pos, p[self.k_pos])?;
        let q = self.q_motion.forward(tape, p, m_hat)?;
        let q = tape.add(q, qp)?;
        let k = self.k_kin.forward(tape, p, kin)?;
        let k = tape.add(k, kp)?;
        let v = self.v_kin.forward(tape, p, kin)?;
        let dh = self.cfg.width / self.cfg.heads;
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let qh = tape.slice(q, 2, a, b)?;
            let kh = tape.slice(k, 2, a, b)?;
            let vh = tape.slice(v, 2, a, b)?;
            let scores = tape.bmm(qh, kh, true)?;
            let scores = tape.scale(scores, 1.0 / libm::sqrt(dh as f64))?;
            let att = tape.softmax(scores)?;
            heads.push(tape.bmm(att, vh, false)?);
        }
        let ctx = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 2)? };
        let delta = self.out.forward(tape, p, ctx)?;
        tape.add(m_hat, delta)
    }
}
