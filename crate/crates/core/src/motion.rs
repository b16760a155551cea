//! Motion sequences, the feature layout, the skeleton and forward kinematics.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Lower bound applied to every per-column standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    /// `[N, D]`
    pub frames: Tensor,
    pub fps: f64,
    pub category: Option<u32>,
    pub text: Option<String>,
}

impl MotionSequence {
    pub fn new(frames: Tensor, fps: f64) -> Result<Self> {
        if frames.rank() != 2 || frames.shape()[0] == 0 {
            return Err(invalid!("motion frames must be [N>=1, D], got {:?}", frames.shape()));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(invalid!("fps must be positive, got {fps}"));
        }
        if !frames.all_finite() {
            return Err(Error::NonFinite { op: "motion" });
        }
        Ok(Self {
            frames,
            fps,
            category: None,
            text: None,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.frames.row(t)
    }
}

/// Joint hierarchy with rest-pose offsets from each joint to its parent.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSpec {
    pub parent: Vec<usize>,
    pub rest_offset: Vec<[f64; 3]>,
    pub foot_joints: Vec<usize>,
    pub names: Vec<String>,
}

impl SkeletonSpec {
    /// Eight-joint lower-body rig: pelvis, torso, and knee/ankle/toe per leg.
    /// Units are metres with `y` up, `x` forward and `z` to the left.
    pub fn desk() -> Self {
        let joints: [(&str, usize, [f64; 3]); 8] = [
            ("pelvis", 0, [0.0, 0.0, 0.0]),
            ("torso", 0, [0.0, 0.5, 0.0]),
            ("l_knee", 0, [0.0, -0.45, 0.1]),
            ("l_ankle", 2, [0.0, -0.45, 0.0]),
            ("l_toe", 3, [0.12, -0.03, 0.0]),
            ("r_knee", 0, [0.0, -0.45, -0.1]),
            ("r_ankle", 5, [0.0, -0.45, 0.0]),
            ("r_toe", 6, [0.12, -0.03, 0.0]),
        ];
        Self {
            parent: joints.iter().map(|j| j.1).collect(),
            rest_offset: joints.iter().map(|j| j.2).collect(),
            foot_joints: vec![3, 4, 6, 7],
            names: joints.iter().map(|j| String::from(j.0)).collect(),
        }
    }

    pub fn joint_count(&self) -> usize {
        self.parent.len()
    }

    /// Checks the tree structure and returns, for every joint, the chain of
    /// joints from itself up to (and including) the root.
    pub fn chains(&self) -> Result<Vec<Vec<usize>>> {
        let j = self.joint_count();
        if j == 0 {
            return Err(Error::Empty("skeleton"));
        }
        if self.rest_offset.len() != j {
            return Err(invalid!("skeleton has {j} parents but {} offsets", self.rest_offset.len()));
        }
        if self.parent[0] != 0 {
            return Err(invalid!("joint 0 must be the root"));
        }
        if let Some(&f) = self.foot_joints.iter().find(|&&f| f >= j) {
            return Err(Error::IndexOutOfRange { index: f, len: j });
        }
        let mut chains = Vec::with_capacity(j);
        for start in 0..j {
            let mut chain = vec![start];
            let mut cur = start;
            while cur != 0 {
                let p = self.parent[cur];
                if p >= j {
                    return Err(Error::IndexOutOfRange { index: p, len: j });
                }
                if p == cur || chain.len() > j {
                    return Err(invalid!("skeleton parent links contain a cycle at joint {start}"));
                }
                chain.push(p);
                cur = p;
            }
            chains.push(chain);
        }
        Ok(chains)
    }

    /// `[J, J]` matrix with `A[j][k] = 1` when `k` lies on the chain of `j`.
    pub fn chain_matrix(&self) -> Result<Tensor> {
        let j = self.joint_count();
        let mut a = vec![0.0; j * j];
        for (row, chain) in self.chains()?.iter().enumerate() {
            for &k in chain {
                a[row * j + k] = 1.0;
            }
        }
        Tensor::new(&[j, j], a)
    }

    /// Rest pose joint positions relative to the root.
    pub fn rest_positions(&self) -> Result<Vec<[f64; 3]>> {
        Ok(self
            .chains()?
            .iter()
            .map(|chain| {
                let mut p = [0.0; 3];
                for &k in chain {
                    for c in 0..3 {
                        p[c] += self.rest_offset[k][c];
                    }
                }
                p
            })
            .collect())
    }
}

/// Column ranges of the per-frame feature vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureLayout {
    pub yaw_rate: Range<usize>,
    pub planar_velocity: Range<usize>,
    pub height: Range<usize>,
    pub local_positions: Range<usize>,
    pub joint_velocities: Range<usize>,
    pub contacts: Range<usize>,
}

impl FeatureLayout {
    pub fn new(joints: usize, feet: usize) -> Self {
        let lp = 4..4 + 3 * joints;
        let jv = lp.end..lp.end + 3 * joints;
        let ct = jv.end..jv.end + feet;
        Self {
            yaw_rate: 0..1,
            planar_velocity: 1..3,
            height: 3..4,
            local_positions: lp,
            joint_velocities: jv,
            contacts: ct,
        }
    }

    pub fn for_skeleton(skeleton: &SkeletonSpec) -> Self {
        Self::new(skeleton.joint_count(), skeleton.foot_joints.len())
    }

    pub fn ranges(&self) -> [Range<usize>; 6] {
        [
            self.yaw_rate.clone(),
            self.planar_velocity.clone(),
            self.height.clone(),
            self.local_positions.clone(),
            self.joint_velocities.clone(),
            self.contacts.clone(),
        ]
    }

    pub fn dim(&self) -> usize {
        self.ranges().iter().map(|r| r.end).max().unwrap_or(0)
    }

    pub fn joints(&self) -> usize {
        self.local_positions.len() / 3
    }

    /// Checks that the ranges are disjoint and tile `0..dim` with no gaps.
    pub fn validate(&self, dim: usize) -> Result<()> {
        let mut covered = vec![0u8; dim];
        for r in self.ranges() {
            if r.end > dim {
                return Err(invalid!("layout range {r:?} exceeds dimension {dim}"));
            }
            for c in r {
                covered[c] += 1;
            }
        }
        if let Some(c) = covered.iter().position(|&n| n != 1) {
            return Err(invalid!("layout column {c} covered {} times", covered[c]));
        }
        if self.local_positions.len() % 3 != 0 || self.local_positions.len() != self.joint_velocities.len() {
            return Err(invalid!("joint feature blocks must be 3J wide"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Per-column mean and (population) standard deviation over all frames.
    pub fn compute(split: &[MotionSequence]) -> Result<Self> {
        let first = split.first().ok_or(Error::Empty("normalization split"))?;
        let d = first.dim();
        let mut sum = vec![0.0; d];
        let mut count = 0usize;
        for s in split {
            if s.dim() != d {
                return Err(Error::ShapeMismatch {
                    op: "norm_stats",
                    lhs: vec![d],
                    rhs: vec![s.dim()],
                });
            }
            for row in s.frames.rows() {
                for (a, v) in sum.iter_mut().zip(row) {
                    *a += v;
                }
            }
            count += s.len();
        }
        let mean: Vec<f64> = sum.iter().map(|v| v / count as f64).collect();
        let mut var = vec![0.0; d];
        for s in split {
            for row in s.frames.rows() {
                for ((a, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *a += (v - m) * (v - m);
                }
            }
        }
        let std = var
            .iter()
            .map(|v| libm::sqrt(v / count as f64).max(STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, frames: &Tensor) -> Result<()> {
        if frames.last_dim() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "normalize",
                lhs: frames.shape().to_vec(),
                rhs: vec![self.dim()],
            });
        }
        Ok(())
    }

    /// Normalizes any tensor whose last axis is `D`.
    pub fn normalize_tensor(&self, frames: &Tensor) -> Result<Tensor> {
        self.check(frames)?;
        let d = self.dim();
        let data = frames
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % d]) / self.std[i % d])
            .collect();
        Tensor::new(frames.shape(), data)
    }

    pub fn denormalize_tensor(&self, frames: &Tensor) -> Result<Tensor> {
        self.check(frames)?;
        let d = self.dim();
        let data = frames
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.std[i % d] + self.mean[i % d])
            .collect();
        Tensor::new(frames.shape(), data)
    }

    pub fn normalize(&self, seq: &MotionSequence) -> Result<MotionSequence> {
        Ok(MotionSequence {
            frames: self.normalize_tensor(&seq.frames)?,
            ..seq.clone()
        })
    }

    pub fn denormalize(&self, seq: &MotionSequence) -> Result<MotionSequence> {
        Ok(MotionSequence {
            frames: self.denormalize_tensor(&seq.frames)?,
            ..seq.clone()
        })
    }
}

/// Rotates a facing-frame vector about `+y` by `yaw`.
pub fn rotate_y(v: [f64; 3], yaw: f64) -> [f64; 3] {
    let (s, c) = (libm::sin(yaw), libm::cos(yaw));
    [c * v[0] + s * v[2], v[1], -s * v[0] + c * v[2]]
}

/// World root state per frame: `(yaw, [x, height, z])`.
///
/// Yaw and planar position at frame `t` integrate rates of frames `0..t`;
/// the planar velocity of frame `t` is expressed in the facing frame at `t`.
pub fn root_trajectory(frames: &Tensor, layout: &FeatureLayout, fps: f64) -> Vec<(f64, [f64; 3])> {
    let mut yaw = 0.0;
    let (mut x, mut z) = (0.0, 0.0);
    let mut out = Vec::with_capacity(frames.shape()[0]);
    for row in frames.rows() {
        let h = row[layout.height.start];
        out.push((yaw, [x, h, z]));
        let v = [row[layout.planar_velocity.start], 0.0, row[layout.planar_velocity.start + 1]];
        let w = rotate_y(v, yaw);
        x += w[0] / fps;
        z += w[2] / fps;
        yaw += row[layout.yaw_rate.start] / fps;
    }
    out
}

/// World joint positions `[N, J, 3]`.
pub fn fk_positions(seq: &MotionSequence, skeleton: &SkeletonSpec, layout: &FeatureLayout) -> Result<Tensor> {
    fk_frames(&seq.frames, seq.fps, skeleton, layout)
}

pub fn fk_frames(frames: &Tensor, fps: f64, skeleton: &SkeletonSpec, layout: &FeatureLayout) -> Result<Tensor> {
    let chains = skeleton.chains()?;
    let j = skeleton.joint_count();
    layout.validate(frames.last_dim())?;
    if layout.joints() != j {
        return Err(invalid!("layout has {} joints, skeleton {j}", layout.joints()));
    }
    let n = frames.shape()[0];
    let root = root_trajectory(frames, layout, fps);
    let mut out = Vec::with_capacity(n * j * 3);
    for (row, (yaw, rp)) in frames.rows().zip(root) {
        let local = &row[layout.local_positions.clone()];
        for chain in &chains {
            let mut c = [0.0; 3];
            for &k in chain {
                for a in 0..3 {
                    c[a] += skeleton.rest_offset[k][a] + local[3 * k + a];
                }
            }
            let w = rotate_y(c, yaw);
            out.extend_from_slice(&[rp[0] + w[0], rp[1] + w[1], rp[2] + w[2]]);
        }
    }
    Tensor::new(&[n, j, 3], out)
}

/// Per-frame displacement `p_t - p_{t-1}` of `[N, J, 3]` positions; frame 0
/// reuses frame 1's value (zero for single-frame input).
pub fn frame_velocities(positions: &Tensor) -> Tensor {
    let n = positions.shape()[0];
    let stride = positions.numel() / n.max(1);
    let p = positions.data();
    let mut out = vec![0.0; positions.numel()];
    for t in 1..n {
        for k in 0..stride {
            out[t * stride + k] = p[t * stride + k] - p[(t - 1) * stride + k];
        }
    }
    if n > 1 {
        let (head, tail) = out.split_at_mut(stride);
        head.copy_from_slice(&tail[..stride]);
    }
    Tensor::new(positions.shape(), out).expect("same shape")
}

/// Contact on/off transitions `(frame, foot slot, now_in_contact)` in time
/// order, from the thresholded contact columns.
pub fn contact_events(seq: &MotionSequence, layout: &FeatureLayout) -> Vec<(usize, usize, bool)> {
    let mut events = Vec::new();
    let mut prev: Option<Vec<bool>> = None;
    for (t, row) in seq.frames.rows().enumerate() {
        let cur: Vec<bool> = row[layout.contacts.clone()].iter().map(|&c| c > 0.5).collect();
        if let Some(p) = &prev {
            for (f, (&a, &b)) in p.iter().zip(&cur).enumerate() {
                if a != b {
                    events.push((t, f, b));
                }
            }
        }
        prev = Some(cur);
    }
    events
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_layout_is_consistent() {
        let sk = SkeletonSpec::desk();
        let layout = FeatureLayout::for_skeleton(&sk);
        assert_eq!(layout.dim(), 56);
        layout.validate(56).unwrap();
        assert!(layout.validate(57).is_err());
    }

    #[test]
    fn cycle_is_rejected() {
        let mut sk = SkeletonSpec::desk();
        sk.parent[2] = 3;
        assert!(sk.chains().is_err());
    }
}
