//! Procedural labelled motion generator.
//!
//! Every class is a fixed sequence of action segments whose timing, speed and
//! amplitudes are jittered per seed, so sequences of one class share their
//! temporal structure (in particular the order of foot-contact events).

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{invalid, Error, Result};
use crate::motion::{rotate_y, FeatureLayout, MotionSequence, SkeletonSpec};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MIN_LENGTH: usize = 16;

const ANKLE_HEIGHT: f64 = 0.03;
const HIP_WIDTH: f64 = 0.1;
const BONE: f64 = 0.45;
const STANCE: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionKind {
    Walk,
    WalkSit,
    SitStand,
    Jump,
}

impl ActionKind {
    pub const ALL: [ActionKind; 4] = [Self::Walk, Self::WalkSit, Self::SitStand, Self::Jump];

    pub fn name(self) -> &'static str {
        match self {
            Self::Walk => "walk",
            Self::WalkSit => "walk-sit",
            Self::SitStand => "sit-stand",
            Self::Jump => "jump",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::UnknownCategory(name.to_string()))
    }

    pub fn templates(self) -> &'static [&'static str] {
        match self {
            Self::Walk => &[
                "a person walks forward",
                "someone walks ahead picking up speed",
                "a man strolls forward and speeds up",
                "the person is walking straight ahead",
            ],
            Self::WalkSit => &[
                "a person walks forward and sits down",
                "someone walks a few steps then sits on a chair",
                "a man strolls ahead and takes a seat",
                "the person walks over and sits",
            ],
            Self::SitStand => &[
                "a person stands up from a chair and walks",
                "someone seated gets up and steps forward",
                "a man rises from the seat and starts walking",
                "the person gets up from sitting",
            ],
            Self::Jump => &[
                "a person jumps forward twice",
                "someone hops forward two times",
                "a man leaps ahead then jumps again",
                "the person does two forward jumps",
            ],
        }
    }
}

/// Generator over an ordered set of classes; a class label is the index into
/// that set.
#[derive(Debug, Clone)]
pub struct SynthGenerator {
    pub skeleton: SkeletonSpec,
    pub layout: FeatureLayout,
    pub fps: f64,
    pub classes: Vec<ActionKind>,
}

impl Default for SynthGenerator {
    fn default() -> Self {
        let skeleton = SkeletonSpec::desk();
        let layout = FeatureLayout::for_skeleton(&skeleton);
        Self {
            skeleton,
            layout,
            fps: 20.0,
            classes: ActionKind::ALL.to_vec(),
        }
    }
}

impl SynthGenerator {
    pub fn with_classes(names: &[&str]) -> Result<Self> {
        let classes = names.iter().map(|n| ActionKind::parse(n)).collect::<Result<Vec<_>>>()?;
        if classes.is_empty() {
            return Err(Error::Empty("class list"));
        }
        Ok(Self {
            classes,
            ..Self::default()
        })
    }

    pub fn class_id(&self, name: &str) -> Result<u32> {
        self.classes
            .iter()
            .position(|k| k.name() == name)
            .map(|i| i as u32)
            .ok_or_else(|| Error::UnknownCategory(name.to_string()))
    }

    pub fn class_name(&self, id: u32) -> Result<&'static str> {
        self.classes
            .get(id as usize)
            .map(|k| k.name())
            .ok_or_else(|| Error::UnknownCategory(alloc::format!("#{id}")))
    }

    pub fn generate_named(&self, name: &str, length: usize, rng: &mut Rng) -> Result<MotionSequence> {
        self.generate(self.class_id(name)?, length, rng)
    }

    pub fn generate(&self, class: u32, length: usize, rng: &mut Rng) -> Result<MotionSequence> {
        let kind = *self
            .classes
            .get(class as usize)
            .ok_or_else(|| Error::UnknownCategory(alloc::format!("#{class}")))?;
        if length < MIN_LENGTH {
            return Err(invalid!("sequence length {length} below minimum {MIN_LENGTH}"));
        }
        let style = Style::sample(rng);
        let track = match kind {
            ActionKind::Walk => walk(length, self.fps, &style, rng),
            ActionKind::WalkSit => walk_sit(length, self.fps, &style, rng),
            ActionKind::SitStand => sit_stand(length, self.fps, &style, rng),
            ActionKind::Jump => jump(length, self.fps, &style, rng),
        };
        let frames = features(&track, &self.skeleton, &self.layout, self.fps, &style)?;
        let templates = kind.templates();
        let text = templates[rng.below(templates.len())];
        let mut seq = MotionSequence::new(frames, self.fps)?;
        seq.category = Some(class);
        seq.text = Some(String::from(text));
        Ok(seq)
    }
}

/// Per-seed nuisance parameters shared by every class.
struct Style {
    height: f64,
    lean: f64,
    width: f64,
    lift: f64,
}

impl Style {
    fn sample(rng: &mut Rng) -> Self {
        Self {
            height: rng.uniform_in(-0.03, 0.03),
            lean: rng.uniform_in(-0.04, 0.08),
            width: rng.uniform_in(-0.02, 0.02),
            lift: rng.uniform_in(0.06, 0.12),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Foot {
    ankle: [f64; 3],
    yaw: f64,
    contact: bool,
}

#[derive(Debug, Clone, Copy)]
struct Pose {
    pelvis: [f64; 3],
    yaw: f64,
    /// Torso offset from the pelvis in the facing frame.
    torso: [f64; 3],
    feet: [Foot; 2],
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

fn lerp(a: f64, b: f64, s: f64) -> f64 {
    a + (b - a) * s
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// Walking parameterized by gait phase: one unit of phase is one stride of
/// each foot. The left foot touches down at integer phase, the right foot
/// half a cycle later; each foot is planted for the first `STANCE` of its
/// cycle.
struct Gait {
    origin: [f64; 2],
    yaw0: f64,
    /// Heading change per cycle.
    turn: f64,
    /// Stride length as a function of phase: `stride0 + stride_gain * phase`.
    stride0: f64,
    stride_gain: f64,
    width: f64,
    lift: f64,
}

impl Gait {
    fn yaw(&self, phase: f64) -> f64 {
        self.yaw0 + self.turn * phase
    }

    /// Pelvis planar position, integrated numerically along the phase.
    fn pelvis_xz(&self, phase: f64) -> [f64; 2] {
        let steps = ((phase.abs() * 64.0) as usize).max(1);
        let h = phase / steps as f64;
        let (mut x, mut z) = (self.origin[0], self.origin[1]);
        for k in 0..steps {
            let p = (k as f64 + 0.5) * h;
            let s = self.stride0 + self.stride_gain * p;
            let y = self.yaw(p);
            x += s * libm::cos(y) * h;
            z -= s * libm::sin(y) * h;
        }
        [x, z]
    }

    fn plant(&self, side: usize, cycle: f64) -> ([f64; 3], f64) {
        let offset = if side == 0 { 0.0 } else { 0.5 };
        let mid = cycle - offset + STANCE / 2.0;
        let p = self.pelvis_xz(mid);
        let yaw = self.yaw(mid);
        let lateral = if side == 0 { HIP_WIDTH + self.width } else { -HIP_WIDTH - self.width };
        let o = rotate_y([0.0, 0.0, lateral], yaw);
        ([p[0] + o[0], ANKLE_HEIGHT, p[1] + o[2]], yaw)
    }

    fn foot(&self, side: usize, phase: f64) -> Foot {
        let q = phase + if side == 0 { 0.0 } else { 0.5 };
        let k = libm::floor(q);
        let frac = q - k;
        let (a, ya) = self.plant(side, k);
        if frac < STANCE {
            return Foot {
                ankle: a,
                yaw: ya,
                contact: true,
            };
        }
        let (b, yb) = self.plant(side, k + 1.0);
        let s = (frac - STANCE) / (1.0 - STANCE);
        let e = smoothstep(s);
        Foot {
            ankle: [
                lerp(a[0], b[0], e),
                ANKLE_HEIGHT + self.lift * libm::sin(PI * s),
                lerp(a[2], b[2], e),
            ],
            yaw: lerp(ya, yb, e),
            contact: false,
        }
    }

    fn pose(&self, phase: f64, height: f64, bob: f64, lean: f64) -> Pose {
        let p = self.pelvis_xz(phase);
        let y = height + bob * libm::cos(4.0 * PI * (phase - 0.3));
        Pose {
            pelvis: [p[0], y, p[1]],
            yaw: self.yaw(phase),
            torso: [lean, 0.5, 0.015 * libm::sin(2.0 * PI * phase)],
            feet: [self.foot(0, phase), self.foot(1, phase)],
        }
    }
}

/// Integrates a per-frame cadence (cycles per second) into gait phase.
fn integrate_phase(start: f64, cadence: &[f64], fps: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(cadence.len());
    let mut phase = start;
    for &c in cadence {
        out.push(phase);
        phase += c / fps;
    }
    out
}

fn walk(n: usize, fps: f64, style: &Style, rng: &mut Rng) -> Vec<Pose> {
    let duration = n as f64 / fps;
    let f0 = rng.uniform_in(0.65, 0.8);
    let gait = Gait {
        origin: [0.0, 0.0],
        yaw0: 0.0,
        turn: rng.uniform_in(-0.25, 0.25),
        stride0: rng.uniform_in(0.6, 0.75),
        stride_gain: rng.uniform_in(0.12, 0.2),
        width: style.width,
        lift: style.lift,
    };
    let cadence: Vec<f64> = (0..n)
        .map(|t| f0 * (0.8 + 0.45 * t as f64 / fps / duration))
        .collect();
    let phases = integrate_phase(0.0, &cadence, fps);
    let bob = rng.uniform_in(0.01, 0.02);
    phases
        .iter()
        .enumerate()
        .map(|(t, &ph)| {
            let progress = t as f64 / n as f64;
            gait.pose(ph, 0.86 + style.height, bob, style.lean + 0.12 * progress)
        })
        .collect()
}

/// Cadence that holds `f0` and then eases to zero so that the phase lands
/// exactly on `target` at `stop` seconds.
fn stopping_cadence(n: usize, fps: f64, start: f64, stop: f64, f0: f64) -> (Vec<f64>, f64) {
    let ease = 0.6;
    let shape: Vec<f64> = (0..n)
        .map(|t| {
            let time = t as f64 / fps;
            if time >= stop {
                0.0
            } else {
                ((stop - time) / ease).min(1.0)
            }
        })
        .collect();
    let area: f64 = shape.iter().sum::<f64>() / fps;
    // Both feet planted at the end: left at 0.55 of its cycle, right at 0.05.
    let cycles = libm::round(start + f0 * area - 0.55).max(libm::ceil(start - 0.55) + 1.0);
    let target = cycles + 0.55;
    let scale = (target - start) / area.max(1e-9);
    (shape.iter().map(|s| s * scale).collect(), target)
}

fn walk_sit(n: usize, fps: f64, style: &Style, rng: &mut Rng) -> Vec<Pose> {
    let duration = n as f64 / fps;
    let stop = duration * rng.uniform_in(0.42, 0.5);
    let f0 = rng.uniform_in(0.75, 0.95);
    let gait = Gait {
        origin: [0.0, 0.0],
        yaw0: 0.0,
        turn: rng.uniform_in(-0.2, 0.2),
        stride0: rng.uniform_in(0.6, 0.8),
        stride_gain: 0.0,
        width: style.width,
        lift: style.lift,
    };
    let (cadence, end_phase) = stopping_cadence(n, fps, 0.0, stop, f0);
    let phases = integrate_phase(0.0, &cadence, fps);
    let bob = rng.uniform_in(0.01, 0.02);
    let stand = 0.86 + style.height;
    let sit_start = stop + rng.uniform_in(0.1, 0.3);
    let sit_len = rng.uniform_in(0.9, 1.3);
    let seat = 0.5 + rng.uniform_in(-0.03, 0.03);
    let back = rng.uniform_in(0.15, 0.22);
    let end = gait.pose(end_phase, stand, 0.0, style.lean);
    phases
        .iter()
        .enumerate()
        .map(|(t, &ph)| {
            let time = t as f64 / fps;
            if time < stop {
                let ease = ((stop - time) / 0.6).min(1.0);
                return gait.pose(ph, stand, bob * ease, style.lean + 0.05 * ease);
            }
            let s = (time - sit_start) / sit_len;
            let e = smoothstep(s);
            let mut pose = end;
            let b = rotate_y([-back * e, 0.0, 0.0], pose.yaw);
            pose.pelvis = [pose.pelvis[0] + b[0], lerp(stand, seat, e), pose.pelvis[2] + b[2]];
            let settle = (time - sit_start - sit_len).max(0.0);
            let lean = style.lean + 0.3 * libm::sin(PI * s.clamp(0.0, 1.0)) - 0.03 * settle;
            pose.torso = [lean, 0.5, 0.0];
            pose
        })
        .collect()
}

fn sit_stand(n: usize, fps: f64, style: &Style, rng: &mut Rng) -> Vec<Pose> {
    let duration = n as f64 / fps;
    let rise = duration * rng.uniform_in(0.18, 0.26);
    let rise_len = rng.uniform_in(0.9, 1.2);
    let go = rise + rise_len + rng.uniform_in(0.15, 0.3);
    let f0 = rng.uniform_in(0.75, 0.95);
    let gait = Gait {
        origin: [0.0, 0.0],
        yaw0: 0.0,
        turn: rng.uniform_in(-0.2, 0.2),
        stride0: rng.uniform_in(0.6, 0.8),
        stride_gain: 0.0,
        width: style.width,
        lift: style.lift,
    };
    let start_phase = -0.45;
    let cadence: Vec<f64> = (0..n)
        .map(|t| {
            let time = t as f64 / fps;
            f0 * ((time - go) / 0.6).clamp(0.0, 1.0)
        })
        .collect();
    let phases = integrate_phase(start_phase, &cadence, fps);
    let bob = rng.uniform_in(0.01, 0.02);
    let stand = 0.86 + style.height;
    let seat = 0.5 + rng.uniform_in(-0.03, 0.03);
    let back = rng.uniform_in(0.15, 0.22);
    let standing = gait.pose(start_phase, stand, 0.0, style.lean);
    phases
        .iter()
        .enumerate()
        .map(|(t, &ph)| {
            let time = t as f64 / fps;
            if time >= go {
                let ease = ((time - go) / 0.6).min(1.0);
                return gait.pose(ph, stand, bob * ease, style.lean + 0.05 * ease);
            }
            let s = (time - rise) / rise_len;
            let e = 1.0 - smoothstep(s);
            let mut pose = standing;
            let b = rotate_y([-back * e, 0.0, 0.0], pose.yaw);
            pose.pelvis = [pose.pelvis[0] + b[0], lerp(stand, seat, e), pose.pelvis[2] + b[2]];
            let lean = style.lean + 0.35 * libm::sin(PI * s.clamp(0.0, 1.0)) + 0.04 * (1.0 - time / rise).max(0.0);
            pose.torso = [lean, 0.5, 0.0];
            pose
        })
        .collect()
}

struct JumpPlan {
    start: f64,
    distance: f64,
    flight: f64,
}

fn jump(n: usize, fps: f64, style: &Style, rng: &mut Rng) -> Vec<Pose> {
    const CROUCH: f64 = 0.3;
    const PUSH: f64 = 0.12;
    const ABSORB: f64 = 0.2;
    const RECOVER: f64 = 0.45;
    let duration = n as f64 / fps;
    let plans = [
        JumpPlan {
            start: duration * rng.uniform_in(0.1, 0.16),
            distance: rng.uniform_in(0.2, 0.3),
            flight: rng.uniform_in(0.25, 0.3),
        },
        JumpPlan {
            start: duration * rng.uniform_in(0.52, 0.58),
            distance: rng.uniform_in(0.45, 0.6),
            flight: rng.uniform_in(0.38, 0.45),
        },
    ];
    let stand = 0.9 + style.height;
    let low = 0.72 + style.height;
    let air = 0.87 + style.height;
    let width = HIP_WIDTH + style.width;
    let lean0 = style.lean;
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let time = t as f64 / fps;
        // Position of the feet after all completed jumps.
        let mut base = 0.0;
        let mut pose = None;
        for plan in &plans {
            let tk = time - plan.start;
            if tk < 0.0 {
                break;
            }
            let takeoff = CROUCH + PUSH;
            let land = takeoff + plan.flight;
            let done = land + ABSORB + RECOVER;
            let (dx, y, feet_dx, feet_y, contact, lean) = if tk < CROUCH {
                let e = smoothstep(tk / CROUCH);
                (0.0, lerp(stand, low, e), 0.0, 0.0, true, 0.25 * e)
            } else if tk < takeoff {
                let e = smoothstep((tk - CROUCH) / PUSH);
                (0.06 * e, lerp(low, air, e), 0.0, 0.0, true, 0.25 - 0.1 * e)
            } else if tk < land {
                let s = (tk - takeoff) / plan.flight;
                let y = air + 0.5 * 9.81 * plan.flight * plan.flight * s * (1.0 - s);
                let tuck = 0.15 * libm::sin(PI * s);
                let fx = plan.distance * smoothstep(s);
                (0.06 + plan.distance * s, y, fx, tuck, false, 0.15)
            } else if tk < land + ABSORB {
                let e = smoothstep((tk - land) / ABSORB);
                (0.06 + plan.distance - 0.06 * e, lerp(air, low + 0.03, e), plan.distance, 0.0, true, 0.15 + 0.1 * e)
            } else if tk < done {
                let e = smoothstep((tk - land - ABSORB) / RECOVER);
                (plan.distance, lerp(low + 0.03, stand, e), plan.distance, 0.0, true, 0.25 * (1.0 - e))
            } else {
                base += plan.distance;
                continue;
            };
            let pelvis_y = y;
            let feet = [0usize, 1].map(|side| {
                let z = if side == 0 { width } else { -width };
                let fy = if contact { ANKLE_HEIGHT } else { ANKLE_HEIGHT + (pelvis_y - air) + feet_y };
                Foot {
                    ankle: [base + feet_dx, fy, z],
                    yaw: 0.0,
                    contact,
                }
            });
            pose = Some(Pose {
                pelvis: [base + dx, pelvis_y, 0.0],
                yaw: 0.0,
                torso: [lean0 + lean, 0.5, 0.0],
                feet,
            });
            break;
        }
        let pose = pose.unwrap_or_else(|| {
            let sway = 0.01 * libm::sin(2.0 * PI * time / duration);
            Pose {
                pelvis: [base, stand, sway],
                yaw: 0.0,
                torso: [lean0 + 0.03 * time / duration, 0.5, 0.0],
                feet: [0usize, 1].map(|side| Foot {
                    ankle: [base, ANKLE_HEIGHT, if side == 0 { width } else { -width }],
                    yaw: 0.0,
                    contact: true,
                }),
            }
        });
        out.push(pose);
    }
    out
}

/// Two-bone leg solve: places the knee so both segments have length `BONE`
/// (when reachable), bending toward the facing direction.
fn knee(hip: [f64; 3], ankle: [f64; 3], yaw: f64) -> [f64; 3] {
    let d = [ankle[0] - hip[0], ankle[1] - hip[1], ankle[2] - hip[2]];
    let len = libm::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).max(1e-9);
    let u = [d[0] / len, d[1] / len, d[2] / len];
    let reach = len.min(2.0 * BONE - 1e-6);
    let fwd = rotate_y([1.0, 0.0, 0.0], yaw);
    let dot = fwd[0] * u[0] + fwd[1] * u[1] + fwd[2] * u[2];
    let mut b = [fwd[0] - dot * u[0], fwd[1] - dot * u[1], fwd[2] - dot * u[2]];
    let bl = libm::sqrt(b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).max(1e-9);
    b = [b[0] / bl, b[1] / bl, b[2] / bl];
    let h = libm::sqrt((BONE * BONE - reach * reach / 4.0).max(0.0));
    let m = reach / 2.0;
    [
        hip[0] + u[0] * m + b[0] * h,
        hip[1] + u[1] * m + b[1] * h,
        hip[2] + u[2] * m + b[2] * h,
    ]
}

fn world_joints(pose: &Pose, style: &Style) -> [[f64; 3]; 8] {
    let w = HIP_WIDTH + style.width;
    let hip_l = add(pose.pelvis, rotate_y([0.0, 0.0, w], pose.yaw));
    let hip_r = add(pose.pelvis, rotate_y([0.0, 0.0, -w], pose.yaw));
    let [fl, fr] = pose.feet;
    let toe = |f: &Foot| add(f.ankle, rotate_y([0.12, -ANKLE_HEIGHT, 0.0], f.yaw));
    [
        pose.pelvis,
        add(pose.pelvis, rotate_y(pose.torso, pose.yaw)),
        knee(hip_l, fl.ankle, pose.yaw),
        fl.ankle,
        toe(&fl),
        knee(hip_r, fr.ankle, pose.yaw),
        fr.ankle,
        toe(&fr),
    ]
}

fn features(
    track: &[Pose],
    skeleton: &SkeletonSpec,
    layout: &FeatureLayout,
    fps: f64,
    style: &Style,
) -> Result<Tensor> {
    let j = skeleton.joint_count();
    if j != 8 || skeleton.foot_joints.len() != 4 {
        return Err(invalid!("the generator drives the eight-joint desk skeleton only"));
    }
    let d = layout.dim();
    let n = track.len();
    // Canonicalize: start at the origin facing +x.
    let p0 = track[0].pelvis;
    let y0 = track[0].yaw;
    let canon = |p: [f64; 3]| {
        let r = rotate_y([p[0] - p0[0], p[1], p[2] - p0[2]], -y0);
        [r[0], p[1], r[2]]
    };
    let world: Vec<[[f64; 3]; 8]> = track.iter().map(|p| world_joints(p, style).map(canon)).collect();
    let yaw: Vec<f64> = track.iter().map(|p| p.yaw - y0).collect();
    let mut frames = vec![0.0; n * d];
    for t in 0..n {
        let row = &mut frames[t * d..(t + 1) * d];
        let (a, b) = if t + 1 < n { (t + 1, t) } else { (t, t - 1) };
        row[layout.yaw_rate.start] = (yaw[a] - yaw[b]) * fps;
        let step = [world[a][0][0] - world[b][0][0], 0.0, world[a][0][2] - world[b][0][2]];
        let v = rotate_y(step, -yaw[b]);
        row[layout.planar_velocity.start] = v[0] * fps;
        row[layout.planar_velocity.start + 1] = v[2] * fps;
        row[layout.height.start] = world[t][0][1];
        for k in 0..j {
            let parent = skeleton.parent[k];
            let rel = if k == 0 {
                [0.0; 3]
            } else {
                let w = world[t][k];
                let p = world[t][parent];
                rotate_y([w[0] - p[0], w[1] - p[1], w[2] - p[2]], -yaw[t])
            };
            for c in 0..3 {
                row[layout.local_positions.start + 3 * k + c] = rel[c] - skeleton.rest_offset[k][c];
            }
            let (a, b) = if t == 0 { (1.min(n - 1), 0) } else { (t, t - 1) };
            let dv = [
                world[a][k][0] - world[b][k][0],
                world[a][k][1] - world[b][k][1],
                world[a][k][2] - world[b][k][2],
            ];
            let dv = rotate_y(dv, -yaw[a]);
            for c in 0..3 {
                row[layout.joint_velocities.start + 3 * k + c] = dv[c];
            }
        }
        for (slot, &fj) in skeleton.foot_joints.iter().enumerate() {
            let side = usize::from(fj >= 5);
            row[layout.contacts.start + slot] = if track[t].feet[side].contact { 1.0 } else { 0.0 };
        }
    }
    Tensor::new(&[n, d], frames)
}
