//! Convolutional motion autoencoder with residual quantization, the combined
//! training objective and the stage-1 trainer.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::kcb::{Kcb, KcbConfig};
use crate::motion::{FeatureLayout, MotionSequence, NormStats, SkeletonSpec};
use crate::nn::{Bound, Conv1d, ConvTranspose1d, Optimizer, OptimizerKind, ParamStore};
use crate::rng::Rng;
use crate::rvq::{codebook_loss, commitment_loss, commitment_loss_rq, init_from_data, row_sq_dist, CodeUsage, Mode, RvqForward, RvqStack, TokenGrid};
use crate::tape::{Tape, Var};
use crate::tcc::{tcc_loss, TccConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
}

impl Activation {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "relu" => Ok(Self::Relu),
            other => Err(invalid!("unknown activation `{other}`")),
        }
    }

    pub fn name(self) -> &'static str {
        "relu"
    }

    fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Self::Relu => tape.relu(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub width: usize,
    pub downsample_ratio: usize,
    pub res_blocks: usize,
    pub activation: Activation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            width: 32,
            downsample_ratio: 4,
            res_blocks: 2,
            activation: Activation::Relu,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.downsample_ratio == 0 || !self.downsample_ratio.is_power_of_two() {
            return Err(invalid!("downsample ratio {} is not a power of two", self.downsample_ratio));
        }
        if self.width == 0 {
            return Err(invalid!("encoder width must be positive"));
        }
        Ok(())
    }

    fn stages(&self) -> usize {
        self.downsample_ratio.trailing_zeros() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub feature_dim: usize,
    pub code_dim: usize,
    pub codebook_size: usize,
    pub quant_layers: usize,
    pub dropout_p: f64,
    pub kcb: KcbConfig,
    pub kcb_enabled: bool,
    pub fps: f64,
}

impl ModelConfig {
    pub fn desk(skeleton: &SkeletonSpec) -> Result<Self> {
        Ok(Self {
            encoder: EncoderConfig::default(),
            feature_dim: FeatureLayout::for_skeleton(skeleton).dim(),
            code_dim: 32,
            codebook_size: 64,
            quant_layers: 6,
            dropout_p: 0.2,
            kcb: KcbConfig::for_skeleton(skeleton)?,
            kcb_enabled: true,
            fps: 20.0,
        })
    }
}

const BRANCH_INIT_SCALE: f64 = 0.1;
const TRUNK_GAIN: f64 = core::f64::consts::FRAC_1_SQRT_2;

#[derive(Debug, Clone, Copy)]
struct ResBlock {
    a: Conv1d,
    b: Conv1d,
}

impl ResBlock {
    /// The branch output starts scaled down so stacked blocks begin close to
    /// identity instead of compounding variance.
    fn new(store: &mut ParamStore, name: &str, width: usize, dilation: usize, rng: &mut Rng) -> Self {
        let a = Conv1d::new(store, &alloc::format!("{name}.a"), width, width, 3, 1, dilation, dilation, rng);
        let b = Conv1d::new(store, &alloc::format!("{name}.b"), width, width, 1, 1, 0, 1, rng);
        for id in [b.w, b.b] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= BRANCH_INIT_SCALE);
        }
        Self { a, b }
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, act: Activation, x: Var) -> Result<Var> {
        let h = act.apply(tape, x)?;
        let h = self.a.forward(tape, p, h)?;
        let h = act.apply(tape, h)?;
        let h = self.b.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

fn res_stack(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, rng: &mut Rng) -> Vec<ResBlock> {
    (0..cfg.res_blocks)
        .map(|r| ResBlock::new(store, &alloc::format!("{name}.res{r}"), cfg.width, 3usize.pow(r as u32), rng))
        .collect()
}

/// Strided convolutions on a linear trunk; nonlinearity lives only in the
/// residual branches, so no unit on the trunk can die.
#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    conv_in: Conv1d,
    stages: Vec<(Conv1d, Vec<ResBlock>)>,
    conv_out: Conv1d,
}

impl Encoder {
    fn new(store: &mut ParamStore, cfg: EncoderConfig, input: usize, output: usize, rng: &mut Rng) -> Self {
        let w = cfg.width;
        let conv_in = Conv1d::new(store, "enc.in", input, w, 3, 1, 1, 1, rng).with_gain(store, TRUNK_GAIN);
        let stages = (0..cfg.stages())
            .map(|s| {
                let down = Conv1d::new(store, &alloc::format!("enc.s{s}.down"), w, w, 4, 2, 1, 1, rng).with_gain(store, TRUNK_GAIN);
                (down, res_stack(store, &alloc::format!("enc.s{s}"), &cfg, rng))
            })
            .collect();
        let conv_out = Conv1d::new(store, "enc.out", w, output, 3, 1, 1, 1, rng).with_gain(store, TRUNK_GAIN);
        Self {
            cfg,
            conv_in,
            stages,
            conv_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let act = self.cfg.activation;
        let mut h = self.conv_in.forward(tape, p, x)?;
        for (down, blocks) in &self.stages {
            h = down.forward(tape, p, h)?;
            for b in blocks {
                h = b.forward(tape, p, act, h)?;
            }
        }
        self.conv_out.forward(tape, p, h)
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    cfg: EncoderConfig,
    conv_in: Conv1d,
    stages: Vec<(Vec<ResBlock>, ConvTranspose1d)>,
    conv_out: Conv1d,
}

impl Decoder {
    fn new(store: &mut ParamStore, cfg: EncoderConfig, input: usize, output: usize, rng: &mut Rng) -> Self {
        let w = cfg.width;
        let conv_in = Conv1d::new(store, "dec.in", input, w, 3, 1, 1, 1, rng).with_gain(store, TRUNK_GAIN);
        let stages = (0..cfg.stages())
            .map(|s| {
                let blocks = res_stack(store, &alloc::format!("dec.s{s}"), &cfg, rng);
                let up = ConvTranspose1d::new(store, &alloc::format!("dec.s{s}.up"), w, w, 4, 2, 1, rng).with_gain(store, TRUNK_GAIN);
                (blocks, up)
            })
            .collect();
        let conv_out = Conv1d::new(store, "dec.out", w, output, 3, 1, 1, 1, rng).with_gain(store, TRUNK_GAIN);
        Self {
            cfg,
            conv_in,
            stages,
            conv_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, z: Var) -> Result<Var> {
        let act = self.cfg.activation;
        let mut h = self.conv_in.forward(tape, p, z)?;
        for (blocks, up) in &self.stages {
            for b in blocks {
                h = b.forward(tape, p, act, h)?;
            }
            h = up.forward(tape, p, h)?;
        }
        self.conv_out.forward(tape, p, h)
    }
}

/// Reflect-pad `[N, D]` frames at the end up to a multiple of `ratio`.
/// Returns the padded frames and the pad length.
pub fn reflect_pad(frames: &Tensor, ratio: usize) -> Result<(Tensor, usize)> {
    let (n, d) = (frames.shape()[0], frames.last_dim());
    if n < ratio {
        return Err(invalid!("sequence of {n} frames is shorter than the downsampling ratio {ratio}"));
    }
    let pad = (ratio - n % ratio) % ratio;
    let mut data = frames.data().to_vec();
    for k in 0..pad {
        let src = n - 2 - k;
        data.extend_from_slice(&frames.data()[src * d..(src + 1) * d]);
    }
    Ok((Tensor::new(&[n + pad, d], data)?, pad))
}

#[derive(Debug, Clone)]
pub struct TcasModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub kcb: Kcb,
    pub rvq: RvqStack,
    pub norm: NormStats,
    pub skeleton: SkeletonSpec,
    pub layout: FeatureLayout,
}

/// Everything one differentiable stage-1 pass produces.
#[derive(Debug, Clone)]
pub struct Stage1Forward {
    pub z_e: Var,
    pub quant: RvqForward,
    pub decoded: Var,
    pub corrected: Var,
}

impl TcasModel {
    pub fn new(config: ModelConfig, norm: NormStats, skeleton: SkeletonSpec, rng: &mut Rng) -> Result<Self> {
        config.encoder.validate()?;
        let layout = FeatureLayout::for_skeleton(&skeleton);
        layout.validate(config.feature_dim)?;
        if norm.dim() != config.feature_dim {
            return Err(invalid!("normalization has {} columns, model {}", norm.dim(), config.feature_dim));
        }
        if config.quant_layers == 0 || config.codebook_size == 0 || config.code_dim == 0 {
            return Err(invalid!("quantizer needs at least one layer, code and dimension"));
        }
        let mut store = ParamStore::new();
        let mut r = rng.split(1);
        let encoder = Encoder::new(&mut store, config.encoder, config.feature_dim, config.code_dim, &mut r);
        let decoder = Decoder::new(&mut store, config.encoder, config.code_dim, config.feature_dim, &mut r);
        let kcb = Kcb::new(&mut store, config.kcb, config.feature_dim, &skeleton, &mut r)?;
        let rvq = RvqStack::random(
            config.quant_layers,
            config.codebook_size,
            config.code_dim,
            config.dropout_p,
            &mut rng.split(2),
        )?;
        Ok(Self {
            config,
            store,
            encoder,
            decoder,
            kcb,
            rvq,
            norm,
            skeleton,
            layout,
        })
    }

    pub fn ratio(&self) -> usize {
        self.config.encoder.downsample_ratio
    }

    /// Normalized `[B, N, D]` frames through encoder, quantizer, decoder and
    /// (when enabled) the KCB. `N` must be a multiple of the ratio.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        books: &[Var],
        m: Var,
        mode: Mode,
        kcb: bool,
        rng: &mut Rng,
    ) -> Result<Stage1Forward> {
        let shape = tape.shape(m).to_vec();
        if shape.len() != 3 || shape[2] != self.config.feature_dim {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: shape,
                rhs: vec![self.config.feature_dim],
            });
        }
        if shape[1] % self.ratio() != 0 || shape[1] < self.ratio() {
            return Err(invalid!("frame count {} not a positive multiple of {}", shape[1], self.ratio()));
        }
        let z_e = self.encoder.forward(tape, p, m)?;
        let quant = self.rvq.forward(tape, books, z_e, mode, rng)?;
        let decoded = self.decoder.forward(tape, p, quant.z_q_st)?;
        let corrected = if kcb {
            self.kcb
                .correct(tape, p, decoded, &self.norm, &self.skeleton, &self.layout, self.config.fps)?
                .corrected
        } else {
            decoded
        };
        Ok(Stage1Forward {
            z_e,
            quant,
            decoded,
            corrected,
        })
    }

    fn padded(&self, frames: &Tensor) -> Result<(Tensor, usize)> {
        if frames.rank() != 2 || frames.last_dim() != self.config.feature_dim {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: frames.shape().to_vec(),
                rhs: vec![self.config.feature_dim],
            });
        }
        reflect_pad(frames, self.ratio())
    }

    /// Continuous latents `[n, d]` of normalized frames, plus the pad length.
    pub fn encode(&self, frames: &Tensor) -> Result<(Tensor, usize)> {
        let (x, pad) = self.padded(frames)?;
        let n = x.shape()[0];
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let m = tape.constant(x.reshape(&[1, n, self.config.feature_dim])?)?;
        let z = self.encoder.forward(&mut tape, &p, m)?;
        let z = tape.value(z).clone();
        let rows = z.shape()[1];
        Ok((z.reshape(&[rows, self.config.code_dim])?, pad))
    }

    pub fn tokenize(&self, frames: &Tensor) -> Result<(TokenGrid, usize)> {
        let (z, pad) = self.encode(frames)?;
        let (grid, _) = self.rvq.encode(&z, Mode::Eval, z.shape()[0], &mut Rng::new(0))?;
        Ok((grid, pad))
    }

    /// Decode `[n, d]` latents; returns raw decoder output and the KCB
    /// corrected output (identical when the KCB is disabled), `[n·ratio, D]`.
    pub fn decode_latents(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        if z.rank() != 2 || z.last_dim() != self.config.code_dim {
            return Err(Error::ShapeMismatch {
                op: "decode",
                lhs: z.shape().to_vec(),
                rhs: vec![self.config.code_dim],
            });
        }
        let n = z.shape()[0];
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let zv = tape.constant(z.clone().reshape(&[1, n, self.config.code_dim])?)?;
        let dec = self.decoder.forward(&mut tape, &p, zv)?;
        let cor = if self.config.kcb_enabled {
            self.kcb
                .correct(&mut tape, &p, dec, &self.norm, &self.skeleton, &self.layout, self.config.fps)?
                .corrected
        } else {
            dec
        };
        let frames = n * self.ratio();
        let d = self.config.feature_dim;
        Ok((
            tape.value(dec).clone().reshape(&[frames, d])?,
            tape.value(cor).clone().reshape(&[frames, d])?,
        ))
    }

    pub fn decode_tokens(&self, grid: &TokenGrid) -> Result<(Tensor, Tensor)> {
        let z = self.rvq.decode(grid)?;
        self.decode_latents(&z)
    }

    /// Eval-mode reconstruction of normalized frames, trimmed to the input
    /// length: `(raw decode, corrected)`.
    pub fn reconstruct(&self, frames: &Tensor) -> Result<(Tensor, Tensor)> {
        let n = frames.shape()[0];
        let (grid, _) = self.tokenize(frames)?;
        let (raw, cor) = self.decode_tokens(&grid)?;
        Ok((trim(&raw, n)?, trim(&cor, n)?))
    }

    /// Decoded normalized frames as a denormalized motion sequence.
    pub fn to_motion(&self, frames: &Tensor) -> Result<MotionSequence> {
        MotionSequence::new(self.norm.denormalize_tensor(frames)?, self.config.fps)
    }
}

pub fn trim(frames: &Tensor, n: usize) -> Result<Tensor> {
    let d = frames.last_dim();
    if frames.shape()[0] < n {
        return Err(invalid!("cannot trim {} frames to {n}", frames.shape()[0]));
    }
    Tensor::new(&[n, d], frames.data()[..n * d].to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperParams {
    pub gamma: f64,
    pub beta_r: f64,
    pub tcc: TccConfig,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub warmup_steps: usize,
    pub grad_clip: Option<f64>,
    pub batch: usize,
    pub steps: usize,
    pub window: usize,
    pub reset_window: u64,
    pub init_codebooks: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            gamma: 0.02,
            beta_r: 1.0,
            tcc: TccConfig::default(),
            optimizer: OptimizerKind::Sgd { momentum: 0.9 },
            lr: 0.01,
            warmup_steps: 0,
            grad_clip: Some(5.0),
            batch: 16,
            steps: 1000,
            window: 64,
            reset_window: 50,
            init_codebooks: true,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        self.tcc.validate()?;
        if !(self.gamma >= 0.0 && self.beta_r >= 0.0 && self.lr > 0.0) {
            return Err(invalid!("gamma and beta_r must be nonnegative and lr positive"));
        }
        if self.batch < 2 || self.window == 0 {
            return Err(invalid!("batch must be at least 2 and window positive"));
        }
        Ok(())
    }
}

/// Scalar values of every loss component of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub recon: f64,
    pub codebook: f64,
    pub commit: f64,
    /// `recon + codebook + gamma·commit`.
    pub vq: f64,
    pub tcc: f64,
    pub tcc_weighted: f64,
    pub rq: f64,
    pub rq_weighted: f64,
    pub total: f64,
    pub tcc_skipped: bool,
}

/// `‖m − m̃‖² + ‖sg[z_e] − z_q‖² + γ‖z_e − sg[z_q]‖²` with `m̃` the
/// (possibly KCB-corrected) reconstruction. Returns the sum and its terms.
pub fn loss_vq_refined(
    tape: &mut Tape,
    m: Var,
    reconstruction: Var,
    z_e: Var,
    z_q: Var,
    gamma: f64,
) -> Result<(Var, [Var; 3])> {
    let recon = row_sq_dist(tape, m, reconstruction)?;
    let cb = codebook_loss(tape, z_e, z_q)?;
    let commit = commitment_loss(tape, z_e, z_q)?;
    let commit_w = tape.scale(commit, gamma)?;
    let s = tape.add(recon, cb)?;
    let total = tape.add(s, commit_w)?;
    Ok((total, [recon, cb, commit]))
}

/// `L_vq' + α_t·L_tcc + β_r·L_rq`.
pub fn loss_total(tape: &mut Tape, vq: Var, tcc: Var, rq: Var, alpha_t: f64, beta_r: f64) -> Result<Var> {
    let a = tape.scale(tcc, alpha_t)?;
    let b = tape.scale(rq, beta_r)?;
    let s = tape.add(vq, a)?;
    tape.add(s, b)
}

/// Full stage-1 objective on a batch of normalized `[B, N, D]` frames.
#[allow(clippy::too_many_arguments)]
pub fn stage1_objective(
    model: &TcasModel,
    tape: &mut Tape,
    p: &Bound,
    books: &[Var],
    m: Var,
    labels: &[u32],
    hyper: &HyperParams,
    rng: &mut Rng,
) -> Result<(Var, LossParts, Stage1Forward)> {
    let fwd = model.forward(tape, p, books, m, Mode::Train, model.config.kcb_enabled, rng)?;
    let (vq, [recon, cb, commit]) = loss_vq_refined(tape, m, fwd.corrected, fwd.z_e, fwd.quant.z_q, hyper.gamma)?;
    let (tcc, tuples_skipped) = if hyper.tcc.weight > 0.0 {
        let shape = tape.shape(fwd.quant.z_q_st).to_vec();
        let mut seqs = Vec::with_capacity(shape[0]);
        for b in 0..shape[0] {
            let s = tape.slice(fwd.quant.z_q_st, 0, b, b + 1)?;
            seqs.push(tape.reshape(s, &[shape[1], shape[2]])?);
        }
        let out = tcc_loss(tape, &seqs, labels, &hyper.tcc, &mut rng.split(7))?;
        (out.loss, out.skipped)
    } else {
        (tape.scalar(0.0)?, true)
    };
    let rq = commitment_loss_rq(tape, &fwd.quant.residuals[1..], &fwd.quant.codes[1..])?;
    let total = loss_total(tape, vq, tcc, rq, hyper.tcc.weight, hyper.beta_r)?;
    let parts = LossParts {
        recon: tape.item(recon),
        codebook: tape.item(cb),
        commit: tape.item(commit),
        vq: tape.item(vq),
        tcc: tape.item(tcc),
        tcc_weighted: hyper.tcc.weight * tape.item(tcc),
        rq: tape.item(rq),
        rq_weighted: hyper.beta_r * tape.item(rq),
        total: tape.item(total),
        tcc_skipped: tuples_skipped,
    };
    Ok((total, parts, fwd))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub parts: LossParts,
    /// Per-element reconstruction MSE in normalized units.
    pub recon_mse: f64,
    pub code_usage: f64,
    pub codes_reset: usize,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Training failure with enough context to reproduce the offending batch.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("non-finite {what} at step {step} (batch sequences {batch:?})")]
    NonFinite {
        step: usize,
        what: String,
        batch: Vec<usize>,
        frames: Tensor,
    },
}

/// Mini-batch: pairs of same-class sequences so every item has a partner
/// for the cycle constraint.
pub fn sample_batch(by_class: &[Vec<usize>], batch: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let eligible: Vec<&Vec<usize>> = by_class.iter().filter(|c| c.len() >= 2).collect();
    if eligible.is_empty() {
        return Err(invalid!("training needs a class with at least two sequences"));
    }
    let mut out = Vec::with_capacity(batch);
    while out.len() + 1 < batch {
        let class = eligible[rng.below(eligible.len())];
        let pick = rng.choose_distinct(class.len(), 2);
        out.push(class[pick[0]]);
        out.push(class[pick[1]]);
    }
    if out.len() < batch {
        let class = eligible[rng.below(eligible.len())];
        out.push(class[rng.below(class.len())]);
    }
    Ok(out)
}

/// Step-wise stage-1 optimizer state. Randomness for step `t` is derived
/// from the root seed and `t`, so a resumed run continues identically.
#[derive(Debug, Clone)]
pub struct Stage1Trainer {
    pub model: TcasModel,
    pub hyper: HyperParams,
    pub optimizer: Optimizer,
    pub usage: CodeUsage,
    pub step: usize,
    root: Rng,
    frames: Vec<Tensor>,
    labels: Vec<u32>,
    by_class: Vec<Vec<usize>>,
}

impl Stage1Trainer {
    /// `train` holds raw (denormalized) labelled sequences.
    pub fn new(model: TcasModel, hyper: HyperParams, train: &[MotionSequence], rng: &Rng) -> Result<Self> {
        hyper.validate()?;
        if hyper.window % model.ratio() != 0 {
            return Err(invalid!("window {} not a multiple of ratio {}", hyper.window, model.ratio()));
        }
        let mut frames = Vec::with_capacity(train.len());
        let mut labels = Vec::with_capacity(train.len());
        let mut by_class: Vec<Vec<usize>> = Vec::new();
        for (i, s) in train.iter().enumerate() {
            if s.len() < hyper.window {
                return Err(invalid!("sequence {i} has {} frames, window is {}", s.len(), hyper.window));
            }
            let c = s.category.ok_or_else(|| invalid!("sequence {i} has no category"))?;
            frames.push(model.norm.normalize_tensor(&s.frames)?);
            labels.push(c);
            if by_class.len() <= c as usize {
                by_class.resize(c as usize + 1, Vec::new());
            }
            by_class[c as usize].push(i);
        }
        if by_class.iter().filter(|c| !c.is_empty()).count() < 2 {
            return Err(invalid!("stage-1 training needs at least two classes"));
        }
        let mut optimizer = Optimizer::new(hyper.optimizer, hyper.lr, hyper.steps);
        optimizer.warmup_steps = hyper.warmup_steps;
        optimizer.grad_clip = hyper.grad_clip;
        let usage = CodeUsage::new(model.rvq.depth(), model.rvq.codebook_size());
        Ok(Self {
            model,
            hyper,
            optimizer,
            usage,
            step: 0,
            root: rng.clone(),
            frames,
            labels,
            by_class,
        })
    }

    fn batch_tensor(&self, idx: &[usize], rng: &mut Rng) -> Result<Tensor> {
        let w = self.hyper.window;
        let d = self.model.config.feature_dim;
        let mut data = Vec::with_capacity(idx.len() * w * d);
        for &i in idx {
            let f = &self.frames[i];
            let start = rng.below(f.shape()[0] - w + 1);
            data.extend_from_slice(&f.data()[start * d..(start + w) * d]);
        }
        Tensor::new(&[idx.len(), w, d], data)
    }

    fn init_codebooks(&mut self, batch: &Tensor, rng: &mut Rng) -> Result<()> {
        let (b, w, d) = (batch.shape()[0], batch.shape()[1], batch.shape()[2]);
        let mut z = Vec::new();
        for k in 0..b {
            let f = Tensor::new(&[w, d], batch.data()[k * w * d..(k + 1) * w * d].to_vec())?;
            z.extend(self.model.encode(&f)?.0.into_data());
        }
        let dim = self.model.config.code_dim;
        let rows = z.len() / dim;
        init_from_data(&mut self.model.rvq, &Tensor::new(&[rows, dim], z)?, rng)
    }

    pub fn step_once(&mut self) -> core::result::Result<StepLog, TrainError> {
        let mut rng = self.root.split(self.step as u64);
        let idx = sample_batch(&self.by_class, self.hyper.batch, &mut rng)?;
        let batch = self.batch_tensor(&idx, &mut rng)?;
        if self.step == 0 && self.hyper.init_codebooks {
            self.init_codebooks(&batch, &mut rng.split(3))?;
        }
        let labels: Vec<u32> = idx.iter().map(|&i| self.labels[i]).collect();
        let diverged = |what: &str| TrainError::NonFinite {
            step: self.step,
            what: what.to_string(),
            batch: idx.clone(),
            frames: batch.clone(),
        };

        let mut tape = Tape::new();
        let p = self.model.store.bind(&mut tape);
        let books = self.model.rvq.bind(&mut tape);
        let m = tape.constant(batch.clone())?;
        let (total, parts, fwd) = match stage1_objective(&self.model, &mut tape, &p, &books, m, &labels, &self.hyper, &mut rng) {
            Ok(v) => v,
            Err(Error::NonFinite { op }) => return Err(diverged(op)),
            Err(e) => return Err(e.into()),
        };
        if !parts.total.is_finite() {
            return Err(diverged("loss"));
        }
        let grads = match tape.backward(total) {
            Ok(g) => g,
            Err(Error::NonFinite { op }) => return Err(diverged(op)),
            Err(e) => return Err(e.into()),
        };
        let mut all = self.model.store.grads(&p, &grads);
        all.extend(books.iter().map(|&b| grads.get(b)));
        if all.iter().any(|g| !g.all_finite()) {
            return Err(diverged("gradient"));
        }
        let recon_mse = parts.recon / self.model.config.feature_dim as f64;
        let lr = self.optimizer.learning_rate(self.step);
        let grad_norm = {
            let mut params: Vec<&mut Tensor> = self.model.store.values_mut().collect();
            params.extend(self.model.rvq.layers.iter_mut().map(|c| &mut c.entries));
            self.optimizer.update(&mut params, &all)?
        };

        self.usage.record(&fwd.quant.indices);
        let candidates: Vec<Tensor> = fwd.quant.inputs.clone();
        let codes_reset = self
            .usage
            .maintain(&mut self.model.rvq, self.hyper.reset_window, &candidates, &mut rng.split(5));
        let log = StepLog {
            step: self.step,
            parts,
            recon_mse,
            code_usage: self.usage.active_fraction(1),
            codes_reset,
            lr,
            grad_norm,
        };
        self.step += 1;
        Ok(log)
    }

    /// Run until `hyper.steps`, calling `on_step` after every step.
    pub fn run(&mut self, mut on_step: impl FnMut(&Self, &StepLog)) -> core::result::Result<Vec<StepLog>, TrainError> {
        let mut logs = Vec::new();
        while self.step < self.hyper.steps {
            let log = self.step_once()?;
            on_step(self, &log);
            logs.push(log);
        }
        Ok(logs)
    }
}
