//! Small contrastively trained motion/text feature extractor used by the
//! evaluation metrics. Motion and text map into one shared feature space
//! where matched pairs sit close in Euclidean distance.

use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::masked_gen::cross_entropy;
use crate::motion::{MotionSequence, NormStats};
use crate::nn::{Bound, Conv1d, Linear, Optimizer, OptimizerKind, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::text::{HashedText, TextConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvaluatorConfig {
    pub width: usize,
    pub feature_dim: usize,
    pub text: TextConfig,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        Self {
            width: 32,
            feature_dim: 32,
            text: TextConfig::default(),
            lr: 1e-3,
            batch: 16,
            steps: 400,
        }
    }
}

/// Shortest sequence the motion branch accepts (two stride-2 convolutions).
pub const MIN_FRAMES: usize = 4;

#[derive(Debug, Clone)]
pub struct Evaluator {
    pub cfg: EvaluatorConfig,
    pub store: ParamStore,
    pub norm: NormStats,
    conv_a: Conv1d,
    conv_b: Conv1d,
    motion_out: Linear,
    text_hidden: Linear,
    text_out: Linear,
    text: HashedText,
}

impl Evaluator {
    pub fn new(cfg: EvaluatorConfig, norm: NormStats, rng: &mut Rng) -> Result<Self> {
        if cfg.width == 0 || cfg.feature_dim == 0 || cfg.batch < 2 {
            return Err(invalid!("evaluator needs positive widths and a batch of at least 2"));
        }
        let mut store = ParamStore::new();
        let d = norm.dim();
        let w = cfg.width;
        let conv_a = Conv1d::new(&mut store, "ev.conv_a", d, w, 4, 2, 1, 1, rng);
        let conv_b = Conv1d::new(&mut store, "ev.conv_b", w, w, 4, 2, 1, 1, rng);
        let motion_out = Linear::new(&mut store, "ev.motion_out", w, cfg.feature_dim, rng);
        let text_hidden = Linear::new(&mut store, "ev.text_hidden", cfg.text.dim, w, rng);
        let text_out = Linear::new(&mut store, "ev.text_out", w, cfg.feature_dim, rng);
        Ok(Self {
            cfg,
            store,
            norm,
            conv_a,
            conv_b,
            motion_out,
            text_hidden,
            text_out,
            text: HashedText::new(cfg.text)?,
        })
    }

    /// `x`: normalized frames `[B, T, D]` → `[B, feature_dim]`.
    fn motion_var(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.conv_a.forward(tape, p, x)?;
        let h = tape.relu(h)?;
        let h = self.conv_b.forward(tape, p, h)?;
        let h = tape.relu(h)?;
        let steps = tape.shape(h)[1] as f64;
        let pooled = tape.sum_axis(h, 1)?;
        let pooled = tape.scale(pooled, 1.0 / steps)?;
        self.motion_out.forward(tape, p, pooled)
    }

    fn text_var(&self, tape: &mut Tape, p: &Bound, pooled: Var) -> Result<Var> {
        let h = self.text_hidden.forward(tape, p, pooled)?;
        let h = tape.relu(h)?;
        self.text_out.forward(tape, p, h)
    }

    fn pooled_text(&self, prompts: &[&str]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(prompts.len() * self.cfg.text.dim);
        for prompt in prompts {
            data.extend(self.text.embed(prompt)?.pooled());
        }
        Tensor::new(&[prompts.len(), self.cfg.text.dim], data)
    }

    /// Features of raw (unnormalized) motions, one row per sequence.
    pub fn motion_features(&self, seqs: &[&Tensor]) -> Result<Tensor> {
        if seqs.is_empty() {
            return Err(crate::error::Error::Empty("motion_features"));
        }
        let mut data = Vec::with_capacity(seqs.len() * self.cfg.feature_dim);
        for frames in seqs {
            if frames.rank() != 2 || frames.shape()[0] < MIN_FRAMES {
                return Err(invalid!("evaluator needs at least {MIN_FRAMES} frames"));
            }
            let x = self.norm.normalize_tensor(frames)?;
            let x = x.reshape(&[1, frames.shape()[0], frames.shape()[1]])?;
            let mut tape = Tape::new();
            let p = self.store.bind(&mut tape);
            let xv = tape.constant(x)?;
            let f = self.motion_var(&mut tape, &p, xv)?;
            data.extend_from_slice(tape.value(f).data());
        }
        Tensor::new(&[seqs.len(), self.cfg.feature_dim], data)
    }

    pub fn text_features(&self, prompts: &[&str]) -> Result<Tensor> {
        if prompts.is_empty() {
            return Err(crate::error::Error::Empty("text_features"));
        }
        let pooled = self.pooled_text(prompts)?;
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let t = tape.constant(pooled)?;
        let f = self.text_var(&mut tape, &p, t)?;
        Ok(tape.value(f).clone())
    }

    /// Trains on `(motion, text)` pairs taken from sequences carrying text.
    /// Every step crops a random window of the shortest training length.
    /// Returns the loss per step.
    pub fn fit(&mut self, data: &[MotionSequence], rng: &Rng) -> Result<Vec<f64>> {
        let items: Vec<&MotionSequence> = data.iter().filter(|s| s.text.is_some()).collect();
        if items.len() < self.cfg.batch {
            return Err(invalid!(
                "evaluator training needs at least {} captioned sequences, got {}",
                self.cfg.batch,
                items.len()
            ));
        }
        let window = items.iter().map(|s| s.len()).min().unwrap_or(0);
        if window < MIN_FRAMES {
            return Err(invalid!("evaluator needs at least {MIN_FRAMES} frames"));
        }
        let normalized: Vec<Tensor> = items
            .iter()
            .map(|s| self.norm.normalize_tensor(&s.frames))
            .collect::<Result<_>>()?;
        let d = self.norm.dim();
        let mut opt = Optimizer::new(
            OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.99,
                eps: 1e-8,
            },
            self.cfg.lr,
            self.cfg.steps,
        );
        let mut losses = Vec::with_capacity(self.cfg.steps);
        for step in 0..self.cfg.steps {
            let mut rng = rng.split(step as u64);
            let picks = rng.choose_distinct(items.len(), self.cfg.batch);
            let mut frames = Vec::with_capacity(self.cfg.batch * window * d);
            let mut prompts = Vec::with_capacity(self.cfg.batch);
            for &i in &picks {
                let start = rng.below(items[i].len() - window + 1);
                frames.extend_from_slice(&normalized[i].data()[start * d..(start + window) * d]);
                prompts.push(items[i].text.as_deref().unwrap_or_default());
            }
            let x = Tensor::new(&[self.cfg.batch, window, d], frames)?;
            let pooled = self.pooled_text(&prompts)?;

            let mut tape = Tape::new();
            let p = self.store.bind(&mut tape);
            let xv = tape.constant(x)?;
            let tv = tape.constant(pooled)?;
            let m = self.motion_var(&mut tape, &p, xv)?;
            let t = self.text_var(&mut tape, &p, tv)?;
            let loss = contrastive_loss(&mut tape, m, t)?;
            losses.push(tape.item(loss));
            let grads = tape.backward(loss)?;
            let g = self.store.grads(&p, &grads);
            let mut params: Vec<&mut Tensor> = self.store.values_mut().collect();
            opt.update(&mut params, &g)?;
        }
        Ok(losses)
    }
}

/// Symmetric contrastive loss over a batch of matched rows: logits are
/// negative squared distances, and row `i` of each side must pick row `i`
/// of the other.
pub fn contrastive_loss(tape: &mut Tape, motion: Var, text: Var) -> Result<Var> {
    let n = tape.shape(motion)[0];
    let targets: Vec<usize> = (0..n).collect();
    let d_mt = tape.pairwise_sqdist(motion, text)?;
    let l_mt = tape.neg(d_mt)?;
    let d_tm = tape.pairwise_sqdist(text, motion)?;
    let l_tm = tape.neg(d_tm)?;
    let a = cross_entropy(tape, l_mt, &targets)?;
    let b = cross_entropy(tape, l_tm, &targets)?;
    let s = tape.add(a, b)?;
    tape.scale(s, 0.5)
}
