//! Text-conditioned masked token generation: a base-layer transformer with
//! iterative confidence-based unmasking and a residual-layer transformer that
//! fills the deeper quantizer layers.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::FRAC_PI_2;

use crate::error::{invalid, Error, Result};
use crate::nn::{sinusoidal_positions, Bound, Embedding, LayerNorm, Linear, Optimizer, OptimizerKind, ParamStore};
use crate::rng::Rng;
use crate::rvq::TokenGrid;
use crate::tape::{softmax, Tape, Var};
use crate::tensor::Tensor;
use crate::text::{HashedText, TextConfig, TextEmbedding};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct XfmrConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub ff_mult: usize,
    /// Codebook size `K`; `K` is the MASK id and `K + 1` the PAD id.
    pub vocab: usize,
    pub max_len: usize,
    /// Text rows kept per prompt; shorter prompts are zero-padded.
    pub max_text: usize,
}

impl Default for XfmrConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            d_model: 64,
            ff_mult: 4,
            vocab: 64,
            max_len: 64,
            max_text: 16,
        }
    }
}

impl XfmrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(invalid!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.layers == 0 || self.vocab == 0 || self.max_len == 0 || self.max_text == 0 || self.ff_mult == 0 {
            return Err(invalid!("transformer sizes must be positive"));
        }
        Ok(())
    }

    pub fn mask_token(&self) -> usize {
        self.vocab
    }

    pub fn pad_token(&self) -> usize {
        self.vocab + 1
    }
}

#[derive(Debug, Clone, Copy)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, cfg: &XfmrConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        let f = d * cfg.ff_mult;
        let n = |s: &str| alloc::format!("{name}.{s}");
        Self {
            ln1: LayerNorm::new(store, &n("ln1"), d),
            q: Linear::new(store, &n("q"), d, d, rng),
            k: Linear::new(store, &n("k"), d, d, rng),
            v: Linear::new(store, &n("v"), d, d, rng),
            o: Linear::new(store, &n("o"), d, d, rng),
            ln2: LayerNorm::new(store, &n("ln2"), d),
            ff1: Linear::new(store, &n("ff1"), d, f, rng),
            ff2: Linear::new(store, &n("ff2"), f, d, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, heads: usize, x: Var) -> Result<Var> {
        let d = *tape.shape(x).last().ok_or(Error::Empty("block"))?;
        let h = self.ln1.forward(tape, p, x)?;
        let q = self.q.forward(tape, p, h)?;
        let k = self.k.forward(tape, p, h)?;
        let v = self.v.forward(tape, p, h)?;
        let dh = d / heads;
        let mut outs = Vec::with_capacity(heads);
        for i in 0..heads {
            let (a, b) = (i * dh, (i + 1) * dh);
            let qh = tape.slice(q, 2, a, b)?;
            let kh = tape.slice(k, 2, a, b)?;
            let vh = tape.slice(v, 2, a, b)?;
            let s = tape.bmm(qh, kh, true)?;
            let s = tape.scale(s, 1.0 / libm::sqrt(dh as f64))?;
            let att = tape.softmax(s)?;
            outs.push(tape.bmm(att, vh, false)?);
        }
        let ctx = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 2)? };
        let a = self.o.forward(tape, p, ctx)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, p, x)?;
        let h = self.ff1.forward(tape, p, h)?;
        let h = tape.relu(h)?;
        let h = self.ff2.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

/// Bidirectional encoder over `[text rows; motion tokens]` with a token
/// classification head on the motion positions.
#[derive(Debug, Clone)]
pub struct Transformer {
    cfg: XfmrConfig,
    text_proj: Linear,
    tables: Vec<Embedding>,
    layer_emb: Option<Embedding>,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
}

impl Transformer {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: XfmrConfig,
        text_dim: usize,
        tables: usize,
        rows: usize,
        layer_ids: Option<usize>,
        rng: &mut Rng,
    ) -> Self {
        let d = cfg.d_model;
        Self {
            cfg,
            text_proj: Linear::new(store, &alloc::format!("{name}.text"), text_dim, d, rng),
            tables: (0..tables)
                .map(|t| Embedding::new(store, &alloc::format!("{name}.tok{t}"), rows, d, rng))
                .collect(),
            layer_emb: layer_ids.map(|c| Embedding::new(store, &alloc::format!("{name}.layer"), c, d, rng)),
            blocks: (0..cfg.layers)
                .map(|b| Block::new(store, &alloc::format!("{name}.b{b}"), &cfg, rng))
                .collect(),
            ln_f: LayerNorm::new(store, &alloc::format!("{name}.ln_f"), d),
            head: Linear::new(store, &alloc::format!("{name}.head"), d, cfg.vocab, rng),
        }
    }

    fn embed(&self, tape: &mut Tape, p: &Bound, table: usize, ids: &[Vec<usize>]) -> Result<Var> {
        let (b, n) = (ids.len(), ids[0].len());
        let flat: Vec<usize> = ids.iter().flatten().copied().collect();
        let e = self.tables[table].forward(tape, p, &flat)?;
        tape.reshape(e, &[b, n, self.cfg.d_model])
    }

    /// `text` is `[B, S, text_dim]`, `motion` `[B, n, d_model]`; returns
    /// logits `[B, n, K]`.
    fn run(&self, tape: &mut Tape, p: &Bound, text: Var, motion: Var) -> Result<Var> {
        let n = tape.shape(motion)[1];
        if n > self.cfg.max_len {
            return Err(invalid!("{n} tokens exceed the maximum length {}", self.cfg.max_len));
        }
        let pos = tape.constant(sinusoidal_positions(n, self.cfg.d_model))?;
        let m = tape.add(motion, pos)?;
        let t = self.text_proj.forward(tape, p, text)?;
        let s = tape.shape(t)[1];
        let mut x = tape.concat(&[t, m], 1)?;
        for b in &self.blocks {
            x = b.forward(tape, p, self.cfg.heads, x)?;
        }
        let x = tape.slice(x, 1, s, s + n)?;
        let x = self.ln_f.forward(tape, p, x)?;
        self.head.forward(tape, p, x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenConfig {
    pub xfmr: XfmrConfig,
    pub text: TextConfig,
    /// Quantizer depth `L + 1`.
    pub quant_layers: usize,
    /// Probability of training a sample with the text removed.
    pub cond_dropout: f64,
    /// Guidance scale at inference; 1 disables guidance.
    pub guidance: f64,
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        self.xfmr.validate()?;
        if self.quant_layers == 0 {
            return Err(invalid!("quantizer depth must be positive"));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) || self.guidance.is_nan() {
            return Err(invalid!("cond_dropout must be in [0, 1) and guidance a number"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GenModel {
    pub cfg: GenConfig,
    pub store: ParamStore,
    pub base: Transformer,
    pub residual: Transformer,
    text: HashedText,
}

/// Iteration-by-iteration record of which base positions were retained.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenTrace {
    pub retained: Vec<Vec<usize>>,
    /// Confidence of every filled position before re-masking, per iteration.
    pub confidence: Vec<Vec<Option<f64>>>,
}

/// Number of masked positions for a uniform draw `u`: `⌈cos(π/2·u)·n⌉`,
/// at least one.
pub fn mask_count(u: f64, n: usize) -> usize {
    let rho = libm::cos(FRAC_PI_2 * u);
    (libm::ceil(rho * n as f64) as usize).clamp(1, n)
}

/// Mask a cosine-scheduled random subset of `tokens`.
pub fn mask_sample(tokens: &[usize], mask_token: usize, rng: &mut Rng) -> Result<(Vec<usize>, Vec<bool>)> {
    let n = tokens.len();
    if n == 0 {
        return Err(Error::Empty("mask_sample"));
    }
    let m = mask_count(rng.uniform(), n);
    let mut masked = tokens.to_vec();
    let mut set = vec![false; n];
    for i in rng.choose_distinct(n, m) {
        masked[i] = mask_token;
        set[i] = true;
    }
    Ok((masked, set))
}

/// Number of originally masked positions kept after iteration `t` of `iters`.
pub fn kept_after(t: usize, iters: usize, masked: usize) -> usize {
    if t + 1 >= iters {
        return masked;
    }
    let frac = 1.0 - libm::cos(FRAC_PI_2 * (t + 1) as f64 / iters as f64);
    (libm::ceil(masked as f64 * frac) as usize).min(masked)
}

/// Mean cross-entropy of logit rows `[m, V]` against targets.
pub fn cross_entropy(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let ls = tape.log_softmax(logits)?;
    let picked = tape.pick(ls, targets)?;
    let m = tape.mean(picked)?;
    tape.neg(m)
}

fn rows_of(tape: &mut Tape, logits: Var) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    let v = *s.last().ok_or(Error::Empty("logits"))?;
    tape.reshape(logits, &[s.iter().product::<usize>() / v, v])
}

/// Base-layer loss: cross-entropy over masked positions only. `logits` is
/// `[B, n, K]`; `targets` and `masked` are per sample.
pub fn loss_mt(tape: &mut Tape, logits: Var, targets: &[Vec<usize>], masked: &[Vec<bool>]) -> Result<Var> {
    let flat = rows_of(tape, logits)?;
    let mut rows = Vec::new();
    let mut tgt = Vec::new();
    for (b, (t, m)) in targets.iter().zip(masked).enumerate() {
        for (i, (&x, &is_m)) in t.iter().zip(m).enumerate() {
            if is_m {
                rows.push(b * t.len() + i);
                tgt.push(x);
            }
        }
    }
    if rows.is_empty() {
        return Err(invalid!("no masked positions"));
    }
    let sel = tape.gather_rows(flat, &rows)?;
    cross_entropy(tape, sel, &tgt)
}

/// Residual-layer loss: per layer `j ≥ 1`, cross-entropy over every position
/// of that layer's logits `[B, n, K]`; summed over the given layers.
pub fn loss_rt(tape: &mut Tape, layers: &[(usize, Var, &[Vec<usize>])]) -> Result<Var> {
    let mut total = tape.scalar(0.0)?;
    for &(j, logits, targets) in layers {
        if j == 0 {
            return Err(invalid!("layer 0 belongs to the base-layer loss"));
        }
        let flat = rows_of(tape, logits)?;
        let tgt: Vec<usize> = targets.iter().flatten().copied().collect();
        let ce = cross_entropy(tape, flat, &tgt)?;
        total = tape.add(total, ce)?;
    }
    Ok(total)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample_categorical(probs: &[f64], rng: &mut Rng) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

impl GenModel {
    pub fn new(cfg: GenConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let text = HashedText::new(cfg.text)?;
        let mut store = ParamStore::new();
        let x = cfg.xfmr;
        let base = Transformer::new(&mut store, "mt", x, cfg.text.dim, 1, x.vocab + 2, None, &mut rng.split(1));
        let residual = Transformer::new(
            &mut store,
            "rt",
            x,
            cfg.text.dim,
            cfg.quant_layers.saturating_sub(1).max(1),
            x.vocab,
            Some(cfg.quant_layers),
            &mut rng.split(2),
        );
        Ok(Self {
            cfg,
            store,
            base,
            residual,
            text,
        })
    }

    pub fn embed_text(&self, prompt: &str) -> Result<TextEmbedding> {
        self.text.embed(prompt)
    }

    /// `[B, S, text_dim]` batch; `None` entries are the unconditional
    /// (all-zero) text.
    pub fn text_batch(&self, texts: &[Option<&TextEmbedding>]) -> Result<Tensor> {
        let (s, d) = (self.cfg.xfmr.max_text, self.cfg.text.dim);
        let mut data = vec![0.0; texts.len() * s * d];
        for (b, t) in texts.iter().enumerate() {
            if let Some(t) = t {
                if t.dim() != d {
                    return Err(invalid!("text rows have width {}, expected {d}", t.dim()));
                }
                let rows = t.len().min(s);
                data[b * s * d..b * s * d + rows * d].copy_from_slice(&t.tokens.data()[..rows * d]);
            }
        }
        Tensor::new(&[texts.len(), s, d], data)
    }

    /// Base logits `[B, n, K]` for token ids that may include MASK.
    pub fn base_logits(&self, tape: &mut Tape, p: &Bound, text: &Tensor, ids: &[Vec<usize>]) -> Result<Var> {
        let limit = self.cfg.xfmr.vocab + 2;
        if ids.iter().flatten().any(|&i| i >= limit) {
            return Err(invalid!("token id out of range"));
        }
        let t = tape.constant(text.clone())?;
        let m = self.base.embed(tape, p, 0, ids)?;
        self.base.run(tape, p, t, m)
    }

    /// Residual logits `[B, n, K]` for layer `j`, given layers `0..j` of each
    /// sample (`prefix[b][l]` is layer `l` of sample `b`).
    pub fn residual_logits(&self, tape: &mut Tape, p: &Bound, text: &Tensor, prefix: &[Vec<Vec<usize>>], j: usize) -> Result<Var> {
        if j == 0 || j >= self.cfg.quant_layers {
            return Err(invalid!("residual layer {j} outside 1..{}", self.cfg.quant_layers));
        }
        let mut sum: Option<Var> = None;
        for l in 0..j {
            let ids: Vec<Vec<usize>> = prefix.iter().map(|g| g[l].clone()).collect();
            let e = self.residual.embed(tape, p, l, &ids)?;
            sum = Some(match sum {
                None => e,
                Some(s) => tape.add(s, e)?,
            });
        }
        let layer = self.residual.layer_emb.ok_or(Error::Empty("layer embedding"))?;
        let le = layer.forward(tape, p, &[j])?;
        let le = tape.reshape(le, &[self.cfg.xfmr.d_model])?;
        let x = tape.add(sum.ok_or(Error::Empty("prefix"))?, le)?;
        let t = tape.constant(text.clone())?;
        self.residual.run(tape, p, t, x)
    }

    fn guided_rows(&self, text: &TextEmbedding, compute: impl Fn(&Self, &Tensor) -> Result<Tensor>) -> Result<Tensor> {
        let cond = compute(self, &self.text_batch(&[Some(text)])?)?;
        if self.cfg.guidance == 1.0 {
            return Ok(cond);
        }
        let uncond = compute(self, &self.text_batch(&[None])?)?;
        let g = self.cfg.guidance;
        Tensor::new(
            cond.shape(),
            cond.data().iter().zip(uncond.data()).map(|(c, u)| u + g * (c - u)).collect(),
        )
    }

    fn eval_base(&self, text: &TextEmbedding, ids: &[usize]) -> Result<Tensor> {
        self.guided_rows(text, |m, t| {
            let mut tape = Tape::new();
            let p = m.store.bind(&mut tape);
            let l = m.base_logits(&mut tape, &p, t, &[ids.to_vec()])?;
            Ok(tape.value(l).clone())
        })
    }

    fn eval_residual(&self, text: &TextEmbedding, prefix: &[Vec<usize>], j: usize) -> Result<Tensor> {
        self.guided_rows(text, |m, t| {
            let mut tape = Tape::new();
            let p = m.store.bind(&mut tape);
            let l = m.residual_logits(&mut tape, &p, t, &[prefix.to_vec()], j)?;
            Ok(tape.value(l).clone())
        })
    }

    /// Iterative unmasking of the `None` positions of `init`; filled entries
    /// stay fixed.
    fn infill_base(
        &self,
        text: &TextEmbedding,
        init: &[Option<usize>],
        iters: usize,
        rng: &mut Rng,
        trace: &mut GenTrace,
    ) -> Result<Vec<usize>> {
        if iters == 0 {
            return Err(invalid!("at least one iteration is required"));
        }
        let n = init.len();
        let k = self.cfg.xfmr.vocab;
        let open: Vec<usize> = (0..n).filter(|&i| init[i].is_none()).collect();
        let mut tokens: Vec<Option<usize>> = init.to_vec();
        let mut conf = vec![f64::INFINITY; n];
        for t in 0..iters {
            let ids: Vec<usize> = tokens.iter().map(|x| x.unwrap_or(k)).collect();
            let logits = self.eval_base(text, &ids)?;
            for &i in &open {
                if tokens[i].is_none() {
                    let probs = softmax(&logits.data()[i * k..(i + 1) * k]);
                    let tok = sample_categorical(&probs, rng);
                    tokens[i] = Some(tok);
                    conf[i] = probs[tok];
                }
            }
            trace
                .confidence
                .push((0..n).map(|i| if open.contains(&i) { Some(conf[i]) } else { None }).collect());
            let mut order = open.clone();
            order.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]).then(a.cmp(&b)));
            let keep = kept_after(t, iters, open.len());
            for &i in &order[keep..] {
                tokens[i] = None;
            }
            for &i in &order[..keep] {
                conf[i] = f64::INFINITY;
            }
            let mut kept: Vec<usize> = order[..keep].to_vec();
            kept.sort_unstable();
            trace.retained.push(kept);
        }
        tokens
            .into_iter()
            .map(|t| t.ok_or(Error::Empty("unfilled position")))
            .collect()
    }

    /// Greedy fill of layers `1..` at the positions flagged in `open`.
    fn fill_residual(&self, text: &TextEmbedding, layers: &mut [Vec<usize>], open: &[bool]) -> Result<()> {
        let k = self.cfg.xfmr.vocab;
        for j in 1..self.cfg.quant_layers {
            let logits = self.eval_residual(text, &layers[..j], j)?;
            for (i, row) in logits.data().chunks_exact(k).enumerate() {
                if open[i] {
                    layers[j][i] = argmax(row);
                }
            }
        }
        Ok(())
    }

    pub fn generate_traced(&self, prompt: &str, n: usize, iters: usize, rng: &mut Rng) -> Result<(TokenGrid, GenTrace)> {
        if n == 0 || n > self.cfg.xfmr.max_len {
            return Err(invalid!("length {n} outside 1..={}", self.cfg.xfmr.max_len));
        }
        let text = self.embed_text(prompt)?;
        let mut trace = GenTrace::default();
        let base = self.infill_base(&text, &vec![None; n], iters, rng, &mut trace)?;
        let mut layers = vec![vec![0; n]; self.cfg.quant_layers];
        layers[0] = base;
        self.fill_residual(&text, &mut layers, &vec![true; n])?;
        Ok((TokenGrid { tokens: layers }, trace))
    }

    pub fn generate(&self, prompt: &str, n: usize, iters: usize, rng: &mut Rng) -> Result<TokenGrid> {
        Ok(self.generate_traced(prompt, n, iters, rng)?.0)
    }

    /// Segments generated in order, then joined by `transition` infilled
    /// tokens conditioned on `transition` tokens from each neighbor.
    pub fn generate_long(
        &self,
        prompts: &[&str],
        lengths: &[usize],
        transition: usize,
        iters: usize,
        rng: &mut Rng,
    ) -> Result<TokenGrid> {
        if prompts.is_empty() || prompts.len() != lengths.len() {
            return Err(invalid!("need one length per prompt"));
        }
        if prompts.len() == 1 {
            return self.generate(prompts[0], lengths[0], iters, rng);
        }
        let shortest = *lengths.iter().min().ok_or(Error::Empty("lengths"))?;
        if transition >= shortest {
            return Err(invalid!("transition {transition} must be shorter than every segment ({shortest})"));
        }
        if 3 * transition > self.cfg.xfmr.max_len {
            return Err(invalid!("transition window exceeds the maximum length"));
        }
        let mut segments = Vec::with_capacity(prompts.len());
        for (p, &n) in prompts.iter().zip(lengths) {
            segments.push(self.generate(p, n, iters, rng)?);
        }
        let depth = self.cfg.quant_layers;
        let mut out: Vec<Vec<usize>> = segments[0].tokens.clone();
        for w in 1..segments.len() {
            let (a, b) = (&segments[w - 1], &segments[w]);
            if transition > 0 {
                let k = transition;
                let la = a.len();
                let mut window: Vec<Vec<usize>> = (0..depth)
                    .map(|l| {
                        let mut v = a.tokens[l][la - k..].to_vec();
                        v.extend(vec![0; k]);
                        v.extend_from_slice(&b.tokens[l][..k]);
                        v
                    })
                    .collect();
                let init: Vec<Option<usize>> = (0..3 * k)
                    .map(|i| (i < k || i >= 2 * k).then(|| window[0][i]))
                    .collect();
                let joined: String = alloc::format!("{} {}", prompts[w - 1], prompts[w]);
                let text = self.embed_text(&joined)?;
                window[0] = self.infill_base(&text, &init, iters, rng, &mut GenTrace::default())?;
                let open: Vec<bool> = (0..3 * k).map(|i| (k..2 * k).contains(&i)).collect();
                self.fill_residual(&text, &mut window, &open)?;
                for (o, wl) in out.iter_mut().zip(&window) {
                    o.extend_from_slice(&wl[k..2 * k]);
                }
            }
            for (o, bl) in out.iter_mut().zip(&b.tokens) {
                o.extend_from_slice(bl);
            }
        }
        Ok(TokenGrid { tokens: out })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage2Hyper {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub warmup_steps: usize,
    pub grad_clip: Option<f64>,
    pub batch: usize,
    pub steps: usize,
}

impl Default for Stage2Hyper {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Sgd { momentum: 0.9 },
            lr: 0.05,
            warmup_steps: 100,
            grad_clip: Some(5.0),
            batch: 16,
            steps: 2000,
        }
    }
}

/// A tokenized training motion with its caption.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Example {
    pub grid: TokenGrid,
    pub text: TextEmbedding,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage2Log {
    pub step: usize,
    pub loss_mt: f64,
    pub loss_rt: f64,
    pub residual_layer: usize,
    /// Accuracy of argmax predictions at masked base positions.
    pub masked_accuracy: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct Stage2Trainer {
    pub model: GenModel,
    pub hyper: Stage2Hyper,
    pub optimizer: Optimizer,
    pub step: usize,
    root: Rng,
    examples: Vec<Stage2Example>,
    window: usize,
}

impl Stage2Trainer {
    pub fn new(model: GenModel, hyper: Stage2Hyper, examples: Vec<Stage2Example>, rng: &Rng) -> Result<Self> {
        if examples.is_empty() || hyper.batch == 0 {
            return Err(invalid!("stage-2 training needs examples and a positive batch"));
        }
        let depth = model.cfg.quant_layers;
        if let Some(e) = examples.iter().find(|e| e.grid.layers() != depth) {
            return Err(invalid!("grid with {} layers, model expects {depth}", e.grid.layers()));
        }
        let window = examples.iter().map(|e| e.grid.len()).min().unwrap_or(0).min(model.cfg.xfmr.max_len);
        if window == 0 {
            return Err(invalid!("empty token grid"));
        }
        let mut optimizer = Optimizer::new(hyper.optimizer, hyper.lr, hyper.steps);
        optimizer.warmup_steps = hyper.warmup_steps;
        optimizer.grad_clip = hyper.grad_clip;
        Ok(Self {
            model,
            hyper,
            optimizer,
            step: 0,
            root: rng.clone(),
            examples,
            window,
        })
    }

    pub fn step_once(&mut self) -> Result<Stage2Log> {
        let mut rng = self.root.split(self.step as u64);
        let depth = self.model.cfg.quant_layers;
        let k = self.model.cfg.xfmr.vocab;
        let mut grids: Vec<Vec<Vec<usize>>> = Vec::with_capacity(self.hyper.batch);
        let mut texts = Vec::with_capacity(self.hyper.batch);
        for _ in 0..self.hyper.batch {
            let e = &self.examples[rng.below(self.examples.len())];
            let start = rng.below(e.grid.len() - self.window + 1);
            grids.push(e.grid.tokens.iter().map(|l| l[start..start + self.window].to_vec()).collect());
            let drop = self.model.cfg.cond_dropout > 0.0 && rng.bernoulli(self.model.cfg.cond_dropout);
            texts.push((!drop).then_some(&e.text));
        }
        let text = self.model.text_batch(&texts)?;
        let mut masked_ids = Vec::with_capacity(grids.len());
        let mut masks = Vec::with_capacity(grids.len());
        for g in &grids {
            let (ids, m) = mask_sample(&g[0], self.model.cfg.xfmr.mask_token(), &mut rng)?;
            masked_ids.push(ids);
            masks.push(m);
        }
        let targets: Vec<Vec<usize>> = grids.iter().map(|g| g[0].clone()).collect();

        let mut tape = Tape::new();
        let p = self.model.store.bind(&mut tape);
        let logits = self.model.base_logits(&mut tape, &p, &text, &masked_ids)?;
        let mt = loss_mt(&mut tape, logits, &targets, &masks)?;
        let (total, rt, j) = if depth > 1 {
            let j = 1 + rng.below(depth - 1);
            let prefix: Vec<Vec<Vec<usize>>> = grids.iter().map(|g| g[..j].to_vec()).collect();
            let rl = self.model.residual_logits(&mut tape, &p, &text, &prefix, j)?;
            let rt_targets: Vec<Vec<usize>> = grids.iter().map(|g| g[j].clone()).collect();
            let rt = loss_rt(&mut tape, &[(j, rl, &rt_targets)])?;
            (tape.add(mt, rt)?, tape.item(rt), j)
        } else {
            (mt, 0.0, 0)
        };
        let lv = tape.value(logits);
        let (mut hit, mut cnt) = (0usize, 0usize);
        for (b, (t, m)) in targets.iter().zip(&masks).enumerate() {
            for (i, (&x, &is_m)) in t.iter().zip(m).enumerate() {
                if is_m {
                    let off = (b * self.window + i) * k;
                    hit += usize::from(argmax(&lv.data()[off..off + k]) == x);
                    cnt += 1;
                }
            }
        }
        let loss_mt_v = tape.item(mt);
        if !tape.item(total).is_finite() {
            return Err(Error::NonFinite { op: "stage-2 loss" });
        }
        let grads = tape.backward(total)?;
        let g = self.model.store.grads(&p, &grads);
        let lr = self.optimizer.learning_rate(self.step);
        let grad_norm = {
            let mut params: Vec<&mut Tensor> = self.model.store.values_mut().collect();
            self.optimizer.update(&mut params, &g)?
        };
        let log = Stage2Log {
            step: self.step,
            loss_mt: loss_mt_v,
            loss_rt: rt,
            residual_layer: j,
            masked_accuracy: hit as f64 / cnt as f64,
            lr,
            grad_norm,
        };
        self.step += 1;
        Ok(log)
    }

    pub fn run(&mut self, mut on_step: impl FnMut(&Self, &Stage2Log)) -> Result<Vec<Stage2Log>> {
        let mut logs = Vec::new();
        while self.step < self.hyper.steps {
            let log = self.step_once()?;
            on_step(self, &log);
            logs.push(log);
        }
        Ok(logs)
    }
}
