//! Residual vector quantization.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// `[K, d]`
    pub entries: Tensor,
}

impl Codebook {
    pub fn new(entries: Tensor) -> Result<Self> {
        if entries.rank() != 2 || entries.shape()[0] == 0 || entries.shape()[1] == 0 {
            return Err(invalid!("codebook must be [K>=1, d>=1], got {:?}", entries.shape()));
        }
        if !entries.all_finite() {
            return Err(Error::NonFinite { op: "codebook" });
        }
        Ok(Self { entries })
    }

    pub fn size(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.entries.shape()[1]
    }

    pub fn entry(&self, k: usize) -> &[f64] {
        self.entries.row(k)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest entry (lowest index on ties).
pub fn nearest(r: &[f64], entries: &Tensor) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, e) in entries.rows().enumerate() {
        let d = sq_dist(r, e);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

pub fn quantize_nn<'a>(r: &[f64], cb: &'a Codebook) -> Result<(usize, &'a [f64])> {
    if r.len() != cb.dim() {
        return Err(Error::ShapeMismatch {
            op: "quantize_nn",
            lhs: vec![r.len()],
            rhs: cb.entries.shape().to_vec(),
        });
    }
    let k = nearest(r, &cb.entries);
    Ok((k, cb.entry(k)))
}

/// Token indices per layer: `tokens[layer][position]`; layer 0 is the base.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    pub tokens: Vec<Vec<usize>>,
}

impl TokenGrid {
    pub fn new(tokens: Vec<Vec<usize>>) -> Result<Self> {
        let n = tokens.first().ok_or(Error::Empty("token grid"))?.len();
        if tokens.iter().any(|l| l.len() != n) {
            return Err(invalid!("token grid layers differ in length"));
        }
        Ok(Self { tokens })
    }

    pub fn layers(&self) -> usize {
        self.tokens.len()
    }

    pub fn len(&self) -> usize {
        self.tokens.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn base(&self) -> &[usize] {
        &self.tokens[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RvqStack {
    pub layers: Vec<Codebook>,
    pub dropout_p: f64,
}

/// Tape values from one quantization pass over `[rows, d]` latents.
#[derive(Debug, Clone)]
pub struct RvqForward {
    /// Selected code per layer and row.
    pub indices: Vec<Vec<usize>>,
    /// Number of extra layers kept per sample (0..=L).
    pub depth: Vec<usize>,
    /// Sum of the kept codes; carries gradient to the codebooks.
    pub z_q: Var,
    /// `z_e + sg(z_q - z_e)`: quantized forward, identity backward.
    pub z_q_st: Var,
    /// Residual entering each layer, masked to the kept layers.
    pub residuals: Vec<Var>,
    /// Code selected at each layer, masked to the kept layers.
    pub codes: Vec<Var>,
    /// Unmasked residual values entering each layer, `[rows, d]`.
    pub inputs: Vec<Tensor>,
}

impl RvqStack {
    pub fn new(layers: Vec<Codebook>, dropout_p: f64) -> Result<Self> {
        let d = layers.first().ok_or(Error::Empty("rvq layers"))?.dim();
        if layers.iter().any(|c| c.dim() != d) {
            return Err(invalid!("all codebooks must share one dimension"));
        }
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(invalid!("dropout probability {dropout_p} outside [0, 1)"));
        }
        Ok(Self { layers, dropout_p })
    }

    pub fn random(layers: usize, k: usize, d: usize, dropout_p: f64, rng: &mut Rng) -> Result<Self> {
        let books = (0..layers)
            .map(|_| Codebook::new(Tensor::randn(&[k, d], 1.0, rng)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(books, dropout_p)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn dim(&self) -> usize {
        self.layers[0].dim()
    }

    pub fn codebook_size(&self) -> usize {
        self.layers[0].size()
    }

    fn check_rows(&self, z: &Tensor) -> Result<usize> {
        if z.rank() == 0 || z.last_dim() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "rvq",
                lhs: z.shape().to_vec(),
                rhs: vec![self.dim()],
            });
        }
        Ok(z.numel() / self.dim())
    }

    fn draw_depths(&self, samples: usize, mode: Mode, rng: &mut Rng) -> Vec<usize> {
        let full = self.depth() - 1;
        (0..samples)
            .map(|_| match mode {
                Mode::Train if self.dropout_p > 0.0 && rng.bernoulli(self.dropout_p) => rng.below(full + 1),
                _ => full,
            })
            .collect()
    }

    /// Plain quantization of `[rows, d]` latents (any leading shape).
    /// `rows_per_sample` groups rows for dropout. Returns the grid and `z_q`.
    pub fn encode(&self, z_e: &Tensor, mode: Mode, rows_per_sample: usize, rng: &mut Rng) -> Result<(TokenGrid, Tensor)> {
        let rows = self.check_rows(z_e)?;
        let d = self.dim();
        let per = rows_per_sample.max(1);
        let depth = self.draw_depths(rows.div_ceil(per), mode, rng);
        let mut residual = z_e.data().to_vec();
        let mut z_q = vec![0.0; rows * d];
        let mut tokens = Vec::with_capacity(self.depth());
        for (layer, cb) in self.layers.iter().enumerate() {
            let mut idx = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = &mut residual[r * d..(r + 1) * d];
                let k = nearest(row, &cb.entries);
                idx.push(k);
                if layer <= depth[r / per] {
                    let e = cb.entry(k);
                    for c in 0..d {
                        row[c] -= e[c];
                        z_q[r * d + c] += e[c];
                    }
                } else {
                    for (c, e) in cb.entry(k).iter().enumerate() {
                        row[c] -= e;
                    }
                }
            }
            tokens.push(idx);
        }
        Ok((TokenGrid::new(tokens)?, Tensor::new(z_e.shape(), z_q)?))
    }

    /// Sum of the selected codes, `[n, d]`.
    pub fn decode(&self, grid: &TokenGrid) -> Result<Tensor> {
        if grid.layers() != self.depth() {
            return Err(invalid!("grid has {} layers, stack {}", grid.layers(), self.depth()));
        }
        let (n, d) = (grid.len(), self.dim());
        let mut out = vec![0.0; n * d];
        for (cb, idx) in self.layers.iter().zip(&grid.tokens) {
            for (r, &k) in idx.iter().enumerate() {
                if k >= cb.size() {
                    return Err(Error::IndexOutOfRange { index: k, len: cb.size() });
                }
                for (o, e) in out[r * d..(r + 1) * d].iter_mut().zip(cb.entry(k)) {
                    *o += e;
                }
            }
        }
        Tensor::new(&[n, d], out)
    }

    /// Decode only the first `layers` layers of a grid.
    pub fn decode_prefix(&self, grid: &TokenGrid, layers: usize) -> Result<Tensor> {
        let mut g = grid.clone();
        g.tokens.truncate(layers.max(1));
        let stack = Self {
            layers: self.layers[..g.layers()].to_vec(),
            dropout_p: self.dropout_p,
        };
        stack.decode(&g)
    }

    /// Codebook entries as tape leaves.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.layers.iter().map(|c| tape.leaf(c.entries.clone())).collect()
    }

    /// Differentiable quantization of `z_e` (`[..., n, d]`; the second-to-last
    /// axis groups rows into samples for dropout).
    pub fn forward(&self, tape: &mut Tape, books: &[Var], z_e: Var, mode: Mode, rng: &mut Rng) -> Result<RvqForward> {
        let shape = tape.shape(z_e).to_vec();
        let value = tape.value(z_e).clone();
        let rows = self.check_rows(&value)?;
        if books.len() != self.depth() {
            return Err(invalid!("{} codebook vars for {} layers", books.len(), self.depth()));
        }
        let d = self.dim();
        let per = if shape.len() >= 3 { shape[shape.len() - 2] } else { rows };
        let samples = rows / per.max(1);
        let depth = tape.discrete(|| self.draw_depths(samples, mode, rng));
        let flat = tape.reshape(z_e, &[rows, d])?;
        let mut residual = flat;
        let mut acc: Option<Var> = None;
        let mut indices = Vec::with_capacity(self.depth());
        let mut residuals = Vec::with_capacity(self.depth());
        let mut codes = Vec::with_capacity(self.depth());
        let mut inputs = Vec::with_capacity(self.depth());
        for (layer, &book) in books.iter().enumerate() {
            let current = tape.value(residual).clone();
            let entries = tape.value(book).clone();
            let idx = tape.discrete(|| current.rows().map(|r| nearest(r, &entries)).collect());
            inputs.push(current);
            let q = tape.gather_rows(book, &idx)?;
            let keep: Vec<f64> = (0..rows)
                .map(|r| if layer <= depth[r / per] { 1.0 } else { 0.0 })
                .collect();
            let (q_kept, r_kept) = if keep.iter().all(|&k| k == 1.0) {
                (q, residual)
            } else {
                let m = tape.constant(Tensor::new(&[rows, 1], keep)?)?;
                (tape.mul(q, m)?, tape.mul(residual, m)?)
            };
            residuals.push(r_kept);
            codes.push(q_kept);
            acc = Some(match acc {
                None => q_kept,
                Some(a) => tape.add(a, q_kept)?,
            });
            let sq = tape.stop_gradient(q)?;
            residual = tape.sub(residual, sq)?;
            indices.push(idx);
        }
        let z_q_flat = acc.expect("at least one layer");
        let z_q = tape.reshape(z_q_flat, &shape)?;
        let gap = tape.sub(z_q, z_e)?;
        let gap = tape.stop_gradient(gap)?;
        let z_q_st = tape.add(z_e, gap)?;
        Ok(RvqForward {
            indices,
            depth,
            z_q,
            z_q_st,
            residuals,
            codes,
            inputs,
        })
    }
}

/// Mean over rows of the squared Euclidean distance between `a` and `b`
/// (rows run along every axis but the last).
pub fn row_sq_dist(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = *tape.shape(a).last().ok_or(Error::Empty("row_sq_dist"))?;
    let m = tape.mse(a, b)?;
    tape.scale(m, d as f64)
}

/// `‖sg[z_e] − z_q‖²`: moves codes toward the encoder output.
pub fn codebook_loss(tape: &mut Tape, z_e: Var, z_q: Var) -> Result<Var> {
    let s = tape.stop_gradient(z_e)?;
    row_sq_dist(tape, s, z_q)
}

/// `‖z_e − sg[z_q]‖²`: keeps the encoder close to its codes.
pub fn commitment_loss(tape: &mut Tape, z_e: Var, z_q: Var) -> Result<Var> {
    let s = tape.stop_gradient(z_q)?;
    row_sq_dist(tape, z_e, s)
}

/// `Σ_i ‖r_i − sg[q_i]‖²` over matched residual/code pairs.
pub fn commitment_loss_rq(tape: &mut Tape, residuals: &[Var], codes: &[Var]) -> Result<Var> {
    if residuals.len() != codes.len() {
        return Err(invalid!("{} residuals vs {} codes", residuals.len(), codes.len()));
    }
    let mut total = tape.scalar(0.0)?;
    for (&r, &q) in residuals.iter().zip(codes) {
        let sq = tape.stop_gradient(q)?;
        let term = row_sq_dist(tape, r, sq)?;
        total = tape.add(total, term)?;
    }
    Ok(total)
}

/// Steps since each code was last selected, per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeUsage {
    pub idle: Vec<Vec<u64>>,
}

impl CodeUsage {
    pub fn new(layers: usize, k: usize) -> Self {
        Self {
            idle: vec![vec![0; k]; layers],
        }
    }

    /// Advance one step, marking the codes selected in this step as used.
    pub fn record(&mut self, indices: &[Vec<usize>]) {
        for (idle, idx) in self.idle.iter_mut().zip(indices) {
            for v in idle.iter_mut() {
                *v += 1;
            }
            for &k in idx {
                idle[k] = 0;
            }
        }
    }

    /// Fraction of codes (all layers) used within the last `window` steps.
    pub fn active_fraction(&self, window: u64) -> f64 {
        let total: usize = self.idle.iter().map(Vec::len).sum();
        let used = self.idle.iter().flatten().filter(|&&v| v < window.max(1)).count();
        used as f64 / total.max(1) as f64
    }

    /// Re-seed codes idle for at least `window` steps with random rows of
    /// that layer's recent inputs (`candidates[layer]`, `[rows, d]`).
    /// `window == 0` disables resets. Returns the number of replaced codes.
    pub fn maintain(&mut self, stack: &mut RvqStack, window: u64, candidates: &[Tensor], rng: &mut Rng) -> usize {
        if window == 0 {
            return 0;
        }
        let mut replaced = 0;
        for ((idle, cb), cand) in self.idle.iter_mut().zip(&mut stack.layers).zip(candidates) {
            let rows = cand.numel() / cb.dim();
            if rows == 0 {
                continue;
            }
            for (k, v) in idle.iter_mut().enumerate() {
                if *v >= window {
                    let src = cand.data()[rng.below(rows) * cb.dim()..][..cb.dim()].to_vec();
                    let d = cb.dim();
                    cb.entries.data_mut()[k * d..(k + 1) * d].copy_from_slice(&src);
                    *v = 0;
                    replaced += 1;
                }
            }
        }
        replaced
    }
}

/// Initialize every layer from data: layer 0 from random rows of `z_e`, each
/// deeper layer from random residuals left by the layers above it.
pub fn init_from_data(stack: &mut RvqStack, z_e: &Tensor, rng: &mut Rng) -> Result<()> {
    let rows = stack.check_rows(z_e)?;
    let d = stack.dim();
    let mut residual = z_e.data().to_vec();
    for cb in &mut stack.layers {
        let k = cb.size();
        for code in 0..k {
            let r = rng.below(rows);
            for c in 0..d {
                // Small jitter keeps duplicates apart when rows < K.
                cb.entries.data_mut()[code * d + c] = residual[r * d + c] + 1e-3 * rng.normal();
            }
        }
        for r in 0..rows {
            let row = &mut residual[r * d..(r + 1) * d];
            let e = cb.entry(nearest(row, &cb.entries)).to_vec();
            for (x, y) in row.iter_mut().zip(e) {
                *x -= y;
            }
        }
    }
    Ok(())
}
