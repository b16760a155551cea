//! Deterministic hashed bag-of-words text embedding, a stand-in for a
//! pretrained text encoder. Any embedder producing [`TextEmbedding`] rows of
//! the model width can replace it.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    /// `[s, d_model]`, `s ≥ 1`.
    pub tokens: Tensor,
}

impl TextEmbedding {
    pub fn new(tokens: Tensor) -> Result<Self> {
        if tokens.rank() != 2 || tokens.shape()[0] == 0 || !tokens.all_finite() {
            return Err(invalid!("text embedding must be a finite nonempty [s, d] matrix"));
        }
        Ok(Self { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.last_dim()
    }

    /// Mean over positions.
    pub fn pooled(&self) -> Vec<f64> {
        let s = self.len() as f64;
        let mut out = alloc::vec![0.0; self.dim()];
        for r in self.tokens.rows() {
            for (o, v) in out.iter_mut().zip(r) {
                *o += v / s;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TextConfig {
    pub dim: usize,
    pub buckets: usize,
    /// Words summed into each position.
    pub window: usize,
    pub seed: u64,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            buckets: 1024,
            window: 2,
            seed: 0x7e47,
        }
    }
}

fn fnv1a(word: &str) -> u64 {
    word.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub fn words(prompt: &str) -> Vec<String> {
    prompt
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

#[derive(Debug, Clone)]
pub struct HashedText {
    cfg: TextConfig,
    projection: Tensor,
}

impl HashedText {
    pub fn new(cfg: TextConfig) -> Result<Self> {
        if cfg.dim == 0 || cfg.buckets == 0 || cfg.window == 0 {
            return Err(invalid!("text embedder needs positive dim, buckets and window"));
        }
        let projection = Tensor::randn(&[cfg.buckets, cfg.dim], 1.0, &mut Rng::new(cfg.seed));
        Ok(Self { cfg, projection })
    }

    pub fn config(&self) -> TextConfig {
        self.cfg
    }

    /// One row per word: the sum of the bucket rows of that word and the
    /// following `window − 1` words.
    pub fn embed(&self, prompt: &str) -> Result<TextEmbedding> {
        let ws = words(prompt);
        if ws.is_empty() {
            return Err(invalid!("empty prompt"));
        }
        let buckets: Vec<usize> = ws
            .iter()
            .map(|w| (fnv1a(w) % self.cfg.buckets as u64) as usize)
            .collect();
        let d = self.cfg.dim;
        let mut data = alloc::vec![0.0; ws.len() * d];
        for (t, row) in data.chunks_exact_mut(d).enumerate() {
            for &b in buckets.iter().skip(t).take(self.cfg.window) {
                for (o, v) in row.iter_mut().zip(self.projection.row(b)) {
                    *o += v;
                }
            }
        }
        TextEmbedding::new(Tensor::new(&[ws.len(), d], data)?)
    }
}
