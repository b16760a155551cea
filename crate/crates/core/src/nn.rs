//! Parameter storage, basic layers and the optimizer.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Index;

use crate::error::{invalid, Result};
use crate::rng::Rng;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named, ordered parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

/// Tape leaves for every parameter of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.values.iter_mut()
    }

    /// Replace every tensor from `(name, tensor)` pairs; names and shapes must
    /// match the existing layout exactly.
    pub fn load<'a>(&mut self, items: impl IntoIterator<Item = (&'a str, Tensor)>) -> Result<()> {
        let items: Vec<_> = items.into_iter().collect();
        if items.len() != self.values.len() {
            return Err(invalid!(
                "parameter count mismatch: expected {}, got {}",
                self.values.len(),
                items.len()
            ));
        }
        for (k, (name, t)) in items.into_iter().enumerate() {
            if name != self.names[k] || t.shape() != self.values[k].shape() {
                return Err(invalid!(
                    "parameter `{name}` {:?} does not match `{}` {:?}",
                    t.shape(),
                    self.names[k],
                    self.values[k].shape()
                ));
            }
            self.values[k] = t;
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.values.iter().map(|v| tape.leaf(v.clone())).collect())
    }

    /// Wrap existing tape variables (one per parameter, in store order).
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<Bound> {
        if vars.len() != self.values.len() {
            return Err(invalid!("{} vars for {} parameters", vars.len(), self.values.len()));
        }
        Ok(Bound(vars))
    }

    /// Gradients for every parameter in store order.
    pub fn grads(&self, bound: &Bound, grads: &Gradients) -> Vec<Tensor> {
        bound.0.iter().map(|&v| grads.get(v)).collect()
    }
}

fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = 1.0 / libm::sqrt(fan_in.max(1) as f64);
    Tensor::uniform(shape, -bound, bound, rng)
}

/// He-uniform, for weights feeding rectifiers.
fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = libm::sqrt(6.0 / fan_in.max(1) as f64);
    Tensor::uniform(shape, -bound, bound, rng)
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut Rng) -> Self {
        let w = store.add(alloc::format!("{name}.w"), fan_in_uniform(&[input, output], input, rng));
        let b = store.add(alloc::format!("{name}.b"), fan_in_uniform(&[output], input, rng));
        Self { w, b }
    }

    /// Weights and bias start at zero, so the layer initially outputs zeros.
    pub fn zeroed(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Self {
        let w = store.add(alloc::format!("{name}.w"), Tensor::zeros(&[input, output]));
        let b = store.add(alloc::format!("{name}.b"), Tensor::zeros(&[output]));
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.w])?;
        tape.add(y, p[self.b])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Conv1d {
    /// Scale the initial weights, e.g. by `sqrt(0.5)` for a layer not followed
    /// by a rectifier.
    pub fn with_gain(self, store: &mut ParamStore, gain: f64) -> Self {
        store.get_mut(self.w).data_mut().iter_mut().for_each(|v| *v *= gain);
        self
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        dilation: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan = cin * kernel;
        let w = store.add(alloc::format!("{name}.w"), he_uniform(&[kernel, cin, cout], fan, rng));
        let b = store.add(alloc::format!("{name}.b"), fan_in_uniform(&[cout], fan, rng));
        Self {
            w,
            b,
            stride,
            pad,
            dilation,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv1d(x, p[self.w], self.stride, self.pad, self.dilation)?;
        tape.add(y, p[self.b])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvTranspose1d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose1d {
    /// Scale the initial weights, e.g. by `sqrt(0.5)` for a layer not followed
    /// by a rectifier.
    pub fn with_gain(self, store: &mut ParamStore, gain: f64) -> Self {
        store.get_mut(self.w).data_mut().iter_mut().for_each(|v| *v *= gain);
        self
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan = cin * kernel / stride.max(1);
        let w = store.add(alloc::format!("{name}.w"), he_uniform(&[kernel, cin, cout], fan, rng));
        let b = store.add(alloc::format!("{name}.b"), fan_in_uniform(&[cout], fan, rng));
        Self { w, b, stride, pad }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv_transpose1d(x, p[self.w], self.stride, self.pad)?;
        tape.add(y, p[self.b])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(alloc::format!("{name}.gain"), Tensor::full(&[dim], 1.0));
        let bias = store.add(alloc::format!("{name}.bias"), Tensor::zeros(&[dim]));
        Self { gain, bias }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.gain], p[self.bias], 1e-5)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, count: usize, dim: usize, rng: &mut Rng) -> Self {
        let table = store.add(alloc::format!("{name}.table"), Tensor::randn(&[count, dim], 0.5, rng));
        Self { table }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, idx: &[usize]) -> Result<Var> {
        tape.gather_rows(p[self.table], idx)
    }
}

/// Sinusoidal position code `[len, dim]`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * dim);
    for t in 0..len {
        for k in 0..dim {
            let freq = libm::pow(100.0, -((k / 2 * 2) as f64) / dim as f64);
            let a = t as f64 * freq;
            data.push(if k % 2 == 0 { libm::sin(a) } else { libm::cos(a) });
        }
    }
    Tensor::new(&[len, dim], data).expect("positions shape")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    /// Heavy-ball momentum.
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "sgd" => Ok(Self::Sgd { momentum: 0.9 }),
            "adam" => Ok(Self::Adam {
                beta1: 0.9,
                beta2: 0.99,
                eps: 1e-8,
            }),
            other => Err(invalid!("unknown optimizer `{other}`")),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Sgd { .. } => "sgd",
            Self::Adam { .. } => "adam",
        }
    }
}

/// First-order optimizer with a cosine-decayed step size and optional
/// global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub grad_clip: Option<f64>,
    pub step: usize,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, total_steps: usize) -> Self {
        Self {
            kind,
            lr,
            total_steps,
            warmup_steps: 0,
            grad_clip: None,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn learning_rate(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let frac = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.lr * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * frac))
    }

    /// Moment buffers, flattened in parameter order (for checkpoints).
    pub fn state(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first, &self.second)
    }

    pub fn set_state(&mut self, step: usize, first: Vec<Vec<f64>>, second: Vec<Vec<f64>>) {
        self.step = step;
        self.first = first;
        self.second = second;
    }

    /// Apply one update. Returns the pre-clipping global gradient norm.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<f64> {
        if params.len() != grads.len() {
            return Err(invalid!("optimizer: {} params vs {} grads", params.len(), grads.len()));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.second = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            }
        }
        let norm = libm::sqrt(
            grads
                .iter()
                .flat_map(|g| g.data().iter())
                .map(|v| v * v)
                .sum::<f64>(),
        );
        let clip = match self.grad_clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let lr = self.learning_rate(self.step);
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                for ((p, g), m) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((w, &gv), mv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()) {
                        *mv = momentum * *mv + gv * clip;
                        *w -= lr * *mv;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - libm::pow(beta1, t as f64);
                let c2 = 1.0 - libm::pow(beta2, t as f64);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for (((w, &gv), mv), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        let gc = gv * clip;
                        *mv = beta1 * *mv + (1.0 - beta1) * gc;
                        *vv = beta2 * *vv + (1.0 - beta2) * gc * gc;
                        *w -= lr * (*mv / c1) / (libm::sqrt(*vv / c2) + eps);
                    }
                }
            }
        }
        Ok(norm)
    }
}
