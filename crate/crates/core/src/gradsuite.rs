//! Registry of every training loss with a seeded finite-difference check.
//! Each entry builds small random instances of its loss and compares the
//! tape gradient against central differences on all differentiable inputs.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::gradcheck::{check, CheckConfig};
use crate::kcb::{Kcb, KcbConfig};
use crate::masked_gen::{loss_mt, loss_rt, mask_sample, GenConfig, GenModel, XfmrConfig};
use crate::motion::{MotionSequence, NormStats, SkeletonSpec};
use crate::nn::{Bound, ParamStore};
use crate::rng::Rng;
use crate::rvq::{commitment_loss_rq, Mode, RvqStack};
use crate::synth::SynthGenerator;
use crate::tcc::{cycle_cls_loss, cycle_loss, cycle_reg_huber_loss, cycle_reg_mse_loss, TccConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::text::TextConfig;
use crate::vqvae::{loss_vq_refined, stage1_objective, EncoderConfig, HyperParams, ModelConfig, TcasModel};

/// Outcome of one registered loss over all its instances.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub name: &'static str,
    pub module: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

type Runner = fn(&mut Rng, CheckConfig) -> Result<f64>;

#[derive(Debug, Clone, Copy)]
pub struct LossCheck {
    pub name: &'static str,
    pub module: &'static str,
    /// Probed coordinates per input tensor for this entry.
    pub max_coords: usize,
    run: Runner,
}

impl LossCheck {
    /// Run `instances` seeded instances; the worst relative error decides.
    pub fn run(&self, instances: usize, seed: u64, cfg: CheckConfig) -> Result<LossReport> {
        let cfg = CheckConfig {
            max_coords: Some(self.max_coords),
            ..cfg
        };
        let root = Rng::new(seed).split(fnv(self.name));
        let mut worst: f64 = 0.0;
        for k in 0..instances {
            let mut rng = root.split(k as u64);
            worst = worst.max((self.run)(&mut rng, cfg)?);
        }
        Ok(LossReport {
            name: self.name,
            module: self.module,
            instances,
            max_rel_error: worst,
            passed: worst <= cfg.tolerance,
        })
    }
}

fn fnv(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub fn registry() -> Vec<LossCheck> {
    vec![
        LossCheck {
            name: "vq",
            module: "rvq",
            max_coords: 64,
            run: vq,
        },
        LossCheck {
            name: "tcc_cls",
            module: "tcc",
            max_coords: 64,
            run: tcc_cls,
        },
        LossCheck {
            name: "tcc_reg_mse",
            module: "tcc",
            max_coords: 64,
            run: tcc_reg_mse,
        },
        LossCheck {
            name: "tcc_reg_huber",
            module: "tcc",
            max_coords: 64,
            run: tcc_reg_huber,
        },
        LossCheck {
            name: "tcc_multi_hop",
            module: "tcc",
            max_coords: 64,
            run: tcc_multi_hop,
        },
        LossCheck {
            name: "rq",
            module: "rvq",
            max_coords: 64,
            run: rq,
        },
        LossCheck {
            name: "vq_refined",
            module: "kcb",
            max_coords: 12,
            run: vq_refined,
        },
        LossCheck {
            name: "tcas_total",
            module: "tcas_vqvae",
            max_coords: 4,
            run: tcas_total,
        },
        LossCheck {
            name: "masked_mt",
            module: "masked_gen",
            max_coords: 6,
            run: masked_mt,
        },
        LossCheck {
            name: "residual_rt",
            module: "masked_gen",
            max_coords: 6,
            run: residual_rt,
        },
    ]
}

/// Entries matching `filter`: `all`, a module name, or a loss name.
pub fn select(filter: &str) -> Result<Vec<LossCheck>> {
    let all = registry();
    if filter == "all" {
        return Ok(all);
    }
    let picked: Vec<LossCheck> = all
        .into_iter()
        .filter(|c| c.name == filter || c.module == filter)
        .collect();
    if picked.is_empty() {
        return Err(invalid!("no registered loss or module named `{filter}`"));
    }
    Ok(picked)
}

fn vq(rng: &mut Rng, cfg: CheckConfig) -> Result<f64> {
    let stack = RvqStack::random(1, 6, 3, 0.0, rng)?;
    let inputs = vec![
        Tensor::randn(&[1, 8, 4], 1.0, rng),
        Tensor::randn(&[1, 8, 4], 1.0, rng),
        Tensor::randn(&[5, 3], 1.0, rng),
        stack.layers[0].entries.clone(),
    ];
    let gamma = rng.uniform_in(0.0, 1.0);
    let r = check(
        &inputs,
        |t, v| {
            let out = stack.forward(t, &v[3..], v[2], Mode::Eval, &mut Rng::new(0))?;
            Ok(loss_vq_refined(t, v[0], v[1], v[2], out.z_q, gamma)?.0)
        },
        cfg,
        rng,
    )?;
    Ok(r.max_rel_error)
}

fn pair(rng: &mut Rng) -> (usize, Vec<Tensor>) {
    let n = 3 + rng.below(5);
    (n, vec![Tensor::randn(&[n, 3], 0.6, rng), Tensor::randn(&[n, 3], 0.6, rng)])
}

fn tcc_cls(rng: &mut Rng, cfg: CheckConfig) -> Result<f64> {
    let (n, inputs) = pair(rng);
    let i = rng.below(n);
    Ok(check(&inputs, |t, v| cycle_cls_loss(t, v[0], v[1], i), cfg, rng)?.max_rel_error)
}

fn tcc_reg_mse(rng: &mut Rng, cfg: CheckConfig) -> Result<f64> {
    let (n, inputs) = pair(rng);
    let i = rng.below(n);
    let r = check(&inputs, |t, v| cycle_reg_mse_loss(t, v[0], v[1], i, 1e-3, 1e-4), cfg, rng)?;
    Ok(r.max_rel_error)
}

fn tcc_reg_huber(rng: &mut Rng, cfg: CheckConfig) -> Result<f64> {
    let (n, inputs) = pair(rng);
    let i = rng.below(n);
    let r = check(
        &inputs,
        |t, v| cycle_reg_huber_loss(t, v[0], v[1], i, 1e-3, 0.1, 1e-4),
        cfg,
        rng,
    )?;
    Ok(r.max_rel_error)
}

fn tcc_multi_hop(rng: &mut Rng, cfg: CheckConfig) -> Result<f64> {
    let tcc = TccConfig {
        cycle_length: 3,
        ..TccConfig::default()
    };
    let inputs: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[4, 2], 0.6, rng)).collect();
    Ok(check(&inputs, |t, v| cycle_loss(t, v, &[0, 1, 2, 3], &tcc), cfg, rng)?.max_rel_error)
}

fn rq(rng: &mut Rng, cfg: CheckConfig) -> Result<f64> {
    let stack = RvqStack::random(4, 6, 3, 0.0, rng)?;
    let mut inputs = vec![Tensor::randn(&[5, 3], 1.0, rng)];
    inputs.extend(stack.layers.iter().map(|c| c.entries.clone()));
    let r = check(
        &inputs,
        |t, v| {
            let out = stack.forward(t, &v[1..], v[0], Mode::Eval, &mut Rng::new(0))?;
            commitment_loss_rq(t, &out.residuals[1..], &out.codes[1..])
        },
        cfg,
        rng,
    )?;
    Ok(r.max_rel_error)
}

/// Short synthetic clips and their statistics, for losses that need real
/// kinematics.
fn synthetic(frames: usize, count: usize, rng: &mut Rng) -> Result<(SynthGenerator, NormStats, Vec<MotionSequence>)> {
    let g = SynthGenerator::default();
    let seqs: Vec<MotionSequence> = (0..count)
        .map(|k| g.generate((k % g.classes.len()) as u32, frames, rng))
        .collect::<Result<_>>()?;
    let norm = NormStats::compute(&seqs)?;
    Ok((g, norm, seqs))
}

fn small_kcb(skeleton: &SkeletonSpec) -> Result<KcbConfig> {
    Ok(KcbConfig {
        width: 8,
        heads: 2,
        pos_dim: 4,
        ..KcbConfig::for_skeleton(skeleton)?
    })
}

/// Replace the zero-initialized output projection so every block parameter
/// receives gradient.
fn wake_kcb(store: &mut ParamStore, rng: &mut Rng) {
    let wake: Vec<bool> = store.iter().map(|(name, _)| name.starts_with("kcb.out")).collect();
    for (value, w) in store.values_mut().zip(wake) {
        if w {
            let t = Tensor::randn(value.shape(), 0.3, rng);
            *value = t;
        }
    }
}

/// The attention key bias shifts every score of a query equally, so its
/// exact gradient is zero and differencing it only measures rounding noise.
/// It is held constant; every other parameter is checked.
fn is_frozen(name: &str) -> bool {
    name == "kcb.k.b"
}

fn checked_params(store: &ParamStore) -> Vec<Tensor> {
    store
        .iter()
        .filter(|(name, _)| !is_frozen(name))
        .map(|(_, t)| t.clone())
        .collect()
}

/// Bind `store` with the checked parameters taken from `vars` and the frozen
/// ones as constants.
fn bind_checked(store: &ParamStore, tape: &mut Tape, vars: &[Var]) -> Result<Bound> {
    let mut next = vars.iter();
    let mut all = Vec::with_capacity(store.len());
    for (name, t) in store.iter() {
        if is_frozen(name) {
            all.push(tape.constant(t.clone())?);
        } else {
            all.push(*next.next().ok_or_else(|| invalid!("too few checked parameters"))?);
        }
    }
    store.bind_vars(all)
}

fn vq_refined(rng: &mut Rng, cfg: CheckConfig) -> Result<f64> {
    let (g, norm, seqs) = synthetic(16, 4, rng)?;
    let d = norm.dim();
    let m_hat = norm.normalize_tensor(&seqs[0].frames)?;
    let noise = Tensor::randn(m_hat.shape(), 0.2, rng);
    let m_hat: Vec<f64> = m_hat.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
    let m = norm.normalize_tensor(&seqs[1].frames)?.reshape(&[1, 16, d])?;
    let mut store = ParamStore::new();
    let kcb = Kcb::new(&mut store, small_kcb(&g.skeleton)?, d, &g.skeleton, rng)?;
    wake_kcb(&mut store, rng);
    let stack = RvqStack::random(1, 6, 3, 0.0, rng)?;
    let mut inputs = vec![
        Tensor::new(&[1, 16, d], m_hat)?,
        Tensor::randn(&[4, 3], 1.0, rng),
        stack.layers[0].entries.clone(),
    ];
    inputs.extend(checked_params(&store));
    let r = check(
        &inputs,
        |t, v| {
            let p = bind_checked(&store, t, &v[3..])?;
            let out = kcb.correct(t, &p, v[0], &norm, &g.skeleton, &g.layout, g.fps)?;
            let q = stack.forward(t, &v[2..3], v[1], Mode::Eval, &mut Rng::new(0))?;
            let mv = t.constant(m.clone())?;
            Ok(loss_vq_refined(t, mv, out.corrected, v[1], q.z_q, 0.02)?.0)
        },
        cfg,
        rng,
    )?;
    Ok(r.max_rel_error)
}

fn tcas_total(rng: &mut Rng, cfg: CheckConfig) -> Result<f64> {
    let (g, norm, seqs) = synthetic(16, 8, rng)?;
    let d = norm.dim();
    let mut config = ModelConfig::desk(&g.skeleton)?;
    config.encoder = EncoderConfig {
        width: 6,
        downsample_ratio: 2,
        res_blocks: 1,
        ..EncoderConfig::default()
    };
    config.code_dim = 3;
    config.codebook_size = 6;
    config.quant_layers = 3;
    config.dropout_p = 0.5;
    config.kcb = small_kcb(&g.skeleton)?;
    let mut model = TcasModel::new(config, norm, g.skeleton.clone(), rng)?;
    wake_kcb(&mut model.store, rng);
    // Two same-class pairs: classes 0 and 1.
    let picks = [0usize, 4, 1, 5];
    let mut frames = Vec::with_capacity(4 * 16 * d);
    let mut labels = Vec::with_capacity(4);
    for &k in &picks {
        frames.extend_from_slice(model.norm.normalize_tensor(&seqs[k].frames)?.data());
        labels.push(seqs[k].category.unwrap_or(0));
    }
    let hyper = HyperParams {
        tcc: TccConfig {
            weight: 0.1,
            ..TccConfig::default()
        },
        ..HyperParams::default()
    };
    let params = checked_params(&model.store);
    let n_params = params.len();
    let mut inputs = vec![Tensor::new(&[4, 16, d], frames)?];
    inputs.extend(params);
    inputs.extend(model.rvq.layers.iter().map(|c| c.entries.clone()));
    let seed = rng.split(99);
    let r = check(
        &inputs,
        |t, v| {
            let p = bind_checked(&model.store, t, &v[1..1 + n_params])?;
            let books = &v[1 + n_params..];
            let mut local = seed.clone();
            Ok(stage1_objective(&model, t, &p, books, v[0], &labels, &hyper, &mut local)?.0)
        },
        cfg,
        rng,
    )?;
    Ok(r.max_rel_error)
}

fn tiny_gen() -> GenConfig {
    GenConfig {
        xfmr: XfmrConfig {
            layers: 1,
            heads: 2,
            d_model: 16,
            ff_mult: 2,
            vocab: 8,
            max_len: 16,
            max_text: 4,
        },
        text: TextConfig {
            dim: 16,
            ..TextConfig::default()
        },
        quant_layers: 3,
        cond_dropout: 0.0,
        guidance: 1.0,
    }
}

fn transformer_check(rng: &mut Rng, cfg: CheckConfig, residual: bool) -> Result<f64> {
    let model = GenModel::new(tiny_gen(), &mut rng.split(1))?;
    let prompt = model.embed_text("a person walks forward")?;
    let text = model.text_batch(&[Some(&prompt)])?;
    let grid: Vec<Vec<usize>> = (0..3).map(|_| (0..5).map(|_| rng.below(8)).collect()).collect();
    let (ids, mask) = mask_sample(&grid[0], 8, rng)?;
    let params: Vec<Tensor> = model.store.iter().map(|(_, t)| t.clone()).collect();
    let r = check(
        &params,
        |tape, vars| {
            let p = model.store.bind_vars(vars.to_vec())?;
            if residual {
                let l = model.residual_logits(tape, &p, &text, &[grid[..2].to_vec()], 2)?;
                loss_rt(tape, &[(2, l, &[grid[2].clone()])])
            } else {
                let l = model.base_logits(tape, &p, &text, &[ids.clone()])?;
                loss_mt(tape, l, &[grid[0].clone()], &[mask.clone()])
            }
        },
        cfg,
        rng,
    )?;
    Ok(r.max_rel_error)
}

fn masked_mt(rng: &mut Rng, cfg: CheckConfig) -> Result<f64> {
    transformer_check(rng, cfg, false)
}

fn residual_rt(rng: &mut Rng, cfg: CheckConfig) -> Result<f64> {
    transformer_check(rng, cfg, true)
}

