//! Run configuration: a flat set of dotted keys read from a TOML file,
//! validated against a fixed schema and overridable from the command line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use motok_core::evaluator::EvaluatorConfig;
use motok_core::kcb::KcbConfig;
use motok_core::masked_gen::{GenConfig, Stage2Hyper, XfmrConfig};
use motok_core::metrics::MmMode;
use motok_core::motion::SkeletonSpec;
use motok_core::nn::OptimizerKind;
use motok_core::tcc::{TccConfig, TccVariant};
use motok_core::text::TextConfig;
use motok_core::vqvae::{Activation, EncoderConfig, HyperParams, ModelConfig};
use sha2::{Digest, Sha256};
use toml::Value;

use crate::error::{MotokError, Result};

/// Keys excluded from the config hash and from checkpoints, so identical
/// runs written to different places produce identical artifacts.
pub const LOCATION_KEYS: &[&str] = &["data.dir", "output"];

fn schema() -> Result<Vec<(&'static str, Value)>> {
    let skeleton = SkeletonSpec::desk();
    let model = ModelConfig::desk(&skeleton)?;
    let hyper = HyperParams::default();
    let tcc = TccConfig::default();
    let kcb = KcbConfig::for_skeleton(&skeleton)?;
    let x = XfmrConfig::default();
    let text = TextConfig::default();
    let s2 = Stage2Hyper::default();
    let ev = EvaluatorConfig::default();
    let int = |v: usize| Value::Integer(v as i64);
    let clip = |c: Option<f64>| Value::Float(c.unwrap_or(0.0));
    let classes = Value::Array(["walk", "walk-sit", "sit-stand", "jump"].map(|s| Value::String(s.into())).to_vec());
    Ok(vec![
        ("seed", Value::Integer(0)),
        ("output", Value::String("runs/default".into())),
        ("data.dir", Value::String("data/synth".into())),
        ("data.classes", classes),
        ("data.per_class", int(50)),
        ("data.length", int(64)),
        ("data.fps", Value::Float(model.fps)),
        ("rvq.layers", int(model.quant_layers)),
        ("rvq.codebook_size", int(model.codebook_size)),
        ("rvq.code_dim", int(model.code_dim)),
        ("rvq.dropout_p", Value::Float(model.dropout_p)),
        ("rvq.init_from_data", Value::Boolean(hyper.init_codebooks)),
        ("rvq.reset_window", int(hyper.reset_window as usize)),
        ("tcc.variant", Value::String(tcc.variant.name().into())),
        ("tcc.lambda", Value::Float(tcc.lambda)),
        ("tcc.delta", Value::Float(tcc.delta)),
        ("tcc.cycle_length", int(tcc.cycle_length)),
        ("tcc.weight", Value::Float(tcc.weight)),
        ("tcc.sigma_floor", Value::Float(tcc.sigma_floor)),
        ("kcb.enabled", Value::Boolean(model.kcb_enabled)),
        ("kcb.height_thresh", Value::Float(kcb.height_thresh)),
        ("kcb.speed_thresh", Value::Float(kcb.speed_thresh)),
        ("kcb.sigmoid_temp", Value::Float(kcb.sigmoid_temp)),
        ("kcb.heads", int(kcb.heads)),
        ("kcb.width", int(kcb.width)),
        ("kcb.pos_dim", int(kcb.pos_dim)),
        ("train.width", int(model.encoder.width)),
        ("train.downsample_ratio", int(model.encoder.downsample_ratio)),
        ("train.res_blocks", int(model.encoder.res_blocks)),
        ("train.activation", Value::String(model.encoder.activation.name().into())),
        ("train.gamma", Value::Float(hyper.gamma)),
        ("train.beta_r", Value::Float(hyper.beta_r)),
        ("train.optimizer", Value::String(hyper.optimizer.name().into())),
        ("train.lr", Value::Float(hyper.lr)),
        ("train.warmup_steps", int(hyper.warmup_steps)),
        ("train.grad_clip", clip(hyper.grad_clip)),
        ("train.batch", int(hyper.batch)),
        ("train.steps", int(hyper.steps)),
        ("train.window", int(hyper.window)),
        ("train.checkpoint_every", int(250)),
        ("gen.layers", int(x.layers)),
        ("gen.heads", int(x.heads)),
        ("gen.d_model", int(x.d_model)),
        ("gen.ff_mult", int(x.ff_mult)),
        ("gen.max_len", int(x.max_len)),
        ("gen.max_text", int(x.max_text)),
        ("gen.text_dim", int(text.dim)),
        ("gen.text_buckets", int(text.buckets)),
        ("gen.text_window", int(text.window)),
        ("gen.text_seed", Value::Integer(text.seed as i64)),
        ("gen.cond_dropout", Value::Float(0.0)),
        ("gen.guidance", Value::Float(1.0)),
        ("gen.optimizer", Value::String(s2.optimizer.name().into())),
        ("gen.lr", Value::Float(s2.lr)),
        ("gen.warmup_steps", int(s2.warmup_steps)),
        ("gen.grad_clip", clip(s2.grad_clip)),
        ("gen.batch", int(s2.batch)),
        ("gen.steps", int(s2.steps)),
        ("gen.checkpoint_every", int(500)),
        ("gen.iters", int(10)),
        ("gen.length", int(64)),
        ("gen.transition", int(2)),
        ("metrics.split", Value::String("test".into())),
        ("metrics.pool", int(32)),
        ("metrics.top_k", int(3)),
        ("metrics.diversity_pairs", int(300)),
        ("metrics.mmodality_prompts", int(4)),
        ("metrics.mmodality_samples", int(10)),
        ("metrics.mm_mode", Value::String("euclidean".into())),
        ("metrics.evaluator_width", int(ev.width)),
        ("metrics.evaluator_dim", int(ev.feature_dim)),
        ("metrics.evaluator_lr", Value::Float(ev.lr)),
        ("metrics.evaluator_batch", int(ev.batch)),
        ("metrics.evaluator_steps", int(ev.steps)),
    ])
}

/// Fully resolved configuration: every schema key has a value.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, Value>,
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

fn same_kind(expected: &Value, got: &Value) -> bool {
    matches!(
        (expected, got),
        (Value::Integer(_), Value::Integer(_))
            | (Value::Float(_), Value::Float(_) | Value::Integer(_))
            | (Value::Boolean(_), Value::Boolean(_))
            | (Value::String(_), Value::String(_))
            | (Value::Array(_), Value::Array(_))
    )
}

fn kind_name(v: &Value) -> &'static str {
    match v {
        Value::Integer(_) => "an integer",
        Value::Float(_) => "a number",
        Value::Boolean(_) => "a boolean",
        Value::String(_) => "a string",
        Value::Array(_) => "a list",
        _ => "a scalar",
    }
}

impl RunConfig {
    pub fn defaults() -> Result<Self> {
        Ok(Self {
            values: schema()?.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        })
    }

    /// Defaults overlaid with the optional file, then with `--key value`
    /// overrides in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::defaults()?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(MotokError::io(path))?;
            cfg.merge_toml(&text)?;
        }
        for (k, v) in overrides {
            cfg.set_str(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn merge_toml(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| MotokError::Config(e.message().to_string()))?;
        let mut flat = Vec::new();
        flatten("", &table, &mut flat);
        for (k, v) in flat {
            self.set(&k, v)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: Value) -> Result<()> {
        let slot = self.values.get_mut(key).ok_or_else(|| MotokError::UnknownKey(key.to_string()))?;
        if !same_kind(slot, &value) {
            return Err(MotokError::Config(format!("`{key}` must be {}", kind_name(slot))));
        }
        *slot = match (&*slot, value) {
            (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
            (_, v) => v,
        };
        Ok(())
    }

    /// Set from command-line text, interpreted by the key's type.
    pub fn set_str(&mut self, key: &str, raw: &str) -> Result<()> {
        let slot = self.values.get(key).ok_or_else(|| MotokError::UnknownKey(key.to_string()))?;
        let bad = || MotokError::Config(format!("`{key}` must be {}, got `{raw}`", kind_name(slot)));
        let value = match slot {
            Value::Integer(_) => Value::Integer(raw.parse().map_err(|_| bad())?),
            Value::Float(_) => Value::Float(raw.parse().map_err(|_| bad())?),
            Value::Boolean(_) => Value::Boolean(raw.parse().map_err(|_| bad())?),
            Value::Array(_) => Value::Array(
                raw.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| Value::String(s.to_string()))
                    .collect(),
            ),
            _ => Value::String(raw.to_string()),
        };
        self.set(key, value)
    }

    fn get(&self, key: &str) -> &Value {
        self.values.get(key).unwrap_or_else(|| panic!("`{key}` is not a schema key"))
    }

    pub fn int(&self, key: &str) -> Result<usize> {
        match self.get(key) {
            Value::Integer(i) if *i >= 0 => Ok(*i as usize),
            other => Err(MotokError::Config(format!("`{key}` must be a nonnegative integer, got {other}"))),
        }
    }

    pub fn seed(&self) -> Result<u64> {
        match self.get("seed") {
            Value::Integer(i) => Ok(*i as u64),
            other => Err(MotokError::Config(format!("`seed` must be an integer, got {other}"))),
        }
    }

    pub fn float(&self, key: &str) -> f64 {
        match self.get(key) {
            Value::Float(f) => *f,
            Value::Integer(i) => *i as f64,
            _ => f64::NAN,
        }
    }

    pub fn flag(&self, key: &str) -> bool {
        matches!(self.get(key), Value::Boolean(true))
    }

    pub fn string(&self, key: &str) -> &str {
        self.get(key).as_str().unwrap_or_default()
    }

    pub fn list(&self, key: &str) -> Vec<String> {
        match self.get(key) {
            Value::Array(a) => a.iter().filter_map(|v| v.as_str().map(str::to_string)).collect(),
            _ => Vec::new(),
        }
    }

    pub fn output(&self) -> PathBuf {
        PathBuf::from(self.string("output"))
    }

    pub fn data_dir(&self) -> PathBuf {
        PathBuf::from(self.string("data.dir"))
    }

    /// Builds every derived structure once so invalid combinations fail
    /// before any work starts.
    pub fn validate(&self) -> Result<()> {
        for (k, v) in &self.values {
            if let Value::Float(f) = v {
                if !f.is_finite() {
                    return Err(MotokError::Config(format!("`{k}` must be finite")));
                }
            }
        }
        self.seed()?;
        if self.list("data.classes").is_empty() {
            return Err(MotokError::Config("`data.classes` is empty".into()));
        }
        let skeleton = SkeletonSpec::desk();
        let model = self.model_config(&skeleton)?;
        model.encoder.validate()?;
        model.kcb.validate()?;
        self.hyper()?.validate()?;
        self.gen_config(model.quant_layers, model.codebook_size)?.validate()?;
        self.stage2()?;
        self.evaluator()?;
        self.mm_mode()?;
        match self.string("metrics.split") {
            "train" | "val" | "test" => Ok(()),
            other => Err(MotokError::Config(format!("`metrics.split` must be train, val or test, got `{other}`"))),
        }
    }

    /// Sorted `key = value` lines, with location keys left out.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            if !LOCATION_KEYS.contains(&k.as_str()) {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }

    /// Every key, location keys included, as a loadable TOML file.
    pub fn to_toml(&self) -> String {
        self.values.iter().map(|(k, v)| format!("\"{k}\" = {v}\n")).collect()
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn model_config(&self, skeleton: &SkeletonSpec) -> Result<ModelConfig> {
        let mut m = ModelConfig::desk(skeleton)?;
        m.encoder = EncoderConfig {
            width: self.int("train.width")?,
            downsample_ratio: self.int("train.downsample_ratio")?,
            res_blocks: self.int("train.res_blocks")?,
            activation: Activation::parse(self.string("train.activation"))?,
        };
        m.code_dim = self.int("rvq.code_dim")?;
        m.codebook_size = self.int("rvq.codebook_size")?;
        m.quant_layers = self.int("rvq.layers")?;
        m.dropout_p = self.float("rvq.dropout_p");
        m.kcb = KcbConfig {
            height_thresh: self.float("kcb.height_thresh"),
            speed_thresh: self.float("kcb.speed_thresh"),
            sigmoid_temp: self.float("kcb.sigmoid_temp"),
            heads: self.int("kcb.heads")?,
            width: self.int("kcb.width")?,
            pos_dim: self.int("kcb.pos_dim")?,
        };
        m.kcb_enabled = self.flag("kcb.enabled");
        m.fps = self.float("data.fps");
        if !(0.0..1.0).contains(&m.dropout_p) {
            return Err(MotokError::Config("`rvq.dropout_p` must be in [0, 1)".into()));
        }
        if m.codebook_size > u16::MAX as usize + 1 {
            return Err(MotokError::Config("`rvq.codebook_size` must fit 16-bit token indices".into()));
        }
        Ok(m)
    }

    pub fn tcc(&self) -> Result<TccConfig> {
        Ok(TccConfig {
            variant: TccVariant::parse(self.string("tcc.variant"))?,
            lambda: self.float("tcc.lambda"),
            delta: self.float("tcc.delta"),
            cycle_length: self.int("tcc.cycle_length")?,
            weight: self.float("tcc.weight"),
            sigma_floor: self.float("tcc.sigma_floor"),
        })
    }

    pub fn hyper(&self) -> Result<HyperParams> {
        let clip = self.float("train.grad_clip");
        Ok(HyperParams {
            gamma: self.float("train.gamma"),
            beta_r: self.float("train.beta_r"),
            tcc: self.tcc()?,
            optimizer: OptimizerKind::parse(self.string("train.optimizer"))?,
            lr: self.float("train.lr"),
            warmup_steps: self.int("train.warmup_steps")?,
            grad_clip: (clip > 0.0).then_some(clip),
            batch: self.int("train.batch")?,
            steps: self.int("train.steps")?,
            window: self.int("train.window")?,
            reset_window: self.int("rvq.reset_window")? as u64,
            init_codebooks: self.flag("rvq.init_from_data"),
        })
    }

    pub fn text(&self) -> Result<TextConfig> {
        Ok(TextConfig {
            dim: self.int("gen.text_dim")?,
            buckets: self.int("gen.text_buckets")?,
            window: self.int("gen.text_window")?,
            seed: self.seed_of("gen.text_seed")?,
        })
    }

    fn seed_of(&self, key: &str) -> Result<u64> {
        match self.get(key) {
            Value::Integer(i) => Ok(*i as u64),
            other => Err(MotokError::Config(format!("`{key}` must be an integer, got {other}"))),
        }
    }

    pub fn gen_config(&self, quant_layers: usize, codebook_size: usize) -> Result<GenConfig> {
        Ok(GenConfig {
            xfmr: XfmrConfig {
                layers: self.int("gen.layers")?,
                heads: self.int("gen.heads")?,
                d_model: self.int("gen.d_model")?,
                ff_mult: self.int("gen.ff_mult")?,
                vocab: codebook_size,
                max_len: self.int("gen.max_len")?,
                max_text: self.int("gen.max_text")?,
            },
            text: self.text()?,
            quant_layers,
            cond_dropout: self.float("gen.cond_dropout"),
            guidance: self.float("gen.guidance"),
        })
    }

    pub fn stage2(&self) -> Result<Stage2Hyper> {
        let clip = self.float("gen.grad_clip");
        let h = Stage2Hyper {
            optimizer: OptimizerKind::parse(self.string("gen.optimizer"))?,
            lr: self.float("gen.lr"),
            warmup_steps: self.int("gen.warmup_steps")?,
            grad_clip: (clip > 0.0).then_some(clip),
            batch: self.int("gen.batch")?,
            steps: self.int("gen.steps")?,
        };
        if h.batch == 0 || !(h.lr > 0.0) {
            return Err(MotokError::Config("`gen.batch` and `gen.lr` must be positive".into()));
        }
        Ok(h)
    }

    pub fn evaluator(&self) -> Result<EvaluatorConfig> {
        Ok(EvaluatorConfig {
            width: self.int("metrics.evaluator_width")?,
            feature_dim: self.int("metrics.evaluator_dim")?,
            text: self.text()?,
            lr: self.float("metrics.evaluator_lr"),
            batch: self.int("metrics.evaluator_batch")?,
            steps: self.int("metrics.evaluator_steps")?,
        })
    }

    pub fn mm_mode(&self) -> Result<MmMode> {
        match self.string("metrics.mm_mode") {
            "euclidean" => Ok(MmMode::Euclidean),
            "cosine" => Ok(MmMode::Cosine),
            other => Err(MotokError::Config(format!("`metrics.mm_mode` must be euclidean or cosine, got `{other}`"))),
        }
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Splits `--dotted.key value` and `--dotted.key=value` pairs out of raw
/// arguments. Returns the remaining arguments and the overrides in order.
pub fn split_overrides(args: impl IntoIterator<Item = String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(name) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (key, inline) = match name.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (name.to_string(), None),
        };
        if !key.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| MotokError::Usage(format!("--{key} needs a value")))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}
