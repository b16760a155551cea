//! Checkpoint files: `MOTKCKPT`, a u32 format version and a u32 section
//! count, then named sections (`u32` name length, name, `u64` payload
//! length, payload). Every number is little-endian and every real is an
//! f64, so a reload reproduces the saved state bit for bit.
//!
//! Tensor sections hold a u32 count of `(name, rank, dims, data)` records.
//! The quantizer section holds a u32 layer count, then per layer `K`, `d`
//! and the `K·d` row-major entries.

use std::collections::BTreeMap;
use std::path::Path;

use motok_core::masked_gen::{GenModel, Stage2Trainer};
use motok_core::motion::{NormStats, SkeletonSpec};
use motok_core::nn::{Optimizer, ParamStore};
use motok_core::rvq::{Codebook, CodeUsage};
use motok_core::vqvae::{Stage1Trainer, TcasModel};
use motok_core::{Rng, Tensor};

use crate::config::RunConfig;
use crate::error::{MotokError, Result};

pub const MAGIC: &[u8; 8] = b"MOTKCKPT";
pub const VERSION: u32 = 1;

fn bad(why: impl Into<String>) -> MotokError {
    MotokError::Checkpoint(why.into())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Sections {
    entries: Vec<(String, Vec<u8>)>,
}

impl Sections {
    pub fn push(&mut self, name: &str, payload: Vec<u8>) {
        self.entries.push((name.to_string(), payload));
    }

    pub fn get(&self, name: &str) -> Result<&[u8]> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p.as_slice())
            .ok_or_else(|| bad(format!("missing section `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, payload) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(payload);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != MAGIC {
            return Err(MotokError::MalformedHeader("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(MotokError::MalformedHeader(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let len = r.u64()? as usize;
            entries.push((name, r.take(len)?.to_vec()));
        }
        r.finish()?;
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // Write then rename, so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.encode()).map_err(MotokError::io(&tmp))?;
        std::fs::rename(&tmp, path).map_err(MotokError::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path).map_err(MotokError::io(path))?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, at: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(MotokError::TruncatedPayload {
            expected: self.at.saturating_add(n),
            found: self.bytes.len(),
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| bad("length overflow"))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("name is not UTF-8"))
    }

    fn finish(&self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(bad(format!("{} trailing bytes", self.bytes.len() - self.at)));
        }
        Ok(())
    }
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_tensors<'a>(items: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let items: Vec<_> = items.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(&(items.len() as u32).to_le_bytes());
    for (name, t) in items {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        put_f64s(&mut out, t.data());
    }
    out
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader::new(bytes);
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("shape overflow"))?;
        let data = r.f64s(n)?;
        out.push((name, Tensor::new(&shape, data)?));
    }
    r.finish()?;
    Ok(out)
}

fn encode_codebooks(books: &[Codebook]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(books.len() as u32).to_le_bytes());
    for cb in books {
        out.extend_from_slice(&(cb.size() as u32).to_le_bytes());
        out.extend_from_slice(&(cb.dim() as u32).to_le_bytes());
        put_f64s(&mut out, cb.entries.data());
    }
    out
}

fn decode_codebooks(bytes: &[u8]) -> Result<Vec<Codebook>> {
    let mut r = Reader::new(bytes);
    let layers = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..layers {
        let (k, d) = (r.u32()? as usize, r.u32()? as usize);
        out.push(Codebook::new(Tensor::new(&[k, d], r.f64s(k * d)?)?)?);
    }
    r.finish()?;
    Ok(out)
}

fn encode_optimizer(opt: &Optimizer) -> Vec<u8> {
    let (first, second) = opt.state();
    let mut out = Vec::new();
    out.extend_from_slice(&(opt.step as u64).to_le_bytes());
    for buffers in [first, second] {
        out.extend_from_slice(&(buffers.len() as u32).to_le_bytes());
        for b in buffers {
            out.extend_from_slice(&(b.len() as u64).to_le_bytes());
            put_f64s(&mut out, b);
        }
    }
    out
}

fn restore_optimizer(opt: &mut Optimizer, bytes: &[u8]) -> Result<()> {
    let mut r = Reader::new(bytes);
    let step = r.u64()? as usize;
    let mut both = Vec::new();
    for _ in 0..2 {
        let n = r.u32()?;
        let mut buffers = Vec::new();
        for _ in 0..n {
            let len = r.u64()? as usize;
            buffers.push(r.f64s(len)?);
        }
        both.push(buffers);
    }
    r.finish()?;
    let second = both.pop().unwrap_or_default();
    let first = both.pop().unwrap_or_default();
    opt.set_state(step, first, second);
    Ok(())
}

fn encode_usage(usage: &CodeUsage) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(usage.idle.len() as u32).to_le_bytes());
    for layer in &usage.idle {
        out.extend_from_slice(&(layer.len() as u32).to_le_bytes());
        for v in layer {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode_usage(bytes: &[u8]) -> Result<CodeUsage> {
    let mut r = Reader::new(bytes);
    let layers = r.u32()?;
    let mut idle = Vec::new();
    for _ in 0..layers {
        let k = r.u32()?;
        idle.push((0..k).map(|_| r.u64()).collect::<Result<Vec<_>>>()?);
    }
    r.finish()?;
    Ok(CodeUsage { idle })
}

fn encode_norm(norm: &NormStats) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(norm.mean.len() as u32).to_le_bytes());
    put_f64s(&mut out, &norm.mean);
    put_f64s(&mut out, &norm.std);
    out
}

fn decode_norm(bytes: &[u8]) -> Result<NormStats> {
    let mut r = Reader::new(bytes);
    let d = r.u32()? as usize;
    let mean = r.f64s(d)?;
    let std = r.f64s(d)?;
    r.finish()?;
    Ok(NormStats { mean, std })
}

fn encode_step(step: usize) -> Vec<u8> {
    (step as u64).to_le_bytes().to_vec()
}

fn decode_step(bytes: &[u8]) -> Result<usize> {
    let mut r = Reader::new(bytes);
    let s = r.u64()? as usize;
    r.finish()?;
    Ok(s)
}

fn prefixed<'a>(store: &'a ParamStore, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor)> {
    store.iter().filter(move |(n, _)| n.starts_with(prefix))
}

fn check_kind(s: &Sections, kind: &str) -> Result<()> {
    let got = std::str::from_utf8(s.get("kind")?).map_err(|_| bad("kind is not UTF-8"))?;
    if got != kind {
        return Err(bad(format!("expected a {kind} checkpoint, found {got}")));
    }
    Ok(())
}

fn config_of(s: &Sections) -> Result<RunConfig> {
    let text = std::str::from_utf8(s.get("hyperparams")?).map_err(|_| bad("config is not UTF-8"))?;
    let mut cfg = RunConfig::defaults()?;
    cfg.merge_toml(text)?;
    Ok(cfg)
}

/// Stage-1 state. Optimizer and usage sections are present when saved from
/// a trainer.
pub fn vqvae_sections(model: &TcasModel, cfg: &RunConfig, trainer: Option<&Stage1Trainer>) -> Sections {
    let mut s = Sections::default();
    s.push("kind", b"vqvae".to_vec());
    s.push("hyperparams", cfg.canonical().into_bytes());
    s.push("encoder", encode_tensors(prefixed(&model.store, "enc.")));
    s.push("decoder", encode_tensors(prefixed(&model.store, "dec.")));
    s.push("kcb", encode_tensors(prefixed(&model.store, "kcb.")));
    s.push("rvq", encode_codebooks(&model.rvq.layers));
    s.push("norm", encode_norm(&model.norm));
    if let Some(t) = trainer {
        s.push("step", encode_step(t.step));
        s.push("optimizer", encode_optimizer(&t.optimizer));
        s.push("usage", encode_usage(&t.usage));
    }
    s
}

/// A stage-1 checkpoint: the model, its config and any trainer state.
#[derive(Debug, Clone)]
pub struct VqvaeCheckpoint {
    pub model: TcasModel,
    pub config: RunConfig,
    pub sections: Sections,
}

impl VqvaeCheckpoint {
    pub fn from_sections(sections: Sections) -> Result<Self> {
        check_kind(&sections, "vqvae")?;
        let config = config_of(&sections)?;
        let skeleton = SkeletonSpec::desk();
        let norm = decode_norm(sections.get("norm")?)?;
        let mut model = TcasModel::new(config.model_config(&skeleton)?, norm, skeleton, &mut Rng::new(0))?;
        let mut params = Vec::new();
        for name in ["encoder", "decoder", "kcb"] {
            params.extend(decode_tensors(sections.get(name)?)?);
        }
        model.store.load(params.iter().map(|(n, t)| (n.as_str(), t.clone())))?;
        let books = decode_codebooks(sections.get("rvq")?)?;
        if books.len() != model.rvq.layers.len() || books.iter().zip(&model.rvq.layers).any(|(a, b)| a.entries.shape() != b.entries.shape()) {
            return Err(bad("quantizer layout does not match the stored config"));
        }
        model.rvq.layers = books;
        Ok(Self { model, config, sections })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_sections(Sections::load(path)?)
    }

    pub fn step(&self) -> Result<usize> {
        decode_step(self.sections.get("step")?)
    }

    /// Restores optimizer, code usage and step counter into a trainer built
    /// over the same data and seed.
    pub fn restore_trainer(&self, trainer: &mut Stage1Trainer) -> Result<()> {
        restore_optimizer(&mut trainer.optimizer, self.sections.get("optimizer")?)?;
        let usage = decode_usage(self.sections.get("usage")?)?;
        if usage.idle.len() != trainer.usage.idle.len() {
            return Err(bad("code usage layout does not match the model"));
        }
        trainer.usage = usage;
        trainer.step = self.step()?;
        Ok(())
    }
}

pub fn gen_sections(model: &GenModel, cfg: &RunConfig, vqvae_hash: &str, trainer: Option<&Stage2Trainer>) -> Sections {
    let mut s = Sections::default();
    s.push("kind", b"gen".to_vec());
    s.push("hyperparams", cfg.canonical().into_bytes());
    s.push("tokenizer", vqvae_hash.as_bytes().to_vec());
    let shape = format!("vocab = {}\nquant_layers = {}\n", model.cfg.xfmr.vocab, model.cfg.quant_layers);
    s.push("shape", shape.into_bytes());
    s.push("base", encode_tensors(prefixed(&model.store, "mt.")));
    s.push("residual", encode_tensors(prefixed(&model.store, "rt.")));
    if let Some(t) = trainer {
        s.push("step", encode_step(t.step));
        s.push("optimizer", encode_optimizer(&t.optimizer));
    }
    s
}

#[derive(Debug, Clone)]
pub struct GenCheckpoint {
    pub model: GenModel,
    pub config: RunConfig,
    /// Hash of the tokenizer checkpoint the model was trained against.
    pub tokenizer: String,
    pub sections: Sections,
}

impl GenCheckpoint {
    pub fn from_sections(sections: Sections) -> Result<Self> {
        check_kind(&sections, "gen")?;
        let config = config_of(&sections)?;
        let shape: BTreeMap<String, usize> = toml::from_str(std::str::from_utf8(sections.get("shape")?).map_err(|_| bad("shape is not UTF-8"))?)
            .map_err(|e| bad(format!("shape section: {e}")))?;
        let field = |k: &str| shape.get(k).copied().ok_or_else(|| bad(format!("shape section lacks `{k}`")));
        let gen_cfg = config.gen_config(field("quant_layers")?, field("vocab")?)?;
        let mut model = GenModel::new(gen_cfg, &mut Rng::new(0))?;
        let mut params = decode_tensors(sections.get("base")?)?;
        params.extend(decode_tensors(sections.get("residual")?)?);
        model.store.load(params.iter().map(|(n, t)| (n.as_str(), t.clone())))?;
        let tokenizer = String::from_utf8(sections.get("tokenizer")?.to_vec()).map_err(|_| bad("tokenizer hash is not UTF-8"))?;
        Ok(Self {
            model,
            config,
            tokenizer,
            sections,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_sections(Sections::load(path)?)
    }

    pub fn step(&self) -> Result<usize> {
        decode_step(self.sections.get("step")?)
    }

    pub fn restore_trainer(&self, trainer: &mut Stage2Trainer) -> Result<()> {
        restore_optimizer(&mut trainer.optimizer, self.sections.get("optimizer")?)?;
        trainer.step = self.step()?;
        Ok(())
    }
}

/// sha256 of a file's bytes, hex encoded.
pub fn file_hash(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(MotokError::io(path))?;
    Ok(crate::config::hex(&Sha256::digest(&bytes)))
}
