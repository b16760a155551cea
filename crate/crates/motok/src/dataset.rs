//! Synthetic dataset directories: one `.motk` file per sequence plus a
//! `manifest.json` holding per-class counts, the split of every file and
//! its sha256.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use motok_core::motion::MotionSequence;
use motok_core::synth::SynthGenerator;
use motok_core::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::file_hash;
use crate::config::RunConfig;
use crate::error::{MotokError, Result};
use crate::motk;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(MotokError::Usage(format!("unknown split `{other}`"))),
        }
    }
}

/// Per-class split sizes: train `⌊0.8n⌋`, validation `⌊0.05n⌋`, the rest test.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 80 / 100;
    let val = n * 5 / 100;
    (train, val, n - train - val)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub class: String,
    pub split: Split,
    pub frames: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config_hash: String,
    pub classes: Vec<String>,
    pub counts: BTreeMap<String, usize>,
    pub splits: BTreeMap<Split, usize>,
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(MotokError::io(&path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Generates the dataset described by `cfg` into `data.dir`.
pub fn synthesize(cfg: &RunConfig) -> Result<Manifest> {
    let names = cfg.list("data.classes");
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut generator = SynthGenerator::with_classes(&refs)?;
    generator.fps = cfg.float("data.fps");
    let per_class = cfg.int("data.per_class")?;
    let length = cfg.int("data.length")?;
    if per_class == 0 {
        return Err(MotokError::Config("`data.per_class` must be positive".into()));
    }
    let dir = cfg.data_dir();
    std::fs::create_dir_all(&dir).map_err(MotokError::io(&dir))?;
    let root = Rng::new(cfg.seed()?).split(0x5e_9d);
    let joints = generator.skeleton.joint_count() as u32;
    let (n_train, n_val, _) = split_sizes(per_class);
    let mut files = Vec::new();
    let mut counts = BTreeMap::new();
    let mut splits = BTreeMap::new();
    for (c, name) in names.iter().enumerate() {
        let class_rng = root.split(c as u64);
        let mut order: Vec<usize> = (0..per_class).collect();
        class_rng.split(u64::MAX).shuffle(&mut order);
        let mut split_of = vec![Split::Test; per_class];
        for (rank, &i) in order.iter().enumerate() {
            split_of[i] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
        for (i, &split) in split_of.iter().enumerate() {
            let seq = generator.generate(c as u32, length, &mut class_rng.split(i as u64))?;
            let file = format!("{name}_{i:03}.motk");
            let path = dir.join(&file);
            motk::save(&path, &seq, joints)?;
            files.push(ManifestEntry {
                file,
                class: name.clone(),
                split,
                frames: seq.len(),
                sha256: file_hash(&path)?,
            });
            *splits.entry(split).or_insert(0) += 1;
        }
        counts.insert(name.clone(), per_class);
    }
    let manifest = Manifest {
        seed: cfg.seed()?,
        config_hash: cfg.hash(),
        classes: names,
        counts,
        splits,
        files,
    };
    let path = dir.join(MANIFEST);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(MotokError::io(&path))?;
    Ok(manifest)
}

/// A loaded split: sequences in manifest order with their file names.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub files: Vec<PathBuf>,
    pub seqs: Vec<MotionSequence>,
}

pub fn load_split(dir: &Path, split: Split) -> Result<SplitData> {
    let manifest = Manifest::load(dir)?;
    let mut files = Vec::new();
    let mut seqs = Vec::new();
    for e in manifest.files.iter().filter(|e| e.split == split) {
        let path = dir.join(&e.file);
        seqs.push(motk::load(&path)?.seq);
        files.push(path);
    }
    if seqs.is_empty() {
        return Err(MotokError::Usage(format!("split {split:?} of {} is empty", dir.display())));
    }
    Ok(SplitData { files, seqs })
}

/// Every `.motk` file directly inside `dir`, sorted by name.
pub fn load_dir(dir: &Path) -> Result<SplitData> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(MotokError::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "motk"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(MotokError::Usage(format!("no .motk files in {}", dir.display())));
    }
    let seqs = files.iter().map(|p| motk::load(p).map(|f| f.seq)).collect::<Result<_>>()?;
    Ok(SplitData { files, seqs })
}
