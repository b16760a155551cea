//! The batch commands behind the `motok` binary. Each returns its artifacts
//! so tests can drive them without spawning a process.

use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use motok_core::evaluator::Evaluator;
use motok_core::gradcheck::CheckConfig;
use motok_core::gradsuite::{select, LossReport};
use motok_core::kcb::detect_contacts;
use motok_core::masked_gen::{GenModel, Stage2Example, Stage2Log, Stage2Trainer};
use motok_core::metrics::{diversity, fid, mm_dist, mmodality, r_precision, GaussianStats};
use motok_core::motion::{fk_positions, FeatureLayout, MotionSequence, NormStats, SkeletonSpec};
use motok_core::vqvae::{trim, Stage1Trainer, StepLog, TcasModel, TrainError};
use motok_core::{Rng, Tensor};
use serde::Serialize;

use crate::checkpoint::{file_hash, gen_sections, vqvae_sections, GenCheckpoint, VqvaeCheckpoint};
use crate::config::RunConfig;
use crate::dataset::{self, load_dir, load_split, Manifest, Split};
use crate::error::{MotokError, Result};
use crate::motk;
use crate::report::{reconstruction_mse, same_class_tau, slide_raw_corrected, EvalReport};
use crate::tokens;

/// Final (or latest) checkpoints; periodic ones add `_stepNNNNNN`.
pub const VQVAE_CKPT: &str = "vqvae.ckpt";
pub const GEN_CKPT: &str = "gen.ckpt";
pub const VQVAE_LOG: &str = "vqvae_log.csv";
pub const GEN_LOG: &str = "gen_log.csv";
pub const LOCK: &str = ".motok.lock";

// Stream tags split from the root seed.
const TAG_MODEL: u64 = 1;
const TAG_STAGE1: u64 = 2;
const TAG_GEN_MODEL: u64 = 3;
const TAG_STAGE2: u64 = 4;
const TAG_EVALUATOR: u64 = 5;
const TAG_METRICS: u64 = 6;
const TAG_SAMPLES: u64 = 7;

/// Exclusive claim on an output directory for the lifetime of a command.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(MotokError::io(dir))?;
        let path = dir.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(MotokError::Locked(dir.to_path_buf())),
            Err(e) => Err(MotokError::Io { path, source: e }),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Parallelism cap from `MOTOK_THREADS`. Commands currently run on one
/// thread, so the cap only needs to be valid.
pub fn thread_cap() -> Result<usize> {
    match std::env::var("MOTOK_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(MotokError::Usage(format!("MOTOK_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}

fn log_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml()).map_err(MotokError::io(&path))?;
    eprintln!("config hash {}", cfg.hash());
    Ok(())
}

pub fn synth_data(cfg: &RunConfig) -> Result<Manifest> {
    let dir = cfg.data_dir();
    let _lock = DirLock::acquire(&dir)?;
    log_config(cfg, &dir)?;
    let manifest = dataset::synthesize(cfg)?;
    eprintln!("wrote {} sequences to {}", manifest.files.len(), dir.display());
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub steps: usize,
}

#[derive(Serialize)]
struct Stage1Row {
    step: usize,
    total: f64,
    recon: f64,
    codebook: f64,
    commit: f64,
    vq: f64,
    tcc: f64,
    tcc_weighted: f64,
    rq: f64,
    rq_weighted: f64,
    recon_mse: f64,
    code_usage: f64,
    codes_reset: usize,
    lr: f64,
    grad_norm: f64,
}

impl From<&StepLog> for Stage1Row {
    fn from(l: &StepLog) -> Self {
        Self {
            step: l.step,
            total: l.parts.total,
            recon: l.parts.recon,
            codebook: l.parts.codebook,
            commit: l.parts.commit,
            vq: l.parts.vq,
            tcc: l.parts.tcc,
            tcc_weighted: l.parts.tcc_weighted,
            rq: l.parts.rq,
            rq_weighted: l.parts.rq_weighted,
            recon_mse: l.recon_mse,
            code_usage: l.code_usage,
            codes_reset: l.codes_reset,
            lr: l.lr,
            grad_norm: l.grad_norm,
        }
    }
}

#[derive(Serialize)]
struct Stage2Row {
    step: usize,
    loss_mt: f64,
    loss_rt: f64,
    residual_layer: usize,
    masked_accuracy: f64,
    lr: f64,
    grad_norm: f64,
}

impl From<&Stage2Log> for Stage2Row {
    fn from(l: &Stage2Log) -> Self {
        Self {
            step: l.step,
            loss_mt: l.loss_mt,
            loss_rt: l.loss_rt,
            residual_layer: l.residual_layer,
            masked_accuracy: l.masked_accuracy,
            lr: l.lr,
            grad_norm: l.grad_norm,
        }
    }
}

/// Opens the CSV log. A fresh run truncates it; a resumed run keeps only
/// rows logged before the resumed step and appends after them.
fn open_log(path: &Path, resume_step: Option<usize>) -> Result<csv::Writer<File>> {
    let kept = match resume_step {
        Some(step) if path.exists() => {
            let text = std::fs::read_to_string(path).map_err(MotokError::io(path))?;
            let mut lines = text.lines();
            let header = lines.next().unwrap_or_default();
            let mut out = format!("{header}\n");
            for line in lines {
                let logged: Option<usize> = line.split(',').next().and_then(|s| s.parse().ok());
                if logged.is_some_and(|s| s < step) {
                    out.push_str(line);
                    out.push('\n');
                }
            }
            Some(out)
        }
        _ => None,
    };
    let file = File::create(path).map_err(MotokError::io(path))?;
    let mut builder = csv::WriterBuilder::new();
    if let Some(prefix) = kept {
        (&file).write_all(prefix.as_bytes()).map_err(MotokError::io(path))?;
        builder.has_headers(false);
    }
    Ok(builder.from_writer(file))
}

fn labelled(seqs: &[MotionSequence]) -> Result<()> {
    match seqs.iter().position(|s| s.category.is_none() || s.text.is_none()) {
        Some(i) => Err(MotokError::Usage(format!("training sequence {i} lacks a category or caption"))),
        None => Ok(()),
    }
}

fn diverged(out: &Path, err: TrainError) -> MotokError {
    match err {
        TrainError::Core(e) => e.into(),
        TrainError::NonFinite { step, what, batch, frames } => {
            let path = out.join("diverged.json");
            let dump = serde_json::json!({
                "step": step,
                "what": what,
                "batch": batch,
                "shape": frames.shape(),
                "frames": frames.data(),
            });
            let note = match std::fs::write(&path, dump.to_string()) {
                Ok(()) => format!("batch dumped to {}", path.display()),
                Err(e) => format!("could not dump batch: {e}"),
            };
            MotokError::Numeric(format!("non-finite {what} at step {step}; {note}"))
        }
    }
}

/// Stage-1 training of the tokenizer on the train split.
pub fn train_vqvae(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    let out = cfg.output();
    let _lock = DirLock::acquire(&out)?;
    log_config(cfg, &out)?;
    let train = load_split(&cfg.data_dir(), Split::Train)?.seqs;
    labelled(&train)?;
    let root = Rng::new(cfg.seed()?);
    let skeleton = SkeletonSpec::desk();
    let norm = NormStats::compute(&train)?;
    let model = TcasModel::new(cfg.model_config(&skeleton)?, norm, skeleton, &mut root.split(TAG_MODEL))?;
    let mut trainer = Stage1Trainer::new(model, cfg.hyper()?, &train, &root.split(TAG_STAGE1))?;
    if let Some(path) = resume {
        let ckpt = VqvaeCheckpoint::load(path)?;
        trainer.model = ckpt.model.clone();
        ckpt.restore_trainer(&mut trainer)?;
        eprintln!("resumed from {} at step {}", path.display(), trainer.step);
    }
    let log_path = out.join(VQVAE_LOG);
    let mut log = open_log(&log_path, resume.map(|_| trainer.step))?;
    let ckpt_path = out.join(VQVAE_CKPT);
    let every = cfg.int("train.checkpoint_every")?;
    while trainer.step < trainer.hyper.steps {
        let row = trainer.step_once().map_err(|e| diverged(&out, e))?;
        log.serialize(Stage1Row::from(&row))?;
        if row.step % 50 == 0 {
            eprintln!("step {:>6}  loss {:.4}  mse {:.4}  usage {:.2}", row.step, row.parts.total, row.recon_mse, row.code_usage);
        }
        if every > 0 && trainer.step % every == 0 && trainer.step < trainer.hyper.steps {
            log.flush().map_err(MotokError::io(&log_path))?;
            let sections = vqvae_sections(&trainer.model, cfg, Some(&trainer));
            sections.save(&out.join(format!("vqvae_step{:06}.ckpt", trainer.step)))?;
            sections.save(&ckpt_path)?;
        }
    }
    log.flush().map_err(MotokError::io(&log_path))?;
    vqvae_sections(&trainer.model, cfg, Some(&trainer)).save(&ckpt_path)?;
    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        log: log_path,
        steps: trainer.step,
    })
}

/// Token grids and captions of the train split under a trained tokenizer.
pub fn stage2_examples(model: &TcasModel, gen: &GenModel, seqs: &[MotionSequence]) -> Result<Vec<Stage2Example>> {
    seqs.iter()
        .map(|s| {
            let x = model.norm.normalize_tensor(&s.frames)?;
            let (grid, _) = model.tokenize(&x)?;
            let text = s.text.as_deref().ok_or_else(|| MotokError::Usage("training sequence lacks a caption".into()))?;
            Ok(Stage2Example {
                grid,
                text: gen.embed_text(text)?,
            })
        })
        .collect()
}

/// Stage-2 training of both transformers on tokens from `vqvae`.
pub fn train_gen(cfg: &RunConfig, vqvae: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    let out = cfg.output();
    let _lock = DirLock::acquire(&out)?;
    log_config(cfg, &out)?;
    let tok = VqvaeCheckpoint::load(vqvae)?;
    let tok_hash = file_hash(vqvae)?;
    let train = load_split(&cfg.data_dir(), Split::Train)?.seqs;
    labelled(&train)?;
    let root = Rng::new(cfg.seed()?);
    let m = &tok.model;
    let gen_cfg = cfg.gen_config(m.rvq.depth(), m.rvq.codebook_size())?;
    let model = GenModel::new(gen_cfg, &mut root.split(TAG_GEN_MODEL))?;
    let examples = stage2_examples(m, &model, &train)?;
    let mut trainer = Stage2Trainer::new(model, cfg.stage2()?, examples, &root.split(TAG_STAGE2))?;
    if let Some(path) = resume {
        let ckpt = GenCheckpoint::load(path)?;
        if ckpt.tokenizer != tok_hash {
            return Err(MotokError::Checkpoint(format!("{} was trained against a different tokenizer", path.display())));
        }
        trainer.model = ckpt.model.clone();
        ckpt.restore_trainer(&mut trainer)?;
        eprintln!("resumed from {} at step {}", path.display(), trainer.step);
    }
    let log_path = out.join(GEN_LOG);
    let mut log = open_log(&log_path, resume.map(|_| trainer.step))?;
    let ckpt_path = out.join(GEN_CKPT);
    let every = cfg.int("gen.checkpoint_every")?;
    while trainer.step < trainer.hyper.steps {
        let row = trainer.step_once().map_err(|e| match e {
            motok_core::Error::NonFinite { op } => MotokError::Numeric(format!("non-finite {op} at step {}", trainer.step)),
            other => other.into(),
        })?;
        log.serialize(Stage2Row::from(&row))?;
        if row.step % 50 == 0 {
            eprintln!("step {:>6}  mt {:.4}  rt {:.4}  acc {:.2}", row.step, row.loss_mt, row.loss_rt, row.masked_accuracy);
        }
        if every > 0 && trainer.step % every == 0 && trainer.step < trainer.hyper.steps {
            log.flush().map_err(MotokError::io(&log_path))?;
            let sections = gen_sections(&trainer.model, cfg, &tok_hash, Some(&trainer));
            sections.save(&out.join(format!("gen_step{:06}.ckpt", trainer.step)))?;
            sections.save(&ckpt_path)?;
        }
    }
    log.flush().map_err(MotokError::io(&log_path))?;
    gen_sections(&trainer.model, cfg, &tok_hash, Some(&trainer)).save(&ckpt_path)?;
    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        log: log_path,
        steps: trainer.step,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateArgs {
    pub vqvae: PathBuf,
    pub gen: PathBuf,
    pub prompts: PathBuf,
    /// Frames per motion; defaults to `gen.length`.
    pub length: Option<usize>,
    pub iters: Option<usize>,
    pub seed: u64,
    pub long: bool,
    /// Transition tokens between segments; defaults to `gen.transition`.
    pub transition: Option<usize>,
    pub out: PathBuf,
}

/// Prompts as UTF-8 text, one per line; blank lines are skipped.
pub fn read_prompts(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(MotokError::io(path))?;
    let prompts: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect();
    if prompts.is_empty() {
        return Err(MotokError::Usage(format!("{} holds no prompts", path.display())));
    }
    Ok(prompts)
}

/// Decodes a grid through the tokenizer (KCB applied when enabled) and
/// returns the motion trimmed to `frames`.
pub fn decode_motion(model: &TcasModel, grid: &motok_core::rvq::TokenGrid, frames: usize) -> Result<MotionSequence> {
    let (_, corrected) = model.decode_tokens(grid)?;
    let n = frames.min(corrected.shape()[0]);
    Ok(model.to_motion(&trim(&corrected, n)?)?)
}

/// Writes one `.motk` and one token file per prompt, or a single stitched
/// pair with `long`. Returns the written motion files.
pub fn generate(args: &GenerateArgs) -> Result<Vec<PathBuf>> {
    let tok = VqvaeCheckpoint::load(&args.vqvae)?;
    let gen = GenCheckpoint::load(&args.gen)?;
    if gen.tokenizer != file_hash(&args.vqvae)? {
        eprintln!("warning: {} was trained against a different tokenizer", args.gen.display());
    }
    let prompts = read_prompts(&args.prompts)?;
    let _lock = DirLock::acquire(&args.out)?;
    let model = &tok.model;
    let ratio = model.ratio();
    let length = match args.length {
        Some(l) => l,
        None => gen.config.int("gen.length")?,
    };
    let iters = match args.iters {
        Some(t) => t,
        None => gen.config.int("gen.iters")?,
    };
    if length == 0 || iters == 0 {
        return Err(MotokError::Usage("--length and --iters must be positive".into()));
    }
    let n = length.div_ceil(ratio);
    let joints = model.skeleton.joint_count() as u32;
    let k = model.rvq.codebook_size();
    let mut rng = Rng::new(args.seed).split(TAG_SAMPLES);
    let mut written = Vec::new();
    if args.long {
        let transition = match args.transition {
            Some(t) => t,
            None => gen.config.int("gen.transition")?,
        };
        let refs: Vec<&str> = prompts.iter().map(String::as_str).collect();
        let grid = gen.model.generate_long(&refs, &vec![n; refs.len()], transition, iters, &mut rng)?;
        let mut seq = decode_motion(model, &grid, grid.len() * ratio)?;
        seq.text = Some(prompts.join(" / "));
        let path = args.out.join("long.motk");
        motk::save(&path, &seq, joints)?;
        tokens::save(&args.out.join("long.tokens"), &grid, k)?;
        written.push(path);
    } else {
        for (i, prompt) in prompts.iter().enumerate() {
            let grid = gen.model.generate(prompt, n, iters, &mut rng)?;
            let mut seq = decode_motion(model, &grid, length)?;
            seq.text = Some(prompt.clone());
            let path = args.out.join(format!("gen_{i:03}.motk"));
            motk::save(&path, &seq, joints)?;
            tokens::save(&args.out.join(format!("gen_{i:03}.tokens")), &grid, k)?;
            written.push(path);
        }
    }
    eprintln!("wrote {} motion(s) to {}", written.len(), args.out.display());
    Ok(written)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalArgs {
    pub vqvae: PathBuf,
    pub gen: Option<PathBuf>,
    /// Directory of `.motk` motions to score against the real split.
    pub generated: Option<PathBuf>,
    pub split: Option<Split>,
}

fn features(ev: &Evaluator, seqs: &[MotionSequence]) -> Result<Tensor> {
    let frames: Vec<&Tensor> = seqs.iter().map(|s| &s.frames).collect();
    Ok(ev.motion_features(&frames)?)
}

fn captions(seqs: &[MotionSequence]) -> Option<Vec<&str>> {
    seqs.iter().map(|s| s.text.as_deref()).collect()
}

/// Scores candidate motions against the real split with a freshly trained
/// evaluator, and the tokenizer on the real split itself.
pub fn eval(cfg: &RunConfig, args: &EvalArgs) -> Result<EvalReport> {
    let tok = VqvaeCheckpoint::load(&args.vqvae)?;
    let gen = args.gen.as_deref().map(GenCheckpoint::load).transpose()?;
    let out = cfg.output();
    let _lock = DirLock::acquire(&out)?;
    log_config(cfg, &out)?;
    let split = match args.split {
        Some(s) => s,
        None => Split::parse(cfg.string("metrics.split"))?,
    };
    let data = cfg.data_dir();
    let train = load_split(&data, Split::Train)?.seqs;
    let real = load_split(&data, split)?.seqs;
    let seed = cfg.seed()?;
    let root = Rng::new(seed);
    let hash = cfg.hash();
    let model = &tok.model;

    let mut ev = Evaluator::new(cfg.evaluator()?, NormStats::compute(&train)?, &mut root.split(TAG_EVALUATOR))?;
    ev.fit(&train, &root.split(TAG_EVALUATOR).split(1))?;

    let mut sample_rng = root.split(TAG_SAMPLES);
    let (source, candidates) = if let Some(dir) = &args.generated {
        ("generated", load_dir(dir)?.seqs)
    } else if let Some(g) = &gen {
        let iters = cfg.int("gen.iters")?;
        let mut made = Vec::with_capacity(real.len());
        for s in &real {
            let prompt = s.text.as_deref().unwrap_or_default();
            let grid = g.model.generate(prompt, s.len().div_ceil(model.ratio()), iters, &mut sample_rng)?;
            let mut m = decode_motion(model, &grid, s.len())?;
            m.text = s.text.clone();
            made.push(m);
        }
        ("sampled", made)
    } else {
        let mut rec = Vec::with_capacity(real.len());
        for s in &real {
            let (_, cor) = model.reconstruct(&model.norm.normalize_tensor(&s.frames)?)?;
            let mut m = model.to_motion(&cor)?;
            m.text = s.text.clone();
            rec.push(m);
        }
        ("reconstructed", rec)
    };
    eprintln!("scoring {} {source} motions against {} real ({split:?})", candidates.len(), real.len());

    let mut report = EvalReport::default();
    let real_f = features(&ev, &real)?;
    let cand_f = features(&ev, &candidates)?;
    let fid_v = fid(&GaussianStats::from_features(&real_f)?, &GaussianStats::from_features(&cand_f)?)?;
    report.push("fid", fid_v, &hash, seed);
    let metric_rng = root.split(TAG_METRICS);
    if let Some(text) = captions(&candidates) {
        let text_f = ev.text_features(&text)?;
        let pool = cfg.int("metrics.pool")?;
        if candidates.len() >= pool {
            for k in 1..=cfg.int("metrics.top_k")? {
                let r = r_precision(&cand_f, &text_f, k, pool, &mut metric_rng.split(k as u64))?;
                report.push(&format!("r_precision_top{k}"), r, &hash, seed);
            }
        } else {
            eprintln!("r-precision skipped: {} motions, pool of {pool}", candidates.len());
        }
        report.push("mm_dist", mm_dist(&cand_f, &text_f, cfg.mm_mode()?)?, &hash, seed);
    }
    let pairs = cfg.int("metrics.diversity_pairs")?;
    report.push("diversity", diversity(&cand_f, pairs, &mut metric_rng.split(100))?, &hash, seed);
    report.push("diversity_real", diversity(&real_f, pairs, &mut metric_rng.split(101))?, &hash, seed);

    if let Some(g) = &gen {
        let samples = cfg.int("metrics.mmodality_samples")?;
        let mut prompts: Vec<&str> = Vec::new();
        for s in &real {
            if let Some(t) = s.text.as_deref() {
                if !prompts.contains(&t) {
                    prompts.push(t);
                }
            }
        }
        prompts.truncate(cfg.int("metrics.mmodality_prompts")?);
        let length = real.iter().map(MotionSequence::len).min().unwrap_or(0);
        let iters = cfg.int("gen.iters")?;
        let mut groups = Vec::new();
        for p in prompts {
            let mut seqs = Vec::with_capacity(samples);
            for _ in 0..samples {
                let grid = g.model.generate(p, length.div_ceil(model.ratio()), iters, &mut sample_rng)?;
                seqs.push(decode_motion(model, &grid, length)?);
            }
            groups.push(features(&ev, &seqs)?);
        }
        if !groups.is_empty() {
            report.push("mmodality", mmodality(&groups)?, &hash, seed);
        }
    }

    report.push("recon_mse", reconstruction_mse(model, &real)?, &hash, seed);
    let (tau, _) = same_class_tau(model, &real)?;
    report.push("kendall_tau", tau, &hash, seed);
    let mut raw = 0.0;
    let mut cor = 0.0;
    for s in &real {
        let (r, c) = slide_raw_corrected(model, s)?;
        raw += r;
        cor += c;
    }
    report.push("foot_slide_raw", raw / real.len() as f64, &hash, seed);
    report.push("foot_slide_corrected", cor / real.len() as f64, &hash, seed);

    let table = report.table();
    print!("{table}");
    let path = out.join("eval_report.txt");
    std::fs::write(&path, &table).map_err(MotokError::io(&path))?;
    let path = out.join("eval_report.csv");
    std::fs::write(&path, report.csv()?).map_err(MotokError::io(&path))?;
    Ok(report)
}

/// Runs the selected registered losses against finite differences.
pub fn gradcheck(filter: &str, instances: usize, seed: u64) -> Result<Vec<LossReport>> {
    let checks = select(filter).map_err(|e| MotokError::Usage(e.to_string()))?;
    let mut reports = Vec::with_capacity(checks.len());
    for c in checks {
        let r = c.run(instances, seed, CheckConfig::default())?;
        println!(
            "{:<14} {:<11} {:>3} instances  worst rel err {:.2e}  {}",
            r.name,
            r.module,
            r.instances,
            r.max_rel_error,
            if r.passed { "ok" } else { "FAILED" }
        );
        reports.push(r);
    }
    Ok(reports)
}

/// Writes the JSONL dump of a `.motk` file, with per-frame contact labels
/// when the file matches the built-in skeleton layout.
pub fn export(cfg: &RunConfig, input: &Path, output: &Path) -> Result<()> {
    let file = motk::load(input)?;
    let skeleton = SkeletonSpec::desk();
    let layout = FeatureLayout::for_skeleton(&skeleton);
    let contacts = if file.seq.dim() == layout.dim() && file.joints as usize == skeleton.joint_count() {
        let kcb = cfg.model_config(&skeleton)?.kcb;
        let pos = fk_positions(&file.seq, &skeleton, &layout)?;
        Some(detect_contacts(&pos, &skeleton.foot_joints, &kcb)?)
    } else {
        None
    };
    let text = motk::to_jsonl(&file.seq, contacts.as_ref())?;
    std::fs::write(output, text).map_err(MotokError::io(output))
}
