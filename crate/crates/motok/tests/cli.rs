use std::path::Path;
use std::process::{Command, Output};

use motok::checkpoint::{file_hash, VqvaeCheckpoint};
use motok::dataset::{split_sizes, Manifest};
use motok::motk;
use motok::tokens;

const SMALL: &str = r#"
seed = 3
output = "run"

[data]
dir = "data"
per_class = 10
length = 32

[train]
steps = 20
batch = 4
window = 32
checkpoint_every = 10

[gen]
steps = 10
batch = 4
max_len = 16
length = 32

[metrics]
evaluator_steps = 20
evaluator_batch = 8
"#;

fn motok(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_motok"))
        .current_dir(dir)
        .env_remove("MOTOK_THREADS")
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "status {:?}\n{}", out.status, String::from_utf8_lossy(&out.stderr));
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    ok(&motok(dir.path(), &["--config", "c.toml", "synth-data"]));
    dir
}

fn motk_count(dir: &Path) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "motk"))
        .count()
}

#[test]
fn default_synth_data_manifest() {
    let dir = tempfile::tempdir().unwrap();
    ok(&motok(dir.path(), &["synth-data", "--data.dir", "a"]));
    ok(&motok(dir.path(), &["synth-data", "--data.dir", "b"]));
    let m = Manifest::load(&dir.path().join("a")).unwrap();
    assert_eq!(m.counts.len(), 4);
    assert!(m.counts.values().all(|&c| c == 50));
    assert_eq!(m.files.len(), 200);
    assert_eq!(motk_count(&dir.path().join("a")), m.files.len());
    assert_eq!(m.splits.values().sum::<usize>(), 200);
    let (train, val, test) = split_sizes(50);
    assert_eq!((train, val, test), (40, 2, 8));
    assert_eq!(m.splits.values().copied().collect::<Vec<_>>(), vec![4 * train, 4 * val, 4 * test]);
    for e in &m.files {
        assert_eq!(file_hash(&dir.path().join("a").join(&e.file)).unwrap(), e.sha256);
    }
    let b = std::fs::read_to_string(dir.path().join("b/manifest.json")).unwrap();
    assert_eq!(std::fs::read_to_string(dir.path().join("a/manifest.json")).unwrap(), b);
}

#[test]
fn config_errors_exit_2_with_the_key() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[data]\nper_clas = 3\n").unwrap();
    let out = motok(dir.path(), &["--config", "bad.toml", "synth-data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data.per_clas"));
    let out = motok(dir.path(), &["synth-data", "--tcc.wieght", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tcc.wieght"));
    assert_eq!(motok(dir.path(), &["no-such-command"]).status.code(), Some(2));
    let out = Command::new(env!("CARGO_BIN_EXE_motok"))
        .current_dir(dir.path())
        .env("MOTOK_THREADS", "0")
        .args(["gradcheck", "--module", "rq"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn training_pipeline_end_to_end() {
    let dir = setup();
    let d = dir.path();
    let out = motok(d, &["--config", "c.toml", "train-vqvae"]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("config hash"));
    let ckpt = VqvaeCheckpoint::load(&d.join("run/vqvae.ckpt")).unwrap();
    assert_eq!(ckpt.step().unwrap(), 20);
    let log = std::fs::read_to_string(d.join("run/vqvae_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 21);
    assert!(log.starts_with("step,total,recon"));
    assert!(d.join("run/config.toml").exists());
    assert!(!d.join("run/.motok.lock").exists());

    // A different TCC weight changes the trained weights.
    ok(&motok(d, &["--config", "c.toml", "train-vqvae", "--output", "no_tcc", "--tcc.weight", "0"]));
    assert_ne!(file_hash(&d.join("run/vqvae.ckpt")).unwrap(), file_hash(&d.join("no_tcc/vqvae.ckpt")).unwrap());

    ok(&motok(d, &["--config", "c.toml", "train-gen"]));
    assert!(d.join("run/gen.ckpt").exists());
    assert_eq!(std::fs::read_to_string(d.join("run/gen_log.csv")).unwrap().lines().count(), 11);

    std::fs::write(d.join("p.txt"), "a person walks forward\n\na person jumps\nsomeone sits down\n").unwrap();
    for out_dir in ["g1", "g2"] {
        ok(&motok(d, &["--config", "c.toml", "generate", "--prompts", "p.txt", "--seed", "9", "--iters", "5", "--out", out_dir]));
    }
    assert_eq!(motk_count(&d.join("g1")), 3);
    for i in 0..3 {
        let name = format!("gen_{i:03}.motk");
        assert_eq!(std::fs::read(d.join("g1").join(&name)).unwrap(), std::fs::read(d.join("g2").join(&name)).unwrap());
        let m = motk::load(&d.join("g1").join(&name)).unwrap().seq;
        assert_eq!(m.len(), 32);
        let (grid, k) = tokens::load(&d.join("g1").join(format!("gen_{i:03}.tokens"))).unwrap();
        assert_eq!((grid.layers(), grid.len(), k), (6, 8, 64));
    }

    ok(&motok(d, &["--config", "c.toml", "generate", "--prompts", "p.txt", "--long", "--transition", "2", "--out", "long"]));
    assert_eq!(motk_count(&d.join("long")), 1);
    let (grid, _) = tokens::load(&d.join("long/long.tokens")).unwrap();
    assert_eq!(grid.len(), 3 * 8 + 2 * 2);
    assert_eq!(motk::load(&d.join("long/long.motk")).unwrap().seq.len(), 4 * grid.len());

    // Scoring the real split against a copy of itself.
    std::fs::create_dir(d.join("same")).unwrap();
    let m = Manifest::load(&d.join("data")).unwrap();
    for e in m.files.iter().filter(|e| e.split == motok::dataset::Split::Test) {
        std::fs::copy(d.join("data").join(&e.file), d.join("same").join(&e.file)).unwrap();
    }
    let out = motok(d, &["--config", "c.toml", "eval", "--vqvae", "run/vqvae.ckpt", "--generated", "same", "--output", "ev"]);
    ok(&out);
    let csv = std::fs::read_to_string(d.join("ev/eval_report.csv")).unwrap();
    let fid_line = csv.lines().find(|l| l.starts_with("fid,")).unwrap();
    let fid: f64 = fid_line.split(',').nth(1).unwrap().parse().unwrap();
    assert!(fid.abs() < 1e-6, "{fid}");
    assert!(String::from_utf8_lossy(&out.stdout).contains("kendall_tau"));

    ok(&motok(d, &["--config", "c.toml", "eval", "--vqvae", "run/vqvae.ckpt", "--gen", "run/gen.ckpt", "--output", "ev2", "--metrics.mmodality_samples", "3"]));
    assert!(std::fs::read_to_string(d.join("ev2/eval_report.txt")).unwrap().contains("mmodality"));

    ok(&motok(d, &["export", "--input", "g1/gen_000.motk", "--out", "g.jsonl"]));
    let lines = std::fs::read_to_string(d.join("g.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 33);
    assert!(lines.lines().nth(1).unwrap().contains("contacts"));
}

#[test]
fn resume_continues_the_step_counter() {
    let dir = setup();
    let d = dir.path();
    ok(&motok(d, &["--config", "c.toml", "train-vqvae", "--output", "full"]));
    assert!(d.join("full/vqvae_step000010.ckpt").exists());
    std::fs::create_dir(d.join("resumed")).unwrap();
    std::fs::copy(d.join("full/vqvae_log.csv"), d.join("resumed/vqvae_log.csv")).unwrap();
    let out = motok(d, &["--config", "c.toml", "train-vqvae", "--output", "resumed", "--resume", "full/vqvae_step000010.ckpt"]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("at step 10"));
    let full_log = std::fs::read_to_string(d.join("full/vqvae_log.csv")).unwrap();
    let resumed_log = std::fs::read_to_string(d.join("resumed/vqvae_log.csv")).unwrap();
    let steps: Vec<usize> = resumed_log.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps, (0..20).collect::<Vec<_>>());
    assert_eq!(resumed_log, full_log);
    assert_eq!(std::fs::read(d.join("resumed/vqvae.ckpt")).unwrap(), std::fs::read(d.join("full/vqvae.ckpt")).unwrap());

    // Without an earlier log the resumed run logs from its own step on.
    let out = motok(d, &["--config", "c.toml", "train-vqvae", "--output", "fresh", "--resume", "full/vqvae_step000010.ckpt"]);
    ok(&out);
    let log = std::fs::read_to_string(d.join("fresh/vqvae_log.csv")).unwrap();
    assert!(log.lines().nth(1).unwrap().starts_with("10,"));
}

#[test]
fn missing_inputs_and_locks_exit_2() {
    let dir = setup();
    let d = dir.path();
    assert_eq!(motok(d, &["--config", "c.toml", "eval", "--vqvae", "missing.ckpt"]).status.code(), Some(2));
    std::fs::write(d.join("p.txt"), "walk\n").unwrap();
    let out = motok(d, &["--config", "c.toml", "generate", "--prompts", "p.txt", "--vqvae", "missing.ckpt", "--gen", "missing.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(motok(d, &["--config", "c.toml", "train-gen", "--vqvae", "missing.ckpt"]).status.code(), Some(2));
    std::fs::create_dir_all(d.join("run")).unwrap();
    std::fs::write(d.join("run/.motok.lock"), "1").unwrap();
    let out = motok(d, &["--config", "c.toml", "train-vqvae"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
}

#[test]
fn divergence_exits_3_with_a_dump() {
    let dir = setup();
    let d = dir.path();
    let out = motok(d, &["--config", "c.toml", "train-vqvae", "--train.lr", "1e200", "--train.grad_clip", "0"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let dump: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("run/diverged.json")).unwrap()).unwrap();
    assert!(dump["step"].as_u64().is_some());
    assert_eq!(dump["batch"].as_array().unwrap().len(), 4);
}

#[test]
fn gradcheck_single_module() {
    let dir = tempfile::tempdir().unwrap();
    let out = motok(dir.path(), &["gradcheck", "--module", "tcc", "--instances", "3"]);
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("tcc_reg_huber") && text.contains("0 failed"));
    assert_eq!(motok(dir.path(), &["gradcheck", "--module", "nothing"]).status.code(), Some(2));
    let positional = motok(dir.path(), &["gradcheck", "tcc", "--instances", "3"]);
    assert!(positional.status.success());
    assert_eq!(motok(dir.path(), &["gradcheck", "tcc", "--module", "rq"]).status.code(), Some(2));
}
