use motok::config::{split_overrides, RunConfig};
use motok::MotokError;
use motok_core::motion::SkeletonSpec;
use motok_core::tcc::TccVariant;

fn args(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

#[test]
fn defaults_validate_and_match_core() {
    let cfg = RunConfig::defaults().unwrap();
    cfg.validate().unwrap();
    let m = cfg.model_config(&SkeletonSpec::desk()).unwrap();
    assert_eq!(m.quant_layers, 6);
    assert_eq!(m.feature_dim, 56);
    let h = cfg.hyper().unwrap();
    assert_eq!(h.tcc.weight, 0.1);
    assert_eq!(h.tcc.variant, TccVariant::RegMse);
    assert_eq!(cfg.int("data.per_class").unwrap(), 50);
}

#[test]
fn unknown_keys_are_named() {
    let mut cfg = RunConfig::defaults().unwrap();
    let err = cfg.merge_toml("[tcc]\nwieght = 1.0\n").unwrap_err();
    assert!(matches!(&err, MotokError::UnknownKey(k) if k == "tcc.wieght"));
    assert!(err.to_string().contains("tcc.wieght"));
    assert_eq!(err.exit_code(), 2);
    assert!(matches!(cfg.set_str("nope", "1"), Err(MotokError::UnknownKey(_))));
}

#[test]
fn values_are_type_checked() {
    let mut cfg = RunConfig::defaults().unwrap();
    assert!(cfg.merge_toml("seed = \"x\"").is_err());
    assert!(cfg.set_str("train.steps", "ten").is_err());
    cfg.merge_toml("tcc.weight = 0").unwrap();
    assert_eq!(cfg.float("tcc.weight"), 0.0);
    cfg.set_str("data.classes", "walk, jump").unwrap();
    assert_eq!(cfg.list("data.classes"), vec!["walk", "jump"]);
}

#[test]
fn semantic_validation() {
    let err = RunConfig::resolve(None, &[("tcc.variant".into(), "softmax".into())]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(RunConfig::resolve(None, &[("train.downsample_ratio".into(), "3".into())]).is_err());
    assert!(RunConfig::resolve(None, &[("metrics.split".into(), "dev".into())]).is_err());
}

#[test]
fn hash_tracks_content_but_not_location() {
    let a = RunConfig::resolve(None, &[]).unwrap();
    let b = RunConfig::resolve(None, &[("output".into(), "elsewhere".into())]).unwrap();
    let c = RunConfig::resolve(None, &[("tcc.weight".into(), "0".into())]).unwrap();
    assert_eq!(a.hash(), b.hash());
    assert_ne!(a.hash(), c.hash());
    assert_eq!(a.hash().len(), 64);
    let canonical = a.canonical();
    let lines: Vec<&str> = canonical.lines().collect();
    let mut sorted = lines.clone();
    sorted.sort();
    assert_eq!(lines, sorted);
}

#[test]
fn resolved_config_reloads() {
    let a = RunConfig::resolve(None, &[("gen.lr".into(), "0.2".into()), ("output".into(), "o".into())]).unwrap();
    let mut b = RunConfig::defaults().unwrap();
    b.merge_toml(&a.to_toml()).unwrap();
    assert_eq!(a, b);
    let mut c = RunConfig::defaults().unwrap();
    c.merge_toml(&a.canonical()).unwrap();
    assert_eq!(a.hash(), c.hash());
}

#[test]
fn command_line_overrides() {
    let (rest, o) = split_overrides(args(&["motok", "train-vqvae", "--tcc.weight", "0", "--resume", "x", "--rvq.layers=1"])).unwrap();
    assert_eq!(rest, args(&["motok", "train-vqvae", "--resume", "x"]));
    assert_eq!(o, vec![("tcc.weight".into(), "0".into()), ("rvq.layers".into(), "1".into())]);
    assert!(split_overrides(args(&["motok", "--tcc.weight"])).is_err());
}
