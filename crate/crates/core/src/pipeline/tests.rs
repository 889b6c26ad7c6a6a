use super::*;
use crate::error::Error;

#[test]
fn empty_config_is_the_default() {
    assert_eq!(parse_config("", "x").unwrap(), RunConfig::default());
    assert_eq!(parse_config("  \n", "x").unwrap(), RunConfig::default());
    assert_eq!(parse_config("{}", "x").unwrap(), RunConfig::default());
}

#[test]
fn misspelled_key_is_named() {
    let err = parse_config(r#"{"training": {"epocs": 3}}"#, "cfg.json").unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Config(_)));
    assert!(msg.contains("epocs"), "{msg}");
    assert!(msg.contains("cfg.json"), "{msg}");
}

#[test]
fn resolved_echo_reparses_equal() {
    let cfg = parse_config(r#"{"seed": 7, "training": {"epochs": 3}}"#, "x").unwrap();
    assert_eq!(cfg.generator.seed, 7);
    assert_eq!(cfg.training.seed, 7);
    assert_eq!(cfg.negatives.seed, 7);
    let dir = tempfile::tempdir().unwrap();
    cfg.write_resolved(dir.path()).unwrap();
    let again = load_config(&dir.path().join(RESOLVED_CONFIG_FILE)).unwrap();
    assert_eq!(again, cfg);
    assert_eq!(again.digest(), cfg.digest());
    let digest = std::fs::read_to_string(dir.path().join(CONFIG_DIGEST_FILE)).unwrap();
    assert_eq!(digest.trim(), cfg.digest());
}

#[test]
fn invalid_values_name_their_key() {
    let msg = parse_config(r#"{"training": {"k_train": 2}}"#, "x").unwrap_err().to_string();
    assert!(msg.contains("training.k_train"), "{msg}");
    let msg = parse_config(r#"{"evaluation": {"k": 9}}"#, "x").unwrap_err().to_string();
    assert!(msg.contains("evaluation.k"), "{msg}");
    let msg = parse_config(r#"{"encoder": {"image_resolution": 32}}"#, "x").unwrap_err().to_string();
    assert!(msg.contains("encoder.image_resolution"), "{msg}");
}

#[test]
fn presets_validate() {
    RunConfig::preset("default").unwrap().validate().unwrap();
    RunConfig::preset("smoke").unwrap().validate().unwrap();
    assert!(RunConfig::preset("huge").is_err());
}

#[test]
fn variant_names_round_trip() {
    for v in Variant::ALL {
        assert_eq!(Variant::parse(v.as_str()).unwrap(), v);
    }
    assert!(Variant::parse("other").is_err());
    let cfg = RunConfig::default();
    assert_eq!(Variant::Plain.k_train(&cfg), 0);
    assert_eq!(Variant::HardNegative.k_train(&cfg), cfg.negatives.negatives_per_positive);
}

#[test]
fn staged_data_round_trips() {
    let mut cfg = RunConfig::smoke();
    cfg.generator.charts = 20;
    cfg.evaluation.eval_charts = 10;
    cfg.analysis.run_scaling = false;
    let dir = tempfile::tempdir().unwrap();
    generate_data(&cfg, dir.path()).unwrap();
    assert!(load_data(&cfg, dir.path()).is_err(), "negatives not yet synthesized");
    synthesize_data(&cfg, dir.path()).unwrap();
    let (train_set, eval_set) = load_data(&cfg, dir.path()).unwrap();
    assert_eq!(train_set.len(), 20);
    assert_eq!(eval_set.len(), 10);
    let mut other = cfg.clone();
    other.seed = 1;
    assert!(load_data(&other.resolved(), dir.path()).is_err());
}
