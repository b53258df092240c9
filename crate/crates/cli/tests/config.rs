use std::path::PathBuf;

use wattline_cli::{CliError, StackConfig, EXIT_CONFIG};

fn docs_file() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../docs/wattline.yaml")
}

#[test]
fn minimal_exporter_file_gets_defaults() {
    let cfg = StackConfig::parse("exporter: {}\n").unwrap();
    let e = cfg.exporter().unwrap();
    assert_eq!(e.listen_address, "0.0.0.0:9010");
    assert_eq!(e.fs_root, PathBuf::from("/"));
    assert!(e.collectors.cgroup && e.collectors.rapl && e.collectors.ipmi && e.collectors.gpumap);
    assert_eq!(e.ipmi.min_interval_seconds, 10);
    assert_eq!(cfg.log_level, "info");
    assert!(cfg.registry.is_none() && cfg.gate.is_none());
}

#[test]
fn typo_key_is_named() {
    let err = StackConfig::parse("exporter:\n  scrap_interval: 15\n")
        .unwrap_err()
        .to_string();
    assert!(err.contains("scrap_interval"), "{err}");
    assert!(err.contains("exporter"), "{err}");
    let top = StackConfig::parse("exportr: {}\n").unwrap_err().to_string();
    assert!(top.contains("exportr"), "{top}");
}

#[test]
fn type_mismatch_names_the_path() {
    let text = std::fs::read_to_string(docs_file())
        .unwrap()
        .replace("cutoff_seconds: 60", "cutoff_seconds: soon");
    let err = StackConfig::parse(&text).unwrap_err().to_string();
    assert!(err.contains("registry.cutoff_seconds"), "{err}");
}

#[test]
fn invalid_values_are_rejected() {
    let bad_url = std::fs::read_to_string(docs_file())
        .unwrap()
        .replace("url: http://127.0.0.1:9090\n  backup", "url: not a url\n  backup");
    assert!(StackConfig::parse(&bad_url).is_err());
    assert!(StackConfig::parse("log_level: loud\n").is_err());
    assert!(StackConfig::parse("exporter:\n  listen_address: nowhere\n").is_err());
}

#[test]
fn docs_file_loads_and_normalizes_to_the_golden_form() {
    let cfg = StackConfig::load(&docs_file()).unwrap();
    let normalized = cfg.normalized();
    let golden_path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/normalized.yaml");
    if std::env::var_os("WATTLINE_BLESS").is_some() {
        std::fs::write(&golden_path, &normalized).unwrap();
    }
    assert_eq!(normalized, std::fs::read_to_string(&golden_path).unwrap());
    assert_eq!(StackConfig::parse(&normalized).unwrap(), cfg);
    // Shared sections flow into the services that use them.
    let r = cfg.registry().unwrap();
    assert_eq!(r.emissions, cfg.emissions);
    assert_eq!(r.users, cfg.users);
    assert_eq!(cfg.gate().unwrap().users, cfg.users);
}

#[test]
fn redacted_form_hides_the_registry_password() {
    let cfg = StackConfig::load(&docs_file()).unwrap();
    assert!(cfg.normalized().contains("changeme"));
    assert!(!cfg.redacted().contains("changeme"));
}

#[test]
fn missing_section_is_named() {
    let cfg = StackConfig::parse("exporter: {}\n").unwrap();
    let err = cfg.gate().unwrap_err();
    assert!(matches!(err, CliError::MissingSection("gate")));
    assert_eq!(err.exit_code(), EXIT_CONFIG);
    assert!(err.to_string().contains("gate"));
}

#[test]
fn loading_has_no_side_effects() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("state").join("registry.db");
    let text = std::fs::read_to_string(docs_file())
        .unwrap()
        .replace("/var/lib/wattline/registry.db", db.to_str().unwrap());
    let path = dir.path().join("wattline.yaml");
    std::fs::write(&path, text).unwrap();
    let before: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    StackConfig::load(&path).unwrap();
    let after: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(before, after);
    assert!(!db.exists());
}
