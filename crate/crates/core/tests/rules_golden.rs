use std::path::PathBuf;

use wattline_core::rules::{generate_rule_file, NamingMap, DEFAULT_RATE_WINDOW};
use wattline_core::{Profile, RaplDomain};

fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(format!("{name}.yaml"))
}

fn check(name: &str, profile: Profile) {
    let text = generate_rule_file(name, &profile, &NamingMap::default(), DEFAULT_RATE_WINDOW).unwrap();
    let path = golden_path(name);
    if std::env::var_os("WATTLINE_BLESS").is_some() {
        std::fs::write(&path, &text).unwrap();
    }
    let want = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text, want, "rule file for `{name}` drifted from {}", path.display());
}

#[test]
fn cpu_dram_profile() {
    check(
        "cpu-dram",
        Profile::new(&[RaplDomain::CpuPackage, RaplDomain::Dram], false),
    );
}

#[test]
fn cpu_only_profile() {
    check("cpu-only", Profile::new(&[RaplDomain::CpuPackage], false));
}

#[test]
fn gpu_ipmi_profile() {
    check(
        "gpu-ipmi",
        Profile::new(&[RaplDomain::CpuPackage, RaplDomain::Dram], true),
    );
}
