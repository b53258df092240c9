use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use wattline_core::auth::PasswordHash;

const BIN: &str = env!("CARGO_BIN_EXE_wattline");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn exporter_config(dir: &Path, port: u16) -> PathBuf {
    let path = dir.join("wattline.yaml");
    let text = format!(
        "log_level: warn\nexporter:\n  listen_address: 127.0.0.1:{port}\n  fs_root: {}\n  collectors:\n    ipmi: false\n",
        dir.display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn get_status(port: u16, path: &str) -> std::io::Result<String> {
    use std::io::{Read, Write};
    let mut s = std::net::TcpStream::connect(("127.0.0.1", port))?;
    write!(s, "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n")?;
    let mut resp = String::new();
    s.read_to_string(&mut resp)?;
    Ok(resp.split_whitespace().nth(1).unwrap_or_default().to_string())
}

fn wait_for_exit(child: &mut Child, limit: Duration) -> Option<i32> {
    let start = Instant::now();
    while start.elapsed() < limit {
        if let Some(status) = child.try_wait().unwrap() {
            return status.code();
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    let _ = child.kill();
    None
}

#[test]
fn exporter_serves_health_and_stops_cleanly_on_sigterm() {
    let dir = tempfile::tempdir().unwrap();
    let port = free_port();
    let cfg = exporter_config(dir.path(), port);
    let mut child = Command::new(BIN)
        .args(["exporter", "--config", cfg.to_str().unwrap()])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let start = Instant::now();
    let status = loop {
        match get_status(port, "/health") {
            Ok(s) => break s,
            Err(_) if start.elapsed() < Duration::from_secs(20) => std::thread::sleep(Duration::from_millis(50)),
            Err(e) => {
                let _ = child.kill();
                panic!("exporter never answered: {e}");
            }
        }
    };
    assert_eq!(status, "200");
    let killed = Command::new("kill")
        .args(["-TERM", &child.id().to_string()])
        .status()
        .unwrap();
    assert!(killed.success());
    assert_eq!(wait_for_exit(&mut child, Duration::from_secs(10)), Some(0));
}

#[test]
fn busy_port_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let held = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = held.local_addr().unwrap().port();
    let cfg = exporter_config(dir.path(), port);
    let out = run(&["exporter", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(&port.to_string()), "{err}");
}

#[test]
fn listen_flag_wins_over_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let held = TcpListener::bind("127.0.0.1:0").unwrap();
    let cfg = exporter_config(dir.path(), free_port());
    let busy = held.local_addr().unwrap().to_string();
    let out = run(&["exporter", "--config", cfg.to_str().unwrap(), "--listen", &busy]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(&busy));
}

#[test]
fn config_errors_exit_with_status_one() {
    let dir = tempfile::tempdir().unwrap();
    let typo = dir.path().join("typo.yaml");
    std::fs::write(&typo, "exporter:\n  scrap_interval: 15\n").unwrap();
    let out = run(&["exporter", "--config", typo.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("scrap_interval"));

    let only_exporter = exporter_config(dir.path(), free_port());
    let out = run(&["gate", "--config", only_exporter.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gate"));

    let out = run(&["exporter", "--config", dir.path().join("absent.yaml").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));

    assert_eq!(run(&["exporter"]).status.code(), Some(1));
    assert_eq!(run(&["rules", "--profile", "nope"]).status.code(), Some(1));
}

#[test]
fn check_config_prints_the_redacted_form() {
    let docs = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../docs/wattline.yaml");
    let out = run(&["check-config", "--config", docs.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("registry:") && text.contains("gate:"));
    assert!(!text.contains("changeme"));
}

#[test]
fn rules_for_each_preset_match_the_golden_files() {
    let golden = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden");
    for name in wattline_cli::presets::PRESETS {
        let out = run(&["rules", "--profile", name]);
        assert_eq!(out.status.code(), Some(0), "{name}");
        let expected = std::fs::read_to_string(golden.join(format!("{name}.yaml"))).unwrap();
        assert_eq!(String::from_utf8(out.stdout).unwrap(), expected, "{name}");
    }
}

#[test]
fn hash_password_output_verifies() {
    let out = run(&["hash-password", "--password", "s3cret"]);
    assert_eq!(out.status.code(), Some(0));
    let line = String::from_utf8(out.stdout).unwrap();
    let hash = PasswordHash::parse(line.trim()).unwrap();
    assert!(hash.verify("s3cret"));
    assert!(!hash.verify("s3cre"));

    let mut child = Command::new(BIN)
        .arg("hash-password")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    use std::io::Write;
    child.stdin.take().unwrap().write_all(b"from-stdin\n").unwrap();
    let out = child.wait_with_output().unwrap();
    let hash = PasswordHash::parse(String::from_utf8(out.stdout).unwrap().trim()).unwrap();
    assert!(hash.verify("from-stdin"));
}
