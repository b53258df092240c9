//! Node power from IPMI-DCMI, rate limited.

use std::fmt;
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};

use parking_lot::Mutex;
use regex::Regex;
use wattline_core::Clock;

use crate::fs::FsSource;

pub const DEFAULT_MIN_INTERVAL_MS: i64 = 10_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodePowerReading {
    pub watts: f64,
    pub timestamp_ms: i64,
}

impl NodePowerReading {
    pub const SOURCE: &'static str = "ipmi_dcmi";
}

/// Extracts the wattage from `ipmitool dcmi power reading` style output.
pub fn parse_dcmi(text: &str) -> Option<f64> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"Instantaneous power reading:\s+(\d+)\s+Watts").unwrap());
    re.captures(text)?.get(1)?.as_str().parse().ok()
}

/// Where raw DCMI output comes from.
pub trait PowerSource: Send + Sync + fmt::Debug {
    fn fetch(&self) -> Result<String, String>;
}

/// Runs an external command, e.g. `ipmitool dcmi power reading`.
#[derive(Debug, Clone)]
pub struct CommandSource {
    pub program: String,
    pub args: Vec<String>,
}

impl PowerSource for CommandSource {
    fn fetch(&self) -> Result<String, String> {
        let out = Command::new(&self.program)
            .args(&self.args)
            .output()
            .map_err(|e| format!("{}: {e}", self.program))?;
        if !out.status.success() {
            return Err(format!("{} exited with {}", self.program, out.status));
        }
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    }
}

/// Replays a captured output file from the collector's filesystem.
pub struct FileSource {
    pub fs: Arc<dyn FsSource>,
    pub path: String,
}

impl fmt::Debug for FileSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FileSource").field("path", &self.path).finish()
    }
}

impl PowerSource for FileSource {
    fn fetch(&self) -> Result<String, String> {
        self.fs
            .read_to_string(&self.path)
            .map_err(|e| format!("{}: {e}", self.path))
    }
}

#[derive(Debug, Clone, Copy)]
struct Cached {
    attempted_at_ms: i64,
    reading: Option<NodePowerReading>,
}

/// Invokes the source at most once per `min_interval_ms` and serves the
/// last outcome in between. A failed read is cached as absent too.
#[derive(Debug)]
pub struct IpmiReader {
    source: Box<dyn PowerSource>,
    clock: Arc<dyn Clock>,
    min_interval_ms: i64,
    cache: Mutex<Option<Cached>>,
    invocations: AtomicU64,
}

impl IpmiReader {
    pub fn new(source: Box<dyn PowerSource>, clock: Arc<dyn Clock>, min_interval_ms: i64) -> Self {
        Self {
            source,
            clock,
            min_interval_ms,
            cache: Mutex::new(None),
            invocations: AtomicU64::new(0),
        }
    }

    pub fn read(&self) -> Option<NodePowerReading> {
        let now = self.clock.now_ms();
        let mut cache = self.cache.lock();
        if let Some(c) = *cache {
            let age = now - c.attempted_at_ms;
            if (0..self.min_interval_ms).contains(&age) {
                return c.reading;
            }
        }
        self.invocations.fetch_add(1, Ordering::Relaxed);
        let reading = match self.source.fetch() {
            Ok(text) => match parse_dcmi(&text) {
                Some(watts) => Some(NodePowerReading {
                    watts,
                    timestamp_ms: now,
                }),
                None => {
                    tracing::warn!("no instantaneous power reading in DCMI output");
                    None
                }
            },
            Err(e) => {
                tracing::warn!(error = %e, "DCMI power source failed");
                None
            }
        };
        *cache = Some(Cached {
            attempted_at_ms: now,
            reading,
        });
        reading
    }

    pub fn invocations(&self) -> u64 {
        self.invocations.load(Ordering::Relaxed)
    }
}
