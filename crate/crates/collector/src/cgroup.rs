//! Per-workload CPU time and memory from cgroup v2 accounting files, plus
//! node totals from `proc/stat` and `proc/meminfo`.

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::fs::{join, FsSource};
use crate::CollectError;

pub const CGROUP_ROOT: &str = "sys/fs/cgroup";
/// Kernel clock ticks per second for `proc/stat`.
pub const USER_HZ: f64 = 100.0;
const MAX_DEPTH: usize = 8;

/// Directory naming scheme for workload cgroups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// `.../job_<id>/` directories holding `cpu.stat` and `memory.current`.
    #[default]
    Slurm,
}

impl Layout {
    fn workload_id<'a>(&self, dir_name: &'a str) -> Option<&'a str> {
        match self {
            Layout::Slurm => dir_name.strip_prefix("job_").filter(|id| !id.is_empty()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UsageSample {
    pub workload_id: String,
    pub cpu_time_seconds: f64,
    pub memory_bytes: f64,
    pub timestamp_ms: i64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CgroupReport {
    pub samples: Vec<UsageSample>,
    /// Workload directories whose files could not be read or parsed.
    pub skipped: usize,
}

pub fn collect_cgroup_usage(
    fs: &dyn FsSource,
    layout: Layout,
    timestamp_ms: i64,
) -> Result<CgroupReport, CollectError> {
    let top = fs
        .read_dir(CGROUP_ROOT)
        .map_err(|e| CollectError::Source(format!("{CGROUP_ROOT}: {e}")))?;
    let mut report = CgroupReport::default();
    let mut stack: Vec<(String, Vec<crate::fs::DirEntry>, usize)> = vec![(CGROUP_ROOT.to_string(), top, 0)];
    while let Some((dir, entries, depth)) = stack.pop() {
        for entry in entries.into_iter().filter(|e| e.is_dir) {
            let path = join(&dir, &entry.name);
            if let Some(id) = layout.workload_id(&entry.name) {
                match read_workload(fs, &path) {
                    Some((cpu, mem)) => report.samples.push(UsageSample {
                        workload_id: id.to_string(),
                        cpu_time_seconds: cpu,
                        memory_bytes: mem,
                        timestamp_ms,
                    }),
                    None => {
                        warn!(path = %path, "skipping unreadable workload cgroup");
                        report.skipped += 1;
                    }
                }
            } else if depth + 1 < MAX_DEPTH {
                if let Ok(children) = fs.read_dir(&path) {
                    stack.push((path, children, depth + 1));
                }
            }
        }
    }
    report.samples.sort_by(|a, b| a.workload_id.cmp(&b.workload_id));
    Ok(report)
}

fn read_workload(fs: &dyn FsSource, dir: &str) -> Option<(f64, f64)> {
    let stat = fs.read_to_string(&join(dir, "cpu.stat")).ok()?;
    let usec: u64 = stat.lines().find_map(|l| {
        let mut it = l.split_whitespace();
        (it.next() == Some("usage_usec")).then(|| it.next()?.parse().ok())?
    })?;
    let mem: u64 = fs
        .read_to_string(&join(dir, "memory.current"))
        .ok()?
        .trim()
        .parse()
        .ok()?;
    Some((usec as f64 / 1e6, mem as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeTotals {
    /// Busy CPU seconds summed over all cores (everything but idle and iowait).
    pub cpu_seconds: f64,
    /// `MemTotal - MemAvailable`, in bytes.
    pub memory_bytes: f64,
}

pub fn read_node_totals(fs: &dyn FsSource) -> Result<NodeTotals, CollectError> {
    let stat = fs
        .read_to_string("proc/stat")
        .map_err(|e| CollectError::Source(format!("proc/stat: {e}")))?;
    let line = stat
        .lines()
        .find(|l| l.split_whitespace().next() == Some("cpu"))
        .ok_or_else(|| CollectError::Parse("proc/stat has no aggregate cpu line".into()))?;
    let ticks: Vec<u64> = line
        .split_whitespace()
        .skip(1)
        .map(|t| t.parse())
        .collect::<Result<_, _>>()
        .map_err(|_| CollectError::Parse(format!("bad proc/stat line `{line}`")))?;
    if ticks.len() < 4 {
        return Err(CollectError::Parse(format!("short proc/stat line `{line}`")));
    }
    // guest and guest_nice are already counted in user and nice.
    let counted = &ticks[..ticks.len().min(8)];
    let idle = ticks[3] + ticks.get(4).copied().unwrap_or(0);
    let busy = counted.iter().sum::<u64>() - idle;

    let meminfo = fs
        .read_to_string("proc/meminfo")
        .map_err(|e| CollectError::Source(format!("proc/meminfo: {e}")))?;
    let field = |name: &str| -> Option<u64> {
        meminfo.lines().find_map(|l| {
            let rest = l.strip_prefix(name)?.strip_prefix(':')?;
            rest.split_whitespace().next()?.parse().ok()
        })
    };
    let total = field("MemTotal").ok_or_else(|| CollectError::Parse("MemTotal missing".into()))?;
    let available = field("MemAvailable").ok_or_else(|| CollectError::Parse("MemAvailable missing".into()))?;
    Ok(NodeTotals {
        cpu_seconds: busy as f64 / USER_HZ,
        memory_bytes: total.saturating_sub(available) as f64 * 1024.0,
    })
}
