//! A node's fixture tree rendered on demand from the trace. The instant
//! shown follows a clock, so an exporter over a [`SimFs`] sees the node
//! evolve as simulated time advances.

use std::io;
use std::path::Path;
use std::sync::Arc;

use wattline_collector::fs::{join, DirEntry, FsSource};
use wattline_core::{Clock, RaplDomain};

use crate::trace::{Trace, DRAM_RANGE_UJ, PACKAGE_RANGE_UJ};

pub const JOB_ROOT: &str = "sys/fs/cgroup/system.slice/slurmstepd.scope";
const POWERCAP: &str = "sys/class/powercap";

#[derive(Debug, Clone)]
enum When {
    Clock(Arc<dyn Clock>),
    Fixed(usize),
}

#[derive(Debug, Clone)]
pub struct SimFs {
    trace: Arc<Trace>,
    node: usize,
    when: When,
}

fn not_found(path: &str) -> io::Error {
    io::Error::new(io::ErrorKind::NotFound, path.to_string())
}

fn dir(name: &str) -> DirEntry {
    DirEntry {
        name: name.to_string(),
        is_dir: true,
    }
}

fn file(name: &str) -> DirEntry {
    DirEntry {
        name: name.to_string(),
        is_dir: false,
    }
}

impl SimFs {
    pub fn new(trace: Arc<Trace>, node: usize, clock: Arc<dyn Clock>) -> Self {
        Self {
            trace,
            node,
            when: When::Clock(clock),
        }
    }

    pub fn at_instant(trace: Arc<Trace>, node: usize, instant: usize) -> Self {
        let instant = instant.min(trace.last_instant);
        Self {
            trace,
            node,
            when: When::Fixed(instant),
        }
    }

    fn instant(&self) -> usize {
        match &self.when {
            When::Clock(c) => self.trace.instant_at(c.now_ms()),
            When::Fixed(k) => *k,
        }
    }

    fn has_rapl(&self) -> bool {
        !self.trace.nodes[self.node].profile.rapl_domains.is_empty()
    }

    fn has_dram(&self) -> bool {
        self.trace.nodes[self.node].has(RaplDomain::Dram)
    }

    fn job_dirs(&self, k: usize) -> Vec<DirEntry> {
        self.trace.nodes[self.node]
            .jobs
            .iter()
            .map(|&j| &self.trace.jobs[j])
            .filter(|j| j.present_at(k))
            .map(|j| dir(&format!("job_{}", j.unit.uuid)))
            .collect()
    }

    fn job_file(&self, k: usize, id: &str, name: &str) -> Option<String> {
        let node = &self.trace.nodes[self.node];
        let job = node
            .jobs
            .iter()
            .map(|&j| &self.trace.jobs[j])
            .find(|j| j.unit.uuid == id && j.present_at(k))?;
        match name {
            "cpu.stat" => {
                let u = job.usage_usec_at(k);
                Some(format!(
                    "usage_usec {u}\nuser_usec {}\nsystem_usec {}\n",
                    u - u / 10,
                    u / 10
                ))
            }
            "memory.current" => Some(format!("{}\n", job.memory_at(k))),
            _ => None,
        }
    }

    /// `socket` and whether it is the dram subzone, from a zone path.
    fn zone(&self, rest: &str) -> Option<(usize, bool, Option<String>)> {
        let sockets = self.trace.nodes[self.node].sockets as usize;
        let mut parts = rest.split('/');
        let s: usize = parts.next()?.strip_prefix("intel-rapl:")?.parse().ok()?;
        if s >= sockets {
            return None;
        }
        match (parts.next(), parts.next(), parts.next()) {
            (None, ..) => Some((s, false, None)),
            (Some(sub), tail, None) if sub == format!("intel-rapl:{s}:0") => {
                self.has_dram().then(|| (s, true, tail.map(str::to_string)))
            }
            (Some(name), None, None) => Some((s, false, Some(name.to_string()))),
            _ => None,
        }
    }

    fn read_file(&self, path: &str) -> Option<String> {
        let k = self.instant();
        let node = &self.trace.nodes[self.node];
        match path {
            "proc/stat" => {
                return Some(format!(
                    "cpu  {} 0 0 {} 0 0 0 0 0 0\n",
                    node.busy_ticks[k], node.idle_ticks[k]
                ))
            }
            "proc/meminfo" => {
                let total = node.memory_total_bytes / 1024;
                let avail = total - node.memory_used_bytes[k] / 1024;
                return Some(format!(
                    "MemTotal:       {total} kB\nMemFree:        {avail} kB\nMemAvailable:   {avail} kB\n"
                ));
            }
            "ipmi/dcmi_power_reading.txt" => {
                let w = node.ipmi_watts[k];
                return Some(format!(
                    "    Instantaneous power reading:              {w:>5} Watts\n    Power reading state is:                   activated\n"
                ));
            }
            "gpu/map" if node.gpus > 0 => {
                let mut out = String::new();
                for job in node
                    .jobs
                    .iter()
                    .map(|&j| &self.trace.jobs[j])
                    .filter(|j| j.present_at(k))
                {
                    for g in &job.unit.gpu_indices {
                        out.push_str(&format!("{} {g} {}\n", job.unit.uuid, gpu_uuid(&node.instance, *g)));
                    }
                }
                return Some(out);
            }
            "gpu/devices" if node.gpus > 0 => {
                let mut out = String::new();
                for g in 0..node.gpus as usize {
                    out.push_str(&format!(
                        "{g} {} {} {}\n",
                        gpu_uuid(&node.instance, g as u32),
                        node.gpu_power[k][g],
                        node.gpu_util[k][g]
                    ));
                }
                return Some(out);
            }
            _ => {}
        }
        if let Some(rest) = path.strip_prefix(JOB_ROOT).and_then(|r| r.strip_prefix('/')) {
            let (d, name) = rest.split_once('/')?;
            return self.job_file(k, d.strip_prefix("job_")?, name);
        }
        if let Some(rest) = path.strip_prefix(POWERCAP).and_then(|r| r.strip_prefix('/')) {
            if !self.has_rapl() {
                return None;
            }
            let (s, is_dram, name) = self.zone(rest)?;
            let (series, range, zone_name) = if is_dram {
                (&node.dram_uj, DRAM_RANGE_UJ, "dram".to_string())
            } else {
                (&node.package_uj, PACKAGE_RANGE_UJ, format!("package-{s}"))
            };
            return match name?.as_str() {
                "name" => Some(format!("{zone_name}\n")),
                "energy_uj" => Some(format!("{}\n", series[s][k] % range)),
                "max_energy_range_uj" => Some(format!("{range}\n")),
                _ => None,
            };
        }
        None
    }

    fn list(&self, path: &str) -> Option<Vec<DirEntry>> {
        let node = &self.trace.nodes[self.node];
        let entries = match path {
            "" => {
                let mut v = vec![dir("ipmi"), dir("proc"), dir("sys")];
                if node.gpus > 0 {
                    v.insert(0, dir("gpu"));
                }
                v
            }
            "sys" => vec![dir("class"), dir("fs")],
            "sys/fs" => vec![dir("cgroup")],
            "sys/fs/cgroup" => vec![dir("system.slice")],
            "sys/fs/cgroup/system.slice" => vec![dir("slurmstepd.scope")],
            JOB_ROOT => self.job_dirs(self.instant()),
            "sys/class" if self.has_rapl() => vec![dir("powercap")],
            POWERCAP if self.has_rapl() => (0..node.sockets).map(|s| dir(&format!("intel-rapl:{s}"))).collect(),
            "proc" => vec![file("meminfo"), file("stat")],
            "ipmi" => vec![file("dcmi_power_reading.txt")],
            "gpu" if node.gpus > 0 => vec![file("devices"), file("map")],
            _ => {
                if let Some(rest) = path.strip_prefix(JOB_ROOT).and_then(|r| r.strip_prefix('/')) {
                    let id = rest.strip_prefix("job_")?;
                    self.job_file(self.instant(), id, "cpu.stat")?;
                    return Some(vec![file("cpu.stat"), file("memory.current")]);
                }
                let rest = path.strip_prefix(POWERCAP)?.strip_prefix('/')?;
                if !self.has_rapl() {
                    return None;
                }
                let (s, is_dram, name) = self.zone(rest)?;
                if name.is_some() {
                    return None;
                }
                let mut v = vec![file("energy_uj"), file("max_energy_range_uj"), file("name")];
                if !is_dram && self.has_dram() {
                    v.insert(0, dir(&format!("intel-rapl:{s}:0")));
                }
                v
            }
        };
        Some(entries)
    }
}

pub fn gpu_uuid(instance: &str, index: u32) -> String {
    format!("GPU-{instance}-{index}")
}

impl FsSource for SimFs {
    fn read_to_string(&self, path: &str) -> io::Result<String> {
        let path = path.trim_matches('/');
        self.read_file(path).ok_or_else(|| not_found(path))
    }

    fn read_dir(&self, path: &str) -> io::Result<Vec<DirEntry>> {
        let path = path.trim_matches('/');
        self.list(path).ok_or_else(|| not_found(path))
    }
}

/// Copies every file of `fs` below `dest`.
pub fn write_tree(fs: &dyn FsSource, dest: &Path) -> io::Result<()> {
    fn walk(fs: &dyn FsSource, rel: &str, dest: &Path) -> io::Result<()> {
        for entry in fs.read_dir(rel)? {
            let path = join(rel, &entry.name);
            let target = dest.join(&path);
            if entry.is_dir {
                std::fs::create_dir_all(&target)?;
                walk(fs, &path, dest)?;
            } else {
                std::fs::write(&target, fs.read_to_string(&path)?)?;
            }
        }
        Ok(())
    }
    std::fs::create_dir_all(dest)?;
    walk(fs, "", dest)
}
