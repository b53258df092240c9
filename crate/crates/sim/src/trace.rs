//! Forward model: per-job activity drives node power, and every value an
//! exporter can see is quantized the way the kernel and BMC quantize it
//! (microsecond cgroup counters, 10 ms `proc/stat` ticks, kB meminfo,
//! integer-µJ RAPL counters, integer-watt DCMI readings).

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use wattline_core::workload::ResourceManager;
use wattline_core::{Profile, RaplDomain, WorkloadUnit};

use crate::spec::ClusterSpec;
use crate::SimError;

pub const PACKAGE_RANGE_UJ: u64 = 262_143_328_850;
pub const DRAM_RANGE_UJ: u64 = 65_712_999_613;
pub const GIB: f64 = 1_073_741_824.0;
pub const FIRST_JOB_ID: u64 = 100_000;

const OTHER_IDLE_W: f64 = 80.0;
const PACKAGE_IDLE_W_PER_SOCKET: f64 = 35.0;
const WATTS_PER_BUSY_CORE: f64 = 5.5;
const DRAM_IDLE_W_PER_SOCKET: f64 = 4.0;
const DRAM_WATTS_PER_GIB: f64 = 0.375;
pub const GPU_IDLE_W: u32 = 50;
pub const GPU_MAX_W: u32 = 300;
const OS_MEMORY_BYTES: f64 = 8.0 * GIB;
const MEMORY_PER_CPU: u64 = 4 << 30;
const CPU_CHOICES: [u32; 5] = [1, 2, 4, 8, 16];

/// Attributed power of one job at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AttributedSample {
    pub watts: f64,
    pub cpu_watts: f64,
    pub dram_watts: f64,
    pub network_watts: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobTrace {
    pub unit: WorkloadUnit,
    pub node: usize,
    /// Instant at which the cgroup appears (usage 0, memory 0).
    pub start: usize,
    /// Last instant at which the cgroup exists.
    pub end: usize,
    pub short: bool,
    /// Cumulative `usage_usec` at instants `start..=end`.
    pub usage_usec: Vec<u64>,
    /// Memory charged during intervals `start+1..=end`.
    pub memory_bytes: Vec<u64>,
    /// GPU utilization during intervals `start+1..=end`; empty without GPUs.
    pub gpu_util: Vec<f64>,
    /// Forward-model power during intervals `start+1..=end`.
    pub true_watts: Vec<f64>,
    /// Attribution at instants `start+1..=end`; filled by [`crate::truth`].
    pub attributed: Vec<AttributedSample>,
}

impl JobTrace {
    pub fn present_at(&self, k: usize) -> bool {
        self.start <= k && k <= self.end
    }

    /// True when the job is counted in the interval ending at `k`.
    pub fn active_in(&self, k: usize) -> bool {
        self.start < k && k <= self.end
    }

    pub fn usage_usec_at(&self, k: usize) -> u64 {
        self.usage_usec[k - self.start]
    }

    pub fn memory_at(&self, k: usize) -> u64 {
        if k == self.start {
            0
        } else {
            self.memory_bytes[k - self.start - 1]
        }
    }

    pub fn cpu_usec_in(&self, k: usize) -> u64 {
        self.usage_usec[k - self.start] - self.usage_usec[k - self.start - 1]
    }

    pub fn gpu_util_in(&self, k: usize) -> f64 {
        if self.active_in(k) && !self.gpu_util.is_empty() {
            self.gpu_util[k - self.start - 1]
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeTrace {
    pub instance: String,
    pub group: String,
    pub profile: Profile,
    pub sockets: u32,
    pub cores: u32,
    pub memory_total_bytes: u64,
    pub gpus: u32,
    /// Jobs placed here, by start instant.
    pub jobs: Vec<usize>,
    /// Cumulative `proc/stat` busy and idle ticks per instant.
    pub busy_ticks: Vec<u64>,
    pub idle_ticks: Vec<u64>,
    /// `MemTotal - MemAvailable` per instant, a multiple of 1024.
    pub memory_used_bytes: Vec<u64>,
    /// Unwrapped cumulative RAPL energy per socket and instant.
    pub package_uj: Vec<Vec<u64>>,
    pub dram_uj: Vec<Vec<u64>>,
    /// Device power and utilization per instant and GPU index.
    pub gpu_power: Vec<Vec<u32>>,
    pub gpu_util: Vec<Vec<f64>>,
    pub ipmi_true_watts: Vec<f64>,
    pub ipmi_watts: Vec<u64>,
    pub idle_floor_watts: Vec<f64>,
    /// Power left unattributed per instant; filled by [`crate::truth`].
    pub unattributed_watts: Vec<f64>,
}

impl NodeTrace {
    pub fn has(&self, domain: RaplDomain) -> bool {
        self.profile.has(domain)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub spec: ClusterSpec,
    pub start_ms: i64,
    pub interval_ms: i64,
    pub last_instant: usize,
    pub nodes: Vec<NodeTrace>,
    pub jobs: Vec<JobTrace>,
    /// Emission factor in force during each simulated hour.
    pub hourly_factors: Vec<f64>,
}

impl Trace {
    pub fn time_of(&self, k: usize) -> i64 {
        self.start_ms + k as i64 * self.interval_ms
    }

    /// Instant shown at wall time `now_ms`, clamped to the window.
    pub fn instant_at(&self, now_ms: i64) -> usize {
        let k = (now_ms - self.start_ms).div_euclid(self.interval_ms).max(0) as usize;
        k.min(self.last_instant)
    }

    pub fn end_ms(&self) -> i64 {
        self.time_of(self.last_instant)
    }

    pub fn factor_at(&self, t_ms: i64) -> f64 {
        let hour = ((t_ms - self.start_ms).max(0) / 3_600_000) as usize;
        self.hourly_factors[hour.min(self.hourly_factors.len() - 1)]
    }

    pub fn short_job_count(&self) -> usize {
        self.jobs.iter().filter(|j| j.short).count()
    }

    pub fn node_by_instance(&self, instance: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.instance == instance)
    }

    /// Accounting rows as a resource manager would report them at `now_ms`:
    /// jobs not yet started are absent and unfinished jobs have no end.
    pub fn accounting_as_of(&self, now_ms: i64) -> String {
        let mut out = String::new();
        for job in &self.jobs {
            if job.unit.started_at_ms > now_ms {
                continue;
            }
            let mut unit = job.unit.clone();
            if unit.ended_at_ms.is_some_and(|e| e > now_ms) {
                unit.ended_at_ms = None;
            }
            out.push_str(&unit.to_accounting_line());
            out.push('\n');
        }
        out
    }
}

struct Draw {
    start: usize,
    steps: usize,
    short: bool,
    user: usize,
    cpus: u32,
}

struct Slot {
    end: usize,
    cpus: u32,
    gpus: Vec<u32>,
}

/// Generates a trace; equal specs give equal traces.
pub fn generate(spec: &ClusterSpec) -> Result<Trace, SimError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let start_ms = spec.start_ms()?;
    let last = spec.last_instant();
    let dt = spec.scrape_interval_s as f64;

    let mut nodes = Vec::with_capacity(spec.node_count);
    for (group, g) in &spec.profiles {
        for i in 0..g.nodes {
            nodes.push(empty_node(spec, group, &g.profile(), g.gpus_per_node, i, last));
        }
    }

    let cutoff_steps = spec.short_job_cutoff_s.div_ceil(spec.scrape_interval_s).max(1) as usize;
    let max_short = (cutoff_steps - 1).min(last);
    let exp = Exp::new(1.0 / spec.mean_job_duration_s).map_err(|e| SimError::Spec(e.to_string()))?;
    let mut draws = Vec::with_capacity(spec.job_count());
    for _ in 0..spec.job_count() {
        let short = max_short > 0 && rng.random::<f64>() < spec.short_job_fraction;
        let (start, steps) = if short {
            let steps = rng.random_range(1..=max_short);
            (rng.random_range(0..=last - steps), steps)
        } else {
            let steps = ((exp.sample(&mut rng) / dt).round() as usize).max(cutoff_steps);
            (rng.random_range(0..last), steps)
        };
        draws.push(Draw {
            start,
            steps,
            short,
            user: rng.random_range(0..spec.user_count),
            cpus: *CPU_CHOICES.choose(&mut rng).expect("non-empty"),
        });
    }
    draws.sort_by_key(|d| d.start);

    let mut slots: Vec<Vec<Slot>> = nodes.iter().map(|_| Vec::new()).collect();
    let mut jobs = Vec::with_capacity(draws.len());
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    for (rank, d) in draws.iter().enumerate() {
        for s in slots.iter_mut() {
            s.retain(|slot| slot.end > d.start);
        }
        let free = |n: usize| nodes[n].cores as i64 - slots[n].iter().map(|s| s.cpus as i64).sum::<i64>();
        let node = (0..nodes.len())
            .max_by_key(|&n| (free(n), std::cmp::Reverse(n)))
            .expect("at least one node");
        let end = (d.start + d.steps).min(last);
        let ended = d.start + d.steps <= last;

        let mut gpus = Vec::new();
        if nodes[node].gpus > 0 && rng.random::<f64>() < spec.gpu_job_fraction {
            let want = rng.random_range(1..=2u32.min(nodes[node].gpus));
            let busy: Vec<u32> = slots[node].iter().flat_map(|s| s.gpus.iter().copied()).collect();
            let idle: Vec<u32> = (0..nodes[node].gpus).filter(|g| !busy.contains(g)).collect();
            if idle.len() >= want as usize {
                gpus = idle[..want as usize].to_vec();
            }
        }
        slots[node].push(Slot {
            end,
            cpus: d.cpus,
            gpus: gpus.clone(),
        });

        let intervals = end - d.start;
        let alloc_mem = d.cpus as u64 * MEMORY_PER_CPU;
        let cpu_base: f64 = rng.random_range(0.3..1.0);
        let mem_base: f64 = rng.random_range(0.1..0.8);
        let gpu_base: f64 = rng.random_range(0.4..0.9);
        let mut usage_usec = Vec::with_capacity(intervals + 1);
        usage_usec.push(0u64);
        let mut memory_bytes = Vec::with_capacity(intervals);
        let mut gpu_util = Vec::new();
        for _ in 0..intervals {
            let util: f64 = (cpu_base + 0.05 * noise.sample(&mut rng)).clamp(0.02, 1.0);
            let inc = (util * d.cpus as f64 * dt * 1e6).round() as u64;
            usage_usec.push(usage_usec.last().copied().unwrap_or(0) + inc);
            let frac: f64 = (mem_base + 0.02 * noise.sample(&mut rng)).clamp(0.01, 0.95);
            memory_bytes.push((frac * alloc_mem as f64).round() as u64);
            if !gpus.is_empty() {
                let u: f64 = (gpu_base + 0.1 * noise.sample(&mut rng)).clamp(0.05, 1.0);
                gpu_util.push((u * 100.0).round() / 100.0);
            }
        }

        let user = d.user;
        let unit = WorkloadUnit {
            uuid: (FIRST_JOB_ID + rank as u64).to_string(),
            cluster_id: spec.cluster_id.clone(),
            resource_manager: ResourceManager::Slurm,
            user: format!("user-{user:02}"),
            project: format!("proj-{:02}", user % spec.project_count),
            created_at_ms: start_ms + d.start as i64 * spec.interval_ms(),
            started_at_ms: start_ms + d.start as i64 * spec.interval_ms(),
            ended_at_ms: ended.then(|| start_ms + end as i64 * spec.interval_ms()),
            alloc_cpus: d.cpus,
            alloc_memory_bytes: alloc_mem,
            gpu_indices: gpus,
        };
        nodes[node].jobs.push(rank);
        jobs.push(JobTrace {
            unit,
            node,
            start: d.start,
            end,
            short: d.short,
            usage_usec,
            memory_bytes,
            gpu_util,
            true_watts: Vec::with_capacity(intervals),
            attributed: Vec::new(),
        });
    }

    for node in nodes.iter_mut() {
        drive_node(&mut rng, node, &mut jobs, last, dt);
    }

    let hours = spec.duration_s.div_ceil(3600) as usize + 1;
    let factors = (0..hours)
        .map(|h| {
            let phase = 2.0 * std::f64::consts::PI * (h % 24) as f64 / 24.0;
            let jitter: f64 = rng.random_range(-2.0..2.0);
            let f = spec.emission_factor.base_grams_per_kwh
                + spec.emission_factor.amplitude_grams_per_kwh * phase.sin()
                + jitter;
            (f.max(0.0) * 100.0).round() / 100.0
        })
        .collect();

    let mut trace = Trace {
        spec: spec.clone(),
        start_ms,
        interval_ms: spec.interval_ms(),
        last_instant: last,
        nodes,
        jobs,
        hourly_factors: factors,
    };
    crate::truth::attribute_trace(&mut trace);
    Ok(trace)
}

fn empty_node(spec: &ClusterSpec, group: &str, profile: &Profile, gpus: u32, i: usize, last: usize) -> NodeTrace {
    let sockets = spec.sockets_per_node as usize;
    NodeTrace {
        instance: format!("{group}-{i:02}"),
        group: group.to_string(),
        profile: profile.clone(),
        sockets: spec.sockets_per_node,
        cores: spec.cores_per_node,
        memory_total_bytes: spec.memory_bytes_per_node / 1024 * 1024,
        gpus,
        jobs: Vec::new(),
        busy_ticks: Vec::with_capacity(last + 1),
        idle_ticks: Vec::with_capacity(last + 1),
        memory_used_bytes: Vec::with_capacity(last + 1),
        package_uj: vec![Vec::with_capacity(last + 1); sockets],
        dram_uj: vec![Vec::with_capacity(last + 1); sockets],
        gpu_power: Vec::with_capacity(last + 1),
        gpu_util: Vec::with_capacity(last + 1),
        ipmi_true_watts: Vec::with_capacity(last + 1),
        ipmi_watts: Vec::with_capacity(last + 1),
        idle_floor_watts: Vec::with_capacity(last + 1),
        unattributed_watts: Vec::new(),
    }
}

/// Fills the node's per-instant series and its jobs' true power.
fn drive_node(rng: &mut ChaCha8Rng, node: &mut NodeTrace, jobs: &mut [JobTrace], last: usize, dt: f64) {
    let sockets = node.sockets as usize;
    let ticks_per_interval = (node.cores as f64 * dt * 100.0).round() as u64;
    let includes_gpu = node.profile.ipmi_includes_gpu;
    let total_kb = node.memory_total_bytes / 1024;

    let mut busy = rng.random_range(1_000_000..100_000_000u64);
    let mut idle = rng.random_range(1_000_000..100_000_000u64);
    let mut package: Vec<u64> = (0..sockets).map(|_| rng.random_range(0..PACKAGE_RANGE_UJ)).collect();
    let mut dram: Vec<u64> = (0..sockets).map(|_| rng.random_range(0..DRAM_RANGE_UJ)).collect();

    for k in 0..=last {
        let active: Vec<usize> = node.jobs.iter().copied().filter(|&j| jobs[j].active_in(k)).collect();
        let job_usec: u64 = active.iter().map(|&j| jobs[j].cpu_usec_in(k)).sum();
        let job_mem: u64 = active.iter().map(|&j| jobs[j].memory_at(k)).sum();

        let os_rate = rng.random_range(0.1..0.4);
        let os_ticks = (os_rate * dt * 100.0).round() as u64;
        let busy_inc = job_usec.div_ceil(10_000) + os_ticks;
        let os_mem = OS_MEMORY_BYTES + rng.random_range(0.0..1.0) * GIB;
        let used_kb = ((os_mem + job_mem as f64) / 1024.0).ceil() as u64;
        let used_bytes = used_kb.min(total_kb) * 1024;

        let mut gpu_power = vec![GPU_IDLE_W; node.gpus as usize];
        let mut gpu_util = vec![0.0; node.gpus as usize];
        let mut job_gpu_dynamic = vec![0.0; active.len()];
        for (a, &j) in active.iter().enumerate() {
            let u = jobs[j].gpu_util_in(k);
            for &g in &jobs[j].unit.gpu_indices {
                let p = GPU_IDLE_W + (u * (GPU_MAX_W - GPU_IDLE_W) as f64).round() as u32;
                gpu_power[g as usize] = p;
                gpu_util[g as usize] = u;
                job_gpu_dynamic[a] += (p - GPU_IDLE_W) as f64;
            }
        }
        let gpu_total: f64 = gpu_power.iter().map(|&p| p as f64).sum();

        let busy_cores = busy_inc as f64 / 100.0 / dt;
        let package_w = node.sockets as f64 * PACKAGE_IDLE_W_PER_SOCKET + WATTS_PER_BUSY_CORE * busy_cores;
        let dram_w = node.sockets as f64 * DRAM_IDLE_W_PER_SOCKET + DRAM_WATTS_PER_GIB * used_bytes as f64 / GIB;
        let ipmi_true = OTHER_IDLE_W + package_w + dram_w + if includes_gpu { gpu_total } else { 0.0 };

        let mut job_cores = 0.0;
        for (a, &j) in active.iter().enumerate() {
            let cores = jobs[j].cpu_usec_in(k) as f64 / 1e6 / dt;
            job_cores += cores;
            let mut w = WATTS_PER_BUSY_CORE * cores + DRAM_WATTS_PER_GIB * jobs[j].memory_at(k) as f64 / GIB;
            if includes_gpu {
                w += job_gpu_dynamic[a];
            }
            jobs[j].true_watts.push(w);
        }
        let idle_floor = OTHER_IDLE_W
            + node.sockets as f64 * (PACKAGE_IDLE_W_PER_SOCKET + DRAM_IDLE_W_PER_SOCKET)
            + WATTS_PER_BUSY_CORE * (busy_cores - job_cores)
            + DRAM_WATTS_PER_GIB * (used_bytes - job_mem) as f64 / GIB
            + if includes_gpu {
                (node.gpus * GPU_IDLE_W) as f64
            } else {
                0.0
            };

        if k > 0 {
            busy += busy_inc;
            idle += ticks_per_interval.saturating_sub(busy_inc);
            for s in 0..sockets {
                package[s] += (package_w * dt * 1e6 / sockets as f64).round() as u64;
                dram[s] += (dram_w * dt * 1e6 / sockets as f64).round() as u64;
            }
        }
        node.busy_ticks.push(busy);
        node.idle_ticks.push(idle);
        node.memory_used_bytes.push(used_bytes);
        for s in 0..sockets {
            node.package_uj[s].push(package[s]);
            node.dram_uj[s].push(dram[s]);
        }
        node.gpu_power.push(gpu_power);
        node.gpu_util.push(gpu_util);
        node.ipmi_true_watts.push(ipmi_true);
        node.ipmi_watts.push(ipmi_true.round() as u64);
        node.idle_floor_watts.push(idle_floor);
    }
}
