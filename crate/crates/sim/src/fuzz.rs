//! Randomized gate queries over a trace's workloads.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::trace::Trace;

const METRICS: [&str; 4] = [
    "wattline_cpu_seconds_total",
    "wattline_memory_bytes",
    wattline_core::rules::RECORD_NAME,
    "wattline_node_power_watts",
];

#[derive(Debug, Clone, PartialEq)]
pub struct FuzzQuery {
    /// Value of the user header; `None` omits it.
    pub user: Option<String>,
    /// `/api/v1/query` or `/api/v1/query_range`.
    pub path: &'static str,
    /// Send the parameters as a form body instead of the URL.
    pub post: bool,
    pub expr: String,
    pub params: Vec<(String, String)>,
}

pub struct QueryFuzzer {
    rng: ChaCha8Rng,
    users: Vec<String>,
    owned: BTreeMap<String, Vec<String>>,
    all: Vec<String>,
    instances: Vec<String>,
    start_s: i64,
    end_s: i64,
}

fn quoted(v: &str) -> String {
    format!("\"{}\"", v.replace('\\', "\\\\").replace('"', "\\\""))
}

impl QueryFuzzer {
    pub fn new(trace: &Trace, seed: u64) -> Self {
        let mut owned: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for j in &trace.jobs {
            owned.entry(j.unit.user.clone()).or_default().push(j.unit.uuid.clone());
        }
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            users: owned.keys().cloned().collect(),
            all: trace.jobs.iter().map(|j| j.unit.uuid.clone()).collect(),
            owned,
            instances: trace.nodes.iter().map(|n| n.instance.clone()).collect(),
            start_s: trace.start_ms / 1000,
            end_s: trace.end_ms() / 1000,
        }
    }

    pub fn users(&self) -> &[String] {
        &self.users
    }

    fn pick(&mut self, from: &[String]) -> String {
        from.choose(&mut self.rng).cloned().unwrap_or_else(|| "0".into())
    }

    /// An id owned by `user` (about half), by someone else, or by nobody.
    fn id_for(&mut self, user: &str) -> String {
        let mine = self.owned.get(user).cloned().unwrap_or_default();
        let others: Vec<String> = self.all.iter().filter(|u| !mine.contains(u)).cloned().collect();
        match self.rng.random_range(0..100) {
            0..50 => self.pick(&mine),
            50..90 => self.pick(&others),
            90..95 => "999999999".into(),
            _ => format!("{}\"}} or {{instance=~\".*", self.pick(&mine)),
        }
    }

    pub fn next_query(&mut self) -> FuzzQuery {
        let user = match self.rng.random_range(0..100) {
            0..5 => None,
            5..10 => Some("mallory".to_string()),
            _ => Some(self.pick(&self.users.clone())),
        };
        let who = user.clone().unwrap_or_default();
        let m = *METRICS.choose(&mut self.rng).expect("non-empty");
        let a = self.id_for(&who);
        let b = self.id_for(&who);
        let inst = self.pick(&self.instances.clone());
        let (qa, qb) = (quoted(&a), quoted(&b));
        let expr = match self.rng.random_range(0..16) {
            0..=2 => format!("{m}{{workload_id={qa}}}"),
            3 => format!("{{workload_id={qa}}}"),
            4 => format!("{{__name__=~\".+\", workload_id={qa}}}"),
            5 => format!("{m}{{workload_id={qa}}} + {m}{{workload_id={qb}}}"),
            6 => format!("{m}{{workload_id=~{}}}", quoted(&format!("{a}|.*"))),
            7 => format!("{m}{{workload_id!={qa}}}"),
            8 => format!("{m}{{workload_id!~\"x\"}}"),
            9 => format!("wattline_node_power_watts{{instance={}}}", quoted(&inst)),
            10 => m.to_string(),
            11 => format!("{m}{{workload_id={qa}, workload_id={qb}}}"),
            12 => format!("{m}{{instance=~\".+\"}}"),
            13 => format!("{m}{{workload_id={qa}"),
            14 => format!("{{workload_id={qa}}} or {{instance={}}}", quoted(&inst)),
            _ => format!("rate({m}{{workload_id={qa}}}[5m])"),
        };
        let range = self.rng.random_bool(0.5);
        let mut params = vec![("query".to_string(), expr.clone())];
        if range {
            params.push(("start".into(), self.start_s.to_string()));
            params.push(("end".into(), self.end_s.to_string()));
            params.push(("step".into(), "15".into()));
        } else {
            params.push(("time".into(), self.end_s.to_string()));
        }
        FuzzQuery {
            user,
            path: if range { "/api/v1/query_range" } else { "/api/v1/query" },
            post: self.rng.random_bool(0.3),
            expr,
            params,
        }
    }
}
