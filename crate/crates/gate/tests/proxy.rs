mod common;

use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Duration;

use common::{dead_url, recorder, serve};
use wattline_core::auth::{BasicCredential, PasswordHash};
use wattline_core::workload::parse_accounting;
use wattline_core::{Clock, ManualClock};
use wattline_gate::{BackendPool, Gate, Ownership, RegistryHttp, StoreOwnership, Strategy, USER_HEADER};
use wattline_registry::Store;

const ACCOUNTING: &str = "\
101|alice|p|2024-03-01T00:00:00Z||1|1073741824|
202|bob|p|2024-03-01T00:00:00Z||1|1073741824|
";

fn store() -> (tempfile::TempDir, Arc<Store>) {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(Store::open(&dir.path().join("r.db")).unwrap());
    store.upsert_units(&parse_accounting(ACCOUNTING, "c1").0).unwrap();
    (dir, store)
}

struct Fixture {
    _dir: tempfile::TempDir,
    gate: Arc<Gate>,
    url: String,
    client: reqwest::Client,
}

async fn fixture(backends: Vec<String>, strategy: Strategy, timeout: Duration) -> Fixture {
    let (dir, store) = store();
    let pool = Arc::new(BackendPool::new(&backends, strategy).unwrap());
    let gate = Arc::new(
        Gate::new("c1", "workload_id", pool, Arc::new(StoreOwnership(store)), timeout)
            .unwrap()
            .with_allowlist(["up".to_string()]),
    );
    let url = serve(gate.clone().router()).await;
    Fixture {
        _dir: dir,
        gate,
        url,
        client: reqwest::Client::new(),
    }
}

impl Fixture {
    async fn get(&self, user: Option<&str>, raw_query: &str) -> reqwest::Response {
        let mut req = self.client.get(format!("{}/api/v1/query?{raw_query}", self.url));
        if let Some(u) = user {
            req = req.header(USER_HEADER, u);
        }
        req.send().await.unwrap()
    }
}

fn q(expr: &str) -> String {
    url::form_urlencoded::Serializer::new(String::new())
        .append_pair("query", expr)
        .append_pair("time", "1709251200")
        .finish()
}

#[tokio::test]
async fn authorized_query_reaches_backend_verbatim() {
    let (rec, b) = recorder().await;
    let f = fixture(vec![b], Strategy::RoundRobin, Duration::from_secs(5)).await;
    let raw = q(r#"wattline_cpu_seconds_total{workload_id="101"}"#);
    let resp = f.get(Some("alice"), &raw).await;
    assert_eq!(resp.status(), 200);
    assert!(resp.text().await.unwrap().contains("success"));

    let body = format!("{raw}&step=15");
    let resp = f
        .client
        .post(format!("{}/api/v1/query_range", f.url))
        .header(USER_HEADER, "alice")
        .header("content-type", "application/x-www-form-urlencoded")
        .body(body.clone())
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 200);

    let seen = rec.seen.lock().unwrap().clone();
    assert_eq!(seen.len(), 2);
    assert_eq!(seen[0].0, "GET");
    assert_eq!(seen[0].1, "/api/v1/query");
    assert_eq!(seen[0].2.as_deref(), Some(raw.as_str()));
    assert_eq!(seen[1].0, "POST");
    assert_eq!(seen[1].1, "/api/v1/query_range");
    assert_eq!(seen[1].3, body.as_bytes());
}

#[tokio::test]
async fn denied_queries_never_reach_a_backend() {
    let (rec, b) = recorder().await;
    let f = fixture(vec![b], Strategy::RoundRobin, Duration::from_secs(5)).await;
    let cases = [
        (Some("bob"), r#"x{workload_id="101"}"#, 403, "not-owner"),
        (None, r#"x{workload_id="101"}"#, 403, "missing-user"),
        (
            Some("alice"),
            r#"wattline_node_power_watts"#,
            403,
            "no-workload-selector",
        ),
        (
            Some("alice"),
            r#"x{workload_id=~"10.*"}"#,
            403,
            "non-verifiable-selector",
        ),
        (
            Some("alice"),
            r#"x{workload_id="101"} + y{workload_id="202"}"#,
            403,
            "not-owner",
        ),
        (Some("alice"), r#"x{workload_id="101""#, 400, "bad_data"),
    ];
    for (user, expr, status, kind) in cases {
        let resp = f.get(user, &q(expr)).await;
        assert_eq!(resp.status(), status, "{expr}");
        let body: serde_json::Value = resp.json().await.unwrap();
        assert_eq!(body["errorType"], kind, "{expr}");
    }
    let missing = f.get(Some("alice"), "time=1").await;
    assert_eq!(missing.status(), 400);
    assert_eq!(rec.hits.load(Ordering::SeqCst), 0);
    assert_eq!(f.gate.stats().forwarded.load(Ordering::SeqCst), 0);

    // The allowlisted name passes without an id.
    assert_eq!(f.get(Some("alice"), &q("up")).await.status(), 200);
    assert_eq!(rec.hits.load(Ordering::SeqCst), 1);
}

#[tokio::test]
async fn no_healthy_backend_is_503() {
    let (rec, b) = recorder().await;
    let f = fixture(vec![b.clone(), b], Strategy::LeastConnection, Duration::from_secs(5)).await;
    f.gate.pool().set_healthy(0, false);
    f.gate.pool().set_healthy(1, false);
    let resp = f.get(Some("alice"), &q(r#"x{workload_id="101"}"#)).await;
    assert_eq!(resp.status(), 503);
    assert_eq!(rec.hits.load(Ordering::SeqCst), 0);
}

#[tokio::test]
async fn slow_backend_is_504_and_releases_its_slot() {
    let (rec, b) = recorder().await;
    *rec.delay.lock().unwrap() = Duration::from_secs(3);
    let f = fixture(vec![b], Strategy::RoundRobin, Duration::from_millis(200)).await;
    let resp = f.get(Some("alice"), &q(r#"x{workload_id="101"}"#)).await;
    assert_eq!(resp.status(), 504);
    assert_eq!(f.gate.pool().total_in_flight(), 0);
}

#[tokio::test]
async fn health_probe_marks_dead_backends_and_round_robin_skips_them() {
    let (rec, live) = recorder().await;
    let dead = dead_url().await;
    let f = fixture(vec![dead, live], Strategy::RoundRobin, Duration::from_secs(2)).await;
    f.gate.check_health().await;
    assert!(!f.gate.pool().backends()[0].healthy());
    assert!(f.gate.pool().backends()[1].healthy());
    for _ in 0..4 {
        assert_eq!(f.get(Some("alice"), &q(r#"x{workload_id="101"}"#)).await.status(), 200);
    }
    assert_eq!(rec.hits.load(Ordering::SeqCst), 4);
}

#[tokio::test]
async fn ownership_through_the_registry_api() {
    let (_dir, store) = store();
    let clock: Arc<dyn Clock> = Arc::new(ManualClock::new(0));
    let creds = vec![BasicCredential {
        username: "gate".into(),
        password_hash: PasswordHash::new("pw", b"saltsaltsaltsalt"),
    }];
    let registry = serve(wattline_registry::api::router(store, "c1", clock, creds)).await;
    let http = RegistryHttp::new(&registry, Duration::from_secs(2), Some(("gate".into(), "pw".into()))).unwrap();
    assert_eq!(http.first_unowned("alice", "c1", &["101".into()]).await.unwrap(), None);
    assert_eq!(
        http.first_unowned("alice", "c1", &["101".into(), "202".into()])
            .await
            .unwrap(),
        Some("101".into())
    );
    let anon = RegistryHttp::new(&registry, Duration::from_secs(2), None).unwrap();
    assert!(anon.first_unowned("alice", "c1", &["101".into()]).await.is_err());
}

#[tokio::test]
async fn unreachable_registry_fails_closed_with_502() {
    let (rec, b) = recorder().await;
    let pool = Arc::new(BackendPool::new(&[b], Strategy::RoundRobin).unwrap());
    let ownership = RegistryHttp::new(&dead_url().await, Duration::from_secs(1), None).unwrap();
    let gate = Arc::new(Gate::new("c1", "workload_id", pool, Arc::new(ownership), Duration::from_secs(2)).unwrap());
    let url = serve(gate.router()).await;
    let resp = reqwest::Client::new()
        .get(format!("{url}/api/v1/query?{}", q(r#"x{workload_id="101"}"#)))
        .header(USER_HEADER, "alice")
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 502);
    assert_eq!(rec.hits.load(Ordering::SeqCst), 0);
}

#[tokio::test]
async fn admin_delete_is_only_on_the_admin_listener() {
    let (rec_a, a) = recorder().await;
    let (rec_b, b) = recorder().await;
    let f = fixture(vec![a, b], Strategy::RoundRobin, Duration::from_secs(2)).await;
    let path = "/api/v1/admin/tsdb/delete_series?match%5B%5D=%7Bworkload_id%3D%22101%22%7D";
    let user = f
        .client
        .post(format!("{}{path}", f.url))
        .header(USER_HEADER, "alice")
        .send()
        .await
        .unwrap();
    assert_eq!(user.status(), 404);
    assert_eq!(rec_a.hits.load(Ordering::SeqCst) + rec_b.hits.load(Ordering::SeqCst), 0);

    let admin = serve(f.gate.clone().admin_router()).await;
    let resp = f.client.post(format!("{admin}{path}")).send().await.unwrap();
    assert_eq!(resp.status(), 204);
    assert_eq!(rec_a.hits.load(Ordering::SeqCst), 1);
    assert_eq!(rec_b.hits.load(Ordering::SeqCst), 1);
    assert_eq!(
        rec_a.seen.lock().unwrap()[0].2.as_deref(),
        Some("match%5B%5D=%7Bworkload_id%3D%22101%22%7D")
    );
}

#[tokio::test]
async fn basic_auth_on_the_gate() {
    let (_rec, b) = recorder().await;
    let (_dir, store) = store();
    let pool = Arc::new(BackendPool::new(&[b], Strategy::RoundRobin).unwrap());
    let gate = Gate::new(
        "c1",
        "workload_id",
        pool,
        Arc::new(StoreOwnership(store)),
        Duration::from_secs(2),
    )
    .unwrap()
    .with_users(vec![BasicCredential {
        username: "grafana".into(),
        password_hash: PasswordHash::new("pw", b"0123456789abcdef"),
    }]);
    let url = serve(Arc::new(gate).router()).await;
    let c = reqwest::Client::new();
    let target = format!("{url}/api/v1/query?{}", q(r#"x{workload_id="101"}"#));
    let anon = c.get(&target).header(USER_HEADER, "alice").send().await.unwrap();
    assert_eq!(anon.status(), 401);
    let ok = c
        .get(&target)
        .header(USER_HEADER, "alice")
        .basic_auth("grafana", Some("pw"))
        .send()
        .await
        .unwrap();
    assert_eq!(ok.status(), 200);
    assert_eq!(c.get(format!("{url}/health")).send().await.unwrap().status(), 200);
}
