#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{RawQuery, State};
use axum::http::{Method, Uri};
use axum::routing::{any, get};
use axum::Router;

/// Method, path, raw query and body of one request.
pub type Seen = (Method, String, Option<String>, Vec<u8>);

/// A backend that records what reaches it.
#[derive(Default)]
pub struct Recorder {
    pub hits: AtomicUsize,
    pub active: AtomicUsize,
    pub peak: AtomicUsize,
    pub seen: Mutex<Vec<Seen>>,
    pub delay: Mutex<Duration>,
}

async fn record(
    State(r): State<Arc<Recorder>>,
    method: Method,
    uri: Uri,
    RawQuery(q): RawQuery,
    body: Bytes,
) -> String {
    r.hits.fetch_add(1, Ordering::SeqCst);
    let now = r.active.fetch_add(1, Ordering::SeqCst) + 1;
    r.peak.fetch_max(now, Ordering::SeqCst);
    r.seen
        .lock()
        .unwrap()
        .push((method, uri.path().to_string(), q, body.to_vec()));
    let delay = *r.delay.lock().unwrap();
    if !delay.is_zero() {
        tokio::time::sleep(delay).await;
    }
    r.active.fetch_sub(1, Ordering::SeqCst);
    r#"{"status":"success","data":{"resultType":"vector","result":[]}}"#.to_string()
}

pub async fn serve(router: Router) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router).await.unwrap() });
    format!("http://{addr}")
}

pub async fn recorder() -> (Arc<Recorder>, String) {
    let r = Arc::new(Recorder::default());
    let router = Router::new()
        .route("/-/healthy", get(|| async { "ok" }))
        .fallback(any(record))
        .with_state(r.clone());
    let url = serve(router).await;
    (r, url)
}

/// An address nothing listens on.
pub async fn dead_url() -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    format!("http://{addr}")
}
