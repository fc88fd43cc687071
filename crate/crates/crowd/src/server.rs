//! HTTP front end of the coordinator.
//!
//! `POST /v1/work/pull`, `POST /v1/work/submit`, `GET /v1/advise`, `GET /v1/status`.

use std::collections::{BTreeMap, HashMap};
use std::future::Future;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;
use tokio::net::TcpListener;

use crate::advise::{advise, AdviceQuery};
use crate::coordinator::Coordinator;
use crate::{CrowdError, PullRequest, PullResponse, ResultSubmission};

type Shared = Arc<Coordinator>;

fn error(status: StatusCode, message: impl std::fmt::Display) -> Response {
    (status, Json(json!({ "error": message.to_string() }))).into_response()
}

async fn pull(State(c): State<Shared>, body: Bytes) -> Response {
    let req: PullRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed pull request: {e}")),
    };
    Json(PullResponse { unit: c.pull(&req) }).into_response()
}

async fn submit(State(c): State<Shared>, body: Bytes) -> Response {
    let sub: ResultSubmission = match serde_json::from_slice(&body) {
        Ok(s) => s,
        Err(e) => return error(StatusCode::BAD_REQUEST, CrowdError::MalformedSubmission(e.to_string())),
    };
    match tokio::task::spawn_blocking(move || c.submit(&sub)).await {
        Ok(Ok(v)) => Json(v).into_response(),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

/// Parse `name=value,name=value`.
fn parse_pairs(text: &str) -> Result<BTreeMap<String, f64>, CrowdError> {
    text.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| CrowdError::InvalidQuery(format!("expected name=value, got `{p}`")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| CrowdError::InvalidQuery(format!("`{v}` is not a number")))?;
            Ok((k.trim().to_string(), v))
        })
        .collect()
}

pub fn query_from_params(params: &HashMap<String, String>) -> Result<AdviceQuery, CrowdError> {
    Ok(AdviceQuery {
        species: params.get("species").cloned(),
        platform: params.get("platform").cloned(),
        features: params.get("features").map(|f| parse_pairs(f)).transpose()?.unwrap_or_default(),
        weights: params.get("weights").map(|w| parse_pairs(w)).transpose()?.unwrap_or_default(),
        model: params.get("model").cloned(),
    })
}

async fn advise_handler(State(c): State<Shared>, Query(params): Query<HashMap<String, String>>) -> Response {
    let query = match query_from_params(&params) {
        Ok(q) => q,
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    match tokio::task::spawn_blocking(move || advise(c.repo(), &query)).await {
        Ok(Ok(a)) => Json(a).into_response(),
        Ok(Err(e @ CrowdError::NoKnowledge)) => error(StatusCode::NOT_FOUND, e),
        Ok(Err(e @ (CrowdError::InvalidQuery(_) | CrowdError::Predict(_)))) => error(StatusCode::BAD_REQUEST, e),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

async fn status(State(c): State<Shared>) -> Response {
    Json(c.status()).into_response()
}

pub fn router(coordinator: Shared) -> Router {
    Router::new()
        .route("/v1/work/pull", post(pull))
        .route("/v1/work/submit", post(submit))
        .route("/v1/advise", get(advise_handler))
        .route("/v1/status", get(status))
        .with_state(coordinator)
}

pub async fn serve<F>(listener: TcpListener, coordinator: Shared, shutdown: F) -> std::io::Result<()>
where
    F: Future<Output = ()> + Send + 'static,
{
    axum::serve(listener, router(coordinator))
        .with_graceful_shutdown(shutdown)
        .await
}

/// A server running on its own thread and runtime.
pub struct ServerHandle {
    pub addr: SocketAddr,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<std::io::Result<()>>>,
}

impl ServerHandle {
    pub fn spawn(coordinator: Shared, listen: &str) -> std::io::Result<Self> {
        let std_listener = std::net::TcpListener::bind(listen)?;
        std_listener.set_nonblocking(true)?;
        let addr = std_listener.local_addr()?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(async move {
                let listener = TcpListener::from_std(std_listener)?;
                serve(listener, coordinator, async move {
                    let _ = rx.await;
                })
                .await
            })
        });
        Ok(ServerHandle {
            addr,
            stop: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) -> std::io::Result<()> {
        self.shutdown()
    }

    fn shutdown(&mut self) -> std::io::Result<()> {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(std::io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coordinator::CoordinatorConfig;
    use crate::Capabilities;
    use crowdtune::repo::Repo;

    fn start() -> (tempfile::TempDir, ServerHandle) {
        let d = tempfile::tempdir().unwrap();
        let c = Coordinator::new(Repo::init(d.path()).unwrap(), CoordinatorConfig::default());
        (d, ServerHandle::spawn(Arc::new(c), "127.0.0.1:0").unwrap())
    }

    #[test]
    fn pairs() {
        assert_eq!(parse_pairs("a=1, b=2.5").unwrap(), [("a".into(), 1.0), ("b".into(), 2.5)].into());
        assert!(parse_pairs("a").is_err());
        assert!(parse_pairs("a=x").is_err());
    }

    #[test]
    fn endpoints() {
        let (_d, server) = start();
        let url = server.url();
        let req = PullRequest {
            worker_id: "w".into(),
            capabilities: Capabilities {
                compilers: vec!["gcc-4.6".into()],
                platform: None,
            },
        };
        let resp: PullResponse = ureq::post(format!("{url}/v1/work/pull"))
            .send_json(&req)
            .unwrap()
            .body_mut()
            .read_json()
            .unwrap();
        assert!(resp.unit.is_none());

        let bad = ureq::post(format!("{url}/v1/work/submit"))
            .header("content-type", "application/json")
            .send("{not json");
        assert!(matches!(bad, Err(ureq::Error::StatusCode(400))));

        let none = ureq::get(format!("{url}/v1/advise?species=zzz")).call();
        assert!(matches!(none, Err(ureq::Error::StatusCode(404))));

        let status: serde_json::Value = ureq::get(format!("{url}/v1/status"))
            .call()
            .unwrap()
            .body_mut()
            .read_json()
            .unwrap();
        assert_eq!(status["workers"]["w"]["pulls"], 1);
        server.stop().unwrap();
    }
}
