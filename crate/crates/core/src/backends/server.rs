//! In-process HTTP server exposing a [`MockBackend`], with fault injection for
//! exercising client retries.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::sync::oneshot;

use super::mock::MockBackend;
use super::protocol::*;
use super::{BackendError, Critic, Editor, Instructor, Scorer};

/// Failures injected ahead of normal service.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FaultPlan {
    /// The first `fail_first` stage requests get a 500.
    pub fail_first: usize,
    /// Every successful response is replaced by an unparseable body.
    pub malformed: bool,
}

struct Shared {
    backend: MockBackend,
    faults: FaultPlan,
    requests: AtomicUsize,
}

pub struct MockServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl MockServer {
    /// Binds an ephemeral localhost port and serves on a background thread.
    pub fn start(backend: MockBackend, faults: FaultPlan) -> std::io::Result<Self> {
        let listener = std::net::TcpListener::bind("127.0.0.1:0")?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            backend,
            faults,
            requests: AtomicUsize::new(0),
        });
        let app = Router::new()
            .route(CRITIQUE_PATH, post(critique))
            .route(INSTRUCT_PATH, post(instruct))
            .route(EDIT_PATH, post(edit))
            .route(SCORE_PATH, post(score))
            .route(HEALTH_PATH, get(|| async { Json(HealthResponse { ok: true }) }))
            .with_state(shared.clone());
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let (tx, rx) = oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener).expect("listener");
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await
                    .expect("mock server");
            });
        });
        Ok(Self {
            addr,
            shared,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Stage requests received so far, including failed ones.
    pub fn request_count(&self) -> usize {
        self.shared.requests.load(Ordering::SeqCst)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn respond<T: serde::Serialize>(shared: &Shared, result: Result<T, BackendError>) -> Response {
    let n = shared.requests.fetch_add(1, Ordering::SeqCst);
    if n < shared.faults.fail_first {
        let body = ErrorResponse {
            error: "injected failure".into(),
        };
        return (StatusCode::INTERNAL_SERVER_ERROR, Json(body)).into_response();
    }
    match result {
        Ok(_) if shared.faults.malformed => (StatusCode::OK, "{\"not json").into_response(),
        Ok(v) => Json(v).into_response(),
        Err(e) => {
            let status = match e {
                BackendError::BadRequest(_) => StatusCode::BAD_REQUEST,
                _ => StatusCode::INTERNAL_SERVER_ERROR,
            };
            (status, Json(ErrorResponse { error: e.to_string() })).into_response()
        }
    }
}

async fn critique(State(s): State<Arc<Shared>>, Json(req): Json<CritiqueRequest>) -> Response {
    let r = s.backend.critique(&req);
    respond(&s, r)
}

async fn instruct(State(s): State<Arc<Shared>>, Json(req): Json<InstructRequest>) -> Response {
    let r = s.backend.instruct(&req);
    respond(&s, r)
}

async fn edit(State(s): State<Arc<Shared>>, Json(req): Json<EditRequest>) -> Response {
    let r = s.backend.edit(&req);
    respond(&s, r)
}

async fn score(State(s): State<Arc<Shared>>, Json(req): Json<ScoreRequest>) -> Response {
    let r = s.backend.score(&req);
    respond(&s, r)
}
