//! Multipart HTTP transport.
//!
//! One endpoint, `POST /oracle`. The request body is `multipart/form-data`
//! with the parts described in [`super::wire`]; the reply uses the same
//! encoding. Oracle-side failures come back as HTTP 200 with an `error`
//! manifest, undecodable requests as HTTP 400.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::extract::{DefaultBodyLimit, Multipart, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::Router;
use bytes::Bytes;

use super::wire::{self, Part};
use super::{Oracle, OracleError, OracleRequest, OracleResponse};

pub const ENDPOINT: &str = "/oracle";
const MAX_BODY: usize = 512 * 1024 * 1024;

#[derive(Clone, Debug)]
pub struct HttpOracle {
    /// Server base URL, e.g. `http://127.0.0.1:8080`.
    pub base_url: String,
    pub timeout: Duration,
    pub attempts: u32,
    pub backoff: Duration,
    client: reqwest::blocking::Client,
}

impl HttpOracle {
    pub fn new(base_url: impl Into<String>) -> Result<Self, OracleError> {
        Self::with_settings(base_url, Duration::from_secs(600), 3, Duration::from_millis(200))
    }

    pub fn with_settings(
        base_url: impl Into<String>,
        timeout: Duration,
        attempts: u32,
        backoff: Duration,
    ) -> Result<Self, OracleError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| OracleError::Transport(e.to_string()))?;
        Ok(Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            timeout,
            attempts: attempts.max(1),
            backoff,
            client,
        })
    }

    fn attempt(&self, parts: &[Part]) -> Result<(String, Bytes), Attempt> {
        let mut form = reqwest::blocking::multipart::Form::new();
        for p in parts {
            let part = reqwest::blocking::multipart::Part::bytes(p.data.to_vec())
                .file_name(p.file_name())
                .mime_str(&p.content_type)
                .map_err(|e| Attempt::Fatal(OracleError::Transport(e.to_string())))?;
            form = form.part(p.name.clone(), part);
        }
        let resp = self
            .client
            .post(format!("{}{ENDPOINT}", self.base_url))
            .multipart(form)
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    Attempt::Retry(OracleError::Timeout(self.timeout))
                } else {
                    Attempt::Retry(OracleError::Transport(e.to_string()))
                }
            })?;
        let status = resp.status();
        let content_type = resp
            .headers()
            .get(header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .unwrap_or_default()
            .to_string();
        let body = resp
            .bytes()
            .map_err(|e| Attempt::Retry(OracleError::Transport(e.to_string())))?;
        if status.is_server_error() {
            return Err(Attempt::Retry(OracleError::Transport(format!("server returned {status}"))));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(OracleError::Remote(format!(
                "{status}: {}",
                String::from_utf8_lossy(&body)
            ))));
        }
        Ok((content_type, body))
    }
}

enum Attempt {
    Retry(OracleError),
    Fatal(OracleError),
}

impl Oracle for HttpOracle {
    fn call(&self, req: &OracleRequest) -> Result<OracleResponse, OracleError> {
        let job_id = uuid::Uuid::new_v4().to_string();
        let parts = wire::encode_request(req, &job_id);
        let mut last = None;
        for k in 0..self.attempts {
            if k > 0 {
                std::thread::sleep(self.backoff * 2u32.pow(k - 1));
            }
            match self.attempt(&parts) {
                Ok((ct, body)) => {
                    let reply = wire::decode_multipart(&ct, body)?;
                    return wire::decode_response(&reply, &job_id, req.kind);
                }
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(e)) => {
                    log::warn!("oracle request attempt {} failed: {e}", k + 1);
                    last = Some(e);
                }
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

async fn handle(State(oracle): State<Arc<dyn Oracle>>, mut multipart: Multipart) -> Response {
    let mut parts = Vec::new();
    loop {
        match multipart.next_field().await {
            Ok(Some(field)) => {
                let name = field.name().unwrap_or_default().to_string();
                let ct = field.content_type().unwrap_or("application/octet-stream").to_string();
                match field.bytes().await {
                    Ok(data) => parts.push(Part {
                        name,
                        content_type: ct,
                        data,
                    }),
                    Err(e) => return (StatusCode::BAD_REQUEST, e.to_string()).into_response(),
                }
            }
            Ok(None) => break,
            Err(e) => return (StatusCode::BAD_REQUEST, e.to_string()).into_response(),
        }
    }
    let (job_id, req) = match wire::decode_request(&parts) {
        Ok(v) => v,
        Err(e) => return (StatusCode::BAD_REQUEST, e.to_string()).into_response(),
    };
    let result = tokio::task::spawn_blocking(move || req.validate().and_then(|_| oracle.call(&req)))
        .await
        .unwrap_or_else(|e| Err(OracleError::Remote(format!("oracle panicked: {e}"))));
    let boundary = format!("panoworld-{}", uuid::Uuid::new_v4().simple());
    let body = wire::encode_multipart(&wire::encode_response(&job_id, &result), &boundary);
    Response::builder()
        .status(StatusCode::OK)
        .header(
            header::CONTENT_TYPE,
            format!("multipart/form-data; boundary={boundary}"),
        )
        .body(Body::from(body))
        .expect("valid response")
}

pub fn router(oracle: Arc<dyn Oracle>) -> Router {
    Router::new()
        .route(ENDPOINT, post(handle))
        .layer(DefaultBodyLimit::max(MAX_BODY))
        .with_state(oracle)
}

/// A server running on a background thread; stops when dropped.
pub struct HttpOracleServer {
    addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl HttpOracleServer {
    /// Binds `bind` (e.g. `127.0.0.1:0`) and starts serving.
    pub fn spawn(bind: &str, oracle: Arc<dyn Oracle>) -> std::io::Result<Self> {
        let listener = std::net::TcpListener::bind(bind)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener).expect("tokio listener");
                let shutdown = async {
                    let _ = rx.await;
                };
                if let Err(e) = axum::serve(listener, router(oracle))
                    .with_graceful_shutdown(shutdown)
                    .await
                {
                    log::error!("oracle server stopped: {e}");
                }
            });
        });
        Ok(Self {
            addr,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server thread exits.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for HttpOracleServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
