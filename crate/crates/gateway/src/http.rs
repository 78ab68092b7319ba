//! The `/api/v1` REST surface over [`Api`].

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread;

use axum::body::Bytes;
use axum::extract::{Path, RawQuery, State};
use axum::http::header::{AUTHORIZATION, CONTENT_TYPE};
use axum::http::{HeaderMap, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde_json::Value;
use tokio::sync::oneshot;

use cvmg_core::{Error, Principal, Result};

use crate::api::{Api, InstanceAction};

pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";
/// Carries the passphrase of an encrypted context on render.
pub const PASSPHRASE_HEADER: &str = "x-cvmg-passphrase";

/// Every route the server answers, as (method, path template).
pub const ROUTES: &[(&str, &str)] = &[
    ("POST", "/api/v1/contexts"),
    ("GET", "/api/v1/contexts/{id}"),
    ("POST", "/api/v1/contexts/{id}/clone"),
    ("GET", "/api/v1/contexts/{id}/render"),
    ("POST", "/api/v1/contexts/{id}/publish"),
    ("GET", "/api/v1/marketplace"),
    ("POST", "/api/v1/pairings"),
    ("POST", "/api/v1/pairings/{pin}/claim"),
    ("GET", "/api/v1/machines"),
    ("POST", "/api/v1/definitions"),
    ("GET", "/api/v1/definitions/{id}"),
    ("POST", "/api/v1/clusters"),
    ("GET", "/api/v1/clusters"),
    ("GET", "/api/v1/clusters/{id}"),
    ("POST", "/api/v1/clusters/{id}/services/{name}/scale"),
    ("DELETE", "/api/v1/clusters/{id}"),
    ("POST", "/api/v1/instances/{id}/pause"),
    ("POST", "/api/v1/instances/{id}/resume"),
    ("POST", "/api/v1/instances/{id}/destroy"),
    ("POST", "/api/v1/credentials"),
    ("DELETE", "/api/v1/credentials/{id}"),
    ("GET", "/api/v1/requests/{id}"),
];

/// HTTP status for an error code.
pub fn status_for(err: &Error) -> StatusCode {
    match err {
        Error::Unauthenticated => StatusCode::UNAUTHORIZED,
        Error::Forbidden | Error::BadPassphrase => StatusCode::FORBIDDEN,
        Error::NotFound(_) | Error::Gone(_) | Error::PinNotFound => StatusCode::NOT_FOUND,
        Error::Conflict(_)
        | Error::IllegalTransition { .. }
        | Error::AlreadyPublished
        | Error::PinAlreadyClaimed
        | Error::PinExpired
        | Error::LeaseLost(_)
        | Error::NameTaken(_) => StatusCode::CONFLICT,
        Error::EmptyName
        | Error::UnknownPluginSection(_)
        | Error::InvalidValue(_)
        | Error::EncryptedNotPublishable
        | Error::EncryptedNotPairable
        | Error::DuplicateName(_)
        | Error::InvalidDefinition(_)
        | Error::NotScalable(_)
        | Error::BadTarget(_)
        | Error::BadRequest(_)
        | Error::ProtocolError(_) => StatusCode::UNPROCESSABLE_ENTITY,
        Error::InsufficientCapacity(_)
        | Error::NoClouds
        | Error::AclDenied
        | Error::QuotaExceeded(_)
        | Error::Unsupported(_) => StatusCode::CONFLICT,
        Error::Unreachable(_) | Error::Timeout(_) => StatusCode::SERVICE_UNAVAILABLE,
        Error::DriverFailure(_) | Error::UnknownRef(_) | Error::Storage(_) | Error::Internal(_) => {
            StatusCode::INTERNAL_SERVER_ERROR
        }
    }
}

pub fn error_response(err: &Error) -> Response {
    (status_for(err), Json(err.to_body())).into_response()
}

enum Reply {
    Json(StatusCode, Value),
    Text(String),
}

impl IntoResponse for Reply {
    fn into_response(self) -> Response {
        match self {
            Reply::Json(status, v) => (status, Json(v)).into_response(),
            Reply::Text(text) => ([(CONTENT_TYPE, "text/plain; charset=utf-8")], text).into_response(),
        }
    }
}

/// What an authenticated handler gets besides the [`Api`].
struct Call {
    principal: Principal,
    idempotency_key: Option<String>,
}

fn header(headers: &HeaderMap, name: &str) -> Option<String> {
    headers.get(name).and_then(|v| v.to_str().ok()).map(str::to_owned)
}

fn parse_json<T: DeserializeOwned>(body: &[u8]) -> Result<T> {
    let body = if body.iter().all(u8::is_ascii_whitespace) { b"{}" } else { body };
    serde_json::from_slice(body).map_err(|e| Error::BadRequest(format!("request body: {e}")))
}

async fn run<F>(api: Arc<Api>, f: F) -> Response
where
    F: FnOnce(&Api) -> Result<Reply> + Send + 'static,
{
    match tokio::task::spawn_blocking(move || f(&api)).await {
        Ok(Ok(reply)) => reply.into_response(),
        Ok(Err(e)) => error_response(&e),
        Err(e) => error_response(&Error::Internal(format!("handler: {e}"))),
    }
}

/// Authenticates, then runs `f` off the async runtime.
async fn authed<F>(api: Arc<Api>, headers: HeaderMap, f: F) -> Response
where
    F: FnOnce(&Api, Call) -> Result<Reply> + Send + 'static,
{
    let auth = header(&headers, AUTHORIZATION.as_str());
    let idempotency_key = header(&headers, IDEMPOTENCY_HEADER);
    run(api, move |api| {
        let principal = api.authenticate(auth.as_deref())?;
        f(
            api,
            Call {
                principal,
                idempotency_key,
            },
        )
    })
    .await
}

fn ok(v: Value) -> Result<Reply> {
    Ok(Reply::Json(StatusCode::OK, v))
}

fn accepted(v: Value) -> Result<Reply> {
    Ok(Reply::Json(StatusCode::ACCEPTED, v))
}

type S = State<Arc<Api>>;

async fn create_context(State(api): S, headers: HeaderMap, body: Bytes) -> Response {
    authed(api, headers, move |api, c| ok(api.create_context(&c.principal, parse_json(&body)?)?)).await
}

async fn get_context(State(api): S, headers: HeaderMap, Path(id): Path<String>) -> Response {
    authed(api, headers, move |api, c| ok(api.get_context(&c.principal, &id.into())?)).await
}

async fn clone_context(State(api): S, headers: HeaderMap, Path(id): Path<String>, body: Bytes) -> Response {
    authed(api, headers, move |api, c| {
        ok(api.clone_context(&c.principal, &id.into(), parse_json(&body)?)?)
    })
    .await
}

async fn render_context(State(api): S, headers: HeaderMap, Path(id): Path<String>) -> Response {
    let passphrase = header(&headers, PASSPHRASE_HEADER);
    authed(api, headers, move |api, c| {
        Ok(Reply::Text(api.render_context(&c.principal, &id.into(), passphrase.as_deref())?))
    })
    .await
}

async fn publish_context(State(api): S, headers: HeaderMap, Path(id): Path<String>, body: Bytes) -> Response {
    authed(api, headers, move |api, c| {
        ok(api.publish_context(&c.principal, &id.into(), parse_json(&body)?)?)
    })
    .await
}

async fn marketplace(State(api): S, headers: HeaderMap, RawQuery(query): RawQuery) -> Response {
    let mut category = None;
    let mut tags = Vec::new();
    for (k, v) in url::form_urlencoded::parse(query.unwrap_or_default().as_bytes()) {
        match k.as_ref() {
            "category" if !v.is_empty() => category = Some(v.into_owned()),
            "tag" if !v.is_empty() => tags.push(v.into_owned()),
            _ => {}
        }
    }
    authed(api, headers, move |api, _| ok(api.search_marketplace(category.as_deref(), &tags)?)).await
}

async fn open_pairing(State(api): S, headers: HeaderMap, body: Bytes) -> Response {
    authed(api, headers, move |api, c| ok(api.open_pairing(&c.principal, parse_json(&body)?)?)).await
}

async fn claim_pairing(State(api): S, Path(pin): Path<String>, body: Bytes) -> Response {
    run(api, move |api| Ok(Reply::Text(api.claim_pairing(&pin, parse_json(&body)?)?))).await
}

async fn machines(State(api): S, headers: HeaderMap) -> Response {
    authed(api, headers, move |api, c| ok(api.list_machines(&c.principal)?)).await
}

async fn create_definition(State(api): S, headers: HeaderMap, body: Bytes) -> Response {
    authed(api, headers, move |api, c| {
        let text = std::str::from_utf8(&body).map_err(|_| Error::BadRequest("body is not UTF-8".into()))?;
        ok(api.create_definition(&c.principal, text)?)
    })
    .await
}

async fn get_definition(State(api): S, headers: HeaderMap, Path(id): Path<String>) -> Response {
    authed(api, headers, move |api, c| ok(api.get_definition(&c.principal, &id.into())?)).await
}

async fn create_cluster(State(api): S, headers: HeaderMap, body: Bytes) -> Response {
    authed(api, headers, move |api, c| {
        accepted(api.create_cluster(&c.principal, parse_json(&body)?, c.idempotency_key)?)
    })
    .await
}

async fn list_clusters(State(api): S, headers: HeaderMap) -> Response {
    authed(api, headers, move |api, c| ok(api.list_clusters(&c.principal)?)).await
}

async fn get_cluster(State(api): S, headers: HeaderMap, Path(id): Path<String>) -> Response {
    authed(api, headers, move |api, c| ok(api.get_cluster(&c.principal, &id.into())?)).await
}

async fn scale_service(
    State(api): S,
    headers: HeaderMap,
    Path((id, name)): Path<(String, String)>,
    body: Bytes,
) -> Response {
    authed(api, headers, move |api, c| {
        accepted(api.scale_service(&c.principal, &id.into(), &name, parse_json(&body)?, c.idempotency_key)?)
    })
    .await
}

async fn destroy_cluster(State(api): S, headers: HeaderMap, Path(id): Path<String>) -> Response {
    authed(api, headers, move |api, c| {
        accepted(api.destroy_cluster(&c.principal, &id.into(), c.idempotency_key)?)
    })
    .await
}

async fn instance_action(api: Arc<Api>, headers: HeaderMap, id: String, action: InstanceAction) -> Response {
    authed(api, headers, move |api, c| {
        accepted(api.instance_action(&c.principal, &id.into(), action, c.idempotency_key)?)
    })
    .await
}

async fn pause(State(api): S, headers: HeaderMap, Path(id): Path<String>) -> Response {
    instance_action(api, headers, id, InstanceAction::Pause).await
}

async fn resume(State(api): S, headers: HeaderMap, Path(id): Path<String>) -> Response {
    instance_action(api, headers, id, InstanceAction::Resume).await
}

async fn destroy_instance(State(api): S, headers: HeaderMap, Path(id): Path<String>) -> Response {
    instance_action(api, headers, id, InstanceAction::Destroy).await
}

async fn create_credential(State(api): S, headers: HeaderMap) -> Response {
    authed(api, headers, move |api, c| ok(api.create_credential(&c.principal)?)).await
}

async fn revoke_credential(State(api): S, headers: HeaderMap, Path(id): Path<String>) -> Response {
    authed(api, headers, move |api, c| ok(api.revoke_credential(&c.principal, &id.into())?)).await
}

async fn get_request(State(api): S, headers: HeaderMap, Path(id): Path<String>) -> Response {
    authed(api, headers, move |api, c| ok(api.get_request(&c.principal, &id.into())?)).await
}

async fn fallback(method: Method) -> Response {
    let err = Error::NotFound(format!("no route for this {method} request"));
    error_response(&err)
}

async fn log_requests(req: axum::extract::Request, next: axum::middleware::Next) -> Response {
    let method = req.method().clone();
    let path = req.uri().path().to_owned();
    let res = next.run(req).await;
    tracing::info!(%method, %path, status = res.status().as_u16(), "request");
    res
}

pub fn router(api: Api) -> Router {
    Router::new()
        .route("/api/v1/contexts", post(create_context))
        .route("/api/v1/contexts/{id}", get(get_context))
        .route("/api/v1/contexts/{id}/clone", post(clone_context))
        .route("/api/v1/contexts/{id}/render", get(render_context))
        .route("/api/v1/contexts/{id}/publish", post(publish_context))
        .route("/api/v1/marketplace", get(marketplace))
        .route("/api/v1/pairings", post(open_pairing))
        .route("/api/v1/pairings/{pin}/claim", post(claim_pairing))
        .route("/api/v1/machines", get(machines))
        .route("/api/v1/definitions", post(create_definition))
        .route("/api/v1/definitions/{id}", get(get_definition))
        .route("/api/v1/clusters", post(create_cluster).get(list_clusters))
        .route("/api/v1/clusters/{id}", get(get_cluster).delete(destroy_cluster))
        .route("/api/v1/clusters/{id}/services/{name}/scale", post(scale_service))
        .route("/api/v1/instances/{id}/pause", post(pause))
        .route("/api/v1/instances/{id}/resume", post(resume))
        .route("/api/v1/instances/{id}/destroy", post(destroy_instance))
        .route("/api/v1/credentials", post(create_credential))
        .route("/api/v1/credentials/{id}", delete(revoke_credential))
        .route("/api/v1/requests/{id}", get(get_request))
        .fallback(fallback)
        .layer(axum::middleware::from_fn(log_requests))
        .with_state(Arc::new(api))
}

/// A server running on its own runtime thread until shut down or dropped.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<thread::JoinHandle<std::io::Result<()>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server stops.
    pub fn wait(mut self) -> std::io::Result<()> {
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(std::io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }

    pub fn shutdown(mut self) -> std::io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        self.wait()
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Binds `addr` and serves `api` in a background thread.
pub fn spawn(api: Api, addr: &str) -> std::io::Result<ServerHandle> {
    let listener = std::net::TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let app = router(api);
    let thread = thread::Builder::new().name("cvmg-http".into()).spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener)?;
            axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await
        })
    })?;
    Ok(ServerHandle {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}
