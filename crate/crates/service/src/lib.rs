//! Read-only HTTP API over a finished analysis directory.
//!
//! Every response is a pure function of the loaded artifacts and the
//! request. The ROI endpoint runs the same [`cellnn::quantify::analyze_roi`]
//! the command line uses.

mod session;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use cellnn::ingest::CellType;
use cellnn::quantify::{analyze_roi, QuantifyError, RoiRequest};
use cellnn::SCHEMA_VERSION;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

pub use session::{Session, SessionError, ATLAS_FILE, DIAGNOSTICS_FILE, EMBEDDING_FILE};

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("server error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EmbeddingItem {
    pub sig_id: u64,
    pub x: f64,
    pub y: f64,
    pub signature: [u32; CellType::COUNT],
    pub weights: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EmbeddingPayload {
    pub schema_version: u32,
    pub k: u32,
    pub groups: Vec<String>,
    pub entries: Vec<EmbeddingItem>,
}

/// Response bodies that depend only on the session, rendered once.
struct Prepared {
    session: Session,
    meta: String,
    embedding: String,
    density: BTreeMap<String, String>,
    contours: BTreeMap<String, String>,
}

impl Prepared {
    fn new(session: Session) -> Self {
        let atlas = &session.embedding.atlas;
        let d = &session.diagnostics;
        let meta = json!({
            "schema_version": SCHEMA_VERSION,
            "groups": atlas.groups(),
            "anchor": atlas.anchor(),
            "k": atlas.k(),
            "atlas_entries": atlas.len(),
            "group_totals": (0..atlas.groups().len()).map(|g| atlas.group_total(g)).collect::<Vec<_>>(),
            "params": d.embed.params,
            "kl_history": d.embed.kl_history,
            "warnings": d.embed.warnings,
            "density_groups": session.densities.keys().collect::<Vec<_>>(),
            "bounds": session.embedding.bounds(),
        });
        let embedding = EmbeddingPayload {
            schema_version: SCHEMA_VERSION,
            k: atlas.k(),
            groups: atlas.groups().to_vec(),
            entries: atlas
                .entries()
                .iter()
                .zip(&session.embedding.coords)
                .map(|(e, p)| EmbeddingItem {
                    sig_id: e.sig_id(),
                    x: p[0],
                    y: p[1],
                    signature: e.signature.counts(),
                    weights: atlas.groups().iter().cloned().zip(e.weights.iter().copied()).collect(),
                })
                .collect(),
        };
        let density = session
            .densities
            .iter()
            .map(|(g, grid)| {
                let mut body = serde_json::to_value(cellnn::io::density_header(grid)).expect("grid serializes");
                body["values"] = json!(grid.values);
                (g.clone(), body.to_string())
            })
            .collect();
        let contours = session
            .contours
            .iter()
            .map(|(g, c)| (g.clone(), serde_json::to_string(c).expect("contours serialize")))
            .collect();
        Self {
            meta: meta.to_string(),
            embedding: serde_json::to_string(&embedding).expect("embedding serializes"),
            density,
            contours,
            session,
        }
    }
}

fn json_body(status: StatusCode, body: String) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn error(status: StatusCode, message: &str) -> Response {
    json_body(status, json!({ "error": message }).to_string())
}

#[derive(Deserialize)]
struct GroupQuery {
    group: Option<String>,
}

fn by_group(table: &BTreeMap<String, String>, q: GroupQuery) -> Response {
    match q.group {
        None => error(StatusCode::BAD_REQUEST, "missing group"),
        Some(g) => match table.get(&g) {
            Some(body) => json_body(StatusCode::OK, body.clone()),
            None => error(StatusCode::NOT_FOUND, "unknown group"),
        },
    }
}

async fn meta(State(p): State<Arc<Prepared>>) -> Response {
    json_body(StatusCode::OK, p.meta.clone())
}

async fn embedding(State(p): State<Arc<Prepared>>) -> Response {
    json_body(StatusCode::OK, p.embedding.clone())
}

async fn density(State(p): State<Arc<Prepared>>, Query(q): Query<GroupQuery>) -> Response {
    by_group(&p.density, q)
}

async fn contours(State(p): State<Arc<Prepared>>, Query(q): Query<GroupQuery>) -> Response {
    by_group(&p.contours, q)
}

async fn roi(State(p): State<Arc<Prepared>>, body: Bytes) -> Response {
    let text = match std::str::from_utf8(&body) {
        Ok(t) => t,
        Err(_) => return error(StatusCode::BAD_REQUEST, "request body must be UTF-8"),
    };
    let request = match RoiRequest::from_json(text) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, &format!("invalid ROI request: {e}")),
    };
    match analyze_roi(&p.session.embedding, &request) {
        Ok(a) => json_body(StatusCode::OK, serde_json::to_string(&a).expect("report serializes")),
        Err(QuantifyError::UnknownGroup(_)) => error(StatusCode::NOT_FOUND, "unknown group"),
        Err(e) => error(StatusCode::BAD_REQUEST, &e.to_string()),
    }
}

async fn healthz() -> Response {
    json_body(StatusCode::OK, json!({ "status": "ok" }).to_string())
}

/// API routes, plus static files from `ui_dir` under `/` when given.
pub fn router(session: Session, ui_dir: Option<PathBuf>) -> Router {
    let state = Arc::new(Prepared::new(session));
    let api = Router::new()
        .route("/api/meta", get(meta))
        .route("/api/embedding", get(embedding))
        .route("/api/density", get(density))
        .route("/api/contours", get(contours))
        .route("/api/roi", post(roi))
        .route("/healthz", get(healthz))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Binds `addr` and serves until Ctrl-C.
pub async fn serve(session: Session, addr: SocketAddr, ui_dir: Option<PathBuf>) -> Result<(), ServeError> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| ServeError::Bind { addr, source })?;
    log::info!("serving {} on http://{}", session.dir.display(), listener.local_addr()?);
    axum::serve(listener, router(session, ui_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
