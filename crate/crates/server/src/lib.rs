//! HTTP asset service for baked scenes.
//!
//! Serves `scene.json` and the per-submodel bundle files straight from disk
//! with strong ETags, single byte-range support and permissive CORS so a
//! browser viewer on another origin can stream submodels.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::extract::{Path as UrlPath, State};
use axum::http::header::{self, HeaderMap, HeaderValue};
use axum::http::{Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use sha2::{Digest, Sha256};
use tilefield_core::bake::bundle::{self, SceneManifest};
use tilefield_core::scene::CellIndex;
use tower_http::cors::{Any, CorsLayer};

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error(transparent)]
    Scene(#[from] tilefield_core::Error),

    #[error("{0}")]
    Io(#[from] std::io::Error),
}

struct AppState {
    root: PathBuf,
    submodels: Vec<CellIndex>,
}

/// Routes for the baked scene under `root`, which must contain `scene.json`.
pub fn router(root: &Path) -> Result<Router, ServerError> {
    let scene = SceneManifest::read(root)?;
    let state = Arc::new(AppState {
        root: root.to_path_buf(),
        submodels: scene.submodels.iter().map(|s| s.cell).collect(),
    });
    let cors = CorsLayer::new()
        .allow_origin(Any)
        .allow_methods([Method::GET, Method::HEAD])
        .allow_headers([header::RANGE, header::IF_NONE_MATCH])
        .expose_headers([
            header::CONTENT_LENGTH,
            header::CONTENT_RANGE,
            header::CONTENT_ENCODING,
            header::ETAG,
            header::ACCEPT_RANGES,
        ]);
    Ok(Router::new()
        .route("/scene.json", get(scene_json))
        .route("/submodels/{k}/{asset}", get(submodel_asset))
        .fallback(|| async { StatusCode::NOT_FOUND })
        .layer(cors)
        .with_state(state))
}

/// Serves until the process is interrupted.
pub async fn serve(root: &Path, addr: SocketAddr) -> Result<(), ServerError> {
    let app = router(root)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("serving {} on http://{}", root.display(), listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

async fn scene_json(State(state): State<Arc<AppState>>, headers: HeaderMap) -> Response {
    send_file(&state.root.join(bundle::SCENE_FILE), &headers).await
}

/// Asset names a submodel directory may contain.
fn is_bundle_file(name: &str) -> bool {
    name == bundle::MANIFEST
        || bundle::PLANE_FILES.contains(&name)
        || [
            bundle::ATLAS_FILE,
            bundle::INDIRECTION_FILE,
            bundle::DISTANCE_FILE,
            bundle::LATTICE_FILE,
        ]
        .contains(&name)
}

async fn submodel_asset(
    State(state): State<Arc<AppState>>,
    UrlPath((k, asset)): UrlPath<(String, String)>,
    headers: HeaderMap,
) -> Response {
    // Only canonical slugs of listed submodels and known file names map to
    // paths, so nothing outside the scene root is reachable.
    let Some(cell) = CellIndex::parse_slug(&k).filter(|c| c.slug() == k && state.submodels.contains(c)) else {
        return StatusCode::NOT_FOUND.into_response();
    };
    if !is_bundle_file(&asset) {
        return StatusCode::NOT_FOUND.into_response();
    }
    send_file(&SceneManifest::submodel_dir(&state.root, cell).join(asset), &headers).await
}

/// Parsed `Range` header against a body of `len` bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RangeRequest {
    Full,
    /// Inclusive byte range.
    Partial(u64, u64),
    Unsatisfiable,
}

/// Interprets a `Range` header. Only a single `bytes` range is honored;
/// other units and multi-range requests are ignored and get the full body.
pub fn parse_range(value: Option<&str>, len: u64) -> RangeRequest {
    let Some(spec) = value.and_then(|v| v.trim().strip_prefix("bytes=")) else {
        return RangeRequest::Full;
    };
    if spec.contains(',') {
        return RangeRequest::Full;
    }
    let Some((a, b)) = spec.trim().split_once('-') else {
        return RangeRequest::Unsatisfiable;
    };
    let parse = |s: &str| s.trim().parse::<u64>().ok();
    let range = match (a.trim().is_empty(), b.trim().is_empty()) {
        // Suffix: the last n bytes.
        (true, false) => parse(b).filter(|&n| n > 0 && len > 0).map(|n| (len.saturating_sub(n), len - 1)),
        (false, true) => parse(a).filter(|&s| s < len).map(|s| (s, len - 1)),
        (false, false) => match (parse(a), parse(b)) {
            (Some(s), Some(e)) if s <= e && s < len => Some((s, e.min(len - 1))),
            _ => None,
        },
        (true, true) => None,
    };
    match range {
        Some((s, e)) => RangeRequest::Partial(s, e),
        None => RangeRequest::Unsatisfiable,
    }
}

fn etag_of(bytes: &[u8]) -> String {
    format!("\"{}\"", hex::encode(Sha256::digest(bytes)))
}

async fn send_file(path: &Path, headers: &HeaderMap) -> Response {
    let bytes = match tokio::fs::read(path).await {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return StatusCode::NOT_FOUND.into_response(),
        Err(e) => {
            log::error!("{}: {e}", path.display());
            return StatusCode::INTERNAL_SERVER_ERROR.into_response();
        }
    };
    let etag = etag_of(&bytes);
    let len = bytes.len() as u64;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let mut out = HeaderMap::new();
    out.insert(header::ETAG, HeaderValue::from_str(&etag).expect("hex is a valid header"));
    out.insert(header::ACCEPT_RANGES, HeaderValue::from_static("bytes"));
    out.insert(header::CACHE_CONTROL, HeaderValue::from_static("no-cache"));
    if name.ends_with(".gz") {
        // Payloads are stored compressed; clients decode them transparently.
        out.insert(header::CONTENT_ENCODING, HeaderValue::from_static("gzip"));
        out.insert(header::CONTENT_TYPE, HeaderValue::from_static("application/octet-stream"));
    } else {
        out.insert(header::CONTENT_TYPE, HeaderValue::from_static("application/json"));
    }
    let matches = headers
        .get(header::IF_NONE_MATCH)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.split(',').any(|t| t.trim() == etag || t.trim() == "*"));
    if matches {
        return (StatusCode::NOT_MODIFIED, out).into_response();
    }
    let range = headers.get(header::RANGE).and_then(|v| v.to_str().ok());
    match parse_range(range, len) {
        RangeRequest::Full => {
            out.insert(header::CONTENT_LENGTH, HeaderValue::from(len));
            (StatusCode::OK, out, Body::from(bytes)).into_response()
        }
        RangeRequest::Partial(s, e) => {
            let body = bytes[s as usize..=e as usize].to_vec();
            out.insert(header::CONTENT_LENGTH, HeaderValue::from(body.len() as u64));
            let cr = format!("bytes {s}-{e}/{len}");
            out.insert(header::CONTENT_RANGE, HeaderValue::from_str(&cr).expect("ascii"));
            (StatusCode::PARTIAL_CONTENT, out, Body::from(body)).into_response()
        }
        RangeRequest::Unsatisfiable => {
            let cr = format!("bytes */{len}");
            out.insert(header::CONTENT_RANGE, HeaderValue::from_str(&cr).expect("ascii"));
            (StatusCode::RANGE_NOT_SATISFIABLE, out).into_response()
        }
    }
}
