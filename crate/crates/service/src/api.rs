//! The `/api/v1` HTTP surface.

use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use biodw_core::analytics::{
    AttributeValueView, GroupComparison, Page, PatientGroup, PatientPage, PatientRecord, RollupRow, SeriesPoint,
};
use biodw_core::etl::{EtlProfile, LoadReport};
use biodw_core::metadata::MetadataEntry;
use biodw_core::store::{AuditReport, DocumentEntry};
use biodw_core::{OpenMode, Warehouse};
use serde::{Deserialize, Serialize};
use tokio::sync::RwLock;

use crate::ops::{self, GroupBody, Listing, OpError, Preview, Registration, RollupParams, SchemaView};

pub const GENERATION_HEADER: &str = "x-store-generation";

/// Settings of a running service.
#[derive(Clone, Debug)]
pub struct ApiConfig {
    pub bind: SocketAddr,
    pub store: PathBuf,
    pub token: Option<String>,
    pub page_size: usize,
    pub read_only: bool,
    /// Directory `POST /etl/run` resolves file references against;
    /// `<store>/incoming` when unset.
    pub ingest_dir: Option<PathBuf>,
}

impl ApiConfig {
    pub fn validate(&self) -> Result<(), String> {
        match &self.token {
            Some(t) if t.trim().is_empty() => Err("the bearer token must not be empty".into()),
            None if !self.bind.ip().is_loopback() => {
                Err(format!("a bearer token is required to serve on non-loopback address {}", self.bind.ip()))
            }
            _ if self.page_size == 0 => Err("page size must be positive".into()),
            _ => Ok(()),
        }
    }
}

/// Options of the router independent of sockets.
#[derive(Clone, Debug)]
pub struct ServiceOptions {
    pub token: Option<String>,
    pub page_size: usize,
    pub read_only: bool,
    pub ingest_dir: Option<PathBuf>,
}

impl Default for ServiceOptions {
    fn default() -> Self {
        Self { token: None, page_size: biodw_core::analytics::DEFAULT_PAGE_SIZE, read_only: false, ingest_dir: None }
    }
}

pub struct AppState {
    wh: RwLock<Warehouse>,
    options: ServiceOptions,
}

impl AppState {
    pub fn new(wh: Warehouse, options: ServiceOptions) -> Arc<Self> {
        Arc::new(Self { wh: RwLock::new(wh), options })
    }

    pub async fn generation(&self) -> u64 {
        self.wh.read().await.generation()
    }

    fn page(&self, page: Option<usize>, size: Option<usize>) -> Page {
        Page::new(page, size.or(Some(self.options.page_size)))
    }

    fn writable(&self) -> Result<(), ApiError> {
        if self.options.read_only {
            return Err(ApiError::ReadOnly);
        }
        Ok(())
    }

    async fn ingest_dir(&self) -> Option<PathBuf> {
        if let Some(d) = &self.options.ingest_dir {
            return Some(d.clone());
        }
        self.wh.read().await.location().map(|l| l.join("incoming"))
    }
}

#[derive(Debug)]
pub enum ApiError {
    Op(OpError),
    Unauthorized,
    ReadOnly,
}

impl From<OpError> for ApiError {
    fn from(e: OpError) -> Self {
        ApiError::Op(e)
    }
}

#[derive(Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

fn error_body(status: StatusCode, message: &str) -> Response {
    (status, Json(ErrorBody { error: message.into() })).into_response()
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        match self {
            ApiError::Unauthorized => {
                let mut r = error_body(StatusCode::UNAUTHORIZED, "unauthorized");
                r.headers_mut().insert(header::WWW_AUTHENTICATE, HeaderValue::from_static("Bearer"));
                r
            }
            ApiError::ReadOnly => {
                let mut r = error_body(StatusCode::METHOD_NOT_ALLOWED, "the service is read-only");
                r.headers_mut().insert(header::ALLOW, HeaderValue::from_static("GET"));
                r
            }
            ApiError::Op(e) => {
                let status = match &e {
                    OpError::NotFound(_) => StatusCode::NOT_FOUND,
                    OpError::BadRequest(_) => StatusCode::BAD_REQUEST,
                    OpError::Conflict(_) => StatusCode::CONFLICT,
                    OpError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
                };
                error_body(status, e.message())
            }
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn same_secret(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

async fn authenticate(State(s): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    if let Some(token) = &s.options.token {
        let presented = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .map(str::trim);
        if !presented.is_some_and(|p| same_secret(p.as_bytes(), token.as_bytes())) {
            return ApiError::Unauthorized.into_response();
        }
    }
    next.run(req).await
}

async fn stamp_generation(State(s): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    let mut response = next.run(req).await;
    let generation = s.generation().await;
    response
        .headers_mut()
        .insert(GENERATION_HEADER, HeaderValue::from_str(&generation.to_string()).expect("digits"));
    response
}

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/patients", get(patients))
        .route("/patients/{key}/record", get(record))
        .route("/patients/{key}/series", get(series))
        .route("/groups", get(list_groups).post(create_group))
        .route("/groups/preview", get(preview))
        .route("/groups/{name}", get(show_group).put(modify_group).delete(delete_group))
        .route("/compare", post(compare))
        .route("/rollup", get(rollup))
        .route("/export/attribute-value", get(export_av))
        .route("/documents/{id}", get(document))
        .route("/reports/{id}/documents", get(report_documents))
        .route("/etl/run", post(etl_run))
        .route("/schema", get(schema))
        .route("/metadata", get(list_metadata).post(add_metadata))
        .route("/profiles", get(list_profiles).put(add_profile))
        .route("/audit", get(audit));
    Router::new()
        .nest("/api/v1", api)
        .layer(middleware::from_fn_with_state(state.clone(), authenticate))
        .layer(middleware::from_fn_with_state(state.clone(), stamp_generation))
        .with_state(state)
}

#[derive(Debug, Default, Deserialize)]
pub struct PageQuery {
    pub page: Option<usize>,
    pub page_size: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
pub struct SearchQuery {
    #[serde(default)]
    pub q: String,
    pub page: Option<usize>,
    pub page_size: Option<usize>,
}

async fn patients(State(s): State<Arc<AppState>>, Query(q): Query<SearchQuery>) -> ApiResult<Json<PatientPage>> {
    let wh = s.wh.read().await;
    Ok(Json(ops::search(&wh, &q.q, s.page(q.page, q.page_size))?))
}

#[derive(Debug, Deserialize)]
pub struct RecordQuery {
    pub mart: String,
}

async fn record(
    State(s): State<Arc<AppState>>,
    UrlPath(key): UrlPath<String>,
    Query(q): Query<RecordQuery>,
) -> ApiResult<Json<PatientRecord>> {
    let wh = s.wh.read().await;
    Ok(Json(ops::record(&wh, &key, &q.mart)?))
}

#[derive(Debug, Deserialize)]
pub struct SeriesQuery {
    pub analysis: String,
    pub from: Option<String>,
    pub to: Option<String>,
}

async fn series(
    State(s): State<Arc<AppState>>,
    UrlPath(key): UrlPath<String>,
    Query(q): Query<SeriesQuery>,
) -> ApiResult<Json<Vec<SeriesPoint>>> {
    let wh = s.wh.read().await;
    Ok(Json(ops::series(&wh, &key, &q.analysis, q.from.as_deref(), q.to.as_deref())?))
}

async fn list_groups(State(s): State<Arc<AppState>>, Query(q): Query<PageQuery>) -> Json<Listing<PatientGroup>> {
    let wh = s.wh.read().await;
    Json(ops::groups(&wh, s.page(q.page, q.page_size)))
}

async fn show_group(State(s): State<Arc<AppState>>, UrlPath(name): UrlPath<String>) -> ApiResult<Json<PatientGroup>> {
    let wh = s.wh.read().await;
    Ok(Json(ops::group(&wh, &name)?))
}

#[derive(Debug, Deserialize)]
pub struct PreviewQuery {
    pub criteria: String,
}

async fn preview(State(s): State<Arc<AppState>>, Query(q): Query<PreviewQuery>) -> ApiResult<Json<Preview>> {
    let wh = s.wh.read().await;
    Ok(Json(ops::preview(&wh, &q.criteria)?))
}

async fn create_group(State(s): State<Arc<AppState>>, Json(body): Json<GroupBody>) -> ApiResult<(StatusCode, Json<PatientGroup>)> {
    s.writable()?;
    let mut wh = s.wh.write().await;
    Ok((StatusCode::CREATED, Json(ops::create(&mut wh, &body.name, &body.criteria)?)))
}

#[derive(Debug, Default, Deserialize)]
pub struct ModifyBody {
    pub criteria: Option<String>,
}

async fn modify_group(
    State(s): State<Arc<AppState>>,
    UrlPath(name): UrlPath<String>,
    Json(body): Json<ModifyBody>,
) -> ApiResult<Json<PatientGroup>> {
    s.writable()?;
    let mut wh = s.wh.write().await;
    Ok(Json(ops::modify(&mut wh, &name, body.criteria.as_deref())?))
}

async fn delete_group(State(s): State<Arc<AppState>>, UrlPath(name): UrlPath<String>) -> ApiResult<Json<PatientGroup>> {
    s.writable()?;
    let mut wh = s.wh.write().await;
    Ok(Json(ops::delete(&mut wh, &name)?))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CompareBody {
    pub groups: Vec<String>,
    pub analysis: String,
}

async fn compare(State(s): State<Arc<AppState>>, Json(body): Json<CompareBody>) -> ApiResult<Json<GroupComparison>> {
    let wh = s.wh.read().await;
    Ok(Json(ops::compare(&wh, &body.groups, &body.analysis)?))
}

async fn rollup(State(s): State<Arc<AppState>>, Query(q): Query<RollupParams>) -> ApiResult<Json<Vec<RollupRow>>> {
    let wh = s.wh.read().await;
    Ok(Json(ops::rollup(&wh, &q)?))
}

#[derive(Debug, Deserialize)]
pub struct ExportQuery {
    pub mart: String,
    pub group: Option<String>,
    pub as_of: Option<String>,
}

fn wants_json(headers: &HeaderMap) -> bool {
    headers
        .get(header::ACCEPT)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.contains("application/json"))
}

/// CSV download, or the view as JSON when the client accepts JSON.
async fn export_av(State(s): State<Arc<AppState>>, headers: HeaderMap, Query(q): Query<ExportQuery>) -> ApiResult<Response> {
    let wh = s.wh.read().await;
    let view: AttributeValueView = ops::export_av(&wh, &q.mart, q.group.as_deref(), q.as_of.as_deref())?;
    if wants_json(&headers) {
        return Ok(Json(view).into_response());
    }
    let disposition = format!("attachment; filename=\"{}-attribute-value.csv\"", safe_filename(&q.mart));
    Ok((
        [
            (header::CONTENT_TYPE, "text/csv; charset=utf-8".to_string()),
            (header::CONTENT_DISPOSITION, disposition),
        ],
        view.to_csv(),
    )
        .into_response())
}

fn safe_filename(text: &str) -> String {
    text.chars()
        .map(|c| if (c.is_ascii_graphic() && !matches!(c, '"' | '\\' | '/')) || c == ' ' { c } else { '_' })
        .collect()
}

async fn document(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let wh = s.wh.read().await;
    let (entry, bytes) = ops::document(&wh, &id)?;
    let name = entry.caption.as_deref().map(safe_filename).unwrap_or_else(|| entry.id.to_string());
    let content_type = HeaderValue::from_str(&entry.media_type).unwrap_or(HeaderValue::from_static("application/octet-stream"));
    let disposition = HeaderValue::from_str(&format!("inline; filename=\"{name}\"")).expect("ascii filename");
    let mut response = Response::new(Body::from(bytes));
    response.headers_mut().insert(header::CONTENT_TYPE, content_type);
    response.headers_mut().insert(header::CONTENT_DISPOSITION, disposition);
    Ok(response)
}

async fn report_documents(
    State(s): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<PageQuery>,
) -> ApiResult<Json<Listing<DocumentEntry>>> {
    let wh = s.wh.read().await;
    Ok(Json(ops::report_documents(&wh, &id, s.page(q.page, q.page_size))?))
}

/// `file` names a file under the ingest directory unless `content` is given,
/// in which case `file` is only the name recorded in the report.
#[derive(Debug, Serialize, Deserialize)]
pub struct EtlBody {
    pub profile: String,
    pub file: String,
    pub content: Option<String>,
    pub batch: Option<String>,
}

fn ingest_path(dir: &Path, file: &str) -> Result<PathBuf, OpError> {
    let rel = Path::new(file);
    let plain = !file.is_empty() && rel.components().all(|c| matches!(c, Component::Normal(_)));
    if !plain {
        return Err(OpError::BadRequest(format!("file reference `{file}` must be a relative path inside the ingest directory")));
    }
    Ok(dir.join(rel))
}

async fn etl_run(State(s): State<Arc<AppState>>, Json(body): Json<EtlBody>) -> ApiResult<(StatusCode, Json<LoadReport>)> {
    s.writable()?;
    let path = match &body.content {
        Some(_) => None,
        None => {
            let dir = s
                .ingest_dir()
                .await
                .ok_or_else(|| OpError::BadRequest("no ingest directory; send the file content inline".into()))?;
            Some(ingest_path(&dir, &body.file)?)
        }
    };
    let mut wh = s.wh.write().await;
    let report = match (&body.content, path) {
        (Some(text), _) => ops::etl_text(&mut wh, &body.profile, &body.file, text, body.batch.as_deref())?,
        (None, Some(path)) => ops::etl_file(&mut wh, &body.profile, &path, body.batch.as_deref())?,
        (None, None) => unreachable!("path resolved above"),
    };
    let status = if report.failure.is_some() { StatusCode::UNPROCESSABLE_ENTITY } else { StatusCode::OK };
    Ok((status, Json(report)))
}

async fn schema(State(s): State<Arc<AppState>>) -> ApiResult<Json<SchemaView>> {
    let wh = s.wh.read().await;
    Ok(Json(ops::schema(&wh)?))
}

async fn list_metadata(State(s): State<Arc<AppState>>, Query(q): Query<PageQuery>) -> Json<Listing<MetadataEntry>> {
    let wh = s.wh.read().await;
    Json(ops::metadata(&wh, s.page(q.page, q.page_size)))
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum MetadataBody {
    Many(Vec<MetadataEntry>),
    One(MetadataEntry),
}

async fn add_metadata(State(s): State<Arc<AppState>>, Json(body): Json<MetadataBody>) -> ApiResult<Json<Vec<Registration>>> {
    s.writable()?;
    let entries = match body {
        MetadataBody::Many(v) => v,
        MetadataBody::One(e) => vec![e],
    };
    let mut wh = s.wh.write().await;
    Ok(Json(ops::register_metadata(&mut wh, entries)?))
}

async fn list_profiles(State(s): State<Arc<AppState>>) -> Json<Vec<EtlProfile>> {
    let wh = s.wh.read().await;
    Json(ops::profiles(&wh))
}

/// Body is the profile TOML.
async fn add_profile(State(s): State<Arc<AppState>>, body: String) -> ApiResult<Json<EtlProfile>> {
    s.writable()?;
    let mut wh = s.wh.write().await;
    Ok(Json(ops::register_profile(&mut wh, &body)?))
}

async fn audit(State(s): State<Arc<AppState>>) -> Json<AuditReport> {
    let wh = s.wh.read().await;
    Json(ops::audit(&wh))
}

/// Opens the store and serves until interrupted.
pub async fn serve(config: ApiConfig) -> anyhow::Result<()> {
    config.validate().map_err(anyhow::Error::msg)?;
    let wh = Warehouse::open(&config.store, OpenMode::Open)?;
    let options = ServiceOptions {
        token: config.token.clone(),
        page_size: config.page_size,
        read_only: config.read_only,
        ingest_dir: config.ingest_dir.clone(),
    };
    let listener = tokio::net::TcpListener::bind(config.bind).await?;
    eprintln!(
        "serving {} on http://{}/api/v1{}",
        config.store.display(),
        listener.local_addr()?,
        if config.read_only { " (read-only)" } else { "" }
    );
    axum::serve(listener, router(AppState::new(wh, options)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
