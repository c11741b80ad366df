//! HTTP surfaces: the client gateway (`/api/v1`), the internal gateway
//! (`/internal/v1`) and the per-service routers used in multi-process mode.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use eyas_core::codec;
use eyas_core::model::Laterality;
use eyas_core::reporter::{render_export, ExportFormat, ReportDraft, ReportStatus};
use eyas_core::segmenter::{BackendDescriptor, Structure};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use crate::config::{ServiceConfig, ServiceName};
use crate::error::{ServiceError, ServiceResult};
use crate::internal::{run_blocking, InternalGateway};
use crate::link::InternalLink;
use crate::orchestrator::{findings_file, mask_file, Orchestrator};
use crate::stages::{self, StageContext, OP_APPROVE};
use crate::store::{JobRecord, JobState, JobStore, StructureState, REPORT_FILE};
use crate::wire::ApproveRequest;

pub struct ClientState {
    pub link: InternalLink,
    pub store: Arc<JobStore>,
    pub orchestrator: Arc<Orchestrator>,
    pub max_upload_bytes: usize,
}

type Shared = State<Arc<ClientState>>;

fn parse_structure(s: &str) -> ServiceResult<Structure> {
    s.parse().map_err(|_| ServiceError::not_found(format!("no structure '{s}'")))
}

#[derive(Debug, Deserialize)]
struct SubmitParams {
    laterality: Option<String>,
    backend: Option<String>,
}

async fn submit(
    State(st): Shared,
    Query(p): Query<SubmitParams>,
    body: Result<Bytes, BytesRejection>,
) -> ServiceResult<Response> {
    let body = body.map_err(|e| {
        ServiceError::new(StatusCode::PAYLOAD_TOO_LARGE, "payload_too_large", format!("{e} (limit {} bytes)", st.max_upload_bytes))
    })?;
    let laterality: Laterality = match p.laterality.as_deref() {
        None => Laterality::Unknown,
        Some(l) => l.parse().map_err(|e: eyas_core::Error| ServiceError::bad_request(e.to_string()))?,
    };
    if let Some(b) = &p.backend {
        st.link.check_reference(b).await?;
    }
    let img = codec::decode_image(&body, laterality)?;
    img.check_ingest_limits()?;
    let rec = JobRecord::new(img.image_id(), laterality, p.backend.clone());
    st.store.create(&rec, &body).await?;
    tokio::spawn(st.orchestrator.clone().run(rec.job_id.clone()));
    Ok((
        StatusCode::ACCEPTED,
        Json(json!({ "job_id": rec.job_id, "state": rec.state })),
    )
        .into_response())
}

async fn load_report(store: &JobStore, id: &str) -> ServiceResult<Option<ReportDraft>> {
    store
        .artifact(id, REPORT_FILE)
        .await?
        .map(|b| serde_json::from_slice(&b).map_err(|e| ServiceError::internal(e.to_string())))
        .transpose()
}

async fn get_analysis(State(st): Shared, Path(id): Path<String>) -> ServiceResult<Json<Value>> {
    let job = st.store.get(&id).await?;
    let report = load_report(&st.store, &id).await?;
    Ok(Json(json!({ "job": job, "report": report })))
}

async fn get_structure(State(st): Shared, Path((id, s)): Path<(String, String)>) -> ServiceResult<Json<Value>> {
    let s = parse_structure(&s)?;
    let job = st.store.get(&id).await?;
    let status = job.structure(s).clone();
    if status.state == StructureState::Pending {
        return Err(ServiceError::pending(format!("{s} is still running for job {id}")));
    }
    let base = format!("/api/v1/analyses/{id}/structures/{s}");
    let has = |name| st.store.artifact(&id, name);
    let mask = has(mask_file(s)).await?.map(|_| format!("{base}/mask.png"));
    let av_map = match s {
        Structure::Vessels => has(eyas_core::pipeline::AV_MAP_FILE).await?.map(|_| format!("{base}/av.png")),
        _ => None,
    };
    let stored: Option<Value> = match has(findings_file(s)).await? {
        Some(b) => Some(serde_json::from_slice(&b).map_err(|e| ServiceError::internal(e.to_string()))?),
        None => None,
    };
    let (roi, findings) = match (s, stored) {
        (Structure::Vessels, f) => (Value::Null, f.unwrap_or(Value::Null)),
        (_, Some(v)) => (v["roi"].clone(), v["findings"].clone()),
        (_, None) => (Value::Null, Value::Null),
    };
    Ok(Json(json!({
        "job_id": id,
        "structure": s,
        "state": status.state,
        "backend": status.backend,
        "error": status.error,
        "roi": roi,
        "mask": mask,
        "av_map": av_map,
        "findings": findings,
    })))
}

async fn get_structure_file(
    State(st): Shared,
    Path((id, s, file)): Path<(String, String, String)>,
) -> ServiceResult<Response> {
    let s = parse_structure(&s)?;
    let name = match (s, file.as_str()) {
        (_, "mask.png") => mask_file(s),
        (Structure::Vessels, "av.png") => eyas_core::pipeline::AV_MAP_FILE,
        _ => return Err(ServiceError::not_found(format!("no file '{file}' for {s}"))),
    };
    let job = st.store.get(&id).await?;
    if job.structure(s).state == StructureState::Pending {
        return Err(ServiceError::pending(format!("{s} is still running for job {id}")));
    }
    let bytes = st
        .store
        .artifact(&id, name)
        .await?
        .ok_or_else(|| ServiceError::not_found(format!("{s} produced no {file}")))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

#[derive(Debug, Deserialize)]
struct ReportParams {
    format: Option<ExportFormat>,
}

async fn get_report(State(st): Shared, Path(id): Path<String>, Query(p): Query<ReportParams>) -> ServiceResult<Response> {
    let job = st.store.get(&id).await?;
    let report = load_report(&st.store, &id)
        .await?
        .ok_or_else(|| ServiceError::conflict(format!("job {id} has no report (state {:?})", job.state)))?;
    let format = p.format.unwrap_or(ExportFormat::Json);
    let mime = match format {
        ExportFormat::Json => "application/json",
        ExportFormat::Txt => "text/plain; charset=utf-8",
    };
    Ok(([(header::CONTENT_TYPE, mime)], render_export(&report, format)).into_response())
}

#[derive(Debug, Deserialize)]
struct FinalizeRequest {
    #[serde(default)]
    edited_text: Option<String>,
    #[serde(default)]
    approve: bool,
}

async fn finalize_report(
    State(st): Shared,
    Path(id): Path<String>,
    Json(req): Json<FinalizeRequest>,
) -> ServiceResult<Json<ReportDraft>> {
    let _g = st.store.lock(&id).await;
    let job = st.store.get(&id).await?;
    if job.state != JobState::Done {
        return Err(ServiceError::conflict(format!("job {id} is {:?}, not done", job.state).to_lowercase()));
    }
    let report = load_report(&st.store, &id)
        .await?
        .ok_or_else(|| ServiceError::internal(format!("job {id} is done but has no report")))?;
    let next = if req.approve {
        let call = ApproveRequest { report, edited_text: req.edited_text };
        st.link.call::<_, ReportDraft>(ServiceName::Report, OP_APPROVE, &call).await?
    } else {
        if report.status == ReportStatus::Approved {
            return Err(eyas_core::Error::ReportState(format!("report {} is approved and read-only", report.report_id)).into());
        }
        ReportDraft { edited_text: req.edited_text, ..report }
    };
    let bytes = serde_json::to_vec_pretty(&next).map_err(|e| ServiceError::internal(e.to_string()))?;
    st.store.put_artifact(&id, REPORT_FILE, &bytes).await?;
    st.store.update_locked(&id, |_| Ok(())).await?;
    Ok(Json(next))
}

async fn client_backends(State(st): Shared) -> ServiceResult<Json<Value>> {
    Ok(Json(json!({ "backends": st.link.backends().await? })))
}

async fn client_health(State(st): Shared) -> ServiceResult<Json<Value>> {
    Ok(Json(serde_json::to_value(st.link.health().await?).map_err(|e| ServiceError::internal(e.to_string()))?))
}

async fn not_found() -> ServiceError {
    ServiceError::not_found("no such endpoint")
}

/// The client gateway: public API plus the static review client.
pub fn client_router(state: Arc<ClientState>, cfg: &ServiceConfig) -> Router {
    let api = Router::new()
        .route("/api/v1/analyses", post(submit))
        .route("/api/v1/analyses/{id}", get(get_analysis))
        .route("/api/v1/analyses/{id}/structures/{s}", get(get_structure))
        .route("/api/v1/analyses/{id}/structures/{s}/{file}", get(get_structure_file))
        .route("/api/v1/analyses/{id}/report", get(get_report).put(finalize_report))
        .route("/api/v1/backends", get(client_backends))
        .route("/api/v1/health", get(client_health))
        .layer(DefaultBodyLimit::max(cfg.max_upload_bytes))
        .with_state(state);
    match &cfg.static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api.fallback(not_found),
    }
}

#[derive(Debug, Deserialize)]
struct ListParams {
    structure: Option<String>,
}

type Internal = State<Arc<InternalGateway>>;

async fn internal_call(State(gw): Internal, Path((service, op)): Path<(String, String)>, Json(body): Json<Value>) -> ServiceResult<Json<Value>> {
    let service: ServiceName = service.parse()?;
    Ok(Json(gw.call(service, &op, body).await?))
}

async fn list_backends(State(gw): Internal, Query(p): Query<ListParams>) -> ServiceResult<Json<Value>> {
    let structure = p.structure.as_deref().map(parse_structure).transpose()?;
    Ok(Json(json!({ "backends": gw.list(structure) })))
}

async fn register_backend(State(gw): Internal, Json(desc): Json<BackendDescriptor>) -> ServiceResult<Response> {
    let desc = gw.register(desc)?;
    Ok((StatusCode::CREATED, Json(json!({ "backend": desc }))).into_response())
}

async fn internal_health(State(gw): Internal) -> Json<Value> {
    Json(serde_json::to_value(gw.health().await).unwrap_or(Value::Null))
}

pub fn internal_router(gw: Arc<InternalGateway>) -> Router {
    Router::new()
        .route("/internal/v1/backends", get(list_backends).post(register_backend))
        .route("/internal/v1/health", get(internal_health))
        .route("/internal/v1/{service}/{op}", post(internal_call))
        .layer(DefaultBodyLimit::disable())
        .fallback(not_found)
        .with_state(gw)
}

#[derive(Clone)]
struct ServiceState {
    ctx: Arc<StageContext>,
    service: ServiceName,
    permits: Arc<Semaphore>,
}

async fn service_op(State(st): State<ServiceState>, Path(op): Path<String>, Json(body): Json<Value>) -> ServiceResult<Json<Value>> {
    let ServiceState { ctx, service, permits } = st;
    Ok(Json(run_blocking(&permits, move || stages::handle(&ctx, service, &op, body)).await??))
}

async fn service_health(State(st): State<ServiceState>) -> Json<Value> {
    Json(json!({ "status": "ok", "service": st.service }))
}

/// One structure or report service on its own listener.
pub fn service_router(ctx: Arc<StageContext>, service: ServiceName, permits: Arc<Semaphore>) -> Router {
    Router::new()
        .route("/health", get(service_health))
        .route("/{op}", post(service_op))
        .layer(DefaultBodyLimit::disable())
        .fallback(not_found)
        .with_state(ServiceState { ctx, service, permits })
}
