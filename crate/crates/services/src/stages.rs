//! The structure services and the report service. Each operation takes and
//! returns JSON so that in-process and HTTP dispatch see the same bytes.

use std::collections::BTreeSet;
use std::sync::Arc;

use eyas_core::codec;
use eyas_core::config::AnalysisConfig;
use eyas_core::pipeline;
use eyas_core::reporter;
use eyas_core::segmenter::{
    BackendDescriptor, BackendKind, BuiltinBackend, SegmentationBackend, BUILTIN_NAME, BUILTIN_VERSION,
};
use eyas_core::Error as CoreError;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::config::ServiceName;
use crate::error::{ServiceError, ServiceResult};
use crate::remote::RemoteBackend;
use crate::wire::*;

pub const OP_ANALYZE: &str = "analyze";
pub const OP_SEGMENT: &str = "segment";
pub const OP_CALIBER: &str = "caliber";
pub const OP_SYNTHESIZE: &str = "synthesize";
pub const OP_APPROVE: &str = "approve";

/// Stateless between requests: only configuration lives here.
#[derive(Debug, Clone)]
pub struct StageContext {
    pub analysis: Arc<AnalysisConfig>,
    pub inject_failures: BTreeSet<ServiceName>,
}

/// Instantiates the backend a descriptor names.
pub fn backend_for(desc: &BackendDescriptor, cfg: &AnalysisConfig) -> ServiceResult<Arc<dyn SegmentationBackend>> {
    match desc.kind {
        BackendKind::Builtin if desc.name == BUILTIN_NAME && desc.version == BUILTIN_VERSION => {
            Ok(Arc::new(BuiltinBackend::new(desc.structure, cfg.segmenter.clone())))
        }
        BackendKind::Builtin => Err(CoreError::UnknownBackend(format!("{} is not a builtin", desc.id())).into()),
        BackendKind::Remote => Ok(Arc::new(RemoteBackend::new(desc.clone())?)),
    }
}

fn parse<T: DeserializeOwned>(body: Value) -> ServiceResult<T> {
    serde_json::from_value(body).map_err(|e| ServiceError::bad_request(e.to_string()))
}

fn reply<T: Serialize>(v: T) -> ServiceResult<Value> {
    serde_json::to_value(v).map_err(|e| ServiceError::internal(e.to_string()))
}

fn image_and_backend(
    req: &StageRequest,
    cfg: &AnalysisConfig,
) -> ServiceResult<(eyas_core::model::FundusImage, Arc<dyn SegmentationBackend>)> {
    let img = codec::decode_image(&req.image, req.laterality)?;
    Ok((img, backend_for(&req.backend, cfg)?))
}

fn region_reply<F>(r: pipeline::RegionResult<F>) -> ServiceResult<RegionReply<F>> {
    Ok(RegionReply {
        roi: r.roi,
        mask_png: codec::encode_mask_png(&r.mask)?,
        findings: r.findings,
    })
}

/// Runs `op` on `service`. Blocking; call from a worker thread.
pub fn handle(ctx: &StageContext, service: ServiceName, op: &str, body: Value) -> ServiceResult<Value> {
    if ctx.inject_failures.contains(&service) {
        return Err(CoreError::BackendFailure(format!("injected failure in the {service} service")).into());
    }
    let cfg = ctx.analysis.as_ref();
    match (service, op) {
        (ServiceName::Onh, OP_ANALYZE) => {
            let req: StageRequest = parse(body)?;
            let (img, backend) = image_and_backend(&req, cfg)?;
            reply(region_reply(pipeline::run_onh(&img, backend.as_ref(), cfg)?)?)
        }
        (ServiceName::Macula, OP_ANALYZE) => {
            let req: StageRequest = parse(body)?;
            let (img, backend) = image_and_backend(&req, cfg)?;
            reply(region_reply(pipeline::run_macula(&img, backend.as_ref(), cfg)?)?)
        }
        (ServiceName::Vessels, OP_SEGMENT) => {
            let req: StageRequest = parse(body)?;
            let (img, backend) = image_and_backend(&req, cfg)?;
            let mask = pipeline::run_vessel_mask(&img, backend.as_ref(), cfg)?;
            reply(VesselMaskReply {
                mask_png: codec::encode_mask_png(mask.vessel())?,
                av_png: codec::encode_av_png(&mask)?,
                backend: backend.descriptor().id(),
            })
        }
        (ServiceName::Vessels, OP_CALIBER) => {
            let req: CaliberRequest = parse(body)?;
            let mask = codec::decode_vessel_pngs(&req.mask_png, &req.av_png)?;
            reply(pipeline::run_vessel_findings(&mask, req.disc.as_ref(), cfg, &req.backend)?)
        }
        (ServiceName::Report, OP_SYNTHESIZE) => {
            let req: SynthesizeRequest = parse(body)?;
            reply(pipeline::synthesize_report(&req.image_id, req.sections, &req.errors, cfg)?)
        }
        (ServiceName::Report, OP_APPROVE) => {
            let req: ApproveRequest = parse(body)?;
            reply(reporter::approve(&req.report, req.edited_text)?)
        }
        _ => Err(ServiceError::not_found(format!("{service} has no operation '{op}'"))),
    }
}
