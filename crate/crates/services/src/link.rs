//! How the client gateway reaches the internal gateway: a direct call in
//! single-process mode, HTTP otherwise. Both paths exchange the same JSON.

use std::sync::Arc;

use eyas_core::segmenter::BackendDescriptor;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::config::ServiceName;
use crate::error::{ServiceError, ServiceResult};
use crate::internal::{post_json, Health, InternalGateway};

#[derive(Clone)]
pub enum InternalLink {
    Local(Arc<InternalGateway>),
    Http { client: reqwest::Client, base: String },
}

fn decode<T: DeserializeOwned>(v: Value) -> ServiceResult<T> {
    serde_json::from_value(v).map_err(|e| ServiceError::internal(e.to_string()))
}

impl InternalLink {
    pub async fn call<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        service: ServiceName,
        op: &str,
        req: &Req,
    ) -> ServiceResult<Resp> {
        let body = serde_json::to_value(req).map_err(|e| ServiceError::internal(e.to_string()))?;
        let out = match self {
            InternalLink::Local(gw) => gw.call(service, op, body).await?,
            InternalLink::Http { client, base } => {
                post_json(client, &format!("{base}/internal/v1/{service}/{op}"), &body).await?
            }
        };
        decode(out)
    }

    pub async fn backends(&self) -> ServiceResult<Vec<BackendDescriptor>> {
        match self {
            InternalLink::Local(gw) => Ok(gw.list(None)),
            InternalLink::Http { client, base } => {
                let url = format!("{base}/internal/v1/backends");
                let resp = client
                    .get(&url)
                    .send()
                    .await
                    .map_err(|e| ServiceError::unavailable(format!("{url}: {e}")))?;
                let v: Value = resp.json().await.map_err(|e| ServiceError::unavailable(format!("{url}: {e}")))?;
                decode(v["backends"].clone())
            }
        }
    }

    /// Fails with unknown-backend when `reference` names no registered backend.
    pub async fn check_reference(&self, reference: &str) -> ServiceResult<()> {
        match self {
            InternalLink::Local(gw) => gw.check_reference(reference),
            InternalLink::Http { .. } => {
                eyas_core::segmenter::parse_backend_ref(reference)?;
                if self.backends().await?.iter().any(|d| d.id() == reference) {
                    Ok(())
                } else {
                    Err(eyas_core::Error::UnknownBackend(reference.to_string()).into())
                }
            }
        }
    }

    pub async fn health(&self) -> ServiceResult<Health> {
        match self {
            InternalLink::Local(gw) => Ok(gw.health().await),
            InternalLink::Http { client, base } => {
                let url = format!("{base}/internal/v1/health");
                let resp = client
                    .get(&url)
                    .send()
                    .await
                    .map_err(|e| ServiceError::unavailable(format!("{url}: {e}")))?;
                resp.json().await.map_err(|e| ServiceError::unavailable(format!("{url}: {e}")))
            }
        }
    }
}
