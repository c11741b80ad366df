//! The internal gateway: routes analysis calls to the services, resolves
//! backend references through the registry, and reports service health.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use eyas_core::config::AnalysisConfig;
use eyas_core::segmenter::{BackendDescriptor, Registry, Structure};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::Semaphore;

use crate::config::ServiceName;
use crate::error::{ErrorBody, ServiceError, ServiceResult};
use crate::stages::{self, StageContext, OP_ANALYZE, OP_SEGMENT};
use crate::wire::{AnalyzeRequest, StageRequest};

/// Runs a blocking stage on the worker pool, at most one per permit.
pub async fn run_blocking<T: Send + 'static>(
    permits: &Arc<Semaphore>,
    f: impl FnOnce() -> T + Send + 'static,
) -> ServiceResult<T> {
    let _permit = permits.clone().acquire_owned().await.map_err(|e| ServiceError::internal(e.to_string()))?;
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::internal(format!("stage panicked: {e}")))
}

pub fn worker_permits() -> Arc<Semaphore> {
    let n = std::thread::available_parallelism().map_or(1, |n| n.get());
    Arc::new(Semaphore::new(n))
}

/// Posts JSON and maps an error body back into a `ServiceError`.
pub async fn post_json(client: &reqwest::Client, url: &str, body: &Value) -> ServiceResult<Value> {
    let resp = client
        .post(url)
        .json(body)
        .send()
        .await
        .map_err(|e| ServiceError::unavailable(format!("{url}: {e}")))?;
    let status = resp.status();
    let bytes = resp.bytes().await.map_err(|e| ServiceError::unavailable(format!("{url}: {e}")))?;
    if status.is_success() {
        return serde_json::from_slice(&bytes).map_err(|e| ServiceError::internal(format!("{url}: {e}")));
    }
    Err(match serde_json::from_slice::<ErrorBody>(&bytes) {
        Ok(b) => ServiceError {
            status: status.as_u16(),
            code: b.error.code,
            message: b.error.message,
        },
        Err(_) => ServiceError::unavailable(format!("{url}: status {}", status.as_u16())),
    })
}

/// Where the services live.
#[derive(Debug, Clone)]
pub enum ServiceSet {
    /// Compiled into this process.
    Local {
        ctx: Arc<StageContext>,
        permits: Arc<Semaphore>,
    },
    /// Separate processes, by base URL.
    Http {
        client: reqwest::Client,
        urls: BTreeMap<ServiceName, String>,
    },
}

impl ServiceSet {
    async fn call(&self, service: ServiceName, op: &str, body: Value) -> ServiceResult<Value> {
        match self {
            ServiceSet::Local { ctx, permits } => {
                let (ctx, op) = (ctx.clone(), op.to_string());
                run_blocking(permits, move || stages::handle(&ctx, service, &op, body)).await?
            }
            ServiceSet::Http { client, urls } => {
                let base = urls
                    .get(&service)
                    .ok_or_else(|| ServiceError::unavailable(format!("no address for the {service} service")))?;
                post_json(client, &format!("{base}/{op}"), &body).await
            }
        }
    }

    async fn is_up(&self, service: ServiceName) -> bool {
        match self {
            ServiceSet::Local { .. } => true,
            ServiceSet::Http { client, urls } => match urls.get(&service) {
                Some(base) => client
                    .get(format!("{base}/health"))
                    .timeout(Duration::from_secs(2))
                    .send()
                    .await
                    .is_ok_and(|r| r.status().is_success()),
                None => false,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HealthStatus {
    Ok,
    Degraded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: HealthStatus,
    /// `up` or `down` per service.
    pub services: BTreeMap<ServiceName, String>,
    /// Services that are down.
    pub down: Vec<ServiceName>,
    pub backends: usize,
}

pub struct InternalGateway {
    registry: Registry,
    services: ServiceSet,
    analysis: Arc<AnalysisConfig>,
}

impl InternalGateway {
    pub fn new(analysis: Arc<AnalysisConfig>, services: ServiceSet) -> Self {
        Self {
            registry: Registry::with_builtins(&analysis.segmenter),
            services,
            analysis,
        }
    }

    /// Registers a backend; remote ones become callable at once.
    pub fn register(&self, desc: BackendDescriptor) -> ServiceResult<BackendDescriptor> {
        desc.validate()?;
        let backend = stages::backend_for(&desc, &self.analysis)?;
        Ok(self.registry.register(backend)?)
    }

    pub fn list(&self, structure: Option<Structure>) -> Vec<BackendDescriptor> {
        self.registry.list(structure)
    }

    /// `reference` where registered for `structure`, else the builtin.
    fn resolve(&self, structure: Structure, reference: Option<&str>) -> ServiceResult<BackendDescriptor> {
        let backend = self
            .registry
            .resolve(structure, reference)
            .or_else(|_| self.registry.resolve(structure, None))?;
        Ok(backend.descriptor().clone())
    }

    /// Fails when `reference` is registered for no structure.
    pub fn check_reference(&self, reference: &str) -> ServiceResult<()> {
        self.registry.resolve_each(Some(reference))?;
        Ok(())
    }

    pub async fn call(&self, service: ServiceName, op: &str, body: Value) -> ServiceResult<Value> {
        let body = match service.structure() {
            Some(structure) if op == OP_ANALYZE || op == OP_SEGMENT => {
                let req: AnalyzeRequest =
                    serde_json::from_value(body).map_err(|e| ServiceError::bad_request(e.to_string()))?;
                let stage = StageRequest {
                    backend: self.resolve(structure, req.backend.as_deref())?,
                    image: req.image,
                    laterality: req.laterality,
                };
                serde_json::to_value(stage).map_err(|e| ServiceError::internal(e.to_string()))?
            }
            _ => body,
        };
        self.services.call(service, op, body).await
    }

    pub async fn health(&self) -> Health {
        let mut services = BTreeMap::new();
        let mut down = Vec::new();
        for s in ServiceName::ALL {
            let up = self.services.is_up(s).await;
            if !up {
                down.push(s);
            }
            services.insert(s, if up { "up" } else { "down" }.to_string());
        }
        Health {
            status: if down.is_empty() { HealthStatus::Ok } else { HealthStatus::Degraded },
            services,
            down,
            backends: self.registry.list(None).len(),
        }
    }
}
