//! Runs one job: disc, macula and vessel segmentation start together; the
//! vessel caliber step waits for the disc findings (bounded by a timeout);
//! the report is synthesized from whatever succeeded.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use eyas_core::classifier::{MaculaFindings, OnhFindings, VesselFindings};
use eyas_core::model::RoiBox;
use eyas_core::pipeline::{AV_MAP_FILE, MACULA_MASK_FILE, ONH_MASK_FILE, VESSEL_MASK_FILE};
use eyas_core::reporter::{ReportDraft, Sections};
use eyas_core::segmenter::Structure;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

use crate::config::ServiceName;
use crate::error::{ServiceError, ServiceResult};
use crate::link::InternalLink;
use crate::stages::{OP_ANALYZE, OP_CALIBER, OP_SEGMENT, OP_SYNTHESIZE};
use crate::store::{now, JobState, JobStore, StructureState, IMAGE_FILE, REPORT_FILE};
use crate::wire::{AnalyzeRequest, CaliberRequest, RegionReply, SynthesizeRequest, VesselMaskReply};

/// ROI and findings of a region structure, stored beside its mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredRegion<F> {
    pub roi: RoiBox,
    pub findings: F,
}

pub fn findings_file(s: Structure) -> &'static str {
    match s {
        Structure::Onh => "onh.json",
        Structure::Macula => "macula.json",
        Structure::Vessels => "vessels.json",
    }
}

pub fn mask_file(s: Structure) -> &'static str {
    match s {
        Structure::Onh => ONH_MASK_FILE,
        Structure::Macula => MACULA_MASK_FILE,
        Structure::Vessels => VESSEL_MASK_FILE,
    }
}

fn to_json<T: Serialize>(v: &T) -> ServiceResult<Vec<u8>> {
    serde_json::to_vec_pretty(v).map_err(|e| ServiceError::internal(e.to_string()))
}

pub struct Orchestrator {
    pub link: InternalLink,
    pub store: Arc<JobStore>,
    pub onh_wait: Duration,
}

impl Orchestrator {
    /// Drives the job to done or failed, whatever happens inside.
    pub async fn run(self: Arc<Self>, job_id: String) {
        let this = self.clone();
        let id = job_id.clone();
        let outcome = tokio::spawn(async move { this.try_run(&id).await }).await;
        let error = match outcome {
            Ok(Ok(())) => return,
            Ok(Err(e)) => e.message,
            Err(e) => format!("orchestration aborted: {e}"),
        };
        let _ = self
            .store
            .update(&job_id, |r| {
                if !r.state.is_terminal() {
                    r.state = JobState::Failed;
                    r.error = Some(error);
                }
                Ok(())
            })
            .await;
    }

    async fn begin(&self, id: &str, s: Structure) -> ServiceResult<()> {
        self.store
            .update(id, |r| {
                r.structure_mut(s).started_at = Some(now());
                Ok(())
            })
            .await
            .map(|_| ())
    }

    async fn end(&self, id: &str, s: Structure, outcome: Result<String, String>) -> ServiceResult<()> {
        self.store
            .update(id, |r| {
                let st = r.structure_mut(s);
                st.finished_at = Some(now());
                match outcome {
                    Ok(backend) => {
                        st.state = StructureState::Ok;
                        st.backend = Some(backend);
                    }
                    Err(e) => {
                        st.state = StructureState::Failed;
                        st.error = Some(e);
                    }
                }
                Ok(())
            })
            .await
            .map(|_| ())
    }

    /// One region structure; artifacts are written before the sub-state
    /// flips so a reader never sees a partial result.
    async fn region<F>(&self, id: &str, s: Structure, req: &AnalyzeRequest) -> ServiceResult<Result<F, String>>
    where
        F: Serialize + DeserializeOwned + Clone + HasBackend,
    {
        self.begin(id, s).await?;
        let service = match s {
            Structure::Onh => ServiceName::Onh,
            _ => ServiceName::Macula,
        };
        let out = match self.link.call::<_, RegionReply<F>>(service, OP_ANALYZE, req).await {
            Ok(reply) => {
                self.store.put_artifact(id, mask_file(s), &reply.mask_png).await?;
                let stored = StoredRegion { roi: reply.roi, findings: reply.findings.clone() };
                self.store.put_artifact(id, findings_file(s), &to_json(&stored)?).await?;
                Ok(reply.findings)
            }
            Err(e) => Err(e.message),
        };
        self.end(id, s, out.as_ref().map(|f| f.backend().to_string()).map_err(Clone::clone)).await?;
        Ok(out)
    }

    async fn vessels(
        &self,
        id: &str,
        req: &AnalyzeRequest,
        disc: oneshot::Receiver<OnhFindings>,
    ) -> ServiceResult<Result<VesselFindings, String>> {
        let s = Structure::Vessels;
        self.begin(id, s).await?;
        let out = match self.link.call::<_, VesselMaskReply>(ServiceName::Vessels, OP_SEGMENT, req).await {
            Ok(m) => {
                self.store.put_artifact(id, VESSEL_MASK_FILE, &m.mask_png).await?;
                self.store.put_artifact(id, AV_MAP_FILE, &m.av_png).await?;
                let disc = match tokio::time::timeout(self.onh_wait, disc).await {
                    Ok(Ok(f)) => Some(f),
                    _ => None,
                };
                let caliber = CaliberRequest {
                    mask_png: m.mask_png,
                    av_png: m.av_png,
                    disc,
                    backend: m.backend,
                };
                match self.link.call::<_, VesselFindings>(ServiceName::Vessels, OP_CALIBER, &caliber).await {
                    Ok(f) => {
                        self.store.put_artifact(id, findings_file(s), &to_json(&f)?).await?;
                        Ok(f)
                    }
                    Err(e) => Err(e.message),
                }
            }
            Err(e) => Err(e.message),
        };
        self.end(id, s, out.as_ref().map(|f| f.source_backend.clone()).map_err(Clone::clone)).await?;
        Ok(out)
    }

    async fn try_run(&self, id: &str) -> ServiceResult<()> {
        let (rec, _) = self.store.update(id, |r| r.transition(JobState::Running)).await?;
        let image = self
            .store
            .artifact(id, IMAGE_FILE)
            .await?
            .ok_or_else(|| ServiceError::internal(format!("job {id} has no image")))?;
        let req = AnalyzeRequest {
            image,
            laterality: rec.laterality,
            backend: rec.backend.clone(),
        };
        let (tx, rx) = oneshot::channel();
        let onh = async {
            let r = self.region::<OnhFindings>(id, Structure::Onh, &req).await;
            if let Ok(Ok(f)) = &r {
                let _ = tx.send(f.clone());
            }
            r
        };
        let (onh, macula, vessels) = tokio::join!(
            onh,
            self.region::<MaculaFindings>(id, Structure::Macula, &req),
            self.vessels(id, &req, rx)
        );
        let (onh, macula, vessels) = (onh?, macula?, vessels?);
        let mut errors = BTreeMap::new();
        for (name, e) in [
            ("onh", onh.as_ref().err()),
            ("macula", macula.as_ref().err()),
            ("vessels", vessels.as_ref().err()),
        ] {
            if let Some(e) = e {
                errors.insert(name.to_string(), e.clone());
            }
        }
        let synth = SynthesizeRequest {
            image_id: rec.image_id.clone(),
            sections: Sections {
                onh: onh.ok(),
                macula: macula.ok(),
                vessels: vessels.ok(),
            },
            errors,
        };
        let report = self
            .link
            .call::<_, ReportDraft>(ServiceName::Report, OP_SYNTHESIZE, &synth)
            .await;
        let _g = self.store.lock(id).await;
        match report {
            Ok(r) => {
                self.store.put_artifact(id, REPORT_FILE, &to_json(&r)?).await?;
                self.store.update_locked(id, |r| r.transition(JobState::Done)).await?;
            }
            Err(e) => {
                self.store
                    .update_locked(id, |r| {
                        r.error = Some(e.message);
                        r.transition(JobState::Failed)
                    })
                    .await?;
            }
        }
        Ok(())
    }
}

/// Findings that name the backend which produced them.
pub trait HasBackend {
    fn backend(&self) -> &str;
}

impl HasBackend for OnhFindings {
    fn backend(&self) -> &str {
        &self.source_backend
    }
}

impl HasBackend for MaculaFindings {
    fn backend(&self) -> &str {
        &self.source_backend
    }
}
