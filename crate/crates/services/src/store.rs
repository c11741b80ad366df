//! Job store on local disk. One directory per job holds the record, the
//! uploaded image and every artifact. Files are replaced by rename, and all
//! read-modify-write cycles on a job hold that job's lock.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use eyas_core::model::Laterality;
use eyas_core::segmenter::Structure;
use serde::{Deserialize, Serialize};
use tokio::sync::{Mutex as AsyncMutex, OwnedMutexGuard};

use crate::error::{ServiceError, ServiceResult};

pub const RECORD_FILE: &str = "job.json";
pub const IMAGE_FILE: &str = "image.bin";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }

    fn may_become(self, next: JobState) -> bool {
        matches!(
            (self, next),
            (JobState::Queued, JobState::Running)
                | (JobState::Queued, JobState::Failed)
                | (JobState::Running, JobState::Done)
                | (JobState::Running, JobState::Failed)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructureState {
    Pending,
    Ok,
    Failed,
    /// Never attempted (the job was interrupted first).
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureStatus {
    pub state: StructureState,
    #[serde(default)]
    pub backend: Option<String>,
    #[serde(default)]
    pub started_at: Option<String>,
    #[serde(default)]
    pub finished_at: Option<String>,
    #[serde(default)]
    pub error: Option<String>,
}

impl StructureStatus {
    fn pending() -> Self {
        Self {
            state: StructureState::Pending,
            backend: None,
            started_at: None,
            finished_at: None,
            error: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub image_id: String,
    pub laterality: Laterality,
    /// `name@version` requested at submission, if any.
    #[serde(default)]
    pub backend: Option<String>,
    pub state: JobState,
    pub structures: BTreeMap<Structure, StructureStatus>,
    pub created_at: String,
    pub updated_at: String,
    #[serde(default)]
    pub error: Option<String>,
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl JobRecord {
    pub fn new(image_id: &str, laterality: Laterality, backend: Option<String>) -> Self {
        let t = now();
        Self {
            job_id: uuid::Uuid::new_v4().to_string(),
            image_id: image_id.to_string(),
            laterality,
            backend,
            state: JobState::Queued,
            structures: Structure::ALL.iter().map(|&s| (s, StructureStatus::pending())).collect(),
            created_at: t.clone(),
            updated_at: t,
            error: None,
        }
    }

    pub fn structure(&self, s: Structure) -> &StructureStatus {
        &self.structures[&s]
    }

    pub fn structure_mut(&mut self, s: Structure) -> &mut StructureStatus {
        self.structures.entry(s).or_insert_with(StructureStatus::pending)
    }

    /// Moves along queued → running → {done, failed}.
    pub fn transition(&mut self, next: JobState) -> ServiceResult<()> {
        if !self.state.may_become(next) {
            return Err(ServiceError::internal(format!(
                "job {} cannot go from {:?} to {next:?}",
                self.job_id, self.state
            )));
        }
        self.state = next;
        Ok(())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> ServiceError {
    ServiceError::internal(format!("{}: {e}", path.display()))
}

async fn write_atomic(path: &Path, bytes: &[u8]) -> ServiceResult<()> {
    let tmp = path.with_extension(format!("tmp-{}", uuid::Uuid::new_v4().simple()));
    tokio::fs::write(&tmp, bytes).await.map_err(|e| io_err(&tmp, e))?;
    tokio::fs::rename(&tmp, path).await.map_err(|e| io_err(path, e))
}

#[derive(Debug)]
pub struct JobStore {
    root: PathBuf,
    locks: Mutex<HashMap<String, Arc<AsyncMutex<()>>>>,
}

impl JobStore {
    /// Opens (creating) the store. Jobs left unfinished by an earlier
    /// process are marked failed.
    pub async fn open(data_dir: &Path) -> ServiceResult<Self> {
        let root = data_dir.join("jobs");
        tokio::fs::create_dir_all(&root).await.map_err(|e| io_err(&root, e))?;
        let store = Self {
            root,
            locks: Mutex::new(HashMap::new()),
        };
        store.recover().await?;
        Ok(store)
    }

    async fn recover(&self) -> ServiceResult<()> {
        let mut dir = tokio::fs::read_dir(&self.root).await.map_err(|e| io_err(&self.root, e))?;
        while let Some(entry) = dir.next_entry().await.map_err(|e| io_err(&self.root, e))? {
            let id = entry.file_name().to_string_lossy().into_owned();
            let Ok(rec) = self.get(&id).await else { continue };
            if rec.state.is_terminal() {
                continue;
            }
            self.update(&id, |r| {
                for s in r.structures.values_mut() {
                    if s.state == StructureState::Pending {
                        s.state = StructureState::Skipped;
                    }
                }
                r.error = Some("interrupted by a restart".into());
                r.state = JobState::Failed;
                Ok(())
            })
            .await?;
        }
        Ok(())
    }

    fn job_dir(&self, id: &str) -> ServiceResult<PathBuf> {
        uuid::Uuid::parse_str(id).map_err(|_| ServiceError::not_found(format!("no job '{id}'")))?;
        Ok(self.root.join(id))
    }

    /// Serializes all mutation of one job.
    pub async fn lock(&self, id: &str) -> OwnedMutexGuard<()> {
        let m = self
            .locks
            .lock()
            .expect("lock table")
            .entry(id.to_string())
            .or_default()
            .clone();
        m.lock_owned().await
    }

    pub async fn create(&self, rec: &JobRecord, image: &[u8]) -> ServiceResult<()> {
        let dir = self.job_dir(&rec.job_id)?;
        tokio::fs::create_dir_all(&dir).await.map_err(|e| io_err(&dir, e))?;
        write_atomic(&dir.join(IMAGE_FILE), image).await?;
        let _g = self.lock(&rec.job_id).await;
        self.write_record(rec).await
    }

    async fn write_record(&self, rec: &JobRecord) -> ServiceResult<()> {
        let bytes = serde_json::to_vec_pretty(rec).map_err(|e| ServiceError::internal(e.to_string()))?;
        write_atomic(&self.job_dir(&rec.job_id)?.join(RECORD_FILE), &bytes).await
    }

    pub async fn get(&self, id: &str) -> ServiceResult<JobRecord> {
        let bytes = self
            .artifact(id, RECORD_FILE)
            .await?
            .ok_or_else(|| ServiceError::not_found(format!("no job '{id}'")))?;
        serde_json::from_slice(&bytes).map_err(|e| ServiceError::internal(format!("job {id}: {e}")))
    }

    /// Read-modify-write of the record under the job lock.
    pub async fn update<R>(&self, id: &str, f: impl FnOnce(&mut JobRecord) -> ServiceResult<R>) -> ServiceResult<(JobRecord, R)> {
        let _g = self.lock(id).await;
        self.update_locked(id, f).await
    }

    /// As `update`, for a caller already holding the job lock.
    pub async fn update_locked<R>(
        &self,
        id: &str,
        f: impl FnOnce(&mut JobRecord) -> ServiceResult<R>,
    ) -> ServiceResult<(JobRecord, R)> {
        let mut rec = self.get(id).await?;
        let out = f(&mut rec)?;
        rec.updated_at = now();
        self.write_record(&rec).await?;
        Ok((rec, out))
    }

    pub async fn put_artifact(&self, id: &str, name: &str, bytes: &[u8]) -> ServiceResult<()> {
        write_atomic(&self.job_dir(id)?.join(name), bytes).await
    }

    pub async fn artifact(&self, id: &str, name: &str) -> ServiceResult<Option<Vec<u8>>> {
        let path = self.job_dir(id)?.join(name);
        match tokio::fs::read(&path).await {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(&path, e)),
        }
    }
}
