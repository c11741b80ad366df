//! Service configuration: ports, timeouts, store location, registered
//! backends and the analysis parameters, all in one JSON file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use eyas_core::config::AnalysisConfig;
use eyas_core::segmenter::{BackendDescriptor, Structure};
use serde::{Deserialize, Serialize};

use crate::error::{ServiceError, ServiceResult};

/// Environment variable consulted when no `--config` flag is given.
pub const CONFIG_ENV: &str = "EYAS_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServiceName {
    Onh,
    Macula,
    Vessels,
    Report,
}

impl ServiceName {
    pub const ALL: [ServiceName; 4] = [Self::Onh, Self::Macula, Self::Vessels, Self::Report];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Onh => "onh",
            Self::Macula => "macula",
            Self::Vessels => "vessels",
            Self::Report => "report",
        }
    }

    pub fn structure(self) -> Option<Structure> {
        match self {
            Self::Onh => Some(Structure::Onh),
            Self::Macula => Some(Structure::Macula),
            Self::Vessels => Some(Structure::Vessels),
            Self::Report => None,
        }
    }
}

impl std::str::FromStr for ServiceName {
    type Err = ServiceError;
    fn from_str(s: &str) -> ServiceResult<Self> {
        Self::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| ServiceError::not_found(format!("no service named '{s}'")))
    }
}

impl std::fmt::Display for ServiceName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: String,
    pub client_port: u16,
    pub internal_port: u16,
    /// Ports of the structure and report services in multi-process mode.
    pub service_ports: BTreeMap<ServiceName, u16>,
    /// Base URLs overriding `bind:port` for individual services.
    pub service_urls: BTreeMap<ServiceName, String>,
    pub data_dir: PathBuf,
    /// Directory served at `/` by the client gateway.
    pub static_dir: Option<PathBuf>,
    /// How long the vessel caliber step waits for disc findings.
    pub onh_wait_secs: f64,
    pub request_timeout_secs: f64,
    pub startup_timeout_secs: f64,
    pub max_upload_bytes: usize,
    /// Services that fail every request (fault injection for tests).
    pub inject_failures: Vec<ServiceName>,
    /// Remote backends registered at startup.
    pub backends: Vec<BackendDescriptor>,
    pub analysis: AnalysisConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1".into(),
            client_port: 8080,
            internal_port: 8090,
            service_ports: BTreeMap::from([
                (ServiceName::Onh, 8091),
                (ServiceName::Macula, 8092),
                (ServiceName::Vessels, 8093),
                (ServiceName::Report, 8094),
            ]),
            service_urls: BTreeMap::new(),
            data_dir: PathBuf::from("eyas-data"),
            static_dir: None,
            onh_wait_secs: 30.0,
            request_timeout_secs: 120.0,
            startup_timeout_secs: 30.0,
            max_upload_bytes: 64 << 20,
            inject_failures: Vec::new(),
            backends: Vec::new(),
            analysis: AnalysisConfig::default(),
        }
    }
}

fn secs(v: f64, what: &str) -> ServiceResult<Duration> {
    Duration::try_from_secs_f64(v).map_err(|_| ServiceError::config(format!("{what} must be a non-negative number of seconds")))
}

impl ServiceConfig {
    pub fn from_json(bytes: &[u8]) -> ServiceResult<Self> {
        let cfg: Self = serde_json::from_slice(bytes).map_err(|e| ServiceError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> ServiceResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| ServiceError::config(format!("{}: {e}", path.display())))?;
        Self::from_json(&bytes)
    }

    /// Loads `path`, else the file named by `EYAS_CONFIG`, else defaults.
    /// Returns the path actually used.
    pub fn resolve(path: Option<&Path>) -> ServiceResult<(Self, Option<PathBuf>)> {
        let path = path
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
        match path {
            Some(p) => Ok((Self::load(&p)?, Some(p))),
            None => Ok((Self::default(), None)),
        }
    }

    pub fn validate(&self) -> ServiceResult<()> {
        self.analysis.validate().map_err(|e| ServiceError::config(e.to_string()))?;
        self.onh_wait()?;
        self.request_timeout()?;
        self.startup_timeout()?;
        for d in &self.backends {
            d.validate().map_err(|e| ServiceError::config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn onh_wait(&self) -> ServiceResult<Duration> {
        secs(self.onh_wait_secs, "onh_wait_secs")
    }

    pub fn request_timeout(&self) -> ServiceResult<Duration> {
        secs(self.request_timeout_secs, "request_timeout_secs")
    }

    pub fn startup_timeout(&self) -> ServiceResult<Duration> {
        secs(self.startup_timeout_secs, "startup_timeout_secs")
    }

    pub fn service_port(&self, s: ServiceName) -> u16 {
        self.service_ports.get(&s).copied().unwrap_or(0)
    }

    pub fn service_url(&self, s: ServiceName) -> String {
        self.service_urls
            .get(&s)
            .cloned()
            .unwrap_or_else(|| format!("http://{}:{}", self.bind, self.service_port(s)))
    }

    pub fn internal_url(&self) -> String {
        format!("http://{}:{}", self.bind, self.internal_port)
    }
}
