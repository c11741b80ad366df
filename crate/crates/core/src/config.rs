//! Tunable analysis parameters, loadable from JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierConfig;
use crate::error::{Error, Result};
use crate::localizer::LocalizerConfig;
use crate::reporter::ReportTemplates;
use crate::segmenter::SegmenterConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    pub localizer: LocalizerConfig,
    pub segmenter: SegmenterConfig,
    pub classifier: ClassifierConfig,
    pub templates: ReportTemplates,
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        self.localizer.validate()?;
        self.segmenter.validate()?;
        self.classifier.validate()
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let cfg: Self = serde_json::from_slice(bytes).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_fills_defaults() {
        let cfg = AnalysisConfig::from_json(br#"{"classifier":{"reflex_threshold":1.3}}"#).unwrap();
        assert_eq!(cfg.classifier.reflex_threshold, 1.3);
        assert_eq!(cfg.classifier.round_max_eccentricity, 0.45);
        assert_eq!(cfg.localizer, LocalizerConfig::default());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(AnalysisConfig::from_json(br#"{"localizer":{"weights":[-1,0,0]}}"#).is_err());
        assert!(AnalysisConfig::from_json(b"not json").is_err());
    }
}
