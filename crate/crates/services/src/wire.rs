//! JSON messages exchanged between the gateways and the services. Binary
//! payloads (images, mask PNGs) travel base64-encoded.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use eyas_core::classifier::{MaculaFindings, OnhFindings};
use eyas_core::model::{Laterality, RoiBox};
use eyas_core::reporter::{ReportDraft, Sections};
use eyas_core::segmenter::BackendDescriptor;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub mod b64 {
    use super::*;

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        STANDARD.decode(s).map_err(serde::de::Error::custom)
    }
}

/// Image sent by the orchestrator. `backend` is a `name@version` reference
/// that the internal gateway resolves.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalyzeRequest {
    #[serde(with = "b64")]
    pub image: Vec<u8>,
    pub laterality: Laterality,
    #[serde(default)]
    pub backend: Option<String>,
}

/// Image as a structure service receives it, with the backend resolved.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRequest {
    #[serde(with = "b64")]
    pub image: Vec<u8>,
    pub laterality: Laterality,
    pub backend: BackendDescriptor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionReply<F> {
    pub roi: RoiBox,
    #[serde(with = "b64")]
    pub mask_png: Vec<u8>,
    pub findings: F,
}

pub type OnhReply = RegionReply<OnhFindings>;
pub type MaculaReply = RegionReply<MaculaFindings>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VesselMaskReply {
    #[serde(with = "b64")]
    pub mask_png: Vec<u8>,
    #[serde(with = "b64")]
    pub av_png: Vec<u8>,
    /// `name@version` of the backend that produced the mask.
    pub backend: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaliberRequest {
    #[serde(with = "b64")]
    pub mask_png: Vec<u8>,
    #[serde(with = "b64")]
    pub av_png: Vec<u8>,
    pub disc: Option<OnhFindings>,
    pub backend: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthesizeRequest {
    pub image_id: String,
    pub sections: Sections,
    /// Per-structure failures, used to explain an empty report.
    #[serde(default)]
    pub errors: std::collections::BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApproveRequest {
    pub report: ReportDraft,
    #[serde(default)]
    pub edited_text: Option<String>,
}
