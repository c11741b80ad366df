//! Report synthesis: structured findings plus a deterministic English draft,
//! with a one-way draft → approved lifecycle.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{MaculaFindings, OnhFindings, VesselFindings};
use crate::error::{Error, Result};
use crate::model::CaliberLabel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportStatus {
    Draft,
    Approved,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Sections {
    pub onh: Option<OnhFindings>,
    pub macula: Option<MaculaFindings>,
    pub vessels: Option<VesselFindings>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub backend: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDraft {
    pub report_id: String,
    pub image_id: String,
    pub sections: Sections,
    pub text: String,
    pub status: ReportStatus,
    pub provenance: BTreeMap<String, Provenance>,
    pub edited_text: Option<String>,
}

/// Sentence templates. Placeholders are `{name}`; numbers arrive already
/// formatted with two decimals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportTemplates {
    pub onh: String,
    pub macula: String,
    pub vessels: String,
    pub vessels_indeterminate: String,
    pub not_assessed: String,
    pub onh_title: String,
    pub macula_title: String,
    pub vessels_title: String,
    pub shape_words: BTreeMap<String, String>,
    pub reflex_words: BTreeMap<String, String>,
    pub caliber_words: BTreeMap<String, String>,
}

impl Default for ReportTemplates {
    fn default() -> Self {
        let words = |pairs: &[(&str, &str)]| {
            pairs
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect()
        };
        Self {
            onh: "Optic disc: {shape} shape (eccentricity {eccentricity}).".into(),
            macula: "Macula: foveal reflex {reflex}.".into(),
            vessels: "Vessels: artery caliber {caliber}; artery-to-vein ratio {avr}.".into(),
            vessels_indeterminate:
                "Vessels: caliber not normalized (optic disc unavailable); artery-to-vein ratio {avr}."
                    .into(),
            not_assessed: "{structure}: not assessed.".into(),
            onh_title: "Optic disc".into(),
            macula_title: "Macula".into(),
            vessels_title: "Vessels".into(),
            shape_words: words(&[
                ("round", "round"),
                ("oval_vertical", "vertically oval"),
                ("oval_horizontal", "horizontally oval"),
            ]),
            reflex_words: words(&[("present", "present"), ("absent", "absent")]),
            caliber_words: words(&[
                ("narrowed", "narrowed"),
                ("normal", "normal"),
                ("widened", "widened"),
            ]),
        }
    }
}

fn fill(template: &str, values: &[(&str, String)]) -> String {
    let mut out = template.to_string();
    for (k, v) in values {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

fn word<'a>(table: &'a BTreeMap<String, String>, key: &'a str) -> &'a str {
    table.get(key).map_or(key, String::as_str)
}

fn num(v: f64) -> String {
    format!("{v:.2}")
}

impl ReportTemplates {
    pub fn render(&self, s: &Sections) -> String {
        let onh = match &s.onh {
            Some(o) => fill(
                &self.onh,
                &[
                    ("shape", word(&self.shape_words, o.shape.as_str()).to_string()),
                    ("eccentricity", num(o.eccentricity)),
                ],
            ),
            None => fill(&self.not_assessed, &[("structure", self.onh_title.clone())]),
        };
        let macula = match &s.macula {
            Some(m) => fill(
                &self.macula,
                &[("reflex", word(&self.reflex_words, m.reflex.as_str()).to_string())],
            ),
            None => fill(&self.not_assessed, &[("structure", self.macula_title.clone())]),
        };
        let vessels = match &s.vessels {
            Some(v) if v.caliber == CaliberLabel::Indeterminate => {
                fill(&self.vessels_indeterminate, &[("avr", num(v.avr))])
            }
            Some(v) => fill(
                &self.vessels,
                &[
                    ("caliber", word(&self.caliber_words, v.caliber.as_str()).to_string()),
                    ("avr", num(v.avr)),
                ],
            ),
            None => fill(&self.not_assessed, &[("structure", self.vessels_title.clone())]),
        };
        format!("{onh} {macula} {vessels}")
    }
}

fn report_id(image_id: &str, sections: &Sections) -> String {
    let mut h = Sha256::new();
    h.update(image_id.as_bytes());
    h.update(serde_json::to_vec(sections).expect("sections serialize"));
    let digest = h.finalize();
    format!("rpt-{}", hex::encode(&digest[..8]))
}

/// Builds a draft from whichever sections are present.
pub fn synthesize(
    image_id: &str,
    sections: Sections,
    provenance: BTreeMap<String, Provenance>,
    templates: &ReportTemplates,
) -> Result<ReportDraft> {
    if sections.onh.is_none() && sections.macula.is_none() && sections.vessels.is_none() {
        return Err(Error::EmptyReport);
    }
    let mut provenance = provenance;
    let backends = [
        ("onh", sections.onh.as_ref().map(|o| o.source_backend.clone())),
        ("macula", sections.macula.as_ref().map(|m| m.source_backend.clone())),
        ("vessels", sections.vessels.as_ref().map(|v| v.source_backend.clone())),
    ];
    for (name, backend) in backends {
        match backend {
            Some(b) => {
                provenance.entry(name.to_string()).or_insert(Provenance {
                    backend: b,
                    started_at: None,
                    finished_at: None,
                });
            }
            None => {
                provenance.remove(name);
            }
        }
    }
    Ok(ReportDraft {
        report_id: report_id(image_id, &sections),
        image_id: image_id.to_string(),
        text: templates.render(&sections),
        sections,
        status: ReportStatus::Draft,
        provenance,
        edited_text: None,
    })
}

/// Finalizes a draft. The machine text is kept; an edit is stored beside it.
pub fn approve(report: &ReportDraft, edited_text: Option<String>) -> Result<ReportDraft> {
    if report.status == ReportStatus::Approved {
        return Err(Error::ReportState(format!(
            "report {} is already approved",
            report.report_id
        )));
    }
    Ok(ReportDraft {
        status: ReportStatus::Approved,
        edited_text,
        ..report.clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Json,
    Txt,
}

impl ReportDraft {
    /// Text a reader should see: the clinician's edit once approved.
    pub fn final_text(&self) -> &str {
        match (self.status, &self.edited_text) {
            (ReportStatus::Approved, Some(t)) => t,
            _ => &self.text,
        }
    }
}

pub fn render_export(report: &ReportDraft, format: ExportFormat) -> Vec<u8> {
    match format {
        ExportFormat::Json => {
            let mut v = serde_json::to_vec_pretty(report).expect("report serializes");
            v.push(b'\n');
            v
        }
        ExportFormat::Txt => format!("{}\n", report.final_text()).into_bytes(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ReflexLabel, ShapeLabel};

    fn onh() -> OnhFindings {
        OnhFindings {
            shape: ShapeLabel::Round,
            eccentricity: 0.21,
            disc_diameter_px: 70.0,
            disc_center: [100.0, 120.0],
            theta: 0.3,
            source_backend: "classical@1.0.0".into(),
            confidence: 1.0,
        }
    }

    fn macula() -> MaculaFindings {
        MaculaFindings {
            reflex: ReflexLabel::Present,
            reflex_ratio: 1.6,
            source_backend: "classical@1.0.0".into(),
        }
    }

    fn vessels(caliber: CaliberLabel) -> VesselFindings {
        VesselFindings {
            avr: 0.67,
            normalized_artery_caliber: (caliber != CaliberLabel::Indeterminate).then_some(0.07),
            caliber,
            mean_artery_width_px: 4.9,
            mean_vein_width_px: 7.3,
            source_backend: "classical@1.0.0".into(),
        }
    }

    fn draft(s: Sections) -> Result<ReportDraft> {
        synthesize("abc", s, BTreeMap::new(), &ReportTemplates::default())
    }

    #[test]
    fn full_sentence() {
        let r = draft(Sections {
            onh: Some(onh()),
            macula: Some(macula()),
            vessels: Some(vessels(CaliberLabel::Normal)),
        })
        .unwrap();
        assert_eq!(
            r.text,
            "Optic disc: round shape (eccentricity 0.21). Macula: foveal reflex present. Vessels: artery caliber normal; artery-to-vein ratio 0.67."
        );
        assert_eq!(r.provenance.len(), 3);
        assert_eq!(r.status, ReportStatus::Draft);
    }

    #[test]
    fn absent_and_indeterminate() {
        let r = draft(Sections { onh: Some(onh()), macula: Some(macula()), vessels: None }).unwrap();
        assert!(r.text.ends_with(" Vessels: not assessed."));
        assert!(!r.provenance.contains_key("vessels"));
        let r = draft(Sections { onh: None, macula: None, vessels: Some(vessels(CaliberLabel::Indeterminate)) }).unwrap();
        assert!(r.text.starts_with("Optic disc: not assessed. Macula: not assessed."));
        assert!(r.text.contains("caliber not normalized (optic disc unavailable)"));
        assert_eq!(draft(Sections::default()), Err(Error::EmptyReport));
    }

    #[test]
    fn lifecycle() {
        let r = draft(Sections { onh: Some(onh()), ..Default::default() }).unwrap();
        let a = approve(&r, None).unwrap();
        assert_eq!(a.status, ReportStatus::Approved);
        assert_eq!(a.text, r.text);
        assert!(matches!(approve(&a, None), Err(Error::ReportState(_))));
        let e = approve(&r, Some("Edited.".into())).unwrap();
        assert_eq!(e.text, r.text);
        assert_eq!(render_export(&e, ExportFormat::Txt), b"Edited.\n");
        assert_eq!(render_export(&r, ExportFormat::Txt), format!("{}\n", r.text).into_bytes());
    }

    #[test]
    fn json_round_trip() {
        let r = approve(
            &draft(Sections { onh: Some(onh()), macula: Some(macula()), vessels: Some(vessels(CaliberLabel::Widened)) }).unwrap(),
            Some("x".into()),
        )
        .unwrap();
        let back: ReportDraft = serde_json::from_slice(&render_export(&r, ExportFormat::Json)).unwrap();
        assert_eq!(back, r);
    }
}
