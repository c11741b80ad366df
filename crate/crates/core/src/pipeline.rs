//! The offline pipeline: per-structure stages, whole-image analysis, the
//! on-disk output layout and evaluation of a prediction directory against a
//! corpus. The services call the same stage functions, so both paths write
//! identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{
    classify_artery_caliber, classify_macular_reflex, classify_onh_shape, make_input, InputFormat,
    MaculaFindings, OnhFindings, VesselFindings,
};
use crate::codec;
use crate::config::AnalysisConfig;
use crate::error::{Error, Result};
use crate::localizer::{locate_macula, locate_onh};
use crate::metrics::{self, ClassificationSummary, EvalReport, SegmentationAccumulator};
use crate::model::{BinaryMask, CaliberLabel, FundusImage, ReflexLabel, RoiBox, ShapeLabel, VesselMask};
use crate::reporter::{self, render_export, ExportFormat, ReportDraft, Sections};
use crate::segmenter::{segment_vessels_with, segment_with, SegmentationBackend};
use crate::synthgen::CorpusManifest;

pub const ROIS_FILE: &str = "rois.json";
pub const ONH_MASK_FILE: &str = "onh_mask.png";
pub const MACULA_MASK_FILE: &str = "macula_mask.png";
pub const VESSEL_MASK_FILE: &str = "vessel_mask.png";
pub const AV_MAP_FILE: &str = "av_map.png";
pub const FINDINGS_FILE: &str = "findings.json";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const REPORT_TXT_FILE: &str = "report.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct RegionResult<F> {
    pub roi: RoiBox,
    pub mask: BinaryMask,
    pub findings: F,
}

pub type OnhResult = RegionResult<OnhFindings>;
pub type MaculaResult = RegionResult<MaculaFindings>;

/// Localize, segment and classify the optic disc.
pub fn run_onh(img: &FundusImage, backend: &dyn SegmentationBackend, cfg: &AnalysisConfig) -> Result<OnhResult> {
    let roi = locate_onh(img, &cfg.localizer);
    let mask = segment_with(backend, img, &roi, cfg.segmenter.roi_dilation)?;
    let input = make_input(img, None, Some(&mask), InputFormat::Mask)?;
    let findings = classify_onh_shape(&input, &cfg.classifier, &backend.descriptor().id())?;
    Ok(RegionResult { roi, mask, findings })
}

/// Localize, segment and classify the macula. The disc box it needs is
/// located here again so this stage never waits on the disc stage.
pub fn run_macula(
    img: &FundusImage,
    backend: &dyn SegmentationBackend,
    cfg: &AnalysisConfig,
) -> Result<MaculaResult> {
    let onh = locate_onh(img, &cfg.localizer);
    let roi = locate_macula(img, &onh, &cfg.localizer)?;
    let mask = segment_with(backend, img, &roi, cfg.segmenter.roi_dilation)?;
    let findings = classify_macular_reflex(img, &roi, &cfg.classifier, &backend.descriptor().id())?;
    Ok(RegionResult { roi, mask, findings })
}

/// First vessel step: the labelled mask. Independent of the disc.
pub fn run_vessel_mask(
    img: &FundusImage,
    backend: &dyn SegmentationBackend,
    cfg: &AnalysisConfig,
) -> Result<VesselMask> {
    segment_vessels_with(backend, img, &cfg.segmenter)
}

/// Second vessel step: widths, normalized by the disc when one is known.
pub fn run_vessel_findings(
    mask: &VesselMask,
    disc: Option<&OnhFindings>,
    cfg: &AnalysisConfig,
    backend_id: &str,
) -> Result<VesselFindings> {
    classify_artery_caliber(mask, disc, &cfg.classifier, backend_id)
}

/// The backend used for each structure.
#[derive(Clone, Copy)]
pub struct Backends<'a> {
    pub onh: &'a dyn SegmentationBackend,
    pub macula: &'a dyn SegmentationBackend,
    pub vessels: &'a dyn SegmentationBackend,
}

/// Everything one image produced. A failed stage keeps its error.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub image_id: String,
    pub onh: Result<OnhResult>,
    pub macula: Result<MaculaResult>,
    /// The mask may succeed while its findings fail.
    pub vessel_mask: Result<VesselMask>,
    pub vessel_findings: Result<VesselFindings>,
    pub report: Result<ReportDraft>,
}

impl Analysis {
    pub fn sections(&self) -> Sections {
        Sections {
            onh: self.onh.as_ref().ok().map(|o| o.findings.clone()),
            macula: self.macula.as_ref().ok().map(|m| m.findings.clone()),
            vessels: self.vessel_findings.as_ref().ok().cloned(),
        }
    }

    /// Per-structure error messages, keyed by structure name.
    pub fn errors(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        if let Err(e) = &self.onh {
            out.insert("onh".to_string(), e.to_string());
        }
        if let Err(e) = &self.macula {
            out.insert("macula".to_string(), e.to_string());
        }
        if let Err(e) = &self.vessel_findings {
            out.insert("vessels".to_string(), e.to_string());
        }
        out
    }
}

/// Joins per-structure failures into one message.
pub fn aggregate_errors(errors: &BTreeMap<String, String>) -> String {
    errors
        .iter()
        .map(|(s, e)| format!("{s}: {e}"))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Builds the report from whichever sections succeeded.
pub fn synthesize_report(image_id: &str, sections: Sections, errors: &BTreeMap<String, String>, cfg: &AnalysisConfig) -> Result<ReportDraft> {
    reporter::synthesize(image_id, sections, BTreeMap::new(), &cfg.templates).map_err(|e| match e {
        Error::EmptyReport if !errors.is_empty() => Error::ClassificationFailed(aggregate_errors(errors)),
        e => e,
    })
}

/// Runs all stages in order on one image.
pub fn analyze_image(img: &FundusImage, backends: Backends<'_>, cfg: &AnalysisConfig) -> Analysis {
    let onh = run_onh(img, backends.onh, cfg);
    let macula = run_macula(img, backends.macula, cfg);
    let vessel_mask = run_vessel_mask(img, backends.vessels, cfg);
    let vessel_findings = vessel_mask.as_ref().map_err(Clone::clone).and_then(|m| {
        run_vessel_findings(
            m,
            onh.as_ref().ok().map(|o| &o.findings),
            cfg,
            &backends.vessels.descriptor().id(),
        )
    });
    let mut a = Analysis {
        image_id: img.image_id().to_string(),
        onh,
        macula,
        vessel_mask,
        vessel_findings,
        report: Err(Error::EmptyReport),
    };
    a.report = synthesize_report(&a.image_id, a.sections(), &a.errors(), cfg);
    a
}

/// Contents of `findings.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FindingsFile {
    pub image_id: String,
    pub onh: Option<OnhFindings>,
    pub macula: Option<MaculaFindings>,
    pub vessels: Option<VesselFindings>,
    #[serde(default)]
    pub errors: BTreeMap<String, String>,
}

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(v)?;
    out.push(b'\n');
    Ok(out)
}

/// Files an analysis produces, as `(name, bytes)` in a fixed order.
pub fn output_files(a: &Analysis) -> Result<Vec<(&'static str, Vec<u8>)>> {
    let rois: Vec<RoiBox> = [a.onh.as_ref().ok().map(|o| o.roi), a.macula.as_ref().ok().map(|m| m.roi)]
        .into_iter()
        .flatten()
        .collect();
    let sections = a.sections();
    let findings = FindingsFile {
        image_id: a.image_id.clone(),
        onh: sections.onh,
        macula: sections.macula,
        vessels: sections.vessels,
        errors: a.errors(),
    };
    let mut files = vec![(ROIS_FILE, json_bytes(&rois)?)];
    if let Ok(o) = &a.onh {
        files.push((ONH_MASK_FILE, codec::encode_mask_png(&o.mask)?));
    }
    if let Ok(m) = &a.macula {
        files.push((MACULA_MASK_FILE, codec::encode_mask_png(&m.mask)?));
    }
    if let Ok(v) = &a.vessel_mask {
        files.push((VESSEL_MASK_FILE, codec::encode_mask_png(v.vessel())?));
        files.push((AV_MAP_FILE, codec::encode_av_png(v)?));
    }
    files.push((FINDINGS_FILE, json_bytes(&findings)?));
    if let Ok(r) = &a.report {
        files.push((REPORT_JSON_FILE, render_export(r, ExportFormat::Json)));
        files.push((REPORT_TXT_FILE, render_export(r, ExportFormat::Txt)));
    }
    Ok(files)
}

pub fn write_outputs(dir: &Path, a: &Analysis) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    for (name, bytes) in output_files(a)? {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

/// Mean per-component artery/vein agreement over the images where it is
/// defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvSummary {
    pub mean_accuracy: f64,
    pub n: usize,
}

/// Evaluation output: the metrics report plus the a/v summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    #[serde(flatten)]
    pub report: EvalReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artery_vein: Option<AvSummary>,
}

fn read_opt(path: &Path) -> Result<Option<Vec<u8>>> {
    match fs::read(path) {
        Ok(b) => Ok(Some(b)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::Io(format!("{}: {e}", path.display()))),
    }
}

fn read_truth(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Corpus(format!("{}: {e}", path.display())))
}

/// Scores `pred_dir/{id}/…` (the layout `write_outputs` produces) against
/// every corpus entry. A missing prediction scores zero for masks and counts
/// as a wrong label.
pub fn evaluate(corpus_dir: &Path, pred_dir: &Path) -> Result<Evaluation> {
    let manifest = CorpusManifest::load(corpus_dir)?;
    let mut seg: BTreeMap<&str, SegmentationAccumulator> = BTreeMap::new();
    let mut labels: BTreeMap<&str, (Vec<String>, Vec<String>)> = BTreeMap::new();
    let (mut av_sum, mut av_n) = (0.0, 0usize);
    for e in &manifest.entries {
        let dir = pred_dir.join(&e.id);
        for (name, truth_rel, pred_file) in [
            ("onh", &e.onh_mask, ONH_MASK_FILE),
            ("macula", &e.macula_mask, MACULA_MASK_FILE),
            ("vessels", &e.vessel_mask, VESSEL_MASK_FILE),
        ] {
            let truth = codec::decode_mask_png(&read_truth(&corpus_dir.join(truth_rel))?)?;
            let pred = read_opt(&dir.join(pred_file))?.map(|b| codec::decode_mask_png(&b)).transpose()?;
            seg.entry(name).or_default().add(pred.as_ref(), &truth)?;
        }
        let truth_v = codec::decode_vessel_pngs(
            &read_truth(&corpus_dir.join(&e.vessel_mask))?,
            &read_truth(&corpus_dir.join(&e.av_map))?,
        )?;
        if let (Some(m), Some(av)) = (read_opt(&dir.join(VESSEL_MASK_FILE))?, read_opt(&dir.join(AV_MAP_FILE))?) {
            if let Ok(acc) = metrics::av_component_accuracy(&codec::decode_vessel_pngs(&m, &av)?, &truth_v) {
                av_sum += acc;
                av_n += 1;
            }
        }
        let findings: Option<FindingsFile> = read_opt(&dir.join(FINDINGS_FILE))?
            .map(|b| serde_json::from_slice(&b))
            .transpose()?;
        let f = findings.as_ref();
        let none = || "none".to_string();
        let mut push = |task: &'static str, pred: Option<String>, truth: String| {
            let (p, t) = labels.entry(task).or_default();
            p.push(pred.unwrap_or_else(none));
            t.push(truth);
        };
        push("shape", f.and_then(|f| f.onh.as_ref()).map(|o| o.shape.to_string()), e.labels.shape.to_string());
        push(
            "reflex",
            f.and_then(|f| f.macula.as_ref()).map(|m| m.reflex.to_string()),
            e.labels.reflex.to_string(),
        );
        push(
            "caliber",
            f.and_then(|f| f.vessels.as_ref()).map(|v| v.caliber.to_string()),
            e.labels.caliber.to_string(),
        );
    }
    let label_sets: BTreeMap<&str, Vec<String>> = BTreeMap::from([
        ("shape", ShapeLabel::ALL.iter().map(|l| l.to_string()).collect()),
        ("reflex", ReflexLabel::ALL.iter().map(|l| l.to_string()).collect()),
        (
            "caliber",
            CaliberLabel::MEASURABLE
                .iter()
                .chain([&CaliberLabel::Indeterminate])
                .map(|l| l.to_string())
                .collect(),
        ),
    ]);
    let mut classification = BTreeMap::new();
    for (task, (preds, truths)) in &labels {
        let mut all = label_sets[task].clone();
        all.push("none".to_string());
        let mut s = ClassificationSummary::from_labels(preds, truths, &all)?;
        s.per_class.remove("none");
        classification.insert(task.to_string(), s);
    }
    Ok(Evaluation {
        report: EvalReport {
            segmentation: seg.into_iter().map(|(k, v)| (k.to_string(), v.summary())).collect(),
            classification,
        },
        artery_vein: (av_n > 0).then(|| AvSummary {
            mean_accuracy: av_sum / av_n as f64,
            n: av_n,
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmenter::{BuiltinBackend, OracleBackend, Structure};
    use crate::synthgen::{gen_scene, render, GenParams};

    fn builtins(cfg: &AnalysisConfig) -> [BuiltinBackend; 3] {
        Structure::ALL.map(|s| BuiltinBackend::new(s, cfg.segmenter.clone()))
    }

    #[test]
    fn scene_analysis_is_complete_and_deterministic() {
        let cfg = AnalysisConfig::default();
        let (img, _) = render(&gen_scene(&GenParams::standard(), 7).unwrap()).unwrap();
        let [o, m, v] = builtins(&cfg);
        let b = Backends { onh: &o, macula: &m, vessels: &v };
        let a = analyze_image(&img, b, &cfg);
        assert!(a.errors().is_empty(), "{:?}", a.errors());
        let r = a.report.as_ref().unwrap();
        assert!(r.text.starts_with("Optic disc: "));
        assert_eq!(output_files(&a).unwrap().len(), 8);
        assert_eq!(output_files(&a).unwrap(), output_files(&analyze_image(&img, b, &cfg)).unwrap());
    }

    #[test]
    fn failed_disc_leaves_caliber_indeterminate() {
        let cfg = AnalysisConfig::default();
        let (img, _) = render(&gen_scene(&GenParams::standard(), 8).unwrap()).unwrap();
        let [_, m, v] = builtins(&cfg);
        // An oracle with nothing stored fails every request.
        let dead = OracleBackend::new("dead", "1.0.0", Structure::Onh);
        let a = analyze_image(&img, Backends { onh: &dead, macula: &m, vessels: &v }, &cfg);
        assert!(a.onh.is_err());
        assert_eq!(a.vessel_findings.as_ref().unwrap().caliber, CaliberLabel::Indeterminate);
        assert!(a.report.unwrap().text.contains("caliber not normalized (optic disc unavailable)"));
    }

    #[test]
    fn total_failure_aggregates_causes() {
        let cfg = AnalysisConfig::default();
        let (img, _) = render(&gen_scene(&GenParams::standard(), 9).unwrap()).unwrap();
        let dead = |s| OracleBackend::new("dead", "1.0.0", s);
        let (o, m, v) = (dead(Structure::Onh), dead(Structure::Macula), dead(Structure::Vessels));
        let a = analyze_image(&img, Backends { onh: &o, macula: &m, vessels: &v }, &cfg);
        let msg = a.report.as_ref().unwrap_err().to_string();
        for s in ["onh:", "macula:", "vessels:"] {
            assert!(msg.contains(s), "{msg}");
        }
        assert_eq!(output_files(&a).unwrap().len(), 2);
    }
}
