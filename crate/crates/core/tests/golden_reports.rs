//! Reports for fixed findings must match the committed bytes in `golden/`.
//! Set `EYAS_UPDATE_GOLDEN=1` to rewrite them after an intended change.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use eyas_core::reporter::{approve, render_export, synthesize, ExportFormat, ReportTemplates, Sections};
use eyas_core::Error;
use serde::Deserialize;

#[derive(Deserialize)]
struct Case {
    name: String,
    image_id: String,
    sections: Sections,
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn cases() -> Vec<Case> {
    let bytes = std::fs::read(golden_dir().join("cases.json")).unwrap();
    serde_json::from_slice(&bytes).unwrap()
}

fn check(path: &Path, actual: &[u8]) {
    if std::env::var_os("EYAS_UPDATE_GOLDEN").is_some() {
        std::fs::write(path, actual).unwrap();
        return;
    }
    let expected = std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert!(
        expected == actual,
        "{} differs:\n{}",
        path.display(),
        String::from_utf8_lossy(actual)
    );
}

#[test]
fn reports_match_golden_files() {
    let cases = cases();
    assert_eq!(cases.len(), 5);
    let templates = ReportTemplates::default();
    for c in cases {
        let r = synthesize(&c.image_id, c.sections, BTreeMap::new(), &templates).unwrap();
        check(&golden_dir().join(format!("{}.txt", c.name)), &render_export(&r, ExportFormat::Txt));
        check(&golden_dir().join(format!("{}.json", c.name)), &render_export(&r, ExportFormat::Json));
    }
}

#[test]
fn golden_text_reads_as_written() {
    let txt = std::fs::read_to_string(golden_dir().join("complete_normal.txt")).unwrap();
    assert_eq!(
        txt,
        "Optic disc: round shape (eccentricity 0.31). Macula: foveal reflex present. \
         Vessels: artery caliber normal; artery-to-vein ratio 0.67.\n"
    );
    let txt = std::fs::read_to_string(golden_dir().join("disc_missing_indeterminate.txt")).unwrap();
    assert!(txt.starts_with("Optic disc: not assessed."));
    assert!(txt.contains("caliber not normalized (optic disc unavailable); artery-to-vein ratio 0.60."));
}

#[test]
fn approval_is_one_way() {
    let c = cases().remove(0);
    let draft = synthesize(&c.image_id, c.sections, BTreeMap::new(), &ReportTemplates::default()).unwrap();
    let approved = approve(&draft, Some("signed".into())).unwrap();
    assert_eq!(approved.final_text(), "signed");
    assert_eq!(approved.text, draft.text);
    assert!(matches!(approve(&approved, None), Err(Error::ReportState(_))));
}
