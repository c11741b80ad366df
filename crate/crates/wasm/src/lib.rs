//! Browser demo: generate a synthetic fundus scene, run the analysis
//! pipeline on it and composite the results as overlays.

use eyas_core::config::AnalysisConfig;
use eyas_core::model::{overlay, AvLabel, BinaryMask, FundusImage, Rgb, RoiBox};
use eyas_core::pipeline::{analyze_image, Analysis, Backends};
use eyas_core::segmenter::{BuiltinBackend, Structure};
use eyas_core::synthgen::{gen_scene, render, GenParams, SceneTruth, SynthScene};
use eyas_core::{Error, Result};
use serde_json::json;
use wasm_bindgen::prelude::*;

const ONH_COLOR: Rgb = Rgb(255, 255, 0);
const MACULA_COLOR: Rgb = Rgb(0, 255, 160);
const ARTERY_COLOR: Rgb = Rgb(255, 0, 0);
const VEIN_COLOR: Rgb = Rgb(0, 80, 255);
const TRUTH_COLOR: Rgb = Rgb(255, 255, 255);
const ROI_COLOR: Rgb = Rgb(255, 255, 255);

/// Overlay layers the page can toggle.
pub const LAYERS: [&str; 6] = ["roi", "onh", "macula", "vessels", "truth_onh", "truth_vessels"];

/// Label families left out of `forced` are drawn at random.
pub fn scene_params(size: u32, noise: f64, forced: &[(&str, &str)]) -> GenParams {
    let mut params = GenParams::standard().with_noise(noise);
    params.img_w = size;
    params.img_h = size;
    for (family, label) in forced.iter().filter(|(_, l)| !l.is_empty()) {
        params.class_mix = params.class_mix.clone().with(family, &[(label, 1.0)]);
    }
    params
}

pub struct Session {
    scene: SynthScene,
    image: FundusImage,
    truth: SceneTruth,
    analysis: Option<Analysis>,
}

impl Session {
    pub fn generate(params: &GenParams, seed: u64) -> Result<Self> {
        let scene = gen_scene(params, seed)?;
        let (image, truth) = render(&scene)?;
        Ok(Self {
            scene,
            image,
            truth,
            analysis: None,
        })
    }

    pub fn image(&self) -> &FundusImage {
        &self.image
    }

    pub fn labels_json(&self) -> String {
        json!({
            "laterality": self.scene.laterality,
            "shape": self.scene.shape_label,
            "caliber": self.scene.caliber_label,
            "reflex": if self.scene.reflex_present { "present" } else { "absent" },
            "disc_eccentricity": self.scene.disc.eccentricity,
        })
        .to_string()
    }

    /// Runs the full pipeline with the builtin backends.
    pub fn analyze(&mut self, cfg: &AnalysisConfig) -> String {
        let [onh, macula, vessels] = Structure::ALL.map(|s| BuiltinBackend::new(s, cfg.segmenter.clone()));
        let backends = Backends {
            onh: &onh,
            macula: &macula,
            vessels: &vessels,
        };
        let a = analyze_image(&self.image, backends, cfg);
        let out = json!({
            "sections": a.sections(),
            "errors": a.errors(),
            "rois": [
                a.onh.as_ref().ok().map(|r| r.roi),
                a.macula.as_ref().ok().map(|r| r.roi),
            ],
            "report": a.report.as_ref().ok().map(|r| &r.text),
            "report_error": a.report.as_ref().err().map(|e| e.to_string()),
        });
        self.analysis = Some(a);
        out.to_string()
    }

    /// RGBA pixels of the image with the named layers blended on top.
    pub fn composite(&self, layers: &[&str], alpha: f64) -> Result<Vec<u8>> {
        let mut img = self.image.clone();
        for layer in layers {
            img = self.apply(img, layer, alpha)?;
        }
        Ok(to_rgba(&img))
    }

    fn apply(&self, img: FundusImage, layer: &str, alpha: f64) -> Result<FundusImage> {
        let a = self.analysis.as_ref();
        match layer {
            "onh" => match a.and_then(|a| a.onh.as_ref().ok()) {
                Some(r) => overlay(&img, &r.mask, ONH_COLOR, alpha),
                None => Ok(img),
            },
            "macula" => match a.and_then(|a| a.macula.as_ref().ok()) {
                Some(r) => overlay(&img, &r.mask, MACULA_COLOR, alpha),
                None => Ok(img),
            },
            "vessels" => match a.and_then(|a| a.vessel_mask.as_ref().ok()) {
                Some(v) => {
                    let (w, h) = v.dims();
                    let class = |label| BinaryMask::from_fn(w, h, |x, y| v.label(x, y) == label);
                    let img = overlay(&img, &class(AvLabel::Artery), ARTERY_COLOR, alpha)?;
                    overlay(&img, &class(AvLabel::Vein), VEIN_COLOR, alpha)
                }
                None => Ok(img),
            },
            "roi" => {
                let rois: Vec<RoiBox> = a
                    .into_iter()
                    .flat_map(|a| [a.onh.as_ref().ok().map(|r| r.roi), a.macula.as_ref().ok().map(|r| r.roi)])
                    .flatten()
                    .collect();
                let outline = BinaryMask::from_fn(img.width(), img.height(), |x, y| {
                    rois.iter().any(|r| on_outline(r, x, y))
                });
                overlay(&img, &outline, ROI_COLOR, 1.0)
            }
            "truth_onh" => overlay(&img, &edge(&self.truth.onh_mask), TRUTH_COLOR, 1.0),
            "truth_vessels" => overlay(&img, &edge(self.truth.vessel_truth.vessel()), TRUTH_COLOR, alpha),
            other => Err(Error::InvalidImage(format!("unknown layer '{other}'"))),
        }
    }
}

fn on_outline(r: &RoiBox, x: u32, y: u32) -> bool {
    let inside = x >= r.x && x < r.x + r.w && y >= r.y && y < r.y + r.h;
    inside && (x == r.x || y == r.y || x + 1 == r.x + r.w || y + 1 == r.y + r.h)
}

/// Foreground pixels with a background 4-neighbour.
fn edge(m: &BinaryMask) -> BinaryMask {
    let (w, h) = m.dims();
    BinaryMask::from_fn(w, h, |x, y| {
        m.get(x, y)
            && [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)].iter().any(|(dx, dy)| {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 || !m.get(nx as u32, ny as u32)
            })
    })
}

fn to_rgba(img: &FundusImage) -> Vec<u8> {
    img.pixels()
        .chunks_exact(3)
        .flat_map(|p| [p[0], p[1], p[2], 255])
        .collect()
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

/// One generated scene and its latest analysis.
#[wasm_bindgen]
pub struct Demo {
    session: Session,
    cfg: AnalysisConfig,
}

#[wasm_bindgen]
impl Demo {
    /// Empty label strings leave that family random.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, size: u32, noise: f64, shape: &str, caliber: &str, reflex: &str) -> Result<Demo, JsError> {
        let params = scene_params(size, noise, &[("shape", shape), ("caliber", caliber), ("reflex", reflex)]);
        Ok(Demo {
            session: Session::generate(&params, seed as u64).map_err(js)?,
            cfg: AnalysisConfig::default(),
        })
    }

    #[wasm_bindgen(getter)]
    pub fn width(&self) -> u32 {
        self.session.image().width()
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> u32 {
        self.session.image().height()
    }

    /// Generator labels as JSON.
    pub fn labels(&self) -> String {
        self.session.labels_json()
    }

    /// Findings, ROIs and report text as JSON.
    pub fn analyze(&mut self) -> String {
        self.session.analyze(&self.cfg)
    }

    /// RGBA pixels for a canvas; `layers` is a comma-separated list.
    pub fn render(&self, layers: &str, alpha: f64) -> Result<Vec<u8>, JsError> {
        let names: Vec<&str> = layers.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        self.session.composite(&names, alpha).map_err(js)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    fn session() -> Session {
        let params = scene_params(512, 0.0, &[("shape", "oval_vertical"), ("caliber", ""), ("reflex", "present")]);
        Session::generate(&params, 3).unwrap()
    }

    #[test]
    fn forced_labels_are_respected() {
        let s = session();
        let v: Value = serde_json::from_str(&s.labels_json()).unwrap();
        assert_eq!(v["shape"], "oval_vertical");
        assert_eq!(v["reflex"], "present");
    }

    #[test]
    fn no_layers_is_the_raw_image() {
        let s = session();
        let rgba = s.composite(&[], 0.5).unwrap();
        assert_eq!(rgba.len(), 512 * 512 * 4);
        assert_eq!(&rgba[..3], &s.image().pixels()[..3]);
        assert!(rgba.chunks_exact(4).all(|p| p[3] == 255));
    }

    #[test]
    fn analysis_feeds_every_layer() {
        let mut s = session();
        let before = s.composite(&["onh"], 0.5).unwrap();
        let v: Value = serde_json::from_str(&s.analyze(&AnalysisConfig::default())).unwrap();
        assert!(v["report"].as_str().unwrap().starts_with("Optic disc:"), "{v}");
        assert_eq!(v["sections"]["onh"]["shape"], "oval_vertical");
        let after = s.composite(&["onh"], 0.5).unwrap();
        assert_ne!(before, after);
        s.composite(&LAYERS, 0.5).unwrap();
        assert!(s.composite(&["nope"], 0.5).is_err());
    }
}
