//! Stage 3: rule-based classification of disc shape, artery caliber and
//! foveal reflex, plus the input-format comparison harness.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    crop, to_gray, weighted_gray, AvLabel, BinaryMask, CaliberLabel, ChannelMix, FundusImage,
    ReflexLabel, RoiBox, ShapeLabel, VesselMask,
};
use crate::raster::{self, box_blur, Plane};
use crate::segmenter::fit_ellipse;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub round_max_eccentricity: f64,
    /// Eccentricity distance from the boundary at which confidence is 1.
    pub confidence_span: f64,
    pub caliber_narrowed_below: f64,
    pub caliber_widened_above: f64,
    /// Caliber annulus around the disc centre, in disc diameters.
    pub caliber_annulus: [f64; 2],
    pub reflex_threshold: f64,
    /// Reflex central disk radius and annulus, as fractions of ROI side.
    pub reflex_center: f64,
    pub reflex_annulus: [f64; 2],
    pub reflex_smoothing_px: usize,
    /// Percentile and gray weights of the crude threshold used by the image
    /// formats.
    pub crude_percentile: f64,
    pub crude_gray_weights: [f64; 3],
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            round_max_eccentricity: 0.45,
            confidence_span: 0.15,
            caliber_narrowed_below: 0.05,
            caliber_widened_above: 0.09,
            caliber_annulus: [1.0, 1.5],
            reflex_threshold: 1.15,
            reflex_center: 0.1,
            reflex_annulus: [0.2, 0.4],
            reflex_smoothing_px: 3,
            crude_percentile: 80.0,
            crude_gray_weights: [0.6, 0.3, 0.1],
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.round_max_eccentricity > 0.0 && self.round_max_eccentricity < 1.0) {
            return Err(Error::Config("round_max_eccentricity must lie in (0, 1)".into()));
        }
        if !(self.caliber_narrowed_below < self.caliber_widened_above) {
            return Err(Error::Config("caliber thresholds must be increasing".into()));
        }
        if !(self.caliber_annulus[0] < self.caliber_annulus[1])
            || !(self.reflex_annulus[0] < self.reflex_annulus[1])
        {
            return Err(Error::Config("annuli must be increasing".into()));
        }
        if !(self.confidence_span > 0.0) {
            return Err(Error::Config("confidence_span must be positive".into()));
        }
        Ok(())
    }

    pub fn shape_for(&self, eccentricity: f64, theta: f64) -> ShapeLabel {
        if eccentricity < self.round_max_eccentricity {
            ShapeLabel::Round
        } else if (theta - PI / 2.0).abs() <= PI / 4.0 {
            ShapeLabel::OvalVertical
        } else {
            ShapeLabel::OvalHorizontal
        }
    }

    pub fn shape_confidence(&self, eccentricity: f64) -> f64 {
        let d = (eccentricity - self.round_max_eccentricity).abs() / self.confidence_span;
        0.5 + 0.5 * d.min(1.0)
    }

    pub fn caliber_for(&self, normalized: f64) -> CaliberLabel {
        if normalized < self.caliber_narrowed_below {
            CaliberLabel::Narrowed
        } else if normalized <= self.caliber_widened_above {
            CaliberLabel::Normal
        } else {
            CaliberLabel::Widened
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputFormat {
    Image,
    LocalOnh,
    Mask,
    MaskPlusLocal,
}

impl InputFormat {
    pub const ALL: [InputFormat; 4] = [
        InputFormat::Image,
        InputFormat::LocalOnh,
        InputFormat::Mask,
        InputFormat::MaskPlusLocal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InputFormat::Image => "image",
            InputFormat::LocalOnh => "local_onh",
            InputFormat::Mask => "mask",
            InputFormat::MaskPlusLocal => "mask_plus_local",
        }
    }
}

/// Classifier payload. `origin` is the payload's top-left corner in the
/// source image.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierInput {
    pub format: InputFormat,
    pub image: Option<FundusImage>,
    pub mask: Option<BinaryMask>,
    pub origin: (u32, u32),
}

impl ClassifierInput {
    pub fn channels(&self) -> usize {
        self.image.as_ref().map_or(0, |_| 3) + self.mask.as_ref().map_or(0, |_| 1)
    }

    pub fn dims(&self) -> (u32, u32) {
        match (&self.image, &self.mask) {
            (Some(i), _) => (i.width(), i.height()),
            (None, Some(m)) => m.dims(),
            (None, None) => (0, 0),
        }
    }
}

pub fn make_input(
    img: &FundusImage,
    roi: Option<&RoiBox>,
    mask: Option<&BinaryMask>,
    format: InputFormat,
) -> Result<ClassifierInput> {
    let need_roi = || roi.ok_or_else(|| Error::Format(format!("{} needs an roi", format.as_str())));
    let need_mask = || {
        let m = mask.ok_or_else(|| Error::Format(format!("{} needs a mask", format.as_str())))?;
        if m.dims() != (img.width(), img.height()) {
            return Err(Error::DimensionMismatch(
                img.width(),
                img.height(),
                m.width(),
                m.height(),
            ));
        }
        Ok(m)
    };
    let input = match format {
        InputFormat::Image => ClassifierInput {
            format,
            image: Some(img.clone()),
            mask: None,
            origin: (0, 0),
        },
        InputFormat::LocalOnh => {
            let r = need_roi()?;
            ClassifierInput {
                format,
                image: Some(crop(img, r)?),
                mask: None,
                origin: (r.x, r.y),
            }
        }
        InputFormat::Mask => ClassifierInput {
            format,
            image: None,
            mask: Some(need_mask()?.clone()),
            origin: (0, 0),
        },
        InputFormat::MaskPlusLocal => {
            let r = need_roi()?;
            let m = need_mask()?;
            ClassifierInput {
                format,
                image: Some(crop(img, r)?),
                mask: Some(m.crop(r)?),
                origin: (r.x, r.y),
            }
        }
    };
    Ok(input)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnhFindings {
    pub shape: ShapeLabel,
    pub eccentricity: f64,
    pub disc_diameter_px: f64,
    /// Fitted disc centre in source-image pixels.
    pub disc_center: [f64; 2],
    pub theta: f64,
    pub source_backend: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VesselFindings {
    pub avr: f64,
    pub normalized_artery_caliber: Option<f64>,
    pub caliber: CaliberLabel,
    pub mean_artery_width_px: f64,
    pub mean_vein_width_px: f64,
    pub source_backend: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaculaFindings {
    pub reflex: ReflexLabel,
    pub reflex_ratio: f64,
    pub source_backend: String,
}

/// Threshold at the percentile (strictly above), keep the largest component.
fn crude_mask(img: &FundusImage, cfg: &ClassifierConfig) -> BinaryMask {
    let g = weighted_gray(img, cfg.crude_gray_weights);
    let mut values: Vec<f64> = g.pixels.iter().map(|&v| v as f64).collect();
    let t = raster::percentile(&mut values, cfg.crude_percentile);
    let raw = BinaryMask::from_fn(g.width, g.height, |x, y| g.get(x, y) as f64 > t);
    raster::largest_component(&raw)
}

pub fn classify_onh_shape(input: &ClassifierInput, cfg: &ClassifierConfig, source_backend: &str) -> Result<OnhFindings> {
    let mask = match (input.format, &input.mask, &input.image) {
        (InputFormat::Mask | InputFormat::MaskPlusLocal, Some(m), _) => m.clone(),
        (InputFormat::Image | InputFormat::LocalOnh, _, Some(img)) => crude_mask(img, cfg),
        _ => {
            return Err(Error::Format(format!(
                "{} payload is incomplete",
                input.format.as_str()
            )))
        }
    };
    let fit = fit_ellipse(&mask).map_err(|e| Error::ClassificationFailed(e.to_string()))?;
    Ok(OnhFindings {
        shape: cfg.shape_for(fit.eccentricity, fit.theta),
        eccentricity: fit.eccentricity,
        disc_diameter_px: 2.0 * fit.a,
        disc_center: [fit.cx + input.origin.0 as f64, fit.cy + input.origin.1 as f64],
        theta: fit.theta,
        source_backend: source_backend.to_string(),
        confidence: cfg.shape_confidence(fit.eccentricity),
    })
}

/// Per-centreline-pixel width samples `(label, width)` with widths of
/// `2 × distance transform`.
/// Vessel width at each centreline pixel: twice the distance-transform ridge
/// height, interpolated from the two neighbours across the vessel, less the
/// half pixel on each side between a boundary pixel centre and the edge.
pub fn centerline_widths(v: &VesselMask) -> Vec<(u32, u32, AvLabel, f64)> {
    let dt = raster::distance_transform_sq(v.vessel());
    let skeleton = raster::thin(v.vessel());
    let (w, h) = (v.dims().0 as i64, v.dims().1 as i64);
    let d = |x: i64, y: i64| {
        if x < 0 || y < 0 || x >= w || y >= h {
            0.0
        } else {
            dt[(y * w + x) as usize].sqrt()
        }
    };
    skeleton
        .points()
        .map(|(x, y)| {
            let (xi, yi) = (x as i64, y as i64);
            // The tent d(t) = r - |t| has d(-s) + d(s) + 2s = 2r for any step s
            // straddling the ridge; along the vessel the sum is larger.
            let ridge = [(1, 0), (0, 1), (1, 1), (1, -1)]
                .iter()
                .map(|&(dx, dy)| {
                    let step = ((dx * dx + dy * dy) as f64).sqrt();
                    d(xi - dx, yi - dy) + d(xi + dx, yi + dy) + 2.0 * step
                })
                .fold(f64::INFINITY, f64::min);
            let i = (yi * w + xi) as usize;
            (x, y, v.av()[i], (ridge - 1.0).max(1.0))
        })
        .collect()
}

pub fn classify_artery_caliber(
    v: &VesselMask,
    disc: Option<&OnhFindings>,
    cfg: &ClassifierConfig,
    source_backend: &str,
) -> Result<VesselFindings> {
    let samples = centerline_widths(v);
    let in_scope = |x: u32, y: u32| match disc {
        None => true,
        Some(d) => {
            let r = ((x as f64 - d.disc_center[0]).powi(2) + (y as f64 - d.disc_center[1]).powi(2)).sqrt();
            let dd = d.disc_diameter_px;
            r >= cfg.caliber_annulus[0] * dd && r <= cfg.caliber_annulus[1] * dd
        }
    };
    let mean = |label: AvLabel| -> Option<f64> {
        let (mut s, mut n) = (0.0, 0usize);
        for &(x, y, l, w) in &samples {
            if l == label && in_scope(x, y) {
                s += w;
                n += 1;
            }
        }
        (n > 0).then(|| s / n as f64)
    };
    let where_ = if disc.is_some() { " in the caliber annulus" } else { "" };
    let artery = mean(AvLabel::Artery)
        .ok_or_else(|| Error::InsufficientVessels(format!("no artery centreline{where_}")))?;
    let vein = mean(AvLabel::Vein)
        .ok_or_else(|| Error::InsufficientVessels(format!("no vein centreline{where_}")))?;
    let normalized = disc.map(|d| artery / d.disc_diameter_px);
    Ok(VesselFindings {
        avr: artery / vein,
        normalized_artery_caliber: normalized,
        caliber: normalized.map_or(CaliberLabel::Indeterminate, |c| cfg.caliber_for(c)),
        mean_artery_width_px: artery,
        mean_vein_width_px: vein,
        source_backend: source_backend.to_string(),
    })
}

pub fn reflex_ratio(img: &FundusImage, roi: &RoiBox, cfg: &ClassifierConfig) -> Result<f64> {
    roi.validate_for(img.width(), img.height())?;
    let side = roi.w.min(roi.h);
    if side < 10 {
        return Err(Error::RoiTooSmall(side));
    }
    let patch = crop(img, roi)?;
    let luma = box_blur(&Plane::from_gray(&to_gray(&patch, ChannelMix::Luma)), cfg.reflex_smoothing_px);
    let (cx, cy) = ((roi.w as f64 - 1.0) / 2.0, (roi.h as f64 - 1.0) / 2.0);
    let s = side as f64;
    let (r_c, r_in, r_out) = (cfg.reflex_center * s, cfg.reflex_annulus[0] * s, cfg.reflex_annulus[1] * s);
    let (mut c_sum, mut c_n, mut a_sum, mut a_n) = (0.0, 0usize, 0.0, 0usize);
    for y in 0..luma.height {
        for x in 0..luma.width {
            let r = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            let v = luma.at(x, y);
            if r <= r_c {
                c_sum += v;
                c_n += 1;
            } else if r >= r_in && r <= r_out {
                a_sum += v;
                a_n += 1;
            }
        }
    }
    let c = c_sum / c_n.max(1) as f64;
    let a = a_sum / a_n.max(1) as f64;
    Ok(c.max(1e-6) / a.max(1e-6))
}

pub fn classify_macular_reflex(
    img: &FundusImage,
    macula_roi: &RoiBox,
    cfg: &ClassifierConfig,
    source_backend: &str,
) -> Result<MaculaFindings> {
    let ratio = reflex_ratio(img, macula_roi, cfg)?;
    Ok(MaculaFindings {
        reflex: if ratio >= cfg.reflex_threshold {
            ReflexLabel::Present
        } else {
            ReflexLabel::Absent
        },
        reflex_ratio: ratio,
        source_backend: source_backend.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormatRow {
    pub format: InputFormat,
    pub accuracy: f64,
    pub per_class: BTreeMap<String, f64>,
    /// Holdout images evaluated for this format.
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormatReport {
    pub formats: Vec<FormatRow>,
}

impl FormatReport {
    pub fn row(&self, f: InputFormat) -> Option<&FormatRow> {
        self.formats.iter().find(|r| r.format == f)
    }

    /// Flat table: per format, one overall row then one row per class.
    pub fn table(&self) -> Vec<(InputFormat, String, f64)> {
        let mut out = Vec::new();
        for r in &self.formats {
            out.push((r.format, "overall".to_string(), r.accuracy));
            for (label, acc) in &r.per_class {
                out.push((r.format, label.clone(), *acc));
            }
        }
        out
    }
}

/// Shape predictions for every format on one image (`None` when the
/// pipeline could not produce a prediction for that format).
pub fn shape_predictions(
    img: &FundusImage,
    cfg: &crate::config::AnalysisConfig,
) -> [(InputFormat, Option<ShapeLabel>); 4] {
    let roi = crate::localizer::locate_onh(img, &cfg.localizer);
    let mask = crate::segmenter::segment_onh_builtin(img, &roi, &cfg.segmenter).ok();
    InputFormat::ALL.map(|f| {
        let pred = make_input(img, Some(&roi), mask.as_ref(), f)
            .and_then(|input| classify_onh_shape(&input, &cfg.classifier, "classical@1.0.0"))
            .ok()
            .map(|o| o.shape);
        (f, pred)
    })
}

/// Evaluates shape classification under all four input formats on the
/// holdout split of a generated corpus.
pub fn compare_formats(corpus_dir: &Path, cfg: &crate::config::AnalysisConfig) -> Result<FormatReport> {
    let manifest = crate::synthgen::CorpusManifest::load(corpus_dir)?;
    let holdout: Vec<_> = manifest.holdout().cloned().collect();
    if holdout.is_empty() {
        return Err(Error::Corpus("corpus has no holdout entries".into()));
    }
    let run = |e: &crate::synthgen::ManifestEntry| -> Result<(ShapeLabel, [(InputFormat, Option<ShapeLabel>); 4])> {
        let bytes = std::fs::read(corpus_dir.join(&e.image))
            .map_err(|err| Error::Corpus(format!("{}: {err}", e.image)))?;
        let lat = e.truth.as_ref().map(|t| t.laterality).unwrap_or_default();
        let img = crate::codec::decode_image(&bytes, lat)?;
        Ok((e.labels.shape, shape_predictions(&img, cfg)))
    };
    #[cfg(feature = "parallel")]
    let results: Vec<_> = {
        use rayon::prelude::*;
        holdout.par_iter().map(run).collect::<Result<Vec<_>>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<_> = holdout.iter().map(run).collect::<Result<Vec<_>>>()?;

    let labels: Vec<String> = ShapeLabel::ALL.iter().map(|l| l.to_string()).collect();
    let mut formats = Vec::new();
    for (k, f) in InputFormat::ALL.iter().enumerate() {
        let truths: Vec<String> = results.iter().map(|(t, _)| t.to_string()).collect();
        // A missing prediction never matches a truth label.
        let preds: Vec<String> = results
            .iter()
            .map(|(_, p)| p[k].1.map_or_else(|| "none".to_string(), |l| l.to_string()))
            .collect();
        let mut all = labels.clone();
        all.push("none".to_string());
        let cm = crate::metrics::confusion(&preds, &truths, &all)?;
        let per_class = crate::metrics::per_class_accuracy(&cm)
            .into_iter()
            .filter(|(l, _)| l != "none")
            .collect();
        formats.push(FormatRow {
            format: *f,
            accuracy: crate::metrics::accuracy(&cm)?,
            per_class,
            n: results.len(),
        });
    }
    Ok(FormatReport { formats })
}
