//! Stage 2: segmentation behind a pluggable backend contract.
//!
//! Builtin classical backends threshold percentiles inside localized ROIs
//! (ONH, macula) and run a line top-hat over the whole frame (vessels).
//! Other backends (remote services, oracles) implement the same trait.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::fmt;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localizer::equalization_lut;
use crate::model::{
    to_gray, weighted_gray, AvLabel, BinaryMask, ChannelMix, EllipseFit, FundusImage, RoiBox,
    RoiStructure, VesselMask,
};
use crate::raster::{self, box_blur, disk_offsets, line_offsets, Plane};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    Onh,
    Macula,
    Vessels,
}

impl Structure {
    pub const ALL: [Structure; 3] = [Structure::Onh, Structure::Macula, Structure::Vessels];

    pub fn as_str(self) -> &'static str {
        match self {
            Structure::Onh => "onh",
            Structure::Macula => "macula",
            Structure::Vessels => "vessels",
        }
    }

    pub fn roi_structure(self) -> Option<RoiStructure> {
        match self {
            Structure::Onh => Some(RoiStructure::Onh),
            Structure::Macula => Some(RoiStructure::Macula),
            Structure::Vessels => None,
        }
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Structure {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "onh" => Ok(Structure::Onh),
            "macula" => Ok(Structure::Macula),
            "vessels" => Ok(Structure::Vessels),
            _ => Err(Error::UnknownLabel(format!("structure '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Builtin,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub name: String,
    pub version: String,
    pub structure: Structure,
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
}

pub const BUILTIN_NAME: &str = "classical";
pub const BUILTIN_VERSION: &str = "1.0.0";

fn is_semver(v: &str) -> bool {
    let core = v.split(['-', '+']).next().unwrap_or("");
    let parts: Vec<&str> = core.split('.').collect();
    parts.len() == 3
        && parts
            .iter()
            .all(|p| !p.is_empty() && p.chars().all(|c| c.is_ascii_digit()) && (p.len() == 1 || !p.starts_with('0')))
}

impl BackendDescriptor {
    pub fn builtin(structure: Structure) -> Self {
        Self {
            name: BUILTIN_NAME.into(),
            version: BUILTIN_VERSION.into(),
            structure,
            kind: BackendKind::Builtin,
            endpoint: None,
        }
    }

    /// `name@version`
    pub fn id(&self) -> String {
        format!("{}@{}", self.name, self.version)
    }

    pub fn validate(&self) -> Result<()> {
        let valid_name = !self.name.is_empty()
            && self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
        if !valid_name {
            return Err(Error::InvalidBackend(format!("name '{}'", self.name)));
        }
        if !is_semver(&self.version) {
            return Err(Error::InvalidBackend(format!(
                "version '{}' is not semver",
                self.version
            )));
        }
        match (self.kind, &self.endpoint) {
            (BackendKind::Remote, None) => Err(Error::InvalidBackend(
                "remote backend requires an endpoint".into(),
            )),
            (BackendKind::Remote, Some(url))
                if !(url.starts_with("http://") || url.starts_with("https://")) =>
            {
                Err(Error::InvalidBackend(format!("endpoint '{url}' is not an http url")))
            }
            _ => Ok(()),
        }
    }

    fn key(&self) -> (Structure, String, String) {
        (self.structure, self.name.clone(), self.version.clone())
    }
}

/// Parses `name@version`.
pub fn parse_backend_ref(s: &str) -> Result<(String, String)> {
    match s.split_once('@') {
        Some((n, v)) if !n.is_empty() && is_semver(v) => Ok((n.to_string(), v.to_string())),
        _ => Err(Error::InvalidBackend(format!("'{s}' is not name@version"))),
    }
}

/// Output of a segmentation backend.
#[derive(Debug, Clone, PartialEq)]
pub enum Segmentation {
    Region(BinaryMask),
    Vessels(VesselMask),
}

pub trait SegmentationBackend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    /// `roi` is required for region structures and ignored for vessels.
    fn segment(&self, img: &FundusImage, roi: Option<&RoiBox>) -> Result<Segmentation>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterConfig {
    pub gray_weights: [f64; 3],
    /// Clip limit of the equalization fitted to each region's histogram.
    pub clahe_clip: f64,
    pub onh_percentile: f64,
    pub macula_percentile: f64,
    pub roi_dilation: f64,
    pub close_radius: f64,
    pub min_component_px: usize,
    /// Line structuring element length as a fraction of image height.
    pub vessel_line_length: f64,
    pub vessel_orientations: usize,
    pub vessel_k_sigma: f64,
    pub vessel_min_component_px: usize,
    /// Radius (fraction of image height) of the opening that removes small
    /// bright features before the top-hat.
    pub vessel_preopen: f64,
    /// Background window (fraction of image height) for A/V intensity
    /// normalization.
    pub av_background: f64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            gray_weights: [0.6, 0.3, 0.1],
            clahe_clip: 2.0,
            onh_percentile: 80.0,
            macula_percentile: 20.0,
            roi_dilation: 0.10,
            close_radius: 3.0,
            min_component_px: 50,
            vessel_line_length: 0.03,
            vessel_orientations: 12,
            vessel_k_sigma: 2.0,
            vessel_min_component_px: 30,
            vessel_preopen: 0.012,
            av_background: 0.06,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        let pct = 0.0..=100.0;
        if !pct.contains(&self.onh_percentile) || !pct.contains(&self.macula_percentile) {
            return Err(Error::Config("percentiles must lie in [0, 100]".into()));
        }
        if !(self.clahe_clip >= 1.0) {
            return Err(Error::Config("clahe clip must be >= 1".into()));
        }
        if self.vessel_orientations == 0 || !(self.vessel_line_length > 0.0) {
            return Err(Error::Config("vessel line filter misconfigured".into()));
        }
        Ok(())
    }

    /// Weighted gray with a clipped equalization fitted to the ROI histogram.
    fn enhanced_gray(&self, img: &FundusImage, roi: &RoiBox) -> Plane {
        let g = weighted_gray(img, self.gray_weights);
        let w = g.width as usize;
        let mut hist = [0.0f64; 256];
        for y in roi.y..roi.y + roi.h {
            for x in roi.x..roi.x + roi.w {
                hist[g.pixels[y as usize * w + x as usize] as usize] += 1.0;
            }
        }
        let lut = equalization_lut(&hist, self.clahe_clip);
        let mut p = Plane::from_gray(&g);
        for v in p.data.iter_mut() {
            *v = lut[*v as usize];
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Polarity {
    Bright,
    Dark,
}

fn check_roi(img: &FundusImage, roi: Option<&RoiBox>, want: RoiStructure) -> Result<RoiBox> {
    let roi = roi.ok_or_else(|| Error::Format(format!("{want:?} segmentation needs an roi")))?;
    if roi.structure != want {
        return Err(Error::Format(format!(
            "roi is for {:?}, expected {want:?}",
            roi.structure
        )));
    }
    roi.validate_for(img.width(), img.height())?;
    Ok(*roi)
}

fn segment_region(
    img: &FundusImage,
    roi: &RoiBox,
    cfg: &SegmenterConfig,
    polarity: Polarity,
) -> Result<BinaryMask> {
    let g = cfg.enhanced_gray(img, roi);
    let w = img.width() as usize;
    let mut values = Vec::with_capacity((roi.w * roi.h) as usize);
    for y in roi.y..roi.y + roi.h {
        for x in roi.x..roi.x + roi.w {
            values.push(g.data[y as usize * w + x as usize]);
        }
    }
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let pct = match polarity {
        Polarity::Bright => cfg.onh_percentile,
        Polarity::Dark => cfg.macula_percentile,
    };
    let t = raster::percentile(&mut values, pct);
    let region = roi.dilated(cfg.roi_dilation, img.width(), img.height());
    let select = |strict: bool| {
        BinaryMask::from_fn(img.width(), img.height(), |x, y| {
            if !region.contains(x, y) {
                return false;
            }
            let v = g.data[y as usize * w + x as usize];
            match (polarity, strict) {
                (Polarity::Bright, true) => v > t,
                (Polarity::Bright, false) => v >= t,
                (Polarity::Dark, true) => v < t,
                (Polarity::Dark, false) => v <= t,
            }
        })
    };
    // A flat ROI has nothing to separate.
    if hi - lo <= 0.0 {
        return Err(Error::SegmentationEmpty {
            min_px: cfg.min_component_px,
        });
    }
    let mut raw = select(true);
    if raw.is_empty() {
        raw = select(false);
    }
    let closed = raster::close(&raw, cfg.close_radius);
    let confined = BinaryMask::from_fn(img.width(), img.height(), |x, y| {
        region.contains(x, y) && closed.get(x, y)
    });
    let largest = raster::largest_component(&confined);
    if largest.count() < cfg.min_component_px {
        return Err(Error::SegmentationEmpty {
            min_px: cfg.min_component_px,
        });
    }
    Ok(raster::fill_holes(&largest))
}

pub fn segment_onh_builtin(img: &FundusImage, roi: &RoiBox, cfg: &SegmenterConfig) -> Result<BinaryMask> {
    let roi = check_roi(img, Some(roi), RoiStructure::Onh)?;
    segment_region(img, &roi, cfg, Polarity::Bright)
}

pub fn segment_macula_builtin(img: &FundusImage, roi: &RoiBox, cfg: &SegmenterConfig) -> Result<BinaryMask> {
    let roi = check_roi(img, Some(roi), RoiStructure::Macula)?;
    segment_region(img, &roi, cfg, Polarity::Dark)
}

/// Aperture mask for vessel statistics.
fn vessel_fov(img: &FundusImage) -> Vec<bool> {
    let luma = Plane::from_gray(&to_gray(img, ChannelMix::Luma));
    let smooth = box_blur(&luma, 5);
    let inside = BinaryMask::from_fn(img.width(), img.height(), |x, y| smooth.at(x as usize, y as usize) > 25.0);
    raster::erode(&inside, &disk_offsets(3.0)).to_bools()
}

/// Line top-hat response of the inverted green channel.
pub fn vessel_response(img: &FundusImage, cfg: &SegmenterConfig) -> Plane {
    let h = img.height() as f64;
    let green = Plane::from_gray(&to_gray(img, ChannelMix::Green));
    let pre_r = (cfg.vessel_preopen * h).max(1.0);
    let opened = raster::gray_open(&green, &disk_offsets(pre_r));
    let inv = Plane {
        data: opened.data.iter().map(|v| 255.0 - v).collect(),
        ..opened
    };
    let len = ((cfg.vessel_line_length * h).round() as usize).max(3);
    let mut min_open = Plane::new(inv.width, inv.height, f64::INFINITY);
    for k in 0..cfg.vessel_orientations {
        let angle = PI * k as f64 / cfg.vessel_orientations as f64;
        let opened = raster::gray_open(&inv, &line_offsets(len, angle));
        for (m, v) in min_open.data.iter_mut().zip(&opened.data) {
            *m = m.min(*v);
        }
    }
    Plane {
        data: inv
            .data
            .iter()
            .zip(&min_open.data)
            .map(|(v, o)| v - o)
            .collect(),
        ..inv
    }
}

pub fn segment_vessels_builtin(img: &FundusImage, cfg: &SegmenterConfig) -> Result<VesselMask> {
    let (w, h) = (img.width(), img.height());
    let fov = vessel_fov(img);
    let inside: Vec<usize> = (0..fov.len()).filter(|&i| fov[i]).collect();
    if inside.is_empty() {
        return Ok(VesselMask::empty(w, h));
    }
    let response = vessel_response(img, cfg);
    let n = inside.len() as f64;
    let mean = inside.iter().map(|&i| response.data[i]).sum::<f64>() / n;
    let var = inside
        .iter()
        .map(|&i| (response.data[i] - mean).powi(2))
        .sum::<f64>()
        / n;
    let sd = var.sqrt();
    if sd <= 1e-9 {
        return Ok(VesselMask::empty(w, h));
    }
    let t = mean + cfg.vessel_k_sigma * sd;
    let raw = BinaryMask::from_fn(w, h, |x, y| {
        let i = (y * w + x) as usize;
        fov[i] && response.data[i] > t
    });
    let vessel = raster::remove_small_components(&raw, cfg.vessel_min_component_px);
    if vessel.is_empty() {
        return Ok(VesselMask::empty(w, h));
    }
    let av = label_arteries_veins(img, &vessel, cfg);
    VesselMask::new(vessel, av)
}

/// Median split of per-component mean centreline intensity (green channel
/// over its local background): brighter components are arteries.
fn label_arteries_veins(img: &FundusImage, vessel: &BinaryMask, cfg: &SegmenterConfig) -> Vec<AvLabel> {
    let w = img.width() as usize;
    let green = Plane::from_gray(&to_gray(img, ChannelMix::Green));
    let k = ((cfg.av_background * img.height() as f64).round() as usize).max(3);
    // Local background over non-vessel pixels only, so a vessel's own width
    // does not darken its reference.
    let fov = vessel_fov(img);
    let off: Vec<f64> = (0..green.data.len())
        .map(|i| if vessel.get_index(i) || !fov[i] { 0.0 } else { 1.0 })
        .collect();
    let masked = Plane { data: green.data.iter().zip(&off).map(|(g, o)| g * o).collect(), ..green.clone() };
    let num = box_blur(&masked, k);
    let den = box_blur(&Plane { data: off, ..green.clone() }, k);
    let background = Plane {
        data: num.data.iter().zip(&den.data).map(|(n, d)| if *d > 1e-9 { n / d } else { 0.0 }).collect(),
        ..green.clone()
    };
    let skeleton = raster::thin(vessel);
    let (labels, sizes) = raster::label_components(vessel);
    let ncomp = sizes.len() - 1;
    let mut sum = vec![0.0; ncomp + 1];
    let mut cnt = vec![0usize; ncomp + 1];
    for (x, y) in skeleton.points() {
        let i = y as usize * w + x as usize;
        let l = labels[i] as usize;
        let bg = background.data[i].max(1.0);
        sum[l] += green.data[i] / bg;
        cnt[l] += 1;
    }
    // Components whose skeleton vanished fall back to all their pixels.
    let mut fallback_sum = vec![0.0; ncomp + 1];
    let mut fallback_cnt = vec![0usize; ncomp + 1];
    for (i, &l) in labels.iter().enumerate() {
        let l = l as usize;
        if l != 0 && cnt[l] == 0 {
            fallback_sum[l] += green.data[i] / background.data[i].max(1.0);
            fallback_cnt[l] += 1;
        }
    }
    let means: Vec<f64> = (1..=ncomp)
        .map(|l| {
            if cnt[l] > 0 {
                sum[l] / cnt[l] as f64
            } else {
                fallback_sum[l] / fallback_cnt[l].max(1) as f64
            }
        })
        .collect();
    // Median of component means weighted by centreline length, so short
    // fragments do not shift the split.
    let mut order: Vec<usize> = (0..ncomp).collect();
    order.sort_by(|&a, &b| means[a].total_cmp(&means[b]));
    let weight = |l: usize| cnt[l + 1].max(1) as f64;
    let total: f64 = (0..ncomp).map(weight).sum();
    let mut acc = 0.0;
    let mut med = means.get(order.last().copied().unwrap_or(0)).copied().unwrap_or(0.0);
    for &l in &order {
        acc += weight(l);
        if acc >= total / 2.0 {
            med = means[l];
            break;
        }
    }
    // Refine the split to the midpoint of the two class means; the median
    // itself falls on a class member whenever the classes are balanced.
    for _ in 0..16 {
        let (mut hi, mut hi_w, mut lo, mut lo_w) = (0.0, 0.0, 0.0, 0.0);
        for l in 0..ncomp {
            if means[l] > med {
                hi += means[l] * weight(l);
                hi_w += weight(l);
            } else {
                lo += means[l] * weight(l);
                lo_w += weight(l);
            }
        }
        if hi_w == 0.0 || lo_w == 0.0 {
            break;
        }
        let next = (hi / hi_w + lo / lo_w) / 2.0;
        if next == med {
            break;
        }
        med = next;
    }
    labels
        .iter()
        .map(|&l| match l {
            0 => AvLabel::None,
            l if means[l as usize - 1] > med => AvLabel::Artery,
            _ => AvLabel::Vein,
        })
        .collect()
}

/// Moment ellipse of a mask: centroid, and semi-axes `2√λ` from the
/// eigenvalues of the pixel covariance.
pub fn fit_ellipse(mask: &BinaryMask) -> Result<EllipseFit> {
    let n = mask.count();
    if n < 5 {
        return Err(Error::DegenerateMask(n));
    }
    let (mut sx, mut sy) = (0.0, 0.0);
    for (x, y) in mask.points() {
        sx += x as f64;
        sy += y as f64;
    }
    let nf = n as f64;
    let (cx, cy) = (sx / nf, sy / nf);
    let (mut m20, mut m02, mut m11) = (0.0, 0.0, 0.0);
    for (x, y) in mask.points() {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        m20 += dx * dx;
        m02 += dy * dy;
        m11 += dx * dy;
    }
    // Pixel-area correction: each pixel is a unit square, not a point.
    let (m20, m02, m11) = (m20 / nf + 1.0 / 12.0, m02 / nf + 1.0 / 12.0, m11 / nf);
    let half_trace = (m20 + m02) / 2.0;
    let disc = (((m20 - m02) / 2.0).powi(2) + m11 * m11).sqrt();
    let l1 = half_trace + disc;
    let l2 = (half_trace - disc).max(0.0);
    let theta = 0.5 * (2.0 * m11).atan2(m20 - m02);
    let (a, b) = (2.0 * l1.sqrt(), 2.0 * l2.sqrt());
    if !(b > 0.0) {
        return Err(Error::DegenerateMask(n));
    }
    EllipseFit::new(cx, cy, a, b.min(a), theta)
}

pub struct BuiltinBackend {
    desc: BackendDescriptor,
    cfg: SegmenterConfig,
}

impl BuiltinBackend {
    pub fn new(structure: Structure, cfg: SegmenterConfig) -> Self {
        Self {
            desc: BackendDescriptor::builtin(structure),
            cfg,
        }
    }
}

impl SegmentationBackend for BuiltinBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.desc
    }

    fn segment(&self, img: &FundusImage, roi: Option<&RoiBox>) -> Result<Segmentation> {
        match self.desc.structure {
            Structure::Onh => {
                let roi = check_roi(img, roi, RoiStructure::Onh)?;
                segment_region(img, &roi, &self.cfg, Polarity::Bright).map(Segmentation::Region)
            }
            Structure::Macula => {
                let roi = check_roi(img, roi, RoiStructure::Macula)?;
                segment_region(img, &roi, &self.cfg, Polarity::Dark).map(Segmentation::Region)
            }
            Structure::Vessels => segment_vessels_builtin(img, &self.cfg).map(Segmentation::Vessels),
        }
    }
}

/// Backend that returns stored masks keyed by image id, for substituting
/// ground truth into the pipeline.
pub struct OracleBackend {
    desc: BackendDescriptor,
    regions: HashMap<String, BinaryMask>,
    vessels: HashMap<String, VesselMask>,
}

impl OracleBackend {
    pub fn new(name: &str, version: &str, structure: Structure) -> Self {
        Self {
            desc: BackendDescriptor {
                name: name.into(),
                version: version.into(),
                structure,
                kind: BackendKind::Builtin,
                endpoint: None,
            },
            regions: HashMap::new(),
            vessels: HashMap::new(),
        }
    }

    pub fn insert_region(&mut self, image_id: &str, mask: BinaryMask) {
        self.regions.insert(image_id.to_string(), mask);
    }

    pub fn insert_vessels(&mut self, image_id: &str, mask: VesselMask) {
        self.vessels.insert(image_id.to_string(), mask);
    }
}

impl SegmentationBackend for OracleBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.desc
    }

    fn segment(&self, img: &FundusImage, _roi: Option<&RoiBox>) -> Result<Segmentation> {
        let missing = || Error::BackendFailure(format!("no stored mask for {}", img.image_id()));
        match self.desc.structure {
            Structure::Vessels => self
                .vessels
                .get(img.image_id())
                .cloned()
                .map(Segmentation::Vessels)
                .ok_or_else(missing),
            _ => self
                .regions
                .get(img.image_id())
                .cloned()
                .map(Segmentation::Region)
                .ok_or_else(missing),
        }
    }
}

/// Restricts a region mask to the ROI dilated by `fraction`; checks dims.
pub fn confine_region(img: &FundusImage, mask: BinaryMask, roi: &RoiBox, fraction: f64) -> Result<BinaryMask> {
    if mask.dims() != (img.width(), img.height()) {
        return Err(Error::DimensionMismatch(
            img.width(),
            img.height(),
            mask.width(),
            mask.height(),
        ));
    }
    let region = roi.dilated(fraction, img.width(), img.height());
    Ok(BinaryMask::from_fn(img.width(), img.height(), |x, y| {
        region.contains(x, y) && mask.get(x, y)
    }))
}

/// Runs `backend` for a region structure and enforces the mask contract.
pub fn segment_with(
    backend: &dyn SegmentationBackend,
    img: &FundusImage,
    roi: &RoiBox,
    dilation: f64,
) -> Result<BinaryMask> {
    let want = backend
        .descriptor()
        .structure
        .roi_structure()
        .ok_or_else(|| Error::Format("vessel backend used for a region".into()))?;
    let roi = check_roi(img, Some(roi), want)?;
    match backend.segment(img, Some(&roi))? {
        Segmentation::Region(m) => confine_region(img, m, &roi, dilation),
        Segmentation::Vessels(_) => Err(Error::BackendFailure(format!(
            "{} returned vessels for a region",
            backend.descriptor().id()
        ))),
    }
}

/// Runs a vessel backend. A plain binary mask (as remote backends return) gets
/// artery/vein labels from the builtin second stage.
pub fn segment_vessels_with(
    backend: &dyn SegmentationBackend,
    img: &FundusImage,
    cfg: &SegmenterConfig,
) -> Result<VesselMask> {
    let dims = (img.width(), img.height());
    let mismatch = |(w, h): (u32, u32)| Error::DimensionMismatch(dims.0, dims.1, w, h);
    match backend.segment(img, None)? {
        Segmentation::Vessels(v) if v.dims() == dims => Ok(v),
        Segmentation::Vessels(v) => Err(mismatch(v.dims())),
        Segmentation::Region(m) if m.dims() == dims => {
            let av = label_arteries_veins(img, &m, cfg);
            VesselMask::new(m, av)
        }
        Segmentation::Region(m) => Err(mismatch(m.dims())),
    }
}

type RegistryKey = (Structure, String, String);

struct RegistryEntry {
    desc: BackendDescriptor,
    backend: Arc<dyn SegmentationBackend>,
}

/// Shared backend registry. Mutation is serialized; readers see either the
/// old or the new map.
#[derive(Clone, Default)]
pub struct Registry {
    inner: Arc<RwLock<Arc<BTreeMap<RegistryKey, Arc<RegistryEntry>>>>>,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.list(None)).finish()
    }
}

impl Registry {
    /// Registry holding the builtin backend for every structure.
    pub fn with_builtins(cfg: &SegmenterConfig) -> Self {
        let reg = Registry::default();
        for s in Structure::ALL {
            reg.register(Arc::new(BuiltinBackend::new(s, cfg.clone())))
                .expect("builtin descriptors are valid");
        }
        reg
    }

    fn snapshot(&self) -> Arc<BTreeMap<RegistryKey, Arc<RegistryEntry>>> {
        self.inner.read().expect("registry lock").clone()
    }

    /// Adds a backend. Re-registering an identical descriptor is a no-op;
    /// a different descriptor under the same key is a conflict.
    pub fn register(&self, backend: Arc<dyn SegmentationBackend>) -> Result<BackendDescriptor> {
        let desc = backend.descriptor().clone();
        desc.validate()?;
        let mut guard = self.inner.write().expect("registry lock");
        let key = desc.key();
        if let Some(existing) = guard.get(&key) {
            if existing.desc == desc {
                return Ok(desc);
            }
            return Err(Error::BackendConflict(format!(
                "{} for {} is already registered with different fields",
                desc.id(),
                desc.structure
            )));
        }
        let mut next = (**guard).clone();
        next.insert(key, Arc::new(RegistryEntry { desc: desc.clone(), backend }));
        *guard = Arc::new(next);
        Ok(desc)
    }

    /// Descriptors ordered by (name, version); optionally one structure.
    pub fn list(&self, structure: Option<Structure>) -> Vec<BackendDescriptor> {
        let snap = self.snapshot();
        let mut out: Vec<BackendDescriptor> = snap
            .values()
            .filter(|e| structure.is_none_or(|s| e.desc.structure == s))
            .map(|e| e.desc.clone())
            .collect();
        out.sort_by(|a, b| {
            (&a.name, &a.version, a.structure).cmp(&(&b.name, &b.version, b.structure))
        });
        out
    }

    pub fn get(&self, structure: Structure, name: &str, version: &str) -> Result<Arc<dyn SegmentationBackend>> {
        self.snapshot()
            .get(&(structure, name.to_string(), version.to_string()))
            .map(|e| e.backend.clone())
            .ok_or_else(|| Error::UnknownBackend(format!("{name}@{version} for {structure}")))
    }

    /// Resolves `name@version`, defaulting to the builtin backend.
    pub fn resolve(&self, structure: Structure, reference: Option<&str>) -> Result<Arc<dyn SegmentationBackend>> {
        match reference {
            None => self.get(structure, BUILTIN_NAME, BUILTIN_VERSION),
            Some(r) => {
                let (n, v) = parse_backend_ref(r)?;
                self.get(structure, &n, &v)
            }
        }
    }

    /// One backend per structure in `Structure::ALL` order. `reference`
    /// replaces the builtin wherever it is registered and must be registered
    /// for at least one structure.
    pub fn resolve_each(&self, reference: Option<&str>) -> Result<[Arc<dyn SegmentationBackend>; 3]> {
        let [a, b, c] = Structure::ALL.map(|s| self.resolve(s, reference));
        if let (Some(r), Err(_), Err(_), Err(_)) = (reference, &a, &b, &c) {
            return Err(Error::UnknownBackend(r.to_string()));
        }
        let fallback = |s, got: Result<_>| got.or_else(|_| self.resolve(s, None));
        Ok([
            fallback(Structure::Onh, a)?,
            fallback(Structure::Macula, b)?,
            fallback(Structure::Vessels, c)?,
        ])
    }
}
