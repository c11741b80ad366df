//! Deterministic synthetic fundus generator with exact ground truth.
//!
//! A scene is sampled from `(GenParams, seed)`; rendering is a pure function
//! of the scene. Geometry is expressed in pixel-centre coordinates.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierConfig;
use crate::codec;
use crate::error::{Error, Result};
use crate::model::{
    AvLabel, BinaryMask, CaliberLabel, EllipseFit, FundusImage, Laterality, ReflexLabel,
    ShapeLabel, VesselMask,
};

// Anatomical priors and rendering constants. Lengths are fractions of the
// shorter image side unless noted.
const DISC_EQ_DIAMETER: (f64, f64) = (0.13, 0.15);
const ROUND_ECC: (f64, f64) = (0.0, 0.30);
const OVAL_ECC: (f64, f64) = (0.60, 0.80);
const OVAL_TILT: f64 = 0.35;
/// Fovea distance in units of a nominal disc diameter, intersected with
/// 2.0-3.0 true disc diameters (2a).
const FOVEA_DISTANCE_NOMINAL: (f64, f64) = (2.15, 2.85);
const NOMINAL_DISC: f64 = 0.15;
const FOVEA_DISTANCE_DD: (f64, f64) = (2.0, 3.0);
const FOVEA_ANGLE_DEG: f64 = 20.0;
const CENTER_JITTER: f64 = 0.03;
const APERTURE_RADIUS: f64 = 0.48;
const MACULA_RADIUS: f64 = 0.038;
const REFLEX_RADIUS: f64 = 0.013;
const VESSEL_LENGTH: (f64, f64) = (0.30, 0.40);
const VESSEL_BEND: f64 = 0.08;
const VESSEL_ANGLES_DEG: [f64; 8] = [-165.0, -125.0, -80.0, -40.0, 40.0, 80.0, 125.0, 165.0];
const VESSEL_ANGLE_JITTER_DEG: f64 = 4.0;
/// Normalized artery caliber (width / 2a) per class, kept clear of the
/// classifier thresholds.
const CALIBER_NARROWED: (f64, f64) = (0.030, 0.040);
const CALIBER_NORMAL: (f64, f64) = (0.060, 0.078);
const CALIBER_WIDENED: (f64, f64) = (0.102, 0.118);
const VEIN_CALIBER: (f64, f64) = (0.085, 0.100);
const WIDTH_JITTER: f64 = 0.04;
/// Width change per unit Bézier parameter, relative to the reference width
/// at the caliber-measurement annulus.
const TAPER: f64 = 0.5;
/// The caliber annulus (in disc diameters from the disc centre).
pub const CALIBER_ANNULUS_DD: (f64, f64) = (1.0, 1.5);

const BACKGROUND_RGB: [f64; 3] = [205.0, 105.0, 50.0];
const VIGNETTE: f64 = 0.18;
const DISC_RGB: [f64; 3] = [235.0, 219.0, 161.0];
const MACULA_DEPTH_EDGE: f64 = 0.36;
const MACULA_DEPTH_CENTER: f64 = 0.52;
const REFLEX_RGB: [f64; 3] = [255.0, 235.0, 200.0];
const REFLEX_MIX: f64 = 0.85;
const VEIN_FACTOR: [f64; 3] = [0.72, 0.52, 0.60];
const ARTERY_BRIGHTNESS: f64 = 1.2;
const ARTERY_CENTRAL_REFLEX: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelMix(pub BTreeMap<String, f64>);

/// Per-family label probabilities. Missing families are uniform; labels
/// missing from a given family have probability zero.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassMix {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<LabelMix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caliber: Option<LabelMix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reflex: Option<LabelMix>,
}

impl ClassMix {
    pub fn with(mut self, family: &str, pairs: &[(&str, f64)]) -> Self {
        let mix = Some(LabelMix(
            pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        ));
        match family {
            "shape" => self.shape = mix,
            "caliber" => self.caliber = mix,
            "reflex" => self.reflex = mix,
            _ => panic!("unknown label family {family}"),
        }
        self
    }
}

fn probabilities<L: Copy + std::str::FromStr + PartialEq>(
    family: &str,
    labels: &[L],
    mix: &Option<LabelMix>,
) -> Result<Vec<f64>> {
    let Some(LabelMix(map)) = mix else {
        return Ok(vec![1.0 / labels.len() as f64; labels.len()]);
    };
    let mut probs = vec![0.0; labels.len()];
    for (name, &p) in map {
        let label: L = name
            .parse()
            .map_err(|_| Error::InvalidProbabilities(format!("{family}: unknown label '{name}'")))?;
        let idx = labels
            .iter()
            .position(|&l| l == label)
            .ok_or_else(|| Error::InvalidProbabilities(format!("{family}: label '{name}'")))?;
        if !(0.0..=1.0).contains(&p) || !p.is_finite() {
            return Err(Error::InvalidProbabilities(format!(
                "{family}: p({name}) = {p}"
            )));
        }
        probs[idx] = p;
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidProbabilities(format!(
            "{family}: probabilities sum to {total}"
        )));
    }
    Ok(probs)
}

fn draw<L: Copy>(rng: &mut ChaCha8Rng, labels: &[L], probs: &[f64]) -> L {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (l, p) in labels.iter().zip(probs) {
        acc += p;
        if u < acc {
            return *l;
        }
    }
    // rounding slack: the last label with non-zero mass
    let last = probs.iter().rposition(|&p| p > 0.0).unwrap_or(labels.len() - 1);
    labels[last]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub img_w: u32,
    pub img_h: u32,
    #[serde(default)]
    pub class_mix: ClassMix,
    pub noise_sigma: f64,
}

impl GenParams {
    /// The fixed fixture: 512×512, noise σ = 8, uniform labels.
    pub fn standard() -> Self {
        Self {
            img_w: 512,
            img_h: 512,
            class_mix: ClassMix::default(),
            noise_sigma: 8.0,
        }
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }
}

pub const STANDARD_CORPUS_SIZE: usize = 200;
pub const STANDARD_CORPUS_SEED: u64 = 42;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vessel {
    /// Quadratic Bézier control points.
    pub control: [(f64, f64); 3],
    /// Widths at the start (t = 0) and end (t = 1); linear in between.
    pub width_start: f64,
    pub width_end: f64,
    pub av: AvLabel,
}

impl Vessel {
    pub fn point(&self, t: f64) -> (f64, f64) {
        let [p0, p1, p2] = self.control;
        let u = 1.0 - t;
        (
            u * u * p0.0 + 2.0 * u * t * p1.0 + t * t * p2.0,
            u * u * p0.1 + 2.0 * u * t * p1.1 + t * t * p2.1,
        )
    }

    pub fn width_at(&self, t: f64) -> f64 {
        self.width_start + (self.width_end - self.width_start) * t
    }

    /// Polyline approximation with `n` segments.
    pub fn polyline(&self, n: usize) -> Vec<(f64, f64, f64)> {
        (0..=n)
            .map(|i| {
                let t = i as f64 / n as f64;
                let (x, y) = self.point(t);
                (x, y, t)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthScene {
    pub seed: u64,
    pub img_w: u32,
    pub img_h: u32,
    pub disc: EllipseFit,
    pub fovea: (f64, f64),
    pub laterality: Laterality,
    pub vessels: Vec<Vessel>,
    pub reflex_present: bool,
    pub shape_label: ShapeLabel,
    pub caliber_label: CaliberLabel,
    pub noise_sigma: f64,
    pub aperture_center: (f64, f64),
    pub aperture_radius: f64,
    pub macula_radius: f64,
    pub reflex_radius: f64,
}

pub fn gen_scene(params: &GenParams, seed: u64) -> Result<SynthScene> {
    if params.img_w < 64 || params.img_h < 64 {
        return Err(Error::InvalidImage("generator needs at least 64x64".into()));
    }
    if !(params.noise_sigma >= 0.0 && params.noise_sigma.is_finite()) {
        return Err(Error::InvalidImage(format!(
            "noise sigma {}",
            params.noise_sigma
        )));
    }
    let shape_p = probabilities("shape", &ShapeLabel::ALL, &params.class_mix.shape)?;
    let caliber_p = probabilities("caliber", &CaliberLabel::MEASURABLE, &params.class_mix.caliber)?;
    let reflex_p = probabilities("reflex", &ReflexLabel::ALL, &params.class_mix.reflex)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape_label = draw(&mut rng, &ShapeLabel::ALL, &shape_p);
    let caliber_label = draw(&mut rng, &CaliberLabel::MEASURABLE, &caliber_p);
    let reflex_present = draw(&mut rng, &ReflexLabel::ALL, &reflex_p) == ReflexLabel::Present;
    let laterality = if rng.random::<bool>() {
        Laterality::Right
    } else {
        Laterality::Left
    };

    let (w, h) = (params.img_w as f64, params.img_h as f64);
    let side = w.min(h);
    let uni = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| lo + (hi - lo) * rng.random::<f64>();

    let d_eq = uni(&mut rng, DISC_EQ_DIAMETER) * side;
    let ecc = match shape_label {
        ShapeLabel::Round => uni(&mut rng, ROUND_ECC),
        _ => uni(&mut rng, OVAL_ECC),
    };
    let ratio = (1.0 - ecc * ecc).sqrt();
    let a = d_eq / 2.0 / ratio.sqrt();
    let b = a * ratio;
    let theta = match shape_label {
        ShapeLabel::Round => uni(&mut rng, (0.0, PI)),
        ShapeLabel::OvalVertical => PI / 2.0 + uni(&mut rng, (-OVAL_TILT, OVAL_TILT)),
        ShapeLabel::OvalHorizontal => uni(&mut rng, (-OVAL_TILT, OVAL_TILT)),
    };
    let dd = 2.0 * a;

    let nominal = NOMINAL_DISC * side;
    let lo = (FOVEA_DISTANCE_DD.0 * dd).max(FOVEA_DISTANCE_NOMINAL.0 * nominal);
    let hi = (FOVEA_DISTANCE_DD.1 * dd).min(FOVEA_DISTANCE_NOMINAL.1 * nominal);
    let k = uni(&mut rng, (lo, hi.max(lo))) / dd;
    let phi = uni(&mut rng, (-FOVEA_ANGLE_DEG, FOVEA_ANGLE_DEG)).to_radians();
    let temporal = laterality.temporal_sign().unwrap_or(1.0);
    let offset = (temporal * phi.cos() * k * dd, phi.sin() * k * dd);
    let center = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
    let mid = (
        center.0 + uni(&mut rng, (-CENTER_JITTER, CENTER_JITTER)) * side,
        center.1 + uni(&mut rng, (-CENTER_JITTER, CENTER_JITTER)) * side,
    );
    let disc_c = (mid.0 - offset.0 / 2.0, mid.1 - offset.1 / 2.0);
    let fovea = (mid.0 + offset.0 / 2.0, mid.1 + offset.1 / 2.0);
    let disc = EllipseFit::new(disc_c.0, disc_c.1, a, b, theta)?;

    let caliber_range = match caliber_label {
        CaliberLabel::Narrowed => CALIBER_NARROWED,
        CaliberLabel::Normal => CALIBER_NORMAL,
        _ => CALIBER_WIDENED,
    };
    let artery_c = uni(&mut rng, caliber_range);
    let vein_c = uni(&mut rng, VEIN_CALIBER);

    let temporal_angle = offset.1.atan2(offset.0);
    let mut vessels = Vec::with_capacity(VESSEL_ANGLES_DEG.len());
    for (i, base) in VESSEL_ANGLES_DEG.iter().enumerate() {
        let av = if i % 2 == 0 {
            AvLabel::Artery
        } else {
            AvLabel::Vein
        };
        let jitter = uni(&mut rng, (-VESSEL_ANGLE_JITTER_DEG, VESSEL_ANGLE_JITTER_DEG));
        let alpha = temporal_angle + (base + jitter).to_radians();
        let length = uni(&mut rng, VESSEL_LENGTH) * side;
        let bend = uni(&mut rng, (-VESSEL_BEND, VESSEL_BEND));
        let w_jitter = 1.0 + uni(&mut rng, (-WIDTH_JITTER, WIDTH_JITTER));
        let (dx, dy) = (alpha.cos(), alpha.sin());
        let (nx, ny) = (-dy, dx);
        // start on the disc rim along direction alpha
        let r0 = 1.0 / disc.rho(disc_c.0 + dx, disc_c.1 + dy);
        let p0 = (disc_c.0 + r0 * dx, disc_c.1 + r0 * dy);
        let p1 = (
            p0.0 + 0.5 * length * dx + bend * length * nx,
            p0.1 + 0.5 * length * dy + bend * length * ny,
        );
        let p2 = (
            p0.0 + length * dx + 1.5 * bend * length * nx,
            p0.1 + length * dy + 1.5 * bend * length * ny,
        );
        let ref_c = if av == AvLabel::Artery { artery_c } else { vein_c };
        let w_ref = ref_c * dd * w_jitter;
        let mut v = Vessel {
            control: [p0, p1, p2],
            width_start: w_ref,
            width_end: w_ref,
            av,
        };
        let t_ref = param_at_distance(&v, disc_c, 1.25 * dd);
        v.width_start = w_ref * (1.0 + TAPER * t_ref);
        v.width_end = w_ref * (1.0 - TAPER * (1.0 - t_ref));
        vessels.push(v);
    }

    let scene = SynthScene {
        seed,
        img_w: params.img_w,
        img_h: params.img_h,
        disc,
        fovea,
        laterality,
        vessels,
        reflex_present,
        shape_label,
        caliber_label,
        noise_sigma: params.noise_sigma,
        aperture_center: center,
        aperture_radius: APERTURE_RADIUS * side,
        macula_radius: MACULA_RADIUS * side,
        reflex_radius: REFLEX_RADIUS * side,
    };
    debug_assert!(scene.check_invariants().is_ok());
    Ok(scene)
}

/// Smallest Bézier parameter whose point lies `dist` from `c` (1.0 if none).
fn param_at_distance(v: &Vessel, c: (f64, f64), dist: f64) -> f64 {
    let n = 400;
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let p = v.point(t);
        if ((p.0 - c.0).powi(2) + (p.1 - c.1).powi(2)).sqrt() >= dist {
            return t;
        }
    }
    1.0
}

impl SynthScene {
    pub fn disc_diameter(&self) -> f64 {
        2.0 * self.disc.a
    }

    /// Mean generated width of vessels of class `av` over the caliber
    /// annulus, sampled along their centrelines.
    pub fn mean_width_in_annulus(&self, av: AvLabel) -> Option<f64> {
        let dd = self.disc_diameter();
        let (lo, hi) = (CALIBER_ANNULUS_DD.0 * dd, CALIBER_ANNULUS_DD.1 * dd);
        let (mut sum, mut n) = (0.0, 0usize);
        for v in self.vessels.iter().filter(|v| v.av == av) {
            for (x, y, t) in v.polyline(400) {
                let r = ((x - self.disc.cx).powi(2) + (y - self.disc.cy).powi(2)).sqrt();
                let ra = ((x - self.aperture_center.0).powi(2)
                    + (y - self.aperture_center.1).powi(2))
                .sqrt();
                if (lo..=hi).contains(&r) && ra < self.aperture_radius {
                    sum += v.width_at(t);
                    n += 1;
                }
            }
        }
        (n > 0).then(|| sum / n as f64)
    }

    /// Fovea-to-disc distance in disc diameters.
    pub fn fovea_distance_dd(&self) -> f64 {
        let d = ((self.fovea.0 - self.disc.cx).powi(2) + (self.fovea.1 - self.disc.cy).powi(2))
            .sqrt();
        d / self.disc_diameter()
    }

    pub fn check_invariants(&self) -> Result<()> {
        let cfg = ClassifierConfig::default();
        let bad = |m: String| Err(Error::InvalidImage(format!("scene {}: {m}", self.seed)));
        let k = self.fovea_distance_dd();
        if !(2.0..=3.0).contains(&k) {
            return bad(format!("fovea at {k:.3} disc diameters"));
        }
        let (dx, dy) = (self.fovea.0 - self.disc.cx, self.fovea.1 - self.disc.cy);
        let angle = dy.abs().atan2(dx.abs()).to_degrees();
        if angle > 30.0 {
            return bad(format!("fovea {angle:.1}° off horizontal"));
        }
        if let Some(s) = self.laterality.temporal_sign() {
            if dx * s <= 0.0 {
                return bad("fovea on the nasal side".into());
            }
        }
        let expected_shape = cfg.shape_for(self.disc.eccentricity, self.disc.theta);
        if expected_shape != self.shape_label {
            return bad(format!(
                "shape label {} but geometry says {}",
                self.shape_label, expected_shape
            ));
        }
        if let Some(w) = self.mean_width_in_annulus(AvLabel::Artery) {
            let c = w / self.disc_diameter();
            if cfg.caliber_for(c) != self.caliber_label {
                return bad(format!(
                    "caliber label {} but normalized width {c:.4}",
                    self.caliber_label
                ));
            }
        }
        Ok(())
    }

    /// The same scene with every length multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> SynthScene {
        let s = |p: (f64, f64)| (p.0 * factor, p.1 * factor);
        let mut out = self.clone();
        out.img_w = (self.img_w as f64 * factor).round() as u32;
        out.img_h = (self.img_h as f64 * factor).round() as u32;
        out.disc.cx *= factor;
        out.disc.cy *= factor;
        out.disc.a *= factor;
        out.disc.b *= factor;
        out.fovea = s(self.fovea);
        out.aperture_center = s(self.aperture_center);
        out.aperture_radius *= factor;
        out.macula_radius *= factor;
        out.reflex_radius *= factor;
        for v in &mut out.vessels {
            v.control = v.control.map(s);
            v.width_start *= factor;
            v.width_end *= factor;
        }
        out
    }

    /// The same scene (aperture included) shifted by `(dx, dy)` pixels.
    pub fn translated(&self, dx: f64, dy: f64) -> SynthScene {
        let t = |p: (f64, f64)| (p.0 + dx, p.1 + dy);
        let mut out = self.clone();
        out.disc.cx += dx;
        out.disc.cy += dy;
        out.fovea = t(self.fovea);
        out.aperture_center = t(self.aperture_center);
        for v in &mut out.vessels {
            v.control = v.control.map(t);
        }
        out
    }

    pub fn with_noise(&self, sigma: f64) -> SynthScene {
        SynthScene {
            noise_sigma: sigma,
            ..self.clone()
        }
    }
}

/// Ground-truth rasters rendered from the scene geometry (noise-free).
#[derive(Debug, Clone, PartialEq)]
pub struct SceneTruth {
    pub onh_mask: BinaryMask,
    pub macula_mask: BinaryMask,
    pub vessel_truth: VesselMask,
}

#[derive(Debug, Clone, Copy)]
struct VesselHit {
    dist: f64,
    width: f64,
}

/// Per-vessel nearest-centreline distances over the vessel's bounding box.
fn vessel_distance_field(v: &Vessel, w: usize, h: usize) -> (usize, usize, usize, usize, Vec<VesselHit>) {
    let poly = v.polyline(256);
    let pad = v.width_start.max(v.width_end) / 2.0 + 2.0;
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for &(x, y, _) in &poly {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    let bx0 = ((x0 - pad).floor().max(0.0) as usize).min(w);
    let by0 = ((y0 - pad).floor().max(0.0) as usize).min(h);
    let bx1 = ((x1 + pad).ceil().max(0.0) as usize + 1).min(w);
    let by1 = ((y1 + pad).ceil().max(0.0) as usize + 1).min(h);
    let (bw, bh) = (bx1.saturating_sub(bx0), by1.saturating_sub(by0));
    let mut field = vec![
        VesselHit {
            dist: f64::INFINITY,
            width: 0.0
        };
        bw * bh
    ];
    for seg in poly.windows(2) {
        let (ax, ay, at) = seg[0];
        let (cx, cy, ct) = seg[1];
        let sw = v.width_at(at).max(v.width_at(ct)) / 2.0 + 2.0;
        let sx0 = ((ax.min(cx) - sw).floor().max(bx0 as f64)) as usize;
        let sy0 = ((ay.min(cy) - sw).floor().max(by0 as f64)) as usize;
        let sx1 = ((ax.max(cx) + sw).ceil().max(0.0) as usize + 1).min(bx1);
        let sy1 = ((ay.max(cy) + sw).ceil().max(0.0) as usize + 1).min(by1);
        let (ex, ey) = (cx - ax, cy - ay);
        let len2 = ex * ex + ey * ey;
        for py in sy0..sy1 {
            for px in sx0..sx1 {
                let (qx, qy) = (px as f64 - ax, py as f64 - ay);
                let u = if len2 > 0.0 {
                    ((qx * ex + qy * ey) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let d = ((qx - u * ex).powi(2) + (qy - u * ey).powi(2)).sqrt();
                let cell = &mut field[(py - by0) * bw + (px - bx0)];
                if d < cell.dist {
                    *cell = VesselHit {
                        dist: d,
                        width: v.width_at(at + u * (ct - at)),
                    };
                }
            }
        }
    }
    (bx0, by0, bw, bh, field)
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// Renders the scene image and its ground-truth masks.
pub fn render(scene: &SynthScene) -> Result<(FundusImage, SceneTruth)> {
    let (w, h) = (scene.img_w as usize, scene.img_h as usize);
    let n = w * h;
    let mut color = vec![[0.0f64; 3]; n];
    let mut onh = BinaryMask::new(scene.img_w, scene.img_h);
    let mut macula = BinaryMask::new(scene.img_w, scene.img_h);
    let (ax, ay) = scene.aperture_center;
    let big_r = scene.aperture_radius;
    let disc = &scene.disc;
    let (fx, fy) = scene.fovea;

    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let r = ((xf - ax).powi(2) + (yf - ay).powi(2)).sqrt();
            let shade = 1.0 - VIGNETTE * (r / big_r).powi(2).min(1.0);
            let mut c = BACKGROUND_RGB.map(|v| v * shade);

            let rf = ((xf - fx).powi(2) + (yf - fy).powi(2)).sqrt();
            let rm = scene.macula_radius;
            if rf < rm + 1.0 {
                let cov = (rm + 0.5 - rf).clamp(0.0, 1.0);
                let q = (rf / rm).min(1.0);
                let depth = MACULA_DEPTH_EDGE + (MACULA_DEPTH_CENTER - MACULA_DEPTH_EDGE) * (1.0 - q * q);
                c = c.map(|v| v * (1.0 - depth * cov));
            }
            if rf <= rm {
                macula.set(x as u32, y as u32, true);
            }

            let rho = disc.rho(xf, yf);
            if rho < 1.5 {
                let dist_c = ((xf - disc.cx).powi(2) + (yf - disc.cy).powi(2)).sqrt();
                let rim = if rho > 1e-9 { dist_c / rho } else { disc.b };
                let signed = (rho - 1.0) * rim;
                let cov = (0.5 - signed).clamp(0.0, 1.0);
                c = lerp3(c, DISC_RGB, cov);
            }
            if rho <= 1.0 {
                onh.set(x as u32, y as u32, true);
            }
            color[y * w + x] = c;
        }
    }

    let mut vessel_bits = BinaryMask::new(scene.img_w, scene.img_h);
    let mut av = vec![AvLabel::None; n];
    for v in &scene.vessels {
        let (bx, by, bw, bh, field) = vessel_distance_field(v, w, h);
        let factor = if v.av == AvLabel::Artery {
            VEIN_FACTOR.map(|f| f * ARTERY_BRIGHTNESS)
        } else {
            VEIN_FACTOR
        };
        for yy in 0..bh {
            for xx in 0..bw {
                let hit = field[yy * bw + xx];
                if !hit.dist.is_finite() {
                    continue;
                }
                let (x, y) = (bx + xx, by + yy);
                let half = hit.width / 2.0;
                // Vessels emerge at the disc rim and are not drawn over it.
                let (xf, yf) = (x as f64, y as f64);
                let rho = disc.rho(xf, yf);
                let dist_c = ((xf - disc.cx).powi(2) + (yf - disc.cy).powi(2)).sqrt();
                let rim = if rho > 1e-9 { dist_c / rho } else { disc.b };
                let outside = ((rho - 1.0) * rim + 0.5).clamp(0.0, 1.0);
                let cov = (half + 0.5 - hit.dist).clamp(0.0, 1.0) * outside;
                if cov <= 0.0 {
                    continue;
                }
                let i = y * w + x;
                let mut vc = [
                    color[i][0] * factor[0],
                    color[i][1] * factor[1],
                    color[i][2] * factor[2],
                ];
                if v.av == AvLabel::Artery {
                    let lift = 1.0 + ARTERY_CENTRAL_REFLEX * (1.0 - hit.dist).clamp(0.0, 1.0);
                    vc = vc.map(|c| c * lift);
                }
                color[i] = lerp3(color[i], vc, cov);
                let ra = ((x as f64 - ax).powi(2) + (y as f64 - ay).powi(2)).sqrt();
                if hit.dist <= half && ra <= big_r && rho > 1.0 {
                    vessel_bits.set(x as u32, y as u32, true);
                    av[i] = v.av;
                }
            }
        }
    }

    if scene.reflex_present {
        let rr = scene.reflex_radius;
        let reach = rr.ceil() as i64 + 2;
        for y in (fy.round() as i64 - reach)..=(fy.round() as i64 + reach) {
            for x in (fx.round() as i64 - reach)..=(fx.round() as i64 + reach) {
                if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                    continue;
                }
                let d = ((x as f64 - fx).powi(2) + (y as f64 - fy).powi(2)).sqrt();
                let cov = (rr + 0.5 - d).clamp(0.0, 1.0);
                if cov > 0.0 {
                    let i = y as usize * w + x as usize;
                    color[i] = lerp3(color[i], REFLEX_RGB, REFLEX_MIX * cov);
                }
            }
        }
    }

    let mut noise_rng = ChaCha8Rng::seed_from_u64(scene.seed ^ 0x6e6f_6973_6521_u64);
    let normal = (scene.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, scene.noise_sigma).expect("finite sigma"));
    let mut pixels = Vec::with_capacity(n * 3);
    for y in 0..h {
        for x in 0..w {
            let r = ((x as f64 - ax).powi(2) + (y as f64 - ay).powi(2)).sqrt();
            let inside = (big_r + 0.5 - r).clamp(0.0, 1.0);
            for ch in 0..3 {
                let mut v = color[y * w + x][ch] * inside;
                if let Some(nd) = &normal {
                    v += nd.sample(&mut noise_rng);
                }
                pixels.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    let image = FundusImage::new(scene.img_w, scene.img_h, pixels, scene.laterality)?;
    let truth = SceneTruth {
        onh_mask: onh,
        macula_mask: macula,
        vessel_truth: VesselMask::new(vessel_bits, av)?,
    };
    Ok((image, truth))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryLabels {
    pub shape: ShapeLabel,
    pub caliber: CaliberLabel,
    pub reflex: ReflexLabel,
}

/// Geometry kept alongside each corpus entry for localization scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryTruth {
    pub seed: u64,
    pub laterality: Laterality,
    pub disc: EllipseFit,
    pub fovea: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Holdout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub onh_mask: String,
    pub macula_mask: String,
    pub vessel_mask: String,
    pub av_map: String,
    pub labels: EntryLabels,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<EntryTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const HOLDOUT_FRACTION: f64 = 0.20;

impl CorpusManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let bytes = fs::read(&path)
            .map_err(|e| Error::Corpus(format!("{}: {e}", path.display())))?;
        let m: CorpusManifest = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Corpus(format!("{}: {e}", path.display())))?;
        if m.version != 1 {
            return Err(Error::Corpus(format!("unsupported manifest version {}", m.version)));
        }
        Ok(m)
    }

    pub fn holdout(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.split == Split::Holdout)
    }
}

/// SplitMix64 finalizer, used to derive per-item seeds and split order.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn scene_seed(corpus_seed: u64, index: usize) -> u64 {
    mix64(corpus_seed ^ mix64(index as u64))
}

/// Holdout membership: the `round(0.2·n)` indices with the smallest hash.
pub fn holdout_indices(n: usize, seed: u64) -> Vec<bool> {
    let k = (HOLDOUT_FRACTION * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (mix64(seed.rotate_left(17) ^ (i as u64).wrapping_mul(0x2545_f491_4f6c_dd1d)), i));
    let mut out = vec![false; n];
    for &i in order.iter().take(k) {
        out[i] = true;
    }
    out
}

pub fn entry_id(index: usize) -> String {
    format!("img{index:04}")
}

struct RenderedEntry {
    entry: ManifestEntry,
    files: Vec<(PathBuf, Vec<u8>)>,
}

fn render_entry(index: usize, params: &GenParams, seed: u64, holdout: bool) -> Result<RenderedEntry> {
    let scene = gen_scene(params, scene_seed(seed, index))?;
    let (img, truth) = render(&scene)?;
    let id = entry_id(index);
    let entry = ManifestEntry {
        image: format!("images/{id}.png"),
        onh_mask: format!("masks/{id}_onh.png"),
        macula_mask: format!("masks/{id}_macula.png"),
        vessel_mask: format!("masks/{id}_vessels.png"),
        av_map: format!("masks/{id}_av.png"),
        labels: EntryLabels {
            shape: scene.shape_label,
            caliber: scene.caliber_label,
            reflex: if scene.reflex_present {
                ReflexLabel::Present
            } else {
                ReflexLabel::Absent
            },
        },
        split: if holdout { Split::Holdout } else { Split::Train },
        truth: Some(EntryTruth {
            seed: scene.seed,
            laterality: scene.laterality,
            disc: scene.disc,
            fovea: scene.fovea,
        }),
        id,
    };
    let files = vec![
        (PathBuf::from(&entry.image), codec::encode_rgb_png(&img)?),
        (PathBuf::from(&entry.onh_mask), codec::encode_mask_png(&truth.onh_mask)?),
        (PathBuf::from(&entry.macula_mask), codec::encode_mask_png(&truth.macula_mask)?),
        (
            PathBuf::from(&entry.vessel_mask),
            codec::encode_mask_png(truth.vessel_truth.vessel())?,
        ),
        (PathBuf::from(&entry.av_map), codec::encode_av_png(&truth.vessel_truth)?),
    ];
    Ok(RenderedEntry { entry, files })
}

/// Generates `n` scenes, writes images, truth masks and `manifest.json`.
pub fn gen_corpus(n: usize, params: &GenParams, seed: u64, out_dir: &Path) -> Result<CorpusManifest> {
    if n == 0 {
        return Err(Error::Corpus("corpus size must be at least 1".into()));
    }
    let holdout = holdout_indices(n, seed);
    for sub in ["images", "masks"] {
        fs::create_dir_all(out_dir.join(sub))
            .map_err(|e| Error::Io(format!("{}: {e}", out_dir.display())))?;
    }
    let write = |r: RenderedEntry| -> Result<ManifestEntry> {
        for (rel, bytes) in &r.files {
            let path = out_dir.join(rel);
            fs::write(&path, bytes).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        }
        Ok(r.entry)
    };

    #[cfg(feature = "parallel")]
    let entries: Vec<ManifestEntry> = {
        use rayon::prelude::*;
        (0..n)
            .into_par_iter()
            .map(|i| render_entry(i, params, seed, holdout[i]).and_then(write))
            .collect::<Result<Vec<_>>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let entries: Vec<ManifestEntry> = (0..n)
        .map(|i| render_entry(i, params, seed, holdout[i]).and_then(write))
        .collect::<Result<Vec<_>>>()?;

    let manifest = CorpusManifest {
        version: 1,
        entries,
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, json).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(manifest)
}
