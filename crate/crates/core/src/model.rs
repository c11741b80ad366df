//! Domain types shared by every stage of the pipeline, plus the handful of
//! raster operations (grayscale conversion, cropping, overlays) that clinicians
//! and downstream stages need on them.
//!
//! Coordinates are pixel centers: pixel `(x, y)` sits at the continuous point
//! `(x, y)`, origin top-left, `y` growing downward.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MIN_INGEST_SIDE: u32 = 64;
pub const MAX_SIDE: u32 = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Laterality {
    Left,
    Right,
    #[default]
    Unknown,
}

impl Laterality {
    /// Unit x-direction pointing from the optic disc toward the macula, if known.
    pub fn temporal_sign(self) -> Option<f64> {
        match self {
            Laterality::Right => Some(-1.0),
            Laterality::Left => Some(1.0),
            Laterality::Unknown => None,
        }
    }
}

impl std::str::FromStr for Laterality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "left" | "l" | "os" => Ok(Laterality::Left),
            "right" | "r" | "od" => Ok(Laterality::Right),
            "unknown" | "" => Ok(Laterality::Unknown),
            other => Err(Error::Format(format!("unknown laterality '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rgb(pub u8, pub u8, pub u8);

/// 8-bit RGB fundus photograph. Immutable; cheap to clone.
#[derive(Clone, PartialEq, Eq)]
pub struct FundusImage {
    width: u32,
    height: u32,
    pixels: Arc<[u8]>,
    laterality: Laterality,
    image_id: String,
}

impl fmt::Debug for FundusImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FundusImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("laterality", &self.laterality)
            .field("image_id", &self.image_id)
            .finish()
    }
}

/// Lowercase hex SHA-256 of a raw pixel buffer.
pub fn content_id(pixels: &[u8]) -> String {
    hex::encode(Sha256::digest(pixels))
}

impl FundusImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>, laterality: Laterality) -> Result<Self> {
        if width == 0 || height == 0 || width > MAX_SIDE || height > MAX_SIDE {
            return Err(Error::InvalidImage(format!(
                "dimensions {width}x{height} outside 1..={MAX_SIDE}"
            )));
        }
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(Error::InvalidImage(format!(
                "buffer has {} bytes, expected {expected}",
                pixels.len()
            )));
        }
        let image_id = content_id(&pixels);
        Ok(Self {
            width,
            height,
            pixels: pixels.into(),
            laterality,
            image_id,
        })
    }

    pub fn from_fn(
        width: u32,
        height: u32,
        laterality: Laterality,
        mut f: impl FnMut(u32, u32) -> Rgb,
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                let Rgb(r, g, b) = f(x, y);
                pixels.extend_from_slice(&[r, g, b]);
            }
        }
        Self::new(width, height, pixels, laterality)
    }

    /// Enforces the size limits applied to externally supplied images.
    pub fn check_ingest_limits(&self) -> Result<()> {
        if self.width < MIN_INGEST_SIDE || self.height < MIN_INGEST_SIDE {
            return Err(Error::InvalidImage(format!(
                "{}x{} is below the {MIN_INGEST_SIDE}px minimum",
                self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }
    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }
    pub fn laterality(&self) -> Laterality {
        self.laterality
    }
    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn with_laterality(&self, laterality: Laterality) -> Self {
        Self {
            laterality,
            ..self.clone()
        }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> Rgb {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        Rgb(self.pixels[i], self.pixels[i + 1], self.pixels[i + 2])
    }
}

/// Single-channel 8-bit raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width as usize * height as usize {
            return Err(Error::InvalidImage(format!(
                "gray buffer has {} bytes, expected {}",
                pixels.len(),
                width as usize * height as usize
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> u8) -> Self {
        let mut pixels = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum RoiStructure {
    Onh,
    Macula,
}

/// Axis-aligned region of interest produced by localization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub structure: RoiStructure,
    pub confidence: f64,
}

impl RoiBox {
    pub fn center(&self) -> (f64, f64) {
        (
            self.x as f64 + (self.w as f64 - 1.0) / 2.0,
            self.y as f64 + (self.h as f64 - 1.0) / 2.0,
        )
    }

    pub fn validate_for(&self, width: u32, height: u32) -> Result<()> {
        if self.w == 0
            || self.h == 0
            || self.x as u64 + self.w as u64 > width as u64
            || self.y as u64 + self.h as u64 > height as u64
        {
            return Err(Error::OutOfBounds {
                x: self.x,
                y: self.y,
                w: self.w,
                h: self.h,
                width,
                height,
            });
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::InvalidImage(format!(
                "roi confidence {} outside [0,1]",
                self.confidence
            )));
        }
        Ok(())
    }

    /// Square box of the given side centred on `(cx, cy)`, shifted (and if
    /// needed shrunk) so it lies inside the image.
    pub fn square_in_bounds(
        cx: f64,
        cy: f64,
        side: f64,
        width: u32,
        height: u32,
        structure: RoiStructure,
        confidence: f64,
    ) -> Self {
        let side = (side.round() as i64).clamp(1, width.min(height) as i64);
        let place = |c: f64, limit: u32| -> u32 {
            let start = (c - (side as f64 - 1.0) / 2.0).round() as i64;
            start.clamp(0, limit as i64 - side) as u32
        };
        Self {
            x: place(cx, width),
            y: place(cy, height),
            w: side as u32,
            h: side as u32,
            structure,
            confidence: confidence.clamp(0.0, 1.0),
        }
    }

    /// Box grown by `fraction` of its size (split evenly between both sides),
    /// clipped to the image.
    pub fn dilated(&self, fraction: f64, width: u32, height: u32) -> Self {
        let gx = (self.w as f64 * fraction / 2.0).round() as i64;
        let gy = (self.h as f64 * fraction / 2.0).round() as i64;
        let x0 = (self.x as i64 - gx).max(0);
        let y0 = (self.y as i64 - gy).max(0);
        let x1 = (self.x as i64 + self.w as i64 + gx).min(width as i64);
        let y1 = (self.y as i64 + self.h as i64 + gy).min(height as i64);
        Self {
            x: x0 as u32,
            y: y0 as u32,
            w: (x1 - x0) as u32,
            h: (y1 - y0) as u32,
            ..*self
        }
    }

    #[inline]
    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x && y >= self.y && x < self.x + self.w && y < self.y + self.h
    }
}

/// One bit per pixel, row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    words: Vec<u64>,
}

impl fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "BinaryMask({}x{}, {} set)",
            self.width,
            self.height,
            self.count()
        )
    }
}

impl BinaryMask {
    pub fn new(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        Self {
            width,
            height,
            words: vec![0; n.div_ceil(64)],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut m = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                if f(x, y) {
                    m.set(x, y, true);
                }
            }
        }
        m
    }

    pub fn from_bools(width: u32, height: u32, bits: &[bool]) -> Result<Self> {
        if bits.len() != width as usize * height as usize {
            return Err(Error::InvalidImage(format!(
                "mask buffer has {} entries, expected {}",
                bits.len(),
                width as usize * height as usize
            )));
        }
        let mut m = Self::new(width, height);
        for (i, &b) in bits.iter().enumerate() {
            if b {
                m.words[i / 64] |= 1 << (i % 64);
            }
        }
        Ok(m)
    }

    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }
    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get_index(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.get_index(y as usize * self.width as usize + x as usize)
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let i = y as usize * self.width as usize + x as usize;
        if value {
            self.words[i / 64] |= 1 << (i % 64);
        } else {
            self.words[i / 64] &= !(1 << (i % 64));
        }
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.width as usize * self.height as usize)
            .map(|i| self.get_index(i))
            .collect()
    }

    /// Foreground pixel coordinates in row-major order.
    pub fn points(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width as usize;
        (0..w * self.height as usize)
            .filter(|&i| self.get_index(i))
            .map(move |i| ((i % w) as u32, (i / w) as u32))
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> usize {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }

    pub fn union_count(&self, other: &BinaryMask) -> usize {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a | b).count_ones() as usize)
            .sum()
    }

    pub fn check_same_dims(&self, other: &BinaryMask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(())
    }

    /// Copy of the window `roi` as a standalone mask.
    pub fn crop(&self, roi: &RoiBox) -> Result<BinaryMask> {
        roi.validate_for(self.width, self.height)?;
        Ok(BinaryMask::from_fn(roi.w, roi.h, |x, y| {
            self.get(roi.x + x, roi.y + y)
        }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AvLabel {
    #[default]
    None,
    Artery,
    Vein,
}

impl AvLabel {
    pub fn index(self) -> u8 {
        match self {
            AvLabel::None => 0,
            AvLabel::Artery => 1,
            AvLabel::Vein => 2,
        }
    }

    pub fn from_index(i: u8) -> Result<Self> {
        match i {
            0 => Ok(AvLabel::None),
            1 => Ok(AvLabel::Artery),
            2 => Ok(AvLabel::Vein),
            other => Err(Error::Decode(format!("invalid a/v index {other}"))),
        }
    }
}

/// Vessel segmentation with per-pixel artery/vein labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VesselMask {
    vessel: BinaryMask,
    av: Vec<AvLabel>,
}

impl VesselMask {
    pub fn new(vessel: BinaryMask, av: Vec<AvLabel>) -> Result<Self> {
        if av.len() != vessel.width() as usize * vessel.height() as usize {
            return Err(Error::InvalidImage("a/v map size differs from mask".into()));
        }
        if let Some(i) = av
            .iter()
            .enumerate()
            .position(|(i, &l)| l != AvLabel::None && !vessel.get_index(i))
        {
            return Err(Error::InvalidImage(format!(
                "a/v label set at pixel {i} outside the vessel mask"
            )));
        }
        Ok(Self { vessel, av })
    }

    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            vessel: BinaryMask::new(width, height),
            av: vec![AvLabel::None; width as usize * height as usize],
        }
    }

    pub fn vessel(&self) -> &BinaryMask {
        &self.vessel
    }
    pub fn av(&self) -> &[AvLabel] {
        &self.av
    }
    pub fn label(&self, x: u32, y: u32) -> AvLabel {
        self.av[y as usize * self.vessel.width() as usize + x as usize]
    }
    pub fn dims(&self) -> (u32, u32) {
        self.vessel.dims()
    }
}

/// Moment-based ellipse; `theta` is the major-axis angle in `[0, π)` measured
/// from +x toward +y (downward).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipseFit {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
    pub eccentricity: f64,
}

impl EllipseFit {
    pub fn new(cx: f64, cy: f64, a: f64, b: f64, theta: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0 && b <= a && a.is_finite()) {
            return Err(Error::InvalidImage(format!(
                "invalid ellipse axes a={a} b={b}"
            )));
        }
        let theta = fold_angle(theta);
        Ok(Self {
            cx,
            cy,
            a,
            b,
            theta,
            eccentricity: (1.0 - (b * b) / (a * a)).max(0.0).sqrt(),
        })
    }

    /// Normalized elliptical radius of a point: `< 1` inside, `1` on the rim.
    pub fn rho(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.theta.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }

    pub fn area(&self) -> f64 {
        std::f64::consts::PI * self.a * self.b
    }
}

/// Folds an axis angle into `[0, π)`.
pub fn fold_angle(theta: f64) -> f64 {
    let pi = std::f64::consts::PI;
    let t = theta.rem_euclid(pi);
    if t >= pi {
        0.0
    } else {
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelMix {
    Luma,
    Red,
    Green,
}

pub fn to_gray(img: &FundusImage, mix: ChannelMix) -> GrayImage {
    let px = img.pixels();
    let pixels = px
        .chunks_exact(3)
        .map(|p| match mix {
            ChannelMix::Luma => {
                (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).round() as u8
            }
            ChannelMix::Red => p[0],
            ChannelMix::Green => p[1],
        })
        .collect();
    GrayImage {
        width: img.width(),
        height: img.height(),
        pixels,
    }
}

/// Weighted channel combination `round(wr·R + wg·G + wb·B)`, saturating.
pub fn weighted_gray(img: &FundusImage, weights: [f64; 3]) -> GrayImage {
    let pixels = img
        .pixels()
        .chunks_exact(3)
        .map(|p| {
            (weights[0] * p[0] as f64 + weights[1] * p[1] as f64 + weights[2] * p[2] as f64)
                .round()
                .clamp(0.0, 255.0) as u8
        })
        .collect();
    GrayImage {
        width: img.width(),
        height: img.height(),
        pixels,
    }
}

pub fn crop(img: &FundusImage, roi: &RoiBox) -> Result<FundusImage> {
    roi.validate_for(img.width(), img.height())?;
    let src = img.pixels();
    let stride = img.width() as usize * 3;
    let mut pixels = Vec::with_capacity(roi.w as usize * roi.h as usize * 3);
    for y in roi.y..roi.y + roi.h {
        let start = y as usize * stride + roi.x as usize * 3;
        pixels.extend_from_slice(&src[start..start + roi.w as usize * 3]);
    }
    FundusImage::new(roi.w, roi.h, pixels, img.laterality())
}

/// Alpha-blends `color` over the mask foreground; background is untouched.
pub fn overlay(img: &FundusImage, mask: &BinaryMask, color: Rgb, alpha: f64) -> Result<FundusImage> {
    if mask.dims() != (img.width(), img.height()) {
        return Err(Error::DimensionMismatch(
            img.width(),
            img.height(),
            mask.width(),
            mask.height(),
        ));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidImage(format!("alpha {alpha} outside [0,1]")));
    }
    let c = [color.0, color.1, color.2];
    let mut pixels = img.pixels().to_vec();
    for (i, px) in pixels.chunks_exact_mut(3).enumerate() {
        if mask.get_index(i) {
            for k in 0..3 {
                px[k] = blend(px[k], c[k], alpha);
            }
        }
    }
    FundusImage::new(img.width(), img.height(), pixels, img.laterality())
}

#[inline]
pub fn blend(src: u8, color: u8, alpha: f64) -> u8 {
    ((1.0 - alpha) * src as f64 + alpha * color as f64)
        .round()
        .clamp(0.0, 255.0) as u8
}

/// Optic disc shape classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeLabel {
    Round,
    OvalVertical,
    OvalHorizontal,
}

/// Artery caliber classes; `Indeterminate` only arises when no disc diameter
/// is available for normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaliberLabel {
    Narrowed,
    Normal,
    Widened,
    Indeterminate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReflexLabel {
    Present,
    Absent,
}

macro_rules! label_names {
    ($t:ty { $($v:ident => $s:literal),* $(,)? }) => {
        impl $t {
            pub fn as_str(self) -> &'static str {
                match self { $(Self::$v => $s),* }
            }
        }
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl std::str::FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok(Self::$v),)*
                    other => Err(Error::UnknownLabel(other.to_string())),
                }
            }
        }
    };
}

label_names!(ShapeLabel { Round => "round", OvalVertical => "oval_vertical", OvalHorizontal => "oval_horizontal" });
label_names!(CaliberLabel { Narrowed => "narrowed", Normal => "normal", Widened => "widened", Indeterminate => "indeterminate" });
label_names!(ReflexLabel { Present => "present", Absent => "absent" });

impl ShapeLabel {
    pub const ALL: [ShapeLabel; 3] = [Self::Round, Self::OvalVertical, Self::OvalHorizontal];
}

impl CaliberLabel {
    /// Classes a scene can carry (everything except `Indeterminate`).
    pub const MEASURABLE: [CaliberLabel; 3] = [Self::Narrowed, Self::Normal, Self::Widened];
}

impl ReflexLabel {
    pub const ALL: [ReflexLabel; 2] = [Self::Present, Self::Absent];
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid(w: u32, h: u32, c: Rgb) -> FundusImage {
        FundusImage::from_fn(w, h, Laterality::Unknown, |_, _| c).unwrap()
    }

    #[test]
    fn gray_white_luma() {
        let g = to_gray(&solid(2, 2, Rgb(255, 255, 255)), ChannelMix::Luma);
        assert_eq!(g.pixels, vec![255; 4]);
    }

    #[test]
    fn gray_channel_selection() {
        let img = solid(1, 1, Rgb(255, 0, 0));
        assert_eq!(to_gray(&img, ChannelMix::Red).pixels, vec![255]);
        assert_eq!(to_gray(&img, ChannelMix::Green).pixels, vec![0]);
    }

    #[test]
    fn gray_luma_rounding() {
        // 29.9 + 88.05 + 22.8 = 140.75
        let img = solid(1, 1, Rgb(100, 150, 200));
        assert_eq!(to_gray(&img, ChannelMix::Luma).pixels, vec![141]);
    }

    fn ramp(w: u32, h: u32) -> FundusImage {
        FundusImage::from_fn(w, h, Laterality::Left, |x, y| {
            Rgb((x * 7 + y) as u8, (y * 13) as u8, (x * y) as u8)
        })
        .unwrap()
    }

    #[test]
    fn crop_whole_image_is_identical_copy() {
        let img = ramp(10, 10);
        let roi = RoiBox {
            x: 0,
            y: 0,
            w: 10,
            h: 10,
            structure: RoiStructure::Onh,
            confidence: 1.0,
        };
        let out = crop(&img, &roi).unwrap();
        assert_eq!(out.pixels(), img.pixels());
        assert_eq!(out.laterality(), Laterality::Left);
    }

    #[test]
    fn crop_window_matches_source() {
        let img = ramp(10, 10);
        let roi = RoiBox {
            x: 2,
            y: 2,
            w: 4,
            h: 4,
            structure: RoiStructure::Onh,
            confidence: 0.5,
        };
        let out = crop(&img, &roi).unwrap();
        assert_eq!((out.width(), out.height()), (4, 4));
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(out.get(x, y), img.get(x + 2, y + 2));
            }
        }
        assert_ne!(out.image_id(), img.image_id());
    }

    #[test]
    fn crop_out_of_bounds() {
        let img = ramp(10, 10);
        let roi = RoiBox {
            x: 8,
            y: 8,
            w: 4,
            h: 4,
            structure: RoiStructure::Onh,
            confidence: 0.5,
        };
        assert!(matches!(crop(&img, &roi), Err(Error::OutOfBounds { .. })));
    }

    #[test]
    fn overlay_cases() {
        let img = solid(4, 4, Rgb(100, 100, 100));
        let mask = BinaryMask::from_fn(4, 4, |x, _| x < 2);
        let same = overlay(&img, &mask, Rgb(200, 0, 0), 0.0).unwrap();
        assert_eq!(same.pixels(), img.pixels());

        let sat = overlay(&img, &mask, Rgb(255, 0, 0), 1.0).unwrap();
        assert_eq!(sat.get(0, 0), Rgb(255, 0, 0));
        assert_eq!(sat.get(3, 3), Rgb(100, 100, 100));

        let half = overlay(&img, &mask, Rgb(200, 0, 0), 0.5).unwrap();
        assert_eq!(half.get(1, 2), Rgb(150, 50, 50));
    }

    #[test]
    fn overlay_dimension_mismatch() {
        let img = solid(4, 4, Rgb(1, 2, 3));
        let mask = BinaryMask::new(3, 4);
        assert!(matches!(
            overlay(&img, &mask, Rgb(0, 0, 0), 0.5),
            Err(Error::DimensionMismatch(..))
        ));
    }

    #[test]
    fn buffer_length_is_checked() {
        assert!(FundusImage::new(2, 2, vec![0; 11], Laterality::Unknown).is_err());
    }

    #[test]
    fn ingest_limits() {
        assert!(solid(63, 64, Rgb(0, 0, 0)).check_ingest_limits().is_err());
        assert!(solid(64, 64, Rgb(0, 0, 0)).check_ingest_limits().is_ok());
    }

    #[test]
    fn image_id_is_content_hash() {
        let a = solid(3, 3, Rgb(1, 2, 3));
        let b = solid(3, 3, Rgb(1, 2, 3)).with_laterality(Laterality::Right);
        assert_eq!(a.image_id(), b.image_id());
        assert_eq!(a.image_id().len(), 64);
        assert_ne!(a.image_id(), solid(3, 3, Rgb(1, 2, 4)).image_id());
    }

    #[test]
    fn vessel_mask_rejects_label_outside_vessel() {
        let vessel = BinaryMask::new(2, 1);
        assert!(VesselMask::new(vessel, vec![AvLabel::Artery, AvLabel::None]).is_err());
    }

    #[test]
    fn ellipse_eccentricity() {
        let e = EllipseFit::new(0.0, 0.0, 30.0, 20.0, 1.0).unwrap();
        assert!((e.eccentricity - (1.0f64 - 400.0 / 900.0).sqrt()).abs() < 1e-9);
        assert!(EllipseFit::new(0.0, 0.0, 10.0, 20.0, 0.0).is_err());
    }

    #[test]
    fn roi_json_shape() {
        let roi = RoiBox {
            x: 1,
            y: 2,
            w: 3,
            h: 4,
            structure: RoiStructure::Macula,
            confidence: 0.25,
        };
        let v: serde_json::Value = serde_json::to_value(roi).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"x":1,"y":2,"w":3,"h":4,"structure":"macula","confidence":0.25})
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn overlay_with_empty_mask_is_identity(
                seed in any::<u64>(), alpha in 0.0f64..=1.0, r in any::<u8>(), g in any::<u8>(), b in any::<u8>()
            ) {
                let img = FundusImage::from_fn(8, 6, Laterality::Unknown, |x, y| {
                    let v = seed.wrapping_mul(x as u64 * 31 + y as u64 * 7 + 1);
                    Rgb(v as u8, (v >> 8) as u8, (v >> 16) as u8)
                }).unwrap();
                let out = overlay(&img, &BinaryMask::new(8, 6), Rgb(r, g, b), alpha).unwrap();
                prop_assert_eq!(out.pixels(), img.pixels());
            }
        }
    }
}
