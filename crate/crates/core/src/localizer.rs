//! Stage 1: locating the optic nerve head and the macula.
//!
//! The ONH locator is a weighted vote of three normalized maps: smoothed
//! brightness, multi-scale template correlation, and local edge density.
//! The macula is the darkest smoothed spot in an anatomical band around it.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    to_gray, weighted_gray, ChannelMix, FundusImage, GrayImage, RoiBox, RoiStructure,
};
use crate::raster::{self, box_blur, disk_offsets, Integral, Plane};

/// Real-valued score per pixel.
pub type ScoreMap = Plane;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizerConfig {
    /// Weights of the brightness, template and edge maps.
    pub weights: [f64; 3],
    /// Template disc diameters as fractions of image height.
    pub scales: [f64; 3],
    /// Template side relative to its disc diameter.
    pub template_side: f64,
    /// Red-weighted gray used for brightness and templates.
    pub gray_weights: [f64; 3],
    /// Smoothing width relative to the expected disc diameter.
    pub smoothing: f64,
    /// ROI side relative to the winning template diameter.
    pub roi_scale: f64,
    /// Luma above which a pixel is inside the camera aperture.
    pub fov_threshold: f64,
    pub macula_band_dd: [f64; 2],
    pub macula_max_angle_deg: f64,
    /// Reflex suppression (opening) and vessel suppression (closing) radii,
    /// and smoothing width, all in disc diameters.
    pub macula_open_dd: f64,
    pub macula_close_dd: f64,
    pub macula_smoothing_dd: f64,
    /// Images whose longer side exceeds this are localized on a
    /// block-averaged copy.
    pub max_working_side: u32,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self {
            weights: [0.4, 0.4, 0.2],
            scales: [0.10, 0.15, 0.20],
            template_side: 1.5,
            gray_weights: [0.6, 0.3, 0.1],
            smoothing: 0.25,
            roi_scale: 1.5,
            fov_threshold: 25.0,
            macula_band_dd: [2.0, 3.0],
            macula_max_angle_deg: 30.0,
            macula_open_dd: 0.15,
            macula_close_dd: 0.12,
            macula_smoothing_dd: 0.25,
            max_working_side: 1024,
        }
    }
}

impl LocalizerConfig {
    /// Weights rescaled to sum to one (all-zero weights fall back to the
    /// defaults).
    pub fn normalized_weights(&self) -> [f64; 3] {
        let w = self.weights.map(|v| v.max(0.0));
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            return Self::default().weights;
        }
        w.map(|v| v / total)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("localizer weights must be non-negative".into()));
        }
        if self.scales.iter().any(|s| !(*s > 0.0 && *s < 1.0)) {
            return Err(Error::Config("template scales must lie in (0, 1)".into()));
        }
        if !(self.macula_band_dd[0] > 0.0 && self.macula_band_dd[0] < self.macula_band_dd[1]) {
            return Err(Error::Config("macula band must be increasing".into()));
        }
        Ok(())
    }
}

/// Contrast-limited adaptive histogram equalization.
///
/// Each tile's histogram is clipped at `clip` times the uniform bin height;
/// the excess is spread evenly over all bins. Pixel values are mapped by
/// bilinear interpolation between the four nearest tile mappings.
pub fn enhance_contrast(g: &GrayImage, tiles: u32, clip: f64) -> Result<GrayImage> {
    if tiles == 0 || g.width < tiles || g.height < tiles {
        return Err(Error::TooSmall(format!(
            "{}x{} image cannot be split into {tiles}x{tiles} tiles",
            g.width, g.height
        )));
    }
    if !(clip >= 1.0) {
        return Err(Error::Config(format!("clip limit {clip} must be at least 1")));
    }
    let (w, h, t) = (g.width as usize, g.height as usize, tiles as usize);
    let bounds = |n: usize, i: usize| (i * n / t, (i + 1) * n / t);
    let mut maps = vec![[0.0f64; 256]; t * t];
    for ty in 0..t {
        for tx in 0..t {
            let (x0, x1) = bounds(w, tx);
            let (y0, y1) = bounds(h, ty);
            let mut hist = [0.0f64; 256];
            for y in y0..y1 {
                for x in x0..x1 {
                    hist[g.pixels[y * w + x] as usize] += 1.0;
                }
            }
            maps[ty * t + tx] = equalization_lut(&hist, clip);
        }
    }
    // Tile centres along each axis, for interpolation.
    let centre = |n: usize, i: usize| {
        let (a, b) = bounds(n, i);
        (a + b) as f64 / 2.0 - 0.5
    };
    let locate = |n: usize, p: usize| -> (usize, usize, f64) {
        let p = p as f64;
        if t == 1 || p <= centre(n, 0) {
            return (0, 0, 0.0);
        }
        if p >= centre(n, t - 1) {
            return (t - 1, t - 1, 0.0);
        }
        let mut i = 0;
        while centre(n, i + 1) < p {
            i += 1;
        }
        let (c0, c1) = (centre(n, i), centre(n, i + 1));
        (i, i + 1, (p - c0) / (c1 - c0))
    };
    let xs: Vec<_> = (0..w).map(|x| locate(w, x)).collect();
    let mut pixels = Vec::with_capacity(w * h);
    for y in 0..h {
        let (ty0, ty1, fy) = locate(h, y);
        for (x, &(tx0, tx1, fx)) in xs.iter().enumerate() {
            let v = g.pixels[y * w + x] as usize;
            let m = |ty: usize, tx: usize| maps[ty * t + tx][v];
            let top = m(ty0, tx0) * (1.0 - fx) + m(ty0, tx1) * fx;
            let bottom = m(ty1, tx0) * (1.0 - fx) + m(ty1, tx1) * fx;
            let out = top * (1.0 - fy) + bottom * fy;
            pixels.push(out.round().clamp(0.0, 255.0) as u8);
        }
    }
    GrayImage::new(g.width, g.height, pixels)
}

/// Clipped histogram-equalization mapping for one histogram.
pub fn equalization_lut(hist: &[f64; 256], clip: f64) -> [f64; 256] {
    let total: f64 = hist.iter().sum();
    let mut hist = *hist;
    if clip.is_finite() {
        let limit = clip * total / 256.0;
        let mut excess = 0.0;
        for v in hist.iter_mut() {
            if *v > limit {
                excess += *v - limit;
                *v = limit;
            }
        }
        let share = excess / 256.0;
        for v in hist.iter_mut() {
            *v += share;
        }
    }
    let mut map = [0.0; 256];
    let mut acc = 0.0;
    for (v, m) in hist.iter().zip(map.iter_mut()) {
        acc += v;
        *m = if total > 0.0 { 255.0 * acc / total } else { 0.0 };
    }
    map
}

/// 3×3 Sobel gradient magnitude with edge replication.
pub fn gradient_magnitude(g: &GrayImage) -> Result<ScoreMap> {
    if g.width < 3 || g.height < 3 {
        return Err(Error::TooSmall(format!(
            "gradient needs at least 3x3, got {}x{}",
            g.width, g.height
        )));
    }
    let (w, h) = (g.width as i64, g.height as i64);
    let px = |x: i64, y: i64| g.pixels[(y.clamp(0, h - 1) * w + x.clamp(0, w - 1)) as usize] as f64;
    let mut out = Plane::new(w as usize, h as usize, 0.0);
    for y in 0..h {
        for x in 0..w {
            let gx = (px(x + 1, y - 1) + 2.0 * px(x + 1, y) + px(x + 1, y + 1))
                - (px(x - 1, y - 1) + 2.0 * px(x - 1, y) + px(x - 1, y + 1));
            let gy = (px(x - 1, y + 1) + 2.0 * px(x, y + 1) + px(x + 1, y + 1))
                - (px(x - 1, y - 1) + 2.0 * px(x, y - 1) + px(x + 1, y - 1));
            out.data[(y * w + x) as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    Ok(out)
}

fn fft2(data: &mut [Complex<f64>], w: usize, h: usize, planner: &mut FftPlanner<f64>, inverse: bool) {
    let row = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    for chunk in data.chunks_exact_mut(w) {
        row.process(chunk);
    }
    let col = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    let mut buf = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            buf[y] = data[y * w + x];
        }
        col.process(&mut buf);
        for y in 0..h {
            data[y * w + x] = buf[y];
        }
    }
}

/// Precomputed image spectrum and window statistics, reused across
/// templates.
struct NccImage {
    w: usize,
    h: usize,
    spectrum: Vec<Complex<f64>>,
    sum: Integral,
    sum_sq: Integral,
    planner: FftPlanner<f64>,
}

impl NccImage {
    fn new(p: &Plane) -> Self {
        let (w, h) = (p.width, p.height);
        let mut planner = FftPlanner::new();
        let mut spectrum: Vec<Complex<f64>> =
            p.data.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft2(&mut spectrum, w, h, &mut planner, false);
        Self {
            w,
            h,
            spectrum,
            sum: Integral::new(w, h, |i| p.data[i]),
            sum_sq: Integral::new(w, h, |i| p.data[i] * p.data[i]),
            planner,
        }
    }

    /// NCC at every valid placement `(x, y)` (template top-left corner).
    fn correlate(&mut self, t: &Plane) -> Result<ScoreMap> {
        let (w, h, tw, th) = (self.w, self.h, t.width, t.height);
        let n = (tw * th) as f64;
        let mean = t.data.iter().sum::<f64>() / n;
        let t_var: f64 = t.data.iter().map(|v| (v - mean).powi(2)).sum();
        if t_var <= 1e-12 * n.max(1.0) {
            return Err(Error::DegenerateTemplate);
        }
        let mut tf = vec![Complex::new(0.0, 0.0); w * h];
        for y in 0..th {
            for x in 0..tw {
                tf[y * w + x] = Complex::new(t.data[y * tw + x] - mean, 0.0);
            }
        }
        fft2(&mut tf, w, h, &mut self.planner, false);
        for (a, b) in tf.iter_mut().zip(&self.spectrum) {
            *a = b * a.conj();
        }
        fft2(&mut tf, w, h, &mut self.planner, true);
        let scale = 1.0 / (w * h) as f64;
        let (ow, oh) = (w - tw + 1, h - th + 1);
        let t_norm = t_var.sqrt();
        let mut out = Plane::new(ow, oh, 0.0);
        for y in 0..oh {
            for x in 0..ow {
                let s = self.sum.sum(x, y, x + tw, y + th);
                let s2 = self.sum_sq.sum(x, y, x + tw, y + th);
                let var = s2 - s * s / n;
                // Flat windows carry no correlation signal.
                let v = if var > 1e-6 * n {
                    (tf[y * w + x].re * scale / (var.sqrt() * t_norm)).clamp(-1.0, 1.0)
                } else {
                    0.0
                };
                out.data[y * ow + x] = v;
            }
        }
        Ok(out)
    }
}

/// Normalized cross-correlation of `t` over every valid placement in `g`.
/// The peak is the argmax with ties going to the smallest `(y, x)`.
pub fn match_template_ncc(g: &GrayImage, t: &GrayImage) -> Result<(ScoreMap, (u32, u32, f64))> {
    if t.width > g.width || t.height > g.height || (t.width == g.width && t.height == g.height) {
        return Err(Error::TooSmall(format!(
            "template {}x{} must be strictly smaller than image {}x{}",
            t.width, t.height, g.width, g.height
        )));
    }
    let mut ncc = NccImage::new(&Plane::from_gray(g));
    let map = ncc.correlate(&Plane::from_gray(t))?;
    let (x, y, v) = raster::argmax(&map, None).expect("non-empty score map");
    Ok((map, (x as u32, y as u32, v)))
}

/// Bright disk of diameter `d` with a one-pixel soft edge, centred in a
/// square of side `side`.
fn disk_template(d: f64, side: usize) -> Plane {
    let c = (side as f64 - 1.0) / 2.0;
    let r = d / 2.0;
    let mut p = Plane::new(side, side, 0.0);
    for y in 0..side {
        for x in 0..side {
            let dist = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
            p.data[y * side + x] = (r + 0.5 - dist).clamp(0.0, 1.0);
        }
    }
    p
}

/// Block-average downsampling by an integer factor.
fn downsample(p: &Plane, f: usize) -> Plane {
    if f <= 1 {
        return p.clone();
    }
    let (w, h) = (p.width.div_ceil(f), p.height.div_ceil(f));
    let mut out = Plane::new(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            let (mut s, mut n) = (0.0, 0);
            for yy in y * f..((y + 1) * f).min(p.height) {
                for xx in x * f..((x + 1) * f).min(p.width) {
                    s += p.at(xx, yy);
                    n += 1;
                }
            }
            out.data[y * w + x] = s / n as f64;
        }
    }
    out
}

/// Pixels inside the camera aperture, eroded by `margin` pixels.
fn field_of_view(luma: &Plane, threshold: f64, margin: f64) -> Vec<bool> {
    let smooth = box_blur(luma, 5);
    let inside = crate::model::BinaryMask::from_fn(luma.width as u32, luma.height as u32, |x, y| {
        smooth.at(x as usize, y as usize) > threshold
    });
    let eroded = if margin >= 1.0 {
        raster::erode(&inside, &disk_offsets(margin))
    } else {
        inside
    };
    eroded.to_bools()
}

/// Intermediate maps of the ONH vote, exposed for inspection.
#[derive(Debug, Clone)]
pub struct OnhVote {
    pub brightness: ScoreMap,
    pub template: ScoreMap,
    pub edges: ScoreMap,
    pub combined: ScoreMap,
    /// Working-resolution factor (1 unless the input was downsampled).
    pub factor: usize,
    pub best_scale: f64,
    pub peak: (usize, usize, f64),
}

pub fn onh_vote(img: &FundusImage, cfg: &LocalizerConfig) -> OnhVote {
    let factor = (img.width().max(img.height()) as usize).div_ceil(cfg.max_working_side.max(64) as usize).max(1);
    let gray = downsample(&Plane::from_gray(&weighted_gray(img, cfg.gray_weights)), factor);
    let luma = downsample(&Plane::from_gray(&to_gray(img, ChannelMix::Luma)), factor);
    let (w, h) = (gray.width, gray.height);
    let height = h as f64;
    let weights = cfg.normalized_weights();
    let expected_dd = cfg.scales[1] * height;
    let fov = field_of_view(&luma, cfg.fov_threshold, 4.0);

    let brightness = if weights[0] > 0.0 {
        let k = (cfg.smoothing * expected_dd).round().max(1.0) as usize;
        box_blur(&gray, k).normalized_within(&fov)
    } else {
        Plane::new(w, h, 0.0)
    };

    let mut template = Plane::new(w, h, 0.0);
    let mut scale_of = vec![0u8; w * h];
    if weights[1] > 0.0 {
        let mut ncc = NccImage::new(&gray);
        for (si, s) in cfg.scales.iter().enumerate() {
            let d = s * height;
            let side = ((cfg.template_side * d).round() as usize) | 1;
            if side < 3 || side >= w || side >= h {
                continue;
            }
            let Ok(map) = ncc.correlate(&disk_template(d, side)) else {
                continue;
            };
            let off = side / 2;
            for y in 0..map.height {
                for x in 0..map.width {
                    let v = map.at(x, y).max(0.0);
                    let i = (y + off) * w + x + off;
                    if v > template.data[i] {
                        template.data[i] = v;
                        scale_of[i] = si as u8;
                    }
                }
            }
        }
    }

    let edges = if weights[2] > 0.0 {
        let mut grad = gradient_magnitude(&gray.to_gray()).expect("image larger than 3x3");
        for (g, &ok) in grad.data.iter_mut().zip(&fov) {
            if !ok {
                *g = 0.0;
            }
        }
        let k = expected_dd.round().max(1.0) as usize;
        box_blur(&grad, k).normalized_within(&fov)
    } else {
        Plane::new(w, h, 0.0)
    };

    let mut combined = Plane::new(w, h, 0.0);
    for i in 0..w * h {
        if fov[i] {
            combined.data[i] = weights[0] * brightness.data[i]
                + weights[1] * template.data[i]
                + weights[2] * edges.data[i];
        }
    }
    let valid = fov.iter().any(|&v| v).then_some(fov.as_slice());
    let peak = raster::argmax(&combined, valid).unwrap_or((0, 0, 0.0));
    let best_scale = cfg.scales[scale_of[peak.1 * w + peak.0] as usize];
    OnhVote {
        brightness,
        template,
        edges,
        combined,
        factor,
        best_scale,
        peak,
    }
}

/// Square ROI around the optic nerve head.
pub fn locate_onh(img: &FundusImage, cfg: &LocalizerConfig) -> RoiBox {
    let vote = onh_vote(img, cfg);
    let f = vote.factor as f64;
    let (px, py, score) = vote.peak;
    let cx = px as f64 * f + (f - 1.0) / 2.0;
    let cy = py as f64 * f + (f - 1.0) / 2.0;
    let side = cfg.roi_scale * vote.best_scale * img.height() as f64;
    RoiBox::square_in_bounds(
        cx,
        cy,
        side,
        img.width(),
        img.height(),
        RoiStructure::Onh,
        score.clamp(0.0, 1.0),
    )
}

/// Disc diameter implied by an ONH box.
pub fn disc_diameter_estimate(onh: &RoiBox, cfg: &LocalizerConfig) -> f64 {
    onh.w.max(onh.h) as f64 / cfg.roi_scale
}

/// Square ROI around the fovea, searched in the anatomical band beside the
/// disc.
pub fn locate_macula(img: &FundusImage, onh: &RoiBox, cfg: &LocalizerConfig) -> Result<RoiBox> {
    onh.validate_for(img.width(), img.height())?;
    let (w, h) = (img.width() as i64, img.height() as i64);
    let dd = disc_diameter_estimate(onh, cfg);
    let (ocx, ocy) = onh.center();
    let (r_lo, r_hi) = (cfg.macula_band_dd[0] * dd, cfg.macula_band_dd[1] * dd);
    let max_angle = cfg.macula_max_angle_deg.to_radians();
    let side_sign = img.laterality().temporal_sign();
    let in_band = |x: f64, y: f64| -> bool {
        let (dx, dy) = (x - ocx, y - ocy);
        let r = (dx * dx + dy * dy).sqrt();
        if r < r_lo || r > r_hi {
            return false;
        }
        if let Some(s) = side_sign {
            if dx * s <= 0.0 {
                return false;
            }
        }
        dy.abs().atan2(dx.abs()) <= max_angle + 1e-12
    };

    let margin = ((cfg.macula_open_dd + cfg.macula_close_dd + cfg.macula_smoothing_dd) * dd).ceil() as i64 + 2;
    let bx0 = ((ocx - r_hi).floor() as i64 - margin).clamp(0, w);
    let bx1 = ((ocx + r_hi).ceil() as i64 + margin + 1).clamp(0, w);
    let by0 = ((ocy - r_hi * max_angle.sin()).floor() as i64 - margin).clamp(0, h);
    let by1 = ((ocy + r_hi * max_angle.sin()).ceil() as i64 + margin + 1).clamp(0, h);
    let band_in_image = (by0..by1).any(|y| (bx0..bx1).any(|x| in_band(x as f64, y as f64)));
    if bx1 <= bx0 || by1 <= by0 || !band_in_image {
        return Err(Error::OutOfView);
    }

    // Work on the bounding window of the band only.
    let luma = to_gray(img, ChannelMix::Luma);
    let (ww, wh) = ((bx1 - bx0) as usize, (by1 - by0) as usize);
    let mut win = Plane::new(ww, wh, 0.0);
    for y in 0..wh {
        for x in 0..ww {
            win.data[y * ww + x] = luma.get((bx0 as usize + x) as u32, (by0 as usize + y) as u32) as f64;
        }
    }
    let fov = field_of_view(&win, cfg.fov_threshold, (0.5 * dd).max(1.0));
    let opened = raster::gray_open(&win, &disk_offsets((cfg.macula_open_dd * dd).max(1.0)));
    let closed = raster::gray_close(&opened, &disk_offsets((cfg.macula_close_dd * dd).max(1.0)));
    let k = (cfg.macula_smoothing_dd * dd).round().max(1.0) as usize;
    let smooth = box_blur(&closed, k);

    let mut best: Option<(usize, usize, f64)> = None;
    let mut band_values = Vec::new();
    for y in 0..wh {
        for x in 0..ww {
            let (gx, gy) = ((bx0 as usize + x) as f64, (by0 as usize + y) as f64);
            if !in_band(gx, gy) || !fov[y * ww + x] {
                continue;
            }
            let v = smooth.at(x, y);
            band_values.push(v);
            if best.is_none_or(|(_, _, b)| v < b) {
                best = Some((x, y, v));
            }
        }
    }
    let Some((mx, my, vmin)) = best else {
        return Err(Error::OutOfView);
    };
    let mean = band_values.iter().sum::<f64>() / band_values.len() as f64;
    let confidence = if mean > 0.0 { (mean - vmin) / mean } else { 0.0 };
    Ok(RoiBox::square_in_bounds(
        (bx0 as usize + mx) as f64,
        (by0 as usize + my) as f64,
        dd,
        img.width(),
        img.height(),
        RoiStructure::Macula,
        (2.0 * confidence).clamp(0.0, 1.0),
    ))
}

/// Angle of the fovea relative to the disc, for diagnostics.
pub fn band_angle(onh: &RoiBox, macula: &RoiBox) -> f64 {
    let (ox, oy) = onh.center();
    let (mx, my) = macula.center();
    (my - oy).atan2(mx - ox).rem_euclid(2.0 * PI)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Laterality, Rgb};
    use crate::synthgen::{gen_scene, render, GenParams};
    use proptest::prelude::*;

    fn gray(w: u32, h: u32, f: impl FnMut(u32, u32) -> u8) -> GrayImage {
        GrayImage::from_fn(w, h, f)
    }

    #[test]
    fn clahe_constant_stays_constant() {
        let g = GrayImage::filled(32, 24, 90);
        let out = enhance_contrast(&g, 4, 2.0).unwrap();
        assert!(out.pixels.iter().all(|&v| v == out.pixels[0]));
    }

    #[test]
    fn clahe_two_values_unclipped() {
        let g = gray(20, 20, |x, _| if x < 10 { 50 } else { 200 });
        let out = enhance_contrast(&g, 1, f64::INFINITY).unwrap();
        // cdf(50) = 0.5, cdf(200) = 1.0
        let low = out.get(0, 0) as i32;
        assert!((low - 127).abs() <= 1, "{low}");
        assert_eq!(out.get(19, 0), 255);
    }

    proptest! {
        #[test]
        fn clahe_output_in_range(seed in any::<u64>(), tiles in 1u32..5) {
            let mut s = seed | 1;
            let g = gray(24, 20, |_, _| { s ^= s << 13; s ^= s >> 7; s ^= s << 17; s as u8 });
            let out = enhance_contrast(&g, tiles, 2.0).unwrap();
            prop_assert_eq!(out.pixels.len(), g.pixels.len());
        }

        #[test]
        fn ncc_scores_bounded(seed in any::<u64>()) {
            let mut s = seed | 1;
            let mut next = || { s ^= s << 13; s ^= s >> 7; s ^= s << 17; s as u8 };
            let g = gray(20, 17, |_, _| next());
            let t = gray(5, 4, |_, _| next());
            if let Ok((map, _)) = match_template_ncc(&g, &t) {
                for v in map.data {
                    prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&v));
                }
            }
        }
    }

    #[test]
    fn sobel_step() {
        let g = gray(8, 5, |x, _| if x < 4 { 0 } else { 255 });
        let m = gradient_magnitude(&g).unwrap();
        assert_eq!(m.at(3, 2), 255.0 * 4.0);
        assert_eq!(m.at(4, 2), 255.0 * 4.0);
        assert_eq!(m.at(1, 2), 0.0);
        assert!(gradient_magnitude(&GrayImage::filled(6, 6, 7)).unwrap().data.iter().all(|&v| v == 0.0));
        assert!(gradient_magnitude(&GrayImage::filled(2, 6, 7)).is_err());
    }

    #[test]
    fn sobel_rotation() {
        let g = gray(9, 7, |x, y| ((x * 31 + y * y * 7) % 251) as u8);
        let r = gray(7, 9, |x, y| g.get(y, 6 - x));
        let (mg, mr) = (gradient_magnitude(&g).unwrap(), gradient_magnitude(&r).unwrap());
        for y in 0..7 {
            for x in 0..9 {
                let a = mg.at(x, y);
                let b = mr.at(6 - y, x);
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn ncc_self_match_and_negation() {
        let g = gray(30, 25, |x, y| ((x * x * 3 + y * 17 + x * y) % 256) as u8);
        let t = gray(6, 5, |x, y| g.get(x + 11, y + 9));
        let (map, (px, py, v)) = match_template_ncc(&g, &t).unwrap();
        assert_eq!((px, py), (11, 9));
        assert!((v - 1.0).abs() < 1e-9);
        let neg = gray(6, 5, |x, y| 255 - g.get(x + 11, y + 9));
        let (map_neg, _) = match_template_ncc(&g, &neg).unwrap();
        assert!((map_neg.at(11, 9) + 1.0).abs() < 1e-9);
        assert_eq!(map.width, 25);
        assert!(matches!(
            match_template_ncc(&g, &GrayImage::filled(4, 4, 9)),
            Err(Error::DegenerateTemplate)
        ));
    }

    #[test]
    fn uniform_image_low_confidence() {
        let img = FundusImage::from_fn(128, 128, Laterality::Unknown, |_, _| Rgb(128, 128, 128)).unwrap();
        let roi = locate_onh(&img, &LocalizerConfig::default());
        assert!(roi.confidence <= 0.2);
        roi.validate_for(128, 128).unwrap();
    }

    #[test]
    fn onh_peak_on_centred_disc() {
        let scene = gen_scene(&GenParams::standard().with_noise(0.0), 4).unwrap();
        let (cx, cy) = (255.5, 255.5);
        let moved = scene.translated(cx - scene.disc.cx, cy - scene.disc.cy);
        let (img, _) = render(&moved).unwrap();
        let roi = locate_onh(&img, &LocalizerConfig::default());
        let (rx, ry) = roi.center();
        assert!((rx - cx).abs() <= 2.0 && (ry - cy).abs() <= 2.0, "{rx},{ry}");
    }

    #[test]
    fn disabled_channels_keep_confidence_in_range() {
        let scene = gen_scene(&GenParams::standard(), 2).unwrap();
        let (img, _) = render(&scene).unwrap();
        for weights in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.5, 0.5, 0.0]] {
            let cfg = LocalizerConfig { weights, ..Default::default() };
            let roi = locate_onh(&img, &cfg);
            assert!((0.0..=1.0).contains(&roi.confidence));
        }
    }

    #[test]
    fn macula_band_off_image() {
        let img = FundusImage::from_fn(128, 128, Laterality::Left, |_, _| Rgb(120, 60, 30)).unwrap();
        // Left eye: temporal is +x; a box at the right edge has no band.
        let onh = RoiBox { x: 100, y: 50, w: 28, h: 28, structure: RoiStructure::Onh, confidence: 0.5 };
        assert_eq!(locate_macula(&img, &onh, &LocalizerConfig::default()), Err(Error::OutOfView));
    }

    #[test]
    fn macula_unknown_laterality_matches_known() {
        let scene = gen_scene(&GenParams::standard().with_noise(0.0), 8).unwrap();
        let (img, _) = render(&scene).unwrap();
        let cfg = LocalizerConfig::default();
        let onh = locate_onh(&img, &cfg);
        let known = locate_macula(&img, &onh, &cfg).unwrap();
        let unknown = locate_macula(&img.with_laterality(Laterality::Unknown), &onh, &cfg).unwrap();
        assert_eq!(known.center(), unknown.center());
    }
}
