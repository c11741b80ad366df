//! Low-level raster helpers: float planes, box filters, morphology, connected
//! components, hole filling, Euclidean distance transform and thinning.

use std::collections::BTreeMap;

use crate::model::{BinaryMask, GrayImage};

/// Row-major single-channel f64 plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_gray(g: &GrayImage) -> Self {
        Self {
            width: g.width as usize,
            height: g.height as usize,
            data: g.pixels.iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width as u32,
            height: self.height as u32,
            pixels: self
                .data
                .iter()
                .map(|&v| v.round().clamp(0.0, 255.0) as u8)
                .collect(),
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, x: usize, y: usize) -> &mut f64 {
        &mut self.data[y * self.width + x]
    }

    /// Rescales to `[0, 1]`; a constant plane maps to all zeros.
    pub fn normalized(&self) -> Plane {
        let (lo, hi) = self.min_max();
        let span = hi - lo;
        let data = if span > 1e-12 {
            self.data.iter().map(|&v| (v - lo) / span).collect()
        } else {
            vec![0.0; self.data.len()]
        };
        Plane { data, ..*self }
    }

    /// Min-max rescale using only pixels where `valid` is set; others become 0.
    pub fn normalized_within(&self, valid: &[bool]) -> Plane {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (v, &ok) in self.data.iter().zip(valid) {
            if ok {
                lo = lo.min(*v);
                hi = hi.max(*v);
            }
        }
        let span = hi - lo;
        let data = self
            .data
            .iter()
            .zip(valid)
            .map(|(&v, &ok)| {
                if ok && span > 1e-12 {
                    (v - lo) / span
                } else {
                    0.0
                }
            })
            .collect();
        Plane { data, ..*self }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// Summed-area table with one row/column of zero padding.
pub struct Integral {
    width: usize,
    height: usize,
    sums: Vec<f64>,
}

impl Integral {
    pub fn new(width: usize, height: usize, values: impl Fn(usize) -> f64) -> Self {
        let stride = width + 1;
        let mut sums = vec![0.0; stride * (height + 1)];
        for y in 0..height {
            let mut row = 0.0;
            for x in 0..width {
                row += values(y * width + x);
                sums[(y + 1) * stride + x + 1] = sums[y * stride + x + 1] + row;
            }
        }
        Self {
            width,
            height,
            sums,
        }
    }

    /// Sum over the half-open rectangle `[x0, x1) × [y0, y1)`.
    #[inline]
    pub fn sum(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
        let s = self.width + 1;
        self.sums[y1 * s + x1] - self.sums[y0 * s + x1] - self.sums[y1 * s + x0]
            + self.sums[y0 * s + x0]
    }

    /// Mean over the `k×k` window centred on `(x, y)`, clipped to the image.
    #[inline]
    pub fn window_mean(&self, x: usize, y: usize, k: usize) -> f64 {
        let r = k / 2;
        let x0 = x.saturating_sub(r);
        let y0 = y.saturating_sub(r);
        let x1 = (x + k - r).min(self.width);
        let y1 = (y + k - r).min(self.height);
        self.sum(x0, y0, x1, y1) / ((x1 - x0) * (y1 - y0)) as f64
    }
}

/// Box blur of odd-ish width `k` (window clipped at the borders).
pub fn box_blur(p: &Plane, k: usize) -> Plane {
    let k = k.max(1);
    let integral = Integral::new(p.width, p.height, |i| p.data[i]);
    let mut out = Plane::new(p.width, p.height, 0.0);
    for y in 0..p.height {
        for x in 0..p.width {
            out.data[y * p.width + x] = integral.window_mean(x, y, k);
        }
    }
    out
}

/// Offsets of a digital disk of the given radius.
pub fn disk_offsets(radius: f64) -> Vec<(i32, i32)> {
    let r = radius.floor() as i32;
    let r2 = radius * radius;
    let mut v = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if (dx * dx + dy * dy) as f64 <= r2 + 1e-9 {
                v.push((dx, dy));
            }
        }
    }
    v
}

/// Offsets of a digital line segment of `length` pixels at `angle` radians.
pub fn line_offsets(length: usize, angle: f64) -> Vec<(i32, i32)> {
    let half = (length.max(1) as f64 - 1.0) / 2.0;
    let (s, c) = angle.sin_cos();
    let mut v: Vec<(i32, i32)> = (0..length.max(1))
        .map(|i| {
            let t = i as f64 - half;
            ((t * c).round() as i32, (t * s).round() as i32)
        })
        .collect();
    v.dedup();
    v
}

/// Splits offsets into horizontal runs `(dy, dx_lo, dx_hi)` when every row
/// is contiguous.
fn row_spans(offsets: &[(i32, i32)]) -> Option<Vec<(i32, i32, i32)>> {
    let mut rows: BTreeMap<i32, Vec<i32>> = BTreeMap::new();
    for &(dx, dy) in offsets {
        rows.entry(dy).or_default().push(dx);
    }
    rows.into_iter()
        .map(|(dy, mut xs)| {
            xs.sort_unstable();
            xs.dedup();
            let (lo, hi) = (xs[0], xs[xs.len() - 1]);
            ((hi - lo + 1) as usize == xs.len()).then_some((dy, lo, hi))
        })
        .collect()
}

/// Sliding extremum over `[x+lo, x+hi]` on every row, with edge replication.
fn running_extreme(p: &Plane, lo: i32, hi: i32, take_max: bool) -> Vec<f64> {
    let (w, h) = (p.width as i32, p.height);
    let better = |a: f64, b: f64| if take_max { a >= b } else { a <= b };
    let mut out = vec![0.0; p.data.len()];
    let mut deque = std::collections::VecDeque::with_capacity(w as usize);
    for y in 0..h {
        let row = &p.data[y * w as usize..(y + 1) * w as usize];
        deque.clear();
        // Next source index to push.
        let mut next = (lo).clamp(0, w - 1);
        for x in 0..w {
            let (a, b) = ((x + lo).clamp(0, w - 1), (x + hi).clamp(0, w - 1));
            while next <= b {
                let v = row[next as usize];
                while deque.back().is_some_and(|&j: &i32| better(v, row[j as usize])) {
                    deque.pop_back();
                }
                deque.push_back(next);
                next += 1;
            }
            while deque.front().is_some_and(|&j| j < a) {
                deque.pop_front();
            }
            out[y * w as usize + x as usize] = row[*deque.front().expect("window is non-empty") as usize];
        }
    }
    out
}

fn gray_filter(p: &Plane, offsets: &[(i32, i32)], take_max: bool) -> Plane {
    if let Some(spans) = row_spans(offsets) {
        let mut distinct: Vec<(i32, i32)> = spans.iter().map(|&(_, lo, hi)| (lo, hi)).collect();
        distinct.sort_unstable();
        distinct.dedup();
        if spans.len() + distinct.len() < offsets.len() {
            return span_filter(p, &spans, &distinct, take_max);
        }
    }
    direct_filter(p, offsets, take_max)
}

fn direct_filter(p: &Plane, offsets: &[(i32, i32)], take_max: bool) -> Plane {
    let (w, h) = (p.width as i32, p.height as i32);
    let mut out = Plane::new(p.width, p.height, 0.0);
    for y in 0..h {
        for x in 0..w {
            let mut acc = if take_max {
                f64::NEG_INFINITY
            } else {
                f64::INFINITY
            };
            for &(dx, dy) in offsets {
                let sx = (x + dx).clamp(0, w - 1);
                let sy = (y + dy).clamp(0, h - 1);
                let v = p.data[(sy * w + sx) as usize];
                acc = if take_max { acc.max(v) } else { acc.min(v) };
            }
            out.data[(y * w + x) as usize] = acc;
        }
    }
    out
}

fn span_filter(p: &Plane, spans: &[(i32, i32, i32)], distinct: &[(i32, i32)], take_max: bool) -> Plane {
    let runs: Vec<Vec<f64>> = distinct
        .iter()
        .map(|&(lo, hi)| running_extreme(p, lo, hi, take_max))
        .collect();
    let (w, h) = (p.width, p.height as i32);
    let init = if take_max { f64::NEG_INFINITY } else { f64::INFINITY };
    let mut out = Plane::new(p.width, p.height, init);
    for &(dy, lo, hi) in spans {
        let run = &runs[distinct.binary_search(&(lo, hi)).expect("span is listed")];
        for y in 0..h {
            let sy = (y + dy).clamp(0, h - 1) as usize;
            let src = &run[sy * w..(sy + 1) * w];
            let dst = &mut out.data[y as usize * w..(y as usize + 1) * w];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = if take_max { d.max(v) } else { d.min(v) };
            }
        }
    }
    out
}

fn reflect(offsets: &[(i32, i32)]) -> Vec<(i32, i32)> {
    offsets.iter().map(|&(dx, dy)| (-dx, -dy)).collect()
}

pub fn gray_erode(p: &Plane, offsets: &[(i32, i32)]) -> Plane {
    gray_filter(p, offsets, false)
}

pub fn gray_dilate(p: &Plane, offsets: &[(i32, i32)]) -> Plane {
    gray_filter(p, offsets, true)
}

pub fn gray_open(p: &Plane, offsets: &[(i32, i32)]) -> Plane {
    gray_dilate(&gray_erode(p, offsets), &reflect(offsets))
}

pub fn gray_close(p: &Plane, offsets: &[(i32, i32)]) -> Plane {
    gray_erode(&gray_dilate(p, offsets), &reflect(offsets))
}

/// Binary dilation; pixels outside the image count as background.
pub fn dilate(mask: &BinaryMask, offsets: &[(i32, i32)]) -> BinaryMask {
    if let Some(spans) = row_spans(offsets) {
        let reflected: Vec<_> = spans.iter().map(|&(dy, lo, hi)| (-dy, -hi, -lo)).collect();
        return span_binary(mask, &reflected, false);
    }
    let (w, h) = (mask.width() as i32, mask.height() as i32);
    let mut out = BinaryMask::new(mask.width(), mask.height());
    for (x, y) in mask.points() {
        for &(dx, dy) in offsets {
            let (nx, ny) = (x as i32 + dx, y as i32 + dy);
            if nx >= 0 && ny >= 0 && nx < w && ny < h {
                out.set(nx as u32, ny as u32, true);
            }
        }
    }
    out
}

/// Binary erosion; pixels outside the image count as foreground so that
/// objects touching the border are not eaten away.
pub fn erode(mask: &BinaryMask, offsets: &[(i32, i32)]) -> BinaryMask {
    if let Some(spans) = row_spans(offsets) {
        return span_binary(mask, &spans, true);
    }
    let (w, h) = (mask.width() as i32, mask.height() as i32);
    let mut out = BinaryMask::new(mask.width(), mask.height());
    for (x, y) in mask.points() {
        let keep = offsets.iter().all(|&(dx, dy)| {
            let (nx, ny) = (x as i32 + dx, y as i32 + dy);
            nx < 0 || ny < 0 || nx >= w || ny >= h || mask.get(nx as u32, ny as u32)
        });
        if keep {
            out.set(x, y, true);
        }
    }
    out
}

/// Binary morphology over row spans using per-row prefix counts. Erosion
/// treats pixels outside the image as foreground, dilation as background.
fn span_binary(mask: &BinaryMask, spans: &[(i32, i32, i32)], erode: bool) -> BinaryMask {
    let (w, h) = (mask.width() as i32, mask.height() as i32);
    let stride = w as usize + 1;
    let mut prefix = vec![0u32; stride * h as usize];
    for y in 0..h as usize {
        for x in 0..w as usize {
            prefix[y * stride + x + 1] = prefix[y * stride + x] + mask.get_index(y * w as usize + x) as u32;
        }
    }
    BinaryMask::from_fn(mask.width(), mask.height(), |x, y| {
        let (x, y) = (x as i32, y as i32);
        let hit = |&(dy, lo, hi): &(i32, i32, i32)| -> Option<bool> {
            let sy = y + dy;
            let (a, b) = ((x + lo).max(0), (x + hi).min(w - 1));
            if sy < 0 || sy >= h || a > b {
                return None;
            }
            let row = sy as usize * stride;
            let n = prefix[row + b as usize + 1] - prefix[row + a as usize];
            Some(if erode { n as i32 == b - a + 1 } else { n > 0 })
        };
        if erode {
            mask.get(x as u32, y as u32) && spans.iter().all(|s| hit(s).unwrap_or(true))
        } else {
            spans.iter().any(|s| hit(s).unwrap_or(false))
        }
    })
}

pub fn close(mask: &BinaryMask, radius: f64) -> BinaryMask {
    let se = disk_offsets(radius);
    erode(&dilate(mask, &se), &se)
}

/// 8-connected component labelling. Returns per-pixel labels (0 = background,
/// components numbered from 1 in raster order of their first pixel) and the
/// pixel count of each component (index 0 unused).
pub fn label_components(mask: &BinaryMask) -> (Vec<u32>, Vec<usize>) {
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    let mut labels = vec![0u32; w * h];
    let mut sizes = vec![0usize];
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask.get_index(start) || labels[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32;
        let mut size = 0;
        labels[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            size += 1;
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask.get_index(j) && labels[j] == 0 {
                        labels[j] = id;
                        stack.push(j);
                    }
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Largest 8-connected component; ties resolved toward the component whose
/// first pixel comes first in raster order.
pub fn largest_component(mask: &BinaryMask) -> BinaryMask {
    let (labels, sizes) = label_components(mask);
    let Some((best, _)) = sizes
        .iter()
        .enumerate()
        .skip(1)
        .fold(None, |acc: Option<(usize, usize)>, (i, &s)| match acc {
            Some((_, bs)) if bs >= s => acc,
            _ => Some((i, s)),
        })
    else {
        return BinaryMask::new(mask.width(), mask.height());
    };
    let mut out = BinaryMask::new(mask.width(), mask.height());
    let w = mask.width() as usize;
    for (i, &l) in labels.iter().enumerate() {
        if l as usize == best {
            out.set((i % w) as u32, (i / w) as u32, true);
        }
    }
    out
}

/// Drops 8-connected components smaller than `min_size` pixels.
pub fn remove_small_components(mask: &BinaryMask, min_size: usize) -> BinaryMask {
    let (labels, sizes) = label_components(mask);
    let w = mask.width() as usize;
    let mut out = BinaryMask::new(mask.width(), mask.height());
    for (i, &l) in labels.iter().enumerate() {
        if l != 0 && sizes[l as usize] >= min_size {
            out.set((i % w) as u32, (i / w) as u32, true);
        }
    }
    out
}

/// Fills background regions not 4-connected to the image border.
pub fn fill_holes(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    let mut outside = vec![false; w * h];
    let mut stack = Vec::new();
    for x in 0..w {
        for y in [0, h - 1] {
            stack.push(y * w + x);
        }
    }
    for y in 0..h {
        for x in [0, w - 1] {
            stack.push(y * w + x);
        }
    }
    while let Some(i) = stack.pop() {
        if outside[i] || mask.get_index(i) {
            continue;
        }
        outside[i] = true;
        let (x, y) = (i % w, i / w);
        if x > 0 {
            stack.push(i - 1);
        }
        if x + 1 < w {
            stack.push(i + 1);
        }
        if y > 0 {
            stack.push(i - w);
        }
        if y + 1 < h {
            stack.push(i + w);
        }
    }
    BinaryMask::from_fn(mask.width(), mask.height(), |x, y| {
        !outside[y as usize * w + x as usize]
    })
}

/// Exact squared Euclidean distance transform (Felzenszwalb–Huttenlocher):
/// for every foreground pixel, the squared distance to the nearest background
/// pixel centre. Background pixels get 0. Pixels beyond the border count as
/// background.
pub fn distance_transform_sq(mask: &BinaryMask) -> Vec<f64> {
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    // Padding by one on every side puts background beyond the border.
    let (pw, ph) = (w + 2, h + 2);
    let inf = 1e20;
    let mut grid = vec![0.0; pw * ph];
    for y in 0..h {
        for x in 0..w {
            if mask.get(x as u32, y as u32) {
                grid[(y + 1) * pw + x + 1] = inf;
            }
        }
    }
    let mut col = vec![0.0; ph];
    let mut out = vec![0.0; ph];
    for x in 0..pw {
        for y in 0..ph {
            col[y] = grid[y * pw + x];
        }
        edt_1d(&col, &mut out);
        for y in 0..ph {
            grid[y * pw + x] = out[y];
        }
    }
    let mut row = vec![0.0; pw];
    let mut out = vec![0.0; pw];
    for y in 0..ph {
        row.copy_from_slice(&grid[y * pw..(y + 1) * pw]);
        edt_1d(&row, &mut out);
        grid[y * pw..(y + 1) * pw].copy_from_slice(&out);
    }
    let mut result = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            result[y * w + x] = grid[(y + 1) * pw + x + 1];
        }
    }
    result
}

fn edt_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *out = (q as f64 - p as f64).powi(2) + f[p];
    }
}

/// Zhang–Suen thinning to a one-pixel-wide skeleton.
pub fn thin(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    let mut img: Vec<bool> = mask.to_bools();
    let at = |img: &Vec<bool>, x: i64, y: i64| -> bool {
        x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && img[y as usize * w + x as usize]
    };
    let mut to_clear = Vec::new();
    loop {
        let mut changed = false;
        for pass in 0..2 {
            to_clear.clear();
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    if !img[y as usize * w + x as usize] {
                        continue;
                    }
                    // P2..P9 clockwise from north
                    let n = [
                        at(&img, x, y - 1),
                        at(&img, x + 1, y - 1),
                        at(&img, x + 1, y),
                        at(&img, x + 1, y + 1),
                        at(&img, x, y + 1),
                        at(&img, x - 1, y + 1),
                        at(&img, x - 1, y),
                        at(&img, x - 1, y - 1),
                    ];
                    let b = n.iter().filter(|&&v| v).count();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    let a = (0..8).filter(|&i| !n[i] && n[(i + 1) % 8]).count();
                    if a != 1 {
                        continue;
                    }
                    let (p2, p4, p6, p8) = (n[0], n[2], n[4], n[6]);
                    let ok = if pass == 0 {
                        !(p2 && p4 && p6) && !(p4 && p6 && p8)
                    } else {
                        !(p2 && p4 && p8) && !(p2 && p6 && p8)
                    };
                    if ok {
                        to_clear.push(y as usize * w + x as usize);
                    }
                }
            }
            if !to_clear.is_empty() {
                changed = true;
                for &i in &to_clear {
                    img[i] = false;
                }
            }
        }
        if !changed {
            break;
        }
    }
    BinaryMask::from_bools(mask.width(), mask.height(), &img).expect("same dims")
}

/// Value at the given percentile (0–100) using the nearest-rank definition.
pub fn percentile(values: &mut [f64], pct: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    let rank = ((pct / 100.0) * n as f64).ceil() as usize;
    values[rank.clamp(1, n) - 1]
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Row-major argmax with ties resolved toward the smallest `(y, x)`.
pub fn argmax(p: &Plane, valid: Option<&[bool]>) -> Option<(usize, usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in p.data.iter().enumerate() {
        if valid.is_some_and(|m| !m[i]) || !v.is_finite() {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, v)| (i % p.width, i / p.width, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn span_morphology_matches_direct(
            w in 1usize..24,
            h in 1usize..24,
            seed in any::<u64>(),
            radius in 0.0f64..9.0,
            angle in 0.0f64..3.2,
            len in 1usize..15,
        ) {
            let mut state = seed;
            let p = Plane::new(w, h, 0.0);
            let p = Plane { data: p.data.iter().map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 56) as f64
            }).collect(), ..p };
            let shifted: Vec<(i32, i32)> = disk_offsets(radius).iter().map(|&(dx, dy)| (dx + 2, dy - 1)).collect();
            for offsets in [disk_offsets(radius), line_offsets(len, angle), shifted] {
                for take_max in [false, true] {
                    let Some(spans) = row_spans(&offsets) else { continue };
                    let mut distinct: Vec<(i32, i32)> = spans.iter().map(|&(_, lo, hi)| (lo, hi)).collect();
                    distinct.sort_unstable();
                    distinct.dedup();
                    prop_assert_eq!(
                        span_filter(&p, &spans, &distinct, take_max),
                        direct_filter(&p, &offsets, take_max)
                    );
                }
                let mask = BinaryMask::from_fn(w as u32, h as u32, |x, y| p.data[y as usize * w + x as usize] > 90.0);
                let inside = |x: i32, y: i32| x >= 0 && y >= 0 && x < w as i32 && y < h as i32;
                let brute_dilate = BinaryMask::from_fn(w as u32, h as u32, |x, y| {
                    offsets.iter().any(|&(dx, dy)| {
                        let (sx, sy) = (x as i32 - dx, y as i32 - dy);
                        inside(sx, sy) && mask.get(sx as u32, sy as u32)
                    })
                });
                let brute_erode = BinaryMask::from_fn(w as u32, h as u32, |x, y| {
                    mask.get(x, y) && offsets.iter().all(|&(dx, dy)| {
                        let (sx, sy) = (x as i32 + dx, y as i32 + dy);
                        !inside(sx, sy) || mask.get(sx as u32, sy as u32)
                    })
                });
                prop_assert_eq!(dilate(&mask, &offsets), brute_dilate);
                prop_assert_eq!(erode(&mask, &offsets), brute_erode);
            }
        }
    }

    fn brute_dt_sq(mask: &BinaryMask) -> Vec<f64> {
        let (w, h) = (mask.width() as i64, mask.height() as i64);
        let mut out = vec![0.0; (w * h) as usize];
        for y in 0..h {
            for x in 0..w {
                if !mask.get(x as u32, y as u32) {
                    continue;
                }
                let mut best = f64::INFINITY;
                for by in -1..=h {
                    for bx in -1..=w {
                        let bg = bx < 0 || by < 0 || bx >= w || by >= h || !mask.get(bx as u32, by as u32);
                        if bg {
                            best = best.min(((bx - x).pow(2) + (by - y).pow(2)) as f64);
                        }
                    }
                }
                out[(y * w + x) as usize] = best;
            }
        }
        out
    }

    #[test]
    fn edt_matches_brute_force() {
        let mut state = 12345u64;
        for _ in 0..20 {
            let mask = BinaryMask::from_fn(13, 9, |_, _| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 33) % 4 != 0
            });
            assert_eq!(distance_transform_sq(&mask), brute_dt_sq(&mask));
        }
    }

    #[test]
    fn edt_stripe_widths() {
        // A horizontal stripe of width 4 has centre distance 2.
        let mask = BinaryMask::from_fn(40, 20, |_, y| (8..12).contains(&y));
        let d = distance_transform_sq(&mask);
        assert_eq!(d[9 * 40 + 20], 4.0);
    }

    #[test]
    fn components_and_holes() {
        let mut m = BinaryMask::from_fn(10, 10, |x, y| (1..5).contains(&x) && (1..5).contains(&y));
        m.set(2, 2, false);
        m.set(8, 8, true);
        let (_, sizes) = label_components(&m);
        assert_eq!(sizes[1..].to_vec(), vec![15, 1]);
        let filled = fill_holes(&largest_component(&m));
        assert_eq!(filled.count(), 16);
        assert_eq!(remove_small_components(&m, 2).count(), 15);
    }

    #[test]
    fn diagonal_pixels_are_connected() {
        let m = BinaryMask::from_fn(4, 4, |x, y| x == y);
        let (_, sizes) = label_components(&m);
        assert_eq!(sizes.len(), 2);
    }

    #[test]
    fn thinning_stripe_is_one_pixel_wide() {
        let m = BinaryMask::from_fn(30, 11, |x, y| (3..27).contains(&x) && (3..8).contains(&y));
        let s = thin(&m);
        for x in 8..22 {
            let col: usize = (0..11).filter(|&y| s.get(x, y)).count();
            assert_eq!(col, 1, "column {x}");
        }
    }

    #[test]
    fn percentile_nearest_rank() {
        let mut v: Vec<f64> = (1..=10).map(|v| v as f64).collect();
        assert_eq!(percentile(&mut v, 80.0), 8.0);
        assert_eq!(percentile(&mut v, 20.0), 2.0);
        assert_eq!(percentile(&mut v, 0.0), 1.0);
    }

    #[test]
    fn argmax_ties_prefer_top_left() {
        let mut p = Plane::new(4, 4, 0.0);
        *p.at_mut(3, 1) = 1.0;
        *p.at_mut(1, 2) = 1.0;
        *p.at_mut(2, 1) = 1.0;
        assert_eq!(argmax(&p, None), Some((2, 1, 1.0)));
    }

    #[test]
    fn closing_bridges_small_gap() {
        let m = BinaryMask::from_fn(20, 9, |x, y| (2..18).contains(&x) && (2..7).contains(&y) && x != 9);
        let c = close(&m, 3.0);
        assert!(c.get(9, 4));
    }
}
