//! Word-image normalization: contrast enhancement, slope and slant
//! correction, ascender/descender height normalization, crop and resize.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{
    affine_warp, column_extrema, ink_column_range, invert, resize, AffineMatrix, Extremum,
    GrayImage, ImageError, BACKGROUND, DEFAULT_FG_THRESHOLD,
};

#[derive(Debug, Error)]
pub enum NormalizeError {
    #[error("invalid normalize config: {0}")]
    Config(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadSide {
    #[default]
    Left,
    Right,
}

impl FromStr for PadSide {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "left" => Ok(PadSide::Left),
            "right" => Ok(PadSide::Right),
            other => Err(format!("pad side must be left or right, got {other:?}")),
        }
    }
}

impl fmt::Display for PadSide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PadSide::Left => "left",
            PadSide::Right => "right",
        })
    }
}

/// Dynamic range of the local standard deviation for intensities in `[0, 1]`.
pub const CONTRAST_DYNAMIC_RANGE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormalizeConfig {
    pub target_height: usize,
    pub target_width: usize,
    pub pad_side: PadSide,
    /// Odd side length of the contrast window.
    pub contrast_window: usize,
    pub contrast_k: f64,
    pub ransac_iterations: usize,
    /// Inlier distance in pixels.
    pub ransac_tolerance: f64,
    pub fg_threshold: f64,
    pub seed: u64,
}

impl Default for NormalizeConfig {
    fn default() -> Self {
        Self {
            target_height: 48,
            target_width: 192,
            pad_side: PadSide::Left,
            contrast_window: 15,
            contrast_k: 0.5,
            ransac_iterations: 200,
            ransac_tolerance: 2.0,
            fg_threshold: DEFAULT_FG_THRESHOLD,
            seed: 0,
        }
    }
}

impl NormalizeConfig {
    pub fn validate(&self) -> Result<(), NormalizeError> {
        let bad = |m: &str| Err(NormalizeError::Config(m.to_string()));
        if self.target_height < 8 || self.target_width < 8 {
            return bad("target dimensions must be at least 8");
        }
        if self.contrast_window < 3 || self.contrast_window.is_multiple_of(2) {
            return bad("contrast window must be odd and at least 3");
        }
        if !(self.contrast_k > 0.0 && self.contrast_k < 1.0) {
            return bad("contrast k must lie in (0, 1)");
        }
        if self.ransac_iterations == 0 {
            return bad("RANSAC needs at least one iteration");
        }
        if !(self.ransac_tolerance.is_finite() && self.ransac_tolerance >= 0.0) {
            return bad("RANSAC tolerance must be finite and nonnegative");
        }
        if !(self.fg_threshold > 0.0 && self.fg_threshold <= 1.0) {
            return bad("foreground threshold must lie in (0, 1]");
        }
        Ok(())
    }

    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZoneLines {
    pub baseline_y: usize,
    pub upperline_y: usize,
}

impl ZoneLines {
    pub fn core_height(&self) -> usize {
        self.baseline_y - self.upperline_y
    }

    pub fn is_valid(&self, height: usize) -> bool {
        self.upperline_y < self.baseline_y && self.baseline_y < height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlantEstimate {
    /// Tangent of the slant angle; positive for strokes leaning right.
    pub alpha: f64,
    pub evidence_left: usize,
    pub evidence_center: usize,
    pub evidence_right: usize,
}

impl SlantEstimate {
    pub fn from_evidence(left: usize, center: usize, right: usize) -> Self {
        let total = left + center + right;
        let alpha = if total > 0 {
            (right as f64 - left as f64) / total as f64
        } else {
            0.0
        };
        Self {
            alpha,
            evidence_left: left,
            evidence_center: center,
            evidence_right: right,
        }
    }
}

/// Summed-area table with a zero first row and column.
struct Integral {
    w: usize,
    sum: Vec<f64>,
    sq: Vec<f64>,
}

impl Integral {
    fn new(img: &GrayImage) -> Self {
        let (w, h) = (img.width(), img.height());
        let stride = w + 1;
        let mut sum = vec![0.0; stride * (h + 1)];
        let mut sq = vec![0.0; stride * (h + 1)];
        for y in 0..h {
            let (mut rs, mut rq) = (0.0, 0.0);
            for x in 0..w {
                let p = img.get(x, y);
                rs += p;
                rq += p * p;
                sum[(y + 1) * stride + x + 1] = sum[y * stride + x + 1] + rs;
                sq[(y + 1) * stride + x + 1] = sq[y * stride + x + 1] + rq;
            }
        }
        Self { w, sum, sq }
    }

    /// Mean and standard deviation over `[x0, x1) × [y0, y1)`.
    fn stats(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> (f64, f64) {
        let s = self.w + 1;
        let rect = |t: &[f64]| t[y1 * s + x1] - t[y0 * s + x1] - t[y1 * s + x0] + t[y0 * s + x0];
        let n = ((x1 - x0) * (y1 - y0)) as f64;
        let mean = rect(&self.sum) / n;
        let var = (rect(&self.sq) / n - mean * mean).max(0.0);
        (mean, var.sqrt())
    }
}

/// Variance below this is treated as a flat window.
const FLAT_STD: f64 = 1e-9;

/// Local adaptive contrast stretch.
///
/// Each pixel gets a threshold `t = m·(1 + k·(s/R − 1))` from the mean `m` and
/// standard deviation `s` of its window (clipped at the image border). The
/// output ramps linearly from ink (0) to background (1) across `[t − s, t + s]`,
/// with the ramp ends kept inside the window's own intensity range so that
/// already-saturated pixels stay saturated. Flat windows become background.
pub fn enhance_contrast(img: &GrayImage, cfg: &NormalizeConfig) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    let r = cfg.contrast_window / 2;
    let integral = Integral::new(img);
    // window minima/maxima via separable sliding passes
    let (wmin, wmax) = window_extrema(img, r);
    GrayImage::from_fn(w, h, |x, y| {
        let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        let (m, s) = integral.stats(x0, y0, x1, y1);
        if s <= FLAT_STD {
            return BACKGROUND;
        }
        let t = m * (1.0 + cfg.contrast_k * (s / CONTRAST_DYNAMIC_RANGE - 1.0));
        let i = y * w + x;
        let lo = (t - s).max(wmin[i]);
        let hi = (t + s).min(wmax[i]);
        let p = img.get(x, y);
        if hi <= lo {
            return if p < t { 0.0 } else { 1.0 };
        }
        ((p - lo) / (hi - lo)).clamp(0.0, 1.0)
    })
}

fn window_extrema(img: &GrayImage, r: usize) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (img.width(), img.height());
    let pass = |src: &[f64], horizontal: bool, take_min: bool| -> Vec<f64> {
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let (lo, hi, fixed) = if horizontal {
                    (x.saturating_sub(r), (x + r).min(w - 1), y)
                } else {
                    (y.saturating_sub(r), (y + r).min(h - 1), x)
                };
                let mut acc = if take_min {
                    f64::INFINITY
                } else {
                    f64::NEG_INFINITY
                };
                for k in lo..=hi {
                    let v = if horizontal {
                        src[fixed * w + k]
                    } else {
                        src[k * w + fixed]
                    };
                    acc = if take_min { acc.min(v) } else { acc.max(v) };
                }
                out[y * w + x] = acc;
            }
        }
        out
    };
    let px = img.pixels();
    let mn = pass(&pass(px, true, true), false, true);
    let mx = pass(&pass(px, true, false), false, false);
    (mn, mx)
}

/// Robust line `y = a·x + b` through the points, refined by least squares on
/// the best consensus set. `None` with fewer than two distinct columns.
pub fn ransac_line<R: Rng + ?Sized>(
    points: &[(f64, f64)],
    iterations: usize,
    tolerance: f64,
    rng: &mut R,
) -> Option<(f64, f64)> {
    let n = points.len();
    if n < 2 || points.iter().all(|p| p.0 == points[0].0) {
        return None;
    }
    let mut best: Option<(usize, f64, f64)> = None;
    for _ in 0..iterations {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n - 1);
        let j = if j >= i { j + 1 } else { j };
        let (p, q) = (points[i], points[j]);
        if p.0 == q.0 {
            continue;
        }
        let a = (q.1 - p.1) / (q.0 - p.0);
        let b = p.1 - a * p.0;
        let inliers = points
            .iter()
            .filter(|r| (r.1 - a * r.0 - b).abs() <= tolerance)
            .count();
        if best.is_none_or(|(c, _, _)| inliers > c) {
            best = Some((inliers, a, b));
        }
    }
    let (_, a, b) = best?;
    let inl: Vec<(f64, f64)> = points
        .iter()
        .copied()
        .filter(|r| (r.1 - a * r.0 - b).abs() <= tolerance)
        .collect();
    Some(least_squares(&inl).unwrap_or((a, b)))
}

fn least_squares(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let a = sxy / sxx;
    Some((a, my - a * mx))
}

/// Robust horizontal level: the value with the largest consensus within
/// `tolerance`, refined to the mean of its inliers. Every point is tried as a
/// hypothesis when there are no more points than iterations.
pub fn ransac_level<R: Rng + ?Sized>(
    values: &[f64],
    iterations: usize,
    tolerance: f64,
    rng: &mut R,
) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let support = |c: f64| {
        values
            .iter()
            .filter(|v| (*v - c).abs() <= tolerance)
            .count()
    };
    let mut best: Option<(usize, f64)> = None;
    let mut consider = |c: f64| {
        let s = support(c);
        if best.is_none_or(|(b, _)| s > b) {
            best = Some((s, c));
        }
    };
    if values.len() <= iterations {
        values.iter().for_each(|&v| consider(v));
    } else {
        for _ in 0..iterations {
            consider(values[rng.random_range(0..values.len())]);
        }
    }
    let (_, c) = best?;
    let inl: Vec<f64> = values
        .iter()
        .copied()
        .filter(|v| (v - c).abs() <= tolerance)
        .collect();
    Some(inl.iter().sum::<f64>() / inl.len() as f64)
}

fn extrema_points(img: &GrayImage, cfg: &NormalizeConfig, which: Extremum) -> Vec<(f64, f64)> {
    column_extrema(img, cfg.fg_threshold, which)
        .into_iter()
        .map(|(x, y)| (x as f64, y as f64))
        .collect()
}

/// Slope angle (radians, image rows growing downward) of the baseline fitted
/// through the lowest ink pixel of every column.
pub fn estimate_slope(img: &GrayImage, cfg: &NormalizeConfig) -> f64 {
    let pts = extrema_points(img, cfg, Extremum::Bottom);
    match ransac_line(
        &pts,
        cfg.ransac_iterations,
        cfg.ransac_tolerance,
        &mut cfg.rng(),
    ) {
        Some((a, _)) => a.atan(),
        None => 0.0,
    }
}

const MAX_SLOPE: f64 = std::f64::consts::FRAC_PI_4 - 1e-6;

/// Rotates by `−angle` about the image centre onto a canvas grown to hold the
/// rotated bounds. The growth is symmetric so centres stay aligned.
pub fn correct_slope(img: &GrayImage, angle: f64) -> GrayImage {
    if angle == 0.0 {
        return img.clone();
    }
    let angle = angle.clamp(-MAX_SLOPE, MAX_SLOPE);
    let (w, h) = (img.width() as f64, img.height() as f64);
    let (s, c) = angle.sin_cos();
    let (s, c) = (s.abs(), c.abs());
    let grow = |extent: f64, base: usize| {
        base + 2 * ((extent - base as f64) / 2.0).ceil().max(0.0) as usize
    };
    let ow = grow(w * c + h * s, img.width());
    let oh = grow(w * s + h * c, img.height());
    let m = AffineMatrix::translation((ow as f64 - w) / 2.0, (oh as f64 - h) / 2.0)
        .compose(&AffineMatrix::rotation_about(-angle, w / 2.0, h / 2.0));
    affine_warp(img, &m, ow, oh, BACKGROUND).expect("rotation is invertible and canvas nonempty")
}

fn is_ink(img: &GrayImage, x: isize, y: isize, thr: f64) -> bool {
    img.get_or(x, y, BACKGROUND) < thr
}

/// Ink pixel whose right neighbour is background (outside counts as background).
fn is_right_boundary(img: &GrayImage, x: isize, y: isize, thr: f64) -> bool {
    is_ink(img, x, y, thr) && !is_ink(img, x + 1, y, thr)
}

/// Chain-code slant evidence: for every right-boundary pixel, each of its three
/// upper neighbours that is itself a right-boundary pixel votes for a left,
/// vertical or right continuation of the contour.
pub fn estimate_slant(img: &GrayImage, cfg: &NormalizeConfig) -> SlantEstimate {
    let thr = cfg.fg_threshold;
    let (mut l, mut c, mut r) = (0, 0, 0);
    for y in 1..img.height() as isize {
        for x in 0..img.width() as isize {
            if !is_right_boundary(img, x, y, thr) {
                continue;
            }
            l += is_right_boundary(img, x - 1, y - 1, thr) as usize;
            c += is_right_boundary(img, x, y - 1, thr) as usize;
            r += is_right_boundary(img, x + 1, y - 1, thr) as usize;
        }
    }
    SlantEstimate::from_evidence(l, c, r)
}

/// The slant shear `(1, −α, w·α/2; 0, 1, 0)` expressed for image rows: its
/// vertical coordinate runs upward from the bottom row.
pub fn slant_matrix(alpha: f64, width: usize, height: usize) -> AffineMatrix {
    let bottom = height.saturating_sub(1) as f64;
    // x' = x − α·(bottom − row) + w·α/2
    AffineMatrix::new(
        1.0,
        alpha,
        alpha * (0.5 * width as f64 - bottom),
        0.0,
        1.0,
        0.0,
    )
}

const MAX_SLANT: f64 = 0.99;

/// Applies the slant shear on a canvas of the same size.
pub fn correct_slant(img: &GrayImage, alpha: f64) -> GrayImage {
    if alpha == 0.0 {
        return img.clone();
    }
    let alpha = alpha.clamp(-MAX_SLANT, MAX_SLANT);
    let m = slant_matrix(alpha, img.width(), img.height());
    affine_warp(img, &m, img.width(), img.height(), BACKGROUND).expect("shear is invertible")
}

/// Baseline and upperline as robust horizontal fits to the lowest and highest
/// ink pixel of each column. Degenerate inputs yield `(0, height − 1)`.
pub fn detect_zones(img: &GrayImage, cfg: &NormalizeConfig) -> ZoneLines {
    let h = img.height();
    let fallback = ZoneLines {
        baseline_y: h.saturating_sub(1),
        upperline_y: 0,
    };
    let bottoms: Vec<f64> = extrema_points(img, cfg, Extremum::Bottom)
        .iter()
        .map(|p| p.1)
        .collect();
    let tops: Vec<f64> = extrema_points(img, cfg, Extremum::Top)
        .iter()
        .map(|p| p.1)
        .collect();
    if bottoms.len() <= 1 {
        return fallback;
    }
    let mut rng = cfg.rng();
    let base = ransac_level(
        &bottoms,
        cfg.ransac_iterations,
        cfg.ransac_tolerance,
        &mut rng,
    );
    let upper = ransac_level(&tops, cfg.ransac_iterations, cfg.ransac_tolerance, &mut rng);
    match (base, upper) {
        (Some(b), Some(u)) => {
            let z = ZoneLines {
                baseline_y: (b.round() as usize).min(h - 1),
                upperline_y: u.round() as usize,
            };
            if z.is_valid(h) {
                z
            } else {
                fallback
            }
        }
        _ => fallback,
    }
}

fn rows(img: &GrayImage, y0: usize, y1: usize) -> GrayImage {
    img.crop(0, y0 as isize, img.width(), y1 - y0, BACKGROUND)
}

fn rescale_region(region: GrayImage, core: usize) -> GrayImage {
    let h_r = region.height();
    if h_r <= core || core == 0 {
        return region;
    }
    let w = region.width();
    resize(&region, core, Some(w)).unwrap_or(region)
}

/// Squeezes the ascender rows (above the upperline) and descender rows (below
/// the baseline) to at most the core height; core rows are copied untouched.
pub fn normalize_zones(img: &GrayImage, zones: ZoneLines) -> GrayImage {
    let h = img.height();
    if !zones.is_valid(h) {
        return img.clone();
    }
    let core = zones.core_height();
    let asc = rescale_region(rows(img, 0, zones.upperline_y), core);
    let mid = rows(img, zones.upperline_y, zones.baseline_y + 1);
    let desc = rescale_region(rows(img, zones.baseline_y + 1, h), core);
    let w = img.width();
    let mut pixels = Vec::with_capacity(w * (asc.height() + mid.height() + desc.height()));
    for part in [&asc, &mid, &desc] {
        pixels.extend_from_slice(part.pixels());
    }
    let total = pixels.len() / w.max(1);
    GrayImage::from_pixels(w, total, pixels).expect("stacked regions share width")
}

/// Result of [`crop_resize_detailed`].
#[derive(Debug, Clone)]
pub struct CropResize {
    pub image: GrayImage,
    /// Set when the word was wider than the target and got squeezed horizontally.
    pub aspect_broken: bool,
}

pub fn crop_resize_detailed(img: &GrayImage, cfg: &NormalizeConfig) -> CropResize {
    let (th, tw) = (cfg.target_height, cfg.target_width);
    let Some((first, last)) = ink_column_range(img, cfg.fg_threshold) else {
        return CropResize {
            image: GrayImage::blank(tw, th),
            aspect_broken: false,
        };
    };
    let trimmed = img.crop(
        first as isize,
        0,
        last - first + 1,
        img.height(),
        BACKGROUND,
    );
    let scaled_w =
        ((trimmed.width() as f64 * th as f64 / trimmed.height() as f64).round() as usize).max(1);
    if scaled_w > tw {
        return CropResize {
            image: resize(&trimmed, th, Some(tw)).expect("nonzero target"),
            aspect_broken: true,
        };
    }
    let scaled = resize(&trimmed, th, Some(scaled_w)).expect("nonzero target");
    let pad = (tw - scaled_w) as isize;
    let x0 = match cfg.pad_side {
        PadSide::Left => -pad,
        PadSide::Right => 0,
    };
    CropResize {
        image: scaled.crop(x0, 0, tw, th, BACKGROUND),
        aspect_broken: false,
    }
}

/// Trims blank side columns, scales to the target height and pads to the
/// target width on the configured side.
pub fn crop_resize(img: &GrayImage, cfg: &NormalizeConfig) -> GrayImage {
    crop_resize_detailed(img, cfg).image
}

/// Intermediate results of the pipeline, mainly for inspection.
#[derive(Debug, Clone)]
pub struct NormalizeTrace {
    pub slope: f64,
    pub slant: SlantEstimate,
    pub zones: ZoneLines,
    pub aspect_broken: bool,
    /// Final, inverted output (ink bright).
    pub output: GrayImage,
}

pub fn normalize_traced(
    img: &GrayImage,
    cfg: &NormalizeConfig,
) -> Result<NormalizeTrace, NormalizeError> {
    cfg.validate()?;
    let enhanced = enhance_contrast(img, cfg);
    let slope = estimate_slope(&enhanced, cfg);
    let deskewed = correct_slope(&enhanced, slope);
    let slant = estimate_slant(&deskewed, cfg);
    // room for the shear so strokes near the sides stay on the canvas
    let h = deskewed.height() as f64;
    let margin = (slant.alpha.abs() * (h + 0.5 * deskewed.width() as f64)).ceil() as usize;
    let padded = deskewed.crop(
        -(margin as isize),
        0,
        deskewed.width() + 2 * margin,
        deskewed.height(),
        BACKGROUND,
    );
    let deslanted = correct_slant(&padded, slant.alpha);
    let zones = detect_zones(&deslanted, cfg);
    let zoned = normalize_zones(&deslanted, zones);
    let cr = crop_resize_detailed(&zoned, cfg);
    Ok(NormalizeTrace {
        slope,
        slant,
        zones,
        aspect_broken: cr.aspect_broken,
        output: invert(&cr.image),
    })
}

/// Full preprocessing chain; the result is `target_height × target_width`
/// with bright ink on a dark background.
pub fn normalize_pipeline(
    img: &GrayImage,
    cfg: &NormalizeConfig,
) -> Result<GrayImage, NormalizeError> {
    Ok(normalize_traced(img, cfg)?.output)
}

/// Baseline preparation without normalization: crop, resize and pad, invert.
pub fn resize_only(img: &GrayImage, cfg: &NormalizeConfig) -> Result<GrayImage, NormalizeError> {
    cfg.validate()?;
    Ok(invert(&crop_resize(img, cfg)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> NormalizeConfig {
        NormalizeConfig::default()
    }

    #[test]
    fn contrast_trivial_cases() {
        let gray = GrayImage::filled(20, 20, 0.5);
        assert!(enhance_contrast(&gray, &cfg())
            .pixels()
            .iter()
            .all(|&p| p == 1.0));
        let two_tone =
            GrayImage::from_fn(40, 30, |x, y| if x % 10 < 2 && y > 3 { 0.0 } else { 1.0 });
        assert_eq!(enhance_contrast(&two_tone, &cfg()), two_tone);
    }

    #[test]
    fn zones_of_a_band() {
        let band = GrayImage::from_fn(60, 64, |x, y| {
            if (20..=40).contains(&y) && x % 3 != 0 {
                0.0
            } else {
                1.0
            }
        });
        let z = detect_zones(&band, &cfg());
        assert_eq!((z.upperline_y, z.baseline_y), (20, 40));
        assert_eq!(
            detect_zones(&GrayImage::blank(10, 12), &cfg()),
            ZoneLines {
                baseline_y: 11,
                upperline_y: 0
            }
        );
    }

    #[test]
    fn zone_rescale_halves_tall_ascenders() {
        let img = GrayImage::from_fn(5, 80, |x, y| ((x + y) % 2) as f64);
        let z = ZoneLines {
            upperline_y: 40,
            baseline_y: 60,
        };
        let out = normalize_zones(&img, z);
        // ascenders 40 → 20, core 21 rows, descenders 19 (≤ 20, unchanged)
        assert_eq!(out.height(), 20 + 21 + 19);
        for y in 0..21 {
            for x in 0..5 {
                assert_eq!(out.get(x, 20 + y), img.get(x, 40 + y));
            }
        }
    }

    #[test]
    fn crop_resize_examples() {
        let c = cfg();
        let wide = GrayImage::from_fn(300, 30, |_, y| if y == 15 { 0.0 } else { 1.0 });
        let r = crop_resize_detailed(&wide, &c);
        assert!(r.aspect_broken);
        assert_eq!((r.image.width(), r.image.height()), (192, 48));
        let narrow = GrayImage::from_fn(100, 48, |_, y| if y == 20 { 0.0 } else { 1.0 });
        let r = crop_resize_detailed(&narrow, &c);
        assert!(!r.aspect_broken);
        assert!((0..92).all(|x| (0..48).all(|y| r.image.get(x, y) == 1.0)));
        assert!(r.image.get(92, 20) < 0.5);
        let blank = crop_resize(&GrayImage::blank(7, 9), &c);
        assert_eq!((blank.width(), blank.height()), (192, 48));
        assert!(blank.pixels().iter().all(|&p| p == 1.0));
    }

    #[test]
    fn slant_matrix_shift() {
        // y counted upward: a pixel in column x moves by 25 − 0.5·y
        let m = slant_matrix(0.5, 100, 21);
        for row in 0..21 {
            let y_up = 20 - row;
            let (x2, _) = m.apply(10.0, row as f64);
            assert!((x2 - 10.0 - (25.0 - 0.5 * y_up as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn blank_slant_is_zero() {
        let e = estimate_slant(&GrayImage::blank(10, 10), &cfg());
        assert_eq!(e, SlantEstimate::from_evidence(0, 0, 0));
        assert_eq!(e.alpha, 0.0);
    }
}
