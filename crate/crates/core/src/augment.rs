//! Randomized train-time distortions of word images.

use nalgebra::{SMatrix, SVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{affine_warp, invert, warp_with, AffineMatrix, GrayImage, BACKGROUND};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("invalid augment config: {0}")]
    Config(String),
    #[error("degenerate point correspondence")]
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TranslateParams {
    pub p: f64,
    /// Maximum shift in pixels along each axis.
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResizeParams {
    pub p: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlantParams {
    pub p: f64,
    /// Maximum absolute shear tangent.
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ElasticParams {
    pub p: f64,
    pub spacing: usize,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectiveParams {
    pub p: f64,
    pub jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MorphParams {
    pub p: f64,
    pub kernel: usize,
}

impl Default for TranslateParams {
    fn default() -> Self {
        Self { p: 0.5, max: 3.0 }
    }
}

impl Default for ResizeParams {
    fn default() -> Self {
        Self {
            p: 0.4,
            min: 0.9,
            max: 1.1,
        }
    }
}

impl Default for SlantParams {
    fn default() -> Self {
        Self { p: 0.4, max: 0.15 }
    }
}

impl Default for ElasticParams {
    fn default() -> Self {
        Self {
            p: 0.3,
            spacing: 8,
            sigma: 1.5,
        }
    }
}

impl Default for ProjectiveParams {
    fn default() -> Self {
        Self {
            p: 0.2,
            jitter: 2.0,
        }
    }
}

impl Default for MorphParams {
    fn default() -> Self {
        Self { p: 0.1, kernel: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct AugmentConfig {
    pub translate: TranslateParams,
    pub resize: ResizeParams,
    pub slant: SlantParams,
    pub elastic: ElasticParams,
    pub projective: ProjectiveParams,
    pub morph: MorphParams,
    /// Set for images with bright ink on a dark background; they are inverted
    /// around the chain so fills and morphology still treat ink correctly.
    pub ink_bright: bool,
    pub seed: u64,
}

impl AugmentConfig {
    /// Every transform disabled.
    pub fn disabled() -> Self {
        let mut c = Self::default();
        for p in c.probabilities_mut() {
            *p = 0.0;
        }
        c
    }

    fn probabilities_mut(&mut self) -> [&mut f64; 6] {
        [
            &mut self.translate.p,
            &mut self.resize.p,
            &mut self.slant.p,
            &mut self.elastic.p,
            &mut self.projective.p,
            &mut self.morph.p,
        ]
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |m: String| Err(AugmentError::Config(m));
        let probs = [
            ("translate", self.translate.p),
            ("resize", self.resize.p),
            ("slant", self.slant.p),
            ("elastic", self.elastic.p),
            ("projective", self.projective.p),
            ("morph", self.morph.p),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} probability {p} outside [0, 1]"));
            }
        }
        let mags = [
            self.translate.max,
            self.resize.min,
            self.resize.max,
            self.slant.max,
            self.elastic.sigma,
            self.projective.jitter,
        ];
        if mags.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return bad("magnitudes must be finite and nonnegative".into());
        }
        if self.resize.min <= 0.0 || self.resize.min > self.resize.max {
            return bad("resize range must satisfy 0 < min <= max".into());
        }
        if self.slant.max >= 1.0 {
            return bad("slant magnitude must be below 1".into());
        }
        if self.elastic.spacing < 4 {
            return bad("elastic grid spacing must be at least 4".into());
        }
        if self.morph.kernel < 3 || self.morph.kernel.is_multiple_of(2) {
            return bad("morphology kernel must be odd and at least 3".into());
        }
        Ok(())
    }
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, max: f64) -> f64 {
    if max > 0.0 {
        rng.random_range(-max..=max)
    } else {
        0.0
    }
}

/// Affine warp onto the same canvas around the image centre.
fn warp_centered(img: &GrayImage, local: AffineMatrix) -> GrayImage {
    let (cx, cy) = (
        (img.width() as f64 - 1.0) / 2.0,
        (img.height() as f64 - 1.0) / 2.0,
    );
    let m = AffineMatrix::translation(cx, cy)
        .compose(&local)
        .compose(&AffineMatrix::translation(-cx, -cy));
    affine_warp(img, &m, img.width(), img.height(), BACKGROUND)
        .expect("augmentation maps are invertible")
}

pub fn translate(img: &GrayImage, dx: f64, dy: f64) -> GrayImage {
    affine_warp(
        img,
        &AffineMatrix::translation(dx, dy),
        img.width(),
        img.height(),
        BACKGROUND,
    )
    .expect("translation is invertible")
}

/// Scales the content about the centre, keeping the canvas.
pub fn rescale(img: &GrayImage, factor: f64) -> GrayImage {
    warp_centered(img, AffineMatrix::scale(factor, factor))
}

/// Shear `x' = x − α·(y − cy)` about the centre row; positive α leans strokes right.
pub fn slant(img: &GrayImage, alpha: f64) -> GrayImage {
    warp_centered(img, AffineMatrix::shear_x(alpha, 0.0))
}

/// Local distortion driven by a grid of control points spaced `spacing`
/// pixels apart, each displaced by Gaussian noise of deviation `sigma`; the
/// displacement field is bilinear between control points.
pub fn elastic_distort<R: Rng + ?Sized>(
    img: &GrayImage,
    spacing: usize,
    sigma: f64,
    rng: &mut R,
) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    let spacing = spacing.max(1);
    let nx = (w.saturating_sub(1)).div_ceil(spacing) + 1;
    let ny = (h.saturating_sub(1)).div_ceil(spacing) + 1;
    let normal = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
    let field: Vec<(f64, f64)> = (0..nx * ny)
        .map(|_| (normal.sample(rng), normal.sample(rng)))
        .collect();
    if sigma == 0.0 {
        return img.clone();
    }
    let s = spacing as f64;
    warp_with(img, w, h, BACKGROUND, |x, y| {
        let (gx, gy) = (x / s, y / s);
        let (i, j) = (
            (gx.floor() as usize).min(nx - 1),
            (gy.floor() as usize).min(ny - 1),
        );
        let (i1, j1) = ((i + 1).min(nx - 1), (j + 1).min(ny - 1));
        let (fx, fy) = (gx - i as f64, gy - j as f64);
        let at = |a: usize, b: usize| field[b * nx + a];
        let lerp =
            |p: (f64, f64), q: (f64, f64), t: f64| (p.0 + (q.0 - p.0) * t, p.1 + (q.1 - p.1) * t);
        let top = lerp(at(i, j), at(i1, j), fx);
        let bottom = lerp(at(i, j1), at(i1, j1), fx);
        let d = lerp(top, bottom, fy);
        (x + d.0, y + d.1)
    })
    .expect("nonempty image")
}

/// Planar homography stored row-major with `h33 = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(pub [f64; 9]);

impl Homography {
    pub const IDENTITY: Homography = Homography([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);

    /// Solves the 8×8 system mapping each `src[k]` onto `dst[k]`.
    pub fn from_points(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> Result<Self, AugmentError> {
        let mut a = SMatrix::<f64, 8, 8>::zeros();
        let mut b = SVector::<f64, 8>::zeros();
        for (k, (&(x, y), &(u, v))) in src.iter().zip(dst).enumerate() {
            let r = 2 * k;
            a.row_mut(r)
                .copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
            a.row_mut(r + 1)
                .copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
            b[r] = u;
            b[r + 1] = v;
        }
        let sol = a.lu().solve(&b).ok_or(AugmentError::Degenerate)?;
        if sol.iter().any(|v| !v.is_finite()) {
            return Err(AugmentError::Degenerate);
        }
        Ok(Self([
            sol[0], sol[1], sol[2], sol[3], sol[4], sol[5], sol[6], sol[7], 1.0,
        ]))
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.0;
        let d = m[6] * x + m[7] * y + m[8];
        (
            (m[0] * x + m[1] * y + m[2]) / d,
            (m[3] * x + m[4] * y + m[5]) / d,
        )
    }
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Strictly convex quadrilateral with consistent winding.
fn is_convex(q: &[(f64, f64); 4]) -> bool {
    let c: Vec<f64> = (0..4)
        .map(|i| cross(q[i], q[(i + 1) % 4], q[(i + 2) % 4]))
        .collect();
    c.iter().all(|&v| v > 1e-9) || c.iter().all(|&v| v < -1e-9)
}

const MAX_REDRAWS: usize = 100;

/// Moves each corner uniformly within `±jitter` and resamples the image
/// through the homography defined by the four correspondences.
pub fn projective_warp<R: Rng + ?Sized>(img: &GrayImage, jitter: f64, rng: &mut R) -> GrayImage {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let jitter = jitter.clamp(0.0, (w.min(h) / 4.0 - 1e-6).max(0.0));
    let src = [
        (0.0, 0.0),
        (w - 1.0, 0.0),
        (w - 1.0, h - 1.0),
        (0.0, h - 1.0),
    ];
    for _ in 0..MAX_REDRAWS {
        let dst = src.map(|(x, y)| (x + symmetric(rng, jitter), y + symmetric(rng, jitter)));
        if jitter == 0.0 {
            return img.clone();
        }
        if !is_convex(&dst) {
            continue;
        }
        // inverse mapping: destination pixel → source position
        if let Ok(inv) = Homography::from_points(&dst, &src) {
            return warp_with(img, img.width(), img.height(), BACKGROUND, |x, y| {
                inv.apply(x, y)
            })
            .expect("nonempty image");
        }
    }
    img.clone()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MorphMode {
    Erode,
    Dilate,
}

/// Grayscale morphology on dark ink: dilation grows strokes (window minimum),
/// erosion thins them (window maximum). The window is clipped at the border.
pub fn morph(img: &GrayImage, mode: MorphMode, kernel: usize) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    let r = kernel / 2;
    let pick = |a: f64, b: f64| match mode {
        MorphMode::Dilate => a.min(b),
        MorphMode::Erode => a.max(b),
    };
    let horiz = GrayImage::from_fn(w, h, |x, y| {
        (x.saturating_sub(r)..=(x + r).min(w - 1))
            .map(|k| img.get(k, y))
            .reduce(pick)
            .expect("nonempty window")
    });
    GrayImage::from_fn(w, h, |x, y| {
        (y.saturating_sub(r)..=(y + r).min(h - 1))
            .map(|k| horiz.get(x, k))
            .reduce(pick)
            .expect("nonempty window")
    })
}

/// Which steps of the chain fired.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Applied {
    pub translate: bool,
    pub resize: bool,
    pub slant: bool,
    pub elastic: bool,
    pub projective: bool,
    pub morph: Option<MorphMode>,
}

/// Runs translate → resize → slant → elastic → projective → erode/dilate,
/// each with its own probability. Coins and magnitudes are always drawn so
/// the random stream does not depend on which steps fire.
pub fn augment_traced<R: Rng + ?Sized>(
    img: &GrayImage,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> (GrayImage, Applied) {
    let mut applied = Applied::default();
    let coin = |rng: &mut R, p: f64| rng.random::<f64>() < p;
    let mut cur = if cfg.ink_bright {
        invert(img)
    } else {
        img.clone()
    };

    let fire = coin(rng, cfg.translate.p);
    let (dx, dy) = (
        symmetric(rng, cfg.translate.max),
        symmetric(rng, cfg.translate.max),
    );
    if fire {
        cur = translate(&cur, dx, dy);
        applied.translate = true;
    }

    let fire = coin(rng, cfg.resize.p);
    let factor = if cfg.resize.max > cfg.resize.min {
        rng.random_range(cfg.resize.min..=cfg.resize.max)
    } else {
        cfg.resize.min
    };
    if fire {
        cur = rescale(&cur, factor);
        applied.resize = true;
    }

    let fire = coin(rng, cfg.slant.p);
    let alpha = symmetric(rng, cfg.slant.max);
    if fire {
        cur = slant(&cur, alpha);
        applied.slant = true;
    }

    if coin(rng, cfg.elastic.p) {
        cur = elastic_distort(&cur, cfg.elastic.spacing, cfg.elastic.sigma, rng);
        applied.elastic = true;
    }

    if coin(rng, cfg.projective.p) {
        cur = projective_warp(&cur, cfg.projective.jitter, rng);
        applied.projective = true;
    }

    let fire = coin(rng, cfg.morph.p);
    let mode = if rng.random::<bool>() {
        MorphMode::Dilate
    } else {
        MorphMode::Erode
    };
    if fire {
        cur = morph(&cur, mode, cfg.morph.kernel);
        applied.morph = Some(mode);
    }

    if cfg.ink_bright {
        cur = invert(&cur);
    }
    if applied == Applied::default() {
        return (img.clone(), applied);
    }
    (cur, applied)
}

pub fn augment<R: Rng + ?Sized>(img: &GrayImage, cfg: &AugmentConfig, rng: &mut R) -> GrayImage {
    augment_traced(img, cfg, rng).0
}

/// Tiles images left to right, top to bottom, separated by `gap` pixels of `fill`.
pub fn preview_grid(images: &[GrayImage], columns: usize, gap: usize, fill: f64) -> GrayImage {
    let columns = columns.max(1);
    let cw = images.iter().map(GrayImage::width).max().unwrap_or(1);
    let ch = images.iter().map(GrayImage::height).max().unwrap_or(1);
    let rows = images.len().div_ceil(columns).max(1);
    let width = columns * cw + (columns + 1) * gap;
    let height = rows * ch + (rows + 1) * gap;
    let mut out = GrayImage::filled(width, height, fill);
    for (k, img) in images.iter().enumerate() {
        let (ox, oy) = (
            gap + (k % columns) * (cw + gap),
            gap + (k / columns) * (ch + gap),
        );
        for y in 0..img.height() {
            for x in 0..img.width() {
                out.set(ox + x, oy + y, img.get(x, y));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn strokes() -> GrayImage {
        GrayImage::from_fn(40, 24, |x, y| {
            if (x % 9 < 3) && (4..20).contains(&y) {
                0.0
            } else {
                1.0
            }
        })
    }

    #[test]
    fn disabled_chain_is_identity() {
        let img = strokes();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            assert_eq!(augment(&img, &AugmentConfig::disabled(), &mut rng), img);
        }
    }

    #[test]
    fn dilate_single_pixel() {
        let mut img = GrayImage::blank(7, 7);
        img.set(3, 3, 0.0);
        let d = morph(&img, MorphMode::Dilate, 3);
        for y in 0..7 {
            for x in 0..7 {
                let inside = (2..=4).contains(&x) && (2..=4).contains(&y);
                assert_eq!(d.get(x, y), if inside { 0.0 } else { 1.0 });
            }
        }
        let blank = GrayImage::blank(5, 5);
        assert_eq!(morph(&blank, MorphMode::Erode, 3), blank);
    }

    #[test]
    fn zero_magnitudes_are_identity() {
        let img = strokes();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = elastic_distort(&img, 8, 0.0, &mut rng);
        assert!(e.max_abs_diff(&img).unwrap() < 1e-6);
        assert_eq!(projective_warp(&img, 0.0, &mut rng), img);
    }

    #[test]
    fn homography_maps_hand_set_corners() {
        let src = [(0.0, 0.0), (10.0, 0.0), (10.0, 5.0), (0.0, 5.0)];
        let dst = [(1.0, -1.0), (11.5, 0.5), (9.0, 6.0), (-0.5, 4.0)];
        let hmg = Homography::from_points(&src, &dst).unwrap();
        for (s, d) in src.iter().zip(&dst) {
            let (u, v) = hmg.apply(s.0, s.1);
            assert!((u - d.0).abs() < 1e-9 && (v - d.1).abs() < 1e-9);
        }
        let collinear = [(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (3.0, 3.0)];
        assert!(Homography::from_points(&collinear, &dst).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let mut c = AugmentConfig::default();
        c.elastic.spacing = 3;
        assert!(c.validate().is_err());
        let mut c = AugmentConfig::default();
        c.translate.p = 1.5;
        assert!(c.validate().is_err());
    }
}
