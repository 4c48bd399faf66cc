//! Grayscale rasters and the geometric / intensity primitives used by the
//! normalization and augmentation stages.
//!
//! Intensities live in `[0, 1]`. Before the final inversion of the
//! normalization pipeline, ink is dark (close to 0) and paper is bright.

use std::path::{Path, PathBuf};

use thiserror::Error;

/// Default foreground threshold in the ink-is-dark convention.
pub const DEFAULT_FG_THRESHOLD: f64 = 0.5;

/// Background intensity in the ink-is-dark convention.
pub const BACKGROUND: f64 = 1.0;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image file not found: {0}")]
    Missing(PathBuf),
    #[error("corrupt or undecodable PNG {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("unsupported PNG color type / bit depth in {path}: {kind}")]
    UnsupportedDepth { path: PathBuf, kind: String },
    #[error("cannot write {path}: {reason}")]
    Write { path: PathBuf, reason: String },
    #[error("degenerate transform: linear part is not invertible")]
    DegenerateTransform,
    #[error("zero-area image")]
    ZeroArea,
    #[error("invalid dimensions {width}x{height}")]
    InvalidDims { width: usize, height: usize },
    #[error("pixel buffer has {got} values, expected {expected}")]
    BufferSize { expected: usize, got: usize },
}

/// Row-major grayscale raster with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    /// Builds an image from raw pixels, clamping every value into `[0, 1]`.
    pub fn from_pixels(
        width: usize,
        height: usize,
        mut pixels: Vec<f64>,
    ) -> Result<Self, ImageError> {
        if pixels.len() != width * height {
            return Err(ImageError::BufferSize {
                expected: width * height,
                got: pixels.len(),
            });
        }
        for p in &mut pixels {
            *p = if p.is_nan() {
                BACKGROUND
            } else {
                p.clamp(0.0, 1.0)
            };
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            pixels: vec![value.clamp(0.0, 1.0); width * height],
        }
    }

    /// Blank page in the ink-is-dark convention.
    pub fn blank(width: usize, height: usize) -> Self {
        Self::filled(width, height, BACKGROUND)
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.pixels[y * self.width + x] = v.clamp(0.0, 1.0);
    }

    /// Pixel lookup that returns `fill` outside the raster.
    #[inline]
    pub fn get_or(&self, x: isize, y: isize, fill: f64) -> f64 {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            fill
        } else {
            self.pixels[y as usize * self.width + x as usize]
        }
    }

    /// Bilinear sample at a sub-pixel position; neighbours outside the raster read as `fill`.
    pub fn sample_bilinear(&self, x: f64, y: f64, fill: f64) -> f64 {
        if !x.is_finite() || !y.is_finite() {
            return fill;
        }
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (xi, yi) = (x0 as isize, y0 as isize);
        let p00 = self.get_or(xi, yi, fill);
        let p10 = self.get_or(xi + 1, yi, fill);
        let p01 = self.get_or(xi, yi + 1, fill);
        let p11 = self.get_or(xi + 1, yi + 1, fill);
        let top = p00 + (p10 - p00) * fx;
        let bottom = p01 + (p11 - p01) * fx;
        top + (bottom - top) * fy
    }

    /// Number of pixels darker than `threshold`.
    pub fn ink_count(&self, threshold: f64) -> usize {
        self.pixels.iter().filter(|&&p| p < threshold).count()
    }

    /// Sum of `1 - p`, i.e. the amount of dark ink on a bright page.
    pub fn ink_mass(&self) -> f64 {
        self.pixels.iter().map(|p| 1.0 - p).sum()
    }

    /// Copies the rectangle `[x0, x0+w) × [y0, y0+h)`; out-of-range parts read as `fill`.
    pub fn crop(&self, x0: isize, y0: isize, w: usize, h: usize, fill: f64) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| {
            self.get_or(x0 + x as isize, y0 + y as isize, fill)
        })
    }

    /// Applies `f` to every pixel.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&p| f(p).clamp(0.0, 1.0)).collect(),
        }
    }

    /// Maximum absolute per-pixel difference; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &GrayImage) -> Option<f64> {
        if self.width != other.width || self.height != other.height {
            return None;
        }
        Some(
            self.pixels
                .iter()
                .zip(&other.pixels)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        )
    }
}

/// Row-major 2×3 affine map taking source coordinates to destination coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineMatrix(pub [f64; 6]);

impl AffineMatrix {
    pub const IDENTITY: AffineMatrix = AffineMatrix([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn new(a11: f64, a12: f64, a13: f64, a21: f64, a22: f64, a23: f64) -> Self {
        Self([a11, a12, a13, a21, a22, a23])
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self([1.0, 0.0, tx, 0.0, 1.0, ty])
    }

    pub fn scale(sx: f64, sy: f64) -> Self {
        Self([sx, 0.0, 0.0, 0.0, sy, 0.0])
    }

    /// Counter-clockwise (in image coordinates, y down) rotation by `angle` about `(cx, cy)`.
    pub fn rotation_about(angle: f64, cx: f64, cy: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self([c, -s, cx - c * cx + s * cy, s, c, cy - s * cx - c * cy])
    }

    /// Horizontal shear `x' = x - alpha * y + tx`.
    pub fn shear_x(alpha: f64, tx: f64) -> Self {
        Self([1.0, -alpha, tx, 0.0, 1.0, 0.0])
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.0;
        (m[0] * x + m[1] * y + m[2], m[3] * x + m[4] * y + m[5])
    }

    pub fn determinant(&self) -> f64 {
        self.0[0] * self.0[4] - self.0[1] * self.0[3]
    }

    pub fn inverse(&self) -> Result<AffineMatrix, ImageError> {
        let det = self.determinant();
        if det.abs() < 1e-12 || !det.is_finite() {
            return Err(ImageError::DegenerateTransform);
        }
        let [a, b, c, d, e, f] = self.0;
        let ia = e / det;
        let ib = -b / det;
        let id = -d / det;
        let ie = a / det;
        Ok(AffineMatrix([
            ia,
            ib,
            -(ia * c + ib * f),
            id,
            ie,
            -(id * c + ie * f),
        ]))
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &AffineMatrix) -> AffineMatrix {
        let [a, b, c, d, e, f] = self.0;
        let [g, h, i, j, k, l] = other.0;
        AffineMatrix([
            a * g + b * j,
            a * h + b * k,
            a * i + b * l + c,
            d * g + e * j,
            d * h + e * k,
            d * i + e * l + f,
        ])
    }
}

/// Loads a PNG as grayscale. RGB(A) inputs are reduced by averaging the three channels.
pub fn load_png(path: impl AsRef<Path>) -> Result<GrayImage, ImageError> {
    use image::DynamicImage;

    let path = path.as_ref();
    if !path.exists() {
        return Err(ImageError::Missing(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| ImageError::Corrupt {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(
        |e| match e {
            image::ImageError::Unsupported(u) => ImageError::UnsupportedDepth {
                path: path.to_path_buf(),
                kind: u.to_string(),
            },
            other => ImageError::Corrupt {
                path: path.to_path_buf(),
                reason: other.to_string(),
            },
        },
    )?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let pixels: Vec<f64> = match decoded {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        DynamicImage::ImageLumaA8(b) => b.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
        DynamicImage::ImageLuma16(b) => b
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 65535.0)
            .collect(),
        DynamicImage::ImageLumaA16(b) => b.pixels().map(|p| p.0[0] as f64 / 65535.0).collect(),
        DynamicImage::ImageRgb8(b) => b
            .pixels()
            .map(|p| (p.0[0] as f64 + p.0[1] as f64 + p.0[2] as f64) / (3.0 * 255.0))
            .collect(),
        DynamicImage::ImageRgba8(b) => b
            .pixels()
            .map(|p| (p.0[0] as f64 + p.0[1] as f64 + p.0[2] as f64) / (3.0 * 255.0))
            .collect(),
        DynamicImage::ImageRgb16(b) => b
            .pixels()
            .map(|p| (p.0[0] as f64 + p.0[1] as f64 + p.0[2] as f64) / (3.0 * 65535.0))
            .collect(),
        DynamicImage::ImageRgba16(b) => b
            .pixels()
            .map(|p| (p.0[0] as f64 + p.0[1] as f64 + p.0[2] as f64) / (3.0 * 65535.0))
            .collect(),
        other => {
            return Err(ImageError::UnsupportedDepth {
                path: path.to_path_buf(),
                kind: format!("{:?}", other.color()),
            })
        }
    };
    GrayImage::from_pixels(w, h, pixels)
}

/// Encodes the image as 8-bit grayscale PNG bytes, storing `round(i * 255)`.
pub fn encode_png(img: &GrayImage) -> Result<Vec<u8>, ImageError> {
    let raw = quantize(img);
    let buf = image::GrayImage::from_raw(img.width as u32, img.height as u32, raw).ok_or(
        ImageError::InvalidDims {
            width: img.width,
            height: img.height,
        },
    )?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| ImageError::Write {
            path: PathBuf::from("<memory>"),
            reason: e.to_string(),
        })?;
    Ok(out.into_inner())
}

pub fn save_png(img: &GrayImage, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    let bytes = encode_png(img)?;
    std::fs::write(path, bytes).map_err(|e| ImageError::Write {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// 8-bit quantization used by [`save_png`].
pub fn quantize(img: &GrayImage) -> Vec<u8> {
    img.pixels
        .iter()
        .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

pub fn invert(img: &GrayImage) -> GrayImage {
    GrayImage {
        width: img.width,
        height: img.height,
        pixels: img.pixels.iter().map(|p| 1.0 - p).collect(),
    }
}

/// Destination-scan resampling: each output pixel `(x, y)` reads the source at `inverse(x, y)`.
pub fn warp_with(
    img: &GrayImage,
    out_w: usize,
    out_h: usize,
    fill: f64,
    inverse: impl Fn(f64, f64) -> (f64, f64),
) -> Result<GrayImage, ImageError> {
    if out_w == 0 || out_h == 0 {
        return Err(ImageError::InvalidDims {
            width: out_w,
            height: out_h,
        });
    }
    let mut pixels = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        for x in 0..out_w {
            let (sx, sy) = inverse(x as f64, y as f64);
            pixels.push(img.sample_bilinear(sx, sy, fill).clamp(0.0, 1.0));
        }
    }
    Ok(GrayImage {
        width: out_w,
        height: out_h,
        pixels,
    })
}

pub fn affine_warp(
    img: &GrayImage,
    m: &AffineMatrix,
    out_w: usize,
    out_h: usize,
    fill: f64,
) -> Result<GrayImage, ImageError> {
    let inv = m.inverse()?;
    warp_with(img, out_w, out_h, fill, |x, y| inv.apply(x, y))
}

/// Bilinear resize with half-pixel centres and edge replication.
///
/// With `target_w = None` the aspect ratio is kept: `width = round(w * target_h / h)`.
pub fn resize(
    img: &GrayImage,
    target_h: usize,
    target_w: Option<usize>,
) -> Result<GrayImage, ImageError> {
    if img.width == 0 || img.height == 0 {
        return Err(ImageError::ZeroArea);
    }
    if target_h == 0 || target_w == Some(0) {
        return Err(ImageError::InvalidDims {
            width: target_w.unwrap_or(0),
            height: target_h,
        });
    }
    let target_w = target_w.unwrap_or_else(|| {
        ((img.width as f64 * target_h as f64 / img.height as f64).round() as usize).max(1)
    });
    if target_w == img.width && target_h == img.height {
        return Ok(img.clone());
    }
    let sx = img.width as f64 / target_w as f64;
    let sy = img.height as f64 / target_h as f64;
    let max_x = (img.width - 1) as f64;
    let max_y = (img.height - 1) as f64;
    let mut pixels = Vec::with_capacity(target_w * target_h);
    for y in 0..target_h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
        for x in 0..target_w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
            pixels.push(img.sample_bilinear(fx, fy, 0.0).clamp(0.0, 1.0));
        }
    }
    // clamped coordinates give the out-of-range neighbour zero weight
    Ok(GrayImage {
        width: target_w,
        height: target_h,
        pixels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Extremum {
    Bottom,
    Top,
}

/// Lowest (or highest) ink pixel of every column that contains ink.
///
/// Ink means an intensity strictly below `fg_threshold` (ink-is-dark convention).
pub fn column_extrema(img: &GrayImage, fg_threshold: f64, which: Extremum) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for x in 0..img.width {
        let hit = match which {
            Extremum::Top => (0..img.height).find(|&y| img.get(x, y) < fg_threshold),
            Extremum::Bottom => (0..img.height)
                .rev()
                .find(|&y| img.get(x, y) < fg_threshold),
        };
        if let Some(y) = hit {
            out.push((x, y));
        }
    }
    out
}

/// Inclusive range of columns holding ink, or `None` for a blank image.
pub fn ink_column_range(img: &GrayImage, fg_threshold: f64) -> Option<(usize, usize)> {
    let has_ink = |x: usize| (0..img.height).any(|y| img.get(x, y) < fg_threshold);
    let first = (0..img.width).find(|&x| has_ink(x))?;
    let last = (0..img.width).rev().find(|&x| has_ink(x))?;
    Some((first, last))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| ((x * 7 + y * 13) % 17) as f64 / 16.0)
    }

    #[test]
    fn invert_is_an_involution() {
        let img = ramp(9, 7);
        assert_eq!(invert(&invert(&img)).pixels(), img.pixels());
        let zero = GrayImage::filled(3, 3, 0.0);
        assert!(invert(&zero).pixels().iter().all(|&p| p == 1.0));
        let p = GrayImage::filled(1, 1, 0.3);
        assert!((invert(&p).get(0, 0) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn identity_warp_preserves_pixels() {
        let img = ramp(12, 10);
        let out = affine_warp(&img, &AffineMatrix::IDENTITY, 12, 10, 1.0).unwrap();
        assert!(out.max_abs_diff(&img).unwrap() < 1e-6);
    }

    #[test]
    fn translation_moves_a_bright_pixel() {
        let mut img = GrayImage::filled(10, 5, 0.0);
        img.set(2, 2, 1.0);
        let out = affine_warp(&img, &AffineMatrix::translation(3.0, 0.0), 10, 5, 0.0).unwrap();
        assert!((out.get(5, 2) - 1.0).abs() < 1e-12);
        assert!(out.get(2, 2).abs() < 1e-12);
    }

    #[test]
    fn singular_matrix_is_rejected() {
        let img = ramp(4, 4);
        let m = AffineMatrix::new(1.0, 2.0, 0.0, 2.0, 4.0, 0.0);
        assert!(matches!(
            affine_warp(&img, &m, 4, 4, 1.0),
            Err(ImageError::DegenerateTransform)
        ));
    }

    #[test]
    fn shear_round_trip_is_close_away_from_borders() {
        // Smooth content so that two bilinear passes stay within tolerance.
        let img = GrayImage::from_fn(60, 30, |x, y| {
            0.5 + 0.4 * ((x as f64 / 6.0).sin() * (y as f64 / 5.0).cos())
        });
        let alpha = 0.3;
        let fwd = affine_warp(&img, &AffineMatrix::shear_x(alpha, 0.0), 60, 30, 1.0).unwrap();
        let back = affine_warp(&fwd, &AffineMatrix::shear_x(-alpha, 0.0), 60, 30, 1.0).unwrap();
        for y in 2..28 {
            for x in 12..48 {
                assert!((back.get(x, y) - img.get(x, y)).abs() <= 0.05, "({x},{y})");
            }
        }
    }

    #[test]
    fn resize_keeps_aspect() {
        let img = GrayImage::blank(50, 100);
        let out = resize(&img, 48, None).unwrap();
        assert_eq!((out.width(), out.height()), (24, 48));
    }

    #[test]
    fn resize_to_own_size_and_constants() {
        let img = ramp(13, 11);
        assert!(
            resize(&img, 11, Some(13))
                .unwrap()
                .max_abs_diff(&img)
                .unwrap()
                < 1e-6
        );
        let c = GrayImage::filled(17, 9, 0.37);
        let out = resize(&c, 23, Some(5)).unwrap();
        assert!(out.pixels().iter().all(|&p| p == 0.37));
    }

    #[test]
    fn resize_rejects_zero_area() {
        let img = GrayImage::blank(0, 5);
        assert!(matches!(resize(&img, 4, None), Err(ImageError::ZeroArea)));
    }

    #[test]
    fn column_extrema_cases() {
        assert!(column_extrema(&GrayImage::blank(8, 8), 0.5, Extremum::Bottom).is_empty());

        let mut line = GrayImage::blank(6, 20);
        for x in 0..6 {
            line.set(x, 10, 0.0);
        }
        for which in [Extremum::Bottom, Extremum::Top] {
            let pts = column_extrema(&line, 0.5, which);
            assert_eq!(pts.len(), 6);
            assert!(pts.iter().all(|&(_, y)| y == 10));
        }

        let mut two = GrayImage::blank(4, 20);
        for x in 0..4 {
            two.set(x, 5, 0.0);
            two.set(x, 12, 0.0);
        }
        assert!(column_extrema(&two, 0.5, Extremum::Bottom)
            .iter()
            .all(|&(_, y)| y == 12));
        assert!(column_extrema(&two, 0.5, Extremum::Top)
            .iter()
            .all(|&(_, y)| y == 5));
    }

    #[test]
    fn png_byte_mapping() {
        let img = GrayImage::from_pixels(3, 1, vec![0.5, 0.0, 1.0]).unwrap();
        assert_eq!(quantize(&img), vec![128, 0, 255]);
    }

    #[test]
    fn png_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let white = GrayImage::blank(2, 2);
        save_png(&white, &p).unwrap();
        assert!(load_png(&p).unwrap().pixels().iter().all(|&v| v == 1.0));

        let img = ramp(7, 5);
        save_png(&img, &p).unwrap();
        let back = load_png(&p).unwrap();
        assert_eq!(quantize(&back), quantize(&img));
        let again = dir.path().join("b.png");
        save_png(&back, &again).unwrap();
        assert_eq!(load_png(&again).unwrap(), back);

        assert!(matches!(
            load_png(dir.path().join("none.png")),
            Err(ImageError::Missing(_))
        ));
        let bad = dir.path().join("bad.png");
        std::fs::write(&bad, b"not a png at all").unwrap();
        assert!(matches!(load_png(&bad), Err(ImageError::Corrupt { .. })));
        assert!(save_png(&img, dir.path().join("no/such/dir/x.png")).is_err());
    }

    #[test]
    fn rgb_is_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgb.png");
        let buf = image::RgbImage::from_raw(1, 1, vec![255, 0, 0]).unwrap();
        buf.save(&p).unwrap();
        let g = load_png(&p).unwrap();
        assert!((g.get(0, 0) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn sixteen_bit_png_scales() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g16.png");
        let buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(2, 1, vec![0, 65535])
            .unwrap();
        buf.save(&p).unwrap();
        let g = load_png(&p).unwrap();
        assert_eq!(g.pixels(), &[0.0, 1.0]);
    }

    #[test]
    fn affine_inverse_composes_to_identity() {
        let m = AffineMatrix::new(1.2, -0.3, 4.0, 0.1, 0.9, -2.0);
        let id = m.compose(&m.inverse().unwrap());
        for (a, b) in id.0.iter().zip(AffineMatrix::IDENTITY.0.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
