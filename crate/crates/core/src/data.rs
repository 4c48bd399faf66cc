//! Manifests, character sets, target encoding, and the synthetic glyph-word
//! generator.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{
    affine_warp, load_png, resize, save_png, AffineMatrix, GrayImage, ImageError, BACKGROUND,
};
use crate::seq2seq::{CharVocab, END, GO};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}:{line}: {reason}")]
    Malformed {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("{path}:{line}: duplicate image path {image}")]
    DuplicatePath {
        path: String,
        line: usize,
        image: String,
    },
    #[error("characters outside the charset: {}", .0.iter().map(|c| format!("{c:?}")).collect::<Vec<_>>().join(", "))]
    OutOfCharset(Vec<char>),
    #[error("no glyph for character {0:?}")]
    MissingGlyph(char),
    #[error("field contains a tab or newline: {0:?}")]
    BadField(String),
    #[error("invalid hex filename {0:?}")]
    BadHexName(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Validation,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Validation, Partition::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Validation => "validation",
            Partition::Test => "test",
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Partition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Partition::Train),
            "validation" | "val" => Ok(Partition::Validation),
            "test" => Ok(Partition::Test),
            other => Err(format!("unknown partition {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub transcription: String,
    pub partition: Partition,
    pub ok: bool,
}

pub const MANIFEST_HEADER: &str = "path\ttranscription\tpartition\tok";

fn parse_ok(s: &str) -> Option<bool> {
    match s {
        "ok" | "1" | "true" => Some(true),
        "err" | "0" | "false" => Some(false),
        _ => None,
    }
}

/// Parses manifest text; `origin` names the source in error messages.
pub fn parse_manifest(text: &str, origin: &str) -> Result<Vec<ManifestEntry>, DataError> {
    let mut lines = text.split('\n').enumerate();
    let malformed = |line: usize, reason: String| DataError::Malformed {
        path: origin.to_string(),
        line,
        reason,
    };
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r') == MANIFEST_HEADER => {}
        _ => return Err(malformed(1, format!("expected header {MANIFEST_HEADER:?}"))),
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, raw) in lines {
        let line_no = i + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(malformed(
                line_no,
                format!("expected 4 tab-separated columns, found {}", cols.len()),
            ));
        }
        if cols[0].is_empty() {
            return Err(malformed(line_no, "empty image path".into()));
        }
        let partition = cols[2].parse().map_err(|e| malformed(line_no, e))?;
        let ok = parse_ok(cols[3])
            .ok_or_else(|| malformed(line_no, format!("bad ok flag {:?}", cols[3])))?;
        if !seen.insert(cols[0].to_string()) {
            return Err(DataError::DuplicatePath {
                path: origin.to_string(),
                line: line_no,
                image: cols[0].to_string(),
            });
        }
        out.push(ManifestEntry {
            path: cols[0].to_string(),
            transcription: cols[1].to_string(),
            partition,
            ok,
        });
    }
    Ok(out)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_manifest(&text, &path.display().to_string())
}

pub fn format_manifest(entries: &[ManifestEntry]) -> Result<String, DataError> {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for e in entries {
        for f in [&e.path, &e.transcription] {
            if f.contains(['\t', '\n', '\r']) {
                return Err(DataError::BadField(f.clone()));
            }
        }
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            e.path,
            e.transcription,
            e.partition,
            if e.ok { "ok" } else { "err" }
        ));
    }
    Ok(out)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<(), DataError> {
    let path = path.as_ref();
    fs::write(path, format_manifest(entries)?).map_err(io_err(path))
}

/// Drops entries flagged as badly segmented and those transcribed as `#`.
pub fn filter_iam_style(entries: Vec<ManifestEntry>) -> Vec<ManifestEntry> {
    entries
        .into_iter()
        .filter(|e| e.ok && e.transcription != "#")
        .collect()
}

/// A loaded word image with its transcription.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: GrayImage,
    pub text: String,
}

/// Loads the images of one partition; manifest paths are relative to `base`.
pub fn load_samples(
    entries: &[ManifestEntry],
    base: &Path,
    partition: Partition,
) -> Result<Vec<Sample>, DataError> {
    entries
        .iter()
        .filter(|e| e.partition == partition)
        .map(|e| {
            Ok(Sample {
                id: e.path.clone(),
                image: load_png(base.join(&e.path))?,
                text: e.transcription.clone(),
            })
        })
        .collect()
}

/// Ordered set of unique characters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Charset {
    chars: Vec<char>,
}

impl Charset {
    /// Keeps the first occurrence of each character.
    pub fn declared(chars: impl IntoIterator<Item = char>) -> Self {
        let mut seen = HashSet::new();
        Self {
            chars: chars.into_iter().filter(|c| seen.insert(*c)).collect(),
        }
    }

    /// Sorted characters of all transcriptions.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v: Vec<char> = texts.into_iter().flat_map(str::chars).collect();
        v.sort_unstable();
        v.dedup();
        Self { chars: v }
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn vocab(&self) -> CharVocab {
        CharVocab::new(self.chars.iter().copied()).expect("charset characters are unique")
    }
}

/// `[GO, c₁ … c_k, END]` token indices (characters start at index 3).
pub fn encode_transcript(s: &str, charset: &Charset) -> Result<Vec<usize>, DataError> {
    let vocab = charset.vocab();
    let mut bad: Vec<char> = s.chars().filter(|&c| vocab.index_of(c).is_none()).collect();
    if !bad.is_empty() {
        bad.dedup();
        return Err(DataError::OutOfCharset(bad));
    }
    let mut out = vec![GO];
    out.extend(s.chars().map(|c| vocab.index_of(c).expect("checked")));
    out.push(END);
    Ok(out)
}

/// Inverse of [`encode_transcript`].
pub fn decode_transcript(tokens: &[usize], charset: &Charset) -> String {
    let vocab = charset.vocab();
    let body = if tokens.first() == Some(&GO) {
        &tokens[1..]
    } else {
        tokens
    };
    vocab.decode(body)
}

/// Decodes a transcription stored as hexadecimal UTF-8 bytes in a file
/// name stem, e.g. `48656c6c6f.png` or `48656c6c6f_3.png` → `Hello`.
pub fn decode_hex_filename(name: &str) -> Result<String, DataError> {
    let base = Path::new(name)
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or(name);
    let stem = base.split(['.', '_']).next().unwrap_or("");
    if stem.is_empty() || !stem.len().is_multiple_of(2) {
        return Err(DataError::BadHexName(name.to_string()));
    }
    let bytes = (0..stem.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&stem[i..i + 2], 16))
        .collect::<Result<Vec<u8>, _>>()
        .map_err(|_| DataError::BadHexName(name.to_string()))?;
    String::from_utf8(bytes).map_err(|_| DataError::BadHexName(name.to_string()))
}

/// Vertical extent class of a character.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VClass {
    Ascender,
    Descender,
    Core,
}

impl VClass {
    pub fn of(c: char) -> VClass {
        match c {
            'b' | 'd' | 'f' | 'h' | 'k' | 'l' | 't' => VClass::Ascender,
            'g' | 'j' | 'p' | 'q' | 'y' => VClass::Descender,
            c if c.is_ascii_uppercase() || c.is_ascii_digit() => VClass::Ascender,
            _ => VClass::Core,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            VClass::Ascender => "ascender",
            VClass::Descender => "descender",
            VClass::Core => "core",
        }
    }
}

impl FromStr for VClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ascender" => Ok(VClass::Ascender),
            "descender" => Ok(VClass::Descender),
            "core" => Ok(VClass::Core),
            other => Err(format!("unknown vertical class {other:?}")),
        }
    }
}

/// Character exemplars with their vertical classes.
#[derive(Debug, Clone, Default)]
pub struct GlyphSet {
    glyphs: BTreeMap<char, Vec<GrayImage>>,
    classes: BTreeMap<char, VClass>,
}

/// Characters of the built-in procedural glyph set.
pub const BUILTIN_CHARS: &str = "abcdefghijklmnopqrstuvwxyz0123456789AEHT";

/// Height of built-in glyph cells and the rows of their guide lines.
pub const GLYPH_HEIGHT: usize = 32;
const Y_ASC: f64 = 4.0;
const Y_X: f64 = 12.0;
const Y_MID: f64 = 17.0;
const Y_BASE: f64 = 22.0;
const Y_DESC: f64 = 30.0;

type Stroke = Vec<(f64, f64)>;

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64, from: f64, to: f64) -> Stroke {
    let steps = 24;
    (0..=steps)
        .map(|i| {
            let t = (from + (to - from) * i as f64 / steps as f64).to_radians();
            (cx + rx * t.cos(), cy - ry * t.sin())
        })
        .collect()
}

fn line(pts: &[(f64, f64)]) -> Stroke {
    pts.to_vec()
}

fn dot(x: f64, y: f64) -> Stroke {
    vec![(x, y - 0.6), (x, y + 0.6)]
}

/// Stroke skeleton (x in `[0, 1]`, y in cell rows) and nominal width in pixels.
fn skeleton(c: char) -> Option<(Vec<Stroke>, f64)> {
    let (a, x, m, b, d) = (Y_ASC, Y_X, Y_MID, Y_BASE, Y_DESC);
    let bowl = |cx: f64| ellipse(cx, m, 0.36, 5.0, 0.0, 360.0);
    let s = match c {
        'a' => (vec![bowl(0.45), line(&[(0.82, x), (0.82, b)])], 11.0),
        'b' => (vec![line(&[(0.16, a), (0.16, b)]), bowl(0.54)], 11.0),
        'c' => (vec![ellipse(0.55, m, 0.4, 5.0, 45.0, 315.0)], 10.0),
        'd' => (vec![bowl(0.46), line(&[(0.84, a), (0.84, b)])], 11.0),
        'e' => (
            vec![
                line(&[(0.14, m), (0.88, m)]),
                ellipse(0.5, m, 0.38, 5.0, 0.0, 320.0),
            ],
            10.0,
        ),
        'f' => (
            vec![
                line(&[(0.85, a + 1.0), (0.62, a), (0.42, a + 2.0), (0.42, b)]),
                line(&[(0.12, x), (0.78, x)]),
            ],
            8.0,
        ),
        'g' => (
            vec![
                bowl(0.45),
                line(&[(0.82, x), (0.82, d - 3.0), (0.58, d), (0.2, d - 2.0)]),
            ],
            11.0,
        ),
        'h' => (
            vec![
                line(&[(0.16, a), (0.16, b)]),
                line(&[(0.16, m), (0.42, x), (0.74, x + 1.0), (0.84, m), (0.84, b)]),
            ],
            11.0,
        ),
        'i' => (vec![line(&[(0.5, x), (0.5, b)]), dot(0.5, x - 4.0)], 5.0),
        'j' => (
            vec![
                line(&[(0.62, x), (0.62, d - 2.0), (0.4, d), (0.12, d - 2.0)]),
                dot(0.62, x - 4.0),
            ],
            6.0,
        ),
        'k' => (
            vec![
                line(&[(0.16, a), (0.16, b)]),
                line(&[(0.84, x), (0.16, m + 1.0)]),
                line(&[(0.42, m), (0.86, b)]),
            ],
            10.0,
        ),
        'l' => (vec![line(&[(0.5, a), (0.5, b)])], 5.0),
        'm' => (
            vec![
                line(&[(0.1, x), (0.1, b)]),
                line(&[(0.1, m - 2.0), (0.3, x), (0.5, x + 2.0), (0.5, b)]),
                line(&[(0.5, m - 2.0), (0.7, x), (0.9, x + 2.0), (0.9, b)]),
            ],
            15.0,
        ),
        'n' => (
            vec![
                line(&[(0.16, x), (0.16, b)]),
                line(&[
                    (0.16, m - 1.0),
                    (0.45, x),
                    (0.78, x + 1.0),
                    (0.84, m),
                    (0.84, b),
                ]),
            ],
            11.0,
        ),
        'o' => (vec![ellipse(0.5, m, 0.38, 5.0, 0.0, 360.0)], 10.0),
        'p' => (vec![line(&[(0.16, x), (0.16, d)]), bowl(0.54)], 11.0),
        'q' => (vec![bowl(0.46), line(&[(0.84, x), (0.84, d)])], 11.0),
        'r' => (
            vec![
                line(&[(0.2, x), (0.2, b)]),
                line(&[(0.2, m - 1.0), (0.5, x), (0.86, x + 1.0)]),
            ],
            8.0,
        ),
        's' => (
            vec![line(&[
                (0.85, x + 1.0),
                (0.5, x),
                (0.15, x + 2.0),
                (0.3, m - 1.0),
                (0.7, m + 1.0),
                (0.85, b - 2.0),
                (0.5, b),
                (0.15, b - 1.0),
            ])],
            9.0,
        ),
        't' => (
            vec![
                line(&[(0.45, a + 3.0), (0.45, b - 2.0), (0.56, b), (0.82, b - 1.0)]),
                line(&[(0.14, x), (0.8, x)]),
            ],
            8.0,
        ),
        'u' => (
            vec![
                line(&[
                    (0.16, x),
                    (0.16, b - 3.0),
                    (0.4, b),
                    (0.74, b - 1.0),
                    (0.84, m),
                ]),
                line(&[(0.84, x), (0.84, b)]),
            ],
            11.0,
        ),
        'v' => (vec![line(&[(0.1, x), (0.5, b), (0.9, x)])], 10.0),
        'w' => (
            vec![line(&[
                (0.05, x),
                (0.28, b),
                (0.5, m - 1.0),
                (0.72, b),
                (0.95, x),
            ])],
            15.0,
        ),
        'x' => (
            vec![line(&[(0.12, x), (0.88, b)]), line(&[(0.88, x), (0.12, b)])],
            10.0,
        ),
        'y' => (
            vec![
                line(&[(0.1, x), (0.5, b)]),
                line(&[(0.9, x), (0.5, b), (0.28, d)]),
            ],
            10.0,
        ),
        'z' => (
            vec![line(&[(0.12, x), (0.88, x), (0.12, b), (0.88, b)])],
            10.0,
        ),
        '0' => (
            vec![ellipse(0.5, (a + b) / 2.0, 0.38, 9.0, 0.0, 360.0)],
            11.0,
        ),
        '1' => (vec![line(&[(0.28, a + 3.0), (0.56, a), (0.56, b)])], 8.0),
        '2' => (
            vec![line(&[
                (0.15, a + 3.0),
                (0.4, a),
                (0.75, a + 0.5),
                (0.85, a + 4.0),
                (0.12, b),
                (0.9, b),
            ])],
            11.0,
        ),
        '3' => (
            vec![line(&[
                (0.15, a + 1.0),
                (0.6, a),
                (0.85, a + 3.5),
                (0.45, 13.0),
                (0.85, 16.5),
                (0.65, b),
                (0.15, b - 1.0),
            ])],
            11.0,
        ),
        '4' => (
            vec![line(&[(0.7, b), (0.7, a), (0.1, 16.0), (0.9, 16.0)])],
            11.0,
        ),
        '5' => (
            vec![line(&[
                (0.85, a),
                (0.22, a),
                (0.16, 12.0),
                (0.6, 11.0),
                (0.88, 15.0),
                (0.7, b),
                (0.15, b - 1.0),
            ])],
            11.0,
        ),
        '6' => (
            vec![
                line(&[(0.75, a), (0.3, 9.0), (0.15, 17.0)]),
                ellipse(0.5, 17.5, 0.35, 4.5, 0.0, 360.0),
            ],
            11.0,
        ),
        '7' => (vec![line(&[(0.1, a), (0.9, a), (0.35, b)])], 11.0),
        '8' => (
            vec![
                ellipse(0.5, 8.5, 0.32, 4.5, 0.0, 360.0),
                ellipse(0.5, 17.5, 0.38, 4.5, 0.0, 360.0),
            ],
            11.0,
        ),
        '9' => (
            vec![
                ellipse(0.5, 8.5, 0.35, 4.5, 0.0, 360.0),
                line(&[(0.85, 8.5), (0.75, b)]),
            ],
            11.0,
        ),
        'A' => (
            vec![
                line(&[(0.05, b), (0.5, a), (0.95, b)]),
                line(&[(0.26, 15.0), (0.74, 15.0)]),
            ],
            13.0,
        ),
        'E' => (
            vec![
                line(&[(0.85, a), (0.15, a), (0.15, b), (0.85, b)]),
                line(&[(0.15, 13.0), (0.7, 13.0)]),
            ],
            11.0,
        ),
        'H' => (
            vec![
                line(&[(0.15, a), (0.15, b)]),
                line(&[(0.85, a), (0.85, b)]),
                line(&[(0.15, 13.0), (0.85, 13.0)]),
            ],
            13.0,
        ),
        'T' => (
            vec![line(&[(0.05, a), (0.95, a)]), line(&[(0.5, a), (0.5, b)])],
            12.0,
        ),
        _ => return None,
    };
    Some(s)
}

/// Squared distance from `p` to segment `ab`.
fn seg_dist2(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    qx * qx + qy * qy
}

/// Draws anti-aliased polylines of the given thickness as dark ink.
fn render_strokes(strokes: &[Stroke], width: usize, height: usize, thickness: f64) -> GrayImage {
    let half = thickness / 2.0;
    GrayImage::from_fn(width, height, |x, y| {
        let p = (x as f64 + 0.5, y as f64 + 0.5);
        let mut best = f64::INFINITY;
        for s in strokes {
            for w in s.windows(2) {
                best = best.min(seg_dist2(p, w[0], w[1]));
            }
        }
        let dist = best.sqrt();
        // one-pixel linear ramp at the stroke edge
        let ink = (half + 0.5 - dist).clamp(0.0, 1.0);
        1.0 - ink
    })
}

/// Renders one exemplar of a built-in character with seeded variation in
/// width, stroke thickness and control-point placement.
pub fn render_builtin_glyph<R: Rng + ?Sized>(c: char, rng: &mut R) -> Option<GrayImage> {
    let (strokes, nominal) = skeleton(c)?;
    let width_px = (nominal * rng.random_range(0.9..1.1)).round().max(4.0);
    let thickness = rng.random_range(1.6..2.4);
    let margin = 1.5;
    let width = (width_px + 2.0 * margin).round() as usize;
    let span = width as f64 - 2.0 * margin;
    let mut jitter = || (rng.random_range(-0.04..0.04), rng.random_range(-0.5..0.5));
    let placed: Vec<Stroke> = strokes
        .iter()
        .map(|s| {
            s.iter()
                .map(|&(x, y)| {
                    let (jx, jy) = jitter();
                    (margin + (x + jx).clamp(0.0, 1.0) * span, y + jy)
                })
                .collect()
        })
        .collect();
    Some(render_strokes(&placed, width, GLYPH_HEIGHT, thickness))
}

impl GlyphSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// The procedural 40-character set with `exemplars` variants per character.
    pub fn builtin(exemplars: usize, seed: u64) -> Self {
        let mut set = Self::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for c in BUILTIN_CHARS.chars() {
            for _ in 0..exemplars.max(1) {
                let g = render_builtin_glyph(c, &mut rng).expect("built-in character");
                set.add(c, g);
            }
            set.classes.insert(c, VClass::of(c));
        }
        set
    }

    pub fn add(&mut self, c: char, img: GrayImage) {
        self.glyphs.entry(c).or_default().push(img);
        self.classes.entry(c).or_insert_with(|| VClass::of(c));
    }

    pub fn set_class(&mut self, c: char, class: VClass) {
        self.classes.insert(c, class);
    }

    pub fn class_of(&self, c: char) -> VClass {
        self.classes
            .get(&c)
            .copied()
            .unwrap_or_else(|| VClass::of(c))
    }

    pub fn exemplars(&self, c: char) -> &[GrayImage] {
        self.glyphs.get(&c).map_or(&[], |v| v.as_slice())
    }

    pub fn chars(&self) -> impl Iterator<Item = char> + '_ {
        self.glyphs.keys().copied()
    }

    /// Smallest exemplar count over all characters.
    pub fn min_exemplars(&self) -> usize {
        self.glyphs.values().map(Vec::len).min().unwrap_or(0)
    }

    /// Loads `<dir>/<hex codepoint>/<n>.png` plus `<dir>/classes.tsv`
    /// (`hex<TAB>class` lines; characters without a line get the default class).
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, DataError> {
        let dir = dir.as_ref();
        let mut set = Self::new();
        let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        subdirs.sort();
        for sub in subdirs {
            let name = sub.file_name().and_then(|s| s.to_str()).unwrap_or("");
            let c = u32::from_str_radix(name, 16)
                .ok()
                .and_then(char::from_u32)
                .ok_or_else(|| {
                    DataError::Invalid(format!("glyph directory {name:?} is not a hex code point"))
                })?;
            let mut files: Vec<PathBuf> = fs::read_dir(&sub)
                .map_err(io_err(&sub))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "png"))
                .collect();
            files.sort_by_key(|p| {
                p.file_stem()
                    .and_then(|s| s.to_str())
                    .and_then(|s| s.parse::<u64>().ok())
                    .unwrap_or(u64::MAX)
            });
            for f in files {
                set.add(c, load_png(&f)?);
            }
        }
        let class_file = dir.join("classes.tsv");
        if class_file.exists() {
            let text = fs::read_to_string(&class_file).map_err(io_err(&class_file))?;
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let bad = |reason: String| DataError::Malformed {
                    path: class_file.display().to_string(),
                    line: i + 1,
                    reason,
                };
                let (hex, class) = line
                    .split_once('\t')
                    .ok_or_else(|| bad("expected hex<TAB>class".into()))?;
                let c = u32::from_str_radix(hex, 16)
                    .ok()
                    .and_then(char::from_u32)
                    .ok_or_else(|| bad(format!("bad code point {hex:?}")))?;
                set.set_class(c, class.parse().map_err(bad)?);
            }
        }
        Ok(set)
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<(), DataError> {
        let dir = dir.as_ref();
        let mut classes = String::new();
        for (c, imgs) in &self.glyphs {
            let sub = dir.join(format!("{:04x}", *c as u32));
            fs::create_dir_all(&sub).map_err(io_err(&sub))?;
            for (i, img) in imgs.iter().enumerate() {
                save_png(img, sub.join(format!("{i}.png")))?;
            }
            classes.push_str(&format!(
                "{:04x}\t{}\n",
                *c as u32,
                self.class_of(*c).as_str()
            ));
        }
        let f = dir.join("classes.tsv");
        fs::write(&f, classes).map_err(io_err(&f))
    }

    /// COUT-style expansion: `factor` transformed variants per exemplar.
    pub fn cout_augmented<R: Rng + ?Sized>(&self, factor: usize, rng: &mut R) -> GlyphSet {
        let mut out = GlyphSet::new();
        let donors: Vec<GrayImage> = self.glyphs.values().flatten().cloned().collect();
        for (&c, imgs) in &self.glyphs {
            out.set_class(c, self.class_of(c));
            for img in imgs {
                for _ in 0..factor {
                    out.add(
                        c,
                        cout_transform_with(img, self.class_of(c), &donors, rng).image,
                    );
                }
            }
        }
        out
    }
}

/// Vertical placement slot of a shrunken character.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Up,
    Centered,
    Down,
}

impl Slot {
    pub fn allowed(class: VClass) -> &'static [Slot] {
        match class {
            VClass::Core => &[Slot::Up, Slot::Centered, Slot::Down],
            VClass::Descender => &[Slot::Centered, Slot::Down],
            VClass::Ascender => &[Slot::Up, Slot::Centered],
        }
    }
}

/// Output of [`cout_transform_with`] with its intermediate parts.
#[derive(Debug, Clone)]
pub struct CoutResult {
    pub image: GrayImage,
    /// The shrunken, placed character without artifacts.
    pub character: GrayImage,
    /// Pixels written by neighbour-stroke artifacts.
    pub artifact_pixels: Vec<(usize, usize)>,
    pub slot: Slot,
}

pub const COUT_SHRINK: f64 = 0.75;
pub const COUT_BORDER: usize = 3;

/// Shrinks a character image by 25%, places it up/centred/down as its class
/// allows, and pastes 3-pixel-wide border strokes of donor characters at the
/// left and/or right edge without touching the character's own ink.
pub fn cout_transform_with<R: Rng + ?Sized>(
    img: &GrayImage,
    class: VClass,
    donors: &[GrayImage],
    rng: &mut R,
) -> CoutResult {
    let (w, h) = (img.width(), img.height());
    let sw = ((w as f64 * COUT_SHRINK).round() as usize).max(1);
    let sh = ((h as f64 * COUT_SHRINK).round() as usize).max(1);
    let small = resize(img, sh, Some(sw)).unwrap_or_else(|_| GrayImage::blank(sw, sh));
    let slot = *Slot::allowed(class)
        .choose(rng)
        .expect("nonempty slot list");
    let y0 = match slot {
        Slot::Up => 0,
        Slot::Centered => (h - sh) / 2,
        Slot::Down => h - sh,
    };
    let x0 = (w - sw) / 2;
    let mut character = GrayImage::blank(w, h);
    for y in 0..sh {
        for x in 0..sw {
            character.set(x0 + x, y0 + y, small.get(x, y));
        }
    }
    let mut image = character.clone();
    let mut artifact_pixels = Vec::new();
    let donor_pool = if donors.is_empty() {
        std::slice::from_ref(img)
    } else {
        donors
    };
    let sides: &[bool] = match rng.random_range(0..3) {
        0 => &[true],
        1 => &[false],
        _ => &[true, false],
    };
    for &left in sides {
        let donor = donor_pool.choose(rng).expect("nonempty donors");
        let Some((first, last)) = crate::imaging::ink_column_range(donor, 0.5) else {
            continue;
        };
        // a left-side artifact is the right border of the preceding character
        let src_x0 = if left {
            (last + 1).saturating_sub(COUT_BORDER)
        } else {
            first
        };
        let dst_x0 = if left {
            0
        } else {
            w.saturating_sub(COUT_BORDER)
        };
        for dx in 0..COUT_BORDER.min(w) {
            for y in 0..h.min(donor.height()) {
                let v = donor.get_or((src_x0 + dx) as isize, y as isize, BACKGROUND);
                let (x, yy) = (dst_x0 + dx, y);
                if v < 0.5 && character.get(x, yy) >= 0.5 {
                    let cur = image.get(x, yy);
                    image.set(x, yy, cur.min(v));
                    artifact_pixels.push((x, yy));
                }
            }
        }
    }
    CoutResult {
        image,
        character,
        artifact_pixels,
        slot,
    }
}

/// [`cout_transform_with`] using the character itself as the donor.
pub fn cout_transform<R: Rng + ?Sized>(img: &GrayImage, class: VClass, rng: &mut R) -> GrayImage {
    cout_transform_with(img, class, &[], rng).image
}

/// Layout randomization for synthetic words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthStyle {
    /// Inclusive range of blank columns before, between and after glyphs.
    pub spacing: (usize, usize),
    /// Maximum vertical glyph offset in pixels (±).
    pub jitter: i32,
    /// Maximum absolute slant (shear tangent) applied to the word.
    pub slant: f64,
    /// Maximum absolute baseline slope in radians.
    pub slope: f64,
}

impl Default for SynthStyle {
    fn default() -> Self {
        Self {
            spacing: (1, 3),
            jitter: 1,
            slant: 0.0,
            slope: 0.0,
        }
    }
}

/// Word image plus layout details.
#[derive(Debug, Clone)]
pub struct SynthWord {
    pub image: GrayImage,
    pub text: String,
    pub glyph_widths: Vec<usize>,
    pub spacings: Vec<usize>,
    pub slant: f64,
    pub slope: f64,
}

/// Places one exemplar per character left to right on a shared baseline.
/// Before any slant/slope distortion the width is `Σ glyph widths + Σ spacings`
/// (k + 1 spacings for k characters).
pub fn synth_word_detailed<R: Rng + ?Sized>(
    glyphs: &GlyphSet,
    word: &str,
    rng: &mut R,
    style: &SynthStyle,
    exemplar_pool: Option<&[usize]>,
) -> Result<SynthWord, DataError> {
    let mut chosen = Vec::new();
    for c in word.chars() {
        let ex = glyphs.exemplars(c);
        if ex.is_empty() {
            return Err(DataError::MissingGlyph(c));
        }
        let idx = match exemplar_pool {
            Some(pool) => {
                let valid: Vec<usize> = pool.iter().copied().filter(|&i| i < ex.len()).collect();
                *valid.choose(rng).unwrap_or(&0)
            }
            None => rng.random_range(0..ex.len()),
        };
        chosen.push(&ex[idx]);
    }
    let (lo, hi) = (
        style.spacing.0.min(style.spacing.1),
        style.spacing.0.max(style.spacing.1),
    );
    let spacings: Vec<usize> = (0..=chosen.len())
        .map(|_| rng.random_range(lo..=hi))
        .collect();
    let glyph_widths: Vec<usize> = chosen.iter().map(|g| g.width()).collect();
    let height = chosen
        .iter()
        .map(|g| g.height())
        .max()
        .unwrap_or(GLYPH_HEIGHT);
    let width = (glyph_widths.iter().sum::<usize>() + spacings.iter().sum::<usize>()).max(1);
    let mut img = GrayImage::blank(width, height);
    let mut x = spacings[0];
    for (g, gap) in chosen.iter().zip(&spacings[1..]) {
        let dy = if style.jitter > 0 {
            rng.random_range(-style.jitter..=style.jitter)
        } else {
            0
        };
        for yy in 0..g.height() {
            let ty = yy as i64 + dy as i64;
            if ty < 0 || ty >= height as i64 {
                continue;
            }
            for xx in 0..g.width() {
                let cur = img.get(x + xx, ty as usize);
                img.set(x + xx, ty as usize, cur.min(g.get(xx, yy)));
            }
        }
        x += g.width() + gap;
    }
    let slant = if style.slant > 0.0 {
        rng.random_range(-style.slant..=style.slant)
    } else {
        0.0
    };
    let slope = if style.slope > 0.0 {
        rng.random_range(-style.slope..=style.slope)
    } else {
        0.0
    };
    if slant != 0.0 || slope != 0.0 {
        img = distort(&img, slant, slope)?;
    }
    Ok(SynthWord {
        image: img,
        text: word.to_string(),
        glyph_widths,
        spacings,
        slant,
        slope,
    })
}

/// Applies slant (strokes lean right for positive values, like `x' = x + α·(h − y)`)
/// and then baseline rotation, growing the canvas to keep all ink.
fn distort(img: &GrayImage, slant: f64, slope: f64) -> Result<GrayImage, DataError> {
    let (w, h) = (img.width() as f64, img.height() as f64);
    // x' = x − α·y + α·h keeps the bottom row fixed
    let shear = AffineMatrix::new(1.0, -slant, slant.max(0.0) * h, 0.0, 1.0, 0.0);
    let sw = w + slant.abs() * h;
    let rot = AffineMatrix::rotation_about(slope, sw / 2.0, h / 2.0);
    let m = rot.compose(&shear);
    let corners = [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)].map(|(x, y)| m.apply(x, y));
    let min_x = corners.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
    let max_x = corners
        .iter()
        .map(|c| c.0)
        .fold(f64::NEG_INFINITY, f64::max);
    let min_y = corners.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let max_y = corners
        .iter()
        .map(|c| c.1)
        .fold(f64::NEG_INFINITY, f64::max);
    let m = AffineMatrix::translation(-min_x, -min_y).compose(&m);
    let ow = (max_x - min_x).ceil().max(1.0) as usize;
    let oh = (max_y - min_y).ceil().max(1.0) as usize;
    Ok(affine_warp(img, &m, ow, oh, BACKGROUND)?)
}

pub fn synth_word<R: Rng + ?Sized>(
    glyphs: &GlyphSet,
    word: &str,
    rng: &mut R,
    style: &SynthStyle,
) -> Result<(GrayImage, String), DataError> {
    let w = synth_word_detailed(glyphs, word, rng, style, None)?;
    Ok((w.image, w.text))
}

/// Seed for sample `index` of `partition`, independent of generation order.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Which exemplar indices a partition may draw from. With at least three
/// exemplars per character the partitions are disjoint: the last exemplar is
/// reserved for test and the one before it for validation.
pub fn exemplar_pool(partition: Partition, exemplars: usize) -> Vec<usize> {
    if exemplars < 3 {
        return (0..exemplars).collect();
    }
    match partition {
        Partition::Train => (0..exemplars - 2).collect(),
        Partition::Validation => vec![exemplars - 2],
        Partition::Test => vec![exemplars - 1],
    }
}

/// Generated words of one partition, in memory.
pub fn synth_samples(
    glyphs: &GlyphSet,
    words: &[String],
    partition: Partition,
    count: usize,
    seed: u64,
    style: &SynthStyle,
) -> Result<Vec<Sample>, DataError> {
    if words.is_empty() && count > 0 {
        return Err(DataError::Invalid("word list is empty".into()));
    }
    let pool = exemplar_pool(partition, glyphs.min_exemplars());
    let stream = partition as u64 + 1;
    let mut pick = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, u64::MAX));
    (0..count)
        .map(|i| {
            let word = words[pick.random_range(0..words.len())].clone();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, i as u64));
            let w = synth_word_detailed(glyphs, &word, &mut rng, style, Some(&pool))?;
            Ok(Sample {
                id: format!("{}/{:05}.png", partition, i),
                image: w.image,
                text: w.text,
            })
        })
        .collect()
}

/// Writes `sizes = (train, validation, test)` synthetic word images under
/// `out_dir/<partition>/` and a `manifest.tsv` describing them.
pub fn generate_synth_dataset(
    glyphs: &GlyphSet,
    words: &[String],
    sizes: (usize, usize, usize),
    seed: u64,
    style: &SynthStyle,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<ManifestEntry>, DataError> {
    let out_dir = out_dir.as_ref();
    let mut entries = Vec::new();
    for (partition, count) in Partition::ALL.into_iter().zip([sizes.0, sizes.1, sizes.2]) {
        let dir = out_dir.join(partition.as_str());
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for s in synth_samples(glyphs, words, partition, count, seed, style)? {
            save_png(&s.image, out_dir.join(&s.id))?;
            entries.push(ManifestEntry {
                path: s.id,
                transcription: s.text,
                partition,
                ok: true,
            });
        }
    }
    write_manifest(out_dir.join("manifest.tsv"), &entries)?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_parse_errors_name_the_line() {
        let text = format!("{MANIFEST_HEADER}\na.png\tto\ttrain\tok\nb.png\tno\ttrain\n");
        match parse_manifest(&text, "m.tsv") {
            Err(DataError::Malformed { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let dup = format!("{MANIFEST_HEADER}\na.png\tto\ttrain\tok\na.png\tx\ttest\tok\n");
        assert!(matches!(
            parse_manifest(&dup, "m"),
            Err(DataError::DuplicatePath { line: 3, .. })
        ));
    }

    #[test]
    fn iam_filter() {
        let mk = |t: &str, ok| ManifestEntry {
            path: format!("{t}{ok}.png"),
            transcription: t.into(),
            partition: Partition::Train,
            ok,
        };
        let kept = filter_iam_style(vec![mk("a", true), mk("#", true), mk("b", false)]);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].transcription, "a");
    }

    #[test]
    fn transcript_encoding() {
        let cs = Charset::declared("to".chars());
        assert_eq!(encode_transcript("to", &cs).unwrap(), vec![GO, 3, 4, END]);
        assert_eq!(encode_transcript("", &cs).unwrap(), vec![GO, END]);
        match encode_transcript("tö", &cs) {
            Err(DataError::OutOfCharset(c)) => assert_eq!(c, vec!['ö']),
            other => panic!("{other:?}"),
        }
        assert_eq!(decode_transcript(&[GO, 3, 4, END], &cs), "to");
    }

    #[test]
    fn hex_names() {
        assert_eq!(decode_hex_filename("48656c6c6f.png").unwrap(), "Hello");
        assert_eq!(decode_hex_filename("dir/6f6b_2.png").unwrap(), "ok");
        assert!(decode_hex_filename("zz.png").is_err());
    }

    #[test]
    fn classes_follow_lists() {
        for c in "gjpqy".chars() {
            assert_eq!(VClass::of(c), VClass::Descender);
        }
        for c in "bdfhklt".chars() {
            assert_eq!(VClass::of(c), VClass::Ascender);
        }
        assert_eq!(VClass::of('a'), VClass::Core);
    }

    #[test]
    fn builtin_set_has_forty_inked_glyphs() {
        let g = GlyphSet::builtin(2, 7);
        assert_eq!(g.chars().count(), 40);
        for c in BUILTIN_CHARS.chars() {
            for ex in g.exemplars(c) {
                assert_eq!(ex.height(), GLYPH_HEIGHT);
                assert!(ex.ink_count(0.5) > 5, "{c}");
            }
        }
    }

    #[test]
    fn descender_glyphs_reach_below_baseline() {
        let g = GlyphSet::builtin(1, 1);
        let below = |c: char| {
            let img = &g.exemplars(c)[0];
            (Y_BASE as usize + 3..GLYPH_HEIGHT)
                .any(|y| (0..img.width()).any(|x| img.get(x, y) < 0.5))
        };
        assert!(below('g') && below('p'));
        assert!(!below('a') && !below('o'));
    }

    #[test]
    fn word_width_is_glyphs_plus_spacings() {
        let g = GlyphSet::builtin(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = synth_word_detailed(&g, "tea", &mut rng, &SynthStyle::default(), None).unwrap();
        assert_eq!(w.glyph_widths.len(), 3);
        assert_eq!(w.spacings.len(), 4);
        assert_eq!(
            w.image.width(),
            w.glyph_widths.iter().sum::<usize>() + w.spacings.iter().sum::<usize>()
        );
        assert_eq!(w.text, "tea");
        assert!(matches!(
            synth_word(&g, "t?", &mut rng, &SynthStyle::default()),
            Err(DataError::MissingGlyph('?'))
        ));
    }
}
