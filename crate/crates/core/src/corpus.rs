//! Grayscale images, PGM/PPM I/O, and the synthetic desk-scale corpus.
//!
//! Images are stored as 8-bit single-channel rasters. Color PPM input is
//! reduced to luma with BT.601 weights on load.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::num::Real;
use crate::seed;

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::format("image", "zero dimension"));
        }
        if pixels.len() != width * height {
            return Err(Error::dims(width * height, pixels.len()));
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                pixels.push(f(r, c));
            }
        }
        GrayImage {
            width,
            height,
            pixels,
        }
    }

    /// Rounds (half away from zero) and clamps real intensities to 8 bits.
    pub fn from_reals<F: Real>(width: usize, height: usize, values: &[F]) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::dims(width * height, values.len()));
        }
        let pixels = values.iter().map(|&v| quantize_intensity(v)).collect();
        GrayImage::new(width, height, pixels)
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: u8) {
        self.pixels[row * self.width + col] = v;
    }

    #[inline]
    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn to_reals<F: Real>(&self) -> Vec<F> {
        self.pixels
            .iter()
            .map(|&p| F::from_u8(p).expect("u8 fits"))
            .collect()
    }

    pub fn to_grid<F: Real>(&self) -> Grid<F> {
        Grid::from_vec(self.width, self.height, self.to_reals()).expect("shape matches")
    }

    pub fn transpose(&self) -> Self {
        GrayImage::from_fn(self.height, self.width, |r, c| self.get(c, r))
    }

    pub fn same_shape(&self, other: &GrayImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Encodes as binary PGM (P5, maxval 255).
    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Decodes a binary PGM (P5) or PPM (P6) with maxval 255.
    pub fn from_pnm_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = PnmCursor { bytes, pos: 0 };
        let magic = cur.token()?;
        let channels = match magic.as_str() {
            "P5" => 1,
            "P6" => 3,
            other => {
                return Err(Error::format(
                    "pnm header",
                    format!("unsupported magic {other:?}"),
                ))
            }
        };
        let width = cur.positive("width")?;
        let height = cur.positive("height")?;
        let maxval = cur.positive("maxval")?;
        if maxval != 255 {
            return Err(Error::format(
                "pnm header",
                format!("maxval {maxval} unsupported, expected 255"),
            ));
        }
        // exactly one whitespace byte separates the header from the raster
        if !cur.bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(Error::format("pnm header", "missing raster separator"));
        }
        cur.pos += 1;
        let need = width * height * channels;
        let raster = &bytes[cur.pos..];
        if raster.len() < need {
            return Err(Error::format(
                "pnm raster",
                format!("expected {need} bytes, found {}", raster.len()),
            ));
        }
        let pixels = if channels == 1 {
            raster[..need].to_vec()
        } else {
            raster[..need]
                .chunks_exact(3)
                .map(|px| to_grayscale(px[0], px[1], px[2]))
                .collect()
        };
        GrayImage::new(width, height, pixels)
    }
}

struct PnmCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl PnmCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<String> {
        self.skip_space_and_comments();
        let start = self.pos;
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() || b == b'#' {
                break;
            }
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format("pnm header", "truncated header"));
        }
        Ok(String::from_utf8_lossy(&self.bytes[start..self.pos]).into_owned())
    }

    fn positive(&mut self, field: &str) -> Result<usize> {
        let tok = self.token()?;
        let v: i64 = tok
            .parse()
            .map_err(|_| Error::format("pnm header", format!("{field} {tok:?} is not an integer")))?;
        if v <= 0 {
            return Err(Error::format("pnm header", format!("{field} must be > 0, got {v}")));
        }
        Ok(v as usize)
    }
}

#[inline]
pub(crate) fn quantize_intensity<F: Real>(v: F) -> u8 {
    let r = v.round().to_f64_lossy();
    r.clamp(0.0, 255.0) as u8
}

/// BT.601 luma, rounded and clamped.
pub fn to_grayscale(r: u8, g: u8, b: u8) -> u8 {
    let y = 0.299 * f64::from(r) + 0.587 * f64::from(g) + 0.114 * f64::from(b);
    y.round().clamp(0.0, 255.0) as u8
}

pub fn load_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    GrayImage::from_pnm_bytes(&bytes)
}

pub fn save_image(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    write_file(path.as_ref(), &img.to_pgm_bytes())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Role::Train),
            "val" => Ok(Role::Val),
            "test" => Ok(Role::Test),
            _ => Err(Error::Config(format!("unknown role {s:?} (train|val|test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub label: usize,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
    /// Directory the entry paths are relative to. Not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub const FILE_NAME: &'static str = "manifest.json";

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::format("manifest", e.to_string()))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::format("manifest", e.to_string()))?;
        text.push('\n');
        write_file(path.as_ref(), text.as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(&e.path) {
                return Err(Error::format(
                    "manifest",
                    format!("duplicate path {}", e.path.display()),
                ));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn with_role(&self, role: Role) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.role == role)
    }

    pub fn count(&self, role: Role) -> usize {
        self.with_role(role).count()
    }

    pub fn n_classes(&self) -> usize {
        self.entries.iter().map(|e| e.label + 1).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusParams {
    pub n_images: usize,
    pub size: usize,
    pub n_classes: usize,
    pub seed: u64,
}

impl CorpusParams {
    pub fn validate(&self) -> Result<()> {
        if self.size < 64 {
            return Err(Error::Config(format!(
                "image size {} below the 64-pixel minimum",
                self.size
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.n_images == 0 {
            return Err(Error::Config("n_images must be positive".into()));
        }
        Ok(())
    }
}

const BASE_NOISE: f64 = 12.0;
const TEXTURE_AMPLITUDE: f64 = 10.0;
const TEXTURE_PERIOD: f64 = 24.0;

/// One synthetic image of class `label`: 3x3 box-filtered uniform noise
/// around a random mean, plus a zero-phase sinusoid oriented at
/// `label * pi / n_classes`.
pub fn synthetic_image(size: usize, n_classes: usize, label: usize, rng: &mut impl Rng) -> GrayImage {
    let mean: f64 = rng.gen_range(96.0..160.0);
    let noise: Vec<f64> = (0..size * size)
        .map(|_| rng.gen_range(-BASE_NOISE..=BASE_NOISE))
        .collect();
    let theta = label as f64 * PI / n_classes as f64;
    let (s, c) = theta.sin_cos();
    let omega = 2.0 * PI / TEXTURE_PERIOD;
    let clampi = |v: isize| v.clamp(0, size as isize - 1) as usize;
    GrayImage::from_fn(size, size, |r, col| {
        let mut acc = 0.0;
        for dr in -1isize..=1 {
            for dc in -1isize..=1 {
                let rr = clampi(r as isize + dr);
                let cc = clampi(col as isize + dc);
                acc += noise[rr * size + cc];
            }
        }
        let texture = TEXTURE_AMPLITUDE * (omega * (col as f64 * c + r as f64 * s) ).sin();
        (mean + acc / 9.0 + texture).round().clamp(0.0, 255.0) as u8
    })
}

/// Train/val/test counts for `n` items (62.5 / 12.5 / 25).
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let train = (n as f64 * 0.625).round() as usize;
    let val = ((n as f64 * 0.125).round() as usize).min(n - train);
    (train, val, n - train - val)
}

/// Image file name for corpus index `i`.
pub fn image_name(i: usize) -> String {
    format!("images/img-{i:05}.pgm")
}

/// Builds the manifest for a corpus without touching the filesystem.
pub fn corpus_manifest(params: &CorpusParams) -> DatasetManifest {
    let n = params.n_images;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(params.seed, u64::MAX));
    order.shuffle(&mut rng);
    let (n_train, n_val, _) = split_counts(n);
    let mut roles = vec![Role::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        roles[i] = if rank < n_train {
            Role::Train
        } else if rank < n_train + n_val {
            Role::Val
        } else {
            Role::Test
        };
    }
    DatasetManifest {
        seed: params.seed,
        entries: (0..n)
            .map(|i| ManifestEntry {
                path: PathBuf::from(image_name(i)),
                label: i % params.n_classes,
                role: roles[i],
            })
            .collect(),
        root: PathBuf::new(),
    }
}

/// Generates corpus image `i` in memory.
pub fn corpus_image(params: &CorpusParams, i: usize) -> GrayImage {
    let mut rng = seed::rng(params.seed, i as u64);
    synthetic_image(params.size, params.n_classes, i % params.n_classes, &mut rng)
}

/// Writes the synthetic corpus and its manifest under `out_dir`.
pub fn gen_synthetic_corpus(params: &CorpusParams, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    use rayon::prelude::*;

    params.validate()?;
    let out_dir = out_dir.as_ref();
    let mut manifest = corpus_manifest(params);
    manifest.root = out_dir.to_path_buf();
    (0..params.n_images).into_par_iter().try_for_each(|i| {
        let img = corpus_image(params, i);
        save_image(out_dir.join(image_name(i)), &img)
    })?;
    manifest.save(out_dir.join(DatasetManifest::FILE_NAME))?;
    Ok(manifest)
}
