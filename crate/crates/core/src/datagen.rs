//! Synthetic paired corpus: rendered words over a clean background, with one
//! word-level region per word.
//!
//! Words are drawn from an embedded 8×8 bitmap font, scaled, optionally
//! rotated, and composited only inside their own rasterized region, so the
//! text image equals the background everywhere outside the region mask.

use std::fs;
use std::path::{Path, PathBuf};

use font8x8::{UnicodeFonts, BASIC_FONTS};
use image::{Rgb, RgbImage};
use log::debug;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, Mask, Point, RegionSet, TextRegion};

/// Built-in glyph styles. All derive from the same 8×8 font.
pub const FONTS: [&str; 3] = ["basic", "bold", "italic"];

const WORDS: &[&str] = &[
    "open", "exit", "sale", "hotel", "coffee", "street", "bank", "market", "stop", "taxi", "bus",
    "park", "store", "pizza", "books", "fresh", "daily", "news", "north", "south", "east", "west",
    "city", "bridge", "garden", "music", "cinema", "museum", "station", "pharmacy", "bakery",
    "closed", "welcome", "office", "parking", "only", "free", "new", "best", "price", "shop",
    "center", "road", "avenue", "cafe", "bar", "food", "home", "love", "time", "river", "lake",
    "2019", "24h", "no.7", "tel", "info", "sushi", "tea", "salon",
];

const PLACEMENT_ATTEMPTS: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackgroundSource {
    /// Random two-color gradient plus low-frequency shading and uniform
    /// per-pixel noise of amplitude `noise`.
    Procedural { noise: u8 },
    /// Random crops of the images in a directory (PNG/JPEG), resized to the
    /// canvas.
    Directory { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderSpec {
    pub canvas_width: u32,
    pub canvas_height: u32,
    /// Inclusive range.
    pub words_per_image: (u32, u32),
    /// Inclusive range of glyph heights in pixels.
    pub font_size: (u32, u32),
    pub fonts: Vec<String>,
    /// Minimum luminance difference between text color and the background
    /// under the word.
    pub min_contrast: u8,
    pub background: BackgroundSource,
    /// Inclusive range in degrees.
    pub rotation: (f64, f64),
    pub seed: u64,
}

impl Default for RenderSpec {
    fn default() -> Self {
        RenderSpec {
            canvas_width: 256,
            canvas_height: 256,
            words_per_image: (1, 6),
            font_size: (16, 40),
            fonts: FONTS.iter().map(|s| s.to_string()).collect(),
            min_contrast: 80,
            background: BackgroundSource::Procedural { noise: 4 },
            rotation: (0.0, 0.0),
            seed: 0,
        }
    }
}

impl RenderSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("render spec: {m}")));
        if self.canvas_width == 0 || self.canvas_height == 0 {
            return bad("canvas size must be positive".into());
        }
        if self.words_per_image.0 > self.words_per_image.1 {
            return bad(format!("empty words_per_image range {:?}", self.words_per_image));
        }
        if self.font_size.0 == 0 || self.font_size.0 > self.font_size.1 {
            return bad(format!("invalid font_size range {:?}", self.font_size));
        }
        if self.fonts.is_empty() {
            return bad("no fonts available".into());
        }
        if let Some(f) = self.fonts.iter().find(|f| !FONTS.contains(&f.as_str())) {
            return bad(format!("unknown font `{f}` (available: {})", FONTS.join(", ")));
        }
        let (r0, r1) = self.rotation;
        if !(r0.is_finite() && r1.is_finite() && r0 <= r1) {
            return bad(format!("invalid rotation range {:?}", self.rotation));
        }
        Ok(())
    }
}

/// A paired training example.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub id: String,
    pub text_image: RgbImage,
    pub background_image: RgbImage,
    pub regions: RegionSet,
}

impl SceneSample {
    pub fn mask(&self) -> Mask {
        self.regions.rasterize()
    }
}

/// Independent random stream for sample `index` of a corpus.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Lit cells of a word in the unscaled font grid.
struct WordBitmap {
    cols: usize,
    cells: Vec<bool>,
}

impl WordBitmap {
    fn render(text: &str, font: &str) -> Self {
        let cell = if font == "italic" { 10 } else { 8 };
        let chars: Vec<char> = text.chars().collect();
        let cols = cell * chars.len();
        let mut cells = vec![false; cols * 8];
        for (i, ch) in chars.iter().enumerate() {
            let rows = BASIC_FONTS.get(*ch).unwrap_or([0; 8]);
            for (r, &bits) in rows.iter().enumerate() {
                let mut row = bits as u16;
                if font == "bold" {
                    row |= row << 1;
                }
                let shift = if font == "italic" { (7 - r) / 3 } else { 0 };
                for b in 0..cell {
                    if b >= shift && row & (1 << (b - shift)) != 0 {
                        cells[r * cols + i * cell + b] = true;
                    }
                }
            }
        }
        WordBitmap { cols, cells }
    }

    fn lit(&self, c: usize, r: usize) -> bool {
        self.cells[r * self.cols + c]
    }

    /// Tight `(c0, r0, c1, r1)` around lit cells, exclusive ends.
    fn tight_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for r in 0..8 {
            for c in 0..self.cols {
                if self.lit(c, r) {
                    b = Some(match b {
                        None => (c, r, c + 1, r + 1),
                        Some((c0, r0, c1, r1)) => (c0.min(c), r0.min(r), c1.max(c + 1), r1.max(r + 1)),
                    });
                }
            }
        }
        b
    }
}

fn luminance(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn procedural_background(w: u32, h: u32, noise: u8, rng: &mut impl Rng) -> RgbImage {
    let c0: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..256.0));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..256.0));
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let freq = rng.gen_range(0.5..2.5) * std::f64::consts::TAU / w.max(h) as f64;
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let shade = rng.gen_range(0.0..24.0);
    let span = (w as f64).hypot(h as f64);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut img = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 - cx, y as f64 - cy);
            let t = ((px * dx + py * dy) / span + 0.5).clamp(0.0, 1.0);
            let wave = shade * ((px * dy - py * dx) * freq + phase).sin();
            let mut out = [0u8; 3];
            for c in 0..3 {
                let n = if noise > 0 {
                    rng.gen_range(-(noise as i32)..=noise as i32) as f64
                } else {
                    0.0
                };
                out[c] = (c0[c] * (1.0 - t) + c1[c] * t + wave + n).round().clamp(0.0, 255.0) as u8;
            }
            img.put_pixel(x, y, Rgb(out));
        }
    }
    img
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
                Some("png" | "jpg" | "jpeg")
            )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no PNG/JPEG images in {}", dir.display())));
    }
    Ok(files)
}

fn directory_background(dir: &Path, w: u32, h: u32, rng: &mut impl Rng) -> Result<RgbImage> {
    let files = list_images(dir)?;
    let path = files.choose(rng).unwrap();
    let src = image::open(path)
        .map_err(|e| Error::Image {
            path: path.clone(),
            source: e,
        })?
        .to_rgb8();
    let (sw, sh) = src.dimensions();
    // largest crop with the canvas aspect ratio, random position
    let scale = (sw as f64 / w as f64).min(sh as f64 / h as f64);
    let (cw, ch) = (((w as f64 * scale) as u32).max(1), ((h as f64 * scale) as u32).max(1));
    let x0 = rng.gen_range(0..=sw - cw);
    let y0 = rng.gen_range(0..=sh - ch);
    let crop = image::imageops::crop_imm(&src, x0, y0, cw, ch).to_image();
    Ok(image::imageops::resize(&crop, w, h, image::imageops::FilterType::Triangle))
}

fn random_word(rng: &mut impl Rng) -> String {
    let w = *WORDS.choose(rng).unwrap();
    match rng.gen_range(0..3) {
        0 => w.to_uppercase(),
        1 => {
            let mut c = w.chars();
            c.next()
                .map(|f| f.to_uppercase().chain(c).collect())
                .unwrap_or_default()
        }
        _ => w.to_string(),
    }
}

fn pick_color(bg_mean: [f64; 3], min_contrast: u8, rng: &mut impl Rng) -> [f64; 3] {
    let target = luminance(bg_mean);
    for _ in 0..20 {
        let c: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0..=255u8) as f64);
        if (luminance(c) - target).abs() >= min_contrast as f64 {
            return c;
        }
    }
    if target > 127.5 {
        [0.0; 3]
    } else {
        [255.0; 3]
    }
}

/// Renders one sample. Words that cannot be placed without overlapping an
/// earlier word within a bounded number of attempts are skipped.
pub fn generate_sample(spec: &RenderSpec, rng: &mut impl Rng, id: impl Into<String>) -> Result<SceneSample> {
    spec.validate()?;
    let (w, h) = (spec.canvas_width, spec.canvas_height);
    let background = match &spec.background {
        BackgroundSource::Procedural { noise } => procedural_background(w, h, *noise, rng),
        BackgroundSource::Directory { path } => directory_background(path, w, h, rng)?,
    };
    let mut text = background.clone();
    let mut regions = RegionSet::empty(w, h);
    let mut occupied = Mask::zeros(w, h);

    let n_words = rng.gen_range(spec.words_per_image.0..=spec.words_per_image.1);
    for _ in 0..n_words {
        let word = random_word(rng);
        let font = spec.fonts.choose(rng).unwrap().clone();
        let size = rng.gen_range(spec.font_size.0..=spec.font_size.1);
        let angle = if spec.rotation.0 == spec.rotation.1 {
            spec.rotation.0
        } else {
            rng.gen_range(spec.rotation.0..=spec.rotation.1)
        };
        let bitmap = WordBitmap::render(&word, &font);
        let Some((c0, r0, c1, r1)) = bitmap.tight_box() else {
            continue;
        };
        let scale = size as f64 / 8.0;
        let bw = ((c1 - c0) as f64 * scale).ceil();
        let bh = ((r1 - r0) as f64 * scale).ceil();
        let (sin, cos) = angle.to_radians().sin_cos();
        // half extents of the rotated box
        let ex = (bw * cos.abs() + bh * sin.abs()) / 2.0;
        let ey = (bw * sin.abs() + bh * cos.abs()) / 2.0;
        if 2.0 * ex + 2.0 > w as f64 || 2.0 * ey + 2.0 > h as f64 {
            debug!("word `{word}` at size {size} does not fit the canvas");
            continue;
        }

        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let region = if angle == 0.0 {
                let x0 = rng.gen_range(0..=(w as f64 - bw) as u32) as f64;
                let y0 = rng.gen_range(0..=(h as f64 - bh) as u32) as f64;
                TextRegion::axis_aligned(x0, y0, x0 + bw, y0 + bh)
            } else {
                let cx = rng.gen_range(ex.ceil()..=(w as f64 - ex).floor());
                let cy = rng.gen_range(ey.ceil()..=(h as f64 - ey).floor());
                let corners = [(-bw, -bh), (bw, -bh), (bw, bh), (-bw, bh)].map(|(dx, dy)| {
                    let (dx, dy) = (dx / 2.0, dy / 2.0);
                    Point::new(
                        (cx + dx * cos - dy * sin).round().clamp(0.0, w as f64),
                        (cy + dx * sin + dy * cos).round().clamp(0.0, h as f64),
                    )
                });
                TextRegion::new(corners.to_vec())
            };
            let Ok(region) = region else { continue };
            let mask = RegionSet::new(vec![region.clone()], w, h).rasterize();
            if mask.count() == 0 || mask.intersects(&occupied) {
                continue;
            }
            placed = Some((region, mask));
            break;
        }
        let Some((region, mask)) = placed else {
            debug!("could not place `{word}` without overlap");
            continue;
        };

        // Inverse map from canvas to the word's local box.
        let (bx0, by0, bx1, by1) = region.bounds();
        let (ccx, ccy) = ((bx0 + bx1) / 2.0, (by0 + by1) / 2.0);
        let coverage = |px: f64, py: f64| -> bool {
            let (dx, dy) = (px - ccx, py - ccy);
            let lx = dx * cos + dy * sin + bw / 2.0;
            let ly = -dx * sin + dy * cos + bh / 2.0;
            if lx < 0.0 || ly < 0.0 || lx >= bw || ly >= bh {
                return false;
            }
            let c = c0 + ((lx / scale) as usize).min(c1 - c0 - 1);
            let r = r0 + ((ly / scale) as usize).min(r1 - r0 - 1);
            bitmap.lit(c, r)
        };

        let mut sum = [0.0; 3];
        let mut count: f64 = 0.0;
        let mut pixels = Vec::new();
        for y in by0.max(0.0) as u32..(by1.ceil() as u32).min(h) {
            for x in bx0.max(0.0) as u32..(bx1.ceil() as u32).min(w) {
                if !mask.get(x, y) {
                    continue;
                }
                let px = background.get_pixel(x, y);
                for c in 0..3 {
                    sum[c] += px[c] as f64;
                }
                count += 1.0;
                let hits = [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)]
                    .iter()
                    .filter(|(ox, oy)| coverage(x as f64 + ox, y as f64 + oy))
                    .count();
                if hits > 0 {
                    pixels.push((x, y, hits as f64 / 4.0));
                }
            }
        }
        let color = pick_color(sum.map(|s| s / count.max(1.0)), spec.min_contrast, rng);
        let mut changed = false;
        let mut painted = Vec::with_capacity(pixels.len());
        for (x, y, alpha) in pixels {
            let bg = background.get_pixel(x, y);
            let out = Rgb(std::array::from_fn(|c| {
                (bg[c] as f64 * (1.0 - alpha) + color[c] * alpha).round() as u8
            }));
            changed |= out != *bg;
            painted.push((x, y, out));
        }
        if !changed {
            continue;
        }
        for (x, y, px) in painted {
            text.put_pixel(x, y, px);
        }
        occupied = occupied.union(&mask);
        regions.push(region);
    }

    Ok(SceneSample {
        id: id.into(),
        text_image: text,
        background_image: background,
        regions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub ids: Vec<String>,
    pub canvas_width: u32,
    pub canvas_height: u32,
    pub spec: RenderSpec,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn text_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_text.png"))
}

pub fn background_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_bg.png"))
}

pub fn regions_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_regions.txt"))
}

fn id_width(n: usize) -> usize {
    n.saturating_sub(1).to_string().len().max(4)
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })
}

pub fn write_sample(dir: &Path, sample: &SceneSample) -> Result<()> {
    save_png(&sample.text_image, &text_path(dir, &sample.id))?;
    save_png(&sample.background_image, &background_path(dir, &sample.id))?;
    let rp = regions_path(dir, &sample.id);
    fs::write(&rp, geometry::format_regions(&sample.regions)).map_err(|e| Error::io(&rp, e))
}

/// Writes `n` samples and the manifest into `out_dir`. Sample `i` is
/// generated from its own stream of `spec.seed`, so the corpus is a pure
/// function of `(spec, n)`.
pub fn generate_corpus(spec: &RenderSpec, n: usize, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("corpus size must be at least 1".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let width = id_width(n);
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("{i:0width$}");
        let mut rng = sample_rng(spec.seed, i as u64);
        let sample = generate_sample(spec, &mut rng, id.clone())?;
        write_sample(out_dir, &sample)?;
        ids.push(id);
    }
    let manifest = Manifest {
        ids,
        canvas_width: spec.canvas_width,
        canvas_height: spec.canvas_height,
        spec: spec.clone(),
    };
    write_manifest(out_dir, &manifest)?;
    Ok(manifest)
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    json.push('\n');
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path,
        line: e.line(),
        reason: e.to_string(),
    })
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image {
                path: path.to_path_buf(),
                source: other,
            },
        })?
        .to_rgb8())
}

pub fn load_sample(dir: &Path, id: &str) -> Result<SceneSample> {
    let text_image = read_rgb(&text_path(dir, id))?;
    let background_image = read_rgb(&background_path(dir, id))?;
    if text_image.dimensions() != background_image.dimensions() {
        return Err(Error::shape(
            format!("{:?}", text_image.dimensions()),
            format!("background {:?}", background_image.dimensions()),
        ));
    }
    let (w, h) = text_image.dimensions();
    let regions = geometry::read_regions(&regions_path(dir, id), w, h)?;
    Ok(SceneSample {
        id: id.to_string(),
        text_image,
        background_image,
        regions,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    All,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "all" => Ok(Split::All),
            other => Err(format!("unknown split `{other}` (train, val, all)")),
        }
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

impl Split {
    /// Ids hashing to 0 mod 4 form the validation quarter.
    pub fn contains(self, id: &str) -> bool {
        let val = fnv1a(id).is_multiple_of(4);
        match self {
            Split::Train => !val,
            Split::Val => val,
            Split::All => true,
        }
    }
}

pub fn load_corpus(dir: &Path, split: Split) -> Result<Vec<SceneSample>> {
    let manifest = read_manifest(dir)?;
    manifest
        .ids
        .iter()
        .filter(|id| split.contains(id))
        .map(|id| load_sample(dir, id))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outside_identity(s: &SceneSample) -> bool {
        let mask = s.mask();
        s.text_image
            .enumerate_pixels()
            .all(|(x, y, p)| mask.get(x, y) || p == s.background_image.get_pixel(x, y))
    }

    #[test]
    fn no_words_means_identical_images() {
        let spec = RenderSpec {
            words_per_image: (0, 0),
            ..RenderSpec::default()
        };
        let s = generate_sample(&spec, &mut sample_rng(1, 0), "0").unwrap();
        assert_eq!(s.text_image, s.background_image);
        assert!(s.regions.is_empty());
    }

    #[test]
    fn samples_respect_invariants() {
        let spec = RenderSpec {
            rotation: (-20.0, 20.0),
            ..RenderSpec::default()
        };
        for i in 0..20 {
            let s = generate_sample(&spec, &mut sample_rng(3, i), format!("{i}")).unwrap();
            assert!(outside_identity(&s));
            for r in s.regions.regions() {
                let m = RegionSet::new(vec![r.clone()], 256, 256).rasterize();
                let differs = s
                    .text_image
                    .enumerate_pixels()
                    .any(|(x, y, p)| m.get(x, y) && p != s.background_image.get_pixel(x, y));
                assert!(differs);
            }
        }
    }

    #[test]
    fn same_seed_same_sample() {
        let spec = RenderSpec {
            seed: 1234,
            ..RenderSpec::default()
        };
        let a = generate_sample(&spec, &mut sample_rng(spec.seed, 0), "a").unwrap();
        let b = generate_sample(&spec, &mut sample_rng(spec.seed, 0), "a").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_fonts_rejected() {
        let spec = RenderSpec {
            fonts: vec![],
            ..RenderSpec::default()
        };
        assert!(generate_sample(&spec, &mut sample_rng(0, 0), "x").is_err());
        let spec = RenderSpec {
            fonts: vec!["comic".into()],
            ..RenderSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn split_partitions_ids() {
        let ids: Vec<String> = (0..400).map(|i| format!("{i:04}")).collect();
        let val = ids.iter().filter(|i| Split::Val.contains(i)).count();
        let train = ids.iter().filter(|i| Split::Train.contains(i)).count();
        assert_eq!(val + train, 400);
        assert!((60..140).contains(&val), "{val}");
    }

    #[test]
    fn id_width_grows_with_corpus() {
        assert_eq!(id_width(1), 4);
        assert_eq!(id_width(10_000), 4);
        assert_eq!(id_width(10_001), 5);
    }
}
