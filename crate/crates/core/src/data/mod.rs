//! Corpus construction: metadata ingestion, magnification filtering, class
//! balancing by crop count, rotation augmentation and on-disk layout.

pub mod pgm;
pub mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub use synth::synth_corpus;

pub const DEFAULT_MAGNIFICATION: f64 = 10.3;
pub const DEFAULT_MAGNIFICATION_TOL: f64 = 0.05;
pub const DEFAULT_CROP: usize = 128;
pub const DEFAULT_TARGET_PER_CLASS: usize = 1400;
pub const EVAL_FRACTION: f64 = 0.1;

const CROP_STREAM: u64 = 0x4352_4f50 << 32;
const SPLIT_STREAM: u64 = 0x5350_4c54 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum CoolingMethod {
    NoHeatTreatment = 0,
    Quench = 1,
    FurnaceCool = 2,
    AirCool = 3,
    Hold650C1H = 4,
}

impl CoolingMethod {
    pub const ALL: [CoolingMethod; 5] = [
        CoolingMethod::NoHeatTreatment,
        CoolingMethod::Quench,
        CoolingMethod::FurnaceCool,
        CoolingMethod::AirCool,
        CoolingMethod::Hold650C1H,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            CoolingMethod::NoHeatTreatment => "no-heat-treatment",
            CoolingMethod::Quench => "quench",
            CoolingMethod::FurnaceCool => "furnace-cool",
            CoolingMethod::AirCool => "air-cool",
            CoolingMethod::Hold650C1H => "hold-650c-1h",
        }
    }
}

impl From<CoolingMethod> for u8 {
    fn from(c: CoolingMethod) -> u8 {
        c.code()
    }
}

impl TryFrom<u8> for CoolingMethod {
    type Error = String;

    fn try_from(code: u8) -> std::result::Result<Self, String> {
        Self::from_code(code).ok_or_else(|| format!("unknown cooling method code {code}"))
    }
}

impl fmt::Display for CoolingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CoolingMethod {
    type Err = String;

    /// Accepts the integer code or a name; case, spaces, `-` and `_` are ignored.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let t = s.trim();
        if let Ok(code) = t.parse::<u8>() {
            return Self::from_code(code).ok_or_else(|| format!("unknown cooling method code {code}"));
        }
        let key: String = t
            .chars()
            .filter(|c| !matches!(c, ' ' | '-' | '_'))
            .flat_map(char::to_lowercase)
            .collect();
        let method = match key.as_str() {
            "none" | "noheattreatment" | "asreceived" => CoolingMethod::NoHeatTreatment,
            "quench" | "quenched" | "quenching" | "q" => CoolingMethod::Quench,
            "furnacecool" | "furnacecooled" | "furnacecooling" | "fc" => CoolingMethod::FurnaceCool,
            "aircool" | "aircooled" | "aircooling" | "ac" => CoolingMethod::AirCool,
            "hold650c1h" | "650c1h" | "hold650" | "650c" => CoolingMethod::Hold650C1H,
            _ => return Err(format!("unknown cooling method '{t}'")),
        };
        Ok(method)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourceRecord {
    pub path: PathBuf,
    pub cooling_method: CoolingMethod,
    /// Pixels per micron.
    pub magnification: f64,
}

/// Reads `filename,cooling_method,magnification` rows. Row numbers in errors
/// count the header as row 1.
pub fn load_metadata(csv_path: &Path) -> Result<Vec<SourceRecord>> {
    let file = fs::File::open(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let ingest = |row: usize, message: String| Error::Ingestion {
        path: csv_path.to_path_buf(),
        row,
        message,
    };
    let headers = reader.headers().map_err(|e| ingest(1, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["filename", "cooling_method", "magnification"] {
        return Err(ingest(
            1,
            format!("expected header filename,cooling_method,magnification, got {}", headers.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| ingest(row, e.to_string()))?;
        if rec.len() != 3 {
            return Err(ingest(row, format!("expected 3 fields, got {}", rec.len())));
        }
        if rec[0].is_empty() {
            return Err(ingest(row, "empty filename".into()));
        }
        let cooling_method = rec[1].parse().map_err(|e| ingest(row, e))?;
        let magnification: f64 = rec[2]
            .parse()
            .map_err(|_| ingest(row, format!("magnification '{}' is not a number", &rec[2])))?;
        if !(magnification > 0.0 && magnification.is_finite()) {
            return Err(ingest(row, format!("magnification must be positive, got {magnification}")));
        }
        out.push(SourceRecord {
            path: PathBuf::from(&rec[0]),
            cooling_method,
            magnification,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterReport {
    pub kept: Vec<SourceRecord>,
    pub rejected: usize,
}

/// Keeps records with `|magnification − target| ≤ tol`.
pub fn filter_magnification(records: &[SourceRecord], target: f64, tol: f64) -> FilterReport {
    let kept: Vec<SourceRecord> = records
        .iter()
        .filter(|r| (r.magnification - target).abs() <= tol)
        .cloned()
        .collect();
    let rejected = records.len() - kept.len();
    if kept.is_empty() && !records.is_empty() {
        log::warn!("all {rejected} records rejected by magnification filter {target}±{tol}");
    } else if rejected > 0 {
        log::info!("magnification filter rejected {rejected} of {} records", records.len());
    }
    FilterReport { kept, rejected }
}

/// Crops per source image so that every class reaches at least `target`.
pub fn balance_plan(
    counts: &BTreeMap<CoolingMethod, usize>,
    target: usize,
) -> Result<BTreeMap<CoolingMethod, usize>> {
    if target == 0 {
        return Err(Error::Data("balancing target must be at least 1".into()));
    }
    counts
        .iter()
        .map(|(&c, &n)| {
            if n == 0 {
                Err(Error::Data(format!("class {c} has no source images")))
            } else {
                Ok((c, target.div_ceil(n)))
            }
        })
        .collect()
}

/// Row-major single-channel raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    width: usize,
    height: usize,
    pixels: Vec<T>,
}

impl<T: Copy> Image<T> {
    pub fn new(width: usize, height: usize, pixels: Vec<T>) -> Result<Self> {
        if width * height != pixels.len() || pixels.is_empty() {
            return Err(Error::Data(format!(
                "{width}x{height} image with {} pixels",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[T] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<T> {
        self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> T {
        self.pixels[y * self.width + x]
    }

    /// `size×size` window with top-left corner `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, size: usize) -> Result<Self> {
        if y + size > self.height || x + size > self.width || size == 0 {
            return Err(Error::Data(format!(
                "{size}x{size} crop at ({y},{x}) outside {}x{} image",
                self.width, self.height
            )));
        }
        let pixels = (0..size)
            .flat_map(|r| self.pixels[(y + r) * self.width + x..][..size].iter().copied())
            .collect();
        Ok(Self {
            width: size,
            height: size,
            pixels,
        })
    }

    /// Crop at a uniformly drawn valid offset; also returns the offset `(y, x)`.
    pub fn random_crop(&self, size: usize, rng: &mut Rng) -> Result<(Self, (usize, usize))> {
        if size == 0 || size > self.height || size > self.width {
            return Err(Error::Data(format!(
                "cannot take a {size}x{size} crop from a {}x{} image",
                self.width, self.height
            )));
        }
        let y = rng.below(self.height - size + 1);
        let x = rng.below(self.width - size + 1);
        Ok((self.crop(y, x, size)?, (y, x)))
    }

    /// Quarter turn clockwise.
    pub fn rot90(&self) -> Result<Self> {
        let n = self.square_side()?;
        let pixels = (0..n * n)
            .map(|i| {
                let (y, x) = (i / n, i % n);
                self.pixels[(n - 1 - x) * n + y]
            })
            .collect();
        Ok(Self {
            width: n,
            height: n,
            pixels,
        })
    }

    /// `[original, rot90, rot180, rot270]`.
    pub fn augment_rotations(&self) -> Result<[Self; 4]> {
        let r1 = self.rot90()?;
        let r2 = r1.rot90()?;
        let r3 = r2.rot90()?;
        Ok([self.clone(), r1, r2, r3])
    }

    fn square_side(&self) -> Result<usize> {
        if self.width != self.height {
            return Err(Error::Data(format!(
                "rotation needs a square image, got {}x{}",
                self.width, self.height
            )));
        }
        Ok(self.width)
    }
}

/// `x ↦ x/127.5 − 1`.
pub fn normalize_to_model_range(pixels: &[u8]) -> Vec<f32> {
    pixels.iter().map(|&p| p as f32 / 127.5 - 1.0).collect()
}

/// `x ↦ round((x + 1)·127.5)`, clamped to `[0, 255]`.
pub fn to_gray8(pixels: &[f32]) -> Vec<u8> {
    pixels
        .iter()
        .map(|&v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    /// Crop offset `(y, x)` in the source image.
    pub offset: (usize, usize),
    /// Clockwise rotation in degrees.
    pub rotation: u16,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub size: usize,
    /// `size×size` values in `[−1, 1]`.
    pub pixels: Vec<f32>,
    pub label: CoolingMethod,
    pub provenance: Provenance,
}

/// Indices into [`Corpus::images`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub images: Vec<LabeledImage>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ManifestRow {
    index: usize,
    file: String,
    label: CoolingMethod,
    label_name: String,
    source: String,
    offset: (usize, usize),
    rotation: u16,
}

#[derive(Serialize, Deserialize)]
struct CorpusInfo {
    seed: u64,
    size: usize,
    count: usize,
    per_class: [usize; 5],
}

const MANIFEST: &str = "manifest.jsonl";
const INFO: &str = "corpus.json";
const IMAGE_DIR: &str = "images";

impl Corpus {
    pub fn new(images: Vec<LabeledImage>, seed: u64) -> Self {
        Self { images, seed }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Side length shared by all images; errors on an empty or mixed corpus.
    pub fn image_size(&self) -> Result<usize> {
        let first = self
            .images
            .first()
            .ok_or_else(|| Error::Data("empty corpus".into()))?
            .size;
        if self.images.iter().any(|i| i.size != first) {
            return Err(Error::Data("corpus mixes image sizes".into()));
        }
        Ok(first)
    }

    pub fn per_class_counts(&self) -> [usize; 5] {
        let mut counts = [0; 5];
        for img in &self.images {
            counts[img.label.index()] += 1;
        }
        counts
    }

    /// Stratified split holding out a tenth of every class (at least one image
    /// when the class has two or more). Deterministic in `seed`.
    pub fn split(&self, seed: u64) -> Split {
        let mut train = Vec::new();
        let mut eval = Vec::new();
        for class in CoolingMethod::ALL {
            let members: Vec<usize> = (0..self.images.len())
                .filter(|&i| self.images[i].label == class)
                .collect();
            let n = members.len();
            let n_eval = if n < 2 {
                0
            } else {
                ((n as f64 * EVAL_FRACTION).round() as usize).max(1)
            };
            let mut rng = Rng::derive(seed, SPLIT_STREAM | class.code() as u64);
            let perm = rng.permutation(n);
            let mut held: Vec<usize> = perm[..n_eval].iter().map(|&p| members[p]).collect();
            let mut kept: Vec<usize> = perm[n_eval..].iter().map(|&p| members[p]).collect();
            held.sort_unstable();
            kept.sort_unstable();
            eval.extend(held);
            train.extend(kept);
        }
        train.sort_unstable();
        eval.sort_unstable();
        Split { train, eval }
    }

    /// Stacks the selected images into `[B, 1, S, S]` plus their class indices.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let s = self.image_size()?;
        let mut data = Vec::with_capacity(indices.len() * s * s);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let img = self
                .images
                .get(i)
                .ok_or_else(|| Error::Data(format!("image index {i} out of range")))?;
            data.extend_from_slice(&img.pixels);
            labels.push(img.label.index());
        }
        Ok((Tensor::new(vec![indices.len(), 1, s, s], data)?, labels))
    }

    /// Writes `images/NNNNNN.pgm`, `manifest.jsonl` and `corpus.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let size = self.image_size()?;
        let img_dir = dir.join(IMAGE_DIR);
        fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        let manifest_path = dir.join(MANIFEST);
        let file = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let mut manifest = BufWriter::new(file);
        for (index, img) in self.images.iter().enumerate() {
            let file = format!("{IMAGE_DIR}/{index:06}.pgm");
            pgm::write(&dir.join(&file), &Image::new(size, size, to_gray8(&img.pixels))?)?;
            let row = ManifestRow {
                index,
                file,
                label: img.label,
                label_name: img.label.name().to_string(),
                source: img.provenance.source.clone(),
                offset: img.provenance.offset,
                rotation: img.provenance.rotation,
            };
            serde_json::to_writer(&mut manifest, &row)?;
            manifest
                .write_all(b"\n")
                .map_err(|e| Error::io(&manifest_path, e))?;
        }
        manifest.flush().map_err(|e| Error::io(&manifest_path, e))?;
        let info = CorpusInfo {
            seed: self.seed,
            size,
            count: self.len(),
            per_class: self.per_class_counts(),
        };
        let info_path = dir.join(INFO);
        fs::write(&info_path, serde_json::to_string_pretty(&info)?).map_err(|e| Error::io(&info_path, e))
    }

    /// Reads a corpus written by [`Corpus::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let info_path = dir.join(INFO);
        let text = fs::read_to_string(&info_path).map_err(|e| Error::io(&info_path, e))?;
        let info: CorpusInfo = serde_json::from_str(&text)?;
        let manifest_path = dir.join(MANIFEST);
        let file = fs::File::open(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let mut images = Vec::with_capacity(info.count);
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&manifest_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: ManifestRow = serde_json::from_str(&line).map_err(|e| Error::Ingestion {
                path: manifest_path.clone(),
                row: i + 1,
                message: e.to_string(),
            })?;
            let img = pgm::read(&dir.join(&row.file))?;
            if img.width() != info.size || img.height() != info.size {
                return Err(Error::Data(format!(
                    "{} is {}x{}, corpus size is {}",
                    row.file,
                    img.width(),
                    img.height(),
                    info.size
                )));
            }
            images.push(LabeledImage {
                size: info.size,
                pixels: normalize_to_model_range(img.pixels()),
                label: row.label,
                provenance: Provenance {
                    source: row.source,
                    offset: row.offset,
                    rotation: row.rotation,
                },
            });
        }
        if images.len() != info.count {
            return Err(Error::Data(format!(
                "manifest lists {} images, corpus.json says {}",
                images.len(),
                info.count
            )));
        }
        Ok(Self::new(images, info.seed))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub crop: usize,
    pub target_per_class: usize,
    pub magnification: f64,
    pub magnification_tol: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            crop: DEFAULT_CROP,
            target_per_class: DEFAULT_TARGET_PER_CLASS,
            magnification: DEFAULT_MAGNIFICATION,
            magnification_tol: DEFAULT_MAGNIFICATION_TOL,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BuildReport {
    pub rejected_by_magnification: usize,
    pub crops_per_source: BTreeMap<CoolingMethod, usize>,
}

/// Filter → balance → crop → augment. Image paths in `records` are resolved
/// against `image_dir`. Every class present after filtering is balanced; a
/// class absent from the metadata is simply absent from the corpus.
pub fn build_corpus(
    records: &[SourceRecord],
    image_dir: &Path,
    cfg: &CorpusConfig,
) -> Result<(Corpus, BuildReport)> {
    let report = filter_magnification(records, cfg.magnification, cfg.magnification_tol);
    if report.kept.is_empty() {
        return Err(Error::Data(format!(
            "no source images at magnification {}±{}",
            cfg.magnification, cfg.magnification_tol
        )));
    }
    let mut counts = BTreeMap::new();
    for r in &report.kept {
        *counts.entry(r.cooling_method).or_insert(0usize) += 1;
    }
    let plan = balance_plan(&counts, cfg.target_per_class)?;
    let mut images = Vec::new();
    for (source_idx, rec) in report.kept.iter().enumerate() {
        let path = image_dir.join(&rec.path);
        let src = pgm::read(&path)?;
        let mut rng = Rng::derive(cfg.seed, CROP_STREAM | source_idx as u64);
        for _ in 0..plan[&rec.cooling_method] {
            let (crop, offset) = src.random_crop(cfg.crop, &mut rng)?;
            let rotations = crop.augment_rotations()?;
            for (k, rot) in rotations.into_iter().enumerate() {
                images.push(LabeledImage {
                    size: cfg.crop,
                    pixels: normalize_to_model_range(rot.pixels()),
                    label: rec.cooling_method,
                    provenance: Provenance {
                        source: rec.path.to_string_lossy().into_owned(),
                        offset,
                        rotation: 90 * k as u16,
                    },
                });
            }
        }
    }
    Ok((
        Corpus::new(images, cfg.seed),
        BuildReport {
            rejected_by_magnification: report.rejected,
            crops_per_source: plan,
        },
    ))
}
