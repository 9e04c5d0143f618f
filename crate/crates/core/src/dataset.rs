//! Image/mask pairs, their on-disk formats, corpus statistics and splits.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter};
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{ClassId, LabelSchema};

/// Row-major grid of class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    data: Vec<ClassId>,
}

impl Mask {
    pub fn new(width: u32, height: u32, fill: ClassId) -> Self {
        Mask {
            width,
            height,
            data: vec![fill; width as usize * height as usize],
        }
    }

    pub fn from_vec(width: u32, height: u32, data: Vec<ClassId>) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(Error::Shape(format!(
                "mask buffer has {} values, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Mask {
            width,
            height,
            data,
        })
    }

    /// Builds a mask from rows; all rows must have equal length.
    pub fn from_rows<R: AsRef<[ClassId]>>(rows: &[R]) -> Result<Self> {
        let height = rows.len() as u32;
        let width = rows.first().map_or(0, |r| r.as_ref().len()) as u32;
        if rows.iter().any(|r| r.as_ref().len() != width as usize) {
            return Err(Error::Shape("ragged mask rows".into()));
        }
        let data = rows
            .iter()
            .flat_map(|r| r.as_ref().iter().copied())
            .collect();
        Ok(Mask {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn get(&self, x: u32, y: u32) -> ClassId {
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, id: ClassId) {
        self.data[y as usize * self.width as usize + x as usize] = id;
    }

    pub fn as_slice(&self) -> &[ClassId] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [ClassId] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<ClassId> {
        self.data
    }

    /// Pixel count per class id; ids `>= num_classes` are ignored.
    pub fn histogram(&self, num_classes: usize) -> Vec<u64> {
        let mut counts = vec![0u64; num_classes];
        for &id in &self.data {
            if let Some(slot) = counts.get_mut(id as usize) {
                *slot += 1;
            }
        }
        counts
    }

    pub fn rows(&self) -> impl Iterator<Item = &[ClassId]> {
        self.data.chunks(self.width.max(1) as usize)
    }
}

/// An RGB image with its per-pixel labels.
///
/// Fields are public so corpora can be inspected and repaired; use
/// [`SegmentationSample::new`] to get a checked value and
/// [`validate_corpus`] to re-check after mutation.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationSample {
    pub image: RgbImage,
    pub mask: Mask,
    pub source_id: String,
}

impl SegmentationSample {
    pub fn new(
        image: RgbImage,
        mask: Mask,
        source_id: impl Into<String>,
        schema: &LabelSchema,
    ) -> Result<Self> {
        let sample = SegmentationSample {
            image,
            mask,
            source_id: source_id.into(),
        };
        match sample.violations(schema).into_iter().next() {
            Some(v) => Err(v.into_error(&sample.source_id, schema)),
            None => Ok(sample),
        }
    }

    pub fn width(&self) -> u32 {
        self.mask.width
    }

    pub fn height(&self) -> u32 {
        self.mask.height
    }

    fn violations(&self, schema: &LabelSchema) -> Vec<Violation> {
        let mut out = Vec::new();
        let (iw, ih) = self.image.dimensions();
        if (iw, ih) != self.mask.dimensions() {
            out.push(Violation::ShapeMismatch {
                image: (iw, ih),
                mask: self.mask.dimensions(),
            });
        }
        let mut seen = [false; 256];
        for &id in &self.mask.data {
            if !schema.contains(id) && !seen[id as usize] {
                seen[id as usize] = true;
                out.push(Violation::UnknownClass { id });
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    ShapeMismatch { image: (u32, u32), mask: (u32, u32) },
    UnknownClass { id: ClassId },
}

impl Violation {
    fn into_error(self, source_id: &str, schema: &LabelSchema) -> Error {
        match self {
            Violation::ShapeMismatch { image, mask } => Error::MaskShape {
                source_id: source_id.to_string(),
                image_width: image.0,
                image_height: image.1,
                mask_width: mask.0,
                mask_height: mask.1,
            },
            Violation::UnknownClass { id } => Error::UnknownClass {
                source_id: source_id.to_string(),
                id,
                num_classes: schema.len(),
            },
        }
    }
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::ShapeMismatch { image, mask } => write!(
                f,
                "mask is {}x{} but image is {}x{}",
                mask.0, mask.1, image.0, image.1
            ),
            Violation::UnknownClass { id } => write!(f, "unknown class id {id}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleViolation {
    pub index: usize,
    pub source_id: String,
    pub violation: Violation,
}

/// Every invariant violation found in a corpus; empty means the corpus is valid.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<SampleViolation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn len(&self) -> usize {
        self.violations.len()
    }
}

pub fn validate_corpus(corpus: &[SegmentationSample], schema: &LabelSchema) -> ValidationReport {
    let violations = corpus
        .iter()
        .enumerate()
        .flat_map(|(index, sample)| {
            sample
                .violations(schema)
                .into_iter()
                .map(move |violation| SampleViolation {
                    index,
                    source_id: sample.source_id.clone(),
                    violation,
                })
        })
        .collect();
    ValidationReport { violations }
}

// ---------------------------------------------------------------------------
// File formats

pub fn read_image(path: &Path) -> Result<RgbImage> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?
        .with_guessed_format()
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?
        .decode()
        .map_err(|e| Error::format(path, e))?;
    Ok(img.to_rgb8())
}

/// Decodes a mask file without checking ids against a schema.
///
/// 8-bit indexed and 8-bit grayscale PNGs store class ids directly. Any
/// other color layout is mapped through the schema's color table.
pub fn read_mask(path: &Path, schema: &LabelSchema) -> Result<Mask> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    if let Ok(mut reader) = decoder.read_info() {
        let info = reader.info();
        let (width, height) = (info.width, info.height);
        let direct = info.bit_depth == png::BitDepth::Eight
            && matches!(
                info.color_type,
                png::ColorType::Indexed | png::ColorType::Grayscale
            );
        if direct {
            let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
            let frame = reader
                .next_frame(&mut buf)
                .map_err(|e| Error::format(path, e))?;
            let stride = frame.line_size;
            let mut data = Vec::with_capacity(width as usize * height as usize);
            for row in buf.chunks(stride).take(height as usize) {
                data.extend_from_slice(&row[..width as usize]);
            }
            return Mask::from_vec(width, height, data);
        }
    }
    let rgb = read_image(path)?;
    let table = schema.color_table();
    let source_id = path.display().to_string();
    let data = rgb
        .pixels()
        .map(|p| {
            table.get(&p.0).copied().ok_or_else(|| Error::UnknownColor {
                source_id: source_id.clone(),
                color: p.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Mask::from_vec(rgb.width(), rgb.height(), data)
}

/// Writes `mask` as an 8-bit indexed PNG whose indices are the class ids
/// and whose palette holds the schema's display colors.
pub fn write_mask(path: &Path, mask: &Mask, schema: &LabelSchema) -> Result<()> {
    let file =
        File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), mask.width, mask.height);
    encoder.set_color(png::ColorType::Indexed);
    encoder.set_depth(png::BitDepth::Eight);
    let mut palette = Vec::with_capacity(256 * 3);
    for id in 0..=255u8 {
        let color = if schema.contains(id) {
            schema.color(id)
        } else {
            [0, 0, 0]
        };
        palette.extend_from_slice(&color);
    }
    encoder.set_palette(palette);
    let mut writer = encoder.write_header().map_err(|e| Error::format(path, e))?;
    writer
        .write_image_data(&mask.data)
        .map_err(|e| Error::format(path, e))?;
    writer.finish().map_err(|e| Error::format(path, e))
}

pub fn write_image(path: &Path, image: &RgbImage) -> Result<()> {
    image.save(path).map_err(|e| Error::format(path, e))
}

/// Loads an image/mask pair without validating it.
pub fn load_sample_unchecked(
    image_path: &Path,
    mask_path: &Path,
    schema: &LabelSchema,
) -> Result<SegmentationSample> {
    Ok(SegmentationSample {
        image: read_image(image_path)?,
        mask: read_mask(mask_path, schema)?,
        source_id: image_path.display().to_string(),
    })
}

/// Loads and validates an image/mask pair. Grayscale and RGBA images are converted to RGB.
pub fn load_sample(
    image_path: &Path,
    mask_path: &Path,
    schema: &LabelSchema,
) -> Result<SegmentationSample> {
    let raw = load_sample_unchecked(image_path, mask_path, schema)?;
    SegmentationSample::new(raw.image, raw.mask, raw.source_id, schema)
}

/// Writes the schema palette sidecar (`palette.json`) into `dir`.
pub fn write_palette(dir: &Path, schema: &LabelSchema) -> Result<PathBuf> {
    let path = dir.join("palette.json");
    let text = serde_json::to_string_pretty(schema).expect("schema serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
}

/// Reads a corpus manifest: one `image<TAB>mask` pair per line.
///
/// Relative paths resolve against the manifest's directory. Blank lines and
/// lines starting with `#` are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (image, mask) = line.split_once('\t').ok_or_else(|| {
            Error::format(
                path,
                format!("line {}: expected image<TAB>mask", lineno + 1),
            )
        })?;
        entries.push(ManifestEntry {
            image: base.join(image),
            mask: base.join(mask),
        });
    }
    Ok(entries)
}

/// Writes a manifest with paths relative to the manifest's directory where possible.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
    let mut out = String::new();
    for entry in entries {
        out.push_str(&rel(&entry.image));
        out.push('\t');
        out.push_str(&rel(&entry.mask));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_manifest(path: &Path, schema: &LabelSchema) -> Result<Vec<SegmentationSample>> {
    read_manifest(path)?
        .iter()
        .map(|e| load_sample(&e.image, &e.mask, schema))
        .collect()
}

/// Writes samples as `images/NNNN.png` + `masks/NNNN.png` plus `manifest.tsv`
/// and the palette sidecar. Returns the manifest path.
pub fn write_corpus(
    dir: &Path,
    corpus: &[SegmentationSample],
    schema: &LabelSchema,
) -> Result<PathBuf> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    for d in [&images, &masks] {
        std::fs::create_dir_all(d)
            .map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
    }
    let mut entries = Vec::with_capacity(corpus.len());
    for (i, sample) in corpus.iter().enumerate() {
        let name = format!("{i:05}.png");
        let entry = ManifestEntry {
            image: images.join(&name),
            mask: masks.join(&name),
        };
        write_image(&entry.image, &sample.image)?;
        write_mask(&entry.mask, &sample.mask, schema)?;
        entries.push(entry);
    }
    write_palette(dir, schema)?;
    let manifest = dir.join("manifest.tsv");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Statistics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub pixels: Vec<u64>,
    pub fractions: Vec<f64>,
    pub total_pixels: u64,
}

impl ClassDistribution {
    /// A target profile given directly as fractions (no pixel counts).
    pub fn from_fractions(fractions: Vec<f64>) -> Result<Self> {
        if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(Error::Config(
                "fractions must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = fractions.iter().sum();
        if sum <= 0.0 {
            return Err(Error::Config("fractions sum to zero".into()));
        }
        Ok(ClassDistribution {
            pixels: vec![0; fractions.len()],
            fractions: fractions.iter().map(|f| f / sum).collect(),
            total_pixels: 0,
        })
    }

    pub fn from_counts(pixels: Vec<u64>) -> Self {
        let total_pixels: u64 = pixels.iter().sum();
        let fractions = if total_pixels == 0 {
            vec![0.0; pixels.len()]
        } else {
            pixels
                .iter()
                .map(|&p| p as f64 / total_pixels as f64)
                .collect()
        };
        ClassDistribution {
            pixels,
            fractions,
            total_pixels,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.fractions.len()
    }

    pub fn to_csv(&self, schema: &LabelSchema) -> String {
        let mut out = String::from("class,name,pixels,fraction\n");
        for (id, (pixels, fraction)) in self.pixels.iter().zip(&self.fractions).enumerate() {
            let name = schema.classes().get(id).map_or("", |c| c.name.as_str());
            out.push_str(&format!("{id},{name},{pixels},{fraction}\n"));
        }
        out
    }
}

/// Fraction of corpus pixels carrying each class id.
pub fn compute_class_distribution(
    corpus: &[SegmentationSample],
    schema: &LabelSchema,
) -> Result<ClassDistribution> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut pixels = vec![0u64; schema.len()];
    for sample in corpus {
        for (total, count) in pixels.iter_mut().zip(sample.mask.histogram(schema.len())) {
            *total += count;
        }
    }
    Ok(ClassDistribution::from_counts(pixels))
}

// ---------------------------------------------------------------------------
// Splitting

/// Train/validation partition expressed as indices into the corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub seed: u64,
}

impl CorpusSplit {
    pub fn select<'a, T>(indices: &[usize], items: &'a [T]) -> Vec<&'a T> {
        indices.iter().map(|&i| &items[i]).collect()
    }
}

pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.2;

pub fn split_corpus(corpus_len: usize, validation_fraction: f64, seed: u64) -> Result<CorpusSplit> {
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(Error::Config(format!(
            "validation fraction must lie in (0, 1), got {validation_fraction}"
        )));
    }
    if corpus_len < 2 {
        return Err(Error::Config(format!(
            "cannot split a corpus of {corpus_len} sample(s)"
        )));
    }
    let n_val =
        ((validation_fraction * corpus_len as f64).round() as usize).clamp(1, corpus_len - 1);
    let mut order: Vec<usize> = (0..corpus_len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut validation = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    validation.sort_unstable();
    train.sort_unstable();
    Ok(CorpusSplit {
        train,
        validation,
        seed,
    })
}

// ---------------------------------------------------------------------------
// Resizing

/// Shrinks a sample by an integer divisor: bilinear for the image, nearest for the mask.
pub fn downscale(sample: &SegmentationSample, divisor: u32) -> SegmentationSample {
    if divisor <= 1 {
        return sample.clone();
    }
    let width = (sample.width() / divisor).max(1);
    let height = (sample.height() / divisor).max(1);
    resize(sample, width, height)
}

pub fn resize(sample: &SegmentationSample, width: u32, height: u32) -> SegmentationSample {
    let image = image::imageops::resize(
        &sample.image,
        width,
        height,
        image::imageops::FilterType::Triangle,
    );
    SegmentationSample {
        image,
        mask: resize_mask_nearest(&sample.mask, width, height),
        source_id: sample.source_id.clone(),
    }
}

pub fn resize_mask_nearest(mask: &Mask, width: u32, height: u32) -> Mask {
    let mut out = Mask::new(width, height, 0);
    for y in 0..height {
        let sy = ((y as f64 + 0.5) * mask.height as f64 / height as f64).floor() as u32;
        let sy = sy.min(mask.height - 1);
        for x in 0..width {
            let sx = ((x as f64 + 0.5) * mask.width as f64 / width as f64).floor() as u32;
            out.set(x, y, mask.get(sx.min(mask.width - 1), sy));
        }
    }
    out
}
