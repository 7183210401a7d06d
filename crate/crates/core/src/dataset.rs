//! Manifest ingestion, preprocessing into fixed-size crops, the train/val
//! split, and augmented batching.
//!
//! A manifest is a CSV file with header `image,head_x,head_y,tail_x,tail_y`.
//! Coordinates are pixels of the referenced image (`x` = column, `y` = row);
//! relative image paths resolve against the manifest's directory.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{
    adaptive_threshold, augment_brightness, augment_rotate, crop_resize, largest_component,
    transfer_label, BoundingBox, Connectivity, CoordTransform, GrayImage, ImagingError,
    PixelPoint, Polarity,
};
use crate::{KeypointPair, CROP_SIZE};

pub const MANIFEST_HEADER: [&str; 5] = ["image", "head_x", "head_y", "tail_x", "tail_y"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{path}: line {line}: image file {image} not found")]
    MissingImage {
        path: PathBuf,
        line: u64,
        image: PathBuf,
    },
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error("invalid split: {0}")]
    Split(String),
    #[error("invalid sample: {0}")]
    Sample(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    /// Image path exactly as written in the manifest.
    pub image: String,
    /// `image` resolved against the manifest directory.
    pub path: PathBuf,
    pub labels: KeypointPair<PixelPoint>,
}

impl ManifestRow {
    pub fn new(image: impl Into<String>, labels: KeypointPair<PixelPoint>) -> Self {
        let image = image.into();
        Self {
            path: PathBuf::from(&image),
            image,
            labels,
        }
    }
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<(), DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let csv_err = |e: csv::Error| io_err(io::Error::other(e));
    out.write_record(MANIFEST_HEADER).map_err(csv_err)?;
    for row in rows {
        let l = &row.labels;
        out.write_record([
            row.image.clone(),
            l.head.x.to_string(),
            l.head.y.to_string(),
            l.tail.x.to_string(),
            l.tail.y.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = out.into_inner().map_err(|e| io_err(io::Error::other(e.to_string())))?;
    fs::write(path, bytes).map_err(io_err)
}

/// Parses and validates a manifest; rows keep file order.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRow>, DatasetError> {
    let bytes = fs::read(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    let parse_err = |line: u64, message: String| DatasetError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(bytes.as_slice());
    let headers = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if headers.iter().map(str::trim).ne(MANIFEST_HEADER) {
        return Err(parse_err(
            1,
            format!("expected header `{}`", MANIFEST_HEADER.join(",")),
        ));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let mut coords = [0.0f64; 4];
        for (i, c) in coords.iter_mut().enumerate() {
            let field = record[i + 1].trim();
            *c = field
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    parse_err(line, format!("{} is not a finite number: {field:?}", MANIFEST_HEADER[i + 1]))
                })?;
        }
        let image = record[0].trim().to_string();
        if image.is_empty() {
            return Err(parse_err(line, "empty image path".into()));
        }
        let resolved = base.join(&image);
        if !resolved.is_file() {
            return Err(DatasetError::MissingImage {
                path: path.to_path_buf(),
                line,
                image: resolved,
            });
        }
        rows.push(ManifestRow {
            image,
            path: resolved,
            labels: KeypointPair::new(
                PixelPoint::new(coords[0], coords[1]),
                PixelPoint::new(coords[2], coords[3]),
            ),
        });
    }
    Ok(rows)
}

/// A preprocessed crop with labels in crop pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: GrayImage,
    pub labels: KeypointPair<PixelPoint>,
}

impl Sample {
    pub fn new(image: GrayImage, labels: KeypointPair<PixelPoint>) -> Result<Self, DatasetError> {
        let n = image.width();
        if image.height() != n {
            return Err(DatasetError::Sample(format!(
                "crop must be square, got {}x{}",
                n,
                image.height()
            )));
        }
        let hi = n as f64 - 0.5;
        for p in [labels.head, labels.tail] {
            if !(-0.5..=hi).contains(&p.x) || !(-0.5..=hi).contains(&p.y) {
                return Err(DatasetError::Sample(format!(
                    "label ({}, {}) outside the {n}x{n} crop",
                    p.x, p.y
                )));
            }
        }
        Ok(Self { image, labels })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub block: usize,
    pub offset: f64,
    pub polarity: Polarity,
    pub connectivity: Connectivity,
    /// Padding added on every side, as a fraction of the box's longer side.
    pub pad_frac: f64,
    pub out_size: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            block: 51,
            offset: 0.02,
            polarity: Polarity::DarkForeground,
            connectivity: Connectivity::Eight,
            pad_frac: 0.10,
            out_size: CROP_SIZE,
        }
    }
}

/// Threshold → largest component → padded box → resized crop.
#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub crop: GrayImage,
    pub fwd: CoordTransform,
    pub component_box: BoundingBox,
    pub crop_box: BoundingBox,
}

pub fn preprocess_image(img: &GrayImage, cfg: &PreprocessConfig) -> Result<Preprocessed, ImagingError> {
    let mask = adaptive_threshold(img, cfg.block, cfg.offset, cfg.polarity)?;
    let (_, component_box) = largest_component(&mask, cfg.connectivity)?;
    let crop_box = component_box.padded(cfg.pad_frac, img.width(), img.height());
    let (crop, fwd) = crop_resize(img, &crop_box, cfg.out_size)?;
    Ok(Preprocessed {
        crop,
        fwd,
        component_box,
        crop_box,
    })
}

#[derive(Debug, Default)]
pub struct PreprocessReport {
    /// `(manifest row index, sample)` for every accepted row.
    pub samples: Vec<(usize, Sample)>,
    /// Rows whose labels fell outside the crop.
    pub dropped: Vec<usize>,
    /// Rows whose image could not be read or processed.
    pub failures: Vec<(usize, String)>,
}

impl PreprocessReport {
    pub fn into_samples(self) -> Vec<Sample> {
        self.samples.into_iter().map(|(_, s)| s).collect()
    }
}

fn preprocess_row(img: &GrayImage, labels: KeypointPair<PixelPoint>, cfg: &PreprocessConfig) -> Result<Option<Sample>, ImagingError> {
    let pre = preprocess_image(img, cfg)?;
    let head = transfer_label(labels.head, &pre.fwd, cfg.out_size);
    let tail = transfer_label(labels.tail, &pre.fwd, cfg.out_size);
    Ok(match (head, tail) {
        (Some(head), Some(tail)) => Some(Sample {
            image: pre.crop,
            labels: KeypointPair::new(head, tail),
        }),
        _ => None,
    })
}

/// Preprocesses in-memory images with their original-image labels.
pub fn preprocess_images(
    items: &[(GrayImage, KeypointPair<PixelPoint>)],
    cfg: &PreprocessConfig,
) -> PreprocessReport {
    let results: Vec<_> = items
        .par_iter()
        .map(|(img, labels)| preprocess_row(img, *labels, cfg))
        .collect();
    collect_report(results.into_iter().map(|r| r.map_err(|e| e.to_string())))
}

/// Runs every manifest row through the pipeline. Failures and dropped rows are
/// recorded and processing continues.
pub fn preprocess_all(rows: &[ManifestRow], cfg: &PreprocessConfig) -> PreprocessReport {
    let results: Vec<_> = rows
        .par_iter()
        .map(|row| {
            let img = GrayImage::load(&row.path).map_err(|e| e.to_string())?;
            preprocess_row(&img, row.labels, cfg).map_err(|e| format!("{}: {e}", row.image))
        })
        .collect();
    collect_report(results.into_iter())
}

fn collect_report(results: impl Iterator<Item = Result<Option<Sample>, String>>) -> PreprocessReport {
    let mut report = PreprocessReport::default();
    for (i, r) in results.enumerate() {
        match r {
            Ok(Some(sample)) => report.samples.push((i, sample)),
            Ok(None) => report.dropped.push(i),
            Err(e) => report.failures.push((i, e)),
        }
    }
    report
}

/// Writes crops as `crop_NNNN.png` and a manifest in crop coordinates.
pub fn save_samples(dir: &Path, samples: &[(String, Sample)]) -> Result<PathBuf, DatasetError> {
    fs::create_dir_all(dir).map_err(|source| DatasetError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut rows = Vec::with_capacity(samples.len());
    for (name, sample) in samples {
        sample.image.save_png(&dir.join(name))?;
        rows.push(ManifestRow::new(name.clone(), sample.labels));
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &rows)?;
    Ok(manifest)
}

/// Loads an already-preprocessed manifest: every image must be
/// `size × size` and every label inside it.
pub fn load_samples(manifest: &Path, size: usize) -> Result<Vec<Sample>, DatasetError> {
    let rows = load_manifest(manifest)?;
    rows.par_iter()
        .map(|row| {
            let img = GrayImage::load(&row.path)?;
            if img.width() != size || img.height() != size {
                return Err(DatasetError::Sample(format!(
                    "{}: expected a {size}x{size} crop, got {}x{}",
                    row.image,
                    img.width(),
                    img.height()
                )));
            }
            Sample::new(img, row.labels)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Seeded shuffle of `0..n`; the first `round(ratio · n)` indices train.
pub fn split_dataset(n: usize, ratio: f64, seed: u64) -> Result<Split, DatasetError> {
    if n < 2 {
        return Err(DatasetError::Split(format!("need at least 2 samples, got {n}")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DatasetError::Split(format!(
            "ratio {ratio} must lie strictly between 0 and 1"
        )));
    }
    let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val = order.split_off(n_train);
    Ok(Split { train: order, val })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Maximum additive brightness offset.
    pub brightness: f64,
    pub rotate: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            brightness: 0.125,
            rotate: true,
        }
    }
}

/// Brightness jitter then a uniformly drawn quarter-turn (including none).
pub fn augment_sample<R: Rng + ?Sized>(sample: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Sample {
    let img = augment_brightness(&sample.image, rng, cfg.brightness);
    if !cfg.rotate {
        return Sample {
            image: img,
            labels: sample.labels,
        };
    }
    let k = rng.random_range(0..4u8);
    let (image, labels) = augment_rotate(&img, sample.labels, k).expect("crops are square");
    Sample { image, labels }
}

/// One epoch of batches over `indices`, reshuffled from `rng`. The final
/// short batch is kept.
pub struct EpochBatches<'a, R: Rng> {
    samples: &'a [Sample],
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    augment: Option<AugmentConfig>,
    rng: &'a mut R,
}

pub fn batches<'a, R: Rng>(
    samples: &'a [Sample],
    indices: &[usize],
    batch: usize,
    rng: &'a mut R,
    augment: Option<AugmentConfig>,
) -> EpochBatches<'a, R> {
    assert!(batch >= 1, "batch size must be positive");
    let mut order = indices.to_vec();
    order.shuffle(rng);
    EpochBatches {
        samples,
        order,
        pos: 0,
        batch,
        augment,
        rng,
    }
}

impl<R: Rng> Iterator for EpochBatches<'_, R> {
    type Item = Vec<Sample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let chunk = &self.order[self.pos..end];
        self.pos = end;
        let out = chunk
            .iter()
            .map(|&i| match &self.augment {
                Some(cfg) => augment_sample(&self.samples[i], cfg, self.rng),
                None => self.samples[i].clone(),
            })
            .collect();
        Some(out)
    }
}

impl<R: Rng> EpochBatches<'_, R> {
    /// Sample indices in this epoch's order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}
