//! Classical image pipeline: adaptive thresholding, connected components,
//! bounding-box cropping, label transfer, and the two training augmentations.
//!
//! Coordinates are continuous with pixel centers at integers: `x` is the
//! column, `y` the row, and the top-left pixel center is `(0, 0)`.

use std::collections::VecDeque;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::KeypointPair;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("block size {block} must be odd and within [3, {max}]")]
    InvalidBlock { block: usize, max: usize },
    #[error("threshold offset must be non-negative, got {0}")]
    NegativeOffset(f64),
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("expected a square image, got {width}x{height}")]
    NotSquare { width: usize, height: usize },
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("bounding box {0:?} does not fit inside a {1}x{2} image")]
    BoxOutOfBounds(BoundingBox, usize, usize),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: cannot decode image: {message}")]
    Decode { path: PathBuf, message: String },
}

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::InvalidImage(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(ImagingError::InvalidImage(format!(
                "{} values for a {width}x{height} image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ImagingError::InvalidImage(format!(
                "intensity {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        assert!(width > 0 && height > 0 && (0.0..=1.0).contains(&value));
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Bilinear sample at a continuous position, clamping to the image edge.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f32 {
        let xmax = (self.width - 1) as f64;
        let ymax = (self.height - 1) as f64;
        let x = x.clamp(0.0, xmax);
        let y = y.clamp(0.0, ymax);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let top = self.get(x0, y0) as f64 * (1.0 - fx) + self.get(x1, y0) as f64 * fx;
        let bottom = self.get(x0, y1) as f64 * (1.0 - fx) + self.get(x1, y1) as f64 * fx;
        (top * (1.0 - fy) + bottom * fy) as f32
    }

    /// Loads an 8-bit grayscale PNG or a binary PGM (P5), mapping `v` to `v / 255`.
    pub fn load(path: &Path) -> Result<Self, ImagingError> {
        let bytes = fs::read(path).map_err(|source| ImagingError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if bytes.starts_with(b"P5") {
            decode_pgm(&bytes).map_err(|message| ImagingError::Decode {
                path: path.to_path_buf(),
                message,
            })
        } else {
            let decoded = image::load_from_memory(&bytes).map_err(|e| ImagingError::Decode {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
            let luma = decoded.into_luma8();
            let (w, h) = luma.dimensions();
            let data = luma.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
            GrayImage::new(w as usize, h as usize, data).map_err(|e| ImagingError::Decode {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
        }
    }

    /// Quantizes to 8 bits (`round(v * 255)`).
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn encode_png(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let encoder = image::codecs::png::PngEncoder::new(&mut out);
        image::ImageEncoder::write_image(
            encoder,
            &self.to_u8(),
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::L8,
        )
        .expect("in-memory PNG encoding cannot fail");
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImagingError> {
        fs::write(path, self.encode_png()).map_err(|source| ImagingError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn save_pgm(&self, path: &Path) -> Result<(), ImagingError> {
        let io_err = |source| ImagingError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut file = io::BufWriter::new(fs::File::create(path).map_err(io_err)?);
        write!(file, "P5\n{} {}\n255\n", self.width, self.height).map_err(io_err)?;
        file.write_all(&self.to_u8()).map_err(io_err)?;
        file.flush().map_err(io_err)
    }
}

fn decode_pgm(bytes: &[u8]) -> Result<GrayImage, String> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| "malformed PGM header".to_string())?;
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format!("unsupported PGM maxval {maxval}, expected 255"));
    }
    let raster = bytes
        .get(pos..pos + width * height)
        .ok_or_else(|| "truncated PGM raster".to_string())?;
    let data = raster.iter().map(|&v| v as f32 / 255.0).collect();
    GrayImage::new(width, height, data).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), width * height, "mask data length");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self::new(width, height, vec![false; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    /// Out-of-bounds reads are background.
    pub fn get_signed(&self, x: isize, y: isize) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.data[y as usize * self.width + x as usize]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }
}

/// Axis-aligned pixel box; `(x0, y0)` is the inclusive top-left pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl BoundingBox {
    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.w > 0 && self.h > 0 && self.x0 + self.w <= width && self.y0 + self.h <= height
    }

    pub fn contains_pixel(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x0 + self.w && y >= self.y0 && y < self.y0 + self.h
    }

    /// Grows every side by `frac · max(w, h)` pixels (rounded), clamped to the image.
    pub fn padded(&self, frac: f64, width: usize, height: usize) -> BoundingBox {
        let pad = (frac * self.w.max(self.h) as f64).round().max(0.0) as usize;
        let x0 = self.x0.saturating_sub(pad);
        let y0 = self.y0.saturating_sub(pad);
        let x1 = (self.x0 + self.w + pad).min(width);
        let y1 = (self.y0 + self.h + pad).min(height);
        BoundingBox {
            x0,
            y0,
            w: x1 - x0,
            h: y1 - y0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PixelPoint {
    pub x: f64,
    pub y: f64,
}

impl PixelPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &PixelPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Polarity {
    DarkForeground,
    BrightForeground,
}

impl Polarity {
    pub fn flipped(self) -> Self {
        match self {
            Polarity::DarkForeground => Polarity::BrightForeground,
            Polarity::BrightForeground => Polarity::DarkForeground,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    pub fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(1, 0), (-1, 0), (0, 1), (0, -1)],
            Connectivity::Eight => &[
                (1, 0),
                (-1, 0),
                (0, 1),
                (0, -1),
                (1, 1),
                (1, -1),
                (-1, 1),
                (-1, -1),
            ],
        }
    }
}

/// Mean over a `block × block` window, with out-of-image reads clamped to
/// the nearest edge pixel. Separable, accumulated in `f64`.
pub fn local_mean(img: &GrayImage, block: usize) -> Vec<f64> {
    let (w, h) = (img.width, img.height);
    let half = (block / 2) as isize;
    let n = block as f64;

    let mut horizontal = vec![0.0f64; w * h];
    for y in 0..h {
        let row = &img.data[y * w..(y + 1) * w];
        for x in 0..w {
            let mut sum = 0.0;
            for dx in -half..=half {
                let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                sum += row[sx] as f64;
            }
            horizontal[y * w + x] = sum / n;
        }
    }

    let mut out = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0.0;
            for dy in -half..=half {
                let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                sum += horizontal[sy * w + x];
            }
            out[y * w + x] = sum / n;
        }
    }
    out
}

/// Marks pixels darker (or brighter) than their local mean by more than `c`.
pub fn adaptive_threshold(
    img: &GrayImage,
    block: usize,
    c: f64,
    polarity: Polarity,
) -> Result<BinaryMask, ImagingError> {
    let max = img.width.min(img.height);
    if block % 2 == 0 || block < 3 || block > max {
        return Err(ImagingError::InvalidBlock { block, max });
    }
    if c < 0.0 || c.is_nan() {
        return Err(ImagingError::NegativeOffset(c));
    }
    let mean = local_mean(img, block);
    let data = img
        .data
        .iter()
        .zip(&mean)
        .map(|(&v, &m)| match polarity {
            Polarity::DarkForeground => (v as f64) < m - c,
            Polarity::BrightForeground => (v as f64) > m + c,
        })
        .collect();
    Ok(BinaryMask::new(img.width, img.height, data))
}

/// Labels connected foreground regions. Label 0 is background; components are
/// numbered from 1 in raster order of their first pixel.
pub fn label_components(mask: &BinaryMask, connectivity: Connectivity) -> (Vec<u32>, u32) {
    let (w, h) = (mask.width, mask.height);
    let mut labels = vec![0u32; w * h];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !mask.data[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(idx) = queue.pop_front() {
            let (x, y) = ((idx % w) as isize, (idx / w) as isize);
            for &(dx, dy) in connectivity.offsets() {
                let (nx, ny) = (x + dx, y + dy);
                if mask.get_signed(nx, ny) {
                    let n = ny as usize * w + nx as usize;
                    if labels[n] == 0 {
                        labels[n] = next;
                        queue.push_back(n);
                    }
                }
            }
        }
    }
    (labels, next)
}

/// Returns the component with the most pixels and its tight bounding box.
/// Ties go to the smaller `(y0, x0)` box corner.
pub fn largest_component(
    mask: &BinaryMask,
    connectivity: Connectivity,
) -> Result<(BinaryMask, BoundingBox), ImagingError> {
    let (labels, count) = label_components(mask, connectivity);
    if count == 0 {
        return Err(ImagingError::EmptyMask);
    }
    let w = mask.width;
    // (pixels, min_x, min_y, max_x, max_y) per label
    let mut stats = vec![(0usize, usize::MAX, usize::MAX, 0usize, 0usize); count as usize + 1];
    for (idx, &label) in labels.iter().enumerate() {
        if label == 0 {
            continue;
        }
        let (x, y) = (idx % w, idx / w);
        let s = &mut stats[label as usize];
        s.0 += 1;
        s.1 = s.1.min(x);
        s.2 = s.2.min(y);
        s.3 = s.3.max(x);
        s.4 = s.4.max(y);
    }
    let best = (1..=count as usize)
        .min_by_key(|&l| {
            let s = stats[l];
            (std::cmp::Reverse(s.0), s.2, s.1)
        })
        .expect("at least one component");
    let s = stats[best];
    let data = labels.iter().map(|&l| l as usize == best).collect();
    let bbox = BoundingBox {
        x0: s.1,
        y0: s.2,
        w: s.3 - s.1 + 1,
        h: s.4 - s.2 + 1,
    };
    Ok((BinaryMask::new(mask.width, mask.height, data), bbox))
}

/// Axis-aligned affine map `p ↦ (sx·x + tx, sy·y + ty)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordTransform {
    pub sx: f64,
    pub sy: f64,
    pub tx: f64,
    pub ty: f64,
}

impl CoordTransform {
    pub const IDENTITY: CoordTransform = CoordTransform {
        sx: 1.0,
        sy: 1.0,
        tx: 0.0,
        ty: 0.0,
    };

    /// Maps the outer edges of `bbox` onto the outer edges of an `out × out` grid.
    pub fn box_to_crop(bbox: &BoundingBox, out: usize) -> Self {
        let sx = out as f64 / bbox.w as f64;
        let sy = out as f64 / bbox.h as f64;
        CoordTransform {
            sx,
            sy,
            tx: -(bbox.x0 as f64 - 0.5) * sx - 0.5,
            ty: -(bbox.y0 as f64 - 0.5) * sy - 0.5,
        }
    }

    pub fn apply(&self, p: PixelPoint) -> PixelPoint {
        PixelPoint::new(self.sx * p.x + self.tx, self.sy * p.y + self.ty)
    }

    pub fn inverse(&self) -> CoordTransform {
        CoordTransform {
            sx: 1.0 / self.sx,
            sy: 1.0 / self.sy,
            tx: -self.tx / self.sx,
            ty: -self.ty / self.sy,
        }
    }
}

/// Resamples `bbox` to an `out × out` image with bilinear interpolation.
pub fn crop_resize(
    img: &GrayImage,
    bbox: &BoundingBox,
    out: usize,
) -> Result<(GrayImage, CoordTransform), ImagingError> {
    if !bbox.fits(img.width, img.height) {
        return Err(ImagingError::BoxOutOfBounds(*bbox, img.width, img.height));
    }
    let fwd = CoordTransform::box_to_crop(bbox, out);
    let inv = fwd.inverse();
    let mut data = Vec::with_capacity(out * out);
    for v in 0..out {
        for u in 0..out {
            let src = inv.apply(PixelPoint::new(u as f64, v as f64));
            data.push(img.sample_bilinear(src.x, src.y));
        }
    }
    let crop = GrayImage {
        width: out,
        height: out,
        data,
    };
    Ok((crop, fwd))
}

/// Maps a label into crop coordinates, or `None` when it falls outside the crop.
pub fn transfer_label(p: PixelPoint, fwd: &CoordTransform, out: usize) -> Option<PixelPoint> {
    let q = fwd.apply(p);
    let hi = out as f64 - 0.5;
    let inside = |v: f64| (-0.5..=hi).contains(&v);
    (inside(q.x) && inside(q.y)).then_some(q)
}

/// Adds one uniform offset in `[-max_frac, max_frac]` to every pixel, then clamps.
pub fn augment_brightness<R: Rng + ?Sized>(img: &GrayImage, rng: &mut R, max_frac: f64) -> GrayImage {
    assert!((0.0..=1.0).contains(&max_frac), "max_frac must lie in [0, 1]");
    if max_frac == 0.0 {
        return img.clone();
    }
    let delta = rng.random_range(-max_frac..=max_frac) as f32;
    GrayImage {
        width: img.width,
        height: img.height,
        data: img.data.iter().map(|v| (v + delta).clamp(0.0, 1.0)).collect(),
    }
}

/// Counter-clockwise quarter turn of a point in an `n × n` image.
pub fn rotate_point_ccw(p: PixelPoint, n: usize, k: u8) -> PixelPoint {
    let last = n as f64 - 1.0;
    let mut q = p;
    for _ in 0..k % 4 {
        q = PixelPoint::new(q.y, last - q.x);
    }
    q
}

/// Rotates a square image and its labels by `k · 90°` counter-clockwise.
pub fn augment_rotate(
    img: &GrayImage,
    labels: KeypointPair<PixelPoint>,
    k: u8,
) -> Result<(GrayImage, KeypointPair<PixelPoint>), ImagingError> {
    if img.width != img.height {
        return Err(ImagingError::NotSquare {
            width: img.width,
            height: img.height,
        });
    }
    let n = img.width;
    let k = k % 4;
    let data = if k == 0 {
        img.data.clone()
    } else {
        let mut data = vec![0.0f32; n * n];
        for y in 0..n {
            for x in 0..n {
                let (nx, ny) = match k {
                    1 => (y, n - 1 - x),
                    2 => (n - 1 - x, n - 1 - y),
                    _ => (n - 1 - y, x),
                };
                data[ny * n + nx] = img.data[y * n + x];
            }
        }
        data
    };
    let rotated = GrayImage {
        width: n,
        height: n,
        data,
    };
    Ok((rotated, labels.map(|p| rotate_point_ccw(p, n, k))))
}
