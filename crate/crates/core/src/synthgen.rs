//! Procedural worm images with exact head/tail labels.
//!
//! A worm is a smooth open centerline (random walk of the tangent angle)
//! stroked with a radius profile that stays full at the head and tapers
//! toward the tail. The head tip is brightened, Gaussian pixel noise is added,
//! and the result is clamped to `[0, 1]`. Worms are darker than the
//! background, matching the default dark-foreground thresholding.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{write_manifest, ManifestRow};
use crate::imaging::{GrayImage, PixelPoint};
use crate::{KeypointPair, CROP_SIZE};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid worm parameters: {0}")]
    InvalidParams(String),
    #[error("could not place a worm inside the canvas after {0} attempts")]
    PlacementFailed(usize),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WormParams {
    /// Centerline length range in pixels, sampled uniformly.
    pub body_length: (f64, f64),
    pub body_width: f64,
    /// Maximum change of tangent angle per centerline step, radians.
    pub curvature: f64,
    pub head_brightness_boost: f64,
    pub noise_std: f64,
    pub background: f64,
    pub body_intensity: f64,
    /// Tail tip radius as a fraction of the full body radius.
    pub tail_taper: f64,
    pub canvas: usize,
}

impl Default for WormParams {
    fn default() -> Self {
        Self {
            body_length: (70.0, 115.0),
            body_width: 15.0,
            curvature: 0.12,
            head_brightness_boost: 0.15,
            noise_std: 0.015,
            background: 0.75,
            body_intensity: 0.3,
            tail_taper: 0.3,
            canvas: CROP_SIZE,
        }
    }
}

const STEP: f64 = 1.5;
const MAX_ATTEMPTS: usize = 100;

impl WormParams {
    /// Clear space kept between the body outline and the canvas edge.
    pub fn margin(&self) -> f64 {
        self.body_width / 2.0 + 3.0
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidParams(m));
        let (lo, hi) = self.body_length;
        if !(lo > 0.0 && lo <= hi) {
            return bad(format!("body_length range ({lo}, {hi}) is empty"));
        }
        if self.body_width < 3.0 {
            return bad(format!("body_width {} below 3 px", self.body_width));
        }
        if hi + 2.0 * self.margin() > self.canvas as f64 {
            return bad(format!(
                "a {hi} px worm does not fit a {} px canvas with margins",
                self.canvas
            ));
        }
        if !(self.curvature >= 0.0) || !(self.noise_std >= 0.0) {
            return bad("curvature and noise_std must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.tail_taper)
            || !(0.0..=1.0).contains(&self.background)
            || !(0.0..=1.0).contains(&self.body_intensity)
        {
            return bad("tail_taper and intensities must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Stroke radius at arc fraction `t` (0 = head, 1 = tail).
    pub fn radius_at(&self, t: f64) -> f64 {
        let full = self.body_width / 2.0;
        if t <= 0.5 {
            full
        } else {
            let s = ((t - 0.5) / 0.5).min(1.0);
            full * (1.0 - s * (1.0 - self.tail_taper))
        }
    }
}

/// A rendered worm plus the noise-free coverage map used to draw it.
#[derive(Debug, Clone)]
pub struct WormRender {
    pub image: GrayImage,
    /// Fraction of each pixel covered by the body, in `[0, 1]`.
    pub coverage: Vec<f32>,
    pub centerline: Vec<PixelPoint>,
    pub labels: KeypointPair<PixelPoint>,
}

/// Random centerline whose stroked body fits inside the canvas margins.
pub fn random_centerline<R: Rng + ?Sized>(
    rng: &mut R,
    p: &WormParams,
) -> Result<Vec<PixelPoint>, SynthError> {
    p.validate()?;
    let margin = p.margin();
    let span = p.canvas as f64 - 2.0 * margin;
    for _ in 0..MAX_ATTEMPTS {
        let length = if p.body_length.0 == p.body_length.1 {
            p.body_length.0
        } else {
            rng.random_range(p.body_length.0..=p.body_length.1)
        };
        let steps = (length / STEP).ceil().max(1.0) as usize;
        let step = length / steps as f64;
        let mut angle = rng.random_range(0.0..std::f64::consts::TAU);
        let mut pts = vec![PixelPoint::new(0.0, 0.0)];
        for _ in 0..steps {
            if p.curvature > 0.0 {
                angle += rng.random_range(-p.curvature..=p.curvature);
            }
            let last = pts[pts.len() - 1];
            pts.push(PixelPoint::new(
                last.x + step * angle.cos(),
                last.y + step * angle.sin(),
            ));
        }
        let (min_x, max_x) = extent(pts.iter().map(|q| q.x));
        let (min_y, max_y) = extent(pts.iter().map(|q| q.y));
        let (w, h) = (max_x - min_x, max_y - min_y);
        if w > span || h > span {
            continue;
        }
        let ox = margin - min_x + rng.random_range(0.0..=span - w);
        let oy = margin - min_y + rng.random_range(0.0..=span - h);
        return Ok(pts
            .into_iter()
            .map(|q| PixelPoint::new(q.x + ox, q.y + oy))
            .collect());
    }
    Err(SynthError::PlacementFailed(MAX_ATTEMPTS))
}

fn extent(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    })
}

/// Distance from `q` to segment `a→b` and the projection parameter in `[0, 1]`.
fn segment_distance(q: PixelPoint, a: PixelPoint, b: PixelPoint) -> (f64, f64) {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let s = if len2 == 0.0 {
        0.0
    } else {
        (((q.x - a.x) * dx + (q.y - a.y) * dy) / len2).clamp(0.0, 1.0)
    };
    let (px, py) = (a.x + s * dx, a.y + s * dy);
    ((q.x - px).hypot(q.y - py), s)
}

/// Strokes a centerline (first point = head) onto a fresh canvas.
pub fn render_worm<R: Rng + ?Sized>(
    rng: &mut R,
    centerline: &[PixelPoint],
    p: &WormParams,
) -> Result<WormRender, SynthError> {
    p.validate()?;
    if centerline.len() < 2 {
        return Err(SynthError::InvalidParams("centerline needs two points".into()));
    }
    let n = p.canvas;
    let mut arc = Vec::with_capacity(centerline.len());
    arc.push(0.0);
    for w in centerline.windows(2) {
        arc.push(arc[arc.len() - 1] + w[0].distance(&w[1]));
    }
    let total = arc[arc.len() - 1].max(f64::EPSILON);
    let head = centerline[0];
    let tail = centerline[centerline.len() - 1];
    let reach = p.body_width / 2.0 + 1.0;
    let (min_x, max_x) = extent(centerline.iter().map(|q| q.x));
    let (min_y, max_y) = extent(centerline.iter().map(|q| q.y));

    let mut coverage = vec![0.0f32; n * n];
    for y in 0..n {
        let fy = y as f64;
        if fy < min_y - reach || fy > max_y + reach {
            continue;
        }
        for x in 0..n {
            let fx = x as f64;
            if fx < min_x - reach || fx > max_x + reach {
                continue;
            }
            let q = PixelPoint::new(fx, fy);
            // signed distance to the stroked outline, negative inside
            let mut best = f64::INFINITY;
            for (i, seg) in centerline.windows(2).enumerate() {
                let (d, s) = segment_distance(q, seg[0], seg[1]);
                if d - p.body_width / 2.0 >= best {
                    continue;
                }
                let t = (arc[i] + s * (arc[i + 1] - arc[i])) / total;
                best = best.min(d - p.radius_at(t));
            }
            coverage[y * n + x] = (0.5 - best).clamp(0.0, 1.0) as f32;
        }
    }

    let noise = (p.noise_std > 0.0).then(|| Normal::new(0.0, p.noise_std).expect("valid std"));
    let near = 0.75 * p.body_width;
    let far = 1.5 * p.body_width;
    let mut data = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let cov = coverage[y * n + x] as f64;
            let dh = PixelPoint::new(x as f64, y as f64).distance(&head);
            let head_weight = ((far - dh) / (far - near)).clamp(0.0, 1.0);
            let body = p.body_intensity + p.head_brightness_boost * head_weight;
            let mut v = p.background * (1.0 - cov) + body * cov;
            if let Some(normal) = &noise {
                v += normal.sample(rng);
            }
            data.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    let image = GrayImage::new(n, n, data).expect("clamped canvas");
    Ok(WormRender {
        image,
        coverage,
        centerline: centerline.to_vec(),
        labels: KeypointPair::new(head, tail),
    })
}

pub fn gen_worm_render<R: Rng + ?Sized>(rng: &mut R, p: &WormParams) -> Result<WormRender, SynthError> {
    let centerline = random_centerline(rng, p)?;
    render_worm(rng, &centerline, p)
}

/// One labeled worm image: `(image, head, tail)`.
pub fn gen_worm<R: Rng + ?Sized>(
    rng: &mut R,
    p: &WormParams,
) -> Result<(GrayImage, PixelPoint, PixelPoint), SynthError> {
    let r = gen_worm_render(rng, p)?;
    Ok((r.image, r.labels.head, r.labels.tail))
}

/// Independent generator for image `index` of a dataset seeded with `seed`.
pub fn item_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Generates `n` labeled worms in memory, one independent stream per image.
pub fn gen_worms(n: usize, seed: u64, p: &WormParams) -> Result<Vec<WormRender>, SynthError> {
    (0..n)
        .into_par_iter()
        .map(|i| gen_worm_render(&mut item_rng(seed, i as u64), p))
        .collect()
}

/// Writes `worm_NNNN.png` images plus `manifest.csv` into `out_dir`.
/// Returns the manifest path.
pub fn gen_dataset(n: usize, seed: u64, out_dir: &Path, p: &WormParams) -> Result<PathBuf, SynthError> {
    if n == 0 {
        return Err(SynthError::InvalidParams("dataset size must be at least 1".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| SynthError::Io {
        path: out_dir.to_path_buf(),
        message: e.to_string(),
    })?;
    let worms = gen_worms(n, seed, p)?;
    let width = n.to_string().len().max(4);
    let mut rows = Vec::with_capacity(n);
    for (i, worm) in worms.iter().enumerate() {
        let name = format!("worm_{i:0width$}.png");
        let path = out_dir.join(&name);
        worm.image.save_png(&path).map_err(|e| SynthError::Io {
            path: path.clone(),
            message: e.to_string(),
        })?;
        rows.push(ManifestRow::new(name, worm.labels));
    }
    let manifest = out_dir.join("manifest.csv");
    write_manifest(&manifest, &rows).map_err(|e| SynthError::Io {
        path: manifest.clone(),
        message: e.to_string(),
    })?;
    Ok(manifest)
}
