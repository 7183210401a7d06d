//! PCK scoring, coordinate de-normalization, and multi-run reporting.

use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::Sample;
use crate::dsnt::{self, coord_grids, softmax2d, DsntError, Heatmap, NormCoord};
use crate::imaging::{GrayImage, PixelPoint};
use crate::nn::{NetworkParams, NnError, Real};
use crate::KeypointPair;

pub const DEFAULT_THRESHOLDS: [f64; 3] = [7.0, 15.0, 30.0];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{preds} predictions for {gts} ground-truth pairs")]
    LengthMismatch { preds: usize, gts: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("accuracy tables have different thresholds")]
    ShapeMismatch,
    #[error(transparent)]
    Network(#[from] NnError),
    #[error(transparent)]
    Dsnt(#[from] DsntError),
}

/// Normalized coordinate to pixel: `((c + 1) · W − 1) / 2` per axis.
pub fn norm_to_pixels(c: NormCoord, size: usize) -> PixelPoint {
    let w = size as f64;
    PixelPoint::new(((c.x + 1.0) * w - 1.0) / 2.0, ((c.y + 1.0) * w - 1.0) / 2.0)
}

/// Inverse of [`norm_to_pixels`].
pub fn pixels_to_norm(p: PixelPoint, size: usize) -> NormCoord {
    let w = size as f64;
    NormCoord::new((2.0 * p.x + 1.0) / w - 1.0, (2.0 * p.y + 1.0) / w - 1.0)
}

/// Fraction of head and tail predictions within `threshold` pixels (inclusive).
pub fn pck(
    preds: &[KeypointPair<PixelPoint>],
    gts: &[KeypointPair<PixelPoint>],
    threshold: f64,
) -> Result<KeypointPair<f64>, EvalError> {
    if preds.len() != gts.len() {
        return Err(EvalError::LengthMismatch {
            preds: preds.len(),
            gts: gts.len(),
        });
    }
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = preds.len() as f64;
    let mut hits = KeypointPair::new(0usize, 0usize);
    for (p, g) in preds.iter().zip(gts) {
        hits.head += usize::from(p.head.distance(&g.head) <= threshold);
        hits.tail += usize::from(p.tail.distance(&g.tail) <= threshold);
    }
    Ok(hits.map(|h| h as f64 / n))
}

/// Anything that maps a crop to head/tail pixel coordinates.
pub trait KeypointModel: Sync {
    fn predict(&self, img: &GrayImage) -> Result<KeypointPair<PixelPoint>, EvalError>;
}

/// Network output decoded into probabilities and coordinates.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub probs: KeypointPair<Heatmap>,
    pub norm: KeypointPair<NormCoord>,
    pub pixels: KeypointPair<PixelPoint>,
}

/// forward → softmax → DSNT → pixels.
pub fn predict_detailed<T: Real>(params: &NetworkParams<T>, img: &GrayImage) -> Result<Prediction, EvalError> {
    let logits = params.forward(img)?;
    let grids = coord_grids(params.arch.heatmap_size);
    let probs = logits.map(|z| softmax2d(&z));
    let norm = KeypointPair::new(
        dsnt::dsnt(&probs.head, &grids)?,
        dsnt::dsnt(&probs.tail, &grids)?,
    );
    let size = params.arch.input_size;
    Ok(Prediction {
        pixels: norm.map(|c| norm_to_pixels(c, size)),
        probs,
        norm,
    })
}

impl<T: Real> KeypointModel for NetworkParams<T> {
    fn predict(&self, img: &GrayImage) -> Result<KeypointPair<PixelPoint>, EvalError> {
        Ok(predict_detailed(self, img)?.pixels)
    }
}

/// Single-run accuracies in percent, one entry per threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyTable {
    pub thresholds: Vec<f64>,
    pub head: Vec<f64>,
    pub tail: Vec<f64>,
    /// Mean of the head and tail entries.
    pub average: Vec<f64>,
}

pub fn accuracy_table(
    preds: &[KeypointPair<PixelPoint>],
    gts: &[KeypointPair<PixelPoint>],
    thresholds: &[f64],
) -> Result<AccuracyTable, EvalError> {
    if thresholds.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut table = AccuracyTable {
        thresholds: thresholds.to_vec(),
        head: Vec::new(),
        tail: Vec::new(),
        average: Vec::new(),
    };
    for &t in thresholds {
        let f = pck(preds, gts, t)?;
        let (h, tl) = (100.0 * f.head, 100.0 * f.tail);
        table.head.push(h);
        table.tail.push(tl);
        table.average.push((h + tl) / 2.0);
    }
    Ok(table)
}

/// Predicts every sample (without augmentation) and scores the predictions.
pub fn evaluate<M: KeypointModel + ?Sized>(
    model: &M,
    samples: &[Sample],
    thresholds: &[f64],
) -> Result<(AccuracyTable, Vec<KeypointPair<PixelPoint>>), EvalError> {
    let preds = samples
        .par_iter()
        .map(|s| model.predict(&s.image))
        .collect::<Result<Vec<_>, _>>()?;
    let gts: Vec<_> = samples.iter().map(|s| s.labels).collect();
    Ok((accuracy_table(&preds, &gts, thresholds)?, preds))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeypointRow {
    Head,
    Tail,
    Average,
}

impl KeypointRow {
    pub fn label(self) -> &'static str {
        match self {
            KeypointRow::Head => "Head",
            KeypointRow::Tail => "Tail",
            KeypointRow::Average => "Average",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub keypoint: KeypointRow,
    pub threshold: f64,
    pub mean: f64,
    pub std: f64,
}

/// Mean ± sample standard deviation across runs, in table order
/// (head rows, then tail rows, then average rows).
#[derive(Debug, Clone, PartialEq)]
pub struct PckReport {
    pub runs: usize,
    pub rows: Vec<ReportRow>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn aggregate_runs(tables: &[AccuracyTable]) -> Result<PckReport, EvalError> {
    let first = tables.first().ok_or(EvalError::Empty)?;
    if tables.iter().any(|t| {
        t.thresholds != first.thresholds
            || t.head.len() != first.thresholds.len()
            || t.tail.len() != first.thresholds.len()
            || t.average.len() != first.thresholds.len()
    }) {
        return Err(EvalError::ShapeMismatch);
    }
    let mut rows = Vec::new();
    for keypoint in [KeypointRow::Head, KeypointRow::Tail, KeypointRow::Average] {
        for (i, &threshold) in first.thresholds.iter().enumerate() {
            let values: Vec<f64> = tables
                .iter()
                .map(|t| match keypoint {
                    KeypointRow::Head => t.head[i],
                    KeypointRow::Tail => t.tail[i],
                    KeypointRow::Average => t.average[i],
                })
                .collect();
            let (mean, std) = mean_std(&values);
            rows.push(ReportRow {
                keypoint,
                threshold,
                mean,
                std,
            });
        }
    }
    Ok(PckReport {
        runs: tables.len(),
        rows,
    })
}

fn fmt_threshold(t: f64) -> String {
    if t.fract() == 0.0 {
        format!("{}", t as i64)
    } else {
        format!("{t}")
    }
}

impl PckReport {
    pub fn row(&self, keypoint: KeypointRow, threshold: f64) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.keypoint == keypoint && r.threshold == threshold)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("keypoint,threshold,mean,std,runs\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{:.2},{:.2},{}",
                r.keypoint.label().to_lowercase(),
                fmt_threshold(r.threshold),
                r.mean,
                r.std,
                self.runs
            )
            .unwrap();
        }
        out
    }

    /// Aligned text table, one `Keypoint (PCK @ p)   mean ± std` line per row.
    pub fn to_text(&self) -> String {
        let labels: Vec<String> = self
            .rows
            .iter()
            .map(|r| format!("{} (PCK @ {})", r.keypoint.label(), fmt_threshold(r.threshold)))
            .collect();
        let width = labels.iter().map(String::len).max().unwrap_or(0);
        let mut out = format!(
            "{:<width$}  Percentage Accuracy (mean ± std over {} run{})\n",
            "",
            self.runs,
            if self.runs == 1 { "" } else { "s" }
        );
        for (label, r) in labels.iter().zip(&self.rows) {
            writeln!(out, "{label:<width$}  {:>6.2} ± {:.2}", r.mean, r.std).unwrap();
        }
        out
    }
}
