//! Static SVG figures: annotated predictions, baseline contours, and training
//! curves. Numbers are printed with fixed precision so output is byte-stable.

use std::fmt::Write as _;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use thiserror::Error;

use crate::baseline::{Contour, Proposals};
use crate::dsnt::Heatmap;
use crate::imaging::{GrayImage, PixelPoint};
use crate::train::MetricsRow;
use crate::KeypointPair;

pub const GT_HEAD: &str = "#00a000";
pub const PRED_HEAD: &str = "#0050ff";
pub const GT_TAIL: &str = "#e00000";
pub const PRED_TAIL: &str = "#e000e0";

/// Display scale for image figures.
const SCALE: f64 = 3.0;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("no metrics to plot")]
    NoMetrics,
}

fn open_svg(out: &mut String, w: f64, h: f64) {
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}">"#
    )
    .unwrap();
}

fn embed_image(out: &mut String, img: &GrayImage) {
    let png = img.encode_png();
    let (w, h) = (img.width() as f64 * SCALE, img.height() as f64 * SCALE);
    writeln!(
        out,
        r#"<image x="0" y="0" width="{w:.0}" height="{h:.0}" style="image-rendering:pixelated" href="data:image/png;base64,{}"/>"#,
        STANDARD.encode(png)
    )
    .unwrap();
}

/// Pixel-centre coordinates to SVG user units.
fn to_svg(p: PixelPoint) -> (f64, f64) {
    ((p.x + 0.5) * SCALE, (p.y + 0.5) * SCALE)
}

fn marker(out: &mut String, p: PixelPoint, color: &str, label: &str) {
    let (x, y) = to_svg(p);
    writeln!(
        out,
        r#"<circle cx="{x:.2}" cy="{y:.2}" r="5.00" fill="none" stroke="{color}" stroke-width="2.50"><title>{label}</title></circle>"#
    )
    .unwrap();
}

/// Crop with ground truth (optional) and predicted keypoints, plus the head
/// probability map drawn as a translucent grid over the image.
pub fn prediction_svg(
    img: &GrayImage,
    gt: Option<&KeypointPair<PixelPoint>>,
    pred: &KeypointPair<PixelPoint>,
    head_probs: &Heatmap,
) -> String {
    let (w, h) = (img.width() as f64 * SCALE, img.height() as f64 * SCALE);
    let mut out = String::new();
    open_svg(&mut out, w, h);
    embed_image(&mut out, img);

    let k = head_probs.size();
    let (cw, ch) = (w / k as f64, h / k as f64);
    let peak = head_probs.values().iter().cloned().fold(0.0, f64::max);
    out.push_str("<g stroke=\"#ffff00\" stroke-width=\"0.75\">\n");
    for (i, &p) in head_probs.values().iter().enumerate() {
        let (r, c) = (i / k, i % k);
        let alpha = if peak > 0.0 { 0.5 * p / peak } else { 0.0 };
        writeln!(
            out,
            r##"<rect x="{:.2}" y="{:.2}" width="{cw:.2}" height="{ch:.2}" fill="#ffff00" fill-opacity="{alpha:.3}"><title>{p:.4}</title></rect>"##,
            c as f64 * cw,
            r as f64 * ch
        )
        .unwrap();
    }
    out.push_str("</g>\n");

    if let Some(gt) = gt {
        marker(&mut out, gt.head, GT_HEAD, "ground truth head");
        marker(&mut out, gt.tail, GT_TAIL, "ground truth tail");
    }
    marker(&mut out, pred.head, PRED_HEAD, "predicted head");
    marker(&mut out, pred.tail, PRED_TAIL, "predicted tail");
    out.push_str("</svg>\n");
    out
}

/// Image with the traced contour in red and head/tail proposals in blue.
pub fn baseline_svg(img: &GrayImage, contour: &Contour, proposals: Option<&Proposals>) -> String {
    let (w, h) = (img.width() as f64 * SCALE, img.height() as f64 * SCALE);
    let mut out = String::new();
    open_svg(&mut out, w, h);
    embed_image(&mut out, img);
    let pts: Vec<String> = contour
        .points()
        .into_iter()
        .map(|p| {
            let (x, y) = to_svg(p);
            format!("{x:.1},{y:.1}")
        })
        .collect();
    writeln!(
        out,
        r##"<polygon points="{}" fill="none" stroke="#ff0000" stroke-width="1.50"/>"##,
        pts.join(" ")
    )
    .unwrap();
    if let Some(p) = proposals {
        for (corner, name) in [(&p.head, "head proposal"), (&p.tail, "tail proposal")] {
            let (x, y) = to_svg(corner.point);
            writeln!(
                out,
                r##"<circle cx="{x:.2}" cy="{y:.2}" r="6.00" fill="#0050ff" fill-opacity="0.80"><title>{name} ({:.3} rad)</title></circle>"##,
                corner.angle
            )
            .unwrap();
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Per-epoch mean over runs, truncated to the shortest run.
pub fn average_curves(runs: &[Vec<MetricsRow>]) -> Result<Vec<MetricsRow>, RenderError> {
    let len = runs.iter().map(Vec::len).min().ok_or(RenderError::NoMetrics)?;
    if len == 0 {
        return Err(RenderError::NoMetrics);
    }
    let n = runs.len() as f64;
    Ok((0..len)
        .map(|i| {
            let mean = |f: fn(&MetricsRow) -> f64| runs.iter().map(|r| f(&r[i])).sum::<f64>() / n;
            MetricsRow {
                epoch: runs[0][i].epoch,
                train_loss: mean(|r| r.train_loss),
                val_loss: mean(|r| r.val_loss),
                val_pck15: mean(|r| r.val_pck15),
            }
        })
        .collect())
}

struct Panel {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    x_max: f64,
    y_max: f64,
}

impl Panel {
    fn map(&self, ex: f64, ey: f64) -> (f64, f64) {
        let px = self.x + self.w * (ex - 1.0) / (self.x_max - 1.0).max(1.0);
        let py = self.y + self.h * (1.0 - ey / self.y_max);
        (px, py)
    }

    fn axes(&self, out: &mut String, title: &str, y_label_digits: usize) {
        let (x, y, w, h) = (self.x, self.y, self.w, self.h);
        writeln!(
            out,
            r##"<rect x="{x:.1}" y="{y:.1}" width="{w:.1}" height="{h:.1}" fill="none" stroke="#000000"/>"##
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="14">{title}</text>"#,
            x + w / 2.0,
            y - 10.0
        )
        .unwrap();
        for i in 0..=4 {
            let v = self.y_max * i as f64 / 4.0;
            let (_, py) = self.map(1.0, v);
            writeln!(
                out,
                r##"<line x1="{:.1}" y1="{py:.1}" x2="{x:.1}" y2="{py:.1}" stroke="#000000"/><text x="{:.1}" y="{:.1}" text-anchor="end" font-size="11">{v:.y_label_digits$}</text>"##,
                x - 4.0,
                x - 6.0,
                py + 4.0
            )
            .unwrap();
        }
        for i in 0..=4 {
            let e = 1.0 + (self.x_max - 1.0) * i as f64 / 4.0;
            let (px, _) = self.map(e, 0.0);
            writeln!(
                out,
                r##"<line x1="{px:.1}" y1="{:.1}" x2="{px:.1}" y2="{:.1}" stroke="#000000"/><text x="{px:.1}" y="{:.1}" text-anchor="middle" font-size="11">{:.0}</text>"##,
                y + h,
                y + h + 4.0,
                y + h + 17.0,
                e.round()
            )
            .unwrap();
        }
        writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="12">epoch</text>"#,
            x + w / 2.0,
            y + h + 34.0
        )
        .unwrap();
    }

    fn line(&self, out: &mut String, rows: &[MetricsRow], f: fn(&MetricsRow) -> f64, color: &str, dashed: bool) {
        let pts: Vec<String> = rows
            .iter()
            .map(|r| {
                let (px, py) = self.map(r.epoch as f64, f(r).clamp(0.0, self.y_max));
                format!("{px:.2},{py:.2}")
            })
            .collect();
        let dash = if dashed { r#" stroke-dasharray="6,4""# } else { "" };
        writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"{dash}/>"#,
            pts.join(" ")
        )
        .unwrap();
    }
}

fn legend(out: &mut String, x: f64, y: f64, entries: &[(&str, &str, bool)]) {
    for (i, (label, color, dashed)) in entries.iter().enumerate() {
        let ly = y + 16.0 * i as f64;
        let dash = if *dashed { r#" stroke-dasharray="6,4""# } else { "" };
        writeln!(
            out,
            r#"<line x1="{x:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"{dash}/><text x="{:.1}" y="{:.1}" font-size="11">{label}</text>"#,
            x + 22.0,
            x + 27.0,
            ly + 4.0
        )
        .unwrap();
    }
}

/// Training versus validation loss (left) and validation PCK@15 (right),
/// averaged over runs.
pub fn curves_svg(runs: &[Vec<MetricsRow>]) -> Result<String, RenderError> {
    let rows = average_curves(runs)?;
    let x_max = rows.last().map(|r| r.epoch as f64).unwrap_or(1.0);
    let loss_max = rows
        .iter()
        .flat_map(|r| [r.train_loss, r.val_loss])
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max);
    let loss_panel = Panel {
        x: 60.0,
        y: 40.0,
        w: 300.0,
        h: 220.0,
        x_max,
        y_max: if loss_max > 0.0 { loss_max * 1.05 } else { 1.0 },
    };
    let pck_panel = Panel {
        x: 450.0,
        y: 40.0,
        w: 300.0,
        h: 220.0,
        x_max,
        y_max: 100.0,
    };
    let mut out = String::new();
    open_svg(&mut out, 780.0, 320.0);
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n");
    loss_panel.axes(&mut out, &format!("Loss (mean of {} run{})", runs.len(), if runs.len() == 1 { "" } else { "s" }), 3);
    loss_panel.line(&mut out, &rows, |r| r.train_loss, "#1f77b4", false);
    loss_panel.line(&mut out, &rows, |r| r.val_loss, "#ff7f0e", true);
    legend(&mut out, 250.0, 60.0, &[("train", "#1f77b4", false), ("validation", "#ff7f0e", true)]);
    pck_panel.axes(&mut out, "Validation PCK@15 (%)", 0);
    pck_panel.line(&mut out, &rows, |r| r.val_pck15, "#2ca02c", false);
    out.push_str("</svg>\n");
    Ok(out)
}
