//! Classical head/tail proposer: trace the worm outline and pick its two
//! sharpest convex corners.

use thiserror::Error;

use crate::dataset::PreprocessConfig;
use crate::imaging::{
    adaptive_threshold, label_components, largest_component, BinaryMask, Connectivity, GrayImage,
    ImagingError, PixelPoint,
};
use crate::KeypointPair;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("mask has {0} connected components, expected one")]
    MultipleComponents(u32),
    #[error("contour has {0} points, need at least 4")]
    Degenerate(usize),
    #[error("contour of {len} points is too short for arc offset {k}")]
    TooShort { len: usize, k: usize },
    #[error("no proposal: {qualifying} qualifying corner(s)")]
    NoProposal { qualifying: usize },
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

/// Closed boundary loop; the first point is not repeated at the end.
#[derive(Debug, Clone, PartialEq)]
pub struct Contour {
    points: Vec<(i64, i64)>,
}

impl Contour {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> PixelPoint {
        let (x, y) = self.points[i % self.points.len()];
        PixelPoint::new(x as f64, y as f64)
    }

    pub fn points(&self) -> Vec<PixelPoint> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }

    /// Shoelace sum in image coordinates (y down). Negative for loops that
    /// run counter-clockwise on screen.
    pub fn signed_area(&self) -> f64 {
        let n = self.points.len();
        let twice: i64 = (0..n)
            .map(|i| {
                let (x0, y0) = self.points[i];
                let (x1, y1) = self.points[(i + 1) % n];
                x0 * y1 - x1 * y0
            })
            .sum();
        twice as f64 / 2.0
    }
}

/// Neighbours in clockwise screen order, starting west.
const RING: [(i64, i64); 8] = [
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
];

fn ring_index(from: (i64, i64), to: (i64, i64)) -> usize {
    let d = (to.0 - from.0, to.1 - from.1);
    RING.iter().position(|&r| r == d).expect("8-adjacent")
}

/// Moore-neighbour boundary trace of a single 8-connected component.
/// The loop starts at the topmost-leftmost pixel and runs counter-clockwise
/// as displayed (y down).
pub fn trace_contour(mask: &BinaryMask) -> Result<Contour, BaselineError> {
    let (_, count) = label_components(mask, Connectivity::Eight);
    match count {
        0 => return Err(BaselineError::EmptyMask),
        1 => {}
        n => return Err(BaselineError::MultipleComponents(n)),
    }
    let w = mask.width();
    let start_idx = mask.data().iter().position(|&v| v).expect("non-empty");
    let start = ((start_idx % w) as i64, (start_idx / w) as i64);
    let on = |p: (i64, i64)| mask.get_signed(p.0 as isize, p.1 as isize);

    // Clockwise walk; reversed at the end.
    let mut cw = vec![start];
    let mut current = start;
    let mut backtrack = (start.0 - 1, start.1);
    let mut first_move: Option<(i64, i64)> = None;
    loop {
        let b = ring_index(current, backtrack);
        let mut next = None;
        for step in 1..=8 {
            let d = RING[(b + step) % 8];
            let cand = (current.0 + d.0, current.1 + d.1);
            if on(cand) {
                let prev = RING[(b + step - 1) % 8];
                backtrack = (current.0 + prev.0, current.1 + prev.1);
                next = Some(cand);
                break;
            }
        }
        let Some(next) = next else { break };
        if current == start {
            match first_move {
                None => first_move = Some(next),
                Some(f) if f == next => break,
                Some(_) => {}
            }
        }
        cw.push(next);
        current = next;
    }
    if cw.len() > 1 && *cw.last().unwrap() == start {
        cw.pop();
    }
    if cw.len() < 4 {
        return Err(BaselineError::Degenerate(cw.len()));
    }
    let mut points = Vec::with_capacity(cw.len());
    points.push(start);
    points.extend(cw[1..].iter().rev());
    Ok(Contour { points })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corner {
    pub index: usize,
    pub point: PixelPoint,
    /// Interior angle in radians.
    pub angle: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposals {
    pub tail: Corner,
    pub head: Corner,
}

impl Proposals {
    pub fn as_pair(&self) -> KeypointPair<PixelPoint> {
        KeypointPair::new(self.head.point, self.tail.point)
    }
}

/// Angle at every contour point between the vectors to the points `k`
/// steps behind and ahead, plus whether the corner is convex.
pub fn corner_angles(c: &Contour, k: usize) -> Vec<(f64, bool)> {
    let n = c.len();
    let orientation = c.signed_area().signum();
    (0..n)
        .map(|i| {
            let (px, py) = c.points[i];
            let (ax, ay) = c.points[(i + n - k % n) % n];
            let (bx, by) = c.points[(i + k) % n];
            let (v1x, v1y) = ((ax - px) as f64, (ay - py) as f64);
            let (v2x, v2y) = ((bx - px) as f64, (by - py) as f64);
            let n1 = v1x.hypot(v1y);
            let n2 = v2x.hypot(v2y);
            if n1 == 0.0 || n2 == 0.0 {
                return (std::f64::consts::PI, false);
            }
            let cos = ((v1x * v2x + v1y * v2y) / (n1 * n2)).clamp(-1.0, 1.0);
            // turn from incoming (p - a) to outgoing (b - p)
            let turn = (-v1x) * v2y - (-v1y) * v2x;
            let convex = turn != 0.0 && turn.signum() == orientation;
            (cos.acos(), convex)
        })
        .collect()
}

fn cyclic_distance(i: usize, j: usize, n: usize) -> usize {
    let d = i.abs_diff(j);
    d.min(n - d)
}

/// Sharpest convex corner under `theta_max` is the tail; the sharpest one
/// more than `k` points away from it is the head.
pub fn endpoint_proposals(c: &Contour, k: usize, theta_max: f64) -> Result<Proposals, BaselineError> {
    let n = c.len();
    if k == 0 || n <= 2 * k {
        return Err(BaselineError::TooShort { len: n, k });
    }
    let angles = corner_angles(c, k);
    let mut qualifying: Vec<Corner> = angles
        .iter()
        .enumerate()
        .filter(|(_, &(a, convex))| convex && a < theta_max)
        .map(|(i, &(angle, _))| Corner {
            index: i,
            point: c.point(i),
            angle,
        })
        .collect();
    qualifying.sort_by(|a, b| a.angle.total_cmp(&b.angle).then(a.index.cmp(&b.index)));
    let Some(&tail) = qualifying.first() else {
        return Err(BaselineError::NoProposal { qualifying: 0 });
    };
    let head = qualifying
        .iter()
        .find(|q| cyclic_distance(q.index, tail.index, n) > k)
        .copied()
        .ok_or(BaselineError::NoProposal { qualifying: 1 })?;
    Ok(Proposals { tail, head })
}

#[derive(Debug, Clone)]
pub struct BaselineResult {
    pub contour: Contour,
    pub proposals: Result<Proposals, String>,
}

/// Threshold → largest component → contour → proposals on a raw image.
pub fn run_baseline(
    img: &GrayImage,
    cfg: &PreprocessConfig,
    k: usize,
    theta_max: f64,
) -> Result<BaselineResult, BaselineError> {
    let mask = adaptive_threshold(img, cfg.block, cfg.offset, cfg.polarity)?;
    let (component, _) = largest_component(&mask, cfg.connectivity)?;
    let contour = trace_contour(&component)?;
    let proposals = endpoint_proposals(&contour, k, theta_max).map_err(|e| e.to_string());
    Ok(BaselineResult { contour, proposals })
}

/// Distance of each true endpoint to its nearer proposal, trying both
/// assignments (the proposer does not tell head from tail).
pub fn unordered_errors(p: &Proposals, truth: &KeypointPair<PixelPoint>) -> KeypointPair<f64> {
    let straight = KeypointPair::new(p.head.point.distance(&truth.head), p.tail.point.distance(&truth.tail));
    let swapped = KeypointPair::new(p.tail.point.distance(&truth.head), p.head.point.distance(&truth.tail));
    if straight.head.max(straight.tail) <= swapped.head.max(swapped.tail) {
        straight
    } else {
        swapped
    }
}
