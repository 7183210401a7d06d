//! Heatmap-to-coordinate transform and the losses that train through it.
//!
//! A `K × K` heatmap is normalized with a spatial softmax, then read out as
//! the expectation of two fixed coordinate grids. The coordinate of cell
//! `(i, j)` (row, column, 0-based) is `((2j + 1 − K) / K, (2i + 1 − K) / K)`,
//! so cell centers tile `(−1, 1)` evenly. All functions here run in `f64`.

use thiserror::Error;

use crate::KeypointPair;

#[derive(Debug, Error, PartialEq)]
pub enum DsntError {
    #[error("heatmap does not sum to one (sum = {0})")]
    NotNormalized(f64),
    #[error("heatmap is {got}x{got}, expected {expected}x{expected}")]
    SizeMismatch { got: usize, expected: usize },
}

/// Square grid of real values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    size: usize,
    values: Vec<f64>,
    normalized: bool,
}

impl Heatmap {
    /// Unnormalized scores.
    pub fn from_logits(size: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), size * size, "heatmap length");
        Self {
            size,
            values,
            normalized: false,
        }
    }

    /// A probability map. Fails when entries are negative or do not sum to one.
    pub fn from_probabilities(size: usize, values: Vec<f64>) -> Result<Self, DsntError> {
        assert_eq!(values.len(), size * size, "heatmap length");
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || values.iter().any(|&v| v < 0.0) {
            return Err(DsntError::NotNormalized(sum));
        }
        Ok(Self {
            size,
            values,
            normalized: true,
        })
    }

    /// All mass on one cell.
    pub fn delta(size: usize, row: usize, col: usize) -> Self {
        let mut values = vec![0.0; size * size];
        values[row * size + col] = 1.0;
        Self {
            size,
            values,
            normalized: true,
        }
    }

    pub fn uniform(size: usize) -> Self {
        let n = (size * size) as f64;
        Self {
            size,
            values: vec![1.0 / n; size * size],
            normalized: true,
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateGrids {
    size: usize,
    x: Vec<f64>,
    y: Vec<f64>,
}

impl CoordinateGrids {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    /// Normalized coordinate of cell index `j` along one axis.
    pub fn axis_value(size: usize, j: usize) -> f64 {
        (2.0 * j as f64 + 1.0 - size as f64) / size as f64
    }
}

/// Normalized coordinate in `(−1, 1)²`; `x` is horizontal.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NormCoord {
    pub x: f64,
    pub y: f64,
}

impl NormCoord {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

pub fn coord_grids(size: usize) -> CoordinateGrids {
    assert!(size >= 1, "grid size must be positive");
    let mut x = Vec::with_capacity(size * size);
    let mut y = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            x.push(CoordinateGrids::axis_value(size, j));
            y.push(CoordinateGrids::axis_value(size, i));
        }
    }
    CoordinateGrids { size, x, y }
}

/// Spatial softmax with a max shift.
pub fn softmax2d(z: &Heatmap) -> Heatmap {
    let max = z.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Heatmap {
        size: z.size,
        values: exps.into_iter().map(|e| e / total).collect(),
        normalized: true,
    }
}

/// Pulls a gradient w.r.t. softmax outputs back to the logits.
pub fn softmax2d_backward(probs: &Heatmap, grad_probs: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.values.iter().zip(grad_probs).map(|(p, g)| p * g).sum();
    probs
        .values
        .iter()
        .zip(grad_probs)
        .map(|(p, g)| p * (g - dot))
        .collect()
}

/// Expected coordinate under a normalized heatmap. The gradient w.r.t. the
/// heatmap is the grids themselves.
pub fn dsnt(probs: &Heatmap, grids: &CoordinateGrids) -> Result<NormCoord, DsntError> {
    if probs.size != grids.size {
        return Err(DsntError::SizeMismatch {
            got: probs.size,
            expected: grids.size,
        });
    }
    let sum = probs.sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(DsntError::NotNormalized(sum));
    }
    let dot = |g: &[f64]| probs.values.iter().zip(g).map(|(p, c)| p * c).sum::<f64>();
    Ok(NormCoord::new(dot(&grids.x), dot(&grids.y)))
}

/// dL/dP given dL/d(x, y): `g.x · X + g.y · Y`.
pub fn dsnt_backward(grids: &CoordinateGrids, g: NormCoord) -> Vec<f64> {
    grids.x.iter().zip(&grids.y).map(|(x, y)| g.x * x + g.y * y).collect()
}

/// Mean squared error over the four scalar components, and its gradient
/// w.r.t. `pred`.
pub fn mse_coord_loss(
    pred: &KeypointPair<NormCoord>,
    gt: &KeypointPair<NormCoord>,
) -> (f64, KeypointPair<NormCoord>) {
    let dx_h = pred.head.x - gt.head.x;
    let dy_h = pred.head.y - gt.head.y;
    let dx_t = pred.tail.x - gt.tail.x;
    let dy_t = pred.tail.y - gt.tail.y;
    let loss = (dx_h * dx_h + dy_h * dy_h + dx_t * dx_t + dy_t * dy_t) / 4.0;
    let grad = KeypointPair::new(
        NormCoord::new(dx_h / 2.0, dy_h / 2.0),
        NormCoord::new(dx_t / 2.0, dy_t / 2.0),
    );
    (loss, grad)
}

/// Isotropic Gaussian centered on `center`, sampled at cell centers and
/// renormalized. `sigma` is in heatmap cells.
pub fn gaussian_target(center: NormCoord, size: usize, sigma: f64) -> Heatmap {
    assert!(sigma > 0.0, "sigma must be positive");
    let k = size as f64;
    // inverse of the grid formula: continuous 0-based cell index
    let u = (center.x * k + k - 1.0) / 2.0;
    let v = (center.y * k + k - 1.0) / 2.0;
    let denom = 2.0 * sigma * sigma;
    let mut values = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let d2 = (j as f64 - u).powi(2) + (i as f64 - v).powi(2);
            values.push((-d2 / denom).exp());
        }
    }
    let total: f64 = values.iter().sum();
    if total > 0.0 {
        values.iter_mut().for_each(|v| *v /= total);
    } else {
        // center far outside the grid with tiny sigma: everything underflowed
        let n = values.len() as f64;
        values.iter_mut().for_each(|v| *v = 1.0 / n);
    }
    Heatmap {
        size,
        values,
        normalized: true,
    }
}

fn kl_term(p: f64, m: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * (p / m).ln()
    }
}

/// Jensen–Shannon divergence in nats.
pub fn js_divergence(p: &Heatmap, q: &Heatmap) -> f64 {
    assert_eq!(p.values.len(), q.values.len(), "heatmap sizes differ");
    let js: f64 = p
        .values
        .iter()
        .zip(&q.values)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            0.5 * kl_term(a, m) + 0.5 * kl_term(b, m)
        })
        .sum();
    // rounding can leave tiny negatives at equality
    js.max(0.0)
}

/// Gradient of [`js_divergence`] w.r.t. `p`: `½ ln(p / m)` per entry.
pub fn js_divergence_grad(p: &Heatmap, q: &Heatmap) -> Vec<f64> {
    p.values
        .iter()
        .zip(&q.values)
        .map(|(&a, &b)| {
            if a == 0.0 {
                // derivative unbounded at p = 0; treated as 0
                0.0
            } else {
                0.5 * (a / (0.5 * (a + b))).ln()
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda_js: f64,
    pub sigma_hm: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_js: 1.0,
            sigma_hm: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub mse: f64,
    pub js: f64,
    pub pred: KeypointPair<NormCoord>,
    pub probs: KeypointPair<Heatmap>,
    /// dL/dZ for the head and tail logits.
    pub grad: KeypointPair<Vec<f64>>,
}

/// `MSE(dsnt(softmax(Z)), gt) + λ · ½ · [JS(Z′_h, G_h) + JS(Z′_t, G_t)]`
/// where `G` is the Gaussian target at the ground truth.
pub fn total_loss(
    logits: &KeypointPair<Heatmap>,
    gt: &KeypointPair<NormCoord>,
    cfg: &LossConfig,
) -> Result<LossOutput, DsntError> {
    let size = logits.head.size;
    if logits.tail.size != size {
        return Err(DsntError::SizeMismatch {
            got: logits.tail.size,
            expected: size,
        });
    }
    let grids = coord_grids(size);
    let probs = KeypointPair::new(softmax2d(&logits.head), softmax2d(&logits.tail));
    let pred = KeypointPair::new(dsnt(&probs.head, &grids)?, dsnt(&probs.tail, &grids)?);
    let (mse, grad_pred) = mse_coord_loss(&pred, gt);

    let mut js = 0.0;
    let mut grad_logits = |p: &Heatmap, center: NormCoord, g: NormCoord| -> Vec<f64> {
        let mut grad_p = dsnt_backward(&grids, g);
        if cfg.lambda_js > 0.0 {
            let target = gaussian_target(center, size, cfg.sigma_hm);
            js += 0.5 * js_divergence(p, &target);
            let scale = 0.5 * cfg.lambda_js;
            for (gp, gj) in grad_p.iter_mut().zip(js_divergence_grad(p, &target)) {
                *gp += scale * gj;
            }
        }
        softmax2d_backward(p, &grad_p)
    };
    let grad_head = grad_logits(&probs.head, gt.head, grad_pred.head);
    let grad_tail = grad_logits(&probs.tail, gt.tail, grad_pred.tail);

    Ok(LossOutput {
        loss: mse + cfg.lambda_js * js,
        mse,
        js,
        pred,
        probs,
        grad: KeypointPair::new(grad_head, grad_tail),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_values() {
        let g = coord_grids(5);
        assert_eq!(&g.x()[..5], &[-0.8, -0.4, 0.0, 0.4, 0.8]);
        assert_eq!(coord_grids(1).x(), &[0.0]);
        assert_eq!(coord_grids(1).y(), &[0.0]);
        for k in 1..8 {
            let g = coord_grids(k);
            for i in 0..k {
                for j in 0..k {
                    assert_eq!(g.y()[i * k + j], g.x()[j * k + i]);
                    assert!(g.x()[i * k + j].abs() < 1.0);
                }
            }
        }
    }

    #[test]
    fn softmax_basics() {
        let flat = softmax2d(&Heatmap::from_logits(3, vec![2.0; 9]));
        assert!(flat.values().iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-15));
        let mut z = vec![0.0; 25];
        z[7] = 50.0;
        let peaked = softmax2d(&Heatmap::from_logits(5, z));
        assert!(peaked.values()[7] >= 1.0 - 1e-9);
    }

    #[test]
    fn dsnt_delta_and_uniform() {
        let g = coord_grids(5);
        for i in 0..5 {
            for j in 0..5 {
                let c = dsnt(&Heatmap::delta(5, i, j), &g).unwrap();
                assert_eq!((c.x, c.y), (g.x()[i * 5 + j], g.y()[i * 5 + j]));
            }
        }
        let c = dsnt(&Heatmap::uniform(5), &g).unwrap();
        assert!(c.x.abs() < 1e-12 && c.y.abs() < 1e-12);
    }

    #[test]
    fn dsnt_half_mass_is_midpoint() {
        let g = coord_grids(5);
        let mut v = vec![0.0; 25];
        v[2 * 5 + 1] = 0.5;
        v[2 * 5 + 2] = 0.5;
        let c = dsnt(&Heatmap::from_probabilities(5, v).unwrap(), &g).unwrap();
        assert!((c.x - (-0.2)).abs() < 1e-15);
        assert_eq!(c.y, 0.0);
    }

    #[test]
    fn dsnt_rejects_unnormalized() {
        let g = coord_grids(3);
        let z = Heatmap::from_logits(3, vec![0.5; 9]);
        assert!(matches!(dsnt(&z, &g), Err(DsntError::NotNormalized(_))));
        assert!(Heatmap::from_probabilities(3, vec![0.2; 9]).is_err());
        assert!(matches!(
            dsnt(&Heatmap::uniform(4), &g),
            Err(DsntError::SizeMismatch { .. })
        ));
    }

    #[test]
    fn shifting_delta_moves_by_two_over_k() {
        for k in [3, 5, 7] {
            let g = coord_grids(k);
            for j in 0..k - 1 {
                let a = dsnt(&Heatmap::delta(k, 1, j), &g).unwrap();
                let b = dsnt(&Heatmap::delta(k, 1, j + 1), &g).unwrap();
                assert!((b.x - a.x - 2.0 / k as f64).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn mse_values() {
        let gt = KeypointPair::new(NormCoord::new(0.1, -0.3), NormCoord::new(0.5, 0.5));
        assert_eq!(mse_coord_loss(&gt, &gt).0, 0.0);
        let mut pred = gt;
        pred.head.x += 0.2;
        let (loss, grad) = mse_coord_loss(&pred, &gt);
        assert!((loss - 0.01).abs() < 1e-15);
        assert!((grad.head.x - 0.1).abs() < 1e-15);
        assert_eq!(grad.tail, NormCoord::default());
    }

    #[test]
    fn gaussian_target_shape() {
        let g = coord_grids(5);
        let t = gaussian_target(NormCoord::new(g.x()[8], g.y()[8]), 5, 0.5);
        let argmax = t
            .values()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(argmax, 8);
        assert!((t.sum() - 1.0).abs() < 1e-12);

        let wide = gaussian_target(NormCoord::new(0.3, -0.6), 5, 100.0);
        let max = wide.values().iter().copied().fold(0.0, f64::max);
        let min = wide.values().iter().copied().fold(1.0, f64::min);
        assert!(max / min < 1.001, "ratio {}", max / min);
    }

    #[test]
    fn js_extremes() {
        let p = gaussian_target(NormCoord::new(0.2, 0.1), 5, 1.0);
        assert!(js_divergence(&p, &p) < 1e-12);
        let a = Heatmap::delta(5, 0, 0);
        let b = Heatmap::delta(5, 4, 4);
        assert!((js_divergence(&a, &b) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn zero_lambda_is_pure_mse() {
        let logits = KeypointPair::new(
            Heatmap::from_logits(5, (0..25).map(|i| (i as f64 * 0.37).sin()).collect()),
            Heatmap::from_logits(5, (0..25).map(|i| (i as f64 * 0.11).cos()).collect()),
        );
        let gt = KeypointPair::new(NormCoord::new(0.3, 0.2), NormCoord::new(-0.5, 0.4));
        let cfg = LossConfig {
            lambda_js: 0.0,
            sigma_hm: 1.0,
        };
        let out = total_loss(&logits, &gt, &cfg).unwrap();
        let (mse, _) = mse_coord_loss(&out.pred, &gt);
        assert_eq!(out.loss, mse);
        assert_eq!(out.js, 0.0);
    }

    #[test]
    fn concentrated_logits_at_truth_give_near_zero_loss() {
        // gt on cell centers, logits peaked there, narrow target
        let g = coord_grids(5);
        let (h, t) = (6, 18);
        let mk = |cell: usize| {
            let mut z = vec![0.0; 25];
            z[cell] = 40.0;
            Heatmap::from_logits(5, z)
        };
        let gt = KeypointPair::new(
            NormCoord::new(g.x()[h], g.y()[h]),
            NormCoord::new(g.x()[t], g.y()[t]),
        );
        let cfg = LossConfig {
            lambda_js: 1.0,
            sigma_hm: 0.1,
        };
        let out = total_loss(&KeypointPair::new(mk(h), mk(t)), &gt, &cfg).unwrap();
        assert!(out.loss < 1e-3, "loss {}", out.loss);

        // default config: logits = ln(target) at the symmetric center
        let center = NormCoord::new(0.0, 0.0);
        let target = gaussian_target(center, 5, LossConfig::default().sigma_hm);
        let z = Heatmap::from_logits(5, target.values().iter().map(|p| p.ln()).collect());
        let out = total_loss(
            &KeypointPair::new(z.clone(), z),
            &KeypointPair::new(center, center),
            &LossConfig::default(),
        )
        .unwrap();
        assert!(out.loss < 1e-12, "loss {}", out.loss);
    }
}
