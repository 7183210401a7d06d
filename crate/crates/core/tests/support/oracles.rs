//! Brute-force reference implementations compared against the library.
//! Shared by the oracle tests and the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wormloc::eval::pck;
use wormloc::imaging::{largest_component, BinaryMask, Connectivity, PixelPoint};
use wormloc::nn::{ArchConfig, NetworkParams};
use wormloc::train::{adam_step, AdamConfig, AdamState};
use wormloc::KeypointPair;

/// Depth-first flood fill; picks the biggest component, ties broken by the
/// top-left corner of its bounding box, then by first pixel in raster order.
pub fn flood_fill_largest(mask: &BinaryMask, conn: Connectivity) -> Option<Vec<bool>> {
    let (w, h) = (mask.width(), mask.height());
    let mut seen = vec![false; w * h];
    let mut best: Option<(usize, usize, usize, Vec<usize>)> = None;
    for start in 0..w * h {
        if !mask.data()[start] || seen[start] {
            continue;
        }
        let mut stack = vec![start];
        seen[start] = true;
        let mut members = Vec::new();
        while let Some(i) = stack.pop() {
            members.push(i);
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for &(dx, dy) in conn.offsets() {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if mask.data()[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        let y0 = members.iter().map(|i| i / w).min().unwrap();
        let x0 = members.iter().map(|i| i % w).min().unwrap();
        let better = match &best {
            None => true,
            Some((n, by, bx, _)) => members.len() > *n || (members.len() == *n && (y0, x0) < (*by, *bx)),
        };
        if better {
            best = Some((members.len(), y0, x0, members));
        }
    }
    best.map(|(_, _, _, members)| {
        let mut out = vec![false; w * h];
        for i in members {
            out[i] = true;
        }
        out
    })
}

pub fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize) -> BinaryMask {
    let density = rng.random_range(0.2..0.7);
    BinaryMask::new(w, h, (0..w * h).map(|_| rng.random_bool(density)).collect())
}

/// Number of 16×16 masks (out of `cases`, both connectivities) where the
/// library disagrees with the oracle on any pixel.
pub fn largest_component_mismatches(cases: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..cases {
        let mask = random_mask(&mut rng, 16, 16);
        for conn in [Connectivity::Four, Connectivity::Eight] {
            let expected = flood_fill_largest(&mask, conn);
            let got = largest_component(&mask, conn).ok().map(|(m, _)| m.data().to_vec());
            if expected != got {
                bad += 1;
            }
        }
    }
    bad
}

/// Straight loop over samples with an explicit Euclidean distance.
pub fn brute_force_pck(
    preds: &[KeypointPair<PixelPoint>],
    gts: &[KeypointPair<PixelPoint>],
    threshold: f64,
) -> (f64, f64) {
    let mut head = 0.0;
    let mut tail = 0.0;
    for i in 0..preds.len() {
        let dh = ((preds[i].head.x - gts[i].head.x).powi(2) + (preds[i].head.y - gts[i].head.y).powi(2)).sqrt();
        let dt = ((preds[i].tail.x - gts[i].tail.x).powi(2) + (preds[i].tail.y - gts[i].tail.y).powi(2)).sqrt();
        if dh <= threshold {
            head += 1.0;
        }
        if dt <= threshold {
            tail += 1.0;
        }
    }
    (head / preds.len() as f64, tail / preds.len() as f64)
}

/// Instances (out of `cases`) where `pck` differs from the brute-force loop.
pub fn pck_mismatches(cases: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..cases {
        let n = rng.random_range(1..40);
        let pt = |rng: &mut ChaCha8Rng| PixelPoint::new(rng.random_range(0.0..150.0), rng.random_range(0.0..150.0));
        let gts: Vec<_> = (0..n).map(|_| KeypointPair::new(pt(&mut rng), pt(&mut rng))).collect();
        // predictions near the truth so every threshold is exercised
        let preds: Vec<_> = gts
            .iter()
            .map(|g| {
                let mut jitter = |p: PixelPoint| {
                    let r = rng.random_range(0.0..40.0);
                    let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    PixelPoint::new(p.x + r * a.cos(), p.y + r * a.sin())
                };
                KeypointPair::new(jitter(g.head), jitter(g.tail))
            })
            .collect();
        let threshold = [7.0, 15.0, 30.0][rng.random_range(0..3)];
        let got = pck(&preds, &gts, threshold).unwrap();
        let (h, t) = brute_force_pck(&preds, &gts, threshold);
        if got.head != h || got.tail != t {
            bad += 1;
        }
    }
    bad
}

/// Largest absolute parameter difference between `adam_step` and a direct
/// transcription of the update rule, over several steps on random tensors.
pub fn adam_max_deviation(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = ArchConfig {
        input_size: 8,
        in_channels: 1,
        trunk_channels: vec![2],
        heatmap_size: 4,
    };
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let cfg = AdamConfig {
            lr: rng.random_range(1e-4..1e-2),
            beta1: rng.random_range(0.5..0.99),
            beta2: rng.random_range(0.9..0.9999),
            eps: 1e-8,
        };
        let mut params = NetworkParams::<f64>::init(&arch, &mut rng).unwrap();
        let mut state = AdamState::new(&params);
        let flat = |p: &NetworkParams<f64>| -> Vec<f64> {
            p.blocks().flat_map(|b| b.weight.iter().chain(&b.bias).copied()).collect()
        };
        let mut theta = flat(&params);
        let mut m = vec![0.0; theta.len()];
        let mut v = vec![0.0; theta.len()];
        for t in 1..=5 {
            let mut grads = params.zeros_like();
            for b in grads.blocks_mut() {
                for g in b.weight.iter_mut().chain(b.bias.iter_mut()) {
                    *g = rng.random_range(-1.0..1.0);
                }
            }
            let g = flat(&grads);
            adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
            for i in 0..theta.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / (1.0 - cfg.beta1.powf(t as f64));
                let v_hat = v[i] / (1.0 - cfg.beta2.powf(t as f64));
                theta[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
            for (a, b) in flat(&params).iter().zip(&theta) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    worst
}
