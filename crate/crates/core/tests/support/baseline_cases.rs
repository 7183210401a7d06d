//! Baseline scenarios shared by the behaviour tests and the acceptance suite.
#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wormloc::baseline::{run_baseline, unordered_errors};
use wormloc::dataset::PreprocessConfig;
use wormloc::imaging::PixelPoint;
use wormloc::synthgen::{gen_worm_render, item_rng, render_worm, WormParams};
use wormloc::KeypointPair;

pub const K: usize = 10;
pub const THETA_MAX: f64 = 2.0;

pub fn straight() -> WormParams {
    WormParams {
        curvature: 0.0,
        ..WormParams::default()
    }
}

/// Seeds in `0..seeds` whose straight worm gets both endpoints within
/// `body_width / 2 + 2` pixels, matching proposals to endpoints either way.
pub fn straight_localized(seeds: u64) -> usize {
    let p = straight();
    let tol = p.body_width / 2.0 + 2.0;
    let cfg = PreprocessConfig::default();
    (0..seeds)
        .filter(|&seed| {
            let worm = gen_worm_render(&mut item_rng(seed, 0), &p).unwrap();
            let res = run_baseline(&worm.image, &cfg, K, THETA_MAX).unwrap();
            res.proposals.is_ok_and(|prop| {
                let e = unordered_errors(&prop, &worm.labels);
                e.head <= tol && e.tail <= tol
            })
        })
        .count()
}

/// Long straight front arm, then a sharp kink in the tapered rear half that
/// folds the tail back along the body.
pub fn bent_centerline() -> Vec<PixelPoint> {
    let head = PixelPoint::new(20.0, 40.0);
    let kink = PixelPoint::new(125.0, 75.0);
    let tail = PixelPoint::new(75.0, 105.0);
    let mut pts = Vec::new();
    for (a, b, n) in [(head, kink, 70), (kink, tail, 40)] {
        for i in 0..n {
            let t = i as f64 / n as f64;
            pts.push(PixelPoint::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)));
        }
    }
    pts.push(tail);
    pts
}

/// Endpoint errors of the proposer on the bent worm, or `None` when it makes
/// no proposal at all.
pub fn bent_worm_errors() -> Option<KeypointPair<f64>> {
    let p = WormParams::default();
    let worm = render_worm(&mut ChaCha8Rng::seed_from_u64(0), &bent_centerline(), &p).unwrap();
    let res = run_baseline(&worm.image, &PreprocessConfig::default(), K, THETA_MAX).unwrap();
    res.proposals.ok().map(|prop| unordered_errors(&prop, &worm.labels))
}
