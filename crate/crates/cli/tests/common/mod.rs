//! Helpers for driving the `wormloc` binary from integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wormloc::dataset::{save_samples, Sample};
use wormloc::imaging::GrayImage;
use wormloc::nn::{ArchConfig, NetworkParams};
use wormloc::train::{save_checkpoint, Checkpoint, TrainConfig};
use wormloc::{KeypointPair, PixelPoint, CROP_SIZE};

pub fn wormloc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wormloc"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("failed to launch wormloc")
}

/// Runs a command that must succeed and returns its stdout.
pub fn ok(dir: &Path, args: &[&str]) -> String {
    let out = wormloc(dir, args);
    assert!(
        out.status.success(),
        "wormloc {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Every file under `root`, keyed by relative path.
pub fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                let rel = p.strip_prefix(base).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// A network whose weights are all zero: every heatmap is uniform, so every
/// prediction lands on the crop center.
pub fn zero_checkpoint(path: &Path, train: TrainConfig) {
    let arch = ArchConfig::default();
    let mut params = NetworkParams::<f32>::init(&arch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for b in params.blocks_mut() {
        b.weight.iter_mut().for_each(|w| *w = 0.0);
        b.bias.iter_mut().for_each(|w| *w = 0.0);
    }
    save_checkpoint(&Checkpoint::new(params, train, 0, 0), path).unwrap();
}

/// Crops whose head and tail labels both sit on the crop center.
pub fn centered_dataset(dir: &Path, n: usize) {
    let c = (CROP_SIZE as f64 - 1.0) / 2.0;
    let samples: Vec<(String, Sample)> = (0..n)
        .map(|i| {
            let img = GrayImage::filled(CROP_SIZE, CROP_SIZE, i as f32 / n as f32);
            let labels = KeypointPair::new(PixelPoint::new(c, c), PixelPoint::new(c, c));
            (format!("c_{i:03}.png"), Sample::new(img, labels).unwrap())
        })
        .collect();
    save_samples(dir, &samples).unwrap();
}
