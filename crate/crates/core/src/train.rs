//! Adam training loop, per-epoch metrics, and the binary checkpoint format.
//!
//! Checkpoint layout (little-endian): magic `WPKT`, `u32` version, the
//! architecture (`u32` input size, in-channels, heatmap size, stage count,
//! then one `u32` per stage), the training configuration, `u32` epoch, `u64`
//! rng digest, then for each conv block in canonical order a
//! `u32 × 4` shape header (`out, in, kh, kw`) followed by raw `f32` weights
//! and biases.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{batches, AugmentConfig, Sample, Split};
use crate::dsnt::{total_loss, DsntError, Heatmap, LossConfig, LossOutput};
use crate::eval::{norm_to_pixels, pck, pixels_to_norm};
use crate::nn::{ArchConfig, NetworkParams, NnError, Real, Tensor3, KERNEL};
use crate::KeypointPair;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"WPKT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("empty {0} set")]
    EmptySet(&'static str),
    #[error(transparent)]
    Network(#[from] NnError),
    #[error(transparent)]
    Dsnt(#[from] DsntError),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("not a checkpoint (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint shapes are inconsistent: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_js: f64,
    pub sigma_hm: f64,
    /// Base seed; run `r` initializes and shuffles from `seed + r`.
    pub seed: u64,
    pub runs: usize,
    pub split_ratio: f64,
    pub split_seed: u64,
    /// Maximum additive brightness jitter; 0 disables it.
    pub brightness: f64,
    pub rotate: bool,
}

/// Defaults are tuned for 60 epochs on a few hundred images; see
/// [`TrainConfig::full_scale`] for the 600-epoch schedule.
impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 60,
            batch_size: 64,
            lambda_js: 1.0,
            sigma_hm: 0.5,
            seed: 0,
            runs: 10,
            split_ratio: 0.7,
            split_seed: 0,
            brightness: 0.125,
            rotate: true,
        }
    }
}

impl TrainConfig {
    /// Long schedule: 600 epochs at lr 5e-4 with a one-cell target spread.
    pub fn full_scale() -> Self {
        Self {
            lr: 5e-4,
            epochs: 600,
            sigma_hm: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.runs == 0 {
            return bad("epochs, batch_size and runs must be at least 1");
        }
        if !(self.lambda_js >= 0.0) || !(self.sigma_hm > 0.0) {
            return bad("lambda_js must be >= 0 and sigma_hm > 0");
        }
        if !(0.0..=1.0).contains(&self.brightness) {
            return bad("brightness must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda_js: self.lambda_js,
            sigma_hm: self.sigma_hm,
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            brightness: self.brightness,
            rotate: self.rotate,
        }
    }

    pub fn run_seed(&self, run: usize) -> u64 {
        self.seed.wrapping_add(run as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
        }
    }
}

/// First and second moments, one buffer per parameter tensor in canonical
/// block order (weights then bias of each block).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &NetworkParams<T>) -> Self {
        let shapes: Vec<Vec<T>> = params
            .blocks()
            .flat_map(|b| [vec![T::zero(); b.weight.len()], vec![T::zero(); b.bias.len()]])
            .collect();
        Self {
            t: 0,
            m: shapes.clone(),
            v: shapes,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Real>(
    params: &mut NetworkParams<T>,
    grads: &NetworkParams<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<(), NnError> {
    let n_slots = 2 * params.blocks().count();
    if grads.blocks().count() * 2 != n_slots || state.m.len() != n_slots {
        return Err(NnError::Shape("adam: block count".into()));
    }
    for (p, g) in params.blocks().zip(grads.blocks()) {
        if !p.same_shape(g) || p.weight.len() != g.weight.len() {
            return Err(NnError::Shape("adam: gradient shape".into()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one = T::one();
    let lr = T::from_f64(cfg.lr);
    let eps = T::from_f64(cfg.eps);
    let c1 = one - b1.powi(t);
    let c2 = one - b2.powi(t);

    let slots = params
        .blocks_mut()
        .flat_map(|b| [&mut b.weight, &mut b.bias])
        .zip(grads.blocks().flat_map(|b| [&b.weight, &b.bias]));
    for ((p, g), (m, v)) in slots.zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        if m.len() != p.len() || v.len() != p.len() {
            return Err(NnError::Shape("adam: moment shape".into()));
        }
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = b1 * m[i] + (one - b1) * gi;
            v[i] = b2 * v[i] + (one - b2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Loss, gradients and DSNT prediction for a single sample.
pub struct SampleResult<T> {
    pub loss: LossOutput,
    pub grads: NetworkParams<T>,
}

fn normalized_labels(sample: &Sample, size: usize) -> KeypointPair<crate::NormCoord> {
    sample.labels.map(|p| pixels_to_norm(p, size))
}

pub fn sample_loss_and_grad<T: Real>(
    params: &NetworkParams<T>,
    sample: &Sample,
    loss_cfg: &LossConfig,
) -> Result<SampleResult<T>, TrainError> {
    let (z, cache) = params.forward_tensor(&Tensor3::from_image(&sample.image))?;
    let k = params.arch.heatmap_size;
    let logits = z.map(|v| Heatmap::from_logits(k, v.iter().map(|x| x.as_f64()).collect()));
    let gt = normalized_labels(sample, params.arch.input_size);
    let loss = total_loss(&logits, &gt, loss_cfg)?;
    let grad_z = loss
        .grad
        .clone()
        .map(|g| g.into_iter().map(T::from_f64).collect::<Vec<T>>());
    let grads = params.backward(&cache, &grad_z)?;
    Ok(SampleResult { loss, grads })
}

/// Mean loss and mean gradient over a batch. Per-sample work runs in
/// parallel; the reduction runs in sample order.
pub fn batch_loss_and_grad<T: Real>(
    params: &NetworkParams<T>,
    batch: &[Sample],
    loss_cfg: &LossConfig,
) -> Result<(f64, NetworkParams<T>), TrainError> {
    let results = batch
        .par_iter()
        .map(|s| sample_loss_and_grad(params, s, loss_cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    for r in &results {
        grads.add_assign(&r.grads);
        loss += r.loss.loss;
    }
    let n = batch.len() as f64;
    grads.scale(T::from_f64(1.0 / n));
    Ok((loss / n, grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Mean of head and tail PCK@15, in percent.
    pub val_pck15: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,val_loss,val_pck15";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.8},{:.8},{:.4}\n",
            r.epoch, r.train_loss, r.val_loss, r.val_pck15
        ));
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>, String> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(METRICS_HEADER) {
        return Err(format!("expected header `{METRICS_HEADER}`"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let err = || format!("line {}: malformed metrics row", i + 2);
            if f.len() != 4 {
                return Err(err());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| err());
            Ok(MetricsRow {
                epoch: f[0].parse().map_err(|_| err())?,
                train_loss: num(f[1])?,
                val_loss: num(f[2])?,
                val_pck15: num(f[3])?,
            })
        })
        .collect()
}

/// Validation loss and average PCK@15 (percent), no augmentation.
pub fn validate_epoch<T: Real>(
    params: &NetworkParams<T>,
    samples: &[Sample],
    loss_cfg: &LossConfig,
) -> Result<(f64, f64), TrainError> {
    let size = params.arch.input_size;
    let outputs = samples
        .par_iter()
        .map(|s| -> Result<_, TrainError> {
            let logits = params.forward(&s.image)?;
            let loss = total_loss(&logits, &normalized_labels(s, size), loss_cfg)?;
            Ok((loss.loss, loss.pred.map(|c| norm_to_pixels(c, size))))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let n = samples.len() as f64;
    let loss = outputs.iter().map(|o| o.0).sum::<f64>() / n;
    let preds: Vec<_> = outputs.iter().map(|o| o.1).collect();
    let gts: Vec<_> = samples.iter().map(|s| s.labels).collect();
    let f = pck(&preds, &gts, 15.0).map_err(|e| TrainError::Config(e.to_string()))?;
    Ok((loss, 100.0 * (f.head + f.tail) / 2.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub params: NetworkParams<f32>,
    pub train: TrainConfig,
    pub epoch: u32,
    pub rng_digest: u64,
}

impl Checkpoint {
    pub fn new(params: NetworkParams<f32>, train: TrainConfig, epoch: u32, rng_digest: u64) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            params,
            train,
            epoch,
            rng_digest,
        }
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.params.arch
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(&CHECKPOINT_MAGIC);
        put_u32(&mut w, self.version);
        let arch = &self.params.arch;
        put_u32(&mut w, arch.input_size as u32);
        put_u32(&mut w, arch.in_channels as u32);
        put_u32(&mut w, arch.heatmap_size as u32);
        put_u32(&mut w, arch.trunk_channels.len() as u32);
        for &c in &arch.trunk_channels {
            put_u32(&mut w, c as u32);
        }
        let t = &self.train;
        for v in [t.lr, t.beta1, t.beta2, t.eps] {
            put_f64(&mut w, v);
        }
        put_u32(&mut w, t.epochs as u32);
        put_u32(&mut w, t.batch_size as u32);
        put_f64(&mut w, t.lambda_js);
        put_f64(&mut w, t.sigma_hm);
        put_u64(&mut w, t.seed);
        put_u32(&mut w, t.runs as u32);
        put_f64(&mut w, t.split_ratio);
        put_u64(&mut w, t.split_seed);
        put_f64(&mut w, t.brightness);
        put_u32(&mut w, t.rotate as u32);
        put_u32(&mut w, self.epoch);
        put_u64(&mut w, self.rng_digest);
        put_u32(&mut w, self.params.blocks().count() as u32);
        for b in self.params.blocks() {
            for d in [b.out_channels, b.in_channels, KERNEL, KERNEL] {
                put_u32(&mut w, d as u32);
            }
            for v in b.weight.iter().chain(&b.bias) {
                w.extend_from_slice(&v.to_le_bytes());
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let input_size = r.u32()? as usize;
        let in_channels = r.u32()? as usize;
        let heatmap_size = r.u32()? as usize;
        let stages = r.u32()? as usize;
        if stages > 64 {
            return Err(CheckpointError::Corrupt(format!("{stages} trunk stages")));
        }
        let trunk_channels = (0..stages)
            .map(|_| r.u32().map(|c| c as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let arch = ArchConfig {
            input_size,
            in_channels,
            trunk_channels,
            heatmap_size,
        };
        let train = TrainConfig {
            lr: r.f64()?,
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
            epochs: r.u32()? as usize,
            batch_size: r.u32()? as usize,
            lambda_js: r.f64()?,
            sigma_hm: r.f64()?,
            seed: r.u64()?,
            runs: r.u32()? as usize,
            split_ratio: r.f64()?,
            split_seed: r.u64()?,
            brightness: r.f64()?,
            rotate: r.u32()? != 0,
        };
        let epoch = r.u32()?;
        let rng_digest = r.u64()?;
        let mut params = NetworkParams::<f32>::zeros(&arch)
            .map_err(|e| CheckpointError::ShapeMismatch(e.to_string()))?;
        let n_blocks = r.u32()? as usize;
        if n_blocks != params.blocks().count() {
            return Err(CheckpointError::ShapeMismatch(format!(
                "{n_blocks} blocks stored, architecture has {}",
                params.blocks().count()
            )));
        }
        for (i, block) in params.blocks_mut().enumerate() {
            let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|d| d as usize);
            if dims != [block.out_channels, block.in_channels, KERNEL, KERNEL] {
                return Err(CheckpointError::ShapeMismatch(format!(
                    "block {i} stored as {dims:?}, expected [{}, {}, {KERNEL}, {KERNEL}]",
                    block.out_channels, block.in_channels
                )));
            }
            read_f32s(&mut r, &mut block.weight)?;
            read_f32s(&mut r, &mut block.bias)?;
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            version,
            params,
            train,
            epoch,
            rng_digest,
        })
    }
}

fn read_f32s(r: &mut Reader<'_>, out: &mut [f32]) -> Result<(), CheckpointError> {
    let raw = r.take(out.len() * 4)?;
    for (v, chunk) in out.iter_mut().zip(raw.chunks_exact(4)) {
        *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
    }
    Ok(())
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(w: &mut Vec<u8>, v: f64) {
    w.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            CheckpointError::Corrupt(format!("truncated at byte {} of {}", self.pos, self.bytes.len()))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, ckpt.to_bytes()).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}

/// Digest of the generator position, recorded in checkpoints.
pub fn rng_digest(rng: &ChaCha8Rng) -> u64 {
    let pos = rng.get_word_pos();
    let seed = rng.get_seed();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.iter().chain(&pos.to_le_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub metrics: Vec<MetricsRow>,
}

/// Trains one run from scratch. `on_epoch` sees every metrics row as it is
/// produced.
pub fn train_run(
    samples: &[Sample],
    split: &Split,
    arch: &ArchConfig,
    cfg: &TrainConfig,
    run: usize,
    mut on_epoch: impl FnMut(&MetricsRow),
) -> Result<RunOutput, TrainError> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(TrainError::EmptySet("training"));
    }
    if split.val.is_empty() {
        return Err(TrainError::EmptySet("validation"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run_seed(run));
    let mut params = NetworkParams::<f32>::init(arch, &mut rng)?;
    let mut adam = AdamState::new(&params);
    let adam_cfg = AdamConfig::from(cfg);
    let loss_cfg = cfg.loss();
    let augment = cfg.augment();
    let val: Vec<Sample> = split.val.iter().map(|&i| samples[i].clone()).collect();

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Checkpoint)> = None;
    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let epoch_batches: Vec<Vec<Sample>> =
            batches(samples, &split.train, cfg.batch_size, &mut rng, Some(augment)).collect();
        for (b, batch) in epoch_batches.iter().enumerate() {
            let (loss, grads) = batch_loss_and_grad(&params, batch, &loss_cfg)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: b + 1,
                });
            }
            adam_step(&mut params, &grads, &mut adam, &adam_cfg)?;
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        let (val_loss, val_pck15) = validate_epoch(&params, &val, &loss_cfg)?;
        if !val_loss.is_finite() {
            return Err(TrainError::NonFinite { epoch, batch: 0 });
        }
        let row = MetricsRow {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_loss,
            val_pck15,
        };
        on_epoch(&row);
        metrics.push(row);
        if best.as_ref().is_none_or(|(score, _)| val_pck15 > *score) {
            let ckpt = Checkpoint::new(params.clone(), cfg.clone(), epoch as u32, rng_digest(&rng));
            best = Some((val_pck15, ckpt));
        }
    }
    let last = Checkpoint::new(params, cfg.clone(), cfg.epochs as u32, rng_digest(&rng));
    Ok(RunOutput {
        best: best.expect("at least one epoch").1,
        last,
        metrics,
    })
}

/// Uniform draw inside the crop, used as a chance-level reference predictor.
pub fn random_point<R: Rng + ?Sized>(rng: &mut R, size: usize) -> crate::PixelPoint {
    let hi = size as f64 - 0.5;
    crate::PixelPoint::new(rng.random_range(-0.5..hi), rng.random_range(-0.5..hi))
}
