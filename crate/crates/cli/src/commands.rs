//! Subcommand arguments and implementations.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde_json::json;
use wormloc::baseline::run_baseline;
use wormloc::dataset::{load_manifest, load_samples, preprocess_all, preprocess_image, save_samples, split_dataset, PreprocessConfig, Sample};
use wormloc::eval::{aggregate_runs, evaluate, predict_detailed, DEFAULT_THRESHOLDS};
use wormloc::imaging::{transfer_label, Connectivity, GrayImage, Polarity};
use wormloc::render::{baseline_svg, curves_svg, prediction_svg};
use wormloc::synthgen::{gen_dataset, WormParams};
use wormloc::train::{load_checkpoint, metrics_csv, parse_metrics_csv, save_checkpoint, train_run};
use wormloc::{KeypointPair, PixelPoint};

use crate::config::{load_config, validate, TrainOverrides};
use crate::failure::{CliResult, Context, Failure};
use crate::manifest::{display, guard_output, sidecar, RunManifest, MANIFEST_FILE};

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).context(format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).context(format!("writing {}", path.display()))
}

fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::new(
            crate::failure::Kind::Io,
            anyhow::anyhow!("{}: no such file", path.display()),
        ))
    }
}

/// A directory means its `manifest.csv`.
fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.csv")
    } else {
        data.to_path_buf()
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn parse_pair(values: &[f64]) -> CliResult<KeypointPair<PixelPoint>> {
    match values {
        [hx, hy, tx, ty] => Ok(KeypointPair::new(PixelPoint::new(*hx, *hy), PixelPoint::new(*tx, *ty))),
        _ => Err(Failure::usage(format!(
            "--labels takes head_x,head_y,tail_x,tail_y, got {} value(s)",
            values.len()
        ))),
    }
}

fn fmt_pair(p: &KeypointPair<PixelPoint>) -> String {
    format!(
        "head=({:.2}, {:.2}) tail=({:.2}, {:.2})",
        p.head.x, p.head.y, p.tail.x, p.tail.y
    )
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PolarityArg {
    /// Worm darker than the background.
    Dark,
    /// Worm brighter than the background.
    Bright,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ConnectivityArg {
    #[value(name = "4")]
    Four,
    #[value(name = "8")]
    Eight,
}

/// Thresholding and cropping flags; unset flags keep the defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct ImagingArgs {
    /// Odd side length of the local-mean window.
    #[arg(long)]
    pub block: Option<usize>,
    /// Margin below (or above) the local mean.
    #[arg(long)]
    pub offset: Option<f64>,
    #[arg(long, value_enum)]
    pub polarity: Option<PolarityArg>,
    #[arg(long, value_enum)]
    pub connectivity: Option<ConnectivityArg>,
    /// Box padding as a fraction of its longer side.
    #[arg(long)]
    pub pad_frac: Option<f64>,
    /// Side length of the output crop.
    #[arg(long)]
    pub size: Option<usize>,
}

impl ImagingArgs {
    pub fn resolve(&self) -> CliResult<PreprocessConfig> {
        let mut cfg = PreprocessConfig::default();
        if let Some(v) = self.block {
            cfg.block = v;
        }
        if let Some(v) = self.offset {
            cfg.offset = v;
        }
        if let Some(v) = self.polarity {
            cfg.polarity = match v {
                PolarityArg::Dark => Polarity::DarkForeground,
                PolarityArg::Bright => Polarity::BrightForeground,
            };
        }
        if let Some(v) = self.connectivity {
            cfg.connectivity = match v {
                ConnectivityArg::Four => Connectivity::Four,
                ConnectivityArg::Eight => Connectivity::Eight,
            };
        }
        if let Some(v) = self.pad_frac {
            cfg.pad_frac = v;
        }
        if let Some(v) = self.size {
            cfg.out_size = v;
        }
        if cfg.block < 3 || cfg.block % 2 == 0 {
            return Err(Failure::usage(format!("--block {} must be odd and at least 3", cfg.block)));
        }
        if !(cfg.offset >= 0.0) || !(cfg.pad_frac >= 0.0) || cfg.out_size < 2 {
            return Err(Failure::usage("--offset and --pad-frac must be >= 0 and --size >= 2"));
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of images.
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for images and manifest.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Maximum tangent change per centerline step, radians.
    #[arg(long)]
    pub curvature: Option<f64>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    #[arg(long)]
    pub body_width: Option<f64>,
}

pub fn synth(a: &SynthArgs, argv: &[String]) -> CliResult<()> {
    let mut p = WormParams::default();
    if let Some(v) = a.curvature {
        p.curvature = v;
    }
    if let Some(v) = a.noise_std {
        p.noise_std = v;
    }
    if let Some(v) = a.body_width {
        p.body_width = v;
    }
    p.validate()?;
    if a.n == 0 {
        return Err(Failure::usage("--n must be at least 1"));
    }
    let manifest = a.out.join("manifest.csv");
    RunManifest::new(
        "synth",
        argv,
        json!({ "n": a.n, "seed": a.seed, "worm": p }),
        vec![a.seed],
        vec![display(&a.out), display(&manifest)],
    )
    .write(&a.out.join(MANIFEST_FILE))?;
    let written = gen_dataset(a.n, a.seed, &a.out, &p)?;
    println!("wrote {} images and {}", a.n, written.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Manifest of raw images with labels in image pixels.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for crops and their manifest.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub imaging: ImagingArgs,
}

pub fn preprocess(a: &PreprocessArgs, argv: &[String]) -> CliResult<()> {
    let cfg = a.imaging.resolve()?;
    let manifest = manifest_path(&a.manifest);
    require_file(&manifest)?;
    guard_output(&a.out, &[&parent_dir(&manifest)])?;
    let rows = load_manifest(&manifest)?;
    let out_manifest = a.out.join("manifest.csv");
    let rejected = a.out.join("rejected.csv");
    RunManifest::new(
        "preprocess",
        argv,
        serde_json::to_value(&cfg)?,
        vec![],
        vec![display(&a.out), display(&out_manifest), display(&rejected)],
    )
    .write(&a.out.join(MANIFEST_FILE))?;

    let report = preprocess_all(&rows, &cfg);
    if report.samples.is_empty() {
        let first = report.failures.first().map(|(_, e)| e.as_str()).unwrap_or("labels outside every crop");
        return Err(Failure::data(format!("no usable rows in {}: {first}", manifest.display())));
    }
    let width = rows.len().to_string().len().max(4);
    let named: Vec<(String, Sample)> = report
        .samples
        .iter()
        .map(|(i, s)| (format!("crop_{i:0width$}.png"), s.clone()))
        .collect();
    save_samples(&a.out, &named)?;

    let mut csv = String::from("row,image,reason\n");
    let mut lines: Vec<(usize, String)> = report
        .dropped
        .iter()
        .map(|&i| (i, "label outside crop".to_string()))
        .chain(report.failures.iter().cloned())
        .collect();
    lines.sort_by_key(|(i, _)| *i);
    for (i, reason) in &lines {
        let reason = reason.replace(['"', '\n'], "'");
        writeln!(csv, "{i},{},\"{reason}\"", rows[*i].image).unwrap();
    }
    write_file(&rejected, csv)?;
    for (i, e) in &report.failures {
        eprintln!("row {i}: {e}");
    }
    println!(
        "kept {} of {} rows; dropped {} with labels outside the crop; {} failed",
        report.samples.len(),
        rows.len(),
        report.dropped.len(),
        report.failures.len()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Preprocessed crop manifest, or its directory.
    #[arg(long)]
    pub data: PathBuf,
    /// TOML file with training keys and an optional [arch] table.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; run r goes to run_NN/.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

pub fn train(a: &TrainArgs, argv: &[String]) -> CliResult<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    a.overrides.apply(&mut cfg);
    validate(&cfg)?;
    let manifest = manifest_path(&a.data);
    require_file(&manifest)?;
    guard_output(&a.out, &[&parent_dir(&manifest)])?;
    let arch = cfg.arch.to_arch();
    let samples = load_samples(&manifest, arch.input_size)?;
    let split = split_dataset(samples.len(), cfg.train.split_ratio, cfg.train.split_seed)?;

    let run_dirs: Vec<PathBuf> = (0..cfg.train.runs).map(|r| a.out.join(format!("run_{r:02}"))).collect();
    let mut outputs = Vec::new();
    for d in &run_dirs {
        for f in ["metrics.csv", "best.ckpt", "last.ckpt"] {
            outputs.push(display(&d.join(f)));
        }
    }
    RunManifest::new(
        "train",
        argv,
        serde_json::to_value(&cfg)?,
        (0..cfg.train.runs).map(|r| cfg.train.run_seed(r)).collect(),
        outputs,
    )
    .write(&a.out.join(MANIFEST_FILE))?;
    eprintln!(
        "{} samples: {} train, {} val; {} run(s) of {} epochs",
        samples.len(),
        split.train.len(),
        split.val.len(),
        cfg.train.runs,
        cfg.train.epochs
    );

    for (r, dir) in run_dirs.iter().enumerate() {
        let out = train_run(&samples, &split, &arch, &cfg.train, r, |row| {
            eprintln!(
                "run {r} epoch {:>4}: train {:.6} val {:.6} pck15 {:.2}",
                row.epoch, row.train_loss, row.val_loss, row.val_pck15
            );
        })?;
        write_file(&dir.join("metrics.csv"), metrics_csv(&out.metrics))?;
        save_checkpoint(&out.best, &dir.join("best.ckpt"))?;
        save_checkpoint(&out.last, &dir.join("last.ckpt"))?;
        let last = out.metrics.last().expect("at least one epoch");
        println!(
            "run {r}: seed {} final val pck15 {:.2}, best {:.2} at epoch {}",
            cfg.train.run_seed(r),
            last.val_pck15,
            out.metrics[out.best.epoch as usize - 1].val_pck15,
            out.best.epoch
        );
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// One checkpoint per run.
    #[arg(long, required = true, num_args = 1..)]
    pub ckpt: Vec<PathBuf>,
    /// Preprocessed crop manifest, or its directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_THRESHOLDS)]
    pub thresholds: Vec<f64>,
    /// Score every sample instead of each checkpoint's validation split.
    #[arg(long)]
    pub all: bool,
    /// Directory for report.txt, report.csv and run.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn eval(a: &EvalArgs, argv: &[String]) -> CliResult<()> {
    if a.thresholds.is_empty() || a.thresholds.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(Failure::usage("--thresholds must be non-negative numbers"));
    }
    let manifest = manifest_path(&a.data);
    require_file(&manifest)?;
    for c in &a.ckpt {
        require_file(c)?;
    }
    if let Some(out) = &a.out {
        let mut inputs: Vec<&Path> = a.ckpt.iter().map(PathBuf::as_path).collect();
        let data_dir = parent_dir(&manifest);
        inputs.push(&data_dir);
        guard_output(out, &inputs)?;
        RunManifest::new(
            "eval",
            argv,
            json!({ "thresholds": a.thresholds, "all": a.all }),
            vec![],
            vec![display(&out.join("report.txt")), display(&out.join("report.csv"))],
        )
        .write(&out.join(MANIFEST_FILE))?;
    }

    let mut by_size: BTreeMap<usize, Vec<Sample>> = BTreeMap::new();
    let mut tables = Vec::with_capacity(a.ckpt.len());
    for path in &a.ckpt {
        let ckpt = load_checkpoint(path)?;
        let size = ckpt.arch().input_size;
        if !by_size.contains_key(&size) {
            by_size.insert(size, load_samples(&manifest, size)?);
        }
        let samples = &by_size[&size];
        let subset: Vec<Sample> = if a.all {
            samples.clone()
        } else {
            let split = split_dataset(samples.len(), ckpt.train.split_ratio, ckpt.train.split_seed)?;
            split.val.iter().map(|&i| samples[i].clone()).collect()
        };
        let (table, _) = evaluate(&ckpt.params, &subset, &a.thresholds).context(path.display())?;
        eprintln!("{}: {} samples", path.display(), subset.len());
        tables.push(table);
    }
    let report = aggregate_runs(&tables)?;
    let text = report.to_text();
    print!("{text}");
    if let Some(out) = &a.out {
        write_file(&out.join("report.txt"), &text)?;
        write_file(&out.join("report.csv"), report.to_csv())?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out_svg: PathBuf,
    /// Ground truth as head_x,head_y,tail_x,tail_y in the image's pixels.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub labels: Option<Vec<f64>>,
    /// The image is a raw micrograph: threshold and crop it first.
    #[arg(long)]
    pub raw: bool,
    #[command(flatten)]
    pub imaging: ImagingArgs,
}

pub fn predict(a: &PredictArgs, argv: &[String]) -> CliResult<()> {
    let labels = a.labels.as_deref().map(parse_pair).transpose()?;
    require_file(&a.ckpt)?;
    require_file(&a.image)?;
    guard_output(&a.out_svg, &[&a.ckpt, &a.image])?;
    let ckpt = load_checkpoint(&a.ckpt)?;
    let size = ckpt.arch().input_size;
    let mut cfg = a.imaging.resolve()?;
    cfg.out_size = size;
    RunManifest::new(
        "predict",
        argv,
        json!({ "raw": a.raw, "imaging": cfg }),
        vec![],
        vec![display(&a.out_svg)],
    )
    .write(&sidecar(&a.out_svg))?;

    let img = GrayImage::load(&a.image)?;
    let (crop, gt, back) = if a.raw {
        let pre = preprocess_image(&img, &cfg)?;
        let gt = match labels {
            Some(l) => Some(KeypointPair::new(
                transfer_label(l.head, &pre.fwd, size).ok_or_else(|| Failure::data("head label falls outside the crop"))?,
                transfer_label(l.tail, &pre.fwd, size).ok_or_else(|| Failure::data("tail label falls outside the crop"))?,
            )),
            None => None,
        };
        (pre.crop, gt, Some(pre.fwd.inverse()))
    } else {
        if img.width() != size || img.height() != size {
            return Err(Failure::data(format!(
                "expected a {size}x{size} crop, got {}x{}; pass --raw to preprocess",
                img.width(),
                img.height()
            )));
        }
        (img, labels, None)
    };
    let pred = predict_detailed(&ckpt.params, &crop)?;
    write_file(&a.out_svg, prediction_svg(&crop, gt.as_ref(), &pred.pixels, &pred.probs.head))?;
    println!("crop {}", fmt_pair(&pred.pixels));
    if let Some(inv) = back {
        println!("image {}", fmt_pair(&pred.pixels.map(|p| inv.apply(p))));
    }
    if let Some(gt) = gt {
        println!(
            "error head={:.2} tail={:.2}",
            pred.pixels.head.distance(&gt.head),
            pred.pixels.tail.distance(&gt.tail)
        );
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Contour offset used for the corner angle.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Corners sharper than this angle (radians) qualify.
    #[arg(long, default_value_t = 2.0)]
    pub theta_max: f64,
    #[arg(long)]
    pub out_svg: PathBuf,
    #[command(flatten)]
    pub imaging: ImagingArgs,
}

pub fn baseline(a: &BaselineArgs, argv: &[String]) -> CliResult<()> {
    if a.k == 0 || !(a.theta_max > 0.0 && a.theta_max <= std::f64::consts::PI) {
        return Err(Failure::usage("--k must be positive and --theta-max in (0, pi]"));
    }
    let cfg = a.imaging.resolve()?;
    require_file(&a.image)?;
    guard_output(&a.out_svg, &[&a.image])?;
    RunManifest::new(
        "baseline",
        argv,
        json!({ "k": a.k, "theta_max": a.theta_max, "imaging": cfg }),
        vec![],
        vec![display(&a.out_svg)],
    )
    .write(&sidecar(&a.out_svg))?;
    let img = GrayImage::load(&a.image)?;
    let result = run_baseline(&img, &cfg, a.k, a.theta_max)?;
    write_file(&a.out_svg, baseline_svg(&img, &result.contour, result.proposals.as_ref().ok()))?;
    match &result.proposals {
        Ok(p) => println!(
            "contour {} points; tail=({:.0}, {:.0}) angle {:.3}; head=({:.0}, {:.0}) angle {:.3}",
            result.contour.len(),
            p.tail.point.x,
            p.tail.point.y,
            p.tail.angle,
            p.head.point.x,
            p.head.point.y,
            p.head.angle
        ),
        Err(e) => println!("contour {} points; {e}", result.contour.len()),
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Metrics CSV of each run; curves are averaged over runs.
    #[arg(long, required = true, num_args = 1..)]
    pub metrics: Vec<PathBuf>,
    #[arg(long)]
    pub out_svg: PathBuf,
}

pub fn plot(a: &PlotArgs, argv: &[String]) -> CliResult<()> {
    for m in &a.metrics {
        require_file(m)?;
    }
    let inputs: Vec<&Path> = a.metrics.iter().map(PathBuf::as_path).collect();
    guard_output(&a.out_svg, &inputs)?;
    RunManifest::new("plot", argv, json!({}), vec![], vec![display(&a.out_svg)]).write(&sidecar(&a.out_svg))?;
    let mut runs = Vec::with_capacity(a.metrics.len());
    for m in &a.metrics {
        let text = fs::read_to_string(m).context(format!("reading {}", m.display()))?;
        let rows = parse_metrics_csv(&text).map_err(|e| Failure::data(format!("{}: {e}", m.display())))?;
        runs.push(rows);
    }
    write_file(&a.out_svg, curves_svg(&runs)?)?;
    println!("plotted {} run(s) to {}", runs.len(), a.out_svg.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct RerunArgs {
    /// A run.json written by an earlier command.
    pub manifest: PathBuf,
}

/// Arguments recorded in a manifest, checked for replay.
pub fn rerun_argv(a: &RerunArgs) -> CliResult<Vec<String>> {
    let m = RunManifest::read(&a.manifest)?;
    match m.argv.first() {
        Some(cmd) if cmd == "rerun" => Err(Failure::data("manifest records a rerun")),
        Some(cmd) if cmd == &m.command => Ok(m.argv),
        _ => Err(Failure::data(format!(
            "{}: argv does not start with command {}",
            a.manifest.display(),
            m.command
        ))),
    }
}

