//! Training configuration: defaults, then a TOML file, then flags.

use std::fs;
use std::path::Path;

use clap::Args;
use serde::{Deserialize, Serialize};
use wormloc::nn::ArchConfig;
use wormloc::train::TrainConfig;

use crate::failure::{CliResult, Context, Failure};

/// `[arch]` table of the config file. The network input is always one
/// grayscale channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSection {
    pub input_size: usize,
    pub trunk_channels: Vec<usize>,
    pub heatmap_size: usize,
}

impl Default for ArchSection {
    fn default() -> Self {
        let a = ArchConfig::default();
        Self {
            input_size: a.input_size,
            trunk_channels: a.trunk_channels,
            heatmap_size: a.heatmap_size,
        }
    }
}

impl ArchSection {
    pub fn to_arch(&self) -> ArchConfig {
        ArchConfig {
            input_size: self.input_size,
            in_channels: 1,
            trunk_channels: self.trunk_channels.clone(),
            heatmap_size: self.heatmap_size,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub arch: ArchSection,
}

/// Parses top-level training keys plus an optional `[arch]` table. Unknown
/// keys are rejected.
pub fn parse_config(text: &str) -> CliResult<RunConfig> {
    let mut table: toml::Table = text.parse()?;
    let arch = match table.remove("arch") {
        Some(v) => v.try_into::<ArchSection>().context("[arch]")?,
        None => ArchSection::default(),
    };
    let train: TrainConfig = toml::Value::Table(table).try_into()?;
    Ok(RunConfig { train, arch })
}

pub fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).context(format!("reading {}", p.display()))?;
            parse_config(&text).context(format!("parsing {}", p.display()))
        }
    }
}

/// One flag per config key; a flag wins over the file.
#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct TrainOverrides {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lambda_js: Option<f64>,
    #[arg(long)]
    pub sigma_hm: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub split_ratio: Option<f64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub brightness: Option<f64>,
    #[arg(long)]
    pub rotate: Option<bool>,
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub trunk_channels: Option<Vec<usize>>,
    #[arg(long)]
    pub heatmap_size: Option<usize>,
}

impl TrainOverrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { t.$field = v; })*
            };
        }
        set!(lr, beta1, beta2, eps, epochs, batch_size, lambda_js, sigma_hm, seed, runs, split_ratio, split_seed, brightness, rotate);
        if let Some(v) = self.input_size {
            cfg.arch.input_size = v;
        }
        if let Some(v) = &self.trunk_channels {
            cfg.arch.trunk_channels = v.clone();
        }
        if let Some(v) = self.heatmap_size {
            cfg.arch.heatmap_size = v;
        }
    }
}

/// Checks the merged configuration before any work starts.
pub fn validate(cfg: &RunConfig) -> CliResult<()> {
    cfg.train.validate().map_err(Failure::data)?;
    if !(cfg.train.split_ratio > 0.0 && cfg.train.split_ratio < 1.0) {
        return Err(Failure::data("split_ratio must lie strictly between 0 and 1"));
    }
    cfg.arch.to_arch().validate().map_err(Failure::data)?;
    Ok(())
}
