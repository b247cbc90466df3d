//! Run configuration: defaults, then a `key = value` file, then flags.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use eld_core::backbone::{Backbone, FileBackbone, ToyBackbone, DEFAULT_CHANNELS};
use eld_core::model::{Mode, ModelConfig};
use eld_core::slic::{SlicParams, DEFAULT_COMPACTNESS, DEFAULT_SUPERPIXELS};
use eld_core::synth::SynthConfig;
use eld_core::train::TrainConfig;

/// Where high-level feature maps come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneSource {
    /// `<features>/<stem>.eldt` tensors written by an exporter.
    File,
    /// Untrained convolution stack, for tests and demos.
    Toy,
}

impl FromStr for BackboneSource {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "file" => Ok(BackboneSource::File),
            "toy" => Ok(BackboneSource::Toy),
            other => bail!("unknown backbone source {other:?} (expected file or toy)"),
        }
    }
}

impl fmt::Display for BackboneSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneSource::File => "file",
            BackboneSource::Toy => "toy",
        })
    }
}

pub const KEYS: [&str; 24] = [
    "dataset",
    "features",
    "output",
    "checkpoint",
    "maps",
    "mode",
    "superpixels",
    "compactness",
    "seed",
    "lr",
    "momentum",
    "batch",
    "iterations",
    "checkpoint_every",
    "fc_width",
    "reduction_channels",
    "backbone",
    "backbone_channels",
    "backbone_seed",
    "mask_threshold",
    "beta2",
    "train",
    "test",
    "size",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub maps: Option<PathBuf>,
    pub mode: Mode,
    pub superpixels: usize,
    pub compactness: f64,
    pub seed: u64,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub iterations: usize,
    pub checkpoint_every: usize,
    pub fc_width: usize,
    pub reduction_channels: usize,
    pub backbone: BackboneSource,
    pub backbone_channels: usize,
    pub backbone_seed: u64,
    /// Threshold on the 8-bit map used for binary mask export.
    pub mask_threshold: u8,
    pub beta2: f64,
    pub train: usize,
    pub test: usize,
    pub size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let synth = SynthConfig::default();
        RunConfig {
            dataset: None,
            features: None,
            output: None,
            checkpoint: None,
            maps: None,
            mode: Mode::EldHf,
            superpixels: DEFAULT_SUPERPIXELS,
            compactness: DEFAULT_COMPACTNESS,
            seed: train.model.seed,
            lr: train.learning_rate,
            momentum: train.momentum,
            batch: train.batch_size,
            iterations: train.max_iterations,
            checkpoint_every: train.checkpoint_every,
            fc_width: train.model.fc_width,
            reduction_channels: train.model.reduction_channels,
            backbone: BackboneSource::File,
            backbone_channels: DEFAULT_CHANNELS,
            backbone_seed: 7,
            mask_threshold: 240,
            beta2: eld_core::eval::DEFAULT_BETA2,
            train: synth.train,
            test: synth.test,
            size: synth.width,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e| anyhow!("invalid value {value:?} for {key}: {e}"))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = Some(value.into()),
            "features" => self.features = Some(value.into()),
            "output" => self.output = Some(value.into()),
            "checkpoint" => self.checkpoint = Some(value.into()),
            "maps" => self.maps = Some(value.into()),
            "mode" => self.mode = value.parse().map_err(|e| anyhow!("{e}"))?,
            "superpixels" => self.superpixels = parse(key, value)?,
            "compactness" => self.compactness = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "fc_width" => self.fc_width = parse(key, value)?,
            "reduction_channels" => self.reduction_channels = parse(key, value)?,
            "backbone" => self.backbone = value.parse()?,
            "backbone_channels" => self.backbone_channels = parse(key, value)?,
            "backbone_seed" => self.backbone_seed = parse(key, value)?,
            "mask_threshold" => self.mask_threshold = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "train" => self.train = parse(key, value)?,
            "test" => self.test = parse(key, value)?,
            "size" => self.size = parse(key, value)?,
            other => bail!("unknown config key {other:?}"),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`. Blank lines and lines
    /// starting with `#` are skipped; a key may appear once.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`", n + 1))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                bail!("line {}: duplicate key {key:?}", n + 1);
            }
            self.set(key, value).with_context(|| format!("line {}", n + 1))?;
            seen.push(key);
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        self.apply_text(&text).with_context(|| format!("in config {}", path.display()))
    }

    /// The resolved configuration in file syntax, keys in fixed order.
    /// Unset paths are omitted.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            if let Some(value) = self.value(key) {
                writeln!(out, "{key} = {value}").unwrap();
            }
        }
        out
    }

    fn value(&self, key: &str) -> Option<String> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        Some(match key {
            "dataset" => return path(&self.dataset),
            "features" => return path(&self.features),
            "output" => return path(&self.output),
            "checkpoint" => return path(&self.checkpoint),
            "maps" => return path(&self.maps),
            "mode" => self.mode.to_string(),
            "superpixels" => self.superpixels.to_string(),
            "compactness" => self.compactness.to_string(),
            "seed" => self.seed.to_string(),
            "lr" => self.lr.to_string(),
            "momentum" => self.momentum.to_string(),
            "batch" => self.batch.to_string(),
            "iterations" => self.iterations.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "fc_width" => self.fc_width.to_string(),
            "reduction_channels" => self.reduction_channels.to_string(),
            "backbone" => self.backbone.to_string(),
            "backbone_channels" => self.backbone_channels.to_string(),
            "backbone_seed" => self.backbone_seed.to_string(),
            "mask_threshold" => self.mask_threshold.to_string(),
            "beta2" => self.beta2.to_string(),
            "train" => self.train.to_string(),
            "test" => self.test.to_string(),
            "size" => self.size.to_string(),
            _ => unreachable!("key list and match arms diverged"),
        })
    }

    pub fn slic(&self) -> SlicParams {
        SlicParams {
            superpixels: self.superpixels,
            compactness: self.compactness,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let defaults = TrainConfig::default();
        TrainConfig {
            model: ModelConfig {
                mode: self.mode,
                fc_width: self.fc_width,
                reduction_channels: self.reduction_channels,
                backbone_channels: self.backbone_channels,
                seed: self.seed,
                ..defaults.model
            },
            slic: self.slic(),
            learning_rate: self.lr,
            momentum: self.momentum,
            batch_size: self.batch,
            max_iterations: self.iterations,
            checkpoint_every: self.checkpoint_every,
            ..defaults
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            width: self.size,
            height: self.size,
            train: self.train,
            test: self.test,
            seed: self.seed,
        }
    }

    /// The backbone `mode` needs, or `None` when it uses no high-level
    /// features. A file source without a feature directory is an error.
    pub fn backbone_for(&self, mode: Mode, channels: usize) -> Result<Option<Box<dyn Backbone>>> {
        if !mode.uses_backbone() {
            return Ok(None);
        }
        Ok(Some(match self.backbone {
            BackboneSource::File => {
                let dir = self.features.as_ref().ok_or_else(|| {
                    anyhow!("configuration error: mode {mode} with backbone = file needs a feature directory (features = <dir>)")
                })?;
                Box::new(FileBackbone::new(dir, channels))
            }
            BackboneSource::Toy => Box::new(ToyBackbone::new(channels, self.backbone_seed)),
        }))
    }

    pub fn require<'a>(&self, value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        value
            .as_deref()
            .ok_or_else(|| anyhow!("configuration error: {key} is not set (use --{key} or `{key} = ...`)"))
    }
}
