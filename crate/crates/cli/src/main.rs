//! `eld`: train, run and score superpixel saliency models.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use eld_core::dataset::Dataset;
use eld_core::eldmap::{distance_map, CHANNELS, GRID};
use eld_core::eval::{evaluate_dataset, EvalOptions};
use eld_core::image::{load_mask, save_gray8, save_pgm16};
use eld_core::model::{Mode, Model};
use eld_core::predict::{predict_image, Prediction, SaliencyMap};
use eld_core::synth::write_synthetic;
use eld_core::train::{train, write_loss_log};
use log::info;

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "eld", version, about = "Superpixel saliency with encoded low-level distance maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on `<dataset>/images` and `<dataset>/masks`.
    Train,
    /// Write one 8-bit saliency map per image in `<dataset>/images`.
    Predict {
        /// Also write `<stem>_mask.png`, thresholded at `mask_threshold`.
        #[arg(long)]
        export_binary: bool,
        /// Also write the superpixel label map as 16-bit PGM.
        #[arg(long)]
        dump_labels: bool,
        /// Also write the 54 distance-map channels of superpixel Q as PGM.
        #[arg(long, value_name = "Q")]
        dump_query: Option<usize>,
    },
    /// Score the maps in `<maps>` against `<dataset>/masks`.
    Eval,
    /// Generate a synthetic dataset under `<output>/train` and `<output>/test`.
    Synth,
}

#[derive(Args)]
struct Flags {
    /// `key = value` file applied before the flags below.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_parser = ["eld-hf", "ld-hf", "eld", "hf"])]
    mode: Option<String>,
    #[arg(long, global = true)]
    superpixels: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_parser = ["file", "toy"])]
    backbone: Option<String>,
    /// Directory of `<stem>.eldt` feature maps for the file backbone.
    #[arg(long, global = true, value_name = "DIR")]
    features: Option<PathBuf>,
    #[arg(long, global = true, value_name = "DIR")]
    dataset: Option<PathBuf>,
    #[arg(long, global = true, value_name = "DIR")]
    output: Option<PathBuf>,
    #[arg(long, global = true, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true, value_name = "DIR")]
    maps: Option<PathBuf>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    batch: Option<usize>,
    #[arg(long, global = true)]
    iterations: Option<usize>,
    #[arg(long, global = true)]
    train: Option<usize>,
    #[arg(long, global = true)]
    test: Option<usize>,
    /// Side length of synthetic images.
    #[arg(long, global = true)]
    size: Option<usize>,
    /// Any other config key, as `key=value`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Flags {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut push = |key: &str, value: Option<String>| {
            if let Some(v) = value {
                out.push((key.to_string(), v));
            }
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        push("mode", self.mode.clone());
        push("superpixels", self.superpixels.map(|v| v.to_string()));
        push("seed", self.seed.map(|v| v.to_string()));
        push("backbone", self.backbone.clone());
        push("features", path(&self.features));
        push("dataset", path(&self.dataset));
        push("output", path(&self.output));
        push("checkpoint", path(&self.checkpoint));
        push("maps", path(&self.maps));
        push("lr", self.lr.map(|v| v.to_string()));
        push("batch", self.batch.map(|v| v.to_string()));
        push("iterations", self.iterations.map(|v| v.to_string()));
        push("train", self.train.map(|v| v.to_string()));
        push("test", self.test.map(|v| v.to_string()));
        push("size", self.size.map(|v| v.to_string()));
        for kv in &self.set {
            match kv.split_once('=') {
                Some((k, v)) => out.push((k.trim().to_string(), v.trim().to_string())),
                None => out.push((kv.clone(), String::new())),
            }
        }
        out
    }

    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        for (key, value) in self.overrides() {
            cfg.set(&key, &value).with_context(|| format!("flag --{key}"))?;
        }
        Ok(cfg)
    }
}

fn log_config(cfg: &RunConfig) {
    for line in cfg.render().lines() {
        info!("config: {line}");
    }
}

fn write_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let path = dir.join("config.txt");
    fs::write(&path, cfg.render()).with_context(|| format!("cannot write {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn open_dataset(root: &Path) -> Result<Dataset> {
    let dataset = Dataset::open(root)?;
    if dataset.is_empty() {
        bail!("dataset {} has no images", root.display());
    }
    Ok(dataset)
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let tc = cfg.train_config();
    tc.model.validate()?;
    let backbone = cfg.backbone_for(cfg.mode, cfg.backbone_channels)?;
    let root = cfg.require(&cfg.dataset, "dataset")?;
    let out = cfg.require(&cfg.output, "output")?;
    let dataset = open_dataset(root)?;
    create_dir(out)?;
    write_config(cfg, out)?;

    let start = Instant::now();
    let outcome = train(&dataset, &tc, backbone.as_deref(), Some(out))?;
    write_loss_log(out.join("loss.tsv"), &outcome.loss_log)?;
    let model_path = out.join("model.eldm");
    outcome.model.save(&model_path)?;
    let last = outcome.loss_log.last().map(|r| r.loss).unwrap_or(f64::NAN);
    info!("trained {} iterations in {:.1?}, final loss {last:.5}", outcome.loss_log.len(), start.elapsed());
    println!("{}", model_path.display());
    Ok(())
}

fn dump_query(pred: &Prediction, q: usize, out: &Path, stem: &str) -> Result<()> {
    let p = &pred.prepared;
    if q >= p.regions() {
        bail!("--dump-query {q}: {stem} has only {} superpixels", p.regions());
    }
    let map = distance_map(&p.grid, &p.features, q)?;
    let data = map.data();
    for c in 0..CHANNELS {
        let values: Vec<f32> = (0..GRID * GRID).map(|i| data[i * CHANNELS + c]).collect();
        let (lo, hi) = values.iter().fold((f32::MAX, f32::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let bytes: Vec<u8> = values.iter().map(|v| ((v - lo) / span * 255.0).round() as u8).collect();
        save_gray8(out.join(format!("{stem}_q{q}_c{c:02}.pgm")), GRID, GRID, &bytes)?;
    }
    Ok(())
}

fn cmd_predict(cfg: &RunConfig, export_binary: bool, dump_labels: bool, query: Option<usize>, mode_flag: Option<Mode>) -> Result<()> {
    let ckpt = cfg.require(&cfg.checkpoint, "checkpoint")?;
    let model = Model::<f32>::load(ckpt).with_context(|| format!("cannot load checkpoint {}", ckpt.display()))?;
    let mode = model.mode();
    if let Some(m) = mode_flag.filter(|m| *m != mode) {
        bail!("configuration error: --mode {m} but checkpoint {} holds a {mode} model", ckpt.display());
    }
    let backbone = cfg.backbone_for(mode, model.config().backbone_channels)?;
    let root = cfg.require(&cfg.dataset, "dataset")?;
    let out = cfg.require(&cfg.output, "output")?;
    let dataset = open_dataset(root)?;
    create_dir(out)?;
    write_config(cfg, out)?;

    let slic = cfg.slic();
    for entry in dataset.entries() {
        let image = entry.load_image()?;
        let pred = predict_image(&model, &image, &entry.stem, backbone.as_deref(), &slic)
            .with_context(|| format!("predicting {}", entry.stem))?;
        let map = &pred.map;
        map.save(out.join(format!("{}.png", entry.stem)))?;
        if export_binary {
            let mask = map.binarize(cfg.mask_threshold);
            save_gray8(out.join(format!("{}_mask.png", entry.stem)), map.width(), map.height(), &mask)?;
        }
        if dump_labels {
            let seg = &pred.prepared.segmentation;
            if seg.count() > usize::from(u16::MAX) + 1 {
                bail!("{}: {} labels do not fit 16 bits", entry.stem, seg.count());
            }
            let labels: Vec<u16> = seg.labels().iter().map(|&l| l as u16).collect();
            save_pgm16(out.join(format!("{}_labels.pgm", entry.stem)), seg.width(), seg.height(), &labels)?;
        }
        if let Some(q) = query {
            dump_query(&pred, q, out, &entry.stem)?;
        }
        info!("{}: {} superpixels", entry.stem, pred.scores.len());
    }
    info!("wrote {} maps to {}", dataset.len(), out.display());
    Ok(())
}

fn find_map(dir: &Path, stem: &str) -> Result<PathBuf> {
    ["png", "pgm"]
        .iter()
        .map(|e| dir.join(format!("{stem}.{e}")))
        .find(|p| p.is_file())
        .with_context(|| format!("no saliency map for {stem} in {}", dir.display()))
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let root = cfg.require(&cfg.dataset, "dataset")?;
    let maps = cfg.require(&cfg.maps, "maps")?;
    let out = cfg.require(&cfg.output, "output")?;
    let dataset = open_dataset(root)?;
    let mut pairs = Vec::with_capacity(dataset.len());
    for entry in dataset.entries() {
        let mask_path = entry
            .mask
            .as_ref()
            .with_context(|| format!("no ground-truth mask for {}", entry.stem))?;
        let mask = load_mask(mask_path)?;
        let map = SaliencyMap::load(find_map(maps, &entry.stem)?)?;
        pairs.push((entry.stem.clone(), map, mask));
    }
    let opts = EvalOptions {
        beta2: cfg.beta2,
        ..EvalOptions::default()
    };
    let report = evaluate_dataset(&pairs, &opts)?;
    create_dir(out)?;
    write_config(cfg, out)?;
    fs::write(out.join("pr.tsv"), report.to_tsv())?;
    fs::write(out.join("per_image.tsv"), report.per_image_tsv())?;
    println!("MaxF\t{:.6}\t{}", report.max_f, report.max_f_threshold);
    println!("MAE\t{:.6}", report.mae);
    if !report.excluded.is_empty() {
        info!("{} images with empty ground truth excluded", report.excluded.len());
    }
    Ok(())
}

fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let out = cfg.require(&cfg.output, "output")?;
    write_synthetic(out, &cfg.synth_config())?;
    info!("wrote {} + {} images to {}", cfg.train, cfg.test, out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = cli.flags.resolve()?;
    log_config(&cfg);
    match cli.command {
        Command::Train => cmd_train(&cfg),
        Command::Predict {
            export_binary,
            dump_labels,
            dump_query,
        } => {
            let mode_flag = cli.flags.mode.as_deref().map(str::parse).transpose()?;
            cmd_predict(&cfg, export_binary, dump_labels, dump_query, mode_flag)
        }
        Command::Eval => cmd_eval(&cfg),
        Command::Synth => cmd_synth(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
