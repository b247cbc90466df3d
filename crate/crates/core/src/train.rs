//! Training-sample selection and the SGD training loop.

use std::fmt::Write as _;
use std::path::Path;

use log::{info, warn};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backbone::Backbone;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::features::GaborBank;
use crate::image::GroundTruthMask;
use crate::model::{Model, ModelConfig};
use crate::nn::Sgd;
use crate::pipeline::{assemble_batch, prepare_image, PreparedImage};
use crate::slic::{SlicParams, SuperpixelSegmentation};
use crate::tensor::write_atomic;

pub const SALIENT_PER_IMAGE: usize = 30;
pub const BACKGROUND_PER_IMAGE: usize = 70;
/// Mean mask value at or above which a region counts as salient.
pub const SALIENT_THRESHOLD: f64 = 0.7;
/// Mean mask value at or below which a region counts as background.
pub const BACKGROUND_THRESHOLD: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingSample {
    /// Index into the prepared image list.
    pub image: usize,
    pub query: usize,
    /// 1 = salient.
    pub label: u8,
}

/// Mean ground-truth value inside each region.
pub fn region_mask_means(seg: &SuperpixelSegmentation, mask: &GroundTruthMask) -> Result<Vec<f64>> {
    if (seg.width(), seg.height()) != (mask.width(), mask.height()) {
        return Err(Error::Argument("mask and segmentation sizes differ".into()));
    }
    let mut sums = vec![0.0f64; seg.count()];
    for (&l, &v) in seg.labels().iter().zip(mask.values()) {
        sums[l as usize] += v as f64;
    }
    Ok(sums
        .iter()
        .zip(seg.sizes())
        .map(|(s, &n)| s / n as f64)
        .collect())
}

/// Draws up to 30 salient and 70 background regions without replacement.
/// Regions with a mean mask value strictly between the two bands are never
/// drawn. Returns an empty list when the image has no salient region.
pub fn sample_regions(
    image: usize,
    seg: &SuperpixelSegmentation,
    mask: &GroundTruthMask,
    rng: &mut impl Rng,
) -> Result<Vec<TrainingSample>> {
    let means = region_mask_means(seg, mask)?;
    let salient: Vec<usize> = (0..means.len()).filter(|&r| means[r] >= SALIENT_THRESHOLD).collect();
    let background: Vec<usize> = (0..means.len()).filter(|&r| means[r] <= BACKGROUND_THRESHOLD).collect();
    if salient.is_empty() {
        return Ok(Vec::new());
    }
    let mut out = Vec::with_capacity(SALIENT_PER_IMAGE + BACKGROUND_PER_IMAGE);
    for (pool, take, label) in [(&salient, SALIENT_PER_IMAGE, 1u8), (&background, BACKGROUND_PER_IMAGE, 0u8)] {
        let amount = take.min(pool.len());
        for i in index::sample(rng, pool.len(), amount) {
            out.push(TrainingSample {
                image,
                query: pool[i],
                label,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub slic: SlicParams,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_iterations: usize,
    /// Write a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: usize,
    /// Window length of the loss-plateau learning-rate drop.
    pub plateau_window: usize,
    /// Multiplier applied to the learning rate on a plateau.
    pub lr_drop: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            slic: SlicParams::default(),
            learning_rate: 0.001,
            momentum: 0.9,
            batch_size: 128,
            max_iterations: 20_000,
            checkpoint_every: 1000,
            plateau_window: 500,
            lr_drop: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn seed(&self) -> u64 {
        self.model.seed
    }
}

/// Prepared images and the samples drawn from them.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub images: Vec<PreparedImage>,
    pub samples: Vec<TrainingSample>,
    /// Stems dropped for lacking a mask or a salient region.
    pub skipped: Vec<String>,
}

/// Prepares every image (in parallel) and draws samples in stem order from a
/// generator seeded with `seed`.
pub fn build_training_set(
    dataset: &Dataset,
    slic: &SlicParams,
    backbone: Option<&dyn Backbone>,
    seed: u64,
) -> Result<TrainingSet> {
    let bank = GaborBank::default();
    let prepared: Vec<Result<Option<(PreparedImage, GroundTruthMask)>>> = dataset
        .entries()
        .par_iter()
        .map(|entry| {
            if entry.mask.is_none() {
                return Ok(None);
            }
            let (image, mask) = entry.load_pair()?;
            let p = prepare_image(&image, &entry.stem, slic, &bank, backbone)?;
            Ok(Some((p, mask)))
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a4d_504c_4553);
    let mut images = Vec::new();
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for (entry, item) in dataset.entries().iter().zip(prepared) {
        let Some((p, mask)) = item? else {
            warn!("{}: no ground-truth mask, skipped", entry.stem);
            skipped.push(entry.stem.clone());
            continue;
        };
        let drawn = sample_regions(images.len(), &p.segmentation, &mask, &mut rng)?;
        if drawn.is_empty() {
            warn!("{}: no salient superpixel, skipped", entry.stem);
            skipped.push(entry.stem.clone());
            continue;
        }
        samples.extend(drawn);
        images.push(p);
    }
    if images.is_empty() {
        return Err(Error::Dataset(format!(
            "no usable training images under {}",
            dataset.root().display()
        )));
    }
    Ok(TrainingSet {
        images,
        samples,
        skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub loss_log: Vec<LossRecord>,
}

/// `iteration<TAB>loss` lines.
pub fn format_loss_log(log: &[LossRecord]) -> String {
    let mut out = String::new();
    for r in log {
        writeln!(out, "{}\t{}", r.iteration, r.loss).expect("write to string");
    }
    out
}

pub fn write_loss_log(path: impl AsRef<Path>, log: &[LossRecord]) -> Result<()> {
    write_atomic(path.as_ref(), format_loss_log(log).as_bytes())
}

fn window_mean(log: &[LossRecord]) -> f64 {
    log.iter().map(|r| r.loss).sum::<f64>() / log.len() as f64
}

/// Runs mini-batch SGD over `set` for `cfg.max_iterations` batches.
///
/// Each epoch reshuffles the samples; the final partial batch of an epoch is
/// kept. After every `plateau_window` iterations (once two full windows
/// exist) the learning rate drops by `lr_drop` if the latest window's mean
/// loss is not below the previous window's.
pub fn train_on(set: &TrainingSet, cfg: &TrainConfig, checkpoint_dir: Option<&Path>) -> Result<TrainOutcome> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if set.samples.is_empty() {
        return Err(Error::Dataset("no training samples".into()));
    }
    let mode = cfg.model.mode;
    let mut model = Model::<f32>::new(cfg.model.clone())?;
    let mut lr = cfg.learning_rate;
    let mut opt = Sgd::new(lr as f32, cfg.momentum as f32);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed() ^ 0x0073_6875_6666_6c65);
    let mut order: Vec<usize> = (0..set.samples.len()).collect();
    let mut cursor = order.len();
    let mut log = Vec::with_capacity(cfg.max_iterations);
    let mut items = Vec::with_capacity(cfg.batch_size);
    let mut labels = Vec::with_capacity(cfg.batch_size);

    for iteration in 0..cfg.max_iterations {
        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        items.clear();
        labels.clear();
        for &i in &order[cursor..end] {
            let s = set.samples[i];
            items.push((s.image, s.query));
            labels.push(s.label);
        }
        cursor = end;

        let batch = assemble_batch(&set.images, &items, mode)?;
        let (loss, grads) = model.loss_and_grads(&batch, &labels)?;
        opt.step(model.params_mut(), &grads)?;
        log.push(LossRecord {
            iteration,
            loss: loss as f64,
            learning_rate: lr,
        });

        let done = iteration + 1;
        let w = cfg.plateau_window;
        if w > 0 && done % w == 0 && done >= 2 * w {
            let latest = window_mean(&log[done - w..done]);
            let previous = window_mean(&log[done - 2 * w..done - w]);
            if latest >= previous {
                lr *= cfg.lr_drop;
                opt.learning_rate = lr as f32;
                info!("iteration {done}: loss plateau ({latest:.5} >= {previous:.5}), lr -> {lr}");
            }
        }
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                model.save(dir.join(format!("checkpoint_{done:06}.eldm")))?;
            }
        }
        if done % 100 == 0 {
            info!("iteration {done}: loss {:.5}", loss);
        }
    }
    Ok(TrainOutcome { model, loss_log: log })
}

/// Prepares `dataset` and trains on it. `backbone` is required by modes that
/// use high-level features.
pub fn train(
    dataset: &Dataset,
    cfg: &TrainConfig,
    backbone: Option<&dyn Backbone>,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let backbone = if cfg.model.mode.uses_backbone() {
        Some(backbone.ok_or_else(|| Error::Config(format!("{} mode needs a backbone", cfg.model.mode)))?)
    } else {
        None
    };
    let set = build_training_set(dataset, &cfg.slic, backbone, cfg.seed())?;
    info!(
        "training on {} images, {} samples ({} skipped)",
        set.images.len(),
        set.samples.len(),
        set.skipped.len()
    );
    train_on(&set, cfg, checkpoint_dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strips(m: usize, salient: usize) -> (SuperpixelSegmentation, GroundTruthMask) {
        // m vertical strips of width 2 over a 2m x 4 image; the first
        // `salient` strips are fully foreground.
        let (w, h) = (2 * m, 4);
        let labels: Vec<u32> = (0..w * h).map(|p| ((p % w) / 2) as u32).collect();
        let mask: Vec<f32> = (0..w * h).map(|p| if (p % w) / 2 < salient { 1.0 } else { 0.0 }).collect();
        (
            SuperpixelSegmentation::from_labels(w, h, &labels).unwrap(),
            GroundTruthMask::new(w, h, mask).unwrap(),
        )
    }

    #[test]
    fn thirty_and_seventy() {
        let (seg, mask) = strips(200, 50);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_regions(0, &seg, &mask, &mut rng).unwrap();
        assert_eq!(s.iter().filter(|t| t.label == 1).count(), 30);
        assert_eq!(s.iter().filter(|t| t.label == 0).count(), 70);
        let mut q: Vec<_> = s.iter().map(|t| t.query).collect();
        q.sort();
        q.dedup();
        assert_eq!(q.len(), 100);
        assert!(s.iter().all(|t| (t.label == 1) == (t.query < 50)));
    }

    #[test]
    fn small_pools_are_taken_whole() {
        let (seg, mask) = strips(10, 3);
        let s = sample_regions(0, &seg, &mask, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(s.len(), 10);
    }

    #[test]
    fn empty_mask_yields_nothing() {
        let (seg, _) = strips(10, 3);
        let mask = GroundTruthMask::new(20, 4, vec![0.0; 80]).unwrap();
        assert!(sample_regions(0, &seg, &mask, &mut ChaCha8Rng::seed_from_u64(3)).unwrap().is_empty());
    }

    #[test]
    fn discard_band_is_never_sampled() {
        let (seg, _) = strips(4, 0);
        // Strip 0 salient, strip 1 half covered, strips 2-3 background.
        let mask: Vec<f32> = (0..32)
            .map(|p| match (p % 8) / 2 {
                0 => 1.0,
                1 => {
                    if p % 2 == 0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                _ => 0.0,
            })
            .collect();
        let mask = GroundTruthMask::new(8, 4, mask).unwrap();
        let means = region_mask_means(&seg, &mask).unwrap();
        assert_eq!(means[1], 0.5);
        for seed in 0..20 {
            let s = sample_regions(0, &seg, &mask, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert!(s.iter().all(|t| t.query != 1));
            assert_eq!(s.len(), 3);
        }
    }

    #[test]
    fn loss_log_format() {
        let log = [
            LossRecord { iteration: 0, loss: 0.5, learning_rate: 0.1 },
            LossRecord { iteration: 1, loss: 0.25, learning_rate: 0.1 },
        ];
        assert_eq!(format_loss_log(&log), "0\t0.5\n1\t0.25\n");
    }
}
