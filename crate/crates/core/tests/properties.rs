use std::sync::atomic::{AtomicUsize, Ordering};

use eld_core::backbone::{Backbone, FeatureMap, ToyBackbone};
use eld_core::eldmap::{build_grid, distance_map, GRID};
use eld_core::features::{channel_histogram, region_features, GaborBank, CENTER, GABOR_MAX, GABOR_MEAN, HISTOGRAMS};
use eld_core::image::{GroundTruthMask, Image};
use eld_core::model::{Mode, Model, ModelConfig};
use eld_core::pipeline::{assemble_batch, prepare_image};
use eld_core::predict::{predict_image, score_prepared};
use eld_core::slic::{connected_components, slic_segment, SlicParams, SuperpixelSegmentation};
use eld_core::synth::synth_sample;
use eld_core::train::{train_on, TrainConfig, TrainingSample, TrainingSet};
use eld_core::Result;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn synth_image(w: usize, h: usize, seed: u64) -> (Image, GroundTruthMask) {
    synth_sample(w, h, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn slic(k: usize, compactness: f64) -> SlicParams {
    SlicParams {
        superpixels: k,
        compactness,
    }
}

fn mean_spatial_variance(seg: &SuperpixelSegmentation) -> f64 {
    let w = seg.width();
    let mut acc = vec![0.0; seg.count()];
    for (p, &l) in seg.labels().iter().enumerate() {
        let [cx, cy] = seg.centroids()[l as usize];
        let (x, y) = ((p % w) as f64, (p / w) as f64);
        acc[l as usize] += (x - cx).powi(2) + (y - cy).powi(2);
    }
    acc.iter().zip(seg.sizes()).map(|(a, &n)| a / n as f64).sum::<f64>() / seg.count() as f64
}

#[test]
fn slic_count_on_160x120_with_k_200() {
    for seed in 0..3 {
        let (img, _) = synth_image(160, 120, seed);
        let seg = slic_segment(&img, &slic(200, 10.0)).unwrap();
        assert!((140..=260).contains(&seg.count()), "M = {}", seg.count());
    }
}

#[test]
fn slic_is_deterministic() {
    let (img, _) = synth_image(90, 70, 4);
    let a = slic_segment(&img, &slic(60, 10.0)).unwrap();
    let b = slic_segment(&img, &slic(60, 10.0)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn higher_compactness_never_spreads_regions() {
    // From the default compactness upward. Below it, color noise in the
    // textured background can make regions spread as compactness grows.
    for seed in [10, 11, 12] {
        let (img, _) = synth_image(96, 80, seed);
        let spreads: Vec<f64> = [10.0, 20.0, 40.0, 80.0]
            .iter()
            .map(|&m| mean_spatial_variance(&slic_segment(&img, &slic(80, m)).unwrap()))
            .collect();
        for pair in spreads.windows(2) {
            assert!(pair[1] <= pair[0] * 1.01, "seed {seed}: {spreads:?}");
        }
    }
}

#[test]
fn regions_are_connected_and_cover_the_image() {
    for seed in 20..25 {
        let (img, _) = synth_image(72, 60, seed);
        let seg = slic_segment(&img, &slic(45, 10.0)).unwrap();
        let (_, components) = connected_components(72, 60, seg.labels());
        assert_eq!(components.len(), seg.count());
        assert_eq!(seg.sizes().iter().sum::<usize>(), 72 * 60);
    }
}

#[test]
fn descriptor_invariants() {
    let bank = GaborBank::default();
    for seed in 30..33 {
        let (img, _) = synth_image(64, 64, seed);
        let seg = slic_segment(&img, &slic(40, 10.0)).unwrap();
        let feats = region_features(&img.planes(), &seg, &bank).unwrap();
        assert_eq!(feats.len(), seg.count());
        for f in &feats {
            let means = &f.values[GABOR_MEAN];
            assert_eq!(f.values[GABOR_MAX], means.iter().copied().fold(f64::MIN, f64::max));
            assert!(means.iter().all(|&v| v >= 0.0));
            let [x, y] = [f.values[CENTER.start], f.values[CENTER.start + 1]];
            assert!((0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y));
            for ch in 0..9 {
                assert!((f.histogram(ch).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
            assert!(f.values[HISTOGRAMS].iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}

#[test]
fn descriptors_follow_pixel_sets_not_label_ids() {
    let (img, _) = synth_image(48, 40, 40);
    let seg = slic_segment(&img, &slic(20, 10.0)).unwrap();
    let m = seg.count() as u32;
    // reverse the label ids, then compare the descriptor each pixel sees
    let permuted: Vec<u32> = seg.labels().iter().map(|&l| m - 1 - l).collect();
    let other = SuperpixelSegmentation::from_labels(48, 40, &permuted).unwrap();
    let bank = GaborBank::default();
    let a = region_features(&img.planes(), &seg, &bank).unwrap();
    let b = region_features(&img.planes(), &other, &bank).unwrap();
    for (p, (&la, &lb)) in seg.labels().iter().zip(other.labels()).enumerate() {
        assert_eq!(a[la as usize], b[lb as usize], "pixel {p}");
    }
}

proptest! {
    #[test]
    fn histograms_sum_to_one(values in proptest::collection::vec(-0.5f64..1.5, 1..200), bins in 1usize..16) {
        let h = channel_histogram(values.iter().copied(), 0.0, 1.0, bins).unwrap();
        prop_assert_eq!(h.len(), bins);
        prop_assert!((h.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
}

#[test]
fn swapping_query_and_cell_owner_negates_differences() {
    let (img, _) = synth_image(92, 69, 50);
    let seg = slic_segment(&img, &slic(30, 10.0)).unwrap();
    let feats = region_features(&img.planes(), &seg, &GaborBank::default()).unwrap();
    let grid = build_grid(&seg).unwrap();
    let owners = grid.owners();
    let mut checked = 0;
    for (ci, &r) in owners.iter().enumerate().step_by(7) {
        let q = owners[(ci * 13 + 5) % owners.len()];
        let Some(cj) = owners.iter().position(|&o| o == q) else { continue };
        let mq = distance_map(&grid, &feats, q).unwrap();
        let mr = distance_map(&grid, &feats, r).unwrap();
        let (a, b) = (&mq.data()[ci * 54..ci * 54 + 54], &mr.data()[cj * 54..cj * 54 + 54]);
        for c in 0..36 {
            assert_eq!(a[c], -b[c], "channel {c}");
        }
        for c in 36..45 {
            assert!((a[c] - b[c]).abs() <= 1e-6 * a[c].abs().max(1.0), "chi-square channel {c}");
        }
        checked += 1;
    }
    assert!(checked > 10);
}

#[test]
fn grid_owners_do_not_depend_on_resolution() {
    // a labeling drawn on a 46x46 canvas and its exact 2x and 3x upsamplings
    let small: Vec<u32> = (0..46 * 46)
        .map(|p| {
            let (x, y) = (p % 46, p / 46);
            ((x * 5 / 46) + 5 * (y * 3 / 46)) as u32
        })
        .collect();
    let base = build_grid(&SuperpixelSegmentation::from_labels(46, 46, &small).unwrap()).unwrap();
    for f in [2, 3] {
        let n = 46 * f;
        let big: Vec<u32> = (0..n * n).map(|p| small[(p / n / f) * 46 + (p % n) / f]).collect();
        let grid = build_grid(&SuperpixelSegmentation::from_labels(n, n, &big).unwrap()).unwrap();
        assert_eq!(grid.owners(), base.owners());
        assert_eq!(grid.owners().len(), GRID * GRID);
    }
}

/// Records how often the wrapped backbone is asked for features.
struct Counting<B> {
    inner: B,
    calls: AtomicUsize,
}

impl<B: Backbone> Backbone for Counting<B> {
    fn channels(&self) -> usize {
        self.inner.channels()
    }

    fn extract(&self, image: &Image, stem: &str) -> Result<FeatureMap> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.extract(image, stem)
    }
}

fn toy_config(mode: Mode) -> ModelConfig {
    ModelConfig {
        mode,
        backbone_channels: 16,
        reduction_channels: 4,
        fc_width: 32,
        ..ModelConfig::default()
    }
}

#[test]
fn prediction_scores_every_superpixel_with_one_backbone_call() {
    let (img, _) = synth_image(80, 64, 60);
    let backbone = Counting {
        inner: ToyBackbone::new(16, 1),
        calls: AtomicUsize::new(0),
    };
    let model = Model::<f32>::new(toy_config(Mode::EldHf)).unwrap();
    let pred = predict_image(&model, &img, "x", Some(&backbone), &slic(50, 10.0)).unwrap();
    assert_eq!(backbone.calls.load(Ordering::SeqCst), 1);
    assert_eq!(pred.scores.len(), pred.prepared.regions());
    // every pixel carries its own superpixel's score
    for (p, &l) in pred.prepared.segmentation.labels().iter().enumerate() {
        assert_eq!(pred.map.values()[p], pred.scores[l as usize]);
    }

    let plain = Model::<f32>::new(toy_config(Mode::Eld)).unwrap();
    predict_image(&plain, &img, "x", Some(&backbone), &slic(50, 10.0)).unwrap();
    assert_eq!(backbone.calls.load(Ordering::SeqCst), 1, "ELD mode must not run the backbone");
}

#[test]
fn hf_mode_ignores_appearance_features() {
    let (img, _) = synth_image(80, 64, 70);
    let backbone = ToyBackbone::new(16, 2);
    let prepared = prepare_image(&img, "x", &slic(40, 10.0), &GaborBank::default(), Some(&backbone)).unwrap();
    let model = Model::<f32>::new(toy_config(Mode::Hf)).unwrap();
    let before = score_prepared(&model, &prepared).unwrap();
    let mut altered = prepared.clone();
    for (i, f) in altered.features.iter_mut().enumerate() {
        for (j, v) in f.values.iter_mut().enumerate() {
            if !CENTER.contains(&j) {
                *v = (i * 31 + j * 7) as f64 % 5.0 - 2.0;
            }
        }
    }
    let after = score_prepared(&model, &altered).unwrap();
    assert_eq!(before, after);
    // ELD mode does see the change
    let eld = Model::<f32>::new(toy_config(Mode::Eld)).unwrap();
    assert_ne!(score_prepared(&eld, &prepared).unwrap(), score_prepared(&eld, &altered).unwrap());
}

fn tiny_set(backbone: &dyn Backbone) -> TrainingSet {
    let bank = GaborBank::default();
    let images: Vec<_> = (0..3)
        .map(|s| {
            let (img, _) = synth_image(64, 48, 80 + s);
            prepare_image(&img, &format!("t{s}"), &slic(30, 10.0), &bank, Some(backbone)).unwrap()
        })
        .collect();
    let samples = images
        .iter()
        .enumerate()
        .flat_map(|(i, p)| {
            (0..p.regions()).map(move |q| TrainingSample {
                image: i,
                query: q,
                label: (q % 3 == 0) as u8,
            })
        })
        .collect();
    TrainingSet {
        images,
        samples,
        skipped: Vec::new(),
    }
}

#[test]
fn training_leaves_the_backbone_untouched_and_is_reproducible() {
    let backbone = ToyBackbone::new(16, 3);
    let (probe, _) = synth_image(64, 48, 99);
    let before = backbone.extract(&probe, "p").unwrap();
    let set = tiny_set(&backbone);
    let cfg = TrainConfig {
        model: toy_config(Mode::EldHf),
        batch_size: 16,
        max_iterations: 25,
        ..TrainConfig::default()
    };
    let a = train_on(&set, &cfg, None).unwrap();
    let b = train_on(&set, &cfg, None).unwrap();
    assert_eq!(backbone.extract(&probe, "p").unwrap(), before);
    assert_eq!(a.loss_log, b.loss_log);
    assert_eq!(a.model, b.model);

    let mut other = cfg.clone();
    other.model.seed = 2;
    let c = train_on(&set, &other, None).unwrap();
    assert_ne!(c.loss_log, a.loss_log);
    // parameters moved
    assert_ne!(a.model, Model::<f32>::new(cfg.model.clone()).unwrap());
}

#[test]
fn batches_for_each_mode_have_the_expected_widths() {
    let backbone = ToyBackbone::new(16, 4);
    let set = tiny_set(&backbone);
    for mode in Mode::ALL {
        let batch = assemble_batch(&set.images, &[(0, 0), (2, 1)], mode).unwrap();
        assert_eq!(batch.low.ncols(), 529 * mode.low_channels());
        assert_eq!(batch.high.as_ref().map(|h| h.ncols()), mode.uses_backbone().then_some(196 * 16));
    }
}
