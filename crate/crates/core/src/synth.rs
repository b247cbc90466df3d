//! Synthetic saliency data: one or two flat rectangles over a textured
//! background whose mean color differs from every rectangle.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{save_gray8, GroundTruthMask, Image};

/// Minimum RGB distance between a rectangle color and the background mean.
const MIN_COLOR_GAP: f32 = 0.45;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub train: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 96,
            height: 96,
            train: 60,
            test: 20,
            seed: 42,
        }
    }
}

fn color_gap(a: [f32; 3], b: [f32; 3]) -> f32 {
    a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f32>().sqrt()
}

/// One image and its exact binary mask.
pub fn synth_sample(width: usize, height: usize, rng: &mut impl Rng) -> Result<(Image, GroundTruthMask)> {
    if width < 8 || height < 8 {
        return Err(Error::Argument("synthetic images need at least 8x8 pixels".into()));
    }
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.8));
    let angle: f32 = rng.random_range(0.0..std::f32::consts::PI);
    let period: f32 = rng.random_range(4.0..12.0);
    let stripe_amp: f32 = rng.random_range(0.03..0.08);
    let (dx, dy) = (angle.cos(), angle.sin());

    let rects = rng.random_range(1..=2usize);
    let area = (width * height) as f32;
    let mut boxes = Vec::with_capacity(rects);
    for _ in 0..rects {
        let frac: f32 = rng.random_range(0.05..=0.30);
        let aspect: f32 = rng.random_range(0.6..1.6);
        let w = ((frac * area * aspect).sqrt().round() as usize).clamp(2, width - 2);
        let h = ((frac * area / w as f32).round() as usize).clamp(2, height - 2);
        let x0 = rng.random_range(1..=width - w - 1);
        let y0 = rng.random_range(1..=height - h - 1);
        let color = loop {
            let c: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..=1.0));
            if color_gap(c, base) >= MIN_COLOR_GAP {
                break c;
            }
        };
        boxes.push((x0, y0, w, h, color));
    }

    let mut noise = Vec::with_capacity(width * height);
    for _ in 0..width * height {
        let n: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.06..0.06));
        noise.push(n);
    }

    let mut mask = vec![0.0f32; width * height];
    let image = Image::from_fn(width, height, |x, y| {
        // Later rectangles paint over earlier ones.
        if let Some(&(_, _, _, _, c)) = boxes
            .iter()
            .rev()
            .find(|&&(x0, y0, w, h, _)| x >= x0 && x < x0 + w && y >= y0 && y < y0 + h)
        {
            return c;
        }
        let stripe = stripe_amp * (2.0 * std::f32::consts::PI * (x as f32 * dx + y as f32 * dy) / period).sin();
        let n = noise[y * width + x];
        std::array::from_fn(|c| base[c] + stripe + n[c])
    })?;
    for &(x0, y0, w, h, _) in &boxes {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                mask[y * width + x] = 1.0;
            }
        }
    }
    Ok((image, GroundTruthMask::new(width, height, mask)?))
}

fn write_split(root: &Path, stems: &[String], samples: &[(Image, GroundTruthMask)]) -> Result<()> {
    let images = root.join("images");
    let masks = root.join("masks");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
    for (stem, (img, mask)) in stems.iter().zip(samples) {
        img.save_png(images.join(format!("{stem}.png")))?;
        let bytes: Vec<u8> = mask.values().iter().map(|&v| (v * 255.0).round() as u8).collect();
        save_gray8(masks.join(format!("{stem}.png")), mask.width(), mask.height(), &bytes)?;
    }
    Ok(())
}

/// Generates `cfg.train + cfg.test` samples from one seeded stream and writes
/// them to `<root>/train` and `<root>/test` in the dataset layout.
pub fn write_synthetic(root: impl AsRef<Path>, cfg: &SynthConfig) -> Result<()> {
    let root = root.as_ref();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total = cfg.train + cfg.test;
    let samples = (0..total)
        .map(|_| synth_sample(cfg.width, cfg.height, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let stems: Vec<String> = (0..total).map(|i| format!("synth_{i:04}")).collect();
    write_split(&root.join("train"), &stems[..cfg.train], &samples[..cfg.train])?;
    write_split(&root.join("test"), &stems[cfg.train..], &samples[cfg.train..])?;
    Ok(())
}
