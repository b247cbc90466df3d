//! Per-image inference: score every superpixel and paint the map.

use std::path::Path;

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::features::GaborBank;
use crate::image::{load_mask, save_gray8, Image};
use crate::model::Model;
use crate::pipeline::{assemble_batch, prepare_image, PreparedImage};
use crate::slic::SlicParams;

/// Queries scored per forward pass.
const SCORE_CHUNK: usize = 256;

/// Per-pixel saliency in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl SaliencyMap {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(Error::Argument(format!(
                "{width}x{height} saliency map with {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Argument("saliency values must lie in [0,1]".into()));
        }
        Ok(SaliencyMap {
            width,
            height,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// `round(255 * s)` per pixel.
    pub fn to_u8(&self) -> Vec<u8> {
        self.values.iter().map(|&v| quantize(v)).collect()
    }

    /// 255 where the 8-bit value reaches `threshold`, else 0.
    pub fn binarize(&self, threshold: u8) -> Vec<u8> {
        self.values
            .iter()
            .map(|&v| if quantize(v) >= threshold { 255 } else { 0 })
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_gray8(path, self.width, self.height, &self.to_u8())
    }

    /// Reads an 8-bit grayscale map scaled by 1/255.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m = load_mask(path)?;
        SaliencyMap::new(m.width(), m.height(), m.values().to_vec())
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub map: SaliencyMap,
    /// Salient-class probability of every superpixel.
    pub scores: Vec<f32>,
    pub prepared: PreparedImage,
}

/// Scores every region of an already prepared image.
pub fn score_prepared(model: &Model<f32>, prepared: &PreparedImage) -> Result<Vec<f32>> {
    let images = std::slice::from_ref(prepared);
    let mut scores = Vec::with_capacity(prepared.regions());
    let queries: Vec<(usize, usize)> = (0..prepared.regions()).map(|q| (0, q)).collect();
    for chunk in queries.chunks(SCORE_CHUNK) {
        let batch = assemble_batch(images, chunk, model.mode())?;
        scores.extend(model.score(&batch)?);
    }
    Ok(scores)
}

pub fn paint(prepared: &PreparedImage, scores: &[f32]) -> Result<SaliencyMap> {
    let values = prepared
        .segmentation
        .labels()
        .iter()
        .map(|&l| scores[l as usize])
        .collect();
    SaliencyMap::new(prepared.width(), prepared.height(), values)
}

/// Segment, describe, extract high-level features once, then score each
/// superpixel against its own distance map.
pub fn predict_image(
    model: &Model<f32>,
    image: &Image,
    stem: &str,
    backbone: Option<&dyn Backbone>,
    slic: &SlicParams,
) -> Result<Prediction> {
    let backbone = if model.mode().uses_backbone() {
        Some(backbone.ok_or_else(|| Error::Config(format!("{} mode needs a backbone", model.mode())))?)
    } else {
        None
    };
    let prepared = prepare_image(image, stem, slic, &GaborBank::default(), backbone)?;
    let scores = score_prepared(model, &prepared)?;
    let map = paint(&prepared, &scores)?;
    Ok(Prediction {
        map,
        scores,
        prepared,
    })
}
