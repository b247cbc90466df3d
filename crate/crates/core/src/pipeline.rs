//! Per-image preprocessing shared by training and prediction.

use ndarray::Array2;

use crate::backbone::{Backbone, FeatureMap};
use crate::eldmap::{self, build_grid, GridAssignment, CELLS};
use crate::error::{Error, Result};
use crate::features::{region_features, GaborBank, RegionFeatures};
use crate::image::Image;
use crate::model::{Batch, Mode};
use crate::slic::{slic_segment, SlicParams, SuperpixelSegmentation};

/// Everything the graph needs to score any region of one image.
#[derive(Debug, Clone)]
pub struct PreparedImage {
    pub stem: String,
    pub segmentation: SuperpixelSegmentation,
    pub grid: GridAssignment,
    pub features: Vec<RegionFeatures>,
    pub feature_map: Option<FeatureMap>,
}

impl PreparedImage {
    pub fn width(&self) -> usize {
        self.segmentation.width()
    }

    pub fn height(&self) -> usize {
        self.segmentation.height()
    }

    pub fn regions(&self) -> usize {
        self.segmentation.count()
    }

    /// Writes the mode's low-level map for `query` into `out`.
    pub fn fill_low(&self, mode: Mode, query: usize, out: &mut [f32]) -> Result<()> {
        if mode.location_only() {
            eldmap::fill_location_map(&self.grid, &self.features, query, out)
        } else {
            eldmap::fill_distance_map(&self.grid, &self.features, query, out)
        }
    }
}

/// Segments, describes and grids `image`, and runs the backbone exactly once
/// when one is supplied.
pub fn prepare_image(
    image: &Image,
    stem: &str,
    slic: &SlicParams,
    bank: &GaborBank,
    backbone: Option<&dyn Backbone>,
) -> Result<PreparedImage> {
    let segmentation = slic_segment(image, slic)?;
    let features = region_features(&image.planes(), &segmentation, bank)?;
    let grid = build_grid(&segmentation)?;
    let feature_map = backbone.map(|b| b.extract(image, stem)).transpose()?;
    Ok(PreparedImage {
        stem: stem.to_string(),
        segmentation,
        grid,
        features,
        feature_map,
    })
}

/// Stacks `(image index, query)` items into a graph batch for `mode`.
pub fn assemble_batch(images: &[PreparedImage], items: &[(usize, usize)], mode: Mode) -> Result<Batch<f32>> {
    let low_width = CELLS * mode.low_channels();
    let mut low = Array2::<f32>::zeros((items.len(), low_width));
    let mut high: Option<Array2<f32>> = None;
    for (row, &(img, query)) in items.iter().enumerate() {
        let prepared = images
            .get(img)
            .ok_or_else(|| Error::Argument(format!("image index {img} out of range")))?;
        let mut dst = low.row_mut(row);
        prepared.fill_low(mode, query, dst.as_slice_mut().expect("standard layout"))?;
        if mode.uses_backbone() {
            let fmap = prepared
                .feature_map
                .as_ref()
                .ok_or_else(|| Error::Config(format!("{mode} mode needs a backbone feature map for {}", prepared.stem)))?;
            let h = high.get_or_insert_with(|| Array2::zeros((items.len(), fmap.data().len())));
            if h.ncols() != fmap.data().len() {
                return Err(Error::Config("feature maps differ in channel count".into()));
            }
            h.row_mut(row)
                .as_slice_mut()
                .expect("standard layout")
                .copy_from_slice(fmap.data());
        }
    }
    if mode.uses_backbone() && high.is_none() {
        high = Some(Array2::zeros((0, 0)));
    }
    Ok(Batch { low, high })
}
