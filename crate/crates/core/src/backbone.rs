//! High-level feature maps: precomputed files or a frozen random toy network.

use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::Tensor;

/// Spatial side of the high-level feature map.
pub const FEATURE_SIDE: usize = 14;
pub const FEATURE_CELLS: usize = FEATURE_SIDE * FEATURE_SIDE;
pub const DEFAULT_CHANNELS: usize = 512;
/// Side of the resized backbone input.
pub const INPUT_SIDE: usize = 224;

/// A `14 x 14 x D` tensor laid out `(row, col, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(tensor: Tensor) -> Result<Self> {
        match tensor.dims() {
            [FEATURE_SIDE, FEATURE_SIDE, _] => Ok(FeatureMap(tensor)),
            dims => Err(Error::Load(format!(
                "feature map must be {FEATURE_SIDE}x{FEATURE_SIDE}xD, got {dims:?}"
            ))),
        }
    }

    pub fn channels(&self) -> usize {
        self.0.dims()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn data(&self) -> &[f32] {
        self.0.data()
    }
}

/// Source of high-level feature maps. Implementations are frozen: the same
/// image always yields the same map.
pub trait Backbone: Send + Sync {
    fn channels(&self) -> usize;

    /// Feature map for `image`, identified in the dataset by `stem`.
    fn extract(&self, image: &Image, stem: &str) -> Result<FeatureMap>;
}

/// Reads `<dir>/<stem>.eldt` files.
#[derive(Debug, Clone)]
pub struct FileBackbone {
    dir: PathBuf,
    channels: usize,
}

impl FileBackbone {
    pub fn new(dir: impl Into<PathBuf>, channels: usize) -> Self {
        FileBackbone {
            dir: dir.into(),
            channels,
        }
    }

    pub fn path_for(&self, stem: &str) -> PathBuf {
        self.dir.join(format!("{stem}.eldt"))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

impl Backbone for FileBackbone {
    fn channels(&self) -> usize {
        self.channels
    }

    fn extract(&self, _image: &Image, stem: &str) -> Result<FeatureMap> {
        let path = self.path_for(stem);
        let tensor = Tensor::load(&path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        let map = FeatureMap::new(tensor).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        if map.channels() != self.channels {
            return Err(Error::Load(format!(
                "{}: expected {} channels, found {}",
                path.display(),
                self.channels,
                map.channels()
            )));
        }
        Ok(map)
    }
}

struct PatchConv {
    kernel: usize,
    in_channels: usize,
    /// `(out, kernel * kernel * in)` with patch order `(ky, kx, c)`.
    weight: Array2<f32>,
}

impl PatchConv {
    fn new(kernel: usize, in_channels: usize, out_channels: usize, rng: &mut impl Rng) -> Self {
        let fan_in = kernel * kernel * in_channels;
        let a = (6.0 / fan_in as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((out_channels, fan_in), || rng.random_range(-a..=a) as f32);
        PatchConv {
            kernel,
            in_channels,
            weight,
        }
    }

    /// Non-overlapping `kernel x kernel` convolution with stride `kernel`.
    fn apply(&self, input: ArrayView2<f32>, side: usize) -> (Array2<f32>, usize) {
        let k = self.kernel;
        let out_side = side / k;
        let patch = k * k * self.in_channels;
        let mut patches = Array2::<f32>::zeros((out_side * out_side, patch));
        for oy in 0..out_side {
            for ox in 0..out_side {
                let mut row = patches.row_mut(oy * out_side + ox);
                let mut idx = 0;
                for ky in 0..k {
                    for kx in 0..k {
                        let src = input.row((oy * k + ky) * side + ox * k + kx);
                        for &v in src {
                            row[idx] = v;
                            idx += 1;
                        }
                    }
                }
            }
        }
        (patches.dot(&self.weight.t()), out_side)
    }
}

/// Untrained strided convolution stack `3 -> 16 -> 64 -> D` with strides
/// 4, 2, 2 over a bilinear 224x224 resize. Weights are fixed by the seed.
pub struct ToyBackbone {
    channels: usize,
    layers: Vec<PatchConv>,
}

impl ToyBackbone {
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = vec![
            PatchConv::new(4, 3, 16, &mut rng),
            PatchConv::new(2, 16, 64, &mut rng),
            PatchConv::new(2, 64, channels, &mut rng),
        ];
        ToyBackbone { channels, layers }
    }
}

impl Backbone for ToyBackbone {
    fn channels(&self) -> usize {
        self.channels
    }

    fn extract(&self, image: &Image, _stem: &str) -> Result<FeatureMap> {
        let resized = resize_bilinear(image, INPUT_SIDE, INPUT_SIDE);
        let mut x = Array2::from_shape_fn((INPUT_SIDE * INPUT_SIDE, 3), |(p, c)| resized[p][c] - 0.5);
        let mut side = INPUT_SIDE;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, s) = layer.apply(x.view(), side);
            x = if i < last { y.mapv(|v| v.max(0.0)) } else { y };
            side = s;
        }
        debug_assert_eq!(side, FEATURE_SIDE);
        let data = x.as_standard_layout().iter().copied().collect();
        FeatureMap::new(Tensor::new(vec![FEATURE_SIDE, FEATURE_SIDE, self.channels], data)?)
    }
}

/// Bilinear resampling with pixel-center alignment.
pub fn resize_bilinear(image: &Image, width: usize, height: usize) -> Vec<[f32; 3]> {
    let (sw, sh) = (image.width(), image.height());
    let sx = sw as f32 / width as f32;
    let sy = sh as f32 / height as f32;
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let ty = fy - y0 as f32;
        for x in 0..width {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let tx = fx - x0 as f32;
            let (a, b, c, d) = (image.pixel(x0, y0), image.pixel(x1, y0), image.pixel(x0, y1), image.pixel(x1, y1));
            let mut px = [0.0f32; 3];
            for ch in 0..3 {
                let top = a[ch] * (1.0 - tx) + b[ch] * tx;
                let bottom = c[ch] * (1.0 - tx) + d[ch] * tx;
                px[ch] = top * (1.0 - ty) + bottom * ty;
            }
            out.push(px);
        }
    }
    out
}
