//! Decoded rasters, ground-truth masks, color planes and small writers.

use std::path::Path;

use image::{GenericImageView, ImageReader};

use crate::color;
use crate::error::{Error, Result};
use crate::tensor::write_atomic;

/// RGB raster with channels in `[0,1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    rgb: Vec<[f32; 3]>,
}

impl Image {
    pub fn new(width: usize, height: usize, rgb: Vec<[f32; 3]>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Argument("image must be non-empty".into()));
        }
        if rgb.len() != width * height {
            return Err(Error::Argument(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                rgb.len()
            )));
        }
        if rgb.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Argument("channel values must lie in [0,1]".into()));
        }
        Ok(Image { width, height, rgb })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [f32; 3]) -> Result<Self> {
        let rgb = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y).map(|c| c.clamp(0.0, 1.0)))
            .collect();
        Image::new(width, height, rgb)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[f32; 3]] {
        &self.rgb
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        self.rgb[y * self.width + x]
    }

    pub fn convert(&self, target: ColorSpace) -> Vec<[f32; 3]> {
        self.rgb
            .iter()
            .map(|p| {
                let rgb = p.map(f64::from);
                let out = match target {
                    ColorSpace::Rgb => rgb,
                    ColorSpace::Lab => color::rgb_to_lab(rgb),
                    ColorSpace::Hsv => color::rgb_to_hsv(rgb),
                };
                out.map(|v| v as f32)
            })
            .collect()
    }

    pub fn gray(&self) -> Vec<f32> {
        self.rgb
            .iter()
            .map(|p| color::rgb_to_gray(p.map(f64::from)) as f32)
            .collect()
    }

    pub fn planes(&self) -> ColorPlanes {
        ColorPlanes {
            width: self.width,
            height: self.height,
            rgb: self.rgb.clone(),
            lab: self.convert(ColorSpace::Lab),
            hsv: self.convert(ColorSpace::Hsv),
            gray: self.gray(),
        }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes: Vec<u8> = self
            .rgb
            .iter()
            .flat_map(|p| p.map(|c| (c * 255.0).round() as u8))
            .collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer size matches dimensions");
        encode_to_file(path.as_ref(), image::DynamicImage::ImageRgb8(buf))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorSpace {
    Rgb,
    Lab,
    Hsv,
}

/// Every per-pixel plane the region descriptor needs. HSV hue is in degrees.
#[derive(Debug, Clone)]
pub struct ColorPlanes {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<[f32; 3]>,
    pub lab: Vec<[f32; 3]>,
    pub hsv: Vec<[f32; 3]>,
    pub gray: Vec<f32>,
}

/// Per-pixel ground truth in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthMask {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl GroundTruthMask {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(Error::Argument(format!(
                "{width}x{height} mask with {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Argument("mask values must lie in [0,1]".into()));
        }
        Ok(GroundTruthMask {
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

    pub fn check_pairs_with(&self, image: &Image) -> Result<()> {
        if (self.width, self.height) != (image.width(), image.height()) {
            return Err(Error::Argument(format!(
                "mask is {}x{} but image is {}x{}",
                self.width,
                self.height,
                image.width(),
                image.height()
            )));
        }
        Ok(())
    }
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    reader
        .decode()
        .map_err(|e| Error::Decode(format!("{}: {e}", path.display())))
}

/// Loads an 8-bit PNG or PPM/PGM as RGB scaled by 1/255.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let img = decode(path.as_ref())?;
    let (w, h) = img.dimensions();
    let rgb = img
        .to_rgb8()
        .pixels()
        .map(|p| p.0.map(|c| c as f32 / 255.0))
        .collect();
    Image::new(w as usize, h as usize, rgb)
}

/// Loads a single-channel mask scaled by 1/255. Color files are reduced to luma.
pub fn load_mask(path: impl AsRef<Path>) -> Result<GroundTruthMask> {
    let img = decode(path.as_ref())?;
    let (w, h) = img.dimensions();
    let values = img
        .to_luma8()
        .pixels()
        .map(|p| p.0[0] as f32 / 255.0)
        .collect();
    GroundTruthMask::new(w as usize, h as usize, values)
}

fn encode_to_file(path: &Path, img: image::DynamicImage) -> Result<()> {
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some("png") => image::ImageFormat::Png,
        Some("pgm") | Some("ppm") | Some("pnm") => image::ImageFormat::Pnm,
        other => {
            return Err(Error::Argument(format!(
                "unsupported output extension {other:?} for {}",
                path.display()
            )))
        }
    };
    let mut bytes = std::io::Cursor::new(Vec::new());
    img.write_to(&mut bytes, format)
        .map_err(|e| Error::Decode(format!("encoding {}: {e}", path.display())))?;
    write_atomic(path, &bytes.into_inner())
}

/// Writes an 8-bit grayscale PNG or binary PGM, chosen by extension.
pub fn save_gray8(path: impl AsRef<Path>, width: usize, height: usize, values: &[u8]) -> Result<()> {
    let buf = image::GrayImage::from_raw(width as u32, height as u32, values.to_vec())
        .ok_or_else(|| Error::Argument("gray buffer does not match dimensions".into()))?;
    encode_to_file(path.as_ref(), image::DynamicImage::ImageLuma8(buf))
}

/// Writes a 16-bit binary PGM (big-endian samples, maxval 65535).
pub fn save_pgm16(path: impl AsRef<Path>, width: usize, height: usize, values: &[u16]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::Argument("label buffer does not match dimensions".into()));
    }
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for v in values {
        out.extend_from_slice(&v.to_be_bytes());
    }
    write_atomic(path.as_ref(), &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_mask_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255, 0, 255]);
        std::fs::write(&p, bytes).unwrap();
        let m = load_mask(&p).unwrap();
        assert_eq!(m.values(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn ppm_red_pixel() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.ppm");
        let mut bytes = b"P6\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0]);
        std::fs::write(&p, bytes).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.pixels(), &[[1.0, 0.0, 0.0]]);
    }

    #[test]
    fn truncated_png_is_decode_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.png");
        let img = Image::from_fn(8, 8, |x, y| [x as f32 / 8.0, y as f32 / 8.0, 0.5]).unwrap();
        img.save_png(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_image(&p), Err(Error::Decode(_))));
    }

    #[test]
    fn png_round_trip_8bit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = Image::from_fn(5, 3, |x, y| [x as f32 * 51.0 / 255.0, y as f32 * 85.0 / 255.0, 1.0]).unwrap();
        img.save_png(&p).unwrap();
        assert_eq!(load_image(&p).unwrap(), img);
    }

    #[test]
    fn mask_pairing_checks_size() {
        let img = Image::from_fn(4, 3, |_, _| [0.0; 3]).unwrap();
        let m = GroundTruthMask::new(3, 4, vec![0.0; 12]).unwrap();
        assert!(m.check_pairs_with(&img).is_err());
    }

    #[test]
    fn planes_of_uniform_red() {
        let img = Image::from_fn(2, 2, |_, _| [1.0, 0.0, 0.0]).unwrap();
        let planes = img.planes();
        assert_eq!(planes.hsv[0], [0.0, 1.0, 1.0]);
        assert!((planes.gray[0] - 0.299).abs() < 1e-6);
    }

    #[test]
    fn pgm16_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.pgm");
        save_pgm16(&p, 2, 1, &[1, 258]).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n2 1\n65535\n"));
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 1, 1, 2]);
    }
}
