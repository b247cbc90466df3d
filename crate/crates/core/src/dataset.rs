//! Dataset layout: `<root>/images/<stem>.{png|ppm}` with optional
//! `<root>/masks/<stem>.{png|pgm}`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{load_image, load_mask, GroundTruthMask, Image};

const IMAGE_EXTENSIONS: [&str; 2] = ["png", "ppm"];
const MASK_EXTENSIONS: [&str; 2] = ["png", "pgm"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetEntry {
    pub stem: String,
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
}

impl DatasetEntry {
    pub fn load_image(&self) -> Result<Image> {
        load_image(&self.image)
    }

    /// Loads the mask and checks it against the image size.
    pub fn load_pair(&self) -> Result<(Image, GroundTruthMask)> {
        let image = self.load_image()?;
        let path = self
            .mask
            .as_ref()
            .ok_or_else(|| Error::Dataset(format!("no mask for {}", self.stem)))?;
        let mask = load_mask(path)?;
        mask.check_pairs_with(&image)
            .map_err(|e| Error::Dataset(format!("{}: {e}", self.stem)))?;
        Ok((image, mask))
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    entries: Vec<DatasetEntry>,
}

fn with_extension(dir: &Path, stem: &str, exts: &[&str]) -> Option<PathBuf> {
    exts.iter()
        .map(|e| dir.join(format!("{stem}.{e}")))
        .find(|p| p.is_file())
}

impl Dataset {
    /// Lists images sorted by stem. A stem present as both PNG and PPM
    /// resolves to the PNG.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let images = root.join("images");
        let masks = root.join("masks");
        let listing = fs::read_dir(&images).map_err(|e| Error::io(&images, e))?;
        let mut stems = Vec::new();
        for entry in listing {
            let path = entry.map_err(|e| Error::io(&images, e))?.path();
            let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
            if !IMAGE_EXTENSIONS.contains(&ext) {
                continue;
            }
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
        stems.sort();
        stems.dedup();
        let entries = stems
            .into_iter()
            .map(|stem| DatasetEntry {
                image: with_extension(&images, &stem, &IMAGE_EXTENSIONS).expect("listed above"),
                mask: with_extension(&masks, &stem, &MASK_EXTENSIONS),
                stem,
            })
            .collect();
        Ok(Dataset { root, entries })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[DatasetEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
