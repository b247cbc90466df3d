//! Grid representation of a segmentation and the query-conditioned
//! low-level distance map fed to the encoder.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::features::{RegionFeatures, AVG_RGB, CENTER, HIST_BINS};
use crate::slic::SuperpixelSegmentation;
use crate::tensor::Tensor;

pub const GRID: usize = 23;
pub const CELLS: usize = GRID * GRID;
/// Channels of the full distance map.
pub const CHANNELS: usize = 54;
/// Channels of the location-only map.
pub const LOCATION_CHANNELS: usize = 2;

const DIFF_CHANNELS: usize = 36;
const CHI_EPSILON: f64 = 1e-10;

/// Owner superpixel of each of the `23 x 23` grid cells, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridAssignment {
    owners: Vec<usize>,
}

impl GridAssignment {
    pub fn owners(&self) -> &[usize] {
        &self.owners
    }

    pub fn owner(&self, row: usize, col: usize) -> usize {
        self.owners[row * GRID + col]
    }
}

/// Pixel span `[start, end)` of grid band `i` along an axis of `len` pixels.
pub fn cell_span(i: usize, len: usize) -> (usize, usize) {
    (i * len / GRID, (i + 1) * len / GRID)
}

/// Assigns each cell to the region covering most of its pixels, breaking
/// ties toward the smaller region index.
pub fn build_grid(seg: &SuperpixelSegmentation) -> Result<GridAssignment> {
    let (w, h) = (seg.width(), seg.height());
    if w < GRID || h < GRID {
        return Err(Error::Argument(format!(
            "image {w}x{h} is smaller than the {GRID}x{GRID} grid"
        )));
    }
    let mut owners = Vec::with_capacity(CELLS);
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for i in 0..GRID {
        let (y0, y1) = cell_span(i, h);
        for j in 0..GRID {
            let (x0, x1) = cell_span(j, w);
            counts.clear();
            for y in y0..y1 {
                for x in x0..x1 {
                    *counts.entry(seg.label(x, y)).or_default() += 1;
                }
            }
            // Ascending key order, so strict '>' keeps the smallest index on ties.
            let mut best = (usize::MAX, 0usize);
            for (&label, &n) in &counts {
                if best.0 == usize::MAX || n > best.1 {
                    best = (label, n);
                }
            }
            owners.push(best.0);
        }
    }
    Ok(GridAssignment { owners })
}

/// `sum_b (h1_b - h2_b)^2 / (h1_b + h2_b + 1e-10)`.
pub fn chi_square(h1: &[f64], h2: &[f64]) -> Result<f64> {
    if h1.len() != h2.len() {
        return Err(Error::Argument(format!(
            "histograms of length {} and {}",
            h1.len(),
            h2.len()
        )));
    }
    Ok(chi_square_unchecked(h1, h2))
}

fn chi_square_unchecked(h1: &[f64], h2: &[f64]) -> f64 {
    h1.iter()
        .zip(h2)
        .map(|(a, b)| (a - b) * (a - b) / (a + b + CHI_EPSILON))
        .sum()
}

fn check_inputs(grid: &GridAssignment, feats: &[RegionFeatures], query: usize) -> Result<()> {
    if query >= feats.len() {
        return Err(Error::Argument(format!(
            "query {query} out of range for {} regions",
            feats.len()
        )));
    }
    if let Some(&bad) = grid.owners.iter().find(|&&o| o >= feats.len()) {
        return Err(Error::Argument(format!(
            "grid owner {bad} has no descriptor ({} regions)",
            feats.len()
        )));
    }
    Ok(())
}

/// Writes the `23 x 23 x 54` map into `out` (cell-major, channels innermost).
///
/// Channels: 0..36 owner minus query over descriptor entries 0..36,
/// 36..45 chi-square distance of each channel histogram, 45..54 the owner's
/// mean RGB, LAB and HSV.
pub fn fill_distance_map(grid: &GridAssignment, feats: &[RegionFeatures], query: usize, out: &mut [f32]) -> Result<()> {
    check_inputs(grid, feats, query)?;
    if out.len() != CELLS * CHANNELS {
        return Err(Error::Argument(format!("output buffer of {} values", out.len())));
    }
    let q = &feats[query];
    let mut chi_cache: BTreeMap<usize, [f64; 9]> = BTreeMap::new();
    for (cell, &owner) in grid.owners.iter().enumerate() {
        let f = &feats[owner];
        let dst = &mut out[cell * CHANNELS..(cell + 1) * CHANNELS];
        for c in 0..DIFF_CHANNELS {
            dst[c] = (f.values[c] - q.values[c]) as f32;
        }
        let chis = chi_cache.entry(owner).or_insert_with(|| {
            let mut d = [0.0; 9];
            for (ch, slot) in d.iter_mut().enumerate() {
                *slot = chi_square_unchecked(f.histogram(ch), q.histogram(ch));
            }
            d
        });
        for (k, &v) in chis.iter().enumerate() {
            dst[DIFF_CHANNELS + k] = v as f32;
        }
        for k in 0..9 {
            dst[DIFF_CHANNELS + HIST_BINS.len() + k] = f.values[AVG_RGB.start + k] as f32;
        }
    }
    Ok(())
}

pub fn distance_map(grid: &GridAssignment, feats: &[RegionFeatures], query: usize) -> Result<Tensor> {
    let mut data = vec![0.0f32; CELLS * CHANNELS];
    fill_distance_map(grid, feats, query, &mut data)?;
    Tensor::new(vec![GRID, GRID, CHANNELS], data)
}

/// Writes the `23 x 23 x 2` location difference map into `out`.
pub fn fill_location_map(grid: &GridAssignment, feats: &[RegionFeatures], query: usize, out: &mut [f32]) -> Result<()> {
    check_inputs(grid, feats, query)?;
    if out.len() != CELLS * LOCATION_CHANNELS {
        return Err(Error::Argument(format!("output buffer of {} values", out.len())));
    }
    let q = &feats[query];
    for (cell, &owner) in grid.owners.iter().enumerate() {
        for k in 0..LOCATION_CHANNELS {
            let c = CENTER.start + k;
            out[cell * LOCATION_CHANNELS + k] = (feats[owner].values[c] - q.values[c]) as f32;
        }
    }
    Ok(())
}

pub fn location_only_map(grid: &GridAssignment, feats: &[RegionFeatures], query: usize) -> Result<Tensor> {
    let mut data = vec![0.0f32; CELLS * LOCATION_CHANNELS];
    fill_location_map(grid, feats, query, &mut data)?;
    Tensor::new(vec![GRID, GRID, LOCATION_CHANNELS], data)
}
