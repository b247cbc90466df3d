//! SLIC superpixels: k-means over `(L, a, b, x, y)` with a local search
//! window, followed by connectivity enforcement.

use std::collections::{BTreeSet, VecDeque};

use crate::error::{Error, Result};
use crate::image::Image;

pub const DEFAULT_SUPERPIXELS: usize = 200;
pub const DEFAULT_COMPACTNESS: f64 = 10.0;
pub const ITERATIONS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlicParams {
    pub superpixels: usize,
    pub compactness: f64,
}

impl Default for SlicParams {
    fn default() -> Self {
        SlicParams {
            superpixels: DEFAULT_SUPERPIXELS,
            compactness: DEFAULT_COMPACTNESS,
        }
    }
}

/// A partition of the image into `count` labeled regions.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperpixelSegmentation {
    width: usize,
    height: usize,
    labels: Vec<u32>,
    sizes: Vec<usize>,
    centroids: Vec<[f64; 2]>,
}

impl SuperpixelSegmentation {
    /// Builds a segmentation from arbitrary labels, renumbering them to
    /// `0..M` in order of first appearance (raster scan).
    pub fn from_labels(width: usize, height: usize, labels: &[u32]) -> Result<Self> {
        if width == 0 || height == 0 || labels.len() != width * height {
            return Err(Error::Argument(format!(
                "{width}x{height} segmentation with {} labels",
                labels.len()
            )));
        }
        let max = *labels.iter().max().expect("non-empty") as usize;
        let mut remap = vec![u32::MAX; max + 1];
        let mut next = 0u32;
        let compact: Vec<u32> = labels
            .iter()
            .map(|&l| {
                let slot = &mut remap[l as usize];
                if *slot == u32::MAX {
                    *slot = next;
                    next += 1;
                }
                *slot
            })
            .collect();
        let count = next as usize;
        let mut sizes = vec![0usize; count];
        let mut sums = vec![[0.0f64; 2]; count];
        for (i, &l) in compact.iter().enumerate() {
            let l = l as usize;
            sizes[l] += 1;
            sums[l][0] += (i % width) as f64;
            sums[l][1] += (i / width) as f64;
        }
        let centroids = sums
            .iter()
            .zip(&sizes)
            .map(|(s, &n)| [s[0] / n as f64, s[1] / n as f64])
            .collect();
        Ok(SuperpixelSegmentation {
            width,
            height,
            labels: compact,
            sizes,
            centroids,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, x: usize, y: usize) -> usize {
        self.labels[y * self.width + x] as usize
    }

    /// Number of regions `M`.
    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Mean pixel `(x, y)` of each region.
    pub fn centroids(&self) -> &[[f64; 2]] {
        &self.centroids
    }

    /// Pixel indices of every region, in raster order.
    pub fn region_pixels(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = self.sizes.iter().map(|&n| Vec::with_capacity(n)).collect();
        for (i, &l) in self.labels.iter().enumerate() {
            out[l as usize].push(i);
        }
        out
    }
}

/// 4-connected components of a label image. Returns per-pixel component ids
/// and component sizes.
pub fn connected_components(width: usize, height: usize, labels: &[u32]) -> (Vec<usize>, Vec<usize>) {
    let mut comp = vec![usize::MAX; labels.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..labels.len() {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let label = labels[start];
        comp[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(p) = queue.pop_front() {
            size += 1;
            let (x, y) = (p % width, p / width);
            let mut visit = |q: usize| {
                if comp[q] == usize::MAX && labels[q] == label {
                    comp[q] = id;
                    queue.push_back(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < width {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - width);
            }
            if y + 1 < height {
                visit(p + width);
            }
        }
        sizes.push(size);
    }
    (comp, sizes)
}

struct Center {
    lab: [f64; 3],
    x: f64,
    y: f64,
}

fn gradient_at(lab: &[[f64; 3]], width: usize, height: usize, x: usize, y: usize) -> f64 {
    let at = |xx: usize, yy: usize| lab[yy * width + xx];
    let sq = |a: [f64; 3], b: [f64; 3]| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>();
    let (xl, xr) = (x.saturating_sub(1), (x + 1).min(width - 1));
    let (yu, yd) = (y.saturating_sub(1), (y + 1).min(height - 1));
    sq(at(xr, y), at(xl, y)) + sq(at(x, yd), at(x, yu))
}

/// Segments `image` into roughly `params.superpixels` connected regions.
pub fn slic_segment(image: &Image, params: &SlicParams) -> Result<SuperpixelSegmentation> {
    let (width, height) = (image.width(), image.height());
    let n = width * height;
    let k = params.superpixels;
    if k == 0 || k > n {
        return Err(Error::Argument(format!(
            "requested {k} superpixels for an image of {n} pixels"
        )));
    }
    if !(params.compactness > 0.0) {
        return Err(Error::Argument("compactness must be positive".into()));
    }
    if k == 1 {
        return SuperpixelSegmentation::from_labels(width, height, &vec![0; n]);
    }

    let lab: Vec<[f64; 3]> = image
        .convert(crate::image::ColorSpace::Lab)
        .into_iter()
        .map(|p| p.map(f64::from))
        .collect();
    let step = (n as f64 / k as f64).sqrt();
    let nx = ((width as f64 / step).round() as usize).clamp(1, width);
    let ny = ((height as f64 / step).round() as usize).clamp(1, height);
    let (sx, sy) = (width as f64 / nx as f64, height as f64 / ny as f64);

    let mut centers = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let gx = (((i as f64 + 0.5) * sx) as usize).min(width - 1);
            let gy = (((j as f64 + 0.5) * sy) as usize).min(height - 1);
            // Move to the lowest-gradient pixel of the 3x3 neighborhood.
            let (mut bx, mut by) = (gx, gy);
            let mut best = gradient_at(&lab, width, height, gx, gy);
            for yy in gy.saturating_sub(1)..=(gy + 1).min(height - 1) {
                for xx in gx.saturating_sub(1)..=(gx + 1).min(width - 1) {
                    let g = gradient_at(&lab, width, height, xx, yy);
                    if g < best {
                        best = g;
                        bx = xx;
                        by = yy;
                    }
                }
            }
            centers.push(Center {
                lab: lab[by * width + bx],
                x: bx as f64,
                y: by as f64,
            });
        }
    }

    let spatial_weight = (params.compactness / step).powi(2);
    let radius = step.ceil() as isize;
    let mut labels = vec![u32::MAX; n];
    let mut dist = vec![f64::INFINITY; n];
    let distance = |c: &Center, p: usize| {
        let (x, y) = ((p % width) as f64, (p / width) as f64);
        let dl: f64 = (0..3).map(|ch| (lab[p][ch] - c.lab[ch]).powi(2)).sum();
        dl + spatial_weight * ((x - c.x).powi(2) + (y - c.y).powi(2))
    };

    for _ in 0..ITERATIONS {
        labels.fill(u32::MAX);
        dist.fill(f64::INFINITY);
        for (ci, c) in centers.iter().enumerate() {
            let (cx, cy) = (c.x.round() as isize, c.y.round() as isize);
            let x0 = (cx - radius).max(0) as usize;
            let x1 = ((cx + radius) as usize).min(width - 1);
            let y0 = (cy - radius).max(0) as usize;
            let y1 = ((cy + radius) as usize).min(height - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let p = y * width + x;
                    let d = distance(c, p);
                    if d < dist[p] {
                        dist[p] = d;
                        labels[p] = ci as u32;
                    }
                }
            }
        }
        // Pixels outside every search window fall back to the nearest center.
        for p in 0..n {
            if labels[p] == u32::MAX {
                let (ci, _) = centers
                    .iter()
                    .enumerate()
                    .map(|(ci, c)| (ci, distance(c, p)))
                    .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
                labels[p] = ci as u32;
            }
        }
        let mut sums = vec![[0.0f64; 6]; centers.len()];
        for (p, &l) in labels.iter().enumerate() {
            let s = &mut sums[l as usize];
            s[0] += lab[p][0];
            s[1] += lab[p][1];
            s[2] += lab[p][2];
            s[3] += (p % width) as f64;
            s[4] += (p / width) as f64;
            s[5] += 1.0;
        }
        for (c, s) in centers.iter_mut().zip(&sums) {
            if s[5] > 0.0 {
                c.lab = [s[0] / s[5], s[1] / s[5], s[2] / s[5]];
                c.x = s[3] / s[5];
                c.y = s[4] / s[5];
            }
        }
    }

    let min_size = (n as f64 / k as f64) / 4.0;
    let merged = enforce_connectivity(width, height, &labels, min_size);
    SuperpixelSegmentation::from_labels(width, height, &merged)
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Splits every label into 4-connected components and merges components
/// smaller than `min_size` into their largest adjacent component, smallest
/// first. Returns one label per final component.
pub fn enforce_connectivity(width: usize, height: usize, labels: &[u32], min_size: f64) -> Vec<u32> {
    let (comp, sizes) = connected_components(width, height, labels);
    let ncomp = sizes.len();
    let mut adjacency: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); ncomp];
    for p in 0..comp.len() {
        let (x, y) = (p % width, p / width);
        if x + 1 < width && comp[p] != comp[p + 1] {
            adjacency[comp[p]].insert(comp[p + 1]);
            adjacency[comp[p + 1]].insert(comp[p]);
        }
        if y + 1 < height && comp[p] != comp[p + width] {
            adjacency[comp[p]].insert(comp[p + width]);
            adjacency[comp[p + width]].insert(comp[p]);
        }
    }
    let mut parent: Vec<usize> = (0..ncomp).collect();
    let mut size = sizes.clone();
    let mut order: Vec<usize> = (0..ncomp).collect();
    order.sort_by_key(|&c| (sizes[c], c));
    for c in order {
        let root = find(&mut parent, c);
        if (size[root] as f64) >= min_size {
            continue;
        }
        let neighbors: Vec<usize> = adjacency[root].iter().copied().collect();
        let mut target: Option<usize> = None;
        for nb in neighbors {
            let r = find(&mut parent, nb);
            if r == root {
                continue;
            }
            target = match target {
                Some(t) if (size[t], std::cmp::Reverse(t)) >= (size[r], std::cmp::Reverse(r)) => Some(t),
                _ => Some(r),
            };
        }
        let Some(t) = target else { continue };
        parent[root] = t;
        size[t] += size[root];
        let moved = std::mem::take(&mut adjacency[root]);
        adjacency[t].extend(moved);
    }
    comp.iter()
        .map(|&c| find(&mut parent, c) as u32)
        .collect()
}
