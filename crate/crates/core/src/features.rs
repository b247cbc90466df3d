//! The 110-value region descriptor: mean colors, Gabor texture, location
//! and per-channel color histograms.

use std::f64::consts::PI;
use std::ops::Range;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::ColorPlanes;
use crate::slic::SuperpixelSegmentation;

pub const DESCRIPTOR_LEN: usize = 110;
pub const GABOR_FILTERS: usize = 24;

// Zero-based descriptor layout.
pub const AVG_RGB: Range<usize> = 0..3;
pub const AVG_LAB: Range<usize> = 3..6;
pub const AVG_HSV: Range<usize> = 6..9;
pub const GABOR_MEAN: Range<usize> = 9..33;
pub const GABOR_MAX: usize = 33;
pub const CENTER: Range<usize> = 34..36;
pub const HISTOGRAMS: Range<usize> = 36..110;

/// Bin counts of the nine channel histograms in order R, G, B, L, a, b, H, S, V.
pub const HIST_BINS: [usize; 9] = [9, 8, 8, 9, 8, 8, 8, 8, 8];
/// Value range of each histogram channel. Hue is stored as `H / 360`.
pub const HIST_RANGES: [(f64, f64); 9] = [
    (0.0, 1.0),
    (0.0, 1.0),
    (0.0, 1.0),
    (0.0, 100.0),
    (-128.0, 127.0),
    (-128.0, 127.0),
    (0.0, 1.0),
    (0.0, 1.0),
    (0.0, 1.0),
];

/// Descriptor index range of histogram `channel` (0..9).
pub fn histogram_range(channel: usize) -> Range<usize> {
    let start = HISTOGRAMS.start + HIST_BINS[..channel].iter().sum::<usize>();
    start..start + HIST_BINS[channel]
}

/// One real-valued Gabor kernel, zero-mean and unit L1 norm.
#[derive(Debug, Clone)]
pub struct GaborKernel {
    pub theta: f64,
    pub wavelength: f64,
    pub sigma: f64,
    pub radius: usize,
    /// Row-major `(2r+1) x (2r+1)` taps.
    pub taps: Vec<f32>,
}

impl GaborKernel {
    pub fn new(theta: f64, wavelength: f64, aspect: f64) -> Self {
        let sigma = 0.56 * wavelength;
        let radius = (2.5 * sigma).ceil() as usize;
        let r = radius as isize;
        let mut taps = Vec::with_capacity((2 * radius + 1).pow(2));
        for y in -r..=r {
            for x in -r..=r {
                let (x, y) = (x as f64, y as f64);
                let xr = x * theta.cos() + y * theta.sin();
                let yr = -x * theta.sin() + y * theta.cos();
                let envelope = (-(xr * xr + aspect * aspect * yr * yr) / (2.0 * sigma * sigma)).exp();
                taps.push(envelope * (2.0 * PI * xr / wavelength).cos());
            }
        }
        let mean = taps.iter().sum::<f64>() / taps.len() as f64;
        taps.iter_mut().for_each(|t| *t -= mean);
        let l1: f64 = taps.iter().map(|t| t.abs()).sum();
        GaborKernel {
            theta,
            wavelength,
            sigma,
            radius,
            taps: taps.into_iter().map(|t| (t / l1) as f32).collect(),
        }
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }
}

/// 8 orientations `k * pi / 8` for each wavelength 4, 8 and 16 px.
/// Filter `i` has wavelength index `i / 8` and orientation `i % 8`.
#[derive(Debug, Clone)]
pub struct GaborBank {
    kernels: Vec<GaborKernel>,
}

impl Default for GaborBank {
    fn default() -> Self {
        let kernels = [4.0, 8.0, 16.0]
            .iter()
            .flat_map(|&lambda| (0..8).map(move |k| GaborKernel::new(k as f64 * PI / 8.0, lambda, 0.5)))
            .collect();
        GaborBank { kernels }
    }
}

impl GaborBank {
    pub fn kernels(&self) -> &[GaborKernel] {
        &self.kernels
    }
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

fn pad_reflect(plane: &[f32], width: usize, height: usize, r: usize) -> Vec<f32> {
    let pw = width + 2 * r;
    let mut out = Vec::with_capacity(pw * (height + 2 * r));
    for y in 0..height + 2 * r {
        let sy = reflect(y as isize - r as isize, height);
        for x in 0..pw {
            out.push(plane[sy * width + reflect(x as isize - r as isize, width)]);
        }
    }
    out
}

/// `|kernel * plane|` with reflected borders.
pub fn filter_abs(plane: &[f32], width: usize, height: usize, kernel: &GaborKernel) -> Vec<f32> {
    let r = kernel.radius;
    let side = kernel.side();
    let padded = pad_reflect(plane, width, height, r);
    let pw = width + 2 * r;
    let mut out = vec![0.0f32; width * height];
    for y in 0..height {
        let row = &mut out[y * width..(y + 1) * width];
        for ky in 0..side {
            let taps = &kernel.taps[ky * side..(ky + 1) * side];
            let src = &padded[(y + ky) * pw..(y + ky + 1) * pw];
            for (x, acc) in row.iter_mut().enumerate() {
                let window = &src[x..x + side];
                *acc += window.iter().zip(taps).map(|(a, b)| a * b).sum::<f32>();
            }
        }
        row.iter_mut().for_each(|v| *v = v.abs());
    }
    out
}

/// One absolute response plane per filter of the bank.
pub fn gabor_responses(gray: &[f32], width: usize, height: usize, bank: &GaborBank) -> Vec<Vec<f32>> {
    bank.kernels
        .par_iter()
        .map(|k| filter_abs(gray, width, height, k))
        .collect()
}

/// Normalized histogram with uniform bins over `[lo, hi]`, top edge inclusive.
/// Out-of-range values are clamped into the end bins.
pub fn channel_histogram(values: impl IntoIterator<Item = f64>, lo: f64, hi: f64, bins: usize) -> Result<Vec<f64>> {
    let mut hist = vec![0.0; bins];
    let mut n = 0usize;
    for v in values {
        hist[bin_index(v, lo, hi, bins)] += 1.0;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Argument("histogram of an empty region".into()));
    }
    hist.iter_mut().for_each(|h| *h /= n as f64);
    Ok(hist)
}

fn bin_index(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    let t = ((v - lo) / (hi - lo) * bins as f64).floor();
    if t.is_nan() || t < 0.0 {
        0
    } else {
        (t as usize).min(bins - 1)
    }
}

/// Table of 110 descriptor values for one superpixel.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFeatures {
    pub values: [f64; DESCRIPTOR_LEN],
}

impl RegionFeatures {
    pub fn histogram(&self, channel: usize) -> &[f64] {
        &self.values[histogram_range(channel)]
    }
}

/// Computes every region's descriptor.
pub fn region_features(
    planes: &ColorPlanes,
    seg: &SuperpixelSegmentation,
    bank: &GaborBank,
) -> Result<Vec<RegionFeatures>> {
    let (w, h) = (planes.width, planes.height);
    if (seg.width(), seg.height()) != (w, h) {
        return Err(Error::Argument(format!(
            "segmentation is {}x{} but planes are {w}x{h}",
            seg.width(),
            seg.height()
        )));
    }
    let responses = gabor_responses(&planes.gray, w, h, bank);
    let m = seg.count();
    let mut sums = vec![[0.0f64; 9 + GABOR_FILTERS]; m];
    let mut counts = vec![vec![0.0f64; HISTOGRAMS.len()]; m];
    let offsets: Vec<usize> = (0..9).map(|c| histogram_range(c).start - HISTOGRAMS.start).collect();
    for (p, &label) in seg.labels().iter().enumerate() {
        let l = label as usize;
        let mut hsv = planes.hsv[p].map(f64::from);
        hsv[0] /= 360.0;
        let channels = [
            planes.rgb[p][0] as f64,
            planes.rgb[p][1] as f64,
            planes.rgb[p][2] as f64,
            planes.lab[p][0] as f64,
            planes.lab[p][1] as f64,
            planes.lab[p][2] as f64,
            hsv[0],
            hsv[1],
            hsv[2],
        ];
        let s = &mut sums[l];
        for (c, &v) in channels.iter().enumerate() {
            s[c] += v;
            let (lo, hi) = HIST_RANGES[c];
            counts[l][offsets[c] + bin_index(v, lo, hi, HIST_BINS[c])] += 1.0;
        }
        for (f, resp) in responses.iter().enumerate() {
            s[9 + f] += resp[p] as f64;
        }
    }
    let span_x = if w > 1 { (w - 1) as f64 } else { 1.0 };
    let span_y = if h > 1 { (h - 1) as f64 } else { 1.0 };
    let out = (0..m)
        .map(|l| {
            let n = seg.sizes()[l] as f64;
            let mut values = [0.0; DESCRIPTOR_LEN];
            for (i, s) in sums[l].iter().enumerate() {
                values[i] = s / n;
            }
            values[GABOR_MAX] = values[GABOR_MEAN].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let [cx, cy] = seg.centroids()[l];
            values[CENTER.start] = if w > 1 { cx / span_x } else { 0.5 };
            values[CENTER.start + 1] = if h > 1 { cy / span_y } else { 0.5 };
            for (i, c) in counts[l].iter().enumerate() {
                values[HISTOGRAMS.start + i] = c / n;
            }
            RegionFeatures { values }
        })
        .collect();
    Ok(out)
}
