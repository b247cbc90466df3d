//! Precision/recall over a 256-threshold sweep, F-measure and MAE.

use std::fmt::Write as _;

use log::warn;

use crate::error::{Error, Result};
use crate::image::GroundTruthMask;
use crate::predict::{quantize, SaliencyMap};

pub const THRESHOLDS: usize = 256;
pub const DEFAULT_BETA2: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub beta2: f64,
    /// Precision reported when no pixel reaches the threshold.
    pub empty_precision: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            beta2: DEFAULT_BETA2,
            empty_precision: 1.0,
        }
    }
}

fn check_dims(s: &SaliencyMap, g: &GroundTruthMask) -> Result<()> {
    if (s.width(), s.height()) != (g.width(), g.height()) {
        return Err(Error::Argument(format!(
            "map is {}x{} but mask is {}x{}",
            s.width(),
            s.height(),
            g.width(),
            g.height()
        )));
    }
    Ok(())
}

fn is_foreground(g: f32) -> bool {
    g >= 0.5
}

/// Precision and recall of the mask `round(255 S) >= t` against `G >= 0.5`.
pub fn pr_at_threshold(s: &SaliencyMap, g: &GroundTruthMask, t: u8, opts: &EvalOptions) -> Result<(f64, f64)> {
    let curves = image_curves(s, g, opts)?
        .ok_or_else(|| Error::Argument("ground truth has no foreground".into()))?;
    Ok((curves.precision[t as usize], curves.recall[t as usize]))
}

/// `(1 + b2) P R / (b2 P + R)`, zero when the denominator is zero.
pub fn f_measure(precision: f64, recall: f64, beta2: f64) -> f64 {
    if precision == recall {
        // The formula reduces to P; skip the rounding of the general form.
        return precision;
    }
    let denom = beta2 * precision + recall;
    if denom <= 0.0 {
        0.0
    } else {
        (1.0 + beta2) * precision * recall / denom
    }
}

/// Mean absolute difference between map and mask.
pub fn mae(s: &SaliencyMap, g: &GroundTruthMask) -> Result<f64> {
    check_dims(s, g)?;
    let total: f64 = s
        .values()
        .iter()
        .zip(g.values())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum();
    Ok(total / s.values().len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageCurves {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub mae: f64,
}

/// Curves for one image, or `None` when the ground truth is empty.
pub fn image_curves(s: &SaliencyMap, g: &GroundTruthMask, opts: &EvalOptions) -> Result<Option<ImageCurves>> {
    check_dims(s, g)?;
    let mut fg = [0u64; THRESHOLDS];
    let mut all = [0u64; THRESHOLDS];
    for (&v, &gt) in s.values().iter().zip(g.values()) {
        let q = quantize(v) as usize;
        all[q] += 1;
        if is_foreground(gt) {
            fg[q] += 1;
        }
    }
    let positives: u64 = fg.iter().sum();
    if positives == 0 {
        return Ok(None);
    }
    let mut precision = vec![0.0; THRESHOLDS];
    let mut recall = vec![0.0; THRESHOLDS];
    let (mut hit, mut selected) = (0u64, 0u64);
    for t in (0..THRESHOLDS).rev() {
        hit += fg[t];
        selected += all[t];
        precision[t] = if selected == 0 {
            opts.empty_precision
        } else {
            hit as f64 / selected as f64
        };
        recall[t] = hit as f64 / positives as f64;
    }
    Ok(Some(ImageCurves {
        precision,
        recall,
        mae: mae(s, g)?,
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Dataset-mean precision per threshold 0..=255.
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f_measure: Vec<f64>,
    pub max_f: f64,
    pub max_f_threshold: usize,
    pub mae: f64,
    /// `(stem, MAE)` of every evaluated image, sorted by stem.
    pub per_image_mae: Vec<(String, f64)>,
    /// Stems excluded for having an empty ground truth.
    pub excluded: Vec<String>,
}

impl EvalReport {
    /// `threshold<TAB>P<TAB>R<TAB>F` lines followed by `MaxF` and `MAE` footers.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("threshold\tprecision\trecall\tf_measure\n");
        for t in 0..THRESHOLDS {
            writeln!(
                out,
                "{t}\t{:.6}\t{:.6}\t{:.6}",
                self.precision[t], self.recall[t], self.f_measure[t]
            )
            .expect("write to string");
        }
        writeln!(out, "MaxF\t{:.6}\t{}", self.max_f, self.max_f_threshold).expect("write to string");
        writeln!(out, "MAE\t{:.6}", self.mae).expect("write to string");
        out
    }

    pub fn per_image_tsv(&self) -> String {
        let mut out = String::from("stem\tmae\n");
        for (stem, m) in &self.per_image_mae {
            writeln!(out, "{stem}\t{m:.6}").expect("write to string");
        }
        out
    }
}

/// Averages per-image precision and recall at each threshold, then computes
/// F from the averages. Images are reduced in stem order.
pub fn evaluate_dataset(pairs: &[(String, SaliencyMap, GroundTruthMask)], opts: &EvalOptions) -> Result<EvalReport> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| pairs[a].0.cmp(&pairs[b].0));
    let mut precision = vec![0.0; THRESHOLDS];
    let mut recall = vec![0.0; THRESHOLDS];
    let mut per_image_mae = Vec::new();
    let mut excluded = Vec::new();
    for i in order {
        let (stem, s, g) = &pairs[i];
        match image_curves(s, g, opts)? {
            Some(c) => {
                for t in 0..THRESHOLDS {
                    precision[t] += c.precision[t];
                    recall[t] += c.recall[t];
                }
                per_image_mae.push((stem.clone(), c.mae));
            }
            None => {
                warn!("{stem}: empty ground truth, excluded from evaluation");
                excluded.push(stem.clone());
            }
        }
    }
    let n = per_image_mae.len();
    if n == 0 {
        return Err(Error::Dataset("no map/mask pair with foreground to evaluate".into()));
    }
    precision.iter_mut().for_each(|p| *p /= n as f64);
    recall.iter_mut().for_each(|r| *r /= n as f64);
    let f: Vec<f64> = precision
        .iter()
        .zip(&recall)
        .map(|(&p, &r)| f_measure(p, r, opts.beta2))
        .collect();
    let (max_f_threshold, max_f) = f
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (t, v)| if v > best.1 { (t, v) } else { best });
    let mae = per_image_mae.iter().map(|(_, m)| m).sum::<f64>() / n as f64;
    Ok(EvalReport {
        precision,
        recall,
        f_measure: f,
        max_f,
        max_f_threshold,
        mae,
        per_image_mae,
        excluded,
    })
}
