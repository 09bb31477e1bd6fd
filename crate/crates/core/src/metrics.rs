//! Segmentation and uncertainty quality metrics: per-class Dice overlap,
//! average symmetric surface distance (ASSD), expected calibration error
//! (ECE), and uncertainty-error overlap (UEO), plus `evaluate` which runs a
//! frozen network over a sample list and aggregates all four.

use serde::{Deserialize, Serialize};

use crate::data::ScribbleSample;
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::net::DualNet;
use crate::tensor::Tensor;

/// Stand-in for infinity in the distance transform; finite so that envelope
/// intersections between two empty cells stay NaN-free.
const FAR: f64 = 1e20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Equal-width confidence bins over (0, 1] for ECE.
    pub ece_bins: usize,
    /// Thresholds swept for UEO; the report keeps the best one.
    pub ueo_thresholds: Vec<f64>,
    /// Surface distance charged when exactly one map misses the class
    /// entirely; `None` means the image diagonal.
    pub assd_cap: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ece_bins: 10,
            ueo_thresholds: (1..100).map(|i| f64::from(i) / 100.0).collect(),
            assd_cap: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ece_bins == 0 {
            return Err(Error::InvalidConfig("ece_bins must be positive".into()));
        }
        if self.ueo_thresholds.is_empty() {
            return Err(Error::InvalidConfig(
                "ueo_thresholds must not be empty".into(),
            ));
        }
        if let Some(cap) = self.assd_cap {
            if !cap.is_finite() || cap <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "assd_cap must be positive and finite, got {cap}"
                )));
            }
        }
        Ok(())
    }
}

/// Aggregated metrics over one split. Per-class lists cover the foreground
/// classes 1..K in order; means average samples first, then classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sample_count: usize,
    pub per_class_dice: Vec<f64>,
    pub mean_dice: f64,
    pub per_class_assd: Vec<f64>,
    pub mean_assd: f64,
    pub ece: f64,
    pub ueo: f64,
    pub config: EvalConfig,
}

fn check_same_extent(op: &'static str, a: &LabelMap, b: &LabelMap) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: vec![a.height(), a.width()],
            rhs: vec![b.height(), b.width()],
        });
    }
    Ok(())
}

/// Dice of two pixel sets; two empty sets agree perfectly.
fn set_dice(a: &[bool], b: &[bool]) -> f64 {
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x && y);
        total += usize::from(x) + usize::from(y);
    }
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Per-foreground-class Dice (classes 1..K). A class absent from both maps
/// scores 1: vacuous agreement.
pub fn dice_scores(pred: &LabelMap, truth: &LabelMap, num_classes: usize) -> Result<Vec<f64>> {
    check_same_extent("dice_scores", pred, truth)?;
    let mut scores = Vec::with_capacity(num_classes.saturating_sub(1));
    for class in 1..num_classes as u8 {
        let p: Vec<bool> = pred.data().iter().map(|&v| v == class).collect();
        let t: Vec<bool> = truth.data().iter().map(|&v| v == class).collect();
        scores.push(set_dice(&p, &t));
    }
    Ok(scores)
}

/// Boundary pixels of one class under 8-connectivity; pixels past the image
/// border count as background, so a region touching the border has a
/// boundary there.
fn boundary(map: &LabelMap, class: u8) -> Vec<bool> {
    let (h, w) = (map.height(), map.width());
    let mut out = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            if map.get(r, c) != class {
                continue;
            }
            let mut edge = false;
            'scan: for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                        edge = true;
                        break 'scan;
                    }
                    if map.get(nr as usize, nc as usize) != class {
                        edge = true;
                        break 'scan;
                    }
                }
            }
            out[r * w + c] = edge;
        }
    }
    out
}

/// One-dimensional squared-distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    if n == 1 {
        d[0] = f[0];
        return;
    }
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2 * (q - p)) as f64;
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                v[k + 1] = q;
                z[k + 1] = s;
                z[k + 2] = f64::INFINITY;
                k += 1;
                break;
            }
        }
    }
    let mut k = 0usize;
    for (q, dq) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *dq = ((q as f64) - (p as f64)).powi(2) + f[p];
    }
}

/// Exact squared Euclidean distance to the nearest set pixel, for every
/// pixel, via separable transforms over rows then columns.
fn squared_distance_field(set: &[bool], h: usize, w: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = set.iter().map(|&b| if b { 0.0 } else { FAR }).collect();
    let mut row_in = vec![0.0; w];
    let mut row_out = vec![0.0; w];
    for r in 0..h {
        row_in.copy_from_slice(&grid[r * w..(r + 1) * w]);
        edt_1d(&row_in, &mut row_out);
        grid[r * w..(r + 1) * w].copy_from_slice(&row_out);
    }
    let mut col_in = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    let mut out = vec![0.0; h * w];
    for c in 0..w {
        for r in 0..h {
            col_in[r] = grid[r * w + c];
        }
        edt_1d(&col_in, &mut col_out);
        for r in 0..h {
            out[r * w + c] = col_out[r];
        }
    }
    out
}

fn mean_surface_distance(from: &[bool], to_field: &[f64]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, &b) in from.iter().enumerate() {
        if b {
            total += to_field[i].sqrt();
            count += 1;
        }
    }
    total / count as f64
}

/// Average symmetric surface distance for one class, in pixels. Conventions
/// for degenerate inputs: both maps missing the class scores 0, exactly one
/// missing scores `cap` (callers default it to the image diagonal).
pub fn assd(pred: &LabelMap, truth: &LabelMap, class: u8, cap: f64) -> Result<f64> {
    check_same_extent("assd", pred, truth)?;
    let (h, w) = (pred.height(), pred.width());
    let bp = boundary(pred, class);
    let bt = boundary(truth, class);
    let pred_empty = !bp.iter().any(|&b| b);
    let truth_empty = !bt.iter().any(|&b| b);
    match (pred_empty, truth_empty) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(cap),
        (false, false) => {}
    }
    let field_t = squared_distance_field(&bt, h, w);
    let field_p = squared_distance_field(&bp, h, w);
    let forward = mean_surface_distance(&bp, &field_t);
    let backward = mean_surface_distance(&bt, &field_p);
    Ok(0.5 * (forward + backward))
}

pub fn image_diagonal(height: usize, width: usize) -> f64 {
    ((height * height + width * width) as f64).sqrt()
}

/// Expected calibration error over equal-width confidence bins spanning
/// (0, 1]: sum of (bin share) * |bin accuracy - bin mean confidence|.
pub fn ece(prob: &Tensor, truth: &LabelMap, bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(Error::InvalidConfig("ece needs at least one bin".into()));
    }
    let shape = prob.shape();
    if shape.len() != 3 || shape[1] != truth.height() || shape[2] != truth.width() {
        return Err(Error::ShapeMismatch {
            op: "ece",
            lhs: shape.to_vec(),
            rhs: vec![truth.height(), truth.width()],
        });
    }
    let k = shape[0];
    let n = truth.height() * truth.width();
    let mut bin_count = vec![0usize; bins];
    let mut bin_conf = vec![0.0; bins];
    let mut bin_correct = vec![0usize; bins];
    for pix in 0..n {
        let (mut best, mut conf) = (0usize, prob.data()[pix]);
        for class in 1..k {
            let p = prob.data()[class * n + pix];
            if p > conf {
                best = class;
                conf = p;
            }
        }
        let bin = (((conf * bins as f64).ceil() as i64) - 1).clamp(0, bins as i64 - 1) as usize;
        bin_count[bin] += 1;
        bin_conf[bin] += conf;
        bin_correct[bin] += usize::from(best as u8 == truth.data()[pix]);
    }
    let mut total = 0.0;
    for b in 0..bins {
        if bin_count[b] == 0 {
            continue;
        }
        let share = bin_count[b] as f64 / n as f64;
        let acc = bin_correct[b] as f64 / bin_count[b] as f64;
        let conf = bin_conf[b] / bin_count[b] as f64;
        total += share * (acc - conf).abs();
    }
    Ok(total)
}

/// Uncertainty-error overlap: Dice between the thresholded uncertainty map
/// and the prediction-error map, maximized over the threshold grid.
pub fn ueo(
    uncertainty: &Tensor,
    pred: &LabelMap,
    truth: &LabelMap,
    thresholds: &[f64],
) -> Result<f64> {
    check_same_extent("ueo", pred, truth)?;
    if uncertainty.shape() != [truth.height(), truth.width()] {
        return Err(Error::ShapeMismatch {
            op: "ueo",
            lhs: uncertainty.shape().to_vec(),
            rhs: vec![truth.height(), truth.width()],
        });
    }
    if thresholds.is_empty() {
        return Err(Error::EmptyReduction { op: "ueo" });
    }
    let errors: Vec<bool> = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(&p, &t)| p != t)
        .collect();
    let mut best = f64::NEG_INFINITY;
    for &tau in thresholds {
        let flagged: Vec<bool> = uncertainty.data().iter().map(|&u| u > tau).collect();
        best = best.max(set_dice(&flagged, &errors));
    }
    Ok(best)
}

/// Run branch-1 inference over every sample and aggregate all four metrics:
/// per-class values are averaged over samples, overall means over classes.
pub fn evaluate(net: &DualNet, samples: &[&ScribbleSample], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Dataset("no samples to evaluate".into()));
    }
    let k = net.config().num_classes;
    let mut dice_sums = vec![0.0; k - 1];
    let mut assd_sums = vec![0.0; k - 1];
    let mut ece_sum = 0.0;
    let mut ueo_sum = 0.0;
    for sample in samples {
        let out = net.inference(&sample.image)?;
        let cap = cfg
            .assd_cap
            .unwrap_or_else(|| image_diagonal(sample.mask.height(), sample.mask.width()));
        let dice = dice_scores(&out.labels, &sample.mask, k)?;
        for (sum, d) in dice_sums.iter_mut().zip(dice) {
            *sum += d;
        }
        for class in 1..k {
            assd_sums[class - 1] += assd(&out.labels, &sample.mask, class as u8, cap)?;
        }
        ece_sum += ece(&out.prob, &sample.mask, cfg.ece_bins)?;
        ueo_sum += ueo(&out.uncertainty, &out.labels, &sample.mask, &cfg.ueo_thresholds)?;
    }
    let n = samples.len() as f64;
    let per_class_dice: Vec<f64> = dice_sums.iter().map(|s| s / n).collect();
    let per_class_assd: Vec<f64> = assd_sums.iter().map(|s| s / n).collect();
    Ok(EvalReport {
        sample_count: samples.len(),
        mean_dice: per_class_dice.iter().sum::<f64>() / per_class_dice.len() as f64,
        mean_assd: per_class_assd.iter().sum::<f64>() / per_class_assd.len() as f64,
        per_class_dice,
        per_class_assd,
        ece: ece_sum / n,
        ueo: ueo_sum / n,
        config: cfg.clone(),
    })
}
