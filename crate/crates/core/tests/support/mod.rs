//! Helpers shared by the integration suites: seeded generators for maps and
//! opinions, brute-force metric oracles, and a central-difference gradient
//! checker. Every oracle here is written from the documented conventions,
//! not by calling the fast paths it cross-checks.
#![allow(dead_code)]

use evseg::labels::{LabelMap, ScribbleMask};
use evseg::tape::{Tape, Var};
use evseg::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_label_map(rng: &mut impl Rng, h: usize, w: usize, k: usize) -> LabelMap {
    let data = (0..h * w).map(|_| rng.random_range(0..k) as u8).collect();
    LabelMap::new(h, w, data).expect("sized to fit")
}

/// Positive per-pixel distribution over `k` classes, shaped [k, h, w].
pub fn random_prob_map(rng: &mut impl Rng, k: usize, h: usize, w: usize) -> Tensor {
    let n = h * w;
    let mut data = vec![0.0; k * n];
    for pix in 0..n {
        let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-3).collect();
        let total: f64 = raw.iter().sum();
        for (c, &v) in raw.iter().enumerate() {
            data[c * n + pix] = v / total;
        }
    }
    Tensor::new(vec![k, h, w], data).expect("sized to fit")
}

/// A scribble mask over random classes with roughly `coverage` of the pixels
/// annotated, never empty.
pub fn random_scribble(rng: &mut impl Rng, h: usize, w: usize, k: usize, coverage: f64) -> ScribbleMask {
    let sentinel = k as u8;
    let mut labels = LabelMap::filled(h, w, sentinel);
    let mut marked = 0usize;
    for r in 0..h {
        for c in 0..w {
            if rng.random::<f64>() < coverage {
                labels.set(r, c, rng.random_range(0..k) as u8);
                marked += 1;
            }
        }
    }
    if marked == 0 {
        labels.set(rng.random_range(0..h), rng.random_range(0..w), rng.random_range(0..k) as u8);
    }
    ScribbleMask::new(labels, k).expect("labels stay below the sentinel")
}

// ---------------------------------------------------------------------------
// Brute-force metric oracles.

/// Per-foreground-class Dice by direct set counting; a class absent from
/// both maps scores 1.
pub fn dice_oracle(pred: &LabelMap, truth: &LabelMap, num_classes: usize) -> Vec<f64> {
    (1..num_classes as u8)
        .map(|class| {
            let mut inter = 0usize;
            let mut total = 0usize;
            for (&p, &t) in pred.data().iter().zip(truth.data()) {
                inter += usize::from(p == class && t == class);
                total += usize::from(p == class) + usize::from(t == class);
            }
            if total == 0 {
                1.0
            } else {
                2.0 * inter as f64 / total as f64
            }
        })
        .collect()
}

/// Boundary pixels of one class: an 8-neighborhood with any pixel of a
/// different class, where positions past the border count as background.
fn boundary_points(map: &LabelMap, class: u8) -> Vec<(f64, f64)> {
    let (h, w) = (map.height(), map.width());
    let mut pts = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if map.get(r, c) != class {
                continue;
            }
            let mut edge = false;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0
                        || nc < 0
                        || nr >= h as i64
                        || nc >= w as i64
                        || map.get(nr as usize, nc as usize) != class
                    {
                        edge = true;
                    }
                }
            }
            if edge {
                pts.push((r as f64, c as f64));
            }
        }
    }
    pts
}

/// Average symmetric surface distance by the quadratic all-pairs scan.
pub fn assd_oracle(pred: &LabelMap, truth: &LabelMap, class: u8, cap: f64) -> f64 {
    let bp = boundary_points(pred, class);
    let bt = boundary_points(truth, class);
    match (bp.is_empty(), bt.is_empty()) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => return cap,
        _ => {}
    }
    let mean_min = |from: &[(f64, f64)], to: &[(f64, f64)]| {
        from.iter()
            .map(|&(r, c)| {
                to.iter()
                    .map(|&(tr, tc)| ((r - tr).powi(2) + (c - tc).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / from.len() as f64
    };
    0.5 * (mean_min(&bp, &bt) + mean_min(&bt, &bp))
}

/// ECE by direct binning: per-pixel argmax confidence (first class wins
/// ties), bins of width 1/B over (0, 1] chosen with a ceiling.
pub fn ece_oracle(prob: &Tensor, truth: &LabelMap, bins: usize) -> f64 {
    let shape = prob.shape();
    let (k, n) = (shape[0], shape[1] * shape[2]);
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut correct = vec![0usize; bins];
    for pix in 0..n {
        let mut best = 0usize;
        let mut conf = prob.data()[pix];
        for class in 1..k {
            let p = prob.data()[class * n + pix];
            if p > conf {
                best = class;
                conf = p;
            }
        }
        let bin = (((conf * bins as f64).ceil() as i64) - 1).clamp(0, bins as i64 - 1) as usize;
        count[bin] += 1;
        conf_sum[bin] += conf;
        correct[bin] += usize::from(best as u8 == truth.data()[pix]);
    }
    let mut total = 0.0;
    for b in 0..bins {
        if count[b] > 0 {
            let acc = correct[b] as f64 / count[b] as f64;
            let avg = conf_sum[b] / count[b] as f64;
            total += (count[b] as f64 / n as f64) * (acc - avg).abs();
        }
    }
    total
}

/// UEO by direct sweep: Dice between the error set and each thresholded
/// uncertainty set, keeping the best. Two empty sets agree perfectly.
pub fn ueo_oracle(uncertainty: &Tensor, pred: &LabelMap, truth: &LabelMap, thresholds: &[f64]) -> f64 {
    let errors: Vec<bool> = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(&p, &t)| p != t)
        .collect();
    let mut best = f64::NEG_INFINITY;
    for &tau in thresholds {
        let mut inter = 0usize;
        let mut total = 0usize;
        for (&u, &e) in uncertainty.data().iter().zip(&errors) {
            let flagged = u > tau;
            inter += usize::from(flagged && e);
            total += usize::from(flagged) + usize::from(e);
        }
        let dice = if total == 0 {
            1.0
        } else {
            2.0 * inter as f64 / total as f64
        };
        best = best.max(dice);
    }
    best
}

// ---------------------------------------------------------------------------
// Central-difference gradient checking.

/// Central finite differences of `f` at `x`, one coordinate at a time.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for (i, g) in grad.iter_mut().enumerate() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        *g = (up - down) / (2.0 * h);
    }
    grad
}

/// Worst relative disagreement between two gradient vectors. Denominators
/// are floored relative to the largest entry so near-zero coordinates are
/// compared at the vector's own scale rather than amplified.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, &v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3 * scale))
        .fold(0.0, f64::max)
}

/// Reads the gradient of `loss` with respect to `leaf` after one backward
/// pass, as a flat vector.
pub fn grad_of(tape: &Tape, loss: Var, leaf: Var) -> Vec<f64> {
    tape.backward(loss).expect("backward succeeds");
    tape.grad(leaf).expect("leaf received a gradient").data().to_vec()
}
