//! Combination of two per-pixel opinions and conversion of the result back
//! to Dirichlet form.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::tape::{Tape, Var};

/// A combined opinion: belief masses [K, H, W], uncertainty [H, W], and the
/// pairwise conflict [H, W] that was renormalized away.
pub struct FusedOpinion<'t> {
    tape: &'t Tape,
    belief: Var,
    uncertainty: Var,
    conflict: Var,
    num_classes: usize,
    evidence: Cell<Option<Var>>,
    strength: Cell<Option<Var>>,
    alpha: Cell<Option<Var>>,
    prob: Cell<Option<Var>>,
}

fn validate_opinion(tape: &Tape, b: Var, u: Var, which: &'static str) -> Result<(usize, usize, usize)> {
    let bs = tape.shape(b);
    let us = tape.shape(u);
    if bs.len() != 3 || us.len() != 2 || bs[1..] != us[..] {
        return Err(Error::ShapeMismatch {
            op: which,
            lhs: bs,
            rhs: us,
        });
    }
    let bv = tape.value(b);
    let uv = tape.value(u);
    if bv.data().iter().any(|&v| v < 0.0) {
        return Err(Error::Domain {
            op: which,
            detail: "negative belief mass".into(),
        });
    }
    if uv.data().iter().any(|&v| v <= 0.0) {
        return Err(Error::Domain {
            op: which,
            detail: "uncertainty must be strictly positive".into(),
        });
    }
    let (k, h, w) = (bs[0], bs[1], bs[2]);
    let bd = bv.data();
    let ud = uv.data();
    for px in 0..h * w {
        let mass: f64 = (0..k).map(|c| bd[c * h * w + px]).sum::<f64>() + ud[px];
        if (mass - 1.0).abs() > 1e-6 {
            return Err(Error::Domain {
                op: which,
                detail: format!("belief masses and uncertainty sum to {mass}, not 1"),
            });
        }
    }
    Ok((k, h, w))
}

/// Reduced Dempster combination of two opinions over the same frame:
///   C     = sum_{n != m} b1_n b2_m
///   b_k   = (b1_k b2_k + b1_k u2 + b2_k u1) / (1 - C)
///   u     = u1 u2 / (1 - C)
pub fn fuse<'t>(tape: &'t Tape, b1: Var, u1: Var, b2: Var, u2: Var) -> Result<FusedOpinion<'t>> {
    let (k, h, w) = validate_opinion(tape, b1, u1, "fuse_first_opinion")?;
    let (k2, h2, w2) = validate_opinion(tape, b2, u2, "fuse_second_opinion")?;
    if (k, h, w) != (k2, h2, w2) {
        return Err(Error::ShapeMismatch {
            op: "fuse",
            lhs: vec![k, h, w],
            rhs: vec![k2, h2, w2],
        });
    }

    // C = (sum_n b1_n)(sum_m b2_m) - sum_j b1_j b2_j, the off-diagonal mass.
    let t1 = tape.sum_axes(b1, &[0])?;
    let t2 = tape.sum_axes(b2, &[0])?;
    let cross = tape.mul(t1, t2)?;
    let diag = tape.sum_axes(tape.mul(b1, b2)?, &[0])?;
    let conflict = tape.sub(cross, diag)?;

    // 1 - C must stay away from zero or the renormalization blows up.
    let remain = tape.add_scalar(tape.neg(conflict)?, 1.0)?;
    {
        let rv = tape.value(remain);
        if let Some(flat) = rv.data().iter().position(|&v| v <= 1e-12) {
            return Err(Error::DegenerateConflict {
                row: flat / w,
                col: flat % w,
            });
        }
    }

    let b1b2 = tape.mul(b1, b2)?;
    let b1u2 = tape.mul(b1, u2)?;
    let b2u1 = tape.mul(b2, u1)?;
    let numer = tape.add(tape.add(b1b2, b1u2)?, b2u1)?;
    let belief = tape.div(numer, remain)?;
    let uu = tape.mul(u1, u2)?;
    let uncertainty = tape.div(uu, remain)?;

    finish(tape, belief, uncertainty, conflict, k, w)
}

/// Opinion averaging: b = (b1 + b2)/2, u = (u1 + u2)/2, conflict 0. Because
/// p_k = b_k + u/K, the expected probability of the average is exactly the
/// average of the branch probabilities.
pub fn mean_fuse<'t>(tape: &'t Tape, b1: Var, u1: Var, b2: Var, u2: Var) -> Result<FusedOpinion<'t>> {
    let (k, h, w) = validate_opinion(tape, b1, u1, "mean_fuse_first_opinion")?;
    let (k2, h2, w2) = validate_opinion(tape, b2, u2, "mean_fuse_second_opinion")?;
    if (k, h, w) != (k2, h2, w2) {
        return Err(Error::ShapeMismatch {
            op: "mean_fuse",
            lhs: vec![k, h, w],
            rhs: vec![k2, h2, w2],
        });
    }
    let belief = tape.scale(tape.add(b1, b2)?, 0.5)?;
    let uncertainty = tape.scale(tape.add(u1, u2)?, 0.5)?;
    let conflict = tape.constant(crate::tensor::Tensor::zeros(vec![h, w]))?;
    finish(tape, belief, uncertainty, conflict, k, w)
}

fn finish<'t>(
    tape: &'t Tape,
    belief: Var,
    uncertainty: Var,
    conflict: Var,
    k: usize,
    w: usize,
) -> Result<FusedOpinion<'t>> {
    let uv = tape.value(uncertainty);
    if let Some(flat) = uv.data().iter().position(|&v| v <= 0.0) {
        return Err(Error::DegenerateCertainty {
            row: flat / w,
            col: flat % w,
        });
    }
    Ok(FusedOpinion {
        tape,
        belief,
        uncertainty,
        conflict,
        num_classes: k,
        evidence: Cell::new(None),
        strength: Cell::new(None),
        alpha: Cell::new(None),
        prob: Cell::new(None),
    })
}

impl<'t> FusedOpinion<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn belief(&self) -> Var {
        self.belief
    }

    pub fn uncertainty(&self) -> Var {
        self.uncertainty
    }

    pub fn conflict(&self) -> Var {
        self.conflict
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn cached(&self, cell: &Cell<Option<Var>>, build: impl FnOnce() -> Result<Var>) -> Result<Var> {
        if let Some(v) = cell.get() {
            return Ok(v);
        }
        let v = build()?;
        cell.set(Some(v));
        Ok(v)
    }

    /// Back-conversion to Dirichlet form: e_k = K b_k / u.
    pub fn evidence(&self) -> Result<Var> {
        self.cached(&self.evidence, || {
            let kb = self.tape.scale(self.belief, self.num_classes as f64)?;
            self.tape.div(kb, self.uncertainty)
        })
    }

    /// S = K / u.
    pub fn strength(&self) -> Result<Var> {
        self.cached(&self.strength, || {
            let k = self.tape.scalar(self.num_classes as f64)?;
            self.tape.div(k, self.uncertainty)
        })
    }

    /// alpha_k = e_k + 1.
    pub fn alpha(&self) -> Result<Var> {
        self.cached(&self.alpha, || {
            let e = self.evidence()?;
            self.tape.add_scalar(e, 1.0)
        })
    }

    /// p_k = alpha_k / S.
    pub fn expected_prob(&self) -> Result<Var> {
        self.cached(&self.prob, || {
            let alpha = self.alpha()?;
            let s = self.strength()?;
            self.tape.div(alpha, s)
        })
    }

    /// Evidence, strength, alpha, and expected probability in one call.
    pub fn dirichlet(&self) -> Result<(Var, Var, Var, Var)> {
        Ok((
            self.evidence()?,
            self.strength()?,
            self.alpha()?,
            self.expected_prob()?,
        ))
    }

    /// Per-pixel argmax of the fused probability, detached from the graph;
    /// ties resolve to the lowest class.
    pub fn hard_pseudo_labels(&self) -> Result<LabelMap> {
        let prob = self.expected_prob()?;
        LabelMap::from_class_scores(&self.tape.value(prob))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use approx::assert_abs_diff_eq;

    fn opinion(tape: &Tape, b: Vec<f64>, u: Vec<f64>, k: usize) -> (Var, Var) {
        let hw = u.len();
        let b = tape
            .leaf(Tensor::new(vec![k, 1, hw], b).unwrap(), false)
            .unwrap();
        let u = tape
            .leaf(Tensor::new(vec![1, hw], u).unwrap(), false)
            .unwrap();
        (b, u)
    }

    #[test]
    fn opposed_opinions_worked_example() {
        // b1 = (0.6, 0), u1 = 0.4 against b2 = (0, 0.6), u2 = 0.4:
        // C = 0.6 * 0.6 = 0.36, so each belief is 0.24 / 0.64 = 0.375 and
        // the fused uncertainty is 0.16 / 0.64 = 0.25.
        let tape = Tape::new();
        let (b1, u1) = opinion(&tape, vec![0.6, 0.0], vec![0.4], 2);
        let (b2, u2) = opinion(&tape, vec![0.0, 0.6], vec![0.4], 2);
        let fused = fuse(&tape, b1, u1, b2, u2).unwrap();
        assert_abs_diff_eq!(tape.value(fused.conflict()).data()[0], 0.36, epsilon = 1e-15);
        let b = tape.value(fused.belief());
        assert_abs_diff_eq!(b.data()[0], 0.375, epsilon = 1e-15);
        assert_abs_diff_eq!(b.data()[1], 0.375, epsilon = 1e-15);
        assert_abs_diff_eq!(tape.value(fused.uncertainty()).data()[0], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn partially_conflicting_opinions() {
        // b1 = (0.5, 0.1), u1 = 0.4 against b2 = (0.1, 0.5), u2 = 0.4:
        // C = 0.5 * 0.5 + 0.1 * 0.1 = 0.26 and the first fused mass is
        // (0.05 + 0.20 + 0.04) / 0.74.
        let tape = Tape::new();
        let (b1, u1) = opinion(&tape, vec![0.5, 0.1], vec![0.4], 2);
        let (b2, u2) = opinion(&tape, vec![0.1, 0.5], vec![0.4], 2);
        let fused = fuse(&tape, b1, u1, b2, u2).unwrap();
        assert_abs_diff_eq!(tape.value(fused.conflict()).data()[0], 0.26, epsilon = 1e-15);
        let b = tape.value(fused.belief());
        assert_abs_diff_eq!(b.data()[0], 0.29 / 0.74, epsilon = 1e-15);
        let u = tape.value(fused.uncertainty());
        assert_abs_diff_eq!(u.data()[0], 0.16 / 0.74, epsilon = 1e-15);
        let total = b.data()[0] + b.data()[1] + u.data()[0];
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn vacuous_opinion_is_identity() {
        let tape = Tape::new();
        let (b1, u1) = opinion(&tape, vec![0.3, 0.5], vec![0.2], 2);
        let (b2, u2) = opinion(&tape, vec![0.0, 0.0], vec![1.0], 2);
        let fused = fuse(&tape, b1, u1, b2, u2).unwrap();
        assert_abs_diff_eq!(tape.value(fused.conflict()).data()[0], 0.0, epsilon = 1e-15);
        let b = tape.value(fused.belief());
        assert_abs_diff_eq!(b.data()[0], 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(b.data()[1], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(tape.value(fused.uncertainty()).data()[0], 0.2, epsilon = 1e-15);
    }

    #[test]
    fn dirichlet_back_conversion_worked_example() {
        // Identical opinions b = (0.375, 0.375), u = 0.25 convert to
        // e = 2 * 0.375 / 0.25 = 3, S = 8, alpha = 4, p = 0.5.
        let tape = Tape::new();
        let (b1, u1) = opinion(&tape, vec![0.375, 0.375], vec![0.25], 2);
        let fused = mean_fuse(&tape, b1, u1, b1, u1).unwrap();
        let (e, s, a, p) = fused.dirichlet().unwrap();
        assert_abs_diff_eq!(tape.value(e).data()[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(tape.value(s).data()[0], 8.0, epsilon = 1e-12);
        assert_abs_diff_eq!(tape.value(a).data()[0], 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(tape.value(p).data()[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn mean_fusion_averages_probabilities() {
        let tape = Tape::new();
        let (b1, u1) = opinion(&tape, vec![0.7, 0.1], vec![0.2], 2);
        let (b2, u2) = opinion(&tape, vec![0.2, 0.3], vec![0.5], 2);
        let fused = mean_fuse(&tape, b1, u1, b2, u2).unwrap();
        let p = tape.value(fused.expected_prob().unwrap());
        // p1 = b1 + u1/2 = (0.8, 0.2), p2 = (0.45, 0.55); mean (0.625, 0.375)
        assert_abs_diff_eq!(p.data()[0], 0.625, epsilon = 1e-12);
        assert_abs_diff_eq!(p.data()[1], 0.375, epsilon = 1e-12);
    }

    #[test]
    fn total_conflict_is_a_degenerate_error() {
        let tape = Tape::new();
        let eps = 1e-13;
        let (b1, u1) = opinion(&tape, vec![1.0 - eps, 0.0], vec![eps], 2);
        let (b2, u2) = opinion(&tape, vec![0.0, 1.0 - eps], vec![eps], 2);
        assert!(matches!(
            fuse(&tape, b1, u1, b2, u2),
            Err(Error::DegenerateConflict { .. })
        ));
    }

    #[test]
    fn malformed_opinion_is_rejected() {
        let tape = Tape::new();
        let (b1, u1) = opinion(&tape, vec![0.9, 0.3], vec![0.2], 2);
        let (b2, u2) = opinion(&tape, vec![0.3, 0.5], vec![0.2], 2);
        assert!(fuse(&tape, b1, u1, b2, u2).is_err());
    }

    #[test]
    fn pseudo_labels_follow_fused_probability() {
        let tape = Tape::new();
        let (b1, u1) = opinion(&tape, vec![0.6, 0.1, 0.1, 0.2, 0.2, 0.4], vec![0.1, 0.3], 3);
        let fused = mean_fuse(&tape, b1, u1, b1, u1).unwrap();
        let labels = fused.hard_pseudo_labels().unwrap();
        assert_eq!(labels.data(), &[0, 2]);
    }
}
