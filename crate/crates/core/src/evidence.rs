//! Subjective-logic view of a classifier head: per-pixel evidence induces a
//! Dirichlet distribution whose belief masses and uncertainty sum to one.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Non-negative evidence over [K, H, W]. All derived quantities are
/// recomputed from the evidence node, so they can never disagree with it:
///   alpha = e + 1,  S = sum_k alpha_k,
///   belief = e / S,  uncertainty = K / S,  prob = alpha / S.
pub struct EvidenceMap<'t> {
    tape: &'t Tape,
    evidence: Var,
    num_classes: usize,
    alpha: Cell<Option<Var>>,
    strength: Cell<Option<Var>>,
    belief: Cell<Option<Var>>,
    uncertainty: Cell<Option<Var>>,
    prob: Cell<Option<Var>>,
}

fn check_class_map(tape: &Tape, v: Var, op: &'static str) -> Result<usize> {
    let shape = tape.shape(v);
    if shape.len() != 3 {
        return Err(Error::Domain {
            op,
            detail: format!("expected [K, H, W], got {shape:?}"),
        });
    }
    if shape[0] < 2 {
        return Err(Error::Domain {
            op,
            detail: format!("need at least 2 classes, got {}", shape[0]),
        });
    }
    Ok(shape[0])
}

impl<'t> EvidenceMap<'t> {
    /// Evidence from raw network outputs via softplus.
    pub fn from_logits(tape: &'t Tape, raw: Var) -> Result<Self> {
        let num_classes = check_class_map(tape, raw, "evidence_from_logits")?;
        let evidence = tape.softplus(raw)?;
        Ok(Self::wrap(tape, evidence, num_classes))
    }

    /// Wrap an existing non-negative evidence tensor.
    pub fn from_evidence(tape: &'t Tape, evidence: Var) -> Result<Self> {
        let num_classes = check_class_map(tape, evidence, "evidence_from_evidence")?;
        if tape.value(evidence).data().iter().any(|&v| v < 0.0) {
            return Err(Error::Domain {
                op: "evidence_from_evidence",
                detail: "negative evidence".into(),
            });
        }
        Ok(Self::wrap(tape, evidence, num_classes))
    }

    fn wrap(tape: &'t Tape, evidence: Var, num_classes: usize) -> Self {
        EvidenceMap {
            tape,
            evidence,
            num_classes,
            alpha: Cell::new(None),
            strength: Cell::new(None),
            belief: Cell::new(None),
            uncertainty: Cell::new(None),
            prob: Cell::new(None),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn evidence(&self) -> Var {
        self.evidence
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

    /// Dirichlet concentrations alpha = e + 1, entrywise >= 1.
    pub fn alpha(&self) -> Result<Var> {
        self.cached(&self.alpha, || self.tape.add_scalar(self.evidence, 1.0))
    }

    /// Dirichlet strength S = sum_k alpha_k, shaped [H, W].
    pub fn strength(&self) -> Result<Var> {
        self.cached(&self.strength, || {
            let alpha = self.alpha()?;
            self.tape.sum_axes(alpha, &[0])
        })
    }

    /// Belief mass b_k = e_k / S.
    pub fn belief(&self) -> Result<Var> {
        self.cached(&self.belief, || {
            let s = self.strength()?;
            self.tape.div(self.evidence, s)
        })
    }

    /// Vacuity u = K / S, shaped [H, W].
    pub fn uncertainty(&self) -> Result<Var> {
        self.cached(&self.uncertainty, || {
            let s = self.strength()?;
            let k = self.tape.scalar(self.num_classes as f64)?;
            self.tape.div(k, s)
        })
    }

    /// Expected class probability p_k = alpha_k / S.
    pub fn expected_prob(&self) -> Result<Var> {
        self.cached(&self.prob, || {
            let alpha = self.alpha()?;
            let s = self.strength()?;
            self.tape.div(alpha, s)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use approx::assert_abs_diff_eq;

    fn single_pixel(evidence: Vec<f64>) -> (Tape, Vec<f64>, Vec<f64>, f64, Vec<f64>) {
        let tape = Tape::new();
        let k = evidence.len();
        let e = tape
            .leaf(Tensor::new(vec![k, 1, 1], evidence).unwrap(), false)
            .unwrap();
        let ev = EvidenceMap::from_evidence(&tape, e).unwrap();
        let alpha = tape.value(ev.alpha().unwrap()).data().to_vec();
        let belief = tape.value(ev.belief().unwrap()).data().to_vec();
        let u = tape.value(ev.uncertainty().unwrap()).data()[0];
        let prob = tape.value(ev.expected_prob().unwrap()).data().to_vec();
        (tape, alpha, belief, u, prob)
    }

    #[test]
    fn four_class_single_pixel_worked_example() {
        // e = (3, 0, 0, 0): S = 7, b_0 = 3/7, u = 4/7, p = (4/7, 1/7, 1/7, 1/7).
        let (_tape, alpha, belief, u, prob) = single_pixel(vec![3.0, 0.0, 0.0, 0.0]);
        assert_eq!(alpha, vec![4.0, 1.0, 1.0, 1.0]);
        assert_abs_diff_eq!(belief[0], 3.0 / 7.0, epsilon = 1e-15);
        assert_abs_diff_eq!(belief[1], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(u, 4.0 / 7.0, epsilon = 1e-15);
        assert_abs_diff_eq!(prob[0], 4.0 / 7.0, epsilon = 1e-15);
        assert_abs_diff_eq!(prob[1], 1.0 / 7.0, epsilon = 1e-15);
    }

    #[test]
    fn zero_evidence_is_maximally_uncertain() {
        let (_tape, alpha, belief, u, prob) = single_pixel(vec![0.0; 4]);
        assert_eq!(alpha, vec![1.0; 4]);
        assert_eq!(belief, vec![0.0; 4]);
        assert_abs_diff_eq!(u, 1.0, epsilon = 1e-15);
        for p in prob {
            assert_abs_diff_eq!(p, 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn belief_and_uncertainty_sum_to_one() {
        let (_tape, _alpha, belief, u, prob) = single_pixel(vec![1.5, 0.25, 4.0, 0.0]);
        let total: f64 = belief.iter().sum::<f64>() + u;
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(prob.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_logits_give_log_two_evidence() {
        let tape = Tape::new();
        let raw = tape
            .leaf(Tensor::zeros(vec![4, 2, 2]), false)
            .unwrap();
        let ev = EvidenceMap::from_logits(&tape, raw).unwrap();
        let e = tape.value(ev.evidence());
        for &v in e.data() {
            assert_abs_diff_eq!(v, std::f64::consts::LN_2, epsilon = 1e-15);
        }
        let u = tape.value(ev.uncertainty().unwrap());
        for &v in u.data() {
            assert_abs_diff_eq!(v, 1.0 / (1.0 + std::f64::consts::LN_2), epsilon = 1e-15);
        }
    }

    #[test]
    fn negative_evidence_is_rejected() {
        let tape = Tape::new();
        let e = tape
            .leaf(Tensor::new(vec![2, 1, 1], vec![1.0, -0.5]).unwrap(), false)
            .unwrap();
        assert!(EvidenceMap::from_evidence(&tape, e).is_err());
    }
}
