//! Training objectives for scribble supervision: evidence losses restricted
//! to annotated pixels, Dice losses over full maps, and their combination.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evidence::EvidenceMap;
use crate::fusion::FusedOpinion;
use crate::labels::{one_hot_dense, LabelMap, ScribbleMask};
use crate::special::log_gamma;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Whether annotated-pixel losses divide by |omega_y| or keep the raw sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// Which pixels the consistency loss covers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EclScope {
    #[default]
    All,
    Unlabeled,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Annealing denominator for the evidence regularizer.
    pub beta: f64,
    /// Weight of the consistency term in the joint objective.
    pub lambda_u: f64,
    /// Current annealing step.
    pub step: usize,
    pub reduction: Reduction,
    pub ecl_scope: EclScope,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta: 10.0,
            lambda_u: 0.3,
            step: 0,
            reduction: Reduction::Mean,
            ecl_scope: EclScope::All,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta.is_nan() || self.beta <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if self.lambda_u.is_nan() || self.lambda_u < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "lambda_u must be nonnegative, got {}",
                self.lambda_u
            )));
        }
        Ok(())
    }

    /// Annealing coefficient min(1, t / beta).
    pub fn lambda_t(&self) -> f64 {
        (self.step as f64 / self.beta).min(1.0)
    }
}

const DICE_EPS: f64 = 1e-5;

/// Flat pixel indices of annotated positions, their one-hot classes [K, M],
/// and M itself.
fn annotated_selection(scribble: &ScribbleMask) -> Result<(Vec<usize>, Tensor)> {
    let sentinel = scribble.sentinel();
    let labels = scribble.labels().data();
    let indices: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != sentinel)
        .map(|(i, _)| i)
        .collect();
    if indices.is_empty() {
        return Err(Error::EmptyScribble);
    }
    let k = scribble.num_classes();
    let m = indices.len();
    let mut one_hot = vec![0.0; k * m];
    for (col, &i) in indices.iter().enumerate() {
        one_hot[labels[i] as usize * m + col] = 1.0;
    }
    Ok((indices, Tensor::new(vec![k, m], one_hot)?))
}

fn check_map_shape(
    op: &'static str,
    tape: &Tape,
    v: Var,
    scribble: &ScribbleMask,
) -> Result<()> {
    let shape = tape.shape(v);
    let want = [scribble.num_classes(), scribble.height(), scribble.width()];
    if shape != want {
        return Err(Error::ShapeMismatch {
            op,
            lhs: shape,
            rhs: want.to_vec(),
        });
    }
    Ok(())
}

fn reduce_annotated(tape: &Tape, total: Var, m: usize, reduction: Reduction) -> Result<Var> {
    match reduction {
        Reduction::Sum => Ok(total),
        Reduction::Mean => tape.scale(total, 1.0 / m as f64),
    }
}

/// Evidence-aware squared error over annotated pixels:
/// sum_j (y_j - p_j)^2 + p_j (1 - p_j) / (S + 1), the expected squared error
/// under the Dirichlet plus its variance.
pub fn partial_mse(
    tape: &Tape,
    prob: Var,
    strength: Var,
    scribble: &ScribbleMask,
    reduction: Reduction,
) -> Result<Var> {
    check_map_shape("partial_mse", tape, prob, scribble)?;
    let (indices, y) = annotated_selection(scribble)?;
    let m = indices.len();
    let p = tape.gather_pixels(prob, &indices)?;
    let s = tape.gather_pixels(strength, &indices)?;
    let y = tape.constant(y)?;

    let diff = tape.sub(y, p)?;
    let sq = tape.square(diff)?;
    let one_minus_p = tape.add_scalar(tape.neg(p)?, 1.0)?;
    let var_num = tape.mul(p, one_minus_p)?;
    let var = tape.div(var_num, tape.add_scalar(s, 1.0)?)?;
    let per = tape.add(sq, var)?;
    let total = tape.sum_all(per)?;
    reduce_annotated(tape, total, m, reduction)
}

/// KL(Dir(alpha_hat) || Dir(1)) over annotated pixels, where alpha_hat
/// removes the true-class concentration: alpha_hat = alpha (1 - y) + y.
pub fn partial_kl(
    tape: &Tape,
    alpha: Var,
    scribble: &ScribbleMask,
    reduction: Reduction,
) -> Result<Var> {
    check_map_shape("partial_kl", tape, alpha, scribble)?;
    if tape.value(alpha).data().iter().any(|&v| v < 1.0 - 1e-12) {
        return Err(Error::Domain {
            op: "partial_kl",
            detail: "alpha entries must be >= 1".into(),
        });
    }
    let (indices, y) = annotated_selection(scribble)?;
    let m = indices.len();
    let k = scribble.num_classes();
    let a = tape.gather_pixels(alpha, &indices)?;
    let y_keep = tape.constant(y.map(|v| 1.0 - v))?;
    let y_sel = tape.constant(y)?;

    // alpha_hat: true-class entry forced to exactly 1.
    let a_hat = tape.add(tape.mul(a, y_keep)?, y_sel)?;
    let s_hat = tape.sum_axes(a_hat, &[0])?;

    let lg_s = tape.lgamma(s_hat)?;
    let lg_a = tape.sum_axes(tape.lgamma(a_hat)?, &[0])?;
    let a_m1 = tape.add_scalar(a_hat, -1.0)?;
    let dg_diff = tape.sub(tape.digamma(a_hat)?, tape.digamma(s_hat)?)?;
    let cross = tape.sum_axes(tape.mul(a_m1, dg_diff)?, &[0])?;

    let ln_gamma_k = log_gamma(k as f64)?;
    let per_pixel = tape.add(tape.add_scalar(lg_s, -ln_gamma_k)?, tape.sub(cross, lg_a)?)?;
    let total = tape.sum_all(per_pixel)?;
    reduce_annotated(tape, total, m, reduction)
}

/// Annealed evidence loss: partial_mse + lambda_t * partial_kl.
pub fn partial_edl(
    tape: &Tape,
    prob: Var,
    strength: Var,
    alpha: Var,
    scribble: &ScribbleMask,
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let mse = partial_mse(tape, prob, strength, scribble, cfg.reduction)?;
    let lambda_t = cfg.lambda_t();
    if lambda_t == 0.0 {
        return Ok(mse);
    }
    let kl = partial_kl(tape, alpha, scribble, cfg.reduction)?;
    tape.add(mse, tape.scale(kl, lambda_t)?)
}

fn dice_loss_inner(
    tape: &Tape,
    pred: Var,
    target: &LabelMap,
    pixel_mask: Option<&[f64]>,
) -> Result<Var> {
    let shape = tape.shape(pred);
    if shape.len() != 3 || shape[1] != target.height() || shape[2] != target.width() {
        return Err(Error::ShapeMismatch {
            op: "dice_loss",
            lhs: shape,
            rhs: vec![target.height(), target.width()],
        });
    }
    let k = shape[0];
    let t = one_hot_dense(target, k)?;
    let (pred, t) = match pixel_mask {
        None => (pred, t),
        Some(mask) => {
            let (h, w) = (target.height(), target.width());
            let mask_t = Tensor::new(vec![h, w], mask.to_vec())?;
            let masked_t = {
                let mut data = t.data().to_vec();
                for c in 0..k {
                    for i in 0..h * w {
                        data[c * h * w + i] *= mask[i];
                    }
                }
                Tensor::new(vec![k, h, w], data)?
            };
            let mask_var = tape.constant(mask_t)?;
            (tape.mul(pred, mask_var)?, masked_t)
        }
    };
    let t_sums: Vec<f64> = {
        let (h, w) = (target.height(), target.width());
        (0..k)
            .map(|c| t.data()[c * h * w..(c + 1) * h * w].iter().sum())
            .collect()
    };
    let t_var = tape.constant(t)?;
    let t_sum_var = tape.constant(Tensor::new(vec![k], t_sums)?)?;

    let inter = tape.sum_axes(tape.mul(pred, t_var)?, &[1, 2])?;
    let p_sum = tape.sum_axes(pred, &[1, 2])?;
    let numer = tape.add_scalar(tape.scale(inter, 2.0)?, DICE_EPS)?;
    let denom = tape.add_scalar(tape.add(p_sum, t_sum_var)?, DICE_EPS)?;
    let dice = tape.div(numer, denom)?;
    let mean = tape.mean_axes(dice, &[0])?;
    tape.add_scalar(tape.neg(mean)?, 1.0)
}

/// Soft Dice loss of a probability map against hard labels, averaged over
/// all classes including background.
pub fn dice_loss(tape: &Tape, pred: Var, target: &LabelMap) -> Result<Var> {
    dice_loss_inner(tape, pred, target, None)
}

/// Mutual supervision of both branches by the fused hard pseudo labels:
/// 0.5 * (dice(p1, pseudo) + dice(p2, pseudo)). `scope` may restrict the
/// Dice sums to pixels the scribbles leave unlabeled.
pub fn consistency_loss(
    tape: &Tape,
    p1: Var,
    p2: Var,
    pseudo: &LabelMap,
    scope: EclScope,
    scribble: Option<&ScribbleMask>,
) -> Result<Var> {
    let mask_storage;
    let mask: Option<&[f64]> = match scope {
        EclScope::All => None,
        EclScope::Unlabeled => {
            let scribble = scribble.ok_or_else(|| {
                Error::InvalidConfig(
                    "consistency over unlabeled pixels requires the scribble mask".into(),
                )
            })?;
            mask_storage = scribble
                .indicator()
                .data()
                .iter()
                .map(|&v| 1.0 - v)
                .collect::<Vec<f64>>();
            Some(&mask_storage)
        }
    };
    let d1 = dice_loss_inner(tape, p1, pseudo, mask)?;
    let d2 = dice_loss_inner(tape, p2, pseudo, mask)?;
    tape.scale(tape.add(d1, d2)?, 0.5)
}

/// The three supervised evidence terms and the consistency term:
/// L_total = (1/3) sum of partial_edl over {branch1, branch2, fused} +
/// lambda_u * consistency.
pub struct JointLossTerms {
    pub total: Var,
    pub supervised: Var,
    pub consistency: Var,
    pub lambda_t: f64,
}

pub fn joint_loss<'t>(
    tape: &'t Tape,
    branch1: &EvidenceMap<'t>,
    branch2: &EvidenceMap<'t>,
    fused: &FusedOpinion<'t>,
    scribble: &ScribbleMask,
    pseudo: &LabelMap,
    cfg: &LossConfig,
) -> Result<JointLossTerms> {
    cfg.validate()?;
    let e1 = partial_edl(
        tape,
        branch1.expected_prob()?,
        branch1.strength()?,
        branch1.alpha()?,
        scribble,
        cfg,
    )?;
    let e2 = partial_edl(
        tape,
        branch2.expected_prob()?,
        branch2.strength()?,
        branch2.alpha()?,
        scribble,
        cfg,
    )?;
    let ef = partial_edl(
        tape,
        fused.expected_prob()?,
        fused.strength()?,
        fused.alpha()?,
        scribble,
        cfg,
    )?;
    let supervised = tape.scale(tape.add(tape.add(e1, e2)?, ef)?, 1.0 / 3.0)?;
    let consistency = consistency_loss(
        tape,
        branch1.expected_prob()?,
        branch2.expected_prob()?,
        pseudo,
        cfg.ecl_scope,
        Some(scribble),
    )?;
    let total = if cfg.lambda_u == 0.0 {
        supervised
    } else {
        tape.add(supervised, tape.scale(consistency, cfg.lambda_u)?)?
    };
    Ok(JointLossTerms {
        total,
        supervised,
        consistency,
        lambda_t: cfg.lambda_t(),
    })
}

/// Plain cross-entropy over annotated pixels, -ln p at the labeled class.
pub fn partial_cross_entropy(
    tape: &Tape,
    prob: Var,
    scribble: &ScribbleMask,
    reduction: Reduction,
) -> Result<Var> {
    check_map_shape("partial_cross_entropy", tape, prob, scribble)?;
    let (indices, y) = annotated_selection(scribble)?;
    let m = indices.len();
    let p = tape.gather_pixels(prob, &indices)?;
    {
        let pv = tape.value(p);
        let yd = y.data();
        if pv.data().iter().zip(yd).any(|(&pi, &yi)| yi > 0.0 && pi <= 0.0) {
            return Err(Error::Domain {
                op: "partial_cross_entropy",
                detail: "probability must be positive at labeled classes".into(),
            });
        }
    }
    let y_sel = tape.constant(y.clone())?;
    // Off-class entries are lifted to 1 before the log so only labeled
    // classes contribute; their gradient path is zeroed by the mask.
    let lifted = tape.add(tape.mul(p, y_sel)?, tape.constant(y.map(|v| 1.0 - v))?)?;
    let nll = tape.neg(tape.log(lifted)?)?;
    let total = tape.sum_all(nll)?;
    reduce_annotated(tape, total, m, reduction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::LabelMap;
    use approx::assert_abs_diff_eq;

    fn scribble_one_labeled(k: usize) -> ScribbleMask {
        // 1x2 grid: pixel 0 labeled class 0, pixel 1 unlabeled.
        let labels = LabelMap::new(1, 2, vec![0, k as u8]).unwrap();
        ScribbleMask::new(labels, k).unwrap()
    }

    fn eval(t: &Tape, v: Var) -> f64 {
        t.value(v).item().unwrap()
    }

    #[test]
    fn partial_mse_worked_example() {
        // K=2, one labeled pixel with y=(1,0), e=(1,0): alpha=(2,1), S=3,
        // p=(2/3,1/3), loss = 2/9 + (4/9)/4 = 1/3.
        let tape = Tape::new();
        let scrib = scribble_one_labeled(2);
        let p = tape
            .leaf(
                Tensor::new(vec![2, 1, 2], vec![2.0 / 3.0, 0.5, 1.0 / 3.0, 0.5]).unwrap(),
                true,
            )
            .unwrap();
        let s = tape
            .leaf(Tensor::new(vec![1, 2], vec![3.0, 2.0]).unwrap(), true)
            .unwrap();
        let loss = partial_mse(&tape, p, s, &scrib, Reduction::Mean).unwrap();
        assert_abs_diff_eq!(eval(&tape, loss), 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn partial_mse_ignores_unlabeled_pixels() {
        let tape = Tape::new();
        let scrib = scribble_one_labeled(2);
        let p1 = tape
            .leaf(
                Tensor::new(vec![2, 1, 2], vec![0.7, 0.9, 0.3, 0.1]).unwrap(),
                false,
            )
            .unwrap();
        let p2 = tape
            .leaf(
                Tensor::new(vec![2, 1, 2], vec![0.7, 0.05, 0.3, 0.95]).unwrap(),
                false,
            )
            .unwrap();
        let s = tape
            .leaf(Tensor::new(vec![1, 2], vec![4.0, 9.0]).unwrap(), false)
            .unwrap();
        let l1 = partial_mse(&tape, p1, s, &scrib, Reduction::Mean).unwrap();
        let l2 = partial_mse(&tape, p2, s, &scrib, Reduction::Mean).unwrap();
        assert_eq!(eval(&tape, l1), eval(&tape, l2));
    }

    #[test]
    fn partial_mse_vanishes_at_one_hot_limit() {
        let tape = Tape::new();
        let scrib = scribble_one_labeled(2);
        let p = tape
            .leaf(
                Tensor::new(vec![2, 1, 2], vec![1.0 - 1e-9, 0.5, 1e-9, 0.5]).unwrap(),
                false,
            )
            .unwrap();
        let s = tape
            .leaf(Tensor::new(vec![1, 2], vec![1e12, 2.0]).unwrap(), false)
            .unwrap();
        let loss = partial_mse(&tape, p, s, &scrib, Reduction::Mean).unwrap();
        assert!(eval(&tape, loss) < 1e-12);
    }

    #[test]
    fn empty_scribble_is_an_error() {
        let tape = Tape::new();
        let scrib = ScribbleMask::empty(1, 2, 2).unwrap();
        let p = tape
            .leaf(Tensor::full(vec![2, 1, 2], 0.5), false)
            .unwrap();
        let s = tape.leaf(Tensor::full(vec![1, 2], 2.0), false).unwrap();
        assert!(matches!(
            partial_mse(&tape, p, s, &scrib, Reduction::Mean),
            Err(Error::EmptyScribble)
        ));
    }

    #[test]
    fn partial_kl_worked_example() {
        // K=2, labeled class 0, alpha=(5,3): alpha_hat=(1,3),
        // KL = ln 3 - 2/3.
        let tape = Tape::new();
        let scrib = scribble_one_labeled(2);
        let alpha = tape
            .leaf(
                Tensor::new(vec![2, 1, 2], vec![5.0, 2.0, 3.0, 2.0]).unwrap(),
                true,
            )
            .unwrap();
        let loss = partial_kl(&tape, alpha, &scrib, Reduction::Mean).unwrap();
        assert_abs_diff_eq!(
            eval(&tape, loss),
            3.0f64.ln() - 2.0 / 3.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn partial_kl_zero_at_unit_alpha() {
        let tape = Tape::new();
        let scrib = scribble_one_labeled(3);
        let alpha = tape.leaf(Tensor::full(vec![3, 1, 2], 1.0), true).unwrap();
        let loss = partial_kl(&tape, alpha, &scrib, Reduction::Mean).unwrap();
        assert_abs_diff_eq!(eval(&tape, loss), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn partial_kl_rejects_alpha_below_one() {
        let tape = Tape::new();
        let scrib = scribble_one_labeled(2);
        let alpha = tape
            .leaf(Tensor::new(vec![2, 1, 2], vec![0.9, 2.0, 3.0, 2.0]).unwrap(), true)
            .unwrap();
        assert!(matches!(
            partial_kl(&tape, alpha, &scrib, Reduction::Mean),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn sum_reduction_scales_by_count() {
        let tape = Tape::new();
        let labels = LabelMap::new(1, 2, vec![0, 0]).unwrap();
        let scrib = ScribbleMask::new(labels, 2).unwrap();
        let p = tape
            .leaf(Tensor::new(vec![2, 1, 2], vec![0.6, 0.6, 0.4, 0.4]).unwrap(), false)
            .unwrap();
        let s = tape.leaf(Tensor::full(vec![1, 2], 5.0), false).unwrap();
        let mean = partial_mse(&tape, p, s, &scrib, Reduction::Mean).unwrap();
        let sum = partial_mse(&tape, p, s, &scrib, Reduction::Sum).unwrap();
        assert_abs_diff_eq!(eval(&tape, sum), 2.0 * eval(&tape, mean), epsilon = 1e-12);
    }

    #[test]
    fn lambda_t_anneals_and_clamps() {
        let mk = |step| LossConfig {
            beta: 10.0,
            step,
            ..LossConfig::default()
        };
        assert_eq!(mk(0).lambda_t(), 0.0);
        assert_eq!(mk(5).lambda_t(), 0.5);
        assert_eq!(mk(10).lambda_t(), 1.0);
        assert_eq!(mk(25).lambda_t(), 1.0);
    }

    #[test]
    fn partial_edl_at_step_zero_is_mse_alone() {
        let tape = Tape::new();
        let scrib = scribble_one_labeled(2);
        let p = tape
            .leaf(
                Tensor::new(vec![2, 1, 2], vec![2.0 / 3.0, 0.5, 1.0 / 3.0, 0.5]).unwrap(),
                true,
            )
            .unwrap();
        let s = tape
            .leaf(Tensor::new(vec![1, 2], vec![3.0, 2.0]).unwrap(), true)
            .unwrap();
        let alpha = tape
            .leaf(Tensor::new(vec![2, 1, 2], vec![2.0, 1.0, 1.0, 1.0]).unwrap(), true)
            .unwrap();
        let cfg = LossConfig {
            step: 0,
            ..LossConfig::default()
        };
        let loss = partial_edl(&tape, p, s, alpha, &scrib, &cfg).unwrap();
        assert_abs_diff_eq!(eval(&tape, loss), 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn dice_loss_of_perfect_prediction_is_tiny() {
        let tape = Tape::new();
        let target = LabelMap::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        let pred = tape
            .leaf(one_hot_dense(&target, 2).unwrap(), true)
            .unwrap();
        let loss = dice_loss(&tape, pred, &target).unwrap();
        assert!(eval(&tape, loss).abs() < 1e-4);
    }

    #[test]
    fn dice_loss_matches_direct_scan() {
        let tape = Tape::new();
        let target = LabelMap::new(2, 2, vec![0, 1, 1, 1]).unwrap();
        let pd = vec![0.8, 0.3, 0.4, 0.1, 0.2, 0.7, 0.6, 0.9];
        let pred = tape
            .leaf(Tensor::new(vec![2, 2, 2], pd.clone()).unwrap(), true)
            .unwrap();
        let loss = dice_loss(&tape, pred, &target).unwrap();

        let mut mean = 0.0;
        for c in 0..2 {
            let t: Vec<f64> = target
                .data()
                .iter()
                .map(|&v| if v as usize == c { 1.0 } else { 0.0 })
                .collect();
            let p = &pd[c * 4..(c + 1) * 4];
            let inter: f64 = p.iter().zip(&t).map(|(&a, &b)| a * b).sum();
            let dice = (2.0 * inter + DICE_EPS)
                / (p.iter().sum::<f64>() + t.iter().sum::<f64>() + DICE_EPS);
            mean += dice / 2.0;
        }
        assert_abs_diff_eq!(eval(&tape, loss), 1.0 - mean, epsilon = 1e-12);
    }

    #[test]
    fn consistency_is_symmetric_and_composes() {
        let tape = Tape::new();
        let pseudo = LabelMap::new(2, 2, vec![0, 1, 0, 1]).unwrap();
        let p1 = tape
            .leaf(
                Tensor::new(vec![2, 2, 2], vec![0.9, 0.2, 0.6, 0.4, 0.1, 0.8, 0.4, 0.6]).unwrap(),
                true,
            )
            .unwrap();
        let p2 = tape
            .leaf(
                Tensor::new(vec![2, 2, 2], vec![0.5, 0.3, 0.7, 0.2, 0.5, 0.7, 0.3, 0.8]).unwrap(),
                true,
            )
            .unwrap();
        let a = consistency_loss(&tape, p1, p2, &pseudo, EclScope::All, None).unwrap();
        let b = consistency_loss(&tape, p2, p1, &pseudo, EclScope::All, None).unwrap();
        assert_abs_diff_eq!(eval(&tape, a), eval(&tape, b), epsilon = 1e-15);

        let d1 = dice_loss(&tape, p1, &pseudo).unwrap();
        let d2 = dice_loss(&tape, p2, &pseudo).unwrap();
        assert_abs_diff_eq!(
            eval(&tape, a),
            0.5 * (eval(&tape, d1) + eval(&tape, d2)),
            epsilon = 1e-15
        );
    }

    #[test]
    fn consistency_of_exact_pseudo_is_near_zero() {
        let tape = Tape::new();
        let pseudo = LabelMap::new(2, 2, vec![1, 1, 0, 0]).unwrap();
        let one_hot = tape
            .leaf(one_hot_dense(&pseudo, 2).unwrap(), true)
            .unwrap();
        let loss =
            consistency_loss(&tape, one_hot, one_hot, &pseudo, EclScope::All, None).unwrap();
        assert!(eval(&tape, loss).abs() < 1e-4);
    }

    #[test]
    fn partial_cross_entropy_uniform_is_ln_k() {
        let tape = Tape::new();
        let scrib = scribble_one_labeled(4);
        let p = tape.leaf(Tensor::full(vec![4, 1, 2], 0.25), true).unwrap();
        let loss = partial_cross_entropy(&tape, p, &scrib, Reduction::Mean).unwrap();
        assert_abs_diff_eq!(eval(&tape, loss), 4.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn partial_cross_entropy_of_certain_prediction_is_zero() {
        let tape = Tape::new();
        let scrib = scribble_one_labeled(2);
        let p = tape
            .leaf(Tensor::new(vec![2, 1, 2], vec![1.0, 0.5, 0.0, 0.5]).unwrap(), true)
            .unwrap();
        let loss = partial_cross_entropy(&tape, p, &scrib, Reduction::Mean).unwrap();
        assert_abs_diff_eq!(eval(&tape, loss), 0.0, epsilon = 1e-15);
    }
}
