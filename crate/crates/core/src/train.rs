//! Minibatch SGD training of the dual-branch network.
//!
//! Each sample in a batch gets its own tape: forward both branches, convert
//! the raw outputs to evidence, fuse the branch opinions, build the joint
//! loss against the scribbles and the fused pseudo labels, and run backward.
//! Gradients are averaged over the batch and applied with momentum SGD.
//! Everything random (shuffling, augmentation, dropout) draws from streams
//! derived from the run seed, so a run is a pure function of its config and
//! dataset.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, ScribbleSample, Split};
use crate::error::{Error, Result};
use crate::evidence::EvidenceMap;
use crate::fusion::{self, FusedOpinion};
use crate::losses::{consistency_loss, joint_loss, partial_cross_entropy, LossConfig};
use crate::metrics;
use crate::net::{DualNet, NetConfig, Param};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Seed-stream tags; disjoint from the dataset generator's sample tag.
const SEED_TAG_SHUFFLE: u64 = 0x10;
const SEED_TAG_STEP: u64 = 0x11;

/// How the two branch opinions are combined into the fused prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionRule {
    /// Reduced Dempster combination of the belief masses.
    #[default]
    Dempster,
    /// Plain average of the expected probabilities (ablation surrogate).
    Mean,
}

/// Which supervised loss is applied to the annotated pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Evidential loss with the annealed Dirichlet regularizer.
    #[default]
    Edl,
    /// Partial cross-entropy on the expected probabilities (baseline).
    Ce,
}

/// What the annealing step counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnnealUnit {
    #[default]
    Epoch,
    Iteration,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Drives shuffling, augmentation, and dropout. Network initialization
    /// keeps its own seed in `net.seed`.
    pub seed: u64,
    pub fusion: FusionRule,
    pub loss: LossKind,
    pub anneal_unit: AnnealUnit,
    /// Random quarter turns and flips applied to each training sample.
    pub augment: bool,
    /// Loss weights; its `step` field is overwritten every batch.
    pub loss_config: LossConfig,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            learning_rate: 0.03,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            fusion: FusionRule::default(),
            loss: LossKind::default(),
            anneal_unit: AnnealUnit::default(),
            augment: true,
            loss_config: LossConfig::default(),
            net: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "weight_decay must be nonnegative and finite, got {}",
                self.weight_decay
            )));
        }
        self.loss_config.validate()?;
        self.net.validate()
    }
}

/// Loss averages and validation score for one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean supervised loss over the epoch's batches.
    pub supervised: f64,
    /// Mean consistency loss over the epoch's batches.
    pub consistency: f64,
    /// Mean total loss over the epoch's batches.
    pub total: f64,
    /// Annealing coefficient at the epoch's last batch.
    pub lambda_t: f64,
    /// Mean foreground Dice on the validation split, absent when the
    /// dataset has no validation samples.
    pub val_dice: Option<f64>,
    pub seconds: f64,
}

/// Everything a finished run reports: the config it ran under, per-epoch
/// losses and validation scores, and which epoch's weights were kept.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights the returned network carries (highest validation
    /// Dice, ties to the earliest). Absent without a validation split; the
    /// final weights are kept then.
    pub best_epoch: Option<usize>,
    pub best_val_dice: Option<f64>,
    pub seconds: f64,
    /// Filled by the caller once the weights are written out.
    pub checkpoint: Option<PathBuf>,
}

/// One momentum-SGD update, in place:
/// v <- momentum * v + (grad + weight_decay * param);
/// param <- param - lr * v.
pub fn sgd_step(
    params: &mut [Param],
    velocity: &mut [Tensor],
    grads: &[Tensor],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::ShapeMismatch {
            op: "sgd_step",
            lhs: vec![params.len(), velocity.len()],
            rhs: vec![grads.len()],
        });
    }
    for ((param, vel), grad) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        if param.value.shape() != grad.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                lhs: param.value.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        let p = param.value.data();
        let v = vel.data();
        let g = grad.data();
        let mut new_v = Vec::with_capacity(p.len());
        let mut new_p = Vec::with_capacity(p.len());
        let mut finite = true;
        for i in 0..p.len() {
            let vi = momentum * v[i] + (g[i] + weight_decay * p[i]);
            let pi = p[i] - lr * vi;
            finite &= vi.is_finite() && pi.is_finite();
            new_v.push(vi);
            new_p.push(pi);
        }
        if !finite {
            return Err(Error::NonFinite { op: "sgd_step" });
        }
        let shape = param.value.shape().to_vec();
        *vel = Tensor::new(shape.clone(), new_v)?;
        param.value = Tensor::new(shape, new_p)?;
    }
    Ok(())
}

/// Numeric failures inside a batch become divergence reports carrying the
/// epoch and batch they surfaced in; everything else passes through.
fn diverged(epoch: usize, batch: usize, err: Error) -> Error {
    match err {
        Error::NonFinite { .. }
        | Error::DegenerateConflict { .. }
        | Error::DegenerateCertainty { .. } => Error::Diverged {
            epoch,
            batch,
            detail: err.to_string(),
        },
        other => other,
    }
}

/// Scalar loss terms of one sample, plus the tape variable to run backward
/// on.
struct SampleLoss {
    total: Var,
    supervised_value: f64,
    consistency_value: f64,
    total_value: f64,
    lambda_t: f64,
}

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v).data()[0]
}

/// Forward one sample through both branches and assemble the configured
/// loss on the tape the network is bound to.
fn sample_loss(
    tape: &Tape,
    bound: &crate::net::BoundNet,
    sample: &ScribbleSample,
    cfg: &TrainConfig,
    step_cfg: &LossConfig,
    rng: &mut impl rand::Rng,
) -> Result<SampleLoss> {
    let out = bound.forward(&sample.image, true, rng)?;
    let em1 = EvidenceMap::from_logits(tape, out.raw1)?;
    let em2 = EvidenceMap::from_logits(tape, out.raw2)?;
    let fused: FusedOpinion = match cfg.fusion {
        FusionRule::Dempster => fusion::fuse(
            tape,
            em1.belief()?,
            em1.uncertainty()?,
            em2.belief()?,
            em2.uncertainty()?,
        )?,
        FusionRule::Mean => fusion::mean_fuse(
            tape,
            em1.belief()?,
            em1.uncertainty()?,
            em2.belief()?,
            em2.uncertainty()?,
        )?,
    };
    let pseudo = fused.hard_pseudo_labels()?;

    match cfg.loss {
        LossKind::Edl => {
            let terms = joint_loss(
                tape,
                &em1,
                &em2,
                &fused,
                &sample.scribble,
                &pseudo,
                step_cfg,
            )?;
            Ok(SampleLoss {
                total: terms.total,
                supervised_value: scalar(tape, terms.supervised),
                consistency_value: scalar(tape, terms.consistency),
                total_value: scalar(tape, terms.total),
                lambda_t: terms.lambda_t,
            })
        }
        LossKind::Ce => {
            let p1 = em1.expected_prob()?;
            let p2 = em2.expected_prob()?;
            let pf = fused.expected_prob()?;
            let c1 = partial_cross_entropy(tape, p1, &sample.scribble, step_cfg.reduction)?;
            let c2 = partial_cross_entropy(tape, p2, &sample.scribble, step_cfg.reduction)?;
            let cf = partial_cross_entropy(tape, pf, &sample.scribble, step_cfg.reduction)?;
            let supervised = tape.scale(tape.add(tape.add(c1, c2)?, cf)?, 1.0 / 3.0)?;
            let consistency = consistency_loss(
                tape,
                p1,
                p2,
                &pseudo,
                step_cfg.ecl_scope,
                Some(&sample.scribble),
            )?;
            let total = tape.add(
                supervised,
                tape.scale(consistency, step_cfg.lambda_u)?,
            )?;
            Ok(SampleLoss {
                total,
                supervised_value: scalar(tape, supervised),
                consistency_value: scalar(tape, consistency),
                total_value: scalar(tape, total),
                lambda_t: step_cfg.lambda_t(),
            })
        }
    }
}

/// Mean foreground Dice of branch-1 predictions over a sample set.
fn mean_dice(net: &DualNet, samples: &[&ScribbleSample]) -> Result<Option<f64>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let k = net.config().num_classes;
    let mut acc = 0.0;
    for sample in samples {
        let inference = net.inference(&sample.image)?;
        let scores = metrics::dice_scores(&inference.labels, &sample.mask, k)?;
        acc += scores.iter().sum::<f64>() / scores.len() as f64;
    }
    Ok(Some(acc / samples.len() as f64))
}

/// Train a fresh network on the dataset's train split, validating on its
/// val split after every epoch. The returned network carries the weights of
/// the best validation epoch; without validation samples it keeps the final
/// weights. Deterministic given the config (including `net.seed`) and the
/// dataset.
pub fn train(cfg: &TrainConfig, dataset: &Dataset) -> Result<(DualNet, RunRecord)> {
    cfg.validate()?;
    let manifest = dataset.manifest();
    if manifest.num_classes != cfg.net.num_classes {
        return Err(Error::ConfigMismatch(format!(
            "dataset has {} classes but the network is configured for {}",
            manifest.num_classes, cfg.net.num_classes
        )));
    }
    let train_samples = dataset.split(Split::Train);
    if train_samples.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let val_samples = dataset.split(Split::Val);

    let mut net = DualNet::new(cfg.net.clone())?;
    let mut velocity: Vec<Tensor> = net
        .params()
        .iter()
        .map(|p| Tensor::zeros(p.value.shape().to_vec()))
        .collect();

    let run_start = Instant::now();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<Param>)> = None;
    let mut iteration = 0usize;

    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        order.shuffle(&mut rng::derive_rng(
            cfg.seed,
            &[SEED_TAG_SHUFFLE, epoch as u64],
        ));

        let mut supervised_sum = 0.0;
        let mut consistency_sum = 0.0;
        let mut total_sum = 0.0;
        let mut lambda_t = 0.0;
        let batch_count = order.len().div_ceil(cfg.batch_size);

        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let step = match cfg.anneal_unit {
                AnnealUnit::Epoch => epoch,
                AnnealUnit::Iteration => iteration,
            };
            let step_cfg = LossConfig {
                step,
                ..cfg.loss_config
            };

            let mut grad_acc: Vec<Vec<f64>> = net
                .params()
                .iter()
                .map(|p| vec![0.0; p.value.numel()])
                .collect();
            let mut batch_supervised = 0.0;
            let mut batch_consistency = 0.0;
            let mut batch_total = 0.0;

            for (slot, &idx) in batch.iter().enumerate() {
                let mut stream = rng::derive_rng(
                    cfg.seed,
                    &[SEED_TAG_STEP, epoch as u64, batch_idx as u64, slot as u64],
                );
                let sample = if cfg.augment {
                    data::augment(train_samples[idx], &mut stream)
                } else {
                    train_samples[idx].clone()
                };

                let tape = Tape::new();
                let bound = net.bind(&tape, true)?;
                let loss = sample_loss(&tape, &bound, &sample, cfg, &step_cfg, &mut stream)
                    .map_err(|e| diverged(epoch, batch_idx, e))?;
                tape.backward(loss.total)
                    .map_err(|e| diverged(epoch, batch_idx, e))?;

                for (var, acc) in bound.vars().iter().zip(grad_acc.iter_mut()) {
                    let grad = tape.grad(*var).ok_or(Error::Domain {
                        op: "train",
                        detail: "a parameter received no gradient".into(),
                    })?;
                    for (a, g) in acc.iter_mut().zip(grad.data()) {
                        *a += g;
                    }
                }
                batch_supervised += loss.supervised_value;
                batch_consistency += loss.consistency_value;
                batch_total += loss.total_value;
                lambda_t = loss.lambda_t;
            }

            let scale = 1.0 / batch.len() as f64;
            let grads: Vec<Tensor> = grad_acc
                .into_iter()
                .zip(net.params())
                .map(|(mut acc, p)| {
                    for a in acc.iter_mut() {
                        *a *= scale;
                    }
                    Tensor::new(p.value.shape().to_vec(), acc)
                })
                .collect::<Result<_>>()?;
            sgd_step(
                net.params_mut(),
                &mut velocity,
                &grads,
                cfg.learning_rate,
                cfg.momentum,
                cfg.weight_decay,
            )
            .map_err(|e| diverged(epoch, batch_idx, e))?;

            supervised_sum += batch_supervised * scale;
            consistency_sum += batch_consistency * scale;
            total_sum += batch_total * scale;
            iteration += 1;
        }

        let val_dice = mean_dice(&net, &val_samples)?;
        if let Some(score) = val_dice {
            let improved = match &best {
                Some((best_score, _, _)) => score > *best_score,
                None => true,
            };
            if improved {
                best = Some((score, epoch, net.params().to_vec()));
            }
        }

        records.push(EpochRecord {
            epoch,
            supervised: supervised_sum / batch_count as f64,
            consistency: consistency_sum / batch_count as f64,
            total: total_sum / batch_count as f64,
            lambda_t,
            val_dice,
            seconds: epoch_start.elapsed().as_secs_f64(),
        });
    }

    let (best_epoch, best_val_dice) = match best {
        Some((score, epoch, params)) => {
            for (slot, param) in net.params_mut().iter_mut().zip(params) {
                slot.value = param.value;
            }
            (Some(epoch), Some(score))
        }
        None => (None, None),
    };

    let record = RunRecord {
        config: cfg.clone(),
        epochs: records,
        best_epoch,
        best_val_dice,
        seconds: run_start.elapsed().as_secs_f64(),
        checkpoint: None,
    };
    Ok((net, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GeneratorConfig};

    fn param(name: &str, values: &[f64]) -> Param {
        Param {
            name: name.into(),
            value: Tensor::new(vec![values.len()], values.to_vec()).unwrap(),
        }
    }

    fn zeros(n: usize) -> Tensor {
        Tensor::zeros(vec![n])
    }

    #[test]
    fn sgd_without_momentum_is_plain_gradient_descent() {
        let mut params = vec![param("w", &[1.0, -2.0])];
        let mut velocity = vec![zeros(2)];
        let grads = vec![Tensor::new(vec![2], vec![0.5, 1.0]).unwrap()];
        sgd_step(&mut params, &mut velocity, &grads, 0.1, 0.0, 0.0).unwrap();
        let w = params[0].value.data();
        assert_eq!(w, &[1.0 - 0.05, -2.0 - 0.1]);
    }

    #[test]
    fn sgd_matches_the_hand_worked_recursion() {
        // grad = w each step, lr 0.1, momentum 0.9:
        // v1 = 1, w1 = 0.9; v2 = 0.9 + 0.9 = 1.8, w2 = 0.9 - 0.18 = 0.72.
        let mut params = vec![param("w", &[1.0])];
        let mut velocity = vec![zeros(1)];
        let g1 = vec![params[0].value.clone()];
        sgd_step(&mut params, &mut velocity, &g1, 0.1, 0.9, 0.0).unwrap();
        assert!((params[0].value.data()[0] - 0.9).abs() < 1e-15);
        let g2 = vec![params[0].value.clone()];
        sgd_step(&mut params, &mut velocity, &g2, 0.1, 0.9, 0.0).unwrap();
        assert!((params[0].value.data()[0] - 0.72).abs() < 1e-15);

        // Same first step with weight decay 0.1: v = 1 + 0.1, w = 1 - 0.11.
        let mut params = vec![param("w", &[1.0])];
        let mut velocity = vec![zeros(1)];
        let g = vec![Tensor::new(vec![1], vec![1.0]).unwrap()];
        sgd_step(&mut params, &mut velocity, &g, 0.1, 0.9, 0.1).unwrap();
        assert!((params[0].value.data()[0] - 0.89).abs() < 1e-15);
    }

    #[test]
    fn sgd_velocity_decays_geometrically_without_gradient() {
        let mut params = vec![param("w", &[0.0])];
        let mut velocity = vec![Tensor::new(vec![1], vec![1.0]).unwrap()];
        let g = vec![zeros(1)];
        sgd_step(&mut params, &mut velocity, &g, 1.0, 0.5, 0.0).unwrap();
        sgd_step(&mut params, &mut velocity, &g, 1.0, 0.5, 0.0).unwrap();
        assert!((velocity[0].data()[0] - 0.25).abs() < 1e-15);
        assert!((params[0].value.data()[0] + 0.75).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_mismatched_slices() {
        let mut params = vec![param("w", &[1.0])];
        let mut velocity = vec![zeros(1)];
        let err = sgd_step(&mut params, &mut velocity, &[], 0.1, 0.9, 0.0).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { op: "sgd_step", .. }));

        let grads = vec![zeros(2)];
        let err = sgd_step(&mut params, &mut velocity, &grads, 0.1, 0.9, 0.0).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { op: "sgd_step", .. }));
    }

    #[test]
    fn sgd_flags_overflowing_updates() {
        let mut params = vec![param("w", &[1e300])];
        let mut velocity = vec![zeros(1)];
        let grads = vec![Tensor::new(vec![1], vec![1e300]).unwrap()];
        let err = sgd_step(&mut params, &mut velocity, &grads, 1e10, 0.0, 0.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "sgd_step" }));
    }

    fn tiny_dataset() -> Dataset {
        generate(&GeneratorConfig {
            n_samples: 8,
            height: 16,
            width: 16,
            ..GeneratorConfig::default()
        })
        .unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 0.01,
            net: NetConfig {
                base_width: 4,
                depth: 2,
                ..NetConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic_and_fills_the_record() {
        let dataset = tiny_dataset();
        let cfg = tiny_config();
        let (net_a, rec_a) = train(&cfg, &dataset).unwrap();
        let (net_b, rec_b) = train(&cfg, &dataset).unwrap();

        assert_eq!(rec_a.epochs.len(), 2);
        for (ra, rb) in rec_a.epochs.iter().zip(&rec_b.epochs) {
            assert_eq!(ra.supervised, rb.supervised);
            assert_eq!(ra.consistency, rb.consistency);
            assert_eq!(ra.total, rb.total);
            assert_eq!(ra.lambda_t, rb.lambda_t);
            assert_eq!(ra.val_dice, rb.val_dice);
            assert!(ra.total.is_finite());
            assert!(ra.supervised >= 0.0 || ra.supervised.is_finite());
        }
        assert_eq!(rec_a.best_epoch, rec_b.best_epoch);
        assert_eq!(rec_a.best_val_dice, rec_b.best_val_dice);
        for (pa, pb) in net_a.params().iter().zip(net_b.params()) {
            assert_eq!(pa.value.data(), pb.value.data());
        }

        // The kept weights score exactly the best recorded validation Dice.
        let best = rec_a
            .epochs
            .iter()
            .filter_map(|r| r.val_dice)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(rec_a.best_val_dice, Some(best));
        let val = tiny_dataset();
        let val_samples = val.split(Split::Val);
        let rescored = mean_dice(&net_a, &val_samples).unwrap().unwrap();
        assert!((rescored - best).abs() < 1e-12);
    }

    #[test]
    fn annealing_follows_the_epoch_counter() {
        let dataset = tiny_dataset();
        let mut cfg = tiny_config();
        cfg.loss_config.beta = 2.0;
        let (_, record) = train(&cfg, &dataset).unwrap();
        assert_eq!(record.epochs[0].lambda_t, 0.0);
        assert_eq!(record.epochs[1].lambda_t, 0.5);

        cfg.anneal_unit = AnnealUnit::Iteration;
        cfg.epochs = 1;
        let (_, record) = train(&cfg, &dataset).unwrap();
        // 6 train samples, batch 4: the second (last) batch is iteration 1.
        assert_eq!(record.epochs[0].lambda_t, 0.5);
    }

    #[test]
    fn baseline_variant_trains_with_ce_and_mean_fusion() {
        let dataset = tiny_dataset();
        let mut cfg = tiny_config();
        cfg.epochs = 1;
        cfg.loss = LossKind::Ce;
        cfg.fusion = FusionRule::Mean;
        let (_, record) = train(&cfg, &dataset).unwrap();
        let row = &record.epochs[0];
        assert!(row.total.is_finite());
        assert!(row.supervised > 0.0);
        assert!(row.consistency >= 0.0);
        assert!(row.val_dice.unwrap().is_finite());
    }

    #[test]
    fn runaway_updates_abort_with_epoch_and_batch_context() {
        let dataset = tiny_dataset();
        let mut cfg = tiny_config();
        cfg.learning_rate = 1.0;
        cfg.weight_decay = 1e160;
        let err = train(&cfg, &dataset).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn config_validation_rejects_bad_rates() {
        let dataset = tiny_dataset();
        for f in [
            |c: &mut TrainConfig| c.learning_rate = 0.0,
            |c: &mut TrainConfig| c.momentum = 1.0,
            |c: &mut TrainConfig| c.weight_decay = -1.0,
            |c: &mut TrainConfig| c.epochs = 0,
            |c: &mut TrainConfig| c.batch_size = 0,
        ] {
            let mut cfg = tiny_config();
            f(&mut cfg);
            let err = train(&cfg, &dataset).unwrap_err();
            assert!(matches!(err, Error::InvalidConfig(_)));
        }
    }

    #[test]
    fn class_count_disagreement_is_rejected() {
        let dataset = tiny_dataset();
        let mut cfg = tiny_config();
        cfg.net.num_classes = 3;
        let err = train(&cfg, &dataset).unwrap_err();
        assert!(matches!(err, Error::ConfigMismatch(_)));
    }
}
