//! Minibatch training of any model against any loss in the zoo.

use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{augment_batch, AugmentConfig, DatasetBundle};
use crate::error::{Error, Result};
use crate::graph::{Bindings, Graph};
use crate::labels::{refine_rows, smooth_labels};
use crate::losses::{build_loss, prepare_inputs, LossId};
use crate::models::{build_forward, build_model, evaluate_accuracy, ModelSpec, TrainedModel};
use crate::optim::{Optimizer, OptimizerConfig, Schedule};
use crate::rng::{self, derive_seed};
use crate::tensor::Tensor;
use crate::theory::gradient_norm;

/// Which per-sample vector a target-consuming loss is trained against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Hard,
    Smoothed { alpha: f64 },
    Soft,
    Refined { alpha: f64, gamma: f64 },
    TeacherLogits,
}

impl fmt::Display for LabelSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelSource::Hard => f.write_str("hard"),
            LabelSource::Smoothed { alpha } => write!(f, "smoothed(alpha={alpha})"),
            LabelSource::Soft => f.write_str("soft"),
            LabelSource::Refined { alpha, gamma } => write!(f, "refined(alpha={alpha}, gamma={gamma})"),
            LabelSource::TeacherLogits => f.write_str("teacher_logits"),
        }
    }
}

fn uses_mse(loss: &LossId) -> bool {
    match loss {
        LossId::Mse => true,
        LossId::Combo { a, b, .. } => uses_mse(a) || uses_mse(b),
        _ => false,
    }
}

/// Rejects pairings that cannot work: distribution losses need non-negative
/// targets, so raw teacher logits are refused for them.
pub fn check_compatibility(loss: &LossId, source: &LabelSource) -> Result<()> {
    loss.validate()?;
    if loss.needs_distribution() && matches!(source, LabelSource::TeacherLogits) {
        return Err(Error::IncompatibleLabels {
            loss: loss.to_string(),
            labels: source.to_string(),
        });
    }
    Ok(())
}

/// The raw target matrix `loss` will see for `data` under `source`.
/// Distribution losses later rescale it to sum to 1, cosine L2-normalizes
/// it. A soft source for an MSE loss resolves to teacher logits when the
/// bundle carries them.
pub fn resolve_target(loss: &LossId, source: &LabelSource, data: &DatasetBundle) -> Result<Option<Tensor>> {
    check_compatibility(loss, source)?;
    if !loss.needs_target() {
        return Ok(None);
    }
    let soft = || {
        data.soft
            .as_ref()
            .ok_or_else(|| Error::IncompatibleLabels {
                loss: loss.to_string(),
                labels: format!("{source} (dataset has no soft labels)"),
            })
    };
    let t = match source {
        LabelSource::Hard => data.hard.values().clone(),
        LabelSource::Smoothed { alpha } => smooth_labels(&data.hard, *alpha)?.values().clone(),
        LabelSource::Soft => match (&data.teacher_logits, uses_mse(loss)) {
            (Some(logits), true) => logits.clone(),
            (None, true) => {
                log::warn!("no teacher logits for `{loss}`; regressing onto soft probabilities");
                soft()?.values().clone()
            }
            _ => soft()?.values().clone(),
        },
        LabelSource::Refined { alpha, gamma } => {
            let smoothed = smooth_labels(&data.hard, *alpha)?;
            refine_rows(smoothed.values(), soft()?.values(), *gamma)?
        }
        LabelSource::TeacherLogits => data.teacher_logits.clone().ok_or_else(|| Error::IncompatibleLabels {
            loss: loss.to_string(),
            labels: "teacher_logits (dataset has none)".into(),
        })?,
    };
    Ok(Some(t))
}

/// Batch size as a function of the number of training images.
pub fn batch_size_rule(num_images: usize) -> usize {
    match num_images {
        0..=10 => 10,
        11..=500 => 50,
        501..=20_000 => 100,
        _ => 200,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossId,
    pub source: LabelSource,
    pub optimizer: OptimizerConfig,
    pub schedule: Schedule,
    pub epochs: usize,
    /// `None` applies [`batch_size_rule`].
    pub batch_size: Option<usize>,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(loss: LossId, source: LabelSource, optimizer: OptimizerConfig, epochs: usize, seed: u64) -> Self {
        Self {
            loss,
            source,
            optimizer,
            schedule: Schedule::MultiStep,
            epochs,
            batch_size: None,
            augment: AugmentConfig::default(),
            seed,
        }
    }
}

/// Per-epoch training curves.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean minibatch loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Mean global gradient L2 norm per epoch.
    pub epoch_grad_norm: Vec<f64>,
    pub test_accuracy: Option<f64>,
}

/// Trains a copy of `model` on `data` and returns it with its curves.
/// `test`, when given, is scored after the last epoch.
pub fn train_model(
    model: &TrainedModel,
    data: &DatasetBundle,
    cfg: &TrainConfig,
    test: Option<&DatasetBundle>,
) -> Result<(TrainedModel, TrainLog)> {
    if data.is_empty() {
        return Err(Error::Empty(format!("training set `{}`", data.name)));
    }
    let target = resolve_target(&cfg.loss, &cfg.source, data)?;
    let inputs = prepare_inputs(&cfg.loss, Some(data.hard.values()), target.as_ref())?;
    let mut optimizer = Optimizer::new(cfg.optimizer)?;

    let mut graph = Graph::new();
    let logits = build_forward(&mut graph, &model.spec)?;
    let loss = build_loss(&mut graph, logits, &cfg.loss)?;
    graph.output("loss", loss);

    let n = data.len();
    let bs = cfg.batch_size.unwrap_or_else(|| batch_size_rule(n)).max(1);
    let augment = cfg.augment.is_enabled() && data.images.ndim() == 4;
    if cfg.augment.is_enabled() && !augment {
        log::info!("augmentation skipped: inputs of `{}` are not images", data.name);
    }
    let mut shuffle_rng = rng::rng(derive_seed(cfg.seed, "shuffle", &[]));
    let mut augment_rng = rng::rng(derive_seed(cfg.seed, "augment", &[]));

    let mut params = model.parameters.clone();
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr(epoch, cfg.epochs, cfg.optimizer.lr);
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut norm_sum, mut steps) = (0.0, 0.0, 0usize);
        for (step, idx) in order.chunks(bs).enumerate() {
            let mut x = data.images.select_rows(idx);
            if augment {
                x = augment_batch(&x, &cfg.augment, &mut augment_rng)?;
            }
            let batch_inputs: Vec<(&str, Tensor)> =
                inputs.iter().map(|(name, t)| (name.as_str(), t.select_rows(idx))).collect();
            let mut b = Bindings::new().with("x", &x);
            for (name, t) in &params {
                b.bind(name, t);
            }
            for (name, t) in &batch_inputs {
                b.bind(name, t);
            }
            let eval = match graph.evaluate_with_grad(&b, "loss") {
                Ok(e) => e,
                Err(Error::NonFinite(_)) => return Err(Error::NanLoss { epoch, step }),
                Err(e) => return Err(e),
            };
            let value = eval.scalar("loss")?;
            if !value.is_finite() {
                return Err(Error::NanLoss { epoch, step });
            }
            loss_sum += value;
            norm_sum += gradient_norm(&eval.param_grads);
            steps += 1;
            optimizer.step(&mut params, &eval.param_grads, lr)?;
        }
        log.epoch_loss.push(loss_sum / steps as f64);
        log.epoch_grad_norm.push(norm_sum / steps as f64);
    }

    let trained = TrainedModel {
        spec: model.spec.clone(),
        parameters: params,
    };
    if let Some(test) = test {
        log.test_accuracy = Some(evaluate_accuracy(&trained, test)?);
    }
    Ok((trained, log))
}

/// A model trained from scratch with cross-entropy on hard labels.
pub fn train_teacher(
    data: &DatasetBundle,
    spec: &ModelSpec,
    optimizer: &OptimizerConfig,
    epochs: usize,
    seed: u64,
) -> Result<TrainedModel> {
    let model = build_model(&spec.with_seed(derive_seed(seed, "teacher-init", &[])))?;
    let mut cfg = TrainConfig::new(LossId::Ce, LabelSource::Hard, *optimizer, epochs, seed);
    cfg.schedule = Schedule::Constant;
    let (teacher, _) = train_model(&model, data, &cfg, None)?;
    Ok(teacher)
}
