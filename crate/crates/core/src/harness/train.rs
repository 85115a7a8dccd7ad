//! Three-stage training with per-stage parameter freezing and early stopping.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{ade, fde};
use crate::data::TrajectorySample;
use crate::error::{GtpError, Result};
use crate::model::{Batch, GtpConfig, GtpModel};
use crate::tensor::{clip_global_norm, Adam, AdamConfig, ParamId, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    /// Goal loss; only the goal channel moves.
    Goal,
    /// Trajectory loss; only the trajectory channel moves.
    Trajectory,
    /// Trajectory loss; everything moves.
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub kind: StageKind,
    pub epochs: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub stages: [StageSpec; 3],
    pub batch_size: usize,
    pub clip_norm: f64,
    pub val_fraction: f64,
    pub patience: usize,
    pub seed: u64,
}

impl TrainPlan {
    pub fn from_config(cfg: &GtpConfig) -> Self {
        let [e1, e2, e3] = cfg.stage_epochs;
        TrainPlan {
            stages: [
                StageSpec {
                    kind: StageKind::Goal,
                    epochs: if cfg.goal_stage_enabled() { e1 } else { 0 },
                    lr: cfg.lr,
                },
                StageSpec {
                    kind: StageKind::Trajectory,
                    epochs: e2,
                    lr: cfg.lr,
                },
                StageSpec {
                    kind: StageKind::Joint,
                    epochs: e3,
                    lr: cfg.lr * cfg.stage3_lr_scale,
                },
            ],
            batch_size: cfg.batch_size,
            clip_norm: cfg.clip_norm,
            val_fraction: cfg.val_fraction,
            patience: cfg.patience,
            seed: cfg.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: usize,
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation goal NLL in stage 1, validation ADE (m) afterwards.
    pub val_metric: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    pub kind: StageKind,
    pub ran: bool,
    pub epochs_run: usize,
    pub final_train_loss: Option<f64>,
    pub best_val: Option<f64>,
    pub goal_checksum: u64,
    pub trajectory_checksum: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: GtpModel,
    pub curves: Vec<EpochRecord>,
    pub stages: Vec<StageSummary>,
    pub initial_goal_checksum: u64,
    pub initial_trajectory_checksum: u64,
    pub train_count: usize,
    pub val_count: usize,
}

/// Splits sample indices into (train, validation), deterministically per seed.
pub fn holdout(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7a1d));
    let n_val = ((n as f64 * fraction).round() as usize).min(n.saturating_sub(1));
    let val = idx[..n_val].to_vec();
    (idx[n_val..].to_vec(), val)
}

/// Minibatches of equal `n_dest`, shuffled.
fn minibatches(indices: &[usize], samples: &[TrajectorySample], size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    order.shuffle(rng);
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in order {
        buckets.entry(samples[i].n_dest()).or_default().push(i);
    }
    let mut batches: Vec<Vec<usize>> = buckets
        .values()
        .flat_map(|b| b.chunks(size).map(<[usize]>::to_vec))
        .collect();
    batches.shuffle(rng);
    batches
}

/// Deterministic evaluation batches of equal `n_dest`, in input order.
pub(crate) fn eval_batches(samples: &[&TrajectorySample], size: usize) -> Vec<Vec<usize>> {
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        buckets.entry(s.n_dest()).or_default().push(i);
    }
    buckets
        .values()
        .flat_map(|b| b.chunks(size).map(<[usize]>::to_vec))
        .collect()
}

/// Per-sample world-frame `(ade, fde)`, in input order.
pub fn sample_errors(model: &GtpModel, samples: &[&TrajectorySample]) -> Result<Vec<(f64, f64)>> {
    let mut out = vec![(0.0, 0.0); samples.len()];
    for batch in eval_batches(samples, 256) {
        let refs: Vec<&TrajectorySample> = batch.iter().map(|&i| samples[i]).collect();
        let preds = model.predict_batch(&refs)?;
        for (&i, p) in batch.iter().zip(preds) {
            let truth = samples[i].future_world();
            out[i] = (ade(&p.predicted, &truth)?, fde(&p.predicted, &truth)?);
        }
    }
    Ok(out)
}

/// Fraction of samples whose highest-ranked destination is the true goal.
pub fn goal_accuracy(model: &GtpModel, samples: &[&TrajectorySample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(GtpError::contract("goal accuracy of no samples"));
    }
    let mut hits = 0usize;
    for batch in eval_batches(samples, 256) {
        let refs: Vec<&TrajectorySample> = batch.iter().map(|&i| samples[i]).collect();
        for (s, r) in refs.iter().zip(model.rank_batch(&refs)?) {
            let best = r
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i + 1);
            hits += usize::from(best == Some(s.goal));
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

fn goal_nll(model: &GtpModel, samples: &[&TrajectorySample]) -> Result<f64> {
    let mut total = 0.0;
    for batch in eval_batches(samples, 256) {
        let refs: Vec<&TrajectorySample> = batch.iter().map(|&i| samples[i]).collect();
        for (s, r) in refs.iter().zip(model.rank_batch(&refs)?) {
            total += crate::model::goal_loss(&r, s.goal)?;
        }
    }
    Ok(total / samples.len() as f64)
}

fn mean_ade(model: &GtpModel, samples: &[&TrajectorySample]) -> Result<f64> {
    let errs = sample_errors(model, samples)?;
    Ok(errs.iter().map(|e| e.0).sum::<f64>() / errs.len() as f64)
}

/// Loss and gradients of one minibatch.
fn batch_step(model: &GtpModel, kind: StageKind, batch: &Batch) -> Result<(f64, crate::tensor::Gradients)> {
    let mut t = Tape::new(model.params());
    let loss = match kind {
        StageKind::Goal => {
            let r = model.goal_forward(&mut t, batch)?;
            GtpModel::goal_loss(&mut t, r, batch.goals())?
        }
        _ => {
            let f = model.forward(&mut t, batch, model.config().t_pred)?;
            model.trajectory_loss(&mut t, &f.predictions, batch)?
        }
    };
    let value = t.value(loss).data()[0];
    if !value.is_finite() {
        return Err(GtpError::NonFinite {
            context: "loss".into(),
        });
    }
    Ok((value, t.backward(loss)?))
}

/// Runs the three stages in order on `samples` (all with `t_pred` futures).
pub fn train(plan: &TrainPlan, mut model: GtpModel, samples: &[TrajectorySample]) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(GtpError::contract("no training samples"));
    }
    let t_pred = model.config().t_pred;
    if let Some(s) = samples.iter().find(|s| s.future.len() != t_pred) {
        return Err(GtpError::contract(format!(
            "sample future has {} steps, model predicts {t_pred}",
            s.future.len()
        )));
    }
    let (train_idx, val_idx) = holdout(samples.len(), plan.val_fraction, plan.seed);
    let val: Vec<&TrajectorySample> = val_idx.iter().map(|&i| &samples[i]).collect();
    let goal_ids = model.goal_channel_ids();
    let traj_ids = model.trajectory_channel_ids();
    let all_ids: Vec<ParamId> = model.params().ids().collect();
    let initial_goal_checksum = model.params().checksum(&goal_ids);
    let initial_trajectory_checksum = model.params().checksum(&traj_ids);
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed.wrapping_add(1));
    let mut curves = Vec::new();
    let mut stages = Vec::new();

    for (si, spec) in plan.stages.iter().enumerate() {
        let stage = si + 1;
        let ids = match spec.kind {
            StageKind::Goal => &goal_ids,
            StageKind::Trajectory => &traj_ids,
            StageKind::Joint => &all_ids,
        };
        let mut summary = StageSummary {
            stage,
            kind: spec.kind,
            ran: false,
            epochs_run: 0,
            final_train_loss: None,
            best_val: None,
            goal_checksum: 0,
            trajectory_checksum: 0,
        };
        if spec.epochs > 0 && !ids.is_empty() {
            summary.ran = true;
            let mask = model.mask(ids);
            let mut adam = Adam::new(
                model.params(),
                AdamConfig {
                    lr: spec.lr,
                    ..AdamConfig::default()
                },
            );
            let mut best: Option<(f64, crate::tensor::ParamStore)> = None;
            let mut stale = 0usize;
            for epoch in 1..=spec.epochs {
                let diverged = |loss: f64| GtpError::Divergence { stage, epoch, loss };
                let mut loss_sum = 0.0;
                let mut seen = 0usize;
                for idx in minibatches(&train_idx, samples, plan.batch_size, &mut rng) {
                    let refs: Vec<&TrajectorySample> = idx.iter().map(|&i| &samples[i]).collect();
                    let batch = Batch::new(&refs, model.config())?;
                    let (loss, mut grads) = batch_step(&model, spec.kind, &batch)
                        .map_err(|e| if e.is_numeric() { diverged(f64::NAN) } else { e })?;
                    clip_global_norm(&mut grads, &mask, plan.clip_norm);
                    adam.step(model.params_mut(), &grads, &mask)?;
                    loss_sum += loss * batch.size as f64;
                    seen += batch.size;
                }
                let train_loss = loss_sum / seen as f64;
                if !train_loss.is_finite() || !model.params().all_finite() {
                    return Err(diverged(train_loss));
                }
                let val_metric = if val.is_empty() {
                    None
                } else {
                    let v = match spec.kind {
                        StageKind::Goal => goal_nll(&model, &val),
                        _ => mean_ade(&model, &val),
                    }
                    .map_err(|e| if e.is_numeric() { diverged(train_loss) } else { e })?;
                    Some(v)
                };
                log::info!(
                    "stage {stage} epoch {epoch}: train {train_loss:.5}{}",
                    val_metric.map(|v| format!(", val {v:.5}")).unwrap_or_default()
                );
                curves.push(EpochRecord {
                    stage,
                    epoch,
                    train_loss,
                    val_metric,
                });
                summary.epochs_run = epoch;
                summary.final_train_loss = Some(train_loss);
                if let Some(v) = val_metric {
                    if best.as_ref().is_none_or(|(b, _)| v < *b) {
                        best = Some((v, model.params().clone()));
                        stale = 0;
                    } else {
                        stale += 1;
                        if stale >= plan.patience {
                            log::info!("stage {stage}: no validation improvement for {stale} epochs, stopping");
                            break;
                        }
                    }
                }
            }
            if let Some((v, params)) = best {
                summary.best_val = Some(v);
                *model.params_mut() = params;
            }
        }
        summary.goal_checksum = model.params().checksum(&goal_ids);
        summary.trajectory_checksum = model.params().checksum(&traj_ids);
        stages.push(summary);
    }

    Ok(TrainOutcome {
        model,
        curves,
        stages,
        initial_goal_checksum,
        initial_trajectory_checksum,
        train_count: train_idx.len(),
        val_count: val_idx.len(),
    })
}
