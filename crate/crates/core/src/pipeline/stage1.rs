use super::common::{check_finite, correct, feed, next_epoch, restore, scalar, snapshot};
use super::eval::evaluate;
use super::metrics::{MetricLine, MetricsLog};
use crate::config::RunConfig;
use crate::data::{DatasetBundle, SplitName};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{cross_entropy, stage1_loss};
use crate::nn::Module;
use crate::optim::Optimizer;
use crate::rng;
use crate::zoo::ModalityModel;

/// How a group of models is trained together.
pub(crate) struct GroupTraining<'a> {
    pub stage: &'a str,
    pub shuffle_stream: &'a str,
    pub epochs: u32,
    /// Joint task + alignment loss; otherwise the sum of task losses.
    pub joint: bool,
}

/// Collaborative initialization of all `M + 1` models, `models[i]` being
/// modality index `i`. With `plan.s1` off each model is trained on its own
/// task loss instead. Restores the epoch with the best mean validation OA.
pub fn run_stage1(
    models: &mut [ModalityModel],
    data: &DatasetBundle,
    cfg: &RunConfig,
    seed: u64,
    log: &mut MetricsLog,
) -> Result<()> {
    train_group(
        models,
        data,
        cfg,
        seed,
        log,
        GroupTraining {
            stage: "s1",
            shuffle_stream: "shuffle/s1",
            epochs: cfg.train.epochs.s1,
            joint: cfg.plan.s1,
        },
    )
}

pub(crate) fn train_group(
    models: &mut [ModalityModel],
    data: &DatasetBundle,
    cfg: &RunConfig,
    seed: u64,
    log: &mut MetricsLog,
    how: GroupTraining<'_>,
) -> Result<()> {
    if models.is_empty() {
        return Err(Error::config("no models to train"));
    }
    if how.joint && models.len() < 2 {
        return Err(Error::config("joint initialization needs at least 2 models"));
    }
    let plan = &cfg.plan;
    let mut opt = Optimizer::new(cfg.train.optimizer, cfg.train.lr);
    let mut shuffle = rng::stream(seed, how.shuffle_stream);
    let mut order = data.split_indices(SplitName::Train)?.to_vec();
    let members = models.len() as f64;

    let mut best: Option<(f64, Vec<Vec<crate::tensor::Tensor>>)> = None;
    for epoch in 0..how.epochs {
        let mut loss_sum = 0.0f64;
        let mut hits = 0usize;
        for chunk in next_epoch(&mut order, &mut shuffle, cfg.train.batch_size) {
            let batch = data.batch(&chunk);
            let mut g = Graph::new();
            let mut logits = Vec::with_capacity(models.len());
            for m in models.iter() {
                let xs = feed(&mut g, m, &batch.inputs);
                logits.push(m.forward(&mut g, &xs)?);
            }
            let loss = if how.joint {
                stage1_loss(&mut g, &logits, &batch.labels, plan.temperature, plan.detach_align)?.total
            } else {
                let mut total = cross_entropy(&mut g, logits[0], &batch.labels)?;
                for &z in &logits[1..] {
                    let ce = cross_entropy(&mut g, z, &batch.labels)?;
                    total = g.add(total, ce)?;
                }
                total
            };
            let lv = scalar(&g, loss);
            for &z in &logits {
                hits += correct(g.value(z), &batch.labels);
            }
            let grads = g.backward(loss)?;
            for m in models.iter_mut() {
                grads.apply(m.params_mut());
            }
            opt.step(models.iter_mut().flat_map(|m| m.params_mut()))?;
            check_finite(how.stage, lv, models.iter().flat_map(|m| m.params()))?;
            loss_sum += f64::from(lv) * chunk.len() as f64;
        }
        let n = order.len() as f64;
        log.push(MetricLine::new(how.stage, epoch, "train", loss_sum / n, hits as f64 / (n * members)));

        let (val_loss, val_oa) = mean_metrics(models, data, SplitName::Val)?;
        log.push(MetricLine::new(how.stage, epoch, "val", val_loss, val_oa));
        if best.as_ref().is_none_or(|(b, _)| val_oa > *b) {
            best = Some((val_oa, models.iter().map(snapshot).collect()));
        }
    }
    if let Some((_, snaps)) = best {
        for (m, s) in models.iter_mut().zip(&snaps) {
            restore(m, s)?;
        }
    }
    for split in [SplitName::Val, SplitName::Test] {
        let (loss, oa) = mean_metrics(models, data, split)?;
        log.push(MetricLine::new(how.stage, how.epochs, &split.to_string(), loss, oa));
    }
    Ok(())
}

fn mean_metrics(models: &[ModalityModel], data: &DatasetBundle, split: SplitName) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut oa = 0.0;
    for m in models {
        let r = evaluate(m, data, split)?;
        loss += r.loss;
        oa += r.overall_accuracy;
    }
    let n = models.len() as f64;
    Ok((loss / n, oa / n))
}
