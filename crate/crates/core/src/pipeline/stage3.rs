use super::common::{
    all_rows, check_finite, correct, feed, next_epoch, predict_probs, require_frozen, restore,
    scalar, snapshot,
};
use super::eval::evaluate;
use super::metrics::{MetricLine, MetricsLog};
use crate::config::RunConfig;
use crate::data::{DatasetBundle, SplitName};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::loss::{cross_entropy, dkd_loss, lb_loss, stage3_loss, SoftDist};
use crate::nn::Module;
use crate::optim::Optimizer;
use crate::rng;
use crate::tensor::Tensor;
use crate::zoo::{topk_select, GateNet, ModalityModel, TeacherRegistry};

/// Where the student's soft targets come from.
pub(crate) enum Teaching<'a> {
    /// Task loss only.
    None,
    /// Equal-weight distillation from every teacher.
    Mean { probs: &'a [Tensor] },
    /// Per-sample top-k teachers chosen by the router.
    Routed { probs: &'a [Tensor], gate: &'a mut GateNet },
}

/// Dynamic distillation into the student. With `gate` set the router picks
/// each sample's top-k teachers and is trained by the load-balancing loss;
/// without it (stage 3 disabled) the student distils from the mean of all
/// teachers. Teachers must be fully frozen.
pub fn run_stage3(
    student: &mut ModalityModel,
    registry: &TeacherRegistry,
    gate: Option<&mut GateNet>,
    data: &DatasetBundle,
    cfg: &RunConfig,
    seed: u64,
    log: &mut MetricsLog,
) -> Result<()> {
    if registry.is_empty() {
        return Err(Error::config("teacher registry is empty"));
    }
    let n = registry.len();
    if cfg.plan.k == 0 || cfg.plan.k > n {
        return Err(Error::config(format!("k = {} must lie in 1..={n}", cfg.plan.k)));
    }
    for t in &registry.teachers {
        require_frozen("every base teacher", t.base())?;
        require_frozen("every MaskNet during distillation", &t.masknet)?;
    }
    let rows = all_rows(data);
    let probs = registry
        .teachers
        .iter()
        .map(|t| teacher_probs(t, data, &rows, cfg.plan.temperature))
        .collect::<Result<Vec<_>>>()?;
    let teaching = match gate {
        Some(gate) => {
            if gate.teachers() != n {
                return Err(Error::dim(format!(
                    "router has {} outputs for {n} teachers",
                    gate.teachers()
                )));
            }
            Teaching::Routed { probs: &probs, gate }
        }
        None => Teaching::Mean { probs: &probs },
    };
    distill_student(student, data, cfg, seed, log, "s3", cfg.train.epochs.s3, teaching)
}

fn teacher_probs(
    t: &crate::zoo::SpecializedTeacher,
    data: &DatasetBundle,
    rows: &[usize],
    temperature: f32,
) -> Result<Tensor> {
    let mut out = Vec::with_capacity(rows.len() * t.base().classes());
    for chunk in rows.chunks(super::common::EVAL_CHUNK) {
        let batch = data.batch(chunk);
        let mut g = Graph::new();
        let xs = feed(&mut g, t.base(), &batch.inputs);
        let z = t.forward(&mut g, &xs)?;
        let p = g.softmax(z, temperature)?;
        out.extend_from_slice(g.value(p).data());
    }
    Tensor::new(vec![rows.len(), t.base().classes()], out)
}

/// Soft targets of a frozen plain model, for vanilla distillation.
pub(crate) fn model_probs(model: &ModalityModel, data: &DatasetBundle, temperature: f32) -> Result<Tensor> {
    predict_probs(model, data, &all_rows(data), temperature)
}

/// Rows `chunk` of `probs`, or of teacher `pick[b]` for row `b` when given.
fn gather(probs: &[Tensor], chunk: &[usize], pick: &[usize]) -> Tensor {
    let c = probs[0].cols();
    let mut out = Vec::with_capacity(chunk.len() * c);
    for (b, &i) in chunk.iter().enumerate() {
        out.extend_from_slice(probs[pick[b]].row(i));
    }
    Tensor::new(vec![chunk.len(), c], out).expect("gathered rows")
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn distill_student(
    student: &mut ModalityModel,
    data: &DatasetBundle,
    cfg: &RunConfig,
    seed: u64,
    log: &mut MetricsLog,
    stage: &str,
    epochs: u32,
    mut teaching: Teaching<'_>,
) -> Result<()> {
    let plan = &cfg.plan;
    let tau = plan.temperature;
    let kd_scale = if plan.tau_squared { tau * tau } else { 1.0 };
    let mut opt = Optimizer::new(cfg.train.optimizer, cfg.train.lr);
    let mut gate_opt = Optimizer::new(cfg.train.optimizer, cfg.train.lr);
    let mut shuffle = rng::stream(seed, "shuffle/student");
    let mut order = data.split_indices(SplitName::Train)?.to_vec();

    let mut best_oa = f64::NEG_INFINITY;
    let mut best_student = snapshot(student);
    let mut best_gate = match &teaching {
        Teaching::Routed { gate, .. } => Some(snapshot(&**gate)),
        _ => None,
    };
    for epoch in 0..epochs {
        let (l1, l2) = match &teaching {
            Teaching::None => (None, None),
            Teaching::Mean { .. } => (Some(plan.lambda1.value_at(epoch)), None),
            Teaching::Routed { .. } => (
                Some(plan.lambda1.value_at(epoch)),
                Some(plan.lambda2.value_at(epoch)),
            ),
        };
        let lambda1 = l1.unwrap_or(0.0) as f32;
        let lambda2 = l2.unwrap_or(0.0) as f32;
        let mut routing = match &teaching {
            Teaching::Routed { probs, .. } => Some(vec![0.0f64; probs.len()]),
            _ => None,
        };
        let (mut loss_sum, mut hits) = (0.0f64, 0usize);

        for chunk in next_epoch(&mut order, &mut shuffle, cfg.train.batch_size) {
            let batch = data.batch(&chunk);
            let mut g = Graph::new();
            let xs = feed(&mut g, student, &batch.inputs);
            let z = student.forward(&mut g, &xs)?;
            let ce = cross_entropy(&mut g, z, &batch.labels)?;
            let (mut dkd, mut lb): (Option<NodeId>, Option<NodeId>) = (None, None);
            match &mut teaching {
                Teaching::None => {}
                Teaching::Mean { probs } => {
                    if lambda1 != 0.0 {
                        let sd = SoftDist::from_logits(&mut g, z, tau)?;
                        let selected = (0..probs.len())
                            .map(|j| SoftDist::constant(&mut g, gather(probs, &chunk, &vec![j; chunk.len()]), tau))
                            .collect::<Result<Vec<_>>>()?;
                        let mut d = dkd_loss(&mut g, &selected, sd, None)?;
                        if probs.len() > 1 {
                            d = g.scale(d, 1.0 / probs.len() as f32);
                        }
                        dkd = Some(d);
                    }
                }
                Teaching::Routed { probs, gate } => {
                    let z_det = g.detach(z);
                    let c = gate.forward(&mut g, z_det)?;
                    let conf = g.value(c).clone();
                    let acc = routing.as_mut().expect("routed epochs track routing");
                    for r in 0..conf.rows() {
                        for (a, v) in acc.iter_mut().zip(conf.row(r)) {
                            *a += f64::from(*v);
                        }
                    }
                    if lambda1 != 0.0 {
                        let picks = (0..conf.rows())
                            .map(|r| topk_select(conf.row(r), plan.k))
                            .collect::<Result<Vec<_>>>()?;
                        let sd = SoftDist::from_logits(&mut g, z, tau)?;
                        let mut selected = Vec::with_capacity(plan.k);
                        let mut weights = Vec::with_capacity(plan.k);
                        for slot in 0..plan.k {
                            let pick: Vec<usize> = picks.iter().map(|p| p[slot]).collect();
                            selected.push(SoftDist::constant(&mut g, gather(probs, &chunk, &pick), tau)?);
                            if plan.weight_dkd_by_confidence {
                                weights.push(g.pick(c, &pick)?);
                            }
                        }
                        let w = plan.weight_dkd_by_confidence.then_some(weights.as_slice());
                        dkd = Some(dkd_loss(&mut g, &selected, sd, w)?);
                    }
                    if lambda2 != 0.0 {
                        let mean = g.mean_rows(c);
                        lb = Some(lb_loss(&mut g, mean, plan.lb_variant)?);
                    }
                }
            }
            if kd_scale != 1.0 {
                dkd = dkd.map(|d| g.scale(d, kd_scale));
            }
            let loss = stage3_loss(&mut g, ce, dkd, lb, lambda1, lambda2)?;
            let lv = scalar(&g, loss);
            hits += correct(g.value(z), &batch.labels);

            let grads = g.backward(loss)?;
            grads.apply(student.params_mut());
            opt.step(student.params_mut())?;
            check_finite(stage, lv, student.params())?;
            if let Teaching::Routed { gate, .. } = &mut teaching {
                grads.apply(gate.params_mut());
                if gate.params().iter().any(|p| p.grad().is_some()) {
                    gate_opt.step(gate.params_mut())?;
                    check_finite(stage, lv, gate.params())?;
                }
            }
            loss_sum += f64::from(lv) * chunk.len() as f64;
        }

        let n = order.len() as f64;
        let mut line = MetricLine::new(stage, epoch, "train", loss_sum / n, hits as f64 / n).lambdas(l1, l2);
        line.routing_mean = routing.map(|r| r.into_iter().map(|v| v / n).collect());
        log.push(line);
        let val = evaluate(student, data, SplitName::Val)?;
        log.push(MetricLine::new(stage, epoch, "val", val.loss, val.overall_accuracy).lambdas(l1, l2));
        if val.overall_accuracy > best_oa {
            best_oa = val.overall_accuracy;
            best_student = snapshot(student);
            if let Teaching::Routed { gate, .. } = &teaching {
                best_gate = Some(snapshot(&**gate));
            }
        }
    }
    restore(student, &best_student)?;
    if let (Teaching::Routed { gate, .. }, Some(snap)) = (&mut teaching, &best_gate) {
        restore(&mut **gate, snap)?;
    }
    for split in [SplitName::Val, SplitName::Test] {
        let m = evaluate(student, data, split)?;
        log.push(MetricLine::new(stage, epochs, &split.to_string(), m.loss, m.overall_accuracy));
    }
    Ok(())
}
