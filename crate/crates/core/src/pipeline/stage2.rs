use super::common::{
    all_rows, check_finite, correct, feed, next_epoch, predict_probs, require_frozen, restore,
    scalar, snapshot, EVAL_CHUNK,
};
use super::metrics::{MetricLine, MetricsLog};
use crate::config::RunConfig;
use crate::data::{DatasetBundle, SplitName};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{stage2_loss, SoftDist};
use crate::nn::Module;
use crate::optim::Optimizer;
use crate::rng;
use crate::tensor::Tensor;
use crate::zoo::{ModalityModel, SpecializedTeacher, TeacherRegistry};

/// Per-epoch figures of one teacher.
#[derive(Debug, Clone, Copy)]
struct EpochStat {
    train_loss: f64,
    train_oa: f64,
    val_loss: f64,
    val_oa: f64,
}

/// Frozen inputs shared by every teacher's adaptation.
struct Shared<'a> {
    data: &'a DatasetBundle,
    cfg: &'a RunConfig,
    seed: u64,
    /// Softened student predictions for every sample.
    student: Tensor,
}

/// Adapt each teacher's MaskNet towards the frozen student. Teachers train
/// independently with their own optimizer and the same data order; up to
/// `threads` of them run at once with identical results.
pub fn run_stage2(
    registry: &mut TeacherRegistry,
    student: &ModalityModel,
    data: &DatasetBundle,
    cfg: &RunConfig,
    seed: u64,
    threads: usize,
    log: &mut MetricsLog,
) -> Result<()> {
    if registry.is_empty() {
        return Err(Error::config("teacher registry is empty"));
    }
    require_frozen("the student during teacher adaptation", student)?;
    for t in &registry.teachers {
        require_frozen("every base teacher", t.base())?;
    }
    let rows = all_rows(data);
    let shared = Shared {
        data,
        cfg,
        seed,
        student: predict_probs(student, data, &rows, cfg.plan.temperature)?,
    };
    let features = registry
        .teachers
        .iter()
        .map(|t| tap_features(t, data, &rows))
        .collect::<Result<Vec<_>>>()?;

    let n = registry.len();
    let threads = threads.clamp(1, n);
    let per = n.div_ceil(threads);
    let histories: Vec<Vec<EpochStat>> = if threads == 1 {
        registry
            .teachers
            .iter_mut()
            .zip(&features)
            .map(|(t, f)| adapt(t, f, &shared))
            .collect::<Result<_>>()?
    } else {
        let shared = &shared;
        std::thread::scope(|s| {
            let handles: Vec<_> = registry
                .teachers
                .chunks_mut(per)
                .zip(features.chunks(per))
                .map(|(ts, fs)| {
                    s.spawn(move || {
                        ts.iter_mut()
                            .zip(fs)
                            .map(|(t, f)| adapt(t, f, shared))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            let mut out = Vec::with_capacity(n);
            for h in handles {
                out.extend(h.join().expect("teacher thread panicked")?);
            }
            Ok::<_, Error>(out)
        })?
    };

    let epochs = cfg.train.epochs.s2;
    let nf = n as f64;
    for e in 0..epochs as usize {
        let mean = |f: fn(&EpochStat) -> f64| histories.iter().map(|h| f(&h[e])).sum::<f64>() / nf;
        log.push(MetricLine::new("s2", e as u32, "train", mean(|s| s.train_loss), mean(|s| s.train_oa)));
        log.push(MetricLine::new("s2", e as u32, "val", mean(|s| s.val_loss), mean(|s| s.val_oa)));
    }
    for split in [SplitName::Val, SplitName::Test] {
        let idx = data.split_indices(split)?;
        let (mut loss, mut oa) = (0.0, 0.0);
        for (t, f) in registry.teachers.iter().zip(&features) {
            let (l, a) = adaptation_metrics(t, f, &shared, idx)?;
            loss += l;
            oa += a;
        }
        log.push(MetricLine::new("s2", epochs, &split.to_string(), loss / nf, oa / nf));
    }
    Ok(())
}

fn tap_features(t: &SpecializedTeacher, data: &DatasetBundle, rows: &[usize]) -> Result<Tensor> {
    let d = t.masknet.cfg.d_m;
    let mut out = Vec::with_capacity(rows.len() * d);
    for chunk in rows.chunks(EVAL_CHUNK) {
        let batch = data.batch(chunk);
        let mut g = Graph::new();
        let xs = feed(&mut g, t.base(), &batch.inputs);
        let z = t.tap_features(&mut g, &xs)?;
        out.extend_from_slice(g.value(z).data());
    }
    Tensor::new(vec![rows.len(), d], out)
}

/// Adaptation loss and teacher accuracy over `idx`, no gradient.
fn adaptation_metrics(t: &SpecializedTeacher, feats: &Tensor, sh: &Shared, idx: &[usize]) -> Result<(f64, f64)> {
    let tau = sh.cfg.plan.temperature;
    let (mut loss, mut hits) = (0.0f64, 0usize);
    for chunk in idx.chunks(EVAL_CHUNK) {
        let mut g = Graph::new();
        let z = g.input(feats.select_rows(chunk));
        let logits = t.forward_from_features(&mut g, z)?;
        let teacher = SoftDist::from_logits(&mut g, logits, tau)?;
        let student = SoftDist::constant(&mut g, sh.student.select_rows(chunk), tau)?;
        let l = stage2_loss(&mut g, student, teacher)?;
        loss += f64::from(scalar(&g, l)) * chunk.len() as f64;
        let labels: Vec<usize> = chunk.iter().map(|&i| sh.data.labels[i]).collect();
        hits += correct(g.value(logits), &labels);
    }
    let n = idx.len() as f64;
    Ok((loss / n, hits as f64 / n))
}

/// Train one MaskNet; keeps the state with the lowest validation loss, the
/// untrained state included.
fn adapt(t: &mut SpecializedTeacher, feats: &Tensor, sh: &Shared) -> Result<Vec<EpochStat>> {
    let cfg = sh.cfg;
    let tau = cfg.plan.temperature;
    let scale = if cfg.plan.tau_squared { tau * tau } else { 1.0 };
    let stage = format!("s2 (teacher {})", t.id);
    let val = sh.data.split_indices(SplitName::Val)?;
    let mut opt = Optimizer::new(cfg.train.optimizer, cfg.train.lr);
    let mut shuffle = rng::stream(sh.seed, "shuffle/s2");
    let mut order = sh.data.split_indices(SplitName::Train)?.to_vec();

    let (mut best_loss, _) = adaptation_metrics(t, feats, sh, val)?;
    let mut best = snapshot(&t.masknet);
    let mut history = Vec::with_capacity(cfg.train.epochs.s2 as usize);
    for _ in 0..cfg.train.epochs.s2 {
        let (mut loss_sum, mut hits) = (0.0f64, 0usize);
        for chunk in next_epoch(&mut order, &mut shuffle, cfg.train.batch_size) {
            let mut g = Graph::new();
            let z = g.input(feats.select_rows(&chunk));
            let logits = t.forward_from_features(&mut g, z)?;
            let teacher = SoftDist::from_logits(&mut g, logits, tau)?;
            let student = SoftDist::constant(&mut g, sh.student.select_rows(&chunk), tau)?;
            let mut loss = stage2_loss(&mut g, student, teacher)?;
            if scale != 1.0 {
                loss = g.scale(loss, scale);
            }
            let lv = scalar(&g, loss);
            let labels: Vec<usize> = chunk.iter().map(|&i| sh.data.labels[i]).collect();
            hits += correct(g.value(logits), &labels);
            g.backward(loss)?.apply(t.masknet.params_mut());
            opt.step(t.masknet.params_mut())?;
            check_finite(&stage, lv, t.masknet.params())?;
            loss_sum += f64::from(lv) * chunk.len() as f64;
        }
        let n = order.len() as f64;
        let (val_loss, val_oa) = adaptation_metrics(t, feats, sh, val)?;
        if val_loss < best_loss {
            best_loss = val_loss;
            best = snapshot(&t.masknet);
        }
        history.push(EpochStat {
            train_loss: loss_sum / n,
            train_oa: hits as f64 / n,
            val_loss,
            val_oa,
        });
    }
    restore(&mut t.masknet, &best)?;
    Ok(history)
}
