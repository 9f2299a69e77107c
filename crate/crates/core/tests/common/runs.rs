//! Small end-to-end runs shared by the pipeline tests and the acceptance
//! binary. Each check returns a one-line summary or the reason it failed.

use std::collections::BTreeMap;
use std::path::Path;

use mstd_core::checkpoint;
use mstd_core::config::RunConfig;
use mstd_core::data::{SplitName, SyntheticSpec};
use mstd_core::pipeline::{
    self, build_models, build_registry, evaluate, run_baseline, BaselineKind, MetricsLog, StageSelect,
};
use mstd_core::schedule::DecaySchedule;
use mstd_core::zoo::ModalityModel;

pub type Check = Result<String, String>;

pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::synthetic(SyntheticSpec {
        classes: 4,
        samples: 200,
        dims: vec![8, 8],
        informativeness: vec![1.0, 0.5],
        shared_factor: 0.7,
        noise_sigma: 0.5,
        seed: 0,
    });
    cfg.models.hidden = vec![16, 16];
    cfg.models.encoder_hidden = vec![16];
    cfg.models.fusion_hidden = vec![16, 16];
    cfg.train.epochs.s1 = 10;
    cfg.train.epochs.s2 = 10;
    cfg.train.epochs.s3 = 10;
    cfg
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Every file under `dir`, keyed by relative path.
fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "mstd") {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Names of the parameters whose bytes differ between two checkpoints.
fn changed_params(a: &[u8], b: &[u8]) -> Vec<String> {
    let a = checkpoint::decode(a).unwrap();
    let b: BTreeMap<String, _> = checkpoint::decode(b).unwrap().into_iter().collect();
    a.into_iter()
        .filter(|(name, t)| b.get(name).is_none_or(|u| u.data() != t.data()))
        .map(|(name, _)| name)
        .collect()
}

/// Checkpoints present both before and after must be byte-identical, except
/// those listed in `legal`.
fn only_legal_changed(
    before: &BTreeMap<String, Vec<u8>>,
    after: &BTreeMap<String, Vec<u8>>,
    legal: &[&str],
) -> Result<(), String> {
    for (name, bytes) in before {
        let now = after.get(name).ok_or(format!("{name} disappeared"))?;
        if now != bytes && !legal.iter().any(|l| name.starts_with(l)) {
            return Err(format!("{name} changed: {:?}", changed_params(bytes, now)));
        }
    }
    Ok(())
}

/// Run each stage separately on a tiny config and diff every checkpoint.
pub fn stage_isolation(dir: &Path) -> Check {
    let cfg = tiny_config();
    let seed = 0;
    let data = cfg.dataset(seed).map_err(err)?;
    let out = dir.join("iso");
    let t = cfg.target().map_err(err)?;

    let init = build_models(&cfg, &data, seed).map_err(err)?;
    pipeline::train(&cfg, &data, seed, &out, StageSelect::S1, 1).map_err(err)?;
    let after1 = files(&out);
    for (i, m) in init.iter().enumerate() {
        let saved = &after1[&format!("s1/model_{i}.mstd")];
        let fresh = checkpoint::encode(mstd_core::nn::Module::params(m)).map_err(err)?;
        if changed_params(&fresh, saved).is_empty() {
            return Err(format!("S1 left model {i} untouched"));
        }
    }

    let reg0 = build_registry(&cfg, &init, seed).map_err(err)?;
    pipeline::train(&cfg, &data, seed, &out, StageSelect::S2, 1).map_err(err)?;
    let after2 = files(&out);
    only_legal_changed(&after1, &after2, &[])?;
    let moved = reg0
        .teachers
        .iter()
        .filter(|tch| {
            let fresh = checkpoint::encode(mstd_core::nn::Module::params(&tch.masknet)).unwrap();
            !changed_params(&fresh, &after2[&format!("s2/masknet_{}.mstd", tch.id)]).is_empty()
        })
        .count();
    if moved == 0 {
        return Err("S2 changed no MaskNet".into());
    }

    pipeline::train(&cfg, &data, seed, &out, StageSelect::S3, 1).map_err(err)?;
    let after3 = files(&out);
    only_legal_changed(&after2, &after3, &[])?;
    let student = &after3["s3/student.mstd"];
    if changed_params(&after1[&format!("s1/model_{t}.mstd")], student).is_empty() {
        return Err("S3 left the student untouched".into());
    }
    if !after3.contains_key("s3/gatenet.mstd") {
        return Err("S3 wrote no router".into());
    }
    Ok(format!(
        "S1 changed all {} models; S2 changed {moved}/{} MaskNets and nothing else; S3 changed only student and router",
        init.len(),
        reg0.len()
    ))
}

/// Two identical runs give identical logs; reloading the student gives the
/// same evaluation; the dataset file round-trips bit for bit.
pub fn determinism(dir: &Path) -> Check {
    let cfg = tiny_config();
    let data = cfg.dataset(5).map_err(err)?;
    let (a, b) = (dir.join("det_a"), dir.join("det_b"));
    let ra = pipeline::train(&cfg, &data, 5, &a, StageSelect::All, 1).map_err(err)?;
    pipeline::train(&cfg, &data, 5, &b, StageSelect::All, 1).map_err(err)?;
    let la = std::fs::read(a.join("metrics.jsonl")).map_err(err)?;
    let lb = std::fs::read(b.join("metrics.jsonl")).map_err(err)?;
    if la != lb {
        return Err("metrics logs differ between identical runs".into());
    }

    let student = ModalityModel::from_named(checkpoint::read(&a.join("s3/student.mstd")).map_err(err)?).map_err(err)?;
    let reloaded = evaluate(&student, &data, SplitName::Test).map_err(err)?;
    let live = ra.test.ok_or("no student metrics")?;
    if reloaded.overall_accuracy != live.overall_accuracy || reloaded.loss != live.loss {
        return Err(format!("reloaded student evaluates differently: {reloaded:?} vs {live:?}"));
    }
    let log = MetricsLog::read(&a.join("metrics.jsonl")).map_err(err)?;
    let last = log.final_line("s3", "test").ok_or("no final test line")?;
    if last.oa != live.overall_accuracy {
        return Err("final test line disagrees with the saved student".into());
    }

    let spec = cfg.data.synthetic.clone().unwrap();
    let bundle = mstd_core::data::generate(&spec).map_err(err)?;
    let p = dir.join("data.bin");
    mstd_core::data::save_bundle(&p, &bundle).map_err(err)?;
    let back = mstd_core::data::load_external(&p).map_err(err)?;
    for (x, y) in bundle.modalities.iter().zip(&back.modalities) {
        let same = x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(u, v)| u.to_bits() == v.to_bits());
        if !same {
            return Err("dataset tensors changed through the file".into());
        }
    }
    if bundle.labels != back.labels {
        return Err("dataset labels changed through the file".into());
    }
    Ok(format!("{} log bytes identical; reload OA {:.4}; data file bit-identical", la.len(), reloaded.overall_accuracy))
}

fn oa_loss_trace(log: &MetricsLog, stage: &str) -> Vec<(u32, String, u64, u64)> {
    log.stage(stage)
        .map(|l| (l.epoch, l.split.clone(), l.oa.to_bits(), l.loss.to_bits()))
        .collect()
}

/// All six ablation rows run from flags and give distinct logs; routed
/// distillation with both weights at zero equals the no-KD baseline.
pub fn ablations(dir: &Path) -> Check {
    let base = tiny_config();
    let seed = 1;
    let data = base.dataset(seed).map_err(err)?;
    let mut logs: Vec<(char, Vec<u8>)> = Vec::new();
    for s in 'a'..='f' {
        let mut cfg = base.clone();
        cfg.plan = mstd_core::config::StagePlan::ablation(s).map_err(err)?;
        let out = dir.join(format!("abl_{s}"));
        pipeline::train(&cfg, &data, seed, &out, StageSelect::All, 1).map_err(err)?;
        let bytes = std::fs::read(out.join("metrics.jsonl")).map_err(err)?;
        if let Some((o, _)) = logs.iter().find(|(_, b)| *b == bytes) {
            return Err(format!("settings ({o}) and ({s}) produced identical logs"));
        }
        logs.push((s, bytes));
    }

    let mut cfg = base.clone();
    cfg.plan = mstd_core::config::StagePlan::ablation('b').map_err(err)?;
    cfg.plan.lambda1 = DecaySchedule::constant(0.0);
    cfg.plan.lambda2 = DecaySchedule::constant(0.0);
    cfg.train.epochs.baseline = Some(cfg.train.epochs.s3);
    let mst = dir.join("zero_mst");
    let art = pipeline::train(&cfg, &data, seed, &mst, StageSelect::All, 1).map_err(err)?;
    let nokd = run_baseline(BaselineKind::NoKd, &cfg, &data, seed, &dir.join("zero_nokd"), None).map_err(err)?;
    if std::fs::read(mst.join("s3/student.mstd")).map_err(err)? != std::fs::read(&nokd.student).map_err(err)? {
        return Err("zero-weight student differs from the no-KD student".into());
    }
    if oa_loss_trace(&art.log, "s3") != oa_loss_trace(&nokd.log, "baseline") {
        return Err("zero-weight training curve differs from no-KD".into());
    }
    Ok("(a)-(f) logs pairwise distinct; λ1=λ2=0 student bit-identical to no_kd".into())
}
