use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::eval::{evaluate, Metrics};
use super::metrics::MetricsLog;
use super::stage1::run_stage1;
use super::stage2::run_stage2;
use super::stage3::run_stage3;
use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{DatasetBundle, SplitName};
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::rng;
use crate::zoo::{build_multimodal, build_unimodal, GateNet, ModalityModel, TapId, TeacherRegistry};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSelect {
    All,
    S1,
    S2,
    S3,
}

impl FromStr for StageSelect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "s1" => Ok(Self::S1),
            "s2" => Ok(Self::S2),
            "s3" => Ok(Self::S3),
            other => Err(Error::usage(format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub metrics: PathBuf,
    /// Lines written by this invocation.
    pub log: MetricsLog,
    /// Test metrics of the distilled student, when stage 3 ran.
    pub test: Option<Metrics>,
}

/// Teacher description stored next to the checkpoints of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryInfo {
    pub target: usize,
    pub teachers: Vec<TeacherInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherInfo {
    pub id: usize,
    pub label: String,
    /// Modality index the teacher was built from.
    pub source: usize,
    pub tap: usize,
}

pub fn model_path(out: &Path, i: usize) -> PathBuf {
    out.join("s1").join(format!("model_{i}.mstd"))
}

pub fn masknet_path(out: &Path, j: usize) -> PathBuf {
    out.join("s2").join(format!("masknet_{j}.mstd"))
}

pub fn student_path(out: &Path) -> PathBuf {
    out.join("s3").join("student.mstd")
}

pub fn gatenet_path(out: &Path) -> PathBuf {
    out.join("s3").join("gatenet.mstd")
}

pub fn registry_path(out: &Path) -> PathBuf {
    out.join("registry.json")
}

pub fn metrics_path(out: &Path) -> PathBuf {
    out.join("metrics.jsonl")
}

/// Freshly initialized models for modality indices `0..=M`; model `i` draws
/// from the stream `init/m{i}`.
pub fn build_models(cfg: &RunConfig, data: &DatasetBundle, seed: u64) -> Result<Vec<ModalityModel>> {
    let dims = data.dims();
    let m = &cfg.models;
    let mut r0 = rng::stream(seed, "init/m0");
    let encoders = dims
        .iter()
        .enumerate()
        .map(|(k, &d)| build_unimodal(k + 1, d, &m.encoder_hidden, data.classes, &mut r0))
        .collect::<Result<Vec<_>>>()?;
    let mut models = vec![build_multimodal(encoders, &m.fusion_hidden, data.classes, &mut r0)?];
    for (k, &d) in dims.iter().enumerate() {
        let i = k + 1;
        let mut r = rng::stream(seed, &format!("init/m{i}"));
        models.push(build_unimodal(i, d, &m.hidden, data.classes, &mut r)?);
    }
    Ok(models)
}

/// The target model as initialized, without any pretraining.
pub fn fresh_student(cfg: &RunConfig, data: &DatasetBundle, seed: u64) -> Result<ModalityModel> {
    let t = cfg.target()?;
    let mut r = rng::stream(seed, &format!("init/m{t}"));
    build_unimodal(t, data.dims()[t - 1], &cfg.models.hidden, data.classes, &mut r)
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingDependency {
            path: path.to_path_buf(),
        })
    }
}

fn load_models(cfg: &RunConfig, data: &DatasetBundle, seed: u64, out: &Path) -> Result<Vec<ModalityModel>> {
    if cfg.plan.fresh_weights {
        return build_models(cfg, data, seed);
    }
    let mut models = build_models(cfg, data, seed)?;
    for (i, m) in models.iter_mut().enumerate() {
        let p = model_path(out, i);
        require(&p)?;
        checkpoint::load_into(&p, m)?;
    }
    Ok(models)
}

/// Frozen bases wrapped with fresh MaskNets for the configured taps.
pub fn build_registry(cfg: &RunConfig, models: &[ModalityModel], seed: u64) -> Result<TeacherRegistry> {
    let target = cfg.target()?;
    let bases: Vec<Arc<ModalityModel>> = models
        .iter()
        .map(|m| {
            let mut b = m.clone();
            b.set_frozen(true);
            Arc::new(b)
        })
        .collect();
    let taps: Vec<Vec<TapId>> = cfg
        .taps_for(target)?
        .into_iter()
        .map(|v| v.into_iter().map(TapId).collect())
        .collect();
    TeacherRegistry::build(
        &bases,
        &taps,
        target,
        cfg.models.masknet_hidden,
        cfg.models.heads,
        seed,
    )
}

pub fn registry_info(reg: &TeacherRegistry) -> RegistryInfo {
    RegistryInfo {
        target: reg.layout.target,
        teachers: reg
            .teachers
            .iter()
            .map(|t| TeacherInfo {
                id: t.id,
                label: t.label(),
                source: t.source(),
                tap: t.tap.0,
            })
            .collect(),
    }
}

fn write_registry(out: &Path, reg: &TeacherRegistry) -> Result<PathBuf> {
    let p = registry_path(out);
    let text = serde_json::to_string_pretty(&registry_info(reg)).expect("registry serializes");
    fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))?;
    Ok(p)
}

/// Run the selected stage(s) of the plan, writing checkpoints, the teacher
/// registry and `metrics.jsonl` under `out`.
///
/// Running a single stage reads its prerequisites from `out` and replaces
/// only that stage's lines in the metrics log.
pub fn train(
    cfg: &RunConfig,
    data: &DatasetBundle,
    seed: u64,
    out: &Path,
    select: StageSelect,
    threads: usize,
) -> Result<RunArtifacts> {
    cfg.validate()?;
    let plan = &cfg.plan;
    let target = cfg.target()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut log = MetricsLog::new();
    let mut checkpoints = Vec::new();
    let mut test = None;

    let mut trained = None;
    if matches!(select, StageSelect::All | StageSelect::S1) && !plan.fresh_weights {
        let mut models = build_models(cfg, data, seed)?;
        run_stage1(&mut models, data, cfg, seed, &mut log)?;
        for (i, m) in models.iter().enumerate() {
            let p = model_path(out, i);
            checkpoint::save(&p, m)?;
            checkpoints.push(p);
        }
        trained = Some(models);
    }

    if select != StageSelect::S1 {
        let models = match trained {
            Some(m) => m,
            None => load_models(cfg, data, seed, out)?,
        };
        let mut registry = build_registry(cfg, &models, seed)?;
        if select != StageSelect::S3 {
            if plan.s2 {
                let mut student = models[target].clone();
                student.set_frozen(true);
                run_stage2(&mut registry, &student, data, cfg, seed, threads, &mut log)?;
                for t in &registry.teachers {
                    let p = masknet_path(out, t.id);
                    checkpoint::save(&p, &t.masknet)?;
                    checkpoints.push(p);
                }
            }
            write_registry(out, &registry)?;
        } else if plan.s2 {
            for t in registry.teachers.iter_mut() {
                let p = masknet_path(out, t.id);
                require(&p)?;
                checkpoint::load_into(&p, &mut t.masknet)?;
            }
        }

        if select != StageSelect::S2 {
            for t in registry.teachers.iter_mut() {
                t.masknet.set_frozen(true);
            }
            let mut student = if plan.s1 {
                models[target].clone()
            } else {
                fresh_student(cfg, data, seed)?
            };
            student.set_frozen(false);
            let mut gate = if plan.s3 {
                let mut r = rng::stream(seed, "init/gate");
                Some(GateNet::new(
                    data.classes,
                    registry.len(),
                    cfg.models.gatenet_hidden,
                    &mut r,
                )?)
            } else {
                None
            };
            run_stage3(&mut student, &registry, gate.as_mut(), data, cfg, seed, &mut log)?;
            let p = student_path(out);
            checkpoint::save(&p, &student)?;
            checkpoints.push(p);
            if let Some(gate) = &gate {
                let p = gatenet_path(out);
                checkpoint::save(&p, gate)?;
                checkpoints.push(p);
            }
            write_registry(out, &registry)?;
            test = Some(evaluate(&student, data, SplitName::Test)?);
        }
    }

    let metrics = metrics_path(out);
    match select {
        StageSelect::All => log.write(&metrics)?,
        StageSelect::S1 => log.merge_into(&metrics, &["s1"])?,
        StageSelect::S2 => log.merge_into(&metrics, &["s2"])?,
        StageSelect::S3 => log.merge_into(&metrics, &["s3"])?,
    }
    Ok(RunArtifacts {
        out_dir: out.to_path_buf(),
        checkpoints,
        metrics,
        log,
        test,
    })
}
