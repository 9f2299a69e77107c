use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::eval::{evaluate, Metrics};
use super::metrics::MetricsLog;
use super::run::{build_models, fresh_student};
use super::stage1::{train_group, GroupTraining};
use super::stage3::{distill_student, model_probs, Teaching};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{DatasetBundle, SplitName};
use crate::error::{Error, Result};
use crate::zoo::ModalityModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Student trained on its task loss alone.
    NoKd,
    /// Vanilla distillation from the multimodal model.
    KdMm,
    /// Vanilla distillation from the lowest-index non-target unimodal model.
    KdCm,
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_kd" => Ok(Self::NoKd),
            "kd_mm" => Ok(Self::KdMm),
            "kd_cm" => Ok(Self::KdCm),
            other => Err(Error::config(format!("unknown baseline `{other}`"))),
        }
    }
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::NoKd => "no_kd",
            Self::KdMm => "kd_mm",
            Self::KdCm => "kd_cm",
        }
    }

    /// Modality index of the teacher, if any.
    pub fn teacher_modality(self, target: usize) -> Option<usize> {
        match self {
            Self::NoKd => None,
            Self::KdMm => Some(0),
            Self::KdCm => Some(if target == 1 { 2 } else { 1 }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BaselineArtifacts {
    pub student: PathBuf,
    pub teacher: Option<PathBuf>,
    pub metrics: PathBuf,
    pub test: Metrics,
    pub log: MetricsLog,
}

/// Train a single-stage baseline student for `cfg`'s target into `out`.
///
/// Vanilla distillation uses the teacher at `teacher_checkpoint` when given;
/// otherwise a teacher is trained on its task loss first (stage `teacher`).
/// The student shares its initialization and data order with stage 3.
pub fn run_baseline(
    kind: BaselineKind,
    cfg: &RunConfig,
    data: &DatasetBundle,
    seed: u64,
    out: &Path,
    teacher_checkpoint: Option<&Path>,
) -> Result<BaselineArtifacts> {
    let target = cfg.target()?;
    let epochs = cfg.train.epochs.baseline();
    let mut log = MetricsLog::new();
    let mut teacher_path = None;
    let probs = match kind.teacher_modality(target) {
        None => None,
        Some(source) => {
            let teacher = match teacher_checkpoint {
                Some(p) => ModalityModel::from_named(checkpoint::read(p)?)?,
                None => {
                    let mut models = vec![build_models(cfg, data, seed)?.swap_remove(source)];
                    train_group(
                        &mut models,
                        data,
                        cfg,
                        seed,
                        &mut log,
                        GroupTraining {
                            stage: "teacher",
                            shuffle_stream: "shuffle/teacher",
                            epochs,
                            joint: false,
                        },
                    )?;
                    let p = out.join("teacher.mstd");
                    checkpoint::save(&p, &models[0])?;
                    teacher_path = Some(p);
                    models.pop().expect("one teacher")
                }
            };
            if teacher.modality_index() != source {
                return Err(Error::config(format!(
                    "{} needs a teacher for modality {source}, checkpoint holds m{}",
                    kind.name(),
                    teacher.modality_index()
                )));
            }
            Some(model_probs(&teacher, data, cfg.plan.temperature)?)
        }
    };
    let mut student = fresh_student(cfg, data, seed)?;
    let teaching = match &probs {
        None => Teaching::None,
        Some(p) => Teaching::Mean { probs: std::slice::from_ref(p) },
    };
    distill_student(&mut student, data, cfg, seed, &mut log, "baseline", epochs, teaching)?;

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let student_path = out.join("student.mstd");
    checkpoint::save(&student_path, &student)?;
    let metrics = out.join("metrics.jsonl");
    log.write(&metrics)?;
    Ok(BaselineArtifacts {
        student: student_path,
        teacher: teacher_path,
        metrics,
        test: evaluate(&student, data, SplitName::Test)?,
        log,
    })
}
