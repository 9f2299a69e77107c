use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One JSON line of the metrics log.
///
/// Per-epoch lines use `epoch` in `0..E`. After a stage restores its best
/// checkpoint it writes one `val` and one `test` line with `epoch == E`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricLine {
    pub stage: String,
    pub epoch: u32,
    pub split: String,
    pub loss: f64,
    pub oa: f64,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routing_mean: Option<Vec<f64>>,
}

impl MetricLine {
    pub fn new(stage: &str, epoch: u32, split: &str, loss: f64, oa: f64) -> Self {
        Self {
            stage: stage.to_string(),
            epoch,
            split: split.to_string(),
            loss,
            oa,
            lambda1: None,
            lambda2: None,
            routing_mean: None,
        }
    }

    pub fn lambdas(mut self, lambda1: Option<f64>, lambda2: Option<f64>) -> Self {
        self.lambda1 = lambda1;
        self.lambda2 = lambda2;
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub lines: Vec<MetricLine>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, line: MetricLine) {
        self.lines.push(line);
    }

    pub fn stage<'a>(&'a self, stage: &'a str) -> impl Iterator<Item = &'a MetricLine> + 'a {
        self.lines.iter().filter(move |l| l.stage == stage)
    }

    /// Summary line (`epoch == E`) of `stage` on `split`.
    pub fn final_line(&self, stage: &str, split: &str) -> Option<&MetricLine> {
        self.lines
            .iter()
            .rev()
            .find(|l| l.stage == stage && l.split == split)
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for l in &self.lines {
            s.push_str(&serde_json::to_string(l).expect("metric lines serialize"));
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| {
                serde_json::from_str(l)
                    .map_err(|e| Error::Data(format!("metrics line {}: {e}", n + 1)))
            })
            .collect::<Result<_>>()?;
        Ok(Self { lines })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    /// Replace the lines of `stages` in the log at `path` with this log's.
    /// Stage order in the file follows `s1`, `s2`, `s3`, then anything else.
    pub fn merge_into(&self, path: &Path, stages: &[&str]) -> Result<()> {
        let mut merged = if path.exists() {
            Self::read(path)?
        } else {
            Self::new()
        };
        merged.lines.retain(|l| !stages.contains(&l.stage.as_str()));
        merged.lines.extend(self.lines.iter().cloned());
        let rank = |s: &str| match s {
            "s1" => 0,
            "s2" => 1,
            "s3" => 2,
            _ => 3,
        };
        // stable sort keeps the within-stage order
        merged.lines.sort_by_key(|l| rank(&l.stage));
        merged.write(path)
    }
}
