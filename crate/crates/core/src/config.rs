//! Run configuration, read from TOML.
//!
//! Every table rejects unknown keys, and [`RunConfig::validate`] checks all
//! cross-field invariants before any training starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, DatasetBundle, SyntheticSpec};
use crate::error::{Error, Result};
use crate::loss::LbVariant;
use crate::optim::OptimizerKind;
use crate::schedule::DecaySchedule;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub data: DataConfig,
    #[serde(default)]
    pub models: ModelsConfig,
    #[serde(default)]
    pub plan: StagePlan,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub report: ReportConfig,
}

/// Exactly one of `synthetic` or `path`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: Option<SyntheticSpec>,
    pub path: Option<PathBuf>,
    #[serde(default = "default_ratios")]
    pub ratios: [f64; 3],
}

fn default_ratios() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelsConfig {
    /// Trunk widths of every unimodal model.
    pub hidden: Vec<usize>,
    /// Per-modality encoder widths inside the fusion model.
    pub encoder_hidden: Vec<usize>,
    /// Post-fusion trunk widths.
    pub fusion_hidden: Vec<usize>,
    /// Tapped trunk layers per modality index `0..=M`; `None` uses the
    /// middle and penultimate layers. The target's entry is ignored.
    pub taps: Option<Vec<Vec<usize>>>,
    pub masknet_hidden: usize,
    pub heads: usize,
    pub gatenet_hidden: Option<usize>,
}

impl Default for ModelsConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            encoder_hidden: vec![64],
            fusion_hidden: vec![64, 64],
            taps: None,
            masknet_hidden: 12,
            heads: 3,
            gatenet_hidden: None,
        }
    }
}

/// Which stages run and how the losses are weighted.
///
/// A disabled stage falls back to its plain counterpart: without `s1` every
/// model is pretrained on its own task loss, without `s2` the MaskNets keep
/// their initial weights, without `s3` the student distils from the mean of
/// all teachers with no routing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StagePlan {
    pub s1: bool,
    pub s2: bool,
    pub s3: bool,
    /// Target modality `1..=M`; `None` picks `M`.
    pub target: Option<usize>,
    pub k: usize,
    pub lambda1: DecaySchedule,
    pub lambda2: DecaySchedule,
    pub temperature: f32,
    pub detach_align: bool,
    pub lb_variant: LbVariant,
    pub weight_dkd_by_confidence: bool,
    /// Multiply distillation terms by `τ²`.
    pub tau_squared: bool,
    /// Allow stages 2 and 3 to run on untrained base models.
    pub fresh_weights: bool,
}

impl Default for StagePlan {
    fn default() -> Self {
        Self {
            s1: true,
            s2: true,
            s3: true,
            target: None,
            k: 1,
            lambda1: DecaySchedule::lambda1_default(),
            lambda2: DecaySchedule::lambda2_default(),
            temperature: 2.0,
            detach_align: false,
            lb_variant: LbVariant::Kl,
            weight_dkd_by_confidence: false,
            tau_squared: false,
            fresh_weights: false,
        }
    }
}

impl StagePlan {
    /// Stage toggles of the six ablation rows `a`..=`f`.
    pub fn ablation(setting: char) -> Result<Self> {
        let (s1, s2, s3) = match setting {
            'a' => (false, false, false),
            'b' => (false, false, true),
            'c' => (true, false, true),
            'd' => (false, true, true),
            'e' => (true, true, false),
            'f' => (true, true, true),
            other => return Err(Error::config(format!("unknown ablation setting `{other}`"))),
        };
        Ok(Self {
            s1,
            s2,
            s3,
            ..Self::default()
        })
    }

    pub fn with_stages(mut self, s1: bool, s2: bool, s3: bool) -> Self {
        self.s1 = s1;
        self.s2 = s2;
        self.s3 = s3;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Epochs {
    pub s1: u32,
    pub s2: u32,
    pub s3: u32,
    /// Single-stage baselines; `None` gives them `s1 + s3`.
    pub baseline: Option<u32>,
}

impl Default for Epochs {
    fn default() -> Self {
        Self {
            s1: 50,
            s2: 30,
            s3: 50,
            baseline: None,
        }
    }
}

impl Epochs {
    pub fn baseline(&self) -> u32 {
        self.baseline.unwrap_or(self.s1 + self.s3)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f32,
    pub optimizer: OptimizerKind,
    pub epochs: Epochs,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            epochs: Epochs::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// A config for the given synthetic data with every other field default.
    pub fn synthetic(spec: SyntheticSpec) -> Self {
        Self {
            version: CONFIG_VERSION,
            data: DataConfig {
                synthetic: Some(spec),
                path: None,
                ratios: default_ratios(),
            },
            models: ModelsConfig::default(),
            plan: StagePlan::default(),
            train: TrainConfig::default(),
            report: ReportConfig::default(),
        }
    }

    /// Number of modalities, read from the synthetic spec or the file header.
    pub fn modalities(&self) -> Result<usize> {
        Ok(self.dims()?.len())
    }

    fn dims(&self) -> Result<Vec<usize>> {
        match (&self.data.synthetic, &self.data.path) {
            (Some(s), None) => Ok(s.dims.clone()),
            (None, Some(p)) => Ok(data::load_external(p)?.dims()),
            _ => Err(Error::config("data needs exactly one of `synthetic` or `path`")),
        }
    }

    pub fn target(&self) -> Result<usize> {
        let m = self.modalities()?;
        let t = self.plan.target.unwrap_or(m);
        if t == 0 || t > m {
            return Err(Error::config(format!(
                "target modality must lie in 1..={m}, got {t}"
            )));
        }
        Ok(t)
    }

    /// Tapped layers per modality index, with the target's list emptied.
    pub fn taps_for(&self, target: usize) -> Result<Vec<Vec<usize>>> {
        let m = self.modalities()?;
        let depth = |i: usize| {
            if i == 0 {
                self.models.fusion_hidden.len()
            } else {
                self.models.hidden.len()
            }
        };
        let mut taps = match &self.models.taps {
            Some(t) => {
                if t.len() != m + 1 {
                    return Err(Error::config(format!(
                        "models.taps has {} entries, expected one per modality index 0..={m}",
                        t.len()
                    )));
                }
                t.clone()
            }
            None => (0..=m)
                .map(|i| {
                    let last = depth(i) - 1;
                    let mut v = vec![last / 2, last];
                    v.dedup();
                    v
                })
                .collect(),
        };
        for (i, list) in taps.iter().enumerate() {
            if let Some(&bad) = list.iter().find(|&&l| l >= depth(i)) {
                return Err(Error::config(format!(
                    "tap {bad} does not exist on model m{i} ({} trunk layers)",
                    depth(i)
                )));
            }
        }
        taps[target].clear();
        Ok(taps)
    }

    pub fn teacher_count(&self) -> Result<usize> {
        Ok(self.taps_for(self.target()?)?.iter().map(Vec::len).sum())
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.dims()?;
        if let Some(s) = &self.data.synthetic {
            s.validate()?;
        }
        let [a, b, c] = self.data.ratios;
        if [a, b, c].iter().any(|r| !(*r > 0.0)) || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::config("data.ratios must be positive and sum to 1"));
        }
        if dims.len() < 2 {
            return Err(Error::config("need at least 2 modalities"));
        }
        let m = &self.models;
        if m.hidden.is_empty() || m.encoder_hidden.is_empty() || m.fusion_hidden.is_empty() {
            return Err(Error::config("hidden, encoder_hidden and fusion_hidden must be non-empty"));
        }
        if m.hidden.iter().chain(&m.encoder_hidden).chain(&m.fusion_hidden).any(|&w| w == 0) {
            return Err(Error::config("layer widths must be positive"));
        }
        if m.heads == 0 || m.masknet_hidden == 0 || !m.masknet_hidden.is_multiple_of(m.heads) {
            return Err(Error::config(format!(
                "masknet_hidden {} must be a positive multiple of heads {}",
                m.masknet_hidden, m.heads
            )));
        }
        if m.gatenet_hidden == Some(0) {
            return Err(Error::config("gatenet_hidden must be positive"));
        }
        let target = self.target()?;
        let n = self.teacher_count()?;
        let p = &self.plan;
        if n == 0 {
            return Err(Error::config("no teachers: every non-target tap list is empty"));
        }
        if p.s3 && n < 2 {
            return Err(Error::config(format!("routing needs at least 2 teachers, got {n}")));
        }
        if p.k == 0 || p.k > n {
            return Err(Error::config(format!("k = {} must lie in 1..={n}", p.k)));
        }
        p.lambda1.validate()?;
        p.lambda2.validate()?;
        if !(p.temperature > 0.0 && p.temperature.is_finite()) {
            return Err(Error::config("temperature must be positive"));
        }
        if p.fresh_weights && p.s1 {
            return Err(Error::config("fresh_weights only applies when s1 is disabled"));
        }
        let t = &self.train;
        if t.batch_size == 0 || !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(Error::config("batch_size and lr must be positive"));
        }
        if t.epochs.s1 == 0 || t.epochs.s3 == 0 || t.epochs.baseline() == 0 || (p.s2 && t.epochs.s2 == 0) {
            return Err(Error::config("epoch counts of enabled stages must be positive"));
        }
        let _ = target;
        Ok(())
    }

    /// Generate or load the dataset and split it under `seed`.
    pub fn dataset(&self, seed: u64) -> Result<DatasetBundle> {
        let bundle = match (&self.data.synthetic, &self.data.path) {
            (Some(s), None) => data::generate(s)?,
            (None, Some(p)) => data::load_external(p)?,
            _ => return Err(Error::config("data needs exactly one of `synthetic` or `path`")),
        };
        let [a, b, c] = self.data.ratios;
        data::split(bundle, (a, b, c), seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
version = 1
[data.synthetic]
classes = 4
samples = 200
dims = [8, 8]
informativeness = [1.0, 0.3]
shared_factor = 0.7
noise_sigma = 0.5
seed = 0
"#;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.train.epochs.s1, 50);
        assert_eq!(cfg.train.epochs.baseline(), 100);
        assert_eq!(cfg.target().unwrap(), 2);
        assert_eq!(cfg.teacher_count().unwrap(), 4);
        assert_eq!(cfg.taps_for(2).unwrap(), vec![vec![0, 1], vec![0, 1], vec![]]);
        assert_eq!(cfg.report.seeds.len(), 5);
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected_everywhere() {
        for extra in [
            "bogus = 1\n",
            "[plan]\nbogus = 1\n",
            "[train]\nbogus = 1\n",
            "[train.epochs]\nbogus = 1\n",
            "[models]\nbogus = 1\n",
            "[report]\nbogus = 1\n",
            "[plan.lambda1]\ninitial = 1.0\nrule = \"constant\"\nbogus = 2\n",
        ] {
            let text = if extra.starts_with('[') {
                format!("{MINIMAL}{extra}")
            } else {
                format!("{extra}{MINIMAL}")
            };
            assert!(matches!(RunConfig::from_toml(&text), Err(Error::Config(_))), "{extra}");
        }
    }

    #[test]
    fn invariant_violations_rejected() {
        for extra in [
            "[plan]\nk = 5\n",
            "[plan]\ntarget = 0\n",
            "[plan]\ntarget = 3\n",
            "[models]\ntaps = [[0], [7], []]\n",
            "[models]\ntaps = [[0], [0]]\n",
            "[models]\nmasknet_hidden = 10\n",
            "[plan]\ntemperature = 0.0\n",
            "[plan]\nfresh_weights = true\n",
        ] {
            let text = format!("{MINIMAL}{extra}");
            assert!(matches!(RunConfig::from_toml(&text), Err(Error::Config(_))), "{extra}");
        }
        let wrong_version = MINIMAL.replace("version = 1", "version = 2");
        assert!(RunConfig::from_toml(&wrong_version).is_err());
    }

    #[test]
    fn ablation_rows() {
        let rows: Vec<_> = "abcdef"
            .chars()
            .map(|c| {
                let p = StagePlan::ablation(c).unwrap();
                (p.s1, p.s2, p.s3)
            })
            .collect();
        assert_eq!(rows[0], (false, false, false));
        assert_eq!(rows[5], (true, true, true));
        let distinct: std::collections::HashSet<_> = rows.iter().collect();
        assert_eq!(distinct.len(), 6);
        assert_eq!(StagePlan::ablation('f').unwrap(), StagePlan::default());
        assert!(StagePlan::ablation('g').is_err());
    }
}
