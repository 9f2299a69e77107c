//! Step-decay schedules for the distillation and load-balancing weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecayRule {
    Constant,
    HalveEveryNEpochs { n: u32 },
    MultiplyEveryNEpochs { factor: f64, n: u32 },
}

/// `value_at(e) = initial * factor^(e / n)` with integer division, so the
/// value changes exactly at epochs `n, 2n, ...` (epochs count from 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSchedule", into = "RawSchedule")]
pub struct DecaySchedule {
    pub initial: f64,
    pub rule: DecayRule,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchedule {
    initial: f64,
    rule: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    n: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    factor: Option<f64>,
}

impl TryFrom<RawSchedule> for DecaySchedule {
    type Error = Error;

    fn try_from(raw: RawSchedule) -> Result<Self> {
        let need_n = || {
            raw.n
                .ok_or_else(|| Error::config(format!("schedule rule `{}` needs `n`", raw.rule)))
        };
        let rule = match raw.rule.as_str() {
            "constant" => DecayRule::Constant,
            "halve_every_n_epochs" => DecayRule::HalveEveryNEpochs { n: need_n()? },
            "multiply_every_n_epochs" => DecayRule::MultiplyEveryNEpochs {
                factor: raw
                    .factor
                    .ok_or_else(|| Error::config("schedule rule `multiply_every_n_epochs` needs `factor`"))?,
                n: need_n()?,
            },
            other => return Err(Error::config(format!("unknown schedule rule `{other}`"))),
        };
        let s = DecaySchedule {
            initial: raw.initial,
            rule,
        };
        s.validate()?;
        Ok(s)
    }
}

impl From<DecaySchedule> for RawSchedule {
    fn from(s: DecaySchedule) -> Self {
        let (rule, n, factor) = match s.rule {
            DecayRule::Constant => ("constant", None, None),
            DecayRule::HalveEveryNEpochs { n } => ("halve_every_n_epochs", Some(n), None),
            DecayRule::MultiplyEveryNEpochs { factor, n } => {
                ("multiply_every_n_epochs", Some(n), Some(factor))
            }
        };
        RawSchedule {
            initial: s.initial,
            rule: rule.to_string(),
            n,
            factor,
        }
    }
}

impl DecaySchedule {
    pub fn constant(initial: f64) -> Self {
        Self {
            initial,
            rule: DecayRule::Constant,
        }
    }

    /// λ₁ default: 1.0, halved every 30 epochs.
    pub fn lambda1_default() -> Self {
        Self {
            initial: 1.0,
            rule: DecayRule::HalveEveryNEpochs { n: 30 },
        }
    }

    /// λ₂ default: 1.0, reduced by 10% every 10 epochs.
    pub fn lambda2_default() -> Self {
        Self {
            initial: 1.0,
            rule: DecayRule::MultiplyEveryNEpochs { factor: 0.9, n: 10 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial >= 0.0 && self.initial.is_finite()) {
            return Err(Error::config(format!(
                "schedule initial value must be finite and >= 0, got {}",
                self.initial
            )));
        }
        match self.rule {
            DecayRule::Constant => Ok(()),
            DecayRule::HalveEveryNEpochs { n } | DecayRule::MultiplyEveryNEpochs { n, .. }
                if n == 0 =>
            {
                Err(Error::config("schedule period must be at least 1 epoch"))
            }
            DecayRule::MultiplyEveryNEpochs { factor, .. } if !(0.0..=1.0).contains(&factor) => {
                Err(Error::config(format!(
                    "decay factor must lie in [0, 1], got {factor}"
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn value_at(&self, epoch: u32) -> f64 {
        let (factor, n) = match self.rule {
            DecayRule::Constant => return self.initial,
            DecayRule::HalveEveryNEpochs { n } => (0.5, n),
            DecayRule::MultiplyEveryNEpochs { factor, n } => (factor, n),
        };
        let steps = (epoch / n) as i32;
        self.initial * factor.powi(steps)
    }
}

pub fn schedule_value(s: &DecaySchedule, epoch: u32) -> f64 {
    s.value_at(epoch)
}
