//! Sequential multi-center training: the seven methods, their loss
//! compositions, the stage lifecycle and the per-stage training loop.

mod checkpoint;
mod fisher;
mod lifecycle;
mod loss;
mod pseudo;
mod sequence;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, CheckpointManifest, StageCheckpoint};
pub use fisher::{estimate_fisher_diag, FisherDiag, EWC_GROUPS};
pub use lifecycle::{source_head, stage_transition, StageInit};
pub use loss::{
    compose_loss, distillation_term, ewc_penalty, ewc_penalty_value, lwf_weight, stage_objective, BatchTargets,
    LossParts,
};
pub use pseudo::{precompute_pseudo_logits, PseudoLogitStore};
pub use sequence::{run_sequence, PreparedData, SequencePlan, SequenceReport, StageReport};
pub use train::{train_stage, EpochLog, StageOutcome, StageRequest, TrainSettings};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MethodKind {
    FT,
    EWC,
    LwF,
    #[serde(alias = "LwF+")]
    LwFPlus,
    EWCLwF,
    #[serde(alias = "EWCLwF+")]
    EWCLwFPlus,
    Proposed,
}

/// How a method keeps pseudo-label heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preservation {
    None,
    /// One old head per past stage.
    PerStage,
    /// A single merged old head.
    Single,
}

impl MethodKind {
    pub const ALL: [MethodKind; 7] = [
        MethodKind::FT,
        MethodKind::EWC,
        MethodKind::LwF,
        MethodKind::LwFPlus,
        MethodKind::EWCLwF,
        MethodKind::EWCLwFPlus,
        MethodKind::Proposed,
    ];

    pub fn uses_ewc(self) -> bool {
        matches!(self, MethodKind::EWC | MethodKind::EWCLwF | MethodKind::EWCLwFPlus)
    }

    pub fn preservation(self) -> Preservation {
        match self {
            MethodKind::FT | MethodKind::EWC => Preservation::None,
            MethodKind::LwF | MethodKind::EWCLwF => Preservation::PerStage,
            MethodKind::LwFPlus | MethodKind::EWCLwFPlus | MethodKind::Proposed => Preservation::Single,
        }
    }

    pub fn uses_reconstruction(self) -> bool {
        self == MethodKind::Proposed
    }

    /// Display name used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            MethodKind::FT => "FT",
            MethodKind::EWC => "EWC",
            MethodKind::LwF => "LwF",
            MethodKind::LwFPlus => "LwF+",
            MethodKind::EWCLwF => "EWCLwF",
            MethodKind::EWCLwFPlus => "EWCLwF+",
            MethodKind::Proposed => "Proposed",
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodKind::ALL
            .into_iter()
            .find(|m| m.label().eq_ignore_ascii_case(s) || format!("{m:?}").eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Validation(format!("unknown method `{s}`")))
    }
}

fn default_lwf() -> f64 {
    0.1
}
fn default_rec() -> f64 {
    1.0
}
fn default_ewc() -> f64 {
    1.0
}
fn default_temperature() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Numerator of the per-head LwF weight `base / (K − 1)`.
    #[serde(default = "default_lwf")]
    pub lambda_lwf_base: f64,
    #[serde(default = "default_lwf")]
    pub lambda_lwf_plus: f64,
    #[serde(default = "default_ewc")]
    pub lambda_ewc: f64,
    #[serde(default = "default_rec")]
    pub lambda_rec: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_lwf_base: default_lwf(),
            lambda_lwf_plus: default_lwf(),
            lambda_ewc: default_ewc(),
            lambda_rec: default_rec(),
            temperature: default_temperature(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_lwf_base, self.lambda_lwf_plus, self.lambda_ewc, self.lambda_rec];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Validation("loss weights must be finite and non-negative".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Validation("temperature must be positive".into()));
        }
        Ok(())
    }

    /// Per-head LwF weight at stage `k`.
    pub fn lwf(&self, k: usize) -> Result<f64> {
        Ok(lwf_weight(k)? * self.lambda_lwf_base / 0.1)
    }
}

/// Step-decay learning rate schedule, epochs counted from 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_period: usize,
    pub epochs: usize,
}

impl Schedule {
    /// 0.1, ×0.1 every 40 epochs, 120 epochs.
    pub fn cifar() -> Self {
        Schedule { lr0: 0.1, decay_factor: 0.1, decay_period: 40, epochs: 120 }
    }

    /// 0.01, ×0.1 every 20 epochs, 80 epochs.
    pub fn cxr() -> Self {
        Schedule { lr0: 0.01, decay_factor: 0.1, decay_period: 20, epochs: 80 }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let period = self.decay_period.max(1);
        self.lr0 * self.decay_factor.powi((epoch.saturating_sub(1) / period) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || !(self.decay_factor > 0.0) || self.epochs == 0 || self.decay_period == 0 {
            return Err(Error::Validation("schedule needs lr0 > 0, decay_factor > 0, epochs ≥ 1, period ≥ 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cifar_schedule_steps() {
        let s = Schedule::cifar();
        let lrs: Vec<f64> = [1, 40, 41, 81, 120].iter().map(|&e| s.lr_at(e)).collect();
        let want = [0.1, 0.1, 0.01, 0.001, 0.001];
        for (a, b) in lrs.iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{lrs:?}");
        }
        assert!((Schedule::cxr().lr_at(21) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn method_names_parse() {
        for m in MethodKind::ALL {
            assert_eq!(m.label().parse::<MethodKind>().unwrap(), m);
            assert_eq!(format!("{m:?}").parse::<MethodKind>().unwrap(), m);
        }
        let m: MethodKind = serde_json::from_str("\"LwF+\"").unwrap();
        assert_eq!(m, MethodKind::LwFPlus);
    }

    #[test]
    fn default_weights() {
        let w: LossWeights = serde_json::from_str("{}").unwrap();
        assert_eq!(w, LossWeights::default());
        assert_eq!((w.lambda_lwf_plus, w.lambda_rec), (0.1, 1.0));
        assert!((w.lwf(4).unwrap() - 0.1 / 3.0).abs() < 1e-15);
    }
}
