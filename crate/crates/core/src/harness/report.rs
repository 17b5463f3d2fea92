//! Cross-trial aggregation and the report files written next to trials.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::continual::{MethodKind, SequenceReport};
use crate::error::{Error, Result};
use crate::metrics::{ensemble_scores, mean_std, roc_curve, MeanStd, RocCurve};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: MethodKind,
    pub seeds: Vec<u64>,
    pub stage_test_error: Vec<MeanStd>,
    pub retention: MeanStd,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_auc: Option<Vec<MeanStd>>,
    /// AUC of the mean final-stage score over trials.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble_auc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble_roc: Option<RocCurve>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub split_hash: String,
    pub stages: usize,
    /// Standard deviations are population (divide by n).
    pub std: String,
    pub methods: Vec<MethodSummary>,
}

/// Mean and population std per method and stage. Methods are ordered by
/// kind and trials by seed, so the result does not depend on run order.
pub fn aggregate_trials(reports: &[SequenceReport]) -> Result<Summary> {
    let first = reports.first().ok_or(Error::Empty("trial reports"))?;
    let stages = first.stages.len();
    for r in reports {
        if r.stages.len() != stages || r.split_hash != first.split_hash || r.config_hash != first.config_hash {
            return Err(Error::shape(
                "aggregate_trials",
                format!("trial {} seed {} does not match the first trial's stages, split or config", r.method, r.seed),
            ));
        }
    }
    let mut by_method: BTreeMap<MethodKind, Vec<&SequenceReport>> = BTreeMap::new();
    for r in reports {
        by_method.entry(r.method).or_default().push(r);
    }
    let mut methods = Vec::new();
    for (method, mut trials) in by_method {
        trials.sort_by_key(|r| r.seed);
        if trials.windows(2).any(|w| w[0].seed == w[1].seed) {
            return Err(Error::Validation(format!("duplicate seed for {method}")));
        }
        let per_stage = |f: &dyn Fn(&crate::continual::StageReport) -> Option<f64>| -> Result<Option<Vec<MeanStd>>> {
            (0..stages)
                .map(|k| {
                    let vals: Option<Vec<f64>> = trials.iter().map(|t| f(&t.stages[k])).collect();
                    vals.map(|v| mean_std(&v)).transpose()
                })
                .collect()
        };
        let stage_test_error = per_stage(&|s| Some(s.test_error))?.expect("always present");
        let stage_auc = per_stage(&|s| s.test_auc)?;
        let retention = mean_std(&trials.iter().map(|t| t.retention).collect::<Vec<_>>())?;
        let scored: Option<Vec<(&Vec<f64>, &Vec<bool>)>> =
            trials.iter().map(|t| t.test_scores.as_ref().zip(t.test_positive.as_ref())).collect();
        let ensemble_roc = match scored {
            Some(s) => {
                let labels = s[0].1;
                if s.iter().any(|(_, l)| *l != labels) {
                    return Err(Error::shape("aggregate_trials", "trials scored different test labels"));
                }
                let members: Vec<Vec<f64>> = s.iter().map(|(sc, _)| (*sc).clone()).collect();
                Some(roc_curve(&ensemble_scores(&members)?, labels)?)
            }
            None => None,
        };
        methods.push(MethodSummary {
            method,
            seeds: trials.iter().map(|t| t.seed).collect(),
            stage_test_error,
            retention,
            stage_auc,
            ensemble_auc: ensemble_roc.as_ref().map(|r| r.auc),
            ensemble_roc,
        });
    }
    Ok(Summary {
        config_hash: first.config_hash.clone(),
        split_hash: first.split_hash.clone(),
        stages,
        std: "population".into(),
        methods,
    })
}

fn pct(m: &MeanStd) -> String {
    format!("{:.2} ({:.2})", 100.0 * m.mean, 100.0 * m.std)
}

/// `method,stage1..stageS,retention` rows: test error and retention in
/// percent as `mean (std)`.
pub fn method_table(s: &Summary) -> String {
    let mut out = format!("# config_hash={} split_hash={} std=population unit=percent\nmethod", s.config_hash, s.split_hash);
    for k in 1..=s.stages {
        let _ = write!(out, ",stage{k}");
    }
    out.push_str(",retention\n");
    for m in &s.methods {
        out.push_str(m.method.label());
        for e in &m.stage_test_error {
            let _ = write!(out, ",{}", pct(e));
        }
        let _ = writeln!(out, ",{}", pct(&m.retention));
    }
    out
}

/// One row per stage, one test-error column per method.
pub fn stage_table(s: &Summary) -> String {
    let mut out = format!("# config_hash={} split_hash={} std=population unit=percent\nstage", s.config_hash, s.split_hash);
    for m in &s.methods {
        let _ = write!(out, ",{}", m.method.label());
    }
    out.push('\n');
    for k in 0..s.stages {
        let _ = write!(out, "{}", k + 1);
        for m in &s.methods {
            let _ = write!(out, ",{}", pct(&m.stage_test_error[k]));
        }
        out.push('\n');
    }
    out
}

pub fn roc_csv(roc: &RocCurve, config_hash: &str) -> String {
    let mut out = format!("# config_hash={config_hash} auc={}\nfpr,tpr\n", roc.auc);
    for (x, y) in &roc.points {
        let _ = writeln!(out, "{x},{y}");
    }
    out
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `table.csv`, `stages.csv`, `summary.json` and one ROC file per
/// method with auxiliary scores.
pub fn write_reports(dir: &Path, summary: &Summary) -> Result<()> {
    write(&dir.join("table.csv"), &method_table(summary))?;
    write(&dir.join("stages.csv"), &stage_table(summary))?;
    write(&dir.join("summary.json"), &(serde_json::to_string_pretty(summary)? + "\n"))?;
    for m in &summary.methods {
        if let Some(roc) = &m.ensemble_roc {
            write(&dir.join(format!("roc-{:?}.csv", m.method)), &roc_csv(roc, &summary.config_hash))?;
        }
    }
    Ok(())
}
