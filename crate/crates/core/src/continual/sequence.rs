use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    precompute_pseudo_logits, save_checkpoint, stage_transition, train_stage, EpochLog, MethodKind, StageCheckpoint,
    StageRequest, TrainSettings,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{class_scores, dataset_error, retention, roc_curve, RocCurve};
use crate::network::{Network, NetworkSpec};
use crate::tensor::GroupId;

/// Everything a trial needs besides data and seed.
#[derive(Clone, Debug)]
pub struct SequencePlan {
    pub method: MethodKind,
    pub network: NetworkSpec,
    pub settings: TrainSettings,
    pub config_hash: String,
    /// Auxiliary-head class treated as positive for ROC analysis.
    pub positive_class: usize,
}

/// Center chunks in training order plus shared validation and test sets.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub chunks: Vec<Dataset>,
    pub val: Dataset,
    pub test: Dataset,
    pub split_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub val_error: f64,
    pub test_error: f64,
    pub best_epoch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_auc: Option<f64>,
    pub history: Vec<EpochLog>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub method: MethodKind,
    pub seed: u64,
    pub split_hash: String,
    pub config_hash: String,
    pub stages: Vec<StageReport>,
    /// Fraction of the first center's chunk classified correctly after the
    /// final stage.
    pub retention: f64,
    /// Final-stage ROC on the test set, for networks with an auxiliary head.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roc: Option<RocCurve>,
    /// Final-stage positive-class scores on the test set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_scores: Option<Vec<f64>>,
    /// Whether each test example belongs to the positive class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_positive: Option<Vec<bool>>,
}

/// Auxiliary-head scores on the test set with their ROC curve.
type AuxScores = Option<(Vec<f64>, RocCurve)>;

fn aux_scores(net: &Network, ckpt: &StageCheckpoint<f32>, test: &Dataset, class: usize) -> Result<AuxScores> {
    if net.spec().aux_head.is_none() {
        return Ok(None);
    }
    let scores = class_scores(net, &ckpt.params, test, GroupId::AuxHead, class, 256)?;
    let positive: Vec<bool> = test.examples.iter().map(|e| e.label == class).collect();
    let roc = roc_curve(&scores, &positive)?;
    Ok(Some((scores, roc)))
}

/// Runs all stages of one trial. Checkpoints and stored logits are written
/// under `out_dir` when given.
pub fn run_sequence(
    plan: &SequencePlan,
    data: &PreparedData,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<(SequenceReport, Vec<StageCheckpoint<f32>>)> {
    if data.chunks.is_empty() {
        return Err(Error::Empty("center chunks"));
    }
    let net = Network::new(plan.network.clone())?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut checkpoints: Vec<StageCheckpoint<f32>> = Vec::new();
    let mut stages = Vec::new();
    let mut final_scores = None;

    for (i, chunk) in data.chunks.iter().enumerate() {
        let stage = i + 1;
        let run = || -> Result<(StageCheckpoint<f32>, StageReport, AuxScores)> {
            let prev = checkpoints.last();
            let init = stage_transition(&net, plan.method, stage, prev, seed)?;
            let pseudo = match prev {
                Some(p) if !init.preserved.is_empty() => {
                    let store = precompute_pseudo_logits(&net, p, chunk, &init.preserved, plan.settings.eval_batch)?;
                    if let Some(dir) = out_dir {
                        store.save_csv(&dir.join(format!("pseudo-stage-{stage}.csv")))?;
                    }
                    Some(store)
                }
                _ => None,
            };
            let outcome = train_stage(StageRequest {
                net: &net,
                method: plan.method,
                stage,
                init,
                chunk,
                val: &data.val,
                settings: &plan.settings,
                seed,
                pseudo: pseudo.as_ref(),
                prev,
            })?;
            let mut ckpt = outcome.checkpoint;
            ckpt.config_hash = plan.config_hash.clone();
            if let Some(dir) = out_dir {
                save_checkpoint(&ckpt, &dir.join(format!("stage-{stage}.ckpt")))?;
            }
            let scores = aux_scores(&net, &ckpt, &data.test, plan.positive_class)?;
            let report = StageReport {
                stage,
                val_error: ckpt.val_error,
                test_error: dataset_error(&net, &ckpt.params, &data.test, plan.settings.eval_batch)?,
                best_epoch: outcome.best_epoch,
                test_auc: scores.as_ref().map(|(_, r)| r.auc),
                history: outcome.history,
            };
            Ok((ckpt, report, scores))
        };
        let (ckpt, report, scores) = run().map_err(|e| Error::StageFailed { stage, source: Box::new(e) })?;
        checkpoints.push(ckpt);
        stages.push(report);
        final_scores = scores;
    }

    let last = checkpoints.last().expect("at least one stage");
    let retention = retention(&net, &last.params, &data.chunks[0])?;
    let (test_scores, roc) = match final_scores {
        Some((s, r)) => (Some(s), Some(r)),
        None => (None, None),
    };
    let test_positive = test_scores
        .as_ref()
        .map(|_| data.test.examples.iter().map(|e| e.label == plan.positive_class).collect());
    let report = SequenceReport {
        method: plan.method,
        seed,
        split_hash: data.split_hash.clone(),
        config_hash: plan.config_hash.clone(),
        stages,
        retention,
        roc,
        test_scores,
        test_positive,
    };
    Ok((report, checkpoints))
}
