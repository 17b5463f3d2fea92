use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{estimate_fisher_diag, stage_objective, BatchTargets, LossWeights, MethodKind, PseudoLogitStore, Schedule};
use super::{StageCheckpoint, StageInit, EWC_GROUPS};
use crate::data::{pad_crop_augment, Dataset, Example};
use crate::error::{Error, Result};
use crate::metrics::dataset_error;
use crate::network::Network;
use crate::rng::{stream, tag};
use crate::tensor::{Real, SgdMomentum, Tape, Tensor};

fn default_momentum() -> f64 {
    0.9
}
fn default_eval_batch() -> usize {
    256
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub schedule: Schedule,
    pub batch_size: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub weight_decay: f64,
    /// Zero-padding for random crops; 0 disables augmentation.
    pub augment_pad: usize,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.weights.validate()?;
        if self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::Validation("batch sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Validation("momentum must be in [0, 1) and weight decay non-negative".into()));
        }
        Ok(())
    }
}

pub struct StageRequest<'a, T> {
    pub net: &'a Network,
    pub method: MethodKind,
    pub stage: usize,
    pub init: StageInit<T>,
    pub chunk: &'a Dataset,
    pub val: &'a Dataset,
    pub settings: &'a TrainSettings,
    pub seed: u64,
    /// Stored logits for the preserved heads (stages ≥ 2 of preserving methods).
    pub pseudo: Option<&'a PseudoLogitStore>,
    /// Previous checkpoint, whose anchor and Fisher drive the EWC penalty.
    pub prev: Option<&'a StageCheckpoint<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub val_error: f64,
}

#[derive(Clone, Debug)]
pub struct StageOutcome<T> {
    pub checkpoint: StageCheckpoint<T>,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
}

fn batch_targets<T: Real>(
    net: &Network,
    examples: &[&Example],
    preserved: &[crate::tensor::GroupId],
    pseudo: Option<&PseudoLogitStore>,
) -> Result<BatchTargets<T>> {
    let labels = examples.iter().map(|e| Dataset::main_label(e)).collect();
    let aux_labels = net.spec().aux_head.as_ref().map(|_| examples.iter().map(|e| e.label).collect());
    let mut stored = Vec::with_capacity(preserved.len());
    for &head in preserved {
        let store = pseudo.ok_or_else(|| Error::MissingHead(format!("no pseudo-logit store for {head}")))?;
        let mut rows = Vec::with_capacity(examples.len() * net.classes());
        for e in examples {
            rows.extend(store.get(e.id, head)?.iter().map(|&v| T::of(v as f64)));
        }
        stored.push((head, rows));
    }
    Ok(BatchTargets { labels, aux_labels, stored })
}

/// Trains one stage and keeps the parameters with the lowest validation
/// error (earliest epoch on ties).
pub fn train_stage<T: Real>(req: StageRequest<'_, T>) -> Result<StageOutcome<T>> {
    let StageRequest { net, method, stage, init, chunk, val, settings, seed, pseudo, prev } = req;
    settings.validate()?;
    if chunk.is_empty() {
        return Err(Error::Empty("training chunk"));
    }
    if chunk.shape != net.input_shape() || chunk.main_classes() != net.classes() {
        return Err(Error::shape(
            "train_stage",
            format!("chunk {:?} with {} classes vs network {:?}", chunk.shape, chunk.main_classes(), net.input_shape()),
        ));
    }
    if !init.preserved.is_empty() {
        pseudo.ok_or_else(|| Error::MissingHead("preserved heads need stored logits".into()))?.covers(&chunk.ids(), &init.preserved)?;
    }
    let ewc = if method.uses_ewc() && stage >= 2 {
        let p = prev.ok_or_else(|| Error::Stage("EWC needs the previous checkpoint".into()))?;
        match (&p.anchor, &p.fisher) {
            (Some(a), Some(f)) => Some((a, f)),
            _ => return Err(Error::Stage(format!("stage {} checkpoint has no EWC state", p.stage))),
        }
    } else {
        None
    };

    let StageInit { mut params, preserved } = init;
    let sched = &settings.schedule;
    let mut opt = SgdMomentum::new(T::of(sched.lr0), T::of(settings.momentum), T::of(settings.weight_decay));
    let mut best = (f64::INFINITY, 0usize, params.clone());
    let mut history = Vec::with_capacity(sched.epochs);
    let [h, w, c] = chunk.shape;

    for epoch in 1..=sched.epochs {
        let lr = sched.lr_at(epoch);
        opt.lr = T::of(lr);
        let mut order: Vec<usize> = (0..chunk.len()).collect();
        order.shuffle(&mut stream(seed, &[tag::SHUFFLE, stage as u64, epoch as u64]));
        let mut loss_sum = 0.0;
        for idx in order.chunks(settings.batch_size) {
            let examples: Vec<&Example> = idx.iter().map(|&i| &chunk.examples[i]).collect();
            let mut pixels = Vec::with_capacity(examples.len() * h * w * c);
            for e in &examples {
                let mut rng = stream(seed, &[tag::AUGMENT, stage as u64, epoch as u64, e.id]);
                let img = pad_crop_augment(&e.image, chunk.shape, settings.augment_pad, &mut rng);
                pixels.extend(img.into_iter().map(|v| T::of(v as f64)));
            }
            let x = Tensor::new(vec![examples.len(), h, w, c], pixels)?;
            let targets = batch_targets(net, &examples, &preserved, pseudo)?;

            let mut tape = Tape::new();
            let vars = params.bind(&mut tape)?;
            let (loss, _) = stage_objective(&mut tape, net, &vars, method, stage, &x, &targets, &settings.weights, ewc)?;
            tape.backward(loss)?;
            params.accumulate_grads(&tape, &vars);
            opt.step(&mut params)?;
            loss_sum += tape.scalar(loss).as_f64() * examples.len() as f64;
        }
        let val_error = dataset_error(net, &params, val, settings.eval_batch)?;
        if val_error < best.0 {
            best = (val_error, epoch, params.clone());
        }
        history.push(EpochLog { epoch, lr, mean_loss: loss_sum / chunk.len() as f64, val_error });
    }

    let (val_error, best_epoch, params) = best;
    let mut checkpoint = StageCheckpoint::new(stage, method, params, val_error, seed);
    if method.uses_ewc() {
        let fisher = estimate_fisher_diag(net, &checkpoint.params, chunk, seed, stage)?;
        checkpoint.anchor = Some(checkpoint.params.subset(&EWC_GROUPS)?);
        checkpoint.fisher = Some(fisher);
    }
    Ok(StageOutcome { checkpoint, history, best_epoch })
}
