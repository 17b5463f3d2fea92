//! Error rates, retention, ROC/AUC and cross-trial aggregation.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::{softmax_rows, GroupId, ParamSet, Real};

/// Logits of `head` for every example of `data`, row-major.
pub fn predict_logits<T: Real>(
    net: &Network,
    params: &ParamSet<T>,
    data: &Dataset,
    head: GroupId,
    batch_size: usize,
) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for batch in data.examples.chunks(batch_size.max(1)) {
        let refs: Vec<_> = batch.iter().collect();
        let mut logits = net.predict(params, data.batch_tensor::<T>(&refs)?, &[head])?;
        out.append(&mut logits[0]);
    }
    Ok(out)
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn argmax_rows<T: Real>(values: &[T], classes: usize) -> Vec<usize> {
    values
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Main-head class predictions.
pub fn predict_classes<T: Real>(net: &Network, params: &ParamSet<T>, data: &Dataset, batch_size: usize) -> Result<Vec<usize>> {
    let logits = predict_logits(net, params, data, GroupId::NewHead, batch_size)?;
    Ok(argmax_rows(&logits, net.classes()))
}

/// Softmax probability of `class` under `head`, per example.
pub fn class_scores<T: Real>(
    net: &Network,
    params: &ParamSet<T>,
    data: &Dataset,
    head: GroupId,
    class: usize,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let classes = match head {
        GroupId::AuxHead => net.spec().aux_head.as_ref().ok_or_else(|| Error::MissingGroup("aux_head spec".into()))?.classes,
        _ => net.classes(),
    };
    if class >= classes {
        return Err(Error::Validation(format!("class {class} out of range {classes}")));
    }
    let logits = predict_logits(net, params, data, head, batch_size)?;
    let probs = softmax_rows(&logits, classes, T::one());
    Ok(probs.chunks_exact(classes).map(|r| r[class].as_f64()).collect())
}

/// Fraction of predictions that differ from the labels.
pub fn error_rate(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::shape("error_rate", format!("{} predictions, {} labels", predictions.len(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::Empty("error_rate labels"));
    }
    let wrong = predictions.iter().zip(labels).filter(|(p, l)| p != l).count();
    Ok(wrong as f64 / labels.len() as f64)
}

/// Main-head error of `params` on `data`.
pub fn dataset_error<T: Real>(net: &Network, params: &ParamSet<T>, data: &Dataset, batch_size: usize) -> Result<f64> {
    let labels: Vec<usize> = data.examples.iter().map(Dataset::main_label).collect();
    error_rate(&predict_classes(net, params, data, batch_size)?, &labels)
}

/// Fraction of the first center's training chunk that the final
/// parameters still classify correctly.
pub fn retention<T: Real>(net: &Network, final_params: &ParamSet<T>, first_chunk: &Dataset) -> Result<f64> {
    Ok(1.0 - dataset_error(net, final_params, first_chunk, 256)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(false positive rate, true positive rate)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// ROC curve over thresholds at every distinct score, with tied scores
/// grouped into one step, and its trapezoidal area.
pub fn roc_curve(scores: &[f64], positive: &[bool]) -> Result<RocCurve> {
    if scores.len() != positive.len() {
        return Err(Error::shape("roc_curve", format!("{} scores, {} labels", scores.len(), positive.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("ROC scores"));
    }
    let p = positive.iter().filter(|&&b| b).count();
    let n = positive.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::Validation("ROC needs both positive and negative examples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (mut tp, mut fp) = (0u64, 0u64);
    // twice the area times p·n, kept in integers so ties are exact
    let mut area2 = 0u128;
    let mut points = vec![(0.0, 0.0)];
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += (fp - fp0) as u128 * (tp + tp0) as u128;
        points.push((fp as f64 / n as f64, tp as f64 / p as f64));
    }
    Ok(RocCurve { points, auc: area2 as f64 / (2 * p * n) as f64 })
}

pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    Ok(roc_curve(scores, positive)?.auc)
}

/// Element-wise mean of per-model score vectors.
pub fn ensemble_scores(members: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = members.first().ok_or(Error::Empty("ensemble members"))?;
    if members.iter().any(|m| m.len() != first.len()) {
        return Err(Error::shape("ensemble_scores", "members score different example counts"));
    }
    let k = members.len() as f64;
    Ok((0..first.len()).map(|i| members.iter().map(|m| m[i]).sum::<f64>() / k).collect())
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn mean_std(values: &[f64]) -> Result<MeanStd> {
    if values.is_empty() {
        return Err(Error::Empty("aggregate values"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(MeanStd { mean, std: var.sqrt(), n: values.len() })
}
