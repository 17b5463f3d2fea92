use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::rng::{stream, tag};
use crate::tensor::{exec, softmax_rows, GroupId, ParamSet, ParamSubset, Real, Tape, Targets};

/// Non-negative diagonal Fisher estimate aligned with an anchor subset.
#[derive(Clone, Debug, PartialEq)]
pub struct FisherDiag<T>(ParamSubset<T>);

impl<T: Real> FisherDiag<T> {
    pub fn new(subset: ParamSubset<T>) -> Result<Self> {
        let bad = subset.entries.iter().flat_map(|(_, t)| t.data()).any(|v| !(*v >= T::zero()) || !v.is_finite());
        if bad {
            return Err(Error::Validation("Fisher diagonal entries must be finite and non-negative".into()));
        }
        Ok(FisherDiag(subset))
    }

    pub fn subset(&self) -> &ParamSubset<T> {
        &self.0
    }

    pub fn into_subset(self) -> ParamSubset<T> {
        self.0
    }
}

/// Groups carrying an EWC penalty: the backbone and the new head.
pub const EWC_GROUPS: [GroupId; 2] = [GroupId::Shared, GroupId::NewHead];

fn sample_class(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (c, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return c;
        }
    }
    probs.len() - 1
}

/// Empirical diagonal Fisher of the main head over `data`.
///
/// For every example a label is drawn from the model's own predictive
/// distribution and the squared gradient of its log-likelihood is averaged
/// over examples. Examples are visited in id order and summed in that order,
/// so the estimate is independent of thread count.
pub fn estimate_fisher_diag<T: Real>(
    net: &Network,
    params: &ParamSet<T>,
    data: &Dataset,
    seed: u64,
    stage: usize,
) -> Result<FisherDiag<T>> {
    if data.is_empty() {
        return Err(Error::Empty("Fisher estimation data"));
    }
    let mut order: Vec<&crate::data::Example> = data.examples.iter().collect();
    order.sort_by_key(|e| e.id);
    let template = params.subset(&EWC_GROUPS)?;

    let per_example = exec::map_indexed(order.len(), |i| -> Result<Vec<Vec<T>>> {
        let ex = order[i];
        let mut tape = Tape::new();
        let vars = params.bind_only(&mut tape, |g| EWC_GROUPS.contains(&g))?;
        let x = tape.leaf(&data.batch_tensor::<T>(&[ex])?, false)?;
        let z = net.backbone_forward(&mut tape, &vars, x)?;
        let (_, logits) = net.head_logits(&mut tape, &vars, GroupId::NewHead, z)?;
        let probs: Vec<f64> =
            softmax_rows(tape.value(logits), net.classes(), T::one()).iter().map(|p| p.as_f64()).collect();
        let u: f64 = stream(seed, &[tag::FISHER, stage as u64, ex.id]).gen();
        let y = sample_class(&probs, u);
        let nll = tape.softmax_cross_entropy(logits, &Targets::Index(vec![y]), T::one())?;
        tape.backward(nll)?;
        template
            .keys()
            .map(|k| {
                let v = vars.get(k.group, k.index)?;
                let g = tape.grad(v).ok_or_else(|| Error::MissingGradient(format!("{}[{}]", k.group, k.index)))?;
                Ok(g.iter().map(|&d| d * d).collect())
            })
            .collect()
    });

    let mut acc = template.zeros_like();
    for sq in per_example {
        for ((_, t), s) in acc.entries.iter_mut().zip(sq?) {
            t.data_mut().iter_mut().zip(s).for_each(|(a, v)| *a += v);
        }
    }
    let n = T::of(order.len() as f64);
    for (_, t) in acc.entries.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v /= n);
    }
    FisherDiag::new(acc)
}
