use super::{FisherDiag, LossWeights, MethodKind, Preservation};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::{softmax_rows, GroupId, ParamSet, ParamSubset, ParamVars, Real, Tape, Targets, Tensor, Var};

/// Loss terms computed for one batch, before weighting.
#[derive(Clone, Debug, Default)]
pub struct LossParts {
    pub task: Option<Var>,
    /// One distillation term per preserved head, in preserved order.
    pub distill: Vec<Var>,
    pub ewc: Option<Var>,
    pub rec: Option<Var>,
}

/// Per-head LwF weight `0.1 / (K − 1)` at stage `k ≥ 2`.
pub fn lwf_weight(k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::Stage(format!("LwF weight undefined at stage {k}")));
    }
    Ok(0.1 / (k - 1) as f64)
}

/// Cross-entropy between `softmax(stored / T)` and `softmax(current / T)`.
pub fn distillation_term<T: Real>(tape: &mut Tape<T>, current: Var, stored: &[T], temperature: T) -> Result<Var> {
    let shape = tape.shape(current).to_vec();
    if shape.len() != 2 || stored.len() != shape[0] * shape[1] {
        return Err(Error::shape("distillation_term", format!("{} stored logits for {shape:?}", stored.len())));
    }
    let targets = softmax_rows(stored, shape[1], temperature);
    tape.softmax_cross_entropy(current, &Targets::Probs(targets), temperature)
}

fn check_ewc_inputs<T: Real>(anchor: &ParamSubset<T>, fisher: &FisherDiag<T>) -> Result<()> {
    if !anchor.aligned_with(fisher.subset()) {
        return Err(Error::shape("ewc_penalty", "anchor and Fisher diagonal cover different parameters"));
    }
    Ok(())
}

/// `λ/2 · Σ F (θ − θ*)²` over the parameters covered by `fisher`.
pub fn ewc_penalty<T: Real>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    anchor: &ParamSubset<T>,
    fisher: &FisherDiag<T>,
    lambda: f64,
) -> Result<Var> {
    check_ewc_inputs(anchor, fisher)?;
    let coef = T::of(lambda / 2.0);
    let mut terms = Vec::with_capacity(anchor.entries.len());
    for ((key, a), (_, f)) in anchor.entries.iter().zip(&fisher.subset().entries) {
        let x = vars.get(key.group, key.index)?;
        if tape.shape(x) != a.shape() {
            return Err(Error::shape("ewc_penalty", format!("{}[{}] shape {:?}", key.group, key.index, tape.shape(x))));
        }
        terms.push((tape.weighted_sq_dist(x, a.data(), f.data(), coef)?, T::one()));
    }
    tape.weighted_sum(&terms)
}

/// Value of the EWC penalty for `params`, accumulated in `f64`.
pub fn ewc_penalty_value<T: Real>(
    params: &ParamSet<T>,
    anchor: &ParamSubset<T>,
    fisher: &FisherDiag<T>,
    lambda: f64,
) -> Result<f64> {
    check_ewc_inputs(anchor, fisher)?;
    let mut s = 0.0;
    for ((key, a), (_, f)) in anchor.entries.iter().zip(&fisher.subset().entries) {
        let p = params.get(*key)?;
        if p.tensor.shape() != a.shape() {
            return Err(Error::shape("ewc_penalty", format!("{}[{}]", key.group, key.index)));
        }
        for ((x, x0), w) in p.tensor.data().iter().zip(a.data()).zip(f.data()) {
            let d = x.as_f64() - x0.as_f64();
            s += w.as_f64() * d * d;
        }
    }
    Ok(lambda / 2.0 * s)
}

/// Combines the parts a method uses at stage `stage` into the total loss.
///
/// The parts must be exactly those the method defines for the stage; any
/// missing or extra term is rejected.
pub fn compose_loss<T: Real>(
    tape: &mut Tape<T>,
    method: MethodKind,
    stage: usize,
    parts: &LossParts,
    weights: &LossWeights,
) -> Result<Var> {
    let fail = |detail: String| Error::LossParts { method: method.to_string(), stage, detail };
    if stage == 0 {
        return Err(fail("stages are numbered from 1".into()));
    }
    let task = parts.task.ok_or_else(|| fail("missing task loss".into()))?;
    let later = stage >= 2;
    let want_distill = match (later, method.preservation()) {
        (false, _) | (true, Preservation::None) => 0,
        (true, Preservation::PerStage) => stage - 1,
        (true, Preservation::Single) => 1,
    };
    let want_ewc = later && method.uses_ewc();
    let want_rec = method.uses_reconstruction();
    if parts.distill.len() != want_distill {
        return Err(fail(format!("expected {want_distill} distillation terms, got {}", parts.distill.len())));
    }
    if parts.ewc.is_some() != want_ewc {
        return Err(fail(format!("EWC term {}", if want_ewc { "missing" } else { "not used" })));
    }
    if parts.rec.is_some() != want_rec {
        return Err(fail(format!("reconstruction term {}", if want_rec { "missing" } else { "not used" })));
    }

    let mut terms = vec![(task, T::one())];
    if want_distill > 0 {
        let w = match method.preservation() {
            Preservation::PerStage => weights.lwf(stage)?,
            _ => weights.lambda_lwf_plus,
        };
        terms.extend(parts.distill.iter().map(|&d| (d, T::of(w))));
    }
    if let Some(e) = parts.ewc {
        terms.push((e, T::one()));
    }
    if let Some(r) = parts.rec {
        terms.push((r, T::of(weights.lambda_rec)));
    }
    tape.weighted_sum(&terms)
}

/// Labels and stored logits for one batch.
#[derive(Clone, Debug)]
pub struct BatchTargets<T> {
    /// Main-head labels.
    pub labels: Vec<usize>,
    /// Auxiliary-head labels when the network has one.
    pub aux_labels: Option<Vec<usize>>,
    /// Stored logits per preserved head, `batch × classes` row-major.
    pub stored: Vec<(GroupId, Vec<T>)>,
}

/// Builds the full stage objective for a batch and returns `(loss, parts)`.
#[allow(clippy::too_many_arguments)]
pub fn stage_objective<T: Real>(
    tape: &mut Tape<T>,
    net: &Network,
    vars: &ParamVars,
    method: MethodKind,
    stage: usize,
    x: &Tensor<T>,
    targets: &BatchTargets<T>,
    weights: &LossWeights,
    ewc: Option<(&ParamSubset<T>, &FisherDiag<T>)>,
) -> Result<(Var, LossParts)> {
    let temp = T::of(weights.temperature);
    let xv = tape.leaf(x, false)?;
    let z = net.backbone_forward(tape, vars, xv)?;
    let (map_n, logits_n) = net.head_logits(tape, vars, GroupId::NewHead, z)?;
    let mut task = tape.softmax_cross_entropy(logits_n, &Targets::Index(targets.labels.clone()), T::one())?;
    if net.spec().aux_head.is_some() {
        let aux = targets.aux_labels.as_ref().ok_or_else(|| Error::Validation("missing auxiliary labels".into()))?;
        let (_, logits_a) = net.head_logits(tape, vars, GroupId::AuxHead, z)?;
        let ce = tape.softmax_cross_entropy(logits_a, &Targets::Index(aux.clone()), T::one())?;
        task = tape.weighted_sum(&[(task, T::one()), (ce, T::one())])?;
    }

    let mut parts = LossParts { task: Some(task), ..Default::default() };
    let mut old_map = None;
    for (head, stored) in &targets.stored {
        let (map, logits) = net.head_logits(tape, vars, *head, z)?;
        parts.distill.push(distillation_term(tape, logits, stored, temp)?);
        if *head == GroupId::OldHead(1) {
            old_map = Some(map);
        }
    }
    if method.uses_reconstruction() {
        // stage 1 trains h against the new head; later stages reuse the frozen pair
        let map = if stage == 1 {
            map_n
        } else {
            old_map.ok_or_else(|| Error::MissingHead("reconstruction needs stored logits for old_head_1".into()))?
        };
        let z_hat = net.inverse_forward(tape, vars, map)?;
        parts.rec = Some(tape.l2_reconstruction(z, z_hat)?);
    }
    if method.uses_ewc() && stage >= 2 {
        let (anchor, fisher) = ewc.ok_or_else(|| Error::Stage("EWC needs the previous anchor and Fisher".into()))?;
        parts.ewc = Some(ewc_penalty(tape, vars, anchor, fisher, weights.lambda_ewc)?);
    }
    let loss = compose_loss(tape, method, stage, &parts, weights)?;
    Ok((loss, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamKey, Tensor};

    fn scalar_var(tape: &mut Tape<f64>, v: f64) -> Var {
        tape.leaf(&Tensor::scalar(v), true).unwrap()
    }

    #[test]
    fn lwf_weights() {
        assert!((lwf_weight(2).unwrap() - 0.1).abs() < 1e-15);
        assert!((lwf_weight(4).unwrap() - 0.1 / 3.0).abs() < 1e-15);
        assert!(lwf_weight(1).is_err());
    }

    #[test]
    fn ewc_hand_value() {
        let key = ParamKey { group: GroupId::Shared, index: 0 };
        let anchor = ParamSubset { entries: vec![(key, Tensor::new(vec![2], vec![1.0, 1.0]).unwrap())] };
        let fisher =
            FisherDiag::new(ParamSubset { entries: vec![(key, Tensor::new(vec![2], vec![2.0, 0.5]).unwrap())] }).unwrap();
        let mut ps: ParamSet<f64> = ParamSet::new();
        let theta = Tensor::new(vec![2], vec![3.0, -1.0]).unwrap();
        ps.insert_group(GroupId::Shared, vec![crate::tensor::Param { name: "w".into(), tensor: theta }]).unwrap();
        // 0.5·(2·4 + 0.5·4) = 5
        assert!((ewc_penalty_value(&ps, &anchor, &fisher, 1.0).unwrap() - 5.0).abs() < 1e-12);
        let mut tape = Tape::new();
        let vars = ps.bind(&mut tape).unwrap();
        let e = ewc_penalty(&mut tape, &vars, &anchor, &fisher, 1.0).unwrap();
        assert!((tape.scalar(e) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn ewc_zero_at_anchor_or_zero_fisher() {
        let key = ParamKey { group: GroupId::Shared, index: 0 };
        let t = Tensor::new(vec![3], vec![0.3, -2.0, 5.0]).unwrap();
        let mut ps: ParamSet<f64> = ParamSet::new();
        ps.insert_group(GroupId::Shared, vec![crate::tensor::Param { name: "w".into(), tensor: t.clone() }]).unwrap();
        let anchor = ParamSubset { entries: vec![(key, t.clone())] };
        let f = FisherDiag::new(ParamSubset { entries: vec![(key, Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap())] })
            .unwrap();
        assert_eq!(ewc_penalty_value(&ps, &anchor, &f, 7.0).unwrap(), 0.0);
        let far = ParamSubset { entries: vec![(key, Tensor::new(vec![3], vec![9.0, 9.0, 9.0]).unwrap())] };
        let zero = FisherDiag::new(anchor.zeros_like()).unwrap();
        assert_eq!(ewc_penalty_value(&ps, &far, &zero, 7.0).unwrap(), 0.0);
    }

    #[test]
    fn compose_lwf_three_stages_back() {
        let mut tape = Tape::new();
        let task = scalar_var(&mut tape, 1.0);
        let distill: Vec<Var> = [0.3, 0.6, 0.9].iter().map(|&v| scalar_var(&mut tape, v)).collect();
        let parts = LossParts { task: Some(task), distill, ..Default::default() };
        let l = compose_loss(&mut tape, MethodKind::LwF, 4, &parts, &LossWeights::default()).unwrap();
        let want = 1.0 + 0.1 / 3.0 * (0.3 + 0.6 + 0.9);
        assert!((tape.scalar(l) - want).abs() < 1e-12);
    }

    #[test]
    fn compose_proposed_and_ft() {
        let w = LossWeights::default();
        let mut tape = Tape::new();
        let task = scalar_var(&mut tape, 2.0);
        let d = scalar_var(&mut tape, 0.5);
        let r = scalar_var(&mut tape, 0.25);
        let parts = LossParts { task: Some(task), distill: vec![d], rec: Some(r), ..Default::default() };
        let l = compose_loss(&mut tape, MethodKind::Proposed, 3, &parts, &w).unwrap();
        assert!((tape.scalar(l) - (2.0 + 0.05 + 0.25)).abs() < 1e-12);
        let s1 = LossParts { task: Some(task), rec: Some(r), ..Default::default() };
        let l1 = compose_loss(&mut tape, MethodKind::Proposed, 1, &s1, &w).unwrap();
        assert!((tape.scalar(l1) - 2.25).abs() < 1e-12);
        let ft = LossParts { task: Some(task), ..Default::default() };
        let l = compose_loss(&mut tape, MethodKind::FT, 3, &ft, &w).unwrap();
        assert_eq!(tape.scalar(l), 2.0);
    }

    #[test]
    fn compose_rejects_wrong_parts() {
        let w = LossWeights::default();
        let mut tape = Tape::new();
        let task = scalar_var(&mut tape, 1.0);
        let d = scalar_var(&mut tape, 1.0);
        let cases = [
            (MethodKind::LwF, 3, LossParts { task: Some(task), distill: vec![d], ..Default::default() }),
            (MethodKind::FT, 2, LossParts { task: Some(task), distill: vec![d], ..Default::default() }),
            (MethodKind::EWC, 2, LossParts { task: Some(task), ..Default::default() }),
            (MethodKind::EWC, 1, LossParts { task: Some(task), ewc: Some(d), ..Default::default() }),
            (MethodKind::Proposed, 2, LossParts { task: Some(task), distill: vec![d], ..Default::default() }),
            (MethodKind::LwFPlus, 2, LossParts { task: Some(task), distill: vec![d], rec: Some(d), ..Default::default() }),
            (MethodKind::FT, 1, LossParts::default()),
        ];
        for (m, k, parts) in cases {
            assert!(
                matches!(compose_loss(&mut tape, m, k, &parts, &w), Err(Error::LossParts { .. })),
                "{m} stage {k} accepted"
            );
        }
    }

    #[test]
    fn distillation_of_own_logits_is_entropy() {
        let mut tape = Tape::new();
        let z = tape.leaf(&Tensor::new(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap(), true).unwrap();
        let d = distillation_term(&mut tape, z, &[5.0, 5.0, 5.0], 1.0).unwrap();
        assert!((tape.scalar(d) - 3f64.ln()).abs() < 1e-12);
        assert!(distillation_term(&mut tape, z, &[1.0, 2.0], 1.0).is_err());
    }
}
