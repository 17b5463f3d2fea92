use super::{MethodKind, Preservation, StageCheckpoint};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::{GroupId, ParamSet, Real};

/// Parameters entering a stage and the heads whose pseudo-logits anchor it.
#[derive(Clone, Debug)]
pub struct StageInit<T> {
    pub params: ParamSet<T>,
    /// Preserved heads, in loss order.
    pub preserved: Vec<GroupId>,
}

/// Builds the parameter set for stage `stage` (1-based) of `method`.
///
/// Stage 1 starts fresh; later stages restore the previous checkpoint, add
/// the preserved head a method needs and set the frozen groups.
pub fn stage_transition<T: Real>(
    net: &Network,
    method: MethodKind,
    stage: usize,
    prev: Option<&StageCheckpoint<T>>,
    seed: u64,
) -> Result<StageInit<T>> {
    if stage == 0 {
        return Err(Error::Stage("stages are numbered from 1".into()));
    }
    let Some(prev) = prev.filter(|_| stage > 1) else {
        if stage > 1 {
            return Err(Error::Stage(format!("stage {stage} needs the stage {} checkpoint", stage - 1)));
        }
        let params = net.init_params(seed, method.uses_reconstruction())?;
        return Ok(StageInit { params, preserved: Vec::new() });
    };
    if prev.stage + 1 != stage {
        return Err(Error::Stage(format!("stage {stage} cannot follow a stage {} checkpoint", prev.stage)));
    }

    let fresh: ParamSet<T> = net.init_params(seed, false)?;
    let mut core = vec![GroupId::Shared, GroupId::NewHead];
    if fresh.has_group(GroupId::AuxHead) {
        core.push(GroupId::AuxHead);
    }
    prev.params.check_same_layout(&fresh, &core)?;

    let mut params = prev.params.clone();
    params.clear_grads();
    params.unfreeze_all();
    let head = fresh.group(GroupId::NewHead)?;
    let require = |ps: &ParamSet<T>, g: GroupId| -> Result<()> {
        let have = ps
            .group(g)
            .map_err(|_| Error::MissingGroup(format!("{g} absent from the stage {} checkpoint", stage - 1)))?;
        let same = have.len() == head.len() && have.iter().zip(head).all(|(a, b)| a.tensor.shape() == b.tensor.shape());
        if !same {
            return Err(Error::shape("stage_transition", format!("{g} does not match the head layout")));
        }
        Ok(())
    };

    let preserved = match method.preservation() {
        Preservation::None => Vec::new(),
        Preservation::PerStage => {
            for i in 1..stage - 1 {
                require(&params, GroupId::OldHead(i))?;
            }
            params.copy_group_from(&prev.params, GroupId::NewHead, GroupId::OldHead(stage - 1))?;
            (1..stage).map(GroupId::OldHead).collect()
        }
        Preservation::Single => {
            if stage == 2 {
                params.copy_group_from(&prev.params, GroupId::NewHead, GroupId::OldHead(1))?;
            } else {
                require(&params, GroupId::OldHead(1))?;
            }
            vec![GroupId::OldHead(1)]
        }
    };

    if method.uses_reconstruction() {
        if !params.has_group(GroupId::Inverse) {
            return Err(Error::MissingGroup(format!("inverse head absent from the stage {} checkpoint", stage - 1)));
        }
        params.freeze(GroupId::OldHead(1))?;
        params.freeze(GroupId::Inverse)?;
    } else {
        params.remove_group(GroupId::Inverse);
    }
    let stray: Vec<GroupId> = params
        .group_ids()
        .filter(|g| matches!(g, GroupId::OldHead(_)) && !preserved.contains(g))
        .collect();
    for g in stray {
        params.remove_group(g);
    }
    Ok(StageInit { params, preserved })
}

/// Head of `prev` that supplies stored logits for preserved head `head`.
///
/// A preserved head copied from the previous new head at this transition is
/// not yet in the checkpoint, so its logits come from that new head.
pub fn source_head<T: Real>(prev: &StageCheckpoint<T>, head: GroupId) -> Result<GroupId> {
    if prev.params.has_group(head) {
        return Ok(head);
    }
    match head {
        GroupId::OldHead(i) if i == prev.stage => Ok(GroupId::NewHead),
        _ => Err(Error::MissingHead(format!("{head} has no source in the stage {} checkpoint", prev.stage))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{BackboneSpec, HeadSpec, InverseSpec, NetworkSpec};

    fn net() -> Network {
        Network::new(NetworkSpec {
            backbone: BackboneSpec::desk([8, 8, 1], [4, 4, 8]),
            head: HeadSpec { classes: 3, kind: Default::default() },
            aux_head: None,
            inverse: Some(InverseSpec { widths: vec![8] }),
        })
        .unwrap()
    }

    fn ckpt(method: MethodKind, stage: usize, params: ParamSet<f64>) -> StageCheckpoint<f64> {
        StageCheckpoint::new(stage, method, params, 0.5, 1)
    }

    /// Walks a method through `stages` transitions, perturbing the new head
    /// each stage so copies are traceable.
    fn walk(method: MethodKind, stages: usize) -> Vec<StageInit<f64>> {
        let n = net();
        let mut out = Vec::new();
        let mut prev: Option<StageCheckpoint<f64>> = None;
        for k in 1..=stages {
            let mut init = stage_transition(&n, method, k, prev.as_ref(), 9).unwrap();
            let mut trained = init.params.clone();
            for p in trained.group_mut(GroupId::NewHead).unwrap() {
                p.tensor.data_mut().iter_mut().for_each(|v| *v += k as f64);
            }
            prev = Some(ckpt(method, k, trained));
            init.params.clear_grads();
            out.push(init);
        }
        out
    }

    #[test]
    fn stage_one_groups() {
        let s = walk(MethodKind::Proposed, 1);
        let ids: Vec<GroupId> = s[0].params.group_ids().collect();
        assert_eq!(ids, vec![GroupId::Shared, GroupId::NewHead, GroupId::Inverse]);
        assert!(s[0].params.frozen().is_empty());
        let ft = walk(MethodKind::FT, 1);
        assert!(!ft[0].params.has_group(GroupId::Inverse));
    }

    #[test]
    fn lwf_grows_one_head_per_stage() {
        let s = walk(MethodKind::LwF, 4);
        assert_eq!(s[3].preserved, vec![GroupId::OldHead(1), GroupId::OldHead(2), GroupId::OldHead(3)]);
        assert!(s[3].params.frozen().is_empty());
        // old head 3 is the stage-3 new head: init + 1 + 2 + 3 perturbations
        let fresh: ParamSet<f64> = net().init_params(9, false).unwrap();
        let b = s[3].params.group(GroupId::OldHead(3)).unwrap()[1].tensor.data()[0];
        let b0 = fresh.group(GroupId::NewHead).unwrap()[1].tensor.data()[0];
        assert!((b - b0 - 6.0).abs() < 1e-12);
    }

    #[test]
    fn proposed_freezes_old_head_and_inverse() {
        let s = walk(MethodKind::Proposed, 4);
        for st in &s[1..] {
            assert_eq!(st.preserved, vec![GroupId::OldHead(1)]);
            let frozen: Vec<GroupId> = st.params.frozen().iter().copied().collect();
            assert_eq!(frozen, vec![GroupId::OldHead(1), GroupId::Inverse]);
        }
        // g′ keeps the stage-1 new head values
        let b1 = s[3].params.group(GroupId::OldHead(1)).unwrap()[1].tensor.data()[0];
        let b0 = s[1].params.group(GroupId::OldHead(1)).unwrap()[1].tensor.data()[0];
        assert_eq!(b1, b0);
    }

    #[test]
    fn lwf_plus_single_trainable_head() {
        let s = walk(MethodKind::LwFPlus, 3);
        assert_eq!(s[2].preserved, vec![GroupId::OldHead(1)]);
        assert!(s[2].params.frozen().is_empty());
        assert!(!s[2].params.has_group(GroupId::Inverse));
    }

    #[test]
    fn missing_or_misordered_checkpoints() {
        let n = net();
        assert!(matches!(stage_transition::<f64>(&n, MethodKind::FT, 2, None, 0), Err(Error::Stage(_))));
        let p: ParamSet<f64> = n.init_params(0, true).unwrap();
        let c = ckpt(MethodKind::Proposed, 2, p.clone());
        assert!(matches!(stage_transition(&n, MethodKind::Proposed, 2, Some(&c), 0), Err(Error::Stage(_))));
        // stage 3 of LwF+ needs the old head from stage 2
        let c = ckpt(MethodKind::LwFPlus, 2, n.init_params(0, false).unwrap());
        assert!(matches!(stage_transition(&n, MethodKind::LwFPlus, 3, Some(&c), 0), Err(Error::MissingGroup(_))));
        // the proposed method cannot continue without an inverse head
        let c = ckpt(MethodKind::Proposed, 1, n.init_params(0, false).unwrap());
        assert!(matches!(stage_transition(&n, MethodKind::Proposed, 2, Some(&c), 0), Err(Error::MissingGroup(_))));
    }

    #[test]
    fn source_head_resolution() {
        let n = net();
        let c = ckpt(MethodKind::LwF, 2, n.init_params(0, false).unwrap());
        assert_eq!(source_head(&c, GroupId::OldHead(2)).unwrap(), GroupId::NewHead);
        assert!(matches!(source_head(&c, GroupId::OldHead(1)), Err(Error::MissingHead(_))));
    }
}
