mod common;

use common::tiny_config;
use keeplearn::continual::{run_sequence, MethodKind, PseudoLogitStore};
use keeplearn::harness::{cmd_methods_matrix, RunOptions};
use keeplearn::tensor::{exec, GroupId, ParamSet};

fn bits(ps: &ParamSet<f32>, g: GroupId) -> Vec<u32> {
    ps.group(g).unwrap().iter().flat_map(|p| p.tensor.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn single_stage_methods_without_reconstruction_coincide() {
    let cfg = tiny_config(MethodKind::FT, 1);
    let data = cfg.prepare_data().unwrap();
    let (ft, ft_ck) = run_sequence(&cfg.plan(MethodKind::FT), &data, 2, None).unwrap();
    for m in [MethodKind::EWC, MethodKind::LwF, MethodKind::LwFPlus, MethodKind::EWCLwF, MethodKind::EWCLwFPlus] {
        let (r, ck) = run_sequence(&cfg.plan(m), &data, 2, None).unwrap();
        assert_eq!(r.stages[0].test_error, ft.stages[0].test_error, "{m}");
        assert_eq!(r.retention, ft.retention, "{m}");
        for g in [GroupId::Shared, GroupId::NewHead] {
            assert_eq!(bits(&ck[0].params, g), bits(&ft_ck[0].params, g), "{m} {g}");
        }
    }
}

#[test]
fn proposed_freezes_old_head_and_inverse() {
    let cfg = tiny_config(MethodKind::Proposed, 3);
    let data = cfg.prepare_data().unwrap();
    let (_, ck) = run_sequence(&cfg.plan(MethodKind::Proposed), &data, 4, None).unwrap();
    let head = bits(&ck[0].params, GroupId::NewHead);
    let inv = bits(&ck[0].params, GroupId::Inverse);
    for c in &ck[1..] {
        assert_eq!(bits(&c.params, GroupId::OldHead(1)), head);
        assert_eq!(bits(&c.params, GroupId::Inverse), inv);
        assert!(c.params.is_frozen(GroupId::OldHead(1)) && c.params.is_frozen(GroupId::Inverse));
    }
    assert_ne!(bits(&ck[2].params, GroupId::NewHead), bits(&ck[1].params, GroupId::NewHead));
}

#[test]
fn lwf_keeps_one_old_head_per_previous_stage() {
    let cfg = tiny_config(MethodKind::LwF, 3);
    let data = cfg.prepare_data().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (_, ck) = run_sequence(&cfg.plan(MethodKind::LwF), &data, 1, Some(dir.path())).unwrap();
    let groups: Vec<GroupId> = ck[2].params.group_ids().collect();
    assert_eq!(groups, vec![GroupId::Shared, GroupId::NewHead, GroupId::OldHead(1), GroupId::OldHead(2)]);
    let store = PseudoLogitStore::load_csv(&dir.path().join("pseudo-stage-3.csv")).unwrap();
    assert_eq!(store.heads().into_iter().collect::<Vec<_>>(), vec![GroupId::OldHead(1), GroupId::OldHead(2)]);
    assert_eq!(store.len(), 2 * data.chunks[2].len());
}

#[test]
fn ewc_checkpoints_carry_fisher_and_anchor() {
    let cfg = tiny_config(MethodKind::EWC, 2);
    let data = cfg.prepare_data().unwrap();
    let (_, ck) = run_sequence(&cfg.plan(MethodKind::EWC), &data, 1, None).unwrap();
    for c in &ck {
        let f = c.fisher.as_ref().unwrap().subset();
        assert!(f.keys().all(|k| matches!(k.group, GroupId::Shared | GroupId::NewHead)));
        assert!(f.entries.iter().all(|(_, t)| t.data().iter().all(|v| *v >= 0.0 && v.is_finite())));
        assert!(c.anchor.as_ref().unwrap().aligned_with(f));
    }
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let mut cfg = tiny_config(MethodKind::LwFPlus, 2);
    cfg.seeds = vec![1, 2];
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let methods = [MethodKind::FT, MethodKind::LwFPlus];
    exec::set_parallel(true);
    cmd_methods_matrix(&cfg, &methods, &RunOptions { out: a.path().into(), threads: 2, verbose: false }).unwrap();
    exec::set_parallel(false);
    cmd_methods_matrix(&cfg, &methods, &RunOptions { out: b.path().into(), threads: 1, verbose: false }).unwrap();
    exec::set_parallel(true);
    for f in ["table.csv", "stages.csv", "summary.json"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let ck = "trials/LwFPlus/seed-2/stage-2.ckpt";
    assert_eq!(std::fs::read(a.path().join(ck)).unwrap(), std::fs::read(b.path().join(ck)).unwrap());
}
