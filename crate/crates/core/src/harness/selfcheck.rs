//! Built-in verification suite run by `keeplearn selfcheck`.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::continual::{
    ewc_penalty, ewc_penalty_value, lwf_weight, run_sequence, stage_objective, BatchTargets, FisherDiag, LossWeights,
    MethodKind, PreparedData, Schedule, SequencePlan, TrainSettings,
};
use crate::data::{multi_center_split, train_val_split, SyntheticSpec, ValSize};
use crate::error::{Error, Result};
use crate::metrics::roc_auc;
use crate::network::{BackboneSpec, HeadSpec, InverseSpec, Network, NetworkSpec};
use crate::tensor::gradcheck::{analytic_gradients, compare, numeric_gradients, GradCheck};
use crate::tensor::{GroupId, Padding, Param, ParamKey, ParamSet, ParamSubset, ParamVars, Tape, Targets, Tensor, Var};

#[derive(Clone, Debug, Default)]
pub struct SelfcheckOptions {
    /// Name of a gradient check whose analytic gradient is deliberately
    /// perturbed, to confirm that the suite catches a broken op.
    pub corrupt: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(shape, v).expect("valid shape")
}

/// Values bounded away from zero so ReLU kinks are never straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let mut t = randn(rng, shape);
    t.data_mut().iter_mut().for_each(|v| *v = v.signum() * (v.abs() + 0.1));
    t
}

type Loss = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// Reduces an arbitrary tensor to a scalar with non-uniform upstream gradients.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = tape.value(y).len();
    let anchor: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
    tape.weighted_sq_dist(y, &anchor, &weights, 0.5)
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor<f64>>, Loss)> {
    let mut cases: Vec<(&'static str, Vec<Tensor<f64>>, Loss)> = Vec::new();
    cases.push((
        "dense",
        vec![randn(rng, vec![3, 4]), randn(rng, vec![2, 4]), randn(rng, vec![2])],
        Box::new(|t, v| {
            let y = t.dense(v[0], v[1], v[2])?;
            project(t, y, 1)
        }),
    ));
    cases.push((
        "conv",
        vec![randn(rng, vec![2, 5, 5, 2]), randn(rng, vec![3, 3, 2, 3]), randn(rng, vec![3])],
        Box::new(|t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 1, Padding::Explicit(1))?;
            project(t, y, 2)
        }),
    ));
    cases.push((
        "conv_same_stride2",
        vec![randn(rng, vec![2, 6, 6, 2]), randn(rng, vec![3, 3, 2, 2]), randn(rng, vec![2])],
        Box::new(|t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 2, Padding::Same)?;
            project(t, y, 3)
        }),
    ));
    cases.push((
        "conv_pointwise",
        vec![randn(rng, vec![1, 3, 3, 4]), randn(rng, vec![1, 1, 4, 3])],
        Box::new(|t, v| {
            let y = t.conv2d(v[0], v[1], None, 1, Padding::Explicit(0))?;
            project(t, y, 4)
        }),
    ));
    cases.push((
        "relu",
        vec![away_from_zero(rng, vec![4, 3])],
        Box::new(|t, v| {
            let y = t.relu(v[0])?;
            project(t, y, 5)
        }),
    ));
    cases.push((
        "global_avgpool",
        vec![randn(rng, vec![2, 3, 3, 2])],
        Box::new(|t, v| {
            let y = t.global_avgpool(v[0])?;
            project(t, y, 6)
        }),
    ));
    cases.push((
        "add_scale_weighted_sum",
        vec![randn(rng, vec![5]), randn(rng, vec![5])],
        Box::new(|t, v| {
            let a = t.add(v[0], v[1])?;
            let s = t.scale(a, -1.7)?;
            let w = t.weighted_sum(&[(s, 0.3), (v[1], 2.0)])?;
            project(t, w, 7)
        }),
    ));
    cases.push((
        "sum",
        vec![randn(rng, vec![2, 3])],
        Box::new(|t, v| {
            let s = t.sum(v[0])?;
            project(t, s, 8)
        }),
    ));
    cases.push((
        "softmax_ce_index",
        vec![randn(rng, vec![4, 3])],
        Box::new(|t, v| t.softmax_cross_entropy(v[0], &Targets::Index(vec![0, 2, 1, 2]), 1.0)),
    ));
    let mut probs = vec![0.0; 12];
    for (i, p) in probs.iter_mut().enumerate() {
        *p = [0.2, 0.5, 0.3][i % 3];
    }
    cases.push((
        "softmax_ce_soft_t2",
        vec![randn(rng, vec![4, 3])],
        Box::new(move |t, v| t.softmax_cross_entropy(v[0], &Targets::Probs(probs.clone()), 2.0)),
    ));
    cases.push((
        "l2_reconstruction",
        vec![randn(rng, vec![2, 2, 3]), randn(rng, vec![2, 2, 3])],
        Box::new(|t, v| t.l2_reconstruction(v[0], v[1])),
    ));
    cases.push((
        "weighted_sq_dist",
        vec![randn(rng, vec![6])],
        Box::new(|t, v| t.weighted_sq_dist(v[0], &[0.1, -0.2, 0.3, 0.0, 1.0, -1.0], &[1.0, 2.0, 0.0, 0.5, 3.0, 1.0], 0.7)),
    ));
    cases
}

fn grad_check(name: &str, inputs: &[Tensor<f64>], f: &Loss, opts: &SelfcheckOptions) -> CheckResult {
    let cfg = GradCheck::default();
    let run = || -> Result<String> {
        let mut a = analytic_gradients(inputs, f)?;
        if opts.corrupt.as_deref() == Some(name) {
            a[0][0] += 1e-2;
        }
        let n = numeric_gradients(inputs, f, cfg.h)?;
        let r = compare(&a, &n, &cfg);
        if r.passed() {
            Ok(format!("{} entries, max abs err {:.2e}", r.checked, r.max_abs_err))
        } else {
            Err(Error::SelfcheckFailed(format!("{} of {} entries off; worst {:?}", r.failures, r.checked, r.worst)))
        }
    };
    finish(&format!("grad/{name}"), run())
}

fn finish(name: &str, r: Result<String>) -> CheckResult {
    match r {
        Ok(detail) => CheckResult { name: name.into(), passed: true, detail },
        Err(e) => CheckResult { name: name.into(), passed: false, detail: e.to_string() },
    }
}

fn tiny_network() -> Network {
    Network::new(NetworkSpec {
        backbone: BackboneSpec::desk([4, 4, 1], [2, 2, 3]),
        head: HeadSpec { classes: 3, kind: Default::default() },
        aux_head: None,
        inverse: Some(InverseSpec { widths: vec![3] }),
    })
    .expect("valid tiny network")
}

/// Finite-difference check of the whole stage-2 objective of the proposed
/// method with respect to every trainable parameter.
fn proposed_end_to_end(opts: &SelfcheckOptions) -> CheckResult {
    let run = || -> Result<(Vec<Tensor<f64>>, Loss)> {
        let net = tiny_network();
        let mut params: ParamSet<f64> = net.init_params(5, true)?;
        let old = net.head_params(GroupId::OldHead(1), 3, 6)?;
        params.insert_group(GroupId::OldHead(1), old)?;
        params.freeze(GroupId::OldHead(1))?;
        params.freeze(GroupId::Inverse)?;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // generic values: zero-initialized kernels would sit on ReLU kinks
        let groups: Vec<GroupId> = params.group_ids().collect();
        for g in groups {
            for p in params.group_mut(g)? {
                p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.5 * rng.sample::<f64, _>(StandardNormal));
            }
        }
        let x = randn(&mut rng, vec![2, 4, 4, 1]);
        let stored: Vec<f64> = (0..6).map(|_| rng.sample(StandardNormal)).collect();
        let targets = BatchTargets { labels: vec![0, 2], aux_labels: None, stored: vec![(GroupId::OldHead(1), stored)] };

        let trainable: Vec<(ParamKey, Tensor<f64>)> =
            params.iter().filter(|(k, _)| !params.is_frozen(k.group)).map(|(k, p)| (k, p.tensor.clone())).collect();
        let frozen: Vec<(ParamKey, Tensor<f64>)> =
            params.iter().filter(|(k, _)| params.is_frozen(k.group)).map(|(k, p)| (k, p.tensor.clone())).collect();
        let keys: Vec<ParamKey> = trainable.iter().map(|(k, _)| *k).collect();
        let inputs = trainable.into_iter().map(|(_, t)| t).collect();
        let f: Loss = Box::new(move |tape, vars| {
            let mut pairs: Vec<(ParamKey, Var)> = keys.iter().copied().zip(vars.iter().copied()).collect();
            for (k, t) in &frozen {
                pairs.push((*k, tape.leaf(t, false)?));
            }
            let pv = ParamVars::from_pairs(pairs);
            let (loss, _) = stage_objective(tape, &net, &pv, MethodKind::Proposed, 2, &x, &targets, &LossWeights::default(), None)?;
            Ok(loss)
        });
        Ok((inputs, f))
    };
    match run() {
        Ok((inputs, f)) => grad_check("proposed_loss", &inputs, &f, opts),
        Err(e) => finish("grad/proposed_loss", Err(e)),
    }
}

/// `dense(avgpool(z))` against `avgpool(conv1×1(z))` in training precision.
pub fn commutativity_max_diff(trials: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0f64;
    for _ in 0..trials {
        let (h, w, c, k) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..17), rng.gen_range(2..11));
        let gen = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f32> { (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect() };
        let z = Tensor::new(vec![h, w, c], gen(&mut rng, h * w * c))?;
        let wk = gen(&mut rng, c * k);
        let bias = Tensor::new(vec![k], gen(&mut rng, k))?;
        // dense weights are [out, in]; the 1×1 kernel is [1, 1, in, out]
        let dense_w: Vec<f32> = (0..k).flat_map(|o| (0..c).map(move |i| (o, i))).map(|(o, i)| wk[i * k + o]).collect();
        let mut tape = Tape::<f32>::inference();
        let zv = tape.leaf(&z, false)?;
        let wd = tape.leaf(&Tensor::new(vec![k, c], dense_w)?, false)?;
        let wc = tape.leaf(&Tensor::new(vec![1, 1, c, k], wk)?, false)?;
        let b = tape.leaf(&bias, false)?;
        let pooled = tape.global_avgpool(zv)?;
        let a = tape.dense(pooled, wd, b)?;
        let map = tape.conv2d(zv, wc, Some(b), 1, Padding::Explicit(0))?;
        let bpath = tape.global_avgpool(map)?;
        for (x, y) in tape.value(a).iter().zip(tape.value(bpath)) {
            worst = worst.max((x - y).abs() as f64);
        }
    }
    Ok(worst)
}

fn ewc_check() -> Result<String> {
    let key = ParamKey { group: GroupId::Shared, index: 0 };
    let one = |v: &[f64]| ParamSubset { entries: vec![(key, Tensor::new(vec![v.len()], v.to_vec()).expect("shape"))] };
    let mut ps: ParamSet<f64> = ParamSet::new();
    ps.insert_group(GroupId::Shared, vec![Param { name: "w".into(), tensor: Tensor::new(vec![1], vec![3.0])? }])?;
    let v = ewc_penalty_value(&ps, &one(&[0.0]), &FisherDiag::new(one(&[2.0]))?, 1.0)?;
    if (v - 9.0).abs() > 1e-9 {
        return Err(Error::SelfcheckFailed(format!("scalar case gave {v}, expected 9")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 40;
    let theta: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let anchor: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let fisher: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..3.0)).collect();
    let lambda = 10.0;
    let mut ps: ParamSet<f64> = ParamSet::new();
    ps.insert_group(GroupId::Shared, vec![Param { name: "w".into(), tensor: Tensor::new(vec![n], theta.clone())? }])?;
    let mut tape = Tape::new();
    let vars = ps.bind(&mut tape)?;
    let f = FisherDiag::new(one(&fisher))?;
    let loss = ewc_penalty(&mut tape, &vars, &one(&anchor), &f, lambda)?;
    tape.backward(loss)?;
    let g = tape.grad(vars.get(GroupId::Shared, 0)?).ok_or(Error::MissingGradient("ewc".into()))?;
    let mut worst = 0f64;
    for i in 0..n {
        worst = worst.max((g[i] - lambda * fisher[i] * (theta[i] - anchor[i])).abs());
    }
    if worst > 1e-7 {
        return Err(Error::SelfcheckFailed(format!("gradient off by {worst:.2e}")));
    }
    Ok(format!("scalar case 9, gradient max err {worst:.1e}"))
}

/// Mann-Whitney count with ties as ½.
pub fn pairwise_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in (0..scores.len()).filter(|&i| positive[i]) {
        for j in (0..scores.len()).filter(|&j| !positive[j]) {
            den += 1.0;
            num += match scores[i].partial_cmp(&scores[j]) {
                Some(std::cmp::Ordering::Greater) => 1.0,
                Some(std::cmp::Ordering::Equal) => 0.5,
                _ => 0.0,
            };
        }
    }
    num / den
}

/// Every labelling of every small score set, plus random larger sets.
fn auc_check() -> Result<String> {
    let mut compared = 0usize;
    for n in 2..=12usize {
        // three score patterns per size: distinct, heavy ties, all tied
        let patterns: [Vec<f64>; 3] = [
            (0..n).map(|i| ((i * 7) % n) as f64).collect(),
            (0..n).map(|i| (i % 3) as f64).collect(),
            vec![0.5; n],
        ];
        for scores in &patterns {
            for mask in 1..(1u32 << n) - 1 {
                let pos: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
                let (a, b) = (roc_auc(scores, &pos)?, pairwise_auc(scores, &pos));
                if (a - b).abs() > 1e-12 {
                    return Err(Error::SelfcheckFailed(format!("{scores:?} {pos:?}: {a} vs {b}")));
                }
                compared += 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..1000 {
        let n = rng.gen_range(2..60);
        let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..20) as f64) / 7.0).collect();
        let mut pos: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
        pos[0] = true;
        pos[1] = false;
        let (a, b) = (roc_auc(&scores, &pos)?, pairwise_auc(&scores, &pos));
        if (a - b).abs() > 1e-12 {
            return Err(Error::SelfcheckFailed(format!("random set: {a} vs {b}")));
        }
        compared += 1;
    }
    Ok(format!("{compared} score sets"))
}

/// Short three-stage proposed run on a tiny problem; the preserved head and
/// inverse head must not move after stage 1.
pub fn freeze_contract_run(stages: usize, epochs: usize) -> Result<Vec<crate::continual::StageCheckpoint<f32>>> {
    let spec = SyntheticSpec { classes: 3, n_per_class: 40, shape: [4, 4, 1], noise_sigma: 0.3, seed: 3, fine_split: None };
    let pool = spec.generate()?;
    let (train, val) = train_val_split(&pool, ValSize::Count(30), 1)?;
    let split = multi_center_split(&train, stages, 1, false)?;
    let chunks = split.chunks.iter().map(|ids| train.subset(ids)).collect::<Result<_>>()?;
    let data = PreparedData { chunks, val, test: spec.generate_test(5)?, split_hash: split.split_hash() };
    let plan = SequencePlan {
        method: MethodKind::Proposed,
        network: tiny_network().spec().clone(),
        settings: TrainSettings {
            schedule: Schedule { lr0: 0.05, decay_factor: 0.1, decay_period: 10, epochs },
            batch_size: 16,
            momentum: 0.9,
            weight_decay: 5e-4,
            augment_pad: 1,
            weights: LossWeights::default(),
            eval_batch: 64,
        },
        config_hash: String::new(),
        positive_class: 0,
    };
    Ok(run_sequence(&plan, &data, 4, None)?.1)
}

fn freeze_check() -> Result<String> {
    let ck = freeze_contract_run(3, 2)?;
    let bits = |ps: &ParamSet<f32>, g: GroupId| -> Result<Vec<u32>> {
        Ok(ps.group(g)?.iter().flat_map(|p| p.tensor.data().iter().map(|v| v.to_bits())).collect())
    };
    let s1_head = bits(&ck[0].params, GroupId::NewHead)?;
    let s1_inv = bits(&ck[0].params, GroupId::Inverse)?;
    for c in &ck[1..] {
        if bits(&c.params, GroupId::OldHead(1))? != s1_head || bits(&c.params, GroupId::Inverse)? != s1_inv {
            return Err(Error::SelfcheckFailed(format!("stage {} moved a frozen group", c.stage)));
        }
    }
    if bits(&ck[2].params, GroupId::Shared)? == bits(&ck[1].params, GroupId::Shared)? {
        return Err(Error::SelfcheckFailed("shared parameters did not train".into()));
    }
    Ok("old_head_1 and inverse unchanged over stages 2-3".into())
}

pub fn run_selfchecks(opts: &SelfcheckOptions) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out: Vec<CheckResult> =
        op_cases(&mut rng).iter().map(|(name, inputs, f)| grad_check(name, inputs, f, opts)).collect();
    out.push(proposed_end_to_end(opts));
    out.push(finish(
        "commutativity",
        commutativity_max_diff(100, 7).and_then(|d| {
            if d < 1e-5 {
                Ok(format!("100 maps, max diff {d:.2e}"))
            } else {
                Err(Error::SelfcheckFailed(format!("max diff {d:.2e}")))
            }
        }),
    ));
    out.push(finish("ewc_gradient", ewc_check()));
    out.push(finish(
        "lwf_weight",
        (|| {
            let (a, b) = (lwf_weight(2)?, lwf_weight(4)?);
            if a == 0.1 && b == 0.1 / 3.0 && lwf_weight(1).is_err() {
                Ok("0.1, 0.1/3".to_string())
            } else {
                Err(Error::SelfcheckFailed(format!("{a}, {b}")))
            }
        })(),
    ));
    out.push(finish("auc_oracle", auc_check()));
    out.push(finish("freeze_contract", freeze_check()));
    out
}

/// Runs every check, printing one line each; fails naming the failures.
pub fn cmd_selfcheck(opts: &SelfcheckOptions, w: &mut dyn Write) -> Result<Vec<CheckResult>> {
    let results = run_selfchecks(opts);
    for r in &results {
        let _ = writeln!(w, "{} {:<24} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(results)
    } else {
        Err(Error::SelfcheckFailed(failed.join(", ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupting_conv_fails_only_conv() {
        let opts = SelfcheckOptions { corrupt: Some("conv".into()) };
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for (name, inputs, f) in op_cases(&mut rng) {
            let r = grad_check(name, &inputs, &f, &opts);
            assert_eq!(r.passed, name != "conv", "{}", r.name);
        }
    }

    #[test]
    fn commutativity_holds() {
        assert!(commutativity_max_diff(20, 1).unwrap() < 1e-5);
    }
}
