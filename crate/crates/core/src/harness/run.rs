use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::report::{aggregate_trials, write_reports, Summary};
use super::ExperimentConfig;
use crate::continual::{load_checkpoint, run_sequence, MethodKind, SequenceReport};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{class_scores, dataset_error, roc_curve};
use crate::network::Network;
use crate::tensor::{exec, GroupId};

/// Environment variable giving the default output root.
pub const OUT_ENV: &str = "KEEPLEARN_OUT";

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out: PathBuf,
    /// Worker threads for independent trials; 0 uses the available cores.
    pub threads: usize,
    /// Print one line per finished trial to stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrialFailure {
    method: MethodKind,
    seed: u64,
    error: String,
}

pub fn trial_dir(out: &Path, method: MethodKind, seed: u64) -> PathBuf {
    out.join("trials").join(format!("{method:?}")).join(format!("seed-{seed}"))
}

fn run_jobs<R: Send>(n: usize, threads: usize, f: impl Fn(usize) -> R + Sync + Send) -> Result<Vec<R>> {
    #[cfg(feature = "parallel")]
    if exec::parallel_enabled() {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Validation(format!("thread pool: {e}")))?;
        return Ok(pool.install(|| exec::map_indexed(n, &f)));
    }
    let _ = threads;
    Ok((0..n).map(f).collect())
}

/// Runs every `(method, seed)` trial on the shared split, writes per-trial
/// artifacts, then the aggregate reports. Failed trials are listed in
/// `failures.json` and make the call fail after the others finish.
pub fn cmd_methods_matrix(cfg: &ExperimentConfig, methods: &[MethodKind], opts: &RunOptions) -> Result<Summary> {
    cfg.validate()?;
    if methods.is_empty() {
        return Err(Error::Empty("method list"));
    }
    for &m in methods {
        if m.uses_reconstruction() && cfg.network.inverse.is_none() {
            return Err(Error::Config { path: "network.inverse".into(), message: format!("{m} needs an inverse head") });
        }
    }
    let data = cfg.prepare_data()?;
    std::fs::create_dir_all(&opts.out).map_err(|e| Error::io(&opts.out, e))?;
    std::fs::write(opts.out.join("config.json"), cfg.to_json()? + "\n").map_err(|e| Error::io(&opts.out, e))?;

    let jobs: Vec<(MethodKind, u64)> = methods.iter().flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s))).collect();
    let results = run_jobs(jobs.len(), opts.threads, |i| -> Result<SequenceReport> {
        let (method, seed) = jobs[i];
        let dir = trial_dir(&opts.out, method, seed);
        let start = Instant::now();
        let (report, _) = run_sequence(&cfg.plan(method), &data, seed, Some(&dir))?;
        std::fs::write(dir.join("trial.json"), serde_json::to_string_pretty(&report)? + "\n")
            .map_err(|e| Error::io(&dir, e))?;
        if opts.verbose {
            eprintln!(
                "{method} seed {seed}: final test error {:.4}, retention {:.4} ({:.1}s)",
                report.stages.last().map_or(f64::NAN, |s| s.test_error),
                report.retention,
                start.elapsed().as_secs_f64()
            );
        }
        Ok(report)
    })?;

    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for ((method, seed), r) in jobs.iter().zip(results) {
        match r {
            Ok(rep) => reports.push(rep),
            Err(e) => failures.push(TrialFailure { method: *method, seed: *seed, error: e.to_string() }),
        }
    }
    if !failures.is_empty() {
        let manifest = opts.out.join("failures.json");
        std::fs::write(&manifest, serde_json::to_string_pretty(&failures)? + "\n").map_err(|e| Error::io(&manifest, e))?;
        return Err(Error::TrialsFailed { failed: failures.len(), total: jobs.len(), manifest });
    }
    let summary = aggregate_trials(&reports)?;
    write_reports(&opts.out, &summary)?;
    Ok(summary)
}

/// Runs the configured method for every seed.
pub fn cmd_run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Summary> {
    cmd_methods_matrix(cfg, &[cfg.method], opts)
}

/// Re-aggregates the trial files found under `out`.
pub fn cmd_report(out: &Path) -> Result<Summary> {
    let root = out.join("trials");
    let mut reports = Vec::new();
    let mut method_dirs: Vec<PathBuf> = read_dirs(&root)?;
    method_dirs.sort();
    for m in method_dirs {
        let mut seeds = read_dirs(&m)?;
        seeds.sort();
        for s in seeds {
            let path = s.join("trial.json");
            if path.exists() {
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                reports.push(serde_json::from_str(&text)?);
            }
        }
    }
    let summary = aggregate_trials(&reports)?;
    write_reports(out, &summary)?;
    Ok(summary)
}

fn read_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            out.push(p);
        }
    }
    Ok(out)
}

/// Which examples `eval` scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Test,
    Val,
    /// Training chunk of center `k` (1-based).
    Chunk(usize),
}

impl std::str::FromStr for EvalSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "test" => Ok(EvalSplit::Test),
            "val" => Ok(EvalSplit::Val),
            _ => s
                .strip_prefix("chunk")
                .and_then(|k| k.trim_start_matches(['-', ':']).parse().ok())
                .filter(|&k| k > 0)
                .map(EvalSplit::Chunk)
                .ok_or_else(|| Error::Validation(format!("unknown split `{s}`; use test, val or chunkK"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub stage: usize,
    pub method: MethodKind,
    pub seed: u64,
    pub config_hash: String,
    pub split: EvalSplit,
    pub examples: usize,
    pub error: f64,
    /// Fraction classified correctly, `1 − error`.
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
}

/// Evaluates a stage checkpoint on a split of the configured data.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, split: EvalSplit) -> Result<EvalReport> {
    let ckpt = load_checkpoint(checkpoint)?;
    let hash = cfg.config_hash();
    if ckpt.config_hash != hash {
        return Err(Error::Integrity(format!(
            "checkpoint config hash {} does not match the configuration ({hash})",
            ckpt.config_hash
        )));
    }
    let net = Network::new(cfg.network.clone())?;
    let data = cfg.prepare_data()?;
    let set: &Dataset = match split {
        EvalSplit::Test => &data.test,
        EvalSplit::Val => &data.val,
        EvalSplit::Chunk(k) => data
            .chunks
            .get(k - 1)
            .ok_or_else(|| Error::Validation(format!("chunk {k} of {}", data.chunks.len())))?,
    };
    let error = dataset_error(&net, &ckpt.params, set, cfg.train.eval_batch)?;
    let auc = if net.spec().aux_head.is_some() {
        let scores = class_scores(&net, &ckpt.params, set, GroupId::AuxHead, cfg.positive_class, 256)?;
        let positive: Vec<bool> = set.examples.iter().map(|e| e.label == cfg.positive_class).collect();
        Some(roc_curve(&scores, &positive)?.auc)
    } else {
        None
    };
    Ok(EvalReport {
        stage: ckpt.stage,
        method: ckpt.method,
        seed: ckpt.seed,
        config_hash: hash,
        split,
        examples: set.len(),
        error,
        accuracy: 1.0 - error,
        auc,
    })
}
