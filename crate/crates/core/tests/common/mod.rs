#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use keeplearn::continual::MethodKind;
use keeplearn::data::{SyntheticSpec, ValSize};
use keeplearn::harness::{preset, DataSource, ExperimentConfig};

/// A few-second variant of the desk preset.
pub fn tiny_config(method: MethodKind, stages: usize) -> ExperimentConfig {
    let mut c = preset("desk-synthetic").unwrap();
    c.name = "tiny".into();
    c.method = method;
    c.stages = stages;
    c.seeds = vec![3];
    c.data = DataSource::Synthetic {
        spec: SyntheticSpec { classes: 4, n_per_class: 60, shape: [8, 8, 1], noise_sigma: 0.3, seed: 5, fine_split: None },
        test_per_class: 20,
    };
    c.split.validation = ValSize::Count(40);
    c.train.schedule.epochs = 2;
    c.train.batch_size = 16;
    c.train.eval_batch = 64;
    c
}

pub fn write_config(dir: &Path, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json().unwrap()).unwrap();
    path
}

pub fn keeplearn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_keeplearn")).args(args).env_remove("KEEPLEARN_OUT").output().unwrap()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
