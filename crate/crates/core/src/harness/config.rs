use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::continual::{LossWeights, MethodKind, PreparedData, Schedule, SequencePlan, TrainSettings};
use crate::data::{load_cifar_files, multi_center_split, train_val_split, Dataset, SyntheticSpec, ValSize};
use crate::error::{Error, Result};
use crate::network::{BackboneSpec, HeadSpec, InverseSpec, Network, NetworkSpec};

/// Where examples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        spec: SyntheticSpec,
        test_per_class: usize,
    },
    /// CIFAR-10 binary batches in `dir` (`data_batch_{1..5}.bin`,
    /// `test_batch.bin`), truncated to the first examples by id.
    CifarBinary {
        dir: PathBuf,
        pool_examples: usize,
        test_examples: usize,
    },
}

fn default_validation() -> ValSize {
    ValSize::Count(1000)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    /// Held out of the pool before chunking; shared by every stage.
    #[serde(default = "default_validation")]
    pub validation: ValSize,
    #[serde(default)]
    pub stratified: bool,
    /// Seed of the validation and center split, shared by all trials.
    #[serde(default)]
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { validation: default_validation(), stratified: false, seed: 0 }
    }
}

fn default_name() -> String {
    "experiment".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub method: MethodKind,
    /// Number of centers, one stage each.
    pub stages: usize,
    pub network: NetworkSpec,
    pub train: TrainSettings,
    pub seeds: Vec<u64>,
    pub data: DataSource,
    #[serde(default)]
    pub split: SplitConfig,
    /// Auxiliary-head class scored as positive in ROC analysis.
    #[serde(default)]
    pub positive_class: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn at(path: &str, e: impl std::fmt::Display) -> Error {
    Error::Config { path: path.into(), message: e.to_string() }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            at(&path, e.into_inner())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks semantic constraints, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(at("stages", "must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(at("seeds", "must not be empty"));
        }
        let s = &self.train.schedule;
        if !(s.lr0 > 0.0 && s.lr0.is_finite()) {
            return Err(at("train.schedule.lr0", "must be positive"));
        }
        if !(s.decay_factor > 0.0) || s.decay_period == 0 {
            return Err(at("train.schedule", "decay factor and period must be positive"));
        }
        if s.epochs == 0 {
            return Err(at("train.schedule.epochs", "must be at least 1"));
        }
        if self.train.batch_size == 0 {
            return Err(at("train.batch_size", "must be at least 1"));
        }
        self.train.weights.validate().map_err(|e| at("train.weights", e))?;
        self.train.validate().map_err(|e| at("train", e))?;
        let net = Network::new(self.network.clone()).map_err(|e| at("network", e))?;
        if self.method.uses_reconstruction() && !net.has_inverse() {
            return Err(at("network.inverse", "the proposed method needs an inverse head"));
        }
        if let Some(aux) = &self.network.aux_head {
            if self.positive_class >= aux.classes {
                return Err(at("positive_class", format!("must be below {}", aux.classes)));
            }
        }
        match &self.data {
            DataSource::Synthetic { spec, test_per_class } => {
                if spec.shape != self.network.backbone.input {
                    return Err(at("data.spec.shape", "must equal network.backbone.input"));
                }
                let fine = spec.fine_split.as_ref().map_or(spec.classes, |f| f.iter().sum());
                if fine != self.network.head.classes {
                    return Err(at("network.head.classes", format!("data has {fine} main-head classes")));
                }
                if let Some(aux) = &self.network.aux_head {
                    if spec.fine_split.is_none() || aux.classes != spec.classes {
                        return Err(at("network.aux_head", "needs hierarchical data with matching coarse classes"));
                    }
                }
                if *test_per_class == 0 {
                    return Err(at("data.test_per_class", "must be at least 1"));
                }
            }
            DataSource::CifarBinary { pool_examples, test_examples, .. } => {
                if self.network.backbone.input != [32, 32, 3] || self.network.head.classes != 10 {
                    return Err(at("network", "CIFAR-10 needs a 32×32×3 input and 10 classes"));
                }
                if *pool_examples == 0 || *test_examples == 0 {
                    return Err(at("data", "example counts must be positive"));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON without the method, seed list and
    /// output directory, so every trial of a method matrix shares it.
    pub fn config_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            for key in ["method", "seeds", "output_dir"] {
                obj.remove(key);
            }
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    pub fn plan(&self, method: MethodKind) -> SequencePlan {
        SequencePlan {
            method,
            network: self.network.clone(),
            settings: self.train.clone(),
            config_hash: self.config_hash(),
            positive_class: self.positive_class,
        }
    }

    /// Loads data and builds the shared validation split and center chunks.
    pub fn prepare_data(&self) -> Result<PreparedData> {
        let (pool, test) = match &self.data {
            DataSource::Synthetic { spec, test_per_class } => (spec.generate()?, spec.generate_test(*test_per_class)?),
            DataSource::CifarBinary { dir, pool_examples, test_examples } => {
                let files: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
                let pool = truncate(load_cifar_files(&files)?, *pool_examples)?;
                let mut test = truncate(load_cifar_files(&[dir.join("test_batch.bin")])?, *test_examples)?;
                // keep test ids disjoint from training ids
                let offset = 1_000_000;
                test.examples.iter_mut().for_each(|e| e.id += offset);
                (pool, test)
            }
        };
        let (train, val) = train_val_split(&pool, self.split.validation, self.split.seed)?;
        let split = multi_center_split(&train, self.stages, self.split.seed, self.split.stratified)?;
        let chunks = split.chunks.iter().map(|ids| train.subset(ids)).collect::<Result<_>>()?;
        Ok(PreparedData { chunks, val, test, split_hash: split.split_hash() })
    }
}

fn truncate(mut d: Dataset, n: usize) -> Result<Dataset> {
    if n > d.len() {
        return Err(Error::Validation(format!("requested {n} examples, only {} available", d.len())));
    }
    d.examples.truncate(n);
    Ok(d)
}

pub const PRESETS: [&str; 3] = ["desk-synthetic", "desk-dual-head", "mini-cifar"];

/// Environment variable naming the CIFAR-10 binary directory for `mini-cifar`.
pub const CIFAR_DIR_ENV: &str = "KEEPLEARN_CIFAR_DIR";

fn desk_network(input: [usize; 3], classes: usize, aux: Option<usize>) -> NetworkSpec {
    NetworkSpec {
        backbone: BackboneSpec::desk(input, [8, 16, 32]),
        head: HeadSpec { classes, kind: Default::default() },
        aux_head: aux.map(|classes| HeadSpec { classes, kind: Default::default() }),
        inverse: Some(InverseSpec { widths: vec![16, 32] }),
    }
}

/// Built-in configurations.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let cfg = match name {
        "desk-synthetic" => ExperimentConfig {
            name: name.into(),
            method: MethodKind::Proposed,
            stages: 4,
            network: desk_network([8, 8, 1], 4, None),
            train: TrainSettings {
                schedule: Schedule { lr0: 0.05, decay_factor: 0.1, decay_period: 10, epochs: 30 },
                batch_size: 32,
                momentum: 0.9,
                weight_decay: 5e-4,
                augment_pad: 0,
                // Without batch norm, lambda_rec = 1 drives z to zero on some seeds.
                weights: LossWeights { lambda_lwf_plus: 1.0, lambda_rec: 0.3, temperature: 2.0, ..LossWeights::default() },
                eval_batch: 500,
            },
            seeds: vec![1, 2, 3, 4, 5],
            data: DataSource::Synthetic {
                spec: SyntheticSpec { classes: 4, n_per_class: 2250, shape: [8, 8, 1], noise_sigma: 1.0, seed: 11, fine_split: None },
                test_per_class: 500,
            },
            split: SplitConfig { validation: ValSize::Count(1000), stratified: false, seed: 0 },
            positive_class: 0,
            output_dir: None,
        },
        "desk-dual-head" => {
            let mut c = preset("desk-synthetic")?;
            c.name = name.into();
            c.stages = 2;
            c.network = desk_network([8, 8, 1], 3, Some(2));
            c.data = DataSource::Synthetic {
                spec: SyntheticSpec {
                    classes: 2,
                    n_per_class: 800,
                    shape: [8, 8, 1],
                    noise_sigma: 0.2,
                    seed: 13,
                    fine_split: Some(vec![2, 1]),
                },
                test_per_class: 200,
            };
            c.split.validation = ValSize::Count(400);
            c.train.schedule = Schedule { lr0: 0.05, decay_factor: 0.1, decay_period: 10, epochs: 10 };
            c.seeds = vec![1];
            c
        }
        "mini-cifar" => ExperimentConfig {
            name: name.into(),
            method: MethodKind::LwFPlus,
            stages: 4,
            network: NetworkSpec {
                backbone: BackboneSpec::desk([32, 32, 3], [16, 32, 64]),
                head: HeadSpec { classes: 10, kind: Default::default() },
                aux_head: None,
                inverse: Some(InverseSpec { widths: vec![32, 64] }),
            },
            train: TrainSettings {
                schedule: Schedule { lr0: 0.1, decay_factor: 0.1, decay_period: 8, epochs: 12 },
                batch_size: 64,
                momentum: 0.9,
                weight_decay: 5e-4,
                augment_pad: 4,
                weights: LossWeights::default(),
                eval_batch: 500,
            },
            seeds: vec![1, 2, 3],
            data: DataSource::CifarBinary {
                dir: std::env::var_os(CIFAR_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("cifar-10-batches-bin")),
                pool_examples: 12_000,
                test_examples: 2_000,
            },
            split: SplitConfig { validation: ValSize::Count(2000), stratified: false, seed: 0 },
            positive_class: 0,
            output_dir: None,
        },
        other => return Err(Error::Validation(format!("unknown preset `{other}`; known: {}", PRESETS.join(", ")))),
    };
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip() {
        for name in PRESETS {
            let c = preset(name).unwrap();
            let back = ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap();
            assert_eq!(back, c, "{name}");
        }
    }

    #[test]
    fn omitted_weights_take_defaults() {
        let mut v: serde_json::Value = serde_json::from_str(&preset("desk-synthetic").unwrap().to_json().unwrap()).unwrap();
        v["train"].as_object_mut().unwrap().remove("weights");
        let c = ExperimentConfig::from_json(&v.to_string()).unwrap();
        assert_eq!((c.train.weights.lambda_lwf_plus, c.train.weights.lambda_rec), (0.1, 1.0));
    }

    #[test]
    fn errors_name_the_field() {
        let base = preset("desk-synthetic").unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&base.to_json().unwrap()).unwrap();
        v["train"]["schedule"]["lr0"] = serde_json::json!("fast");
        match ExperimentConfig::from_json(&v.to_string()) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "train.schedule.lr0"),
            other => panic!("{other:?}"),
        }
        let mut c = base.clone();
        c.seeds.clear();
        assert!(matches!(c.validate(), Err(Error::Config { path, .. }) if path == "seeds"));
        let mut c = base.clone();
        c.network.inverse = None;
        assert!(matches!(c.validate(), Err(Error::Config { path, .. }) if path == "network.inverse"));
        let mut v: serde_json::Value = serde_json::from_str(&base.to_json().unwrap()).unwrap();
        v["network"]["head"]["colour"] = serde_json::json!(1);
        assert!(matches!(ExperimentConfig::from_json(&v.to_string()), Err(Error::Config { path, .. }) if path.starts_with("network.head")));
    }

    #[test]
    fn hash_ignores_seeds_and_output() {
        let a = preset("desk-synthetic").unwrap();
        let mut b = a.clone();
        b.seeds = vec![9];
        b.output_dir = Some("/tmp/x".into());
        b.method = MethodKind::FT;
        assert_eq!(a.config_hash(), b.config_hash());
        b.train.batch_size = 48;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn desk_data_shapes() {
        let d = preset("desk-synthetic").unwrap().prepare_data().unwrap();
        assert_eq!(d.chunks.len(), 4);
        assert!(d.chunks.iter().all(|c| c.len() == 2000));
        assert_eq!((d.val.len(), d.test.len()), (1000, 2000));
    }
}
