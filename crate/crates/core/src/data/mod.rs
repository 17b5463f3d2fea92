//! Datasets, multi-center chunking, validation splits and augmentation.

mod augment;
mod cifar;
mod split;
mod synthetic;

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

pub use augment::pad_crop_augment;
pub use cifar::{load_cifar_binary, load_cifar_files, CIFAR_RECORD_BYTES};
pub use split::{multi_center_split, train_val_split, CenterSplit, ValSize};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: u64,
    /// `h × w × c` pixels in `[0, 1]`, NHWC order.
    pub image: Vec<f32>,
    pub label: usize,
    pub fine_label: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub shape: [usize; 3],
    pub classes: usize,
    /// Fine class count and the fine → coarse table, for hierarchical labels.
    pub fine: Option<Vec<usize>>,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.examples.iter().map(|e| e.id).collect()
    }

    /// Class count seen by the main (preservation) head.
    pub fn main_classes(&self) -> usize {
        self.fine.as_ref().map_or(self.classes, Vec::len)
    }

    /// Label for the main head: the fine label when present.
    pub fn main_label(ex: &Example) -> usize {
        ex.fine_label.unwrap_or(ex.label)
    }

    pub fn validate(&self) -> Result<()> {
        let per = self.shape.iter().product::<usize>();
        let mut seen = HashSet::with_capacity(self.len());
        for ex in &self.examples {
            if !seen.insert(ex.id) {
                return Err(Error::Validation(format!("duplicate example id {}", ex.id)));
            }
            if ex.image.len() != per {
                return Err(Error::Validation(format!("example {} has {} pixels, expected {per}", ex.id, ex.image.len())));
            }
            if ex.label >= self.classes {
                return Err(Error::Validation(format!("example {} label {} >= {}", ex.id, ex.label, self.classes)));
            }
            if ex.image.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Validation(format!("example {} has pixels outside [0, 1]", ex.id)));
            }
            match (&self.fine, ex.fine_label) {
                (None, None) => {}
                (Some(table), Some(f)) if f < table.len() && table[f] == ex.label => {}
                _ => return Err(Error::Validation(format!("example {} fine label disagrees with coarsening", ex.id))),
            }
        }
        Ok(())
    }

    /// Examples with the given ids, in the given order.
    pub fn subset(&self, ids: &[u64]) -> Result<Dataset> {
        let index: HashMap<u64, usize> = self.examples.iter().enumerate().map(|(i, e)| (e.id, i)).collect();
        let examples = ids
            .iter()
            .map(|id| {
                index
                    .get(id)
                    .map(|&i| self.examples[i].clone())
                    .ok_or_else(|| Error::Validation(format!("unknown example id {id}")))
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { examples, ..self.header() })
    }

    fn header(&self) -> Dataset {
        Dataset { shape: self.shape, classes: self.classes, fine: self.fine.clone(), examples: Vec::new() }
    }

    /// SHA-256 over ids, labels and pixel bits.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for d in self.shape {
            h.update((d as u64).to_le_bytes());
        }
        for ex in &self.examples {
            h.update(ex.id.to_le_bytes());
            h.update((ex.label as u64).to_le_bytes());
            h.update(ex.fine_label.map_or(u64::MAX, |f| f as u64).to_le_bytes());
            for p in &ex.image {
                h.update(p.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Stacks examples into a `[batch, h, w, c]` tensor.
    pub fn batch_tensor<T: Real>(&self, examples: &[&Example]) -> Result<Tensor<T>> {
        let [h, w, c] = self.shape;
        let data = examples.iter().flat_map(|e| e.image.iter().map(|&p| T::of(p as f64))).collect();
        Tensor::new(vec![examples.len(), h, w, c], data)
    }

    /// Writes `id,label,fine_label,p0,p1,...` rows.
    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("id,label,fine_label");
        for i in 0..self.shape.iter().product::<usize>() {
            out.push_str(&format!(",p{i}"));
        }
        out.push('\n');
        for ex in &self.examples {
            out.push_str(&format!("{},{},", ex.id, ex.label));
            if let Some(f) = ex.fine_label {
                out.push_str(&f.to_string());
            }
            for p in &ex.image {
                out.push_str(&format!(",{p}"));
            }
            out.push('\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}
