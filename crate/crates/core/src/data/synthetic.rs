//! Seeded template-plus-noise image classes.
//!
//! Each class owns a fixed template; an example is its template plus
//! zero-mean Gaussian noise, clipped to `[0, 1]`. With `fine_split`, coarse
//! class `c` is divided into `fine_split[c]` subclasses whose templates are
//! perturbed copies of the coarse one.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Example};
use crate::error::{Error, Result};
use crate::rng::{stream, tag};

/// Half-width of the uniform perturbation separating fine templates.
const FINE_SPREAD: f32 = 0.35;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    /// Examples per (fine, when split) class.
    pub n_per_class: usize,
    pub shape: [usize; 3],
    pub noise_sigma: f32,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fine_split: Option<Vec<usize>>,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Validation("synthetic data needs at least two classes".into()));
        }
        if self.shape.contains(&0) {
            return Err(Error::InvalidShape(format!("synthetic image shape {:?}", self.shape)));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Validation("noise_sigma must be non-negative".into()));
        }
        if let Some(f) = &self.fine_split {
            if f.len() != self.classes || f.contains(&0) {
                return Err(Error::Validation("fine_split needs one positive entry per class".into()));
            }
        }
        Ok(())
    }

    /// Fine → coarse table, when labels are hierarchical.
    pub fn coarsening(&self) -> Option<Vec<usize>> {
        self.fine_split
            .as_ref()
            .map(|f| f.iter().enumerate().flat_map(|(c, &k)| std::iter::repeat_n(c, k)).collect())
    }

    /// Templates indexed by main (fine when split) class.
    pub fn templates(&self) -> Vec<Vec<f32>> {
        let n = self.shape.iter().product::<usize>();
        let coarse: Vec<Vec<f32>> = (0..self.classes)
            .map(|c| {
                let mut rng = stream(self.seed, &[tag::TEMPLATE, c as u64]);
                (0..n).map(|_| rng.gen::<f32>()).collect()
            })
            .collect();
        match self.coarsening() {
            None => coarse,
            Some(table) => table
                .iter()
                .enumerate()
                .map(|(f, &c)| {
                    let mut rng = stream(self.seed, &[tag::TEMPLATE, 1000 + f as u64]);
                    coarse[c]
                        .iter()
                        .map(|&v| (v + rng.gen_range(-FINE_SPREAD..=FINE_SPREAD)).clamp(0.0, 1.0))
                        .collect()
                })
                .collect(),
        }
    }

    fn generate_with(&self, n_per_class: usize, noise_tag: u64, first_id: u64) -> Result<Dataset> {
        self.validate()?;
        let templates = self.templates();
        let table = self.coarsening();
        let mut examples = Vec::with_capacity(templates.len() * n_per_class);
        for (k, t) in templates.iter().enumerate() {
            for i in 0..n_per_class {
                let mut rng = stream(self.seed, &[noise_tag, k as u64, i as u64]);
                let image = t
                    .iter()
                    .map(|&v| {
                        let z: f32 = StandardNormal.sample(&mut rng);
                        (v + self.noise_sigma * z).clamp(0.0, 1.0)
                    })
                    .collect();
                let (label, fine_label) = match &table {
                    Some(tb) => (tb[k], Some(k)),
                    None => (k, None),
                };
                examples.push(Example { id: first_id + examples.len() as u64, image, label, fine_label });
            }
        }
        Ok(Dataset { shape: self.shape, classes: self.classes, fine: table, examples })
    }

    pub fn generate(&self) -> Result<Dataset> {
        self.generate_with(self.n_per_class, tag::NOISE, 0)
    }

    /// Held-out examples from the same templates with an independent noise
    /// stream; ids start after the training ids.
    pub fn generate_test(&self, n_per_class: usize) -> Result<Dataset> {
        let main = self.coarsening().map_or(self.classes, |t| t.len());
        self.generate_with(n_per_class, tag::TEST, (main * self.n_per_class) as u64)
    }
}

pub fn generate_synthetic(
    n_per_class: usize,
    classes: usize,
    shape: [usize; 3],
    noise_sigma: f32,
    seed: u64,
    fine_split: Option<Vec<usize>>,
) -> Result<Dataset> {
    SyntheticSpec { classes, n_per_class, shape, noise_sigma, seed, fine_split }.generate()
}
