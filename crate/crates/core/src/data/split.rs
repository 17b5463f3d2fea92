use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{stream, tag};

/// Ordered, disjoint chunks of example ids, one per center.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CenterSplit {
    pub chunks: Vec<Vec<u64>>,
    pub seed: u64,
    pub source_hash: String,
}

impl CenterSplit {
    /// Digest of the chunk contents, for checking that runs share a split.
    pub fn split_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.source_hash.as_bytes());
        for c in &self.chunks {
            h.update((c.len() as u64).to_le_bytes());
            for id in c {
                h.update(id.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Seeded shuffle, then a contiguous partition into `centers` chunks whose
/// sizes differ by at most one. With `stratified`, ids are dealt round-robin
/// per class instead so each chunk gets a near-equal share of every class.
pub fn multi_center_split(pool: &Dataset, centers: usize, seed: u64, stratified: bool) -> Result<CenterSplit> {
    if centers == 0 {
        return Err(Error::Validation("need at least one center".into()));
    }
    if centers > pool.len() {
        return Err(Error::Validation(format!("{centers} centers for {} examples", pool.len())));
    }
    let mut ids = pool.ids();
    ids.shuffle(&mut stream(seed, &[tag::SPLIT]));
    let chunks = if stratified {
        let label_of: BTreeMap<u64, usize> = pool.examples.iter().map(|e| (e.id, Dataset::main_label(e))).collect();
        let mut by_class: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
        for id in ids {
            by_class.entry(label_of[&id]).or_default().push(id);
        }
        let mut chunks = vec![Vec::new(); centers];
        for (i, id) in by_class.into_values().flatten().enumerate() {
            chunks[i % centers].push(id);
        }
        chunks
    } else {
        let (base, extra) = (ids.len() / centers, ids.len() % centers);
        let mut rest = ids.as_slice();
        (0..centers)
            .map(|i| {
                let (head, tail) = rest.split_at(base + usize::from(i < extra));
                rest = tail;
                head.to_vec()
            })
            .collect()
    };
    Ok(CenterSplit { chunks, seed, source_hash: pool.content_hash() })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValSize {
    Count(usize),
    Fraction(f64),
}

/// Seeded disjoint `(train pool, validation)` split.
pub fn train_val_split(data: &Dataset, val: ValSize, seed: u64) -> Result<(Dataset, Dataset)> {
    let n = data.len();
    let count = match val {
        ValSize::Count(c) => c,
        ValSize::Fraction(f) if (0.0..1.0).contains(&f) => (f * n as f64).round() as usize,
        ValSize::Fraction(f) => return Err(Error::Validation(format!("validation fraction {f} outside [0, 1)"))),
    };
    if count >= n {
        return Err(Error::Validation(format!("validation size {count} >= dataset size {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, &[tag::VALIDATION]));
    let mut is_val = vec![false; n];
    order[..count].iter().for_each(|&i| is_val[i] = true);
    let pick = |want: bool| {
        let ids: Vec<u64> = data.examples.iter().zip(&is_val).filter(|(_, &v)| v == want).map(|(e, _)| e.id).collect();
        data.subset(&ids)
    };
    Ok((pick(false)?, pick(true)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Example;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn pool(n: usize) -> Dataset {
        Dataset {
            shape: [1, 1, 1],
            classes: 4,
            fine: None,
            examples: (0..n as u64)
                .map(|id| Example { id: id * 3 + 1, image: vec![0.5], label: (id % 4) as usize, fine_label: None })
                .collect(),
        }
    }

    fn check_partition(p: &Dataset, s: &CenterSplit) {
        let all: BTreeSet<u64> = p.ids().into_iter().collect();
        let mut seen = BTreeSet::new();
        for c in &s.chunks {
            for id in c {
                assert!(seen.insert(*id), "id {id} in two chunks");
            }
        }
        assert_eq!(seen, all);
        let sizes: Vec<usize> = s.chunks.iter().map(Vec::len).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn forty_thousand_into_four() {
        let p = pool(40_000);
        let s = multi_center_split(&p, 4, 1, false).unwrap();
        assert!(s.chunks.iter().all(|c| c.len() == 10_000));
        check_partition(&p, &s);
    }

    #[test]
    fn one_center_is_a_permutation() {
        let p = pool(50);
        let s = multi_center_split(&p, 1, 5, false).unwrap();
        let mut c = s.chunks[0].clone();
        assert_ne!(c, p.ids());
        c.sort();
        assert_eq!(c, p.ids());
    }

    #[test]
    fn too_many_centers() {
        assert!(multi_center_split(&pool(3), 4, 0, false).is_err());
        assert!(multi_center_split(&pool(3), 0, 0, false).is_err());
    }

    #[test]
    fn stratified_balances_classes() {
        let p = pool(400);
        let s = multi_center_split(&p, 4, 2, true).unwrap();
        check_partition(&p, &s);
        for c in &s.chunks {
            let sub = p.subset(c).unwrap();
            for k in 0..4 {
                assert_eq!(sub.examples.iter().filter(|e| e.label == k).count(), 25);
            }
        }
    }

    #[test]
    fn val_split_counts_and_determinism() {
        let p = pool(500);
        let (tr, va) = train_val_split(&p, ValSize::Count(100), 3).unwrap();
        assert_eq!((tr.len(), va.len()), (400, 100));
        let a: BTreeSet<u64> = tr.ids().into_iter().collect();
        assert!(va.ids().iter().all(|id| !a.contains(id)));
        let (tr2, va2) = train_val_split(&p, ValSize::Count(100), 3).unwrap();
        assert_eq!((tr.ids(), va.ids()), (tr2.ids(), va2.ids()));
        assert!(train_val_split(&p, ValSize::Count(500), 3).is_err());
        let (_, vf) = train_val_split(&p, ValSize::Fraction(0.2), 3).unwrap();
        assert_eq!(vf.len(), 100);
    }

    #[test]
    fn fifty_thousand_minus_ten_thousand() {
        let p = pool(50_000);
        let (tr, va) = train_val_split(&p, ValSize::Count(10_000), 1).unwrap();
        assert_eq!((tr.len(), va.len()), (40_000, 10_000));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn chunks_partition_pool(n in 1usize..300, centers in 1usize..9, seed in any::<u64>(), strat in any::<bool>()) {
            prop_assume!(centers <= n);
            let p = pool(n);
            let s = multi_center_split(&p, centers, seed, strat).unwrap();
            prop_assert_eq!(s.chunks.len(), centers);
            check_partition(&p, &s);
        }
    }
}
