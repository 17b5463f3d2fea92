use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::{source_head, StageCheckpoint};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::{GroupId, Real};

/// Logits of preserved heads for the current chunk, computed once before
/// training from the previous stage's final parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLogitStore {
    /// Stage whose checkpoint produced the logits.
    pub source_stage: usize,
    pub checkpoint_hash: String,
    pub classes: usize,
    rows: BTreeMap<(u64, GroupId), Vec<f32>>,
}

impl PseudoLogitStore {
    pub fn new(source_stage: usize, checkpoint_hash: String, classes: usize) -> Self {
        PseudoLogitStore { source_stage, checkpoint_hash, classes, rows: BTreeMap::new() }
    }

    pub fn insert(&mut self, id: u64, head: GroupId, logits: Vec<f32>) -> Result<()> {
        if logits.len() != self.classes {
            return Err(Error::shape("pseudo_logits", format!("{} logits, expected {}", logits.len(), self.classes)));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("stored pseudo-logits"));
        }
        self.rows.insert((id, head), logits);
        Ok(())
    }

    pub fn get(&self, id: u64, head: GroupId) -> Result<&[f32]> {
        self.rows
            .get(&(id, head))
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingHead(format!("no stored logits for example {id}, head {head}")))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Distinct heads with stored rows.
    pub fn heads(&self) -> std::collections::BTreeSet<GroupId> {
        self.rows.keys().map(|&(_, h)| h).collect()
    }

    /// Checks that every `(id, head)` pair is present.
    pub fn covers(&self, ids: &[u64], heads: &[GroupId]) -> Result<()> {
        for &id in ids {
            for &h in heads {
                self.get(id, h)?;
            }
        }
        Ok(())
    }

    /// Writes a provenance line, a header and one `id,head,l0,...` row per
    /// entry. Values use the shortest text that reads back bit-identically.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = format!("#source_stage={},checkpoint={}\nexample_id,head", self.source_stage, self.checkpoint_hash);
        for c in 0..self.classes {
            out.push_str(&format!(",l{c}"));
        }
        out.push('\n');
        for ((id, head), logits) in &self.rows {
            out.push_str(&format!("{id},{head}"));
            for v in logits {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(f).lines();
        let mut next = || -> Result<Option<String>> { lines.next().transpose().map_err(|e| Error::io(path, e)) };
        let bad = |m: String| Error::Format(format!("{}: {m}", path.display()));

        let prov = next()?.ok_or_else(|| bad("empty file".into()))?;
        let prov = prov.strip_prefix("#source_stage=").ok_or_else(|| bad("missing provenance line".into()))?;
        let (stage, hash) = prov.split_once(",checkpoint=").ok_or_else(|| bad("malformed provenance".into()))?;
        let stage = stage.parse().map_err(|_| bad(format!("bad stage `{stage}`")))?;
        let header = next()?.ok_or_else(|| bad("missing header".into()))?;
        let classes = header.split(',').count().checked_sub(2).filter(|&c| c > 0).ok_or_else(|| bad("bad header".into()))?;

        let mut store = PseudoLogitStore::new(stage, hash.to_string(), classes);
        let mut line_no = 2;
        while let Some(line) = next()? {
            line_no += 1;
            let mut cols = line.split(',');
            let id = cols.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad(format!("line {line_no}: bad id")))?;
            let head: GroupId = cols
                .next()
                .ok_or_else(|| bad(format!("line {line_no}: missing head")))?
                .parse()
                .map_err(|_| bad(format!("line {line_no}: bad head")))?;
            let logits: Vec<f32> = cols
                .map(|s| s.parse::<f32>().map_err(|_| bad(format!("line {line_no}: bad logit `{s}`"))))
                .collect::<Result<_>>()?;
            store.insert(id, head, logits).map_err(|e| bad(format!("line {line_no}: {e}")))?;
        }
        Ok(store)
    }
}

/// Records logits for each preserved head on every example of `chunk`,
/// using `prev` (the previous stage's final parameters) on unaugmented
/// images.
pub fn precompute_pseudo_logits<T: Real>(
    net: &Network,
    prev: &StageCheckpoint<T>,
    chunk: &Dataset,
    heads: &[GroupId],
    batch_size: usize,
) -> Result<PseudoLogitStore> {
    let sources: Vec<GroupId> = heads.iter().map(|&h| source_head(prev, h)).collect::<Result<_>>()?;
    let classes = net.classes();
    let mut store = PseudoLogitStore::new(prev.stage, prev.content_hash(), classes);
    for batch in chunk.examples.chunks(batch_size.max(1)) {
        let refs: Vec<_> = batch.iter().collect();
        let logits = net.predict(&prev.params, chunk.batch_tensor::<T>(&refs)?, &sources)?;
        for (&head, rows) in heads.iter().zip(&logits) {
            for (ex, row) in batch.iter().zip(rows.chunks_exact(classes)) {
                store.insert(ex.id, head, row.iter().map(|v| v.as_f64() as f32).collect())?;
            }
        }
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_bit_identical() {
        let mut s = PseudoLogitStore::new(2, "abc".into(), 3);
        s.insert(7, GroupId::OldHead(1), vec![0.1, -3.4028235e38, 1.0e-45]).unwrap();
        s.insert(3, GroupId::OldHead(2), vec![1.0 / 3.0, 2.5, -0.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pl.csv");
        s.save_csv(&p).unwrap();
        let back = PseudoLogitStore::load_csv(&p).unwrap();
        assert_eq!(back.source_stage, 2);
        assert_eq!(back.checkpoint_hash, "abc");
        for key in [(7, GroupId::OldHead(1)), (3, GroupId::OldHead(2))] {
            let a: Vec<u32> = s.get(key.0, key.1).unwrap().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.get(key.0, key.1).unwrap().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn missing_entries_and_bad_rows() {
        let mut s = PseudoLogitStore::new(1, "h".into(), 2);
        s.insert(1, GroupId::OldHead(1), vec![0.0, 1.0]).unwrap();
        assert!(matches!(s.covers(&[1, 2], &[GroupId::OldHead(1)]), Err(Error::MissingHead(_))));
        assert!(s.insert(2, GroupId::OldHead(1), vec![0.0]).is_err());
        assert!(s.insert(2, GroupId::OldHead(1), vec![0.0, f32::NAN]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "#source_stage=1,checkpoint=h\nexample_id,head,l0,l1\n1,old_head_1,0.5\n").unwrap();
        assert!(matches!(PseudoLogitStore::load_csv(&p), Err(Error::Format(_))));
    }
}
