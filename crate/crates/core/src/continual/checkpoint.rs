//! Stage checkpoints and their on-disk container.
//!
//! Layout: the 8-byte magic `KLCKPT01`, a little-endian `u64` manifest
//! length, the JSON manifest, then every tensor listed in the manifest as
//! little-endian `f32` values in manifest order. The manifest carries the
//! SHA-256 of that payload.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{FisherDiag, MethodKind};
use crate::error::{Error, Result};
use crate::tensor::{numel, GroupId, Param, ParamKey, ParamSet, ParamSubset, Real, Tensor};

const MAGIC: &[u8; 8] = b"KLCKPT01";

/// Final (best-validation) state of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageCheckpoint<T> {
    pub stage: usize,
    pub method: MethodKind,
    pub params: ParamSet<T>,
    pub val_error: f64,
    pub seed: u64,
    pub config_hash: String,
    /// EWC state computed at the end of the stage, when the method uses it.
    pub fisher: Option<FisherDiag<T>>,
    pub anchor: Option<ParamSubset<T>>,
}

impl<T: Real> StageCheckpoint<T> {
    pub fn new(stage: usize, method: MethodKind, params: ParamSet<T>, val_error: f64, seed: u64) -> Self {
        StageCheckpoint { stage, method, params, val_error, seed, config_hash: String::new(), fisher: None, anchor: None }
    }

    /// Digest of the parameter values as stored on disk.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (key, p) in self.params.iter() {
            h.update(key.group.to_string().as_bytes());
            h.update(p.name.as_bytes());
            for v in p.tensor.data() {
                h.update((v.as_f64() as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Section {
    Param,
    Fisher,
    Anchor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    section: Section,
    group: GroupId,
    index: usize,
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub stage: usize,
    pub method: MethodKind,
    pub seed: u64,
    pub config_hash: String,
    pub val_error: f64,
    pub frozen: Vec<GroupId>,
    pub payload_sha256: String,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint<T: Real>(ckpt: &StageCheckpoint<T>, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    let mut push = |section, key: ParamKey, name: &str, t: &Tensor<T>| {
        tensors.push(TensorEntry { section, group: key.group, index: key.index, name: name.to_string(), shape: t.shape().to_vec() });
        for v in t.data() {
            payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    };
    for (key, p) in ckpt.params.iter() {
        push(Section::Param, key, &p.name, &p.tensor);
    }
    let extras = [(Section::Fisher, ckpt.fisher.as_ref().map(FisherDiag::subset)), (Section::Anchor, ckpt.anchor.as_ref())];
    for (section, subset) in extras {
        for (key, t) in subset.iter().flat_map(|s| &s.entries) {
            let name = &ckpt.params.get(*key)?.name;
            push(section, *key, name, t);
        }
    }
    let manifest = CheckpointManifest {
        stage: ckpt.stage,
        method: ckpt.method,
        seed: ckpt.seed,
        config_hash: ckpt.config_hash.clone(),
        val_error: ckpt.val_error,
        frozen: ckpt.params.frozen().iter().copied().collect(),
        payload_sha256: hex::encode(Sha256::digest(&payload)),
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let io = |e| Error::io(path, e);
    f.write_all(MAGIC).map_err(io)?;
    f.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    f.write_all(&json).map_err(io)?;
    f.write_all(&payload).map_err(io)
}

fn split_file<'a>(bytes: &'a [u8], path: &Path) -> Result<(CheckpointManifest, &'a [u8])> {
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if len > body.len() {
        return Err(bad("truncated manifest"));
    }
    let manifest: CheckpointManifest =
        serde_json::from_slice(&body[..len]).map_err(|e| bad(&format!("manifest: {e}")))?;
    Ok((manifest, &body[len..]))
}

/// Reads only the manifest.
pub fn read_manifest(path: &Path) -> Result<CheckpointManifest> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split_file(&bytes, path)?.0)
}

/// Loads a checkpoint, verifying the payload digest.
pub fn load_checkpoint(path: &Path) -> Result<StageCheckpoint<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (m, payload) = split_file(&bytes, path)?;
    if hex::encode(Sha256::digest(payload)) != m.payload_sha256 {
        return Err(Error::Integrity(format!("{}: payload does not match the manifest hash", path.display())));
    }
    let expected: usize = m.tensors.iter().map(|t| numel(&t.shape) * 4).sum();
    if expected != payload.len() {
        return Err(Error::Format(format!("{}: payload has {} bytes, manifest lists {expected}", path.display(), payload.len())));
    }

    let mut groups: BTreeMap<GroupId, Vec<(usize, Param<f32>)>> = BTreeMap::new();
    let mut fisher = Vec::new();
    let mut anchor = Vec::new();
    let mut offset = 0;
    for t in &m.tensors {
        let n = numel(&t.shape);
        let data = payload[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        offset += 4 * n;
        let tensor = Tensor::new(t.shape.clone(), data)?;
        let key = ParamKey { group: t.group, index: t.index };
        match t.section {
            Section::Param => groups.entry(t.group).or_default().push((t.index, Param { name: t.name.clone(), tensor })),
            Section::Fisher => fisher.push((key, tensor)),
            Section::Anchor => anchor.push((key, tensor)),
        }
    }
    let mut params = ParamSet::new();
    for (g, mut list) in groups {
        list.sort_by_key(|(i, _)| *i);
        if list.iter().enumerate().any(|(i, (j, _))| i != *j) {
            return Err(Error::Format(format!("{}: group {g} has gaps", path.display())));
        }
        params.insert_group(g, list.into_iter().map(|(_, p)| p).collect())?;
    }
    for g in &m.frozen {
        params.freeze(*g)?;
    }
    let fisher = if fisher.is_empty() { None } else { Some(FisherDiag::new(ParamSubset { entries: fisher })?) };
    let anchor = if anchor.is_empty() { None } else { Some(ParamSubset { entries: anchor }) };
    Ok(StageCheckpoint {
        stage: m.stage,
        method: m.method,
        params,
        val_error: m.val_error,
        seed: m.seed,
        config_hash: m.config_hash,
        fisher,
        anchor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::continual::fisher::EWC_GROUPS;
    use crate::network::{BackboneSpec, HeadSpec, InverseSpec, Network, NetworkSpec};

    fn ckpt() -> StageCheckpoint<f32> {
        let net = Network::new(NetworkSpec {
            backbone: BackboneSpec::desk([8, 8, 1], [4, 4, 8]),
            head: HeadSpec { classes: 3, kind: Default::default() },
            aux_head: None,
            inverse: Some(InverseSpec { widths: vec![8] }),
        })
        .unwrap();
        let mut params: ParamSet<f32> = net.init_params(4, true).unwrap();
        params.copy_group_from(&params.clone(), GroupId::NewHead, GroupId::OldHead(1)).unwrap();
        params.freeze(GroupId::Inverse).unwrap();
        let mut c = StageCheckpoint::new(2, MethodKind::EWC, params, 0.125, 77);
        c.config_hash = "cfg".into();
        let anchor = c.params.subset(&EWC_GROUPS).unwrap();
        let mut f = anchor.clone();
        f.entries.iter_mut().for_each(|(_, t)| t.data_mut().iter_mut().for_each(|v| *v = v.abs()));
        c.fisher = Some(FisherDiag::new(f).unwrap());
        c.anchor = Some(anchor);
        c
    }

    #[test]
    fn round_trip() {
        let c = ckpt();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s2.ckpt");
        save_checkpoint(&c, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.content_hash(), c.content_hash());
        let m = read_manifest(&p).unwrap();
        assert_eq!((m.stage, m.seed, m.method), (2, 77, MethodKind::EWC));
    }

    #[test]
    fn corrupted_payload_fails_integrity() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        save_checkpoint(&ckpt(), &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let last = bytes.len() - 3;
        bytes[last] ^= 0x40;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Integrity(_))));
        std::fs::write(&p, b"KLCKPT01\xff\xff").unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Format(_))));
    }
}
