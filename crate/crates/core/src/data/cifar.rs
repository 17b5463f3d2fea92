//! CIFAR-10 binary batches: 3073-byte records of one label byte followed by
//! the red, green and blue 32×32 planes.

use std::path::Path;

use super::{Dataset, Example};
use crate::error::{Error, Result};

pub const CIFAR_RECORD_BYTES: usize = 3073;
const SIDE: usize = 32;
const PLANE: usize = SIDE * SIDE;
const CLASSES: usize = 10;

fn decode(bytes: &[u8], first_id: u64, source: &Path) -> Result<Vec<Example>> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        return Err(Error::Format(format!(
            "{}: truncated file, {} bytes is not a multiple of {CIFAR_RECORD_BYTES}",
            source.display(),
            bytes.len()
        )));
    }
    bytes
        .chunks_exact(CIFAR_RECORD_BYTES)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[0] as usize;
            if label >= CLASSES {
                return Err(Error::Format(format!("{}: record {i} has label byte {label}", source.display())));
            }
            let planes = &rec[1..];
            let mut image = vec![0f32; PLANE * 3];
            for (pos, px) in image.chunks_exact_mut(3).enumerate() {
                for (c, v) in px.iter_mut().enumerate() {
                    *v = planes[c * PLANE + pos] as f32 / 255.0;
                }
            }
            Ok(Example { id: first_id + i as u64, image, label, fine_label: None })
        })
        .collect()
}

/// Loads one binary batch; ids are sequential from 0.
pub fn load_cifar_binary(path: &Path) -> Result<Dataset> {
    load_cifar_files(&[path])
}

/// Loads several batches with ids continuing across files.
pub fn load_cifar_files<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    let mut examples = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
        examples.extend(decode(&bytes, examples.len() as u64, p)?);
    }
    Ok(Dataset { shape: [SIDE, SIDE, 3], classes: CLASSES, fine: None, examples })
}
