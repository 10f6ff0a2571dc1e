//! Checkpoint file: `SFSC1` magic, u64 little-endian header length, JSON
//! header (architecture, ratios, tensor manifest, seed, step), then every
//! tensor as contiguous little-endian f64 in manifest order. Offsets in the
//! manifest are byte positions relative to the start of the blob section.

use super::{Architecture, ModelError, SwitchableModel};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MAGIC: &[u8; 5] = b"SFSC1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: Vec<u8>, expected: &'static [u8] },
    #[error("file truncated: need at least {expected} bytes, have {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("header is not valid JSON: {0}")]
    HeaderJson(#[from] serde_json::Error),
    #[error("tensor {index} should be {expected_name} {expected_shape:?} at offset {expected_offset}, header has {got_name} {got_shape:?} at {got_offset}")]
    ManifestMismatch {
        index: usize,
        expected_name: String,
        expected_shape: Vec<usize>,
        expected_offset: u64,
        got_name: String,
        got_shape: Vec<usize>,
        got_offset: u64,
    },
    #[error("manifest lists {got} tensors, model has {expected}")]
    ManifestLength { expected: usize, got: usize },
    #[error("blob section holds {actual} bytes, manifest needs exactly {expected}")]
    BlobSize { expected: u64, actual: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    architecture: Architecture,
    crop_ratios: Vec<f64>,
    bn_momentum: f64,
    seed: u64,
    step: u64,
    tensors: Vec<TensorEntry>,
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_checkpoint(model: &SwitchableModel, path: &Path) -> Result<(), CheckpointError> {
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    model.for_each_stored(|name, shape, data| {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape,
            offset: blob.len() as u64,
        });
        for v in data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    });
    let header = Header {
        architecture: model.arch().clone(),
        crop_ratios: model.ratios().training().to_vec(),
        bn_momentum: model.bn_momentum(),
        seed: model.seed(),
        step: model.step(),
        tensors: entries,
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(5 + 8 + header_json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&blob);
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<SwitchableModel, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let preamble = 5 + 8;
    if bytes.len() < preamble {
        return Err(CheckpointError::Truncated {
            expected: preamble as u64,
            actual: bytes.len() as u64,
        });
    }
    if &bytes[..5] != MAGIC {
        return Err(CheckpointError::BadMagic {
            found: bytes[..5].to_vec(),
            expected: MAGIC,
        });
    }
    // u64 compare: a corrupt length field can claim more than any file holds
    let header_len = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes"));
    let expected = (preamble as u64).saturating_add(header_len);
    if (bytes.len() as u64) < expected {
        return Err(CheckpointError::Truncated {
            expected,
            actual: bytes.len() as u64,
        });
    }
    let header_len = header_len as usize;
    let header: Header = serde_json::from_slice(&bytes[preamble..preamble + header_len])?;
    let mut model = SwitchableModel::build(
        header.architecture,
        &header.crop_ratios,
        header.bn_momentum,
        header.seed,
    )?;
    model.set_step(header.step);

    // the manifest must spell out exactly the canonical tensor sequence
    let mut expected = Vec::new();
    let mut cursor = 0u64;
    model.for_each_stored(|name, shape, data| {
        expected.push((name.to_string(), shape, cursor));
        cursor += data.len() as u64 * 8;
    });
    if header.tensors.len() != expected.len() {
        return Err(CheckpointError::ManifestLength {
            expected: expected.len(),
            got: header.tensors.len(),
        });
    }
    for (index, (entry, (name, shape, offset))) in
        header.tensors.iter().zip(&expected).enumerate()
    {
        if &entry.name != name || &entry.shape != shape || entry.offset != *offset {
            return Err(CheckpointError::ManifestMismatch {
                index,
                expected_name: name.clone(),
                expected_shape: shape.clone(),
                expected_offset: *offset,
                got_name: entry.name.clone(),
                got_shape: entry.shape.clone(),
                got_offset: entry.offset,
            });
        }
    }
    let blob = &bytes[preamble + header_len..];
    if blob.len() as u64 != cursor {
        return Err(CheckpointError::BlobSize {
            expected: cursor,
            actual: blob.len() as u64,
        });
    }
    let mut at = 0usize;
    model.for_each_stored_mut(|_, _, data| {
        for v in data.iter_mut() {
            *v = f64::from_le_bytes(blob[at..at + 8].try_into().expect("8 bytes"));
            at += 8;
        }
    });
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};

    fn trained_ish_model() -> SwitchableModel {
        let arch = Architecture {
            input_dim: 6,
            hidden_widths: vec![8, 8],
            feature_dim: 4,
            num_classes: 3,
        };
        let mut m = SwitchableModel::build(arch, &[0.5], 0.1, 42).unwrap();
        // touch running stats and step so the file carries non-initial state
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::matrix(4, 6, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut tape = Tape::new();
        m.forward_train(&mut tape, 0.5, &x).unwrap();
        m.set_step(17);
        m
    }

    #[test]
    fn round_trip_is_bitwise_and_files_are_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.sfsc");
        let p2 = dir.path().join("b.sfsc");
        let m = trained_ish_model();
        save_checkpoint(&m, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded.step(), 17);
        let bits = |m: &SwitchableModel| {
            let mut v = Vec::new();
            m.for_each_stored(|_, _, d| v.extend(d.iter().map(|x| x.to_bits())));
            v
        };
        assert_eq!(bits(&m), bits(&loaded));
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn forward_after_load_matches() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.sfsc");
        let m = trained_ish_model();
        save_checkpoint(&m, &p).unwrap();
        let loaded = load_checkpoint(&p).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::matrix(3, 6, (0..18).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut t1 = Tape::new();
        let f1 = m.forward_eval(&mut t1, 0.5, &x).unwrap();
        let mut t2 = Tape::new();
        let f2 = loaded.forward_eval(&mut t2, 0.5, &x).unwrap();
        for (a, b) in t1.value(f1).data().iter().zip(t2.value(f2).data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn truncated_file_reports_byte_counts() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.sfsc");
        save_checkpoint(&trained_ish_model(), &p).unwrap();
        let full = std::fs::read(&p).unwrap();
        std::fs::write(&p, &full[..full.len() - 100]).unwrap();
        let err = load_checkpoint(&p).unwrap_err();
        match err {
            CheckpointError::BlobSize { expected, actual } => {
                assert_eq!(expected, actual + 100);
            }
            other => panic!("expected BlobSize, got {other:?}"),
        }
        std::fs::write(&p, &full[..7]).unwrap();
        assert!(matches!(
            load_checkpoint(&p),
            Err(CheckpointError::Truncated { .. })
        ));
    }

    #[test]
    fn absurd_header_length_is_rejected_without_panic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.sfsc");
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 32]);
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&p),
            Err(CheckpointError::Truncated { .. })
        ));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.sfsc");
        save_checkpoint(&trained_ish_model(), &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&p),
            Err(CheckpointError::BadMagic { .. })
        ));
    }

    #[test]
    fn tampered_shape_is_rejected_with_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.sfsc");
        save_checkpoint(&trained_ish_model(), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let header_len = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
        let mut header: serde_json::Value =
            serde_json::from_slice(&bytes[13..13 + header_len]).unwrap();
        header["tensors"][0]["shape"][0] = serde_json::json!(999);
        let new_header = serde_json::to_vec(&header).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(&bytes[..5]);
        out.extend_from_slice(&(new_header.len() as u64).to_le_bytes());
        out.extend_from_slice(&new_header);
        out.extend_from_slice(&bytes[13 + header_len..]);
        std::fs::write(&p, out).unwrap();
        match load_checkpoint(&p).unwrap_err() {
            CheckpointError::ManifestMismatch { index, got_shape, .. } => {
                assert_eq!(index, 0);
                assert_eq!(got_shape[0], 999);
            }
            other => panic!("expected ManifestMismatch, got {other:?}"),
        }
    }
}
