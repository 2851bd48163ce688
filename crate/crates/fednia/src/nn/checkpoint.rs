//! Binary weight checkpoints.
//!
//! Layout: 4-byte magic `FNWB`, format version (`u32` LE), header length
//! (`u32` LE), a JSON header carrying the layer specs and the seed the run
//! was started from, then every parameter as `f32` little-endian in
//! [`WeightSet::flatten`] order. Round-tripping preserves each `f32`
//! bit-for-bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::network::{LayerSpec, WeightSet};

const MAGIC: &[u8; 4] = b"FNWB";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    seed: u64,
    layers: Vec<LayerSpec>,
}

/// A restored checkpoint: the weights plus the master seed recorded with them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub weights: WeightSet,
    pub seed: u64,
}

/// Write `weights` (and the producing run's master seed) to `path`.
pub fn save_checkpoint(weights: &WeightSet, seed: u64, path: &Path) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        seed,
        layers: weights.specs(),
    })
    .expect("header serialization cannot fail");
    let flat = weights.flatten();
    let mut buf = Vec::with_capacity(12 + header.len() + flat.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for v in &flat {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Read a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bad = |message: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 {
        return Err(bad(format!("file is only {} bytes", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(bad("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let payload_start = 12 + header_len;
    if bytes.len() < payload_start {
        return Err(bad(format!(
            "header claims {header_len} bytes but the file ends early"
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[12..payload_start])
        .map_err(|e| bad(format!("bad header: {e}")))?;

    let n_params: usize = header
        .layers
        .iter()
        .map(|s| s.input_size * s.output_size + s.output_size)
        .sum();
    let payload = &bytes[payload_start..];
    if payload.len() != n_params * 4 {
        return Err(bad(format!(
            "expected {} parameter bytes, found {}",
            n_params * 4,
            payload.len()
        )));
    }
    let flat: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let weights = WeightSet::from_flat(&header.layers, &flat)?;
    Ok(Checkpoint {
        weights,
        seed: header.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::activation::Activation;
    use crate::nn::network::init_weights;

    fn sample_weights() -> WeightSet {
        init_weights(
            &[
                LayerSpec::new(7, 5, Activation::Relu),
                LayerSpec::new(5, 3, Activation::Softmax),
            ],
            17,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bitwise_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fnwb");
        let w = sample_weights();
        save_checkpoint(&w, 12345, &path).unwrap();
        let restored = load_checkpoint(&path).unwrap();
        assert_eq!(restored.seed, 12345);
        assert_eq!(restored.weights.specs(), w.specs());
        let bits = |w: &WeightSet| w.flatten().iter().map(|v| v.to_bits()).collect::<Vec<u32>>();
        assert_eq!(bits(&restored.weights), bits(&w));
    }

    #[test]
    fn rejects_truncated_and_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fnwb");
        let w = sample_weights();
        save_checkpoint(&w, 1, &path).unwrap();
        let full = std::fs::read(&path).unwrap();

        std::fs::write(&path, &full[..full.len() - 3]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint { .. })
        ));

        let mut bad_magic = full.clone();
        bad_magic[0] = b'X';
        std::fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint { .. })
        ));

        let mut bad_version = full;
        bad_version[4] = 99;
        std::fs::write(&path, &bad_version).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint { .. })
        ));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        assert!(matches!(
            load_checkpoint(Path::new("/nonexistent/model.fnwb")),
            Err(Error::Io { .. })
        ));
    }
}
