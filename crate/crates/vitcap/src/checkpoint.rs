//! Binary checkpoints.
//!
//! Layout: magic "CFCK", u32 LE version (1), u64 LE metadata length,
//! metadata JSON (model config, vocabulary, train config), then each
//! tensor in sorted-name order as u32 LE name length, name bytes,
//! u32 LE rank, u64 LE dims, f32 LE data. Weights are stored at 32-bit
//! precision; loading widens back to f64, so save -> load -> save is
//! byte-identical.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{parameter_shapes, ModelConfig};
use crate::tensor::{Parameters, Tensor};
use crate::text::Vocabulary;
use crate::train::TrainConfig;

const MAGIC: &[u8; 4] = b"CFCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    vocab: Vec<String>,
    train: TrainConfig,
}

/// A checkpoint read back from disk.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: Parameters,
    pub model: ModelConfig,
    pub vocab: Vocabulary,
    pub train: TrainConfig,
}

/// Serializes parameters and their configs.
///
/// Values outside f32 range cannot round-trip and are rejected.
pub fn save_checkpoint(
    params: &Parameters,
    model: &ModelConfig,
    vocab: &Vocabulary,
    train: &TrainConfig,
    path: &Path,
) -> Result<()> {
    let shapes = parameter_shapes(model);
    let table_matches = shapes.len() == params.len()
        && params
            .iter()
            .all(|(name, t)| shapes.get(name).map(Vec::as_slice) == Some(t.shape()));
    if !table_matches {
        return Err(Error::InvalidArgument(
            "parameter table does not match the model config".into(),
        ));
    }
    let meta = Meta {
        model: model.clone(),
        vocab: vocab.tokens().to_vec(),
        train: train.clone(),
    };
    let meta_json =
        serde_json::to_vec(&meta).map_err(|e| Error::Data(format!("checkpoint metadata: {e}")))?;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_json);
    for (name, tensor) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &dim in tensor.shape() {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            let narrow = v as f32;
            if !narrow.is_finite() {
                return Err(Error::Numeric(format!(
                    "value {v} in {name} does not fit 32-bit storage"
                )));
            }
            out.extend_from_slice(&narrow.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::Io(path.display().to_string(), e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Data(format!(
                "checkpoint {what}: truncated at byte {}",
                self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Reads and validates a checkpoint: magic, version, config
/// invariants, and the exact tensor name/shape table implied by the
/// stored model config.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::Io(path.display().to_string(), e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };

    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Data(format!(
            "checkpoint magic: bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Data(format!(
            "checkpoint version: unsupported version {version}, expected {VERSION}"
        )));
    }
    let meta_len = r.u64("metadata length")? as usize;
    let meta_bytes = r.take(meta_len, "metadata")?;
    let meta: Meta = serde_json::from_slice(meta_bytes)
        .map_err(|e| Error::Data(format!("checkpoint metadata: {e}")))?;
    meta.model.validate()?;
    meta.train.validate()?;
    let vocab = Vocabulary::from_tokens(meta.vocab)?;
    if vocab.len() != meta.model.vocab_size {
        return Err(Error::Data(format!(
            "checkpoint vocabulary holds {} tokens but the config says {}",
            vocab.len(),
            meta.model.vocab_size
        )));
    }

    let mut expected = parameter_shapes(&meta.model);
    let mut params = Parameters::new();
    while !r.done() {
        let name_len = r.u32("tensor name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
            .map_err(|_| Error::Data("checkpoint tensor name: not UTF-8".into()))?;
        let want_shape = expected.remove(&name).ok_or_else(|| {
            Error::Data(format!(
                "checkpoint tensor table: unexpected tensor {name:?}"
            ))
        })?;
        let rank = r.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("tensor dim")? as usize);
        }
        if shape != want_shape {
            return Err(Error::Data(format!(
                "checkpoint tensor {name:?}: shape {shape:?} does not match config ({want_shape:?})"
            )));
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(4 * numel, "tensor data")?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        params.insert(&name, Tensor::new(shape, data)?)?;
    }
    if let Some(missing) = expected.keys().next() {
        return Err(Error::Data(format!(
            "checkpoint tensor table: missing tensor {missing:?}"
        )));
    }

    Ok(Checkpoint {
        params,
        model: meta.model,
        vocab,
        train: meta.train,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn fixture() -> (Parameters, ModelConfig, Vocabulary, TrainConfig) {
        let vocab =
            Vocabulary::train(&["a red tile".to_string(), "a blue tile".to_string()], 32).unwrap();
        let model = ModelConfig {
            image_size: 16,
            patch_size: 8,
            d_model: 8,
            n_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ffn_dim: 8,
            vocab_size: vocab.len(),
            max_caption_len: 8,
            ..ModelConfig::default()
        };
        let params = init_params(&model, 3).unwrap();
        (params, model, vocab, TrainConfig::default())
    }

    #[test]
    fn round_trip_preserves_everything_at_f32_precision() {
        let (params, model, vocab, tcfg) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&params, &model, &vocab, &tcfg, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.model, model);
        assert_eq!(loaded.vocab, vocab);
        assert_eq!(loaded.train, tcfg);
        assert_eq!(loaded.params.len(), params.len());
        for ((name, orig), (_, back)) in params.iter().zip(loaded.params.iter()) {
            for (a, b) in orig.data().iter().zip(back.data()) {
                assert_eq!(*a as f32, *b as f32, "{name} drifted past f32 precision");
            }
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (params, model, vocab, tcfg) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let first = dir.path().join("a.ckpt");
        let second = dir.path().join("b.ckpt");
        save_checkpoint(&params, &model, &vocab, &tcfg, &first).unwrap();
        let loaded = load_checkpoint(&first).unwrap();
        save_checkpoint(
            &loaded.params,
            &loaded.model,
            &loaded.vocab,
            &loaded.train,
            &second,
        )
        .unwrap();
        assert_eq!(fs::read(&first).unwrap(), fs::read(&second).unwrap());
    }

    #[test]
    fn corrupted_magic_version_and_truncation_are_named() {
        let (params, model, vocab, tcfg) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&params, &model, &vocab, &tcfg, &path).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("bad magic"), "{err}");

        let mut bad = good.clone();
        bad[4] = 9;
        fs::write(&path, &bad).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");

        fs::write(&path, &good[..good.len() - 3]).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn tensor_table_must_match_the_config_exactly() {
        let (params, model, vocab, tcfg) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");

        // A config whose shape table disagrees with the parameters is
        // rejected at save time.
        let wrong = ModelConfig {
            dec_layers: 2,
            ..model.clone()
        };
        assert!(save_checkpoint(&params, &wrong, &vocab, &tcfg, &path).is_err());

        // Stored names must match the stored config's table too.
        save_checkpoint(&params, &model, &vocab, &tcfg, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let names: Vec<&String> = loaded.params.names().collect();
        let want: Vec<String> = parameter_shapes(&model).into_keys().collect();
        assert_eq!(names, want.iter().collect::<Vec<_>>());
    }

    #[test]
    fn vocab_size_mismatch_is_rejected() {
        let (params, model, vocab, tcfg) = fixture();
        let wrong = ModelConfig {
            vocab_size: vocab.len() + 1,
            ..model
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        assert!(save_checkpoint(&params, &wrong, &vocab, &tcfg, &path).is_err());
    }
}
