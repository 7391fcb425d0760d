//! Binary checkpoint: `AMLM` magic, `u32` version, `u64`-length-prefixed JSON
//! header (config, vocabulary, tensor manifest), then every tensor as
//! little-endian `f32` in manifest order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Params, TensorSpec};
use crate::error::{Error, Result};
use crate::tokenizer::Vocab;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AMLM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vec<String>,
    tensors: Vec<TensorSpec>,
}

fn encode(params: &Params<f32>, vocab: &Vocab) -> Result<Vec<u8>> {
    let header = Header {
        config: params.config.clone(),
        vocab: vocab.tokens().to_vec(),
        tensors: params.manifest(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut buf = Vec::with_capacity(16 + json.len() + 4 * params.num_scalars());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for slice in params.slices() {
        for x in slice {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(buf)
}

/// Writes atomically: a sibling temporary file is renamed over `path`.
pub fn save_checkpoint(params: &Params<f32>, config: &ModelConfig, vocab: &Vocab, path: &Path) -> Result<()> {
    if *config != params.config {
        return Err(Error::Checkpoint("config does not match parameters".into()));
    }
    if vocab.len() != config.vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocabulary has {} tokens, config expects {}",
            vocab.len(),
            config.vocab_size
        )));
    }
    let bytes = encode(params, vocab)?;
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let mut file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(&bytes)
        .and_then(|_| file.sync_all())
        .map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Checkpoint(format!("truncated while reading {what}")));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

pub fn load_checkpoint(path: &Path) -> Result<(Params<f32>, ModelConfig, Vocab)> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&raw)
}

pub(crate) fn decode(raw: &[u8]) -> Result<(Params<f32>, ModelConfig, Vocab)> {
    let mut rest = raw;
    if take(&mut rest, 4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(take(&mut rest, 4, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(take(&mut rest, 8, "header length")?.try_into().unwrap());
    let header_len = usize::try_from(header_len).map_err(|_| Error::Checkpoint("header too large".into()))?;
    let header: Header = serde_json::from_slice(take(&mut rest, header_len, "header")?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    header.config.validate()?;
    let vocab = Vocab::from_tokens(header.vocab)?;
    if vocab.len() != header.config.vocab_size {
        return Err(Error::Checkpoint("vocabulary size does not match config".into()));
    }

    let mut params = Params::<f32>::zeros(&header.config);
    if params.manifest() != header.tensors {
        return Err(Error::Checkpoint("tensor manifest does not match config".into()));
    }
    let expected = 4 * params.num_scalars();
    if rest.len() != expected {
        return Err(Error::Checkpoint(format!(
            "expected {expected} bytes of tensor data, found {}",
            rest.len()
        )));
    }
    let mut chunks = rest.chunks_exact(4);
    for slice in params.slices_mut() {
        for (x, c) in slice.iter_mut().zip(&mut chunks) {
            *x = f32::from_le_bytes(c.try_into().unwrap());
        }
    }
    if !params.is_finite() {
        return Err(Error::Checkpoint("non-finite parameter values".into()));
    }
    Ok((params, header.config, vocab))
}
