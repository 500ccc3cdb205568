//! Versioned binary checkpoints: magic, version, key=value config block,
//! little-endian f32 parameters, and a trailing SHA-256 of everything before it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Tokenizer, ToyConfig, ToyError, ToyModel};

const MAGIC: &[u8; 6] = b"TOYLM\n";
pub const CHECKPOINT_VERSION: u32 = 1;

pub(crate) fn to_bytes(model: &ToyModel) -> Vec<u8> {
    let c = &model.config;
    let probe = model.probe_layer.map_or("none".to_string(), |l| l.to_string());
    let header = format!(
        "n_layers={}\nd_model={}\nn_heads={}\ncontext_len={}\nseed={}\nvocab_size={}\nprobe_layer={}\n",
        c.n_layers,
        c.d_model,
        c.n_heads,
        c.context_len,
        c.seed,
        c.vocab_size(),
        probe
    );
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for p in &model.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub(crate) fn from_bytes(bytes: &[u8]) -> Result<ToyModel, ToyError> {
    let bad = |m: &str| ToyError::Checkpoint(m.to_string());
    if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("missing magic bytes"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch"));
    }
    let mut at = MAGIC.len();
    let mut take = |len: usize| -> Result<&[u8], ToyError> {
        let s = body.get(at..at + len).ok_or_else(|| bad("truncated"))?;
        at += len;
        Ok(s)
    };
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(ToyError::Checkpoint(format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let header = std::str::from_utf8(take(header_len)?).map_err(|_| bad("header is not UTF-8"))?;
    let fields: BTreeMap<&str, &str> = header.lines().filter_map(|l| l.split_once('=')).collect();
    let num = |k: &str| -> Result<u64, ToyError> {
        fields
            .get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| ToyError::Checkpoint(format!("missing or bad {k}")))
    };
    let config = ToyConfig {
        n_layers: num("n_layers")? as usize,
        d_model: num("d_model")? as usize,
        n_heads: num("n_heads")? as usize,
        context_len: num("context_len")? as usize,
        seed: num("seed")?,
    };
    config.validate()?;
    if num("vocab_size")? as usize != config.vocab_size() {
        return Err(bad("vocabulary size differs from this build"));
    }
    let probe_layer = match fields.get("probe_layer") {
        Some(&"none") => None,
        Some(v) => Some(v.parse().map_err(|_| bad("bad probe_layer"))?),
        None => return Err(bad("missing probe_layer")),
    };
    let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let expected = super::model::Layout::new(&config).total;
    if count != expected {
        return Err(ToyError::Checkpoint(format!(
            "{count} parameters, architecture needs {expected}"
        )));
    }
    let blob = take(count.checked_mul(4).ok_or_else(|| bad("size overflow"))?)?;
    let params = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if at != body.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(ToyModel {
        config,
        params,
        probe_layer,
        tokenizer: Tokenizer::default(),
    })
}

pub fn save_checkpoint(model: &ToyModel, path: &Path) -> Result<(), ToyError> {
    fs::write(path, to_bytes(model)).map_err(|source| ToyError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<ToyModel, ToyError> {
    let bytes = fs::read(path).map_err(|source| ToyError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes)
}
