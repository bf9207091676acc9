//! `R2PK` parameter checkpoints.
//!
//! Layout (little-endian): magic `R2PK`, version u16, metadata length u32
//! plus UTF-8 TOML metadata, array count u32, then per array: name length
//! u16, UTF-8 name, rank u8, rank × u32 dims, f32 values.

use std::path::Path;

use placerank_core::params::ParamStore;
use placerank_core::tensor::Tensor;
use placerank_core::Result as CoreResult;
use serde::{Deserialize, Serialize};

use crate::bin_io::{put_f32s, Reader};
use crate::config::Config;
use crate::error::{at_path, io_at, Error, Result};

pub const MAGIC: &[u8; 4] = b"R2PK";
pub const VERSION: u16 = 1;

/// What produced the weights: the full configuration and the stages run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stages: Vec<String>,
    pub config: Config,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore<f32>,
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let meta = toml::to_string(&ckpt.meta).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for (_, name, t) in ckpt.params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        put_f32s(&mut out, t.data());
    }
    Ok(out)
}

fn decode_arrays(r: &mut Reader<'_>) -> CoreResult<ParamStore<f32>> {
    let count = r.u32("array count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let n = r.u16("name length")? as usize;
        let name = r.str(n, "array name")?.to_string();
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("dimension").map(|d| d as usize))
            .collect::<CoreResult<Vec<_>>>()?;
        let at = r.pos();
        let values = r.f32s(shape.iter().product(), "array values")?;
        let t = Tensor::new(shape, values)?;
        if store.id(&name).is_some() {
            return Err(placerank_core::Error::Format {
                offset: at,
                reason: format!("duplicate array `{name}`"),
            });
        }
        store.add(&name, t)?;
    }
    if !r.is_empty() {
        return r.fail("trailing bytes after last array");
    }
    Ok(store)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    let meta_text = (|| -> CoreResult<&str> {
        r.magic(MAGIC, VERSION)?;
        let n = r.u32("metadata length")? as usize;
        r.str(n, "metadata")
    })()
    .map_err(at_path(path))?;
    let meta: CheckpointMeta =
        toml::from_str(meta_text).map_err(|e| Error::Config(format!("{}: checkpoint metadata: {e}", path.display())))?;
    let params = decode_arrays(&mut r).map_err(at_path(path))?;
    Ok(Checkpoint { meta, params })
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, encode(ckpt)?).map_err(io_at(path))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(io_at(path))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use placerank_core::pipeline::Model;
    use rand::SeedableRng;

    fn sample() -> Checkpoint {
        let config = Config::tiny();
        let mut params = ParamStore::new();
        Model::init(&mut params, config.model(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(3)).unwrap();
        Checkpoint {
            meta: CheckpointMeta {
                stages: vec!["retrieval".into()],
                config,
            },
            params,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = decode(&encode(&c).unwrap(), Path::new("x")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn corrupt_files_report_offsets() {
        let bytes = encode(&sample()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad, Path::new("x")), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad, Path::new("x")), Err(Error::Format { offset: 4, .. })));
        let cut = &bytes[..bytes.len() - 3];
        let err = decode(cut, Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }
}
