//! `R2FS` feature stores.
//!
//! Layout (little-endian): magic `R2FS`, version u16, record count u64, then
//! per record: id length u16 + UTF-8 id, east and north f64, split u8
//! (0 query, 1 reference), 256 × f32 global descriptor, then the local
//! descriptor block (count u32, dtype u8, `count × 131` values).

use std::path::Path;

use placerank_core::retrieval::{FeatureStore, GeoPoint, PlaceRecord, Split};
use placerank_core::selection::{dequantize_prefix, quantize, Precision};
use placerank_core::vit::GLOBAL_DIM;
use placerank_core::Result as CoreResult;

use crate::bin_io::{put_f32s, Reader};
use crate::error::{at_path, io_at, Result};

pub const MAGIC: &[u8; 4] = b"R2FS";
pub const VERSION: u16 = 1;

fn split_tag(s: Split) -> u8 {
    match s {
        Split::Query => 0,
        Split::Reference => 1,
    }
}

/// Appends the global descriptor and local block of `rec`.
pub fn put_features(out: &mut Vec<u8>, rec: &PlaceRecord, precision: Precision) -> CoreResult<()> {
    if rec.global.len() != GLOBAL_DIM {
        return Err(placerank_core::Error::InvalidArgument(format!(
            "record `{}`: global descriptor has {} values, the store layout needs {GLOBAL_DIM}",
            rec.id,
            rec.global.len()
        )));
    }
    put_f32s(out, &rec.global);
    out.extend_from_slice(&quantize(&rec.locals, precision)?);
    Ok(())
}

pub fn put_record(out: &mut Vec<u8>, rec: &PlaceRecord, precision: Precision) -> CoreResult<()> {
    out.extend_from_slice(&(rec.id.len() as u16).to_le_bytes());
    out.extend_from_slice(rec.id.as_bytes());
    out.extend_from_slice(&rec.geo.east.to_le_bytes());
    out.extend_from_slice(&rec.geo.north.to_le_bytes());
    out.push(split_tag(rec.split));
    put_features(out, rec, precision)
}

/// Reads a global descriptor and local block.
pub fn read_features(r: &mut Reader<'_>) -> CoreResult<(Vec<f32>, placerank_core::selection::LocalDescriptorSet)> {
    let global = r.f32s(GLOBAL_DIM, "global descriptor")?;
    let (locals, _, used) = dequantize_prefix(r.rest(), r.pos())?;
    r.skip(used);
    Ok((global, locals))
}

fn read_record(r: &mut Reader<'_>) -> CoreResult<PlaceRecord> {
    let n = r.u16("id length")? as usize;
    let id = r.str(n, "id")?.to_string();
    let geo = GeoPoint::new(r.f64("east")?, r.f64("north")?);
    let split = match r.u8("split")? {
        0 => Split::Query,
        1 => Split::Reference,
        t => return r.fail(format!("unknown split tag {t}")),
    };
    let (global, locals) = read_features(r)?;
    Ok(PlaceRecord {
        id,
        geo,
        split,
        global,
        locals,
    })
}

pub fn encode(store: &FeatureStore, precision: Precision) -> CoreResult<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for rec in store.records() {
        put_record(&mut out, rec, precision)?;
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> CoreResult<FeatureStore> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC, VERSION)?;
    let count = r.u64("record count")?;
    let mut store = FeatureStore::new();
    for _ in 0..count {
        let at = r.pos();
        let rec = read_record(&mut r)?;
        store.add(rec).map_err(|e| placerank_core::Error::Format {
            offset: at,
            reason: e.to_string(),
        })?;
    }
    if !r.is_empty() {
        return r.fail("trailing bytes after last record");
    }
    Ok(store)
}

pub fn save(store: &FeatureStore, precision: Precision, path: &Path) -> Result<()> {
    let bytes = encode(store, precision)?;
    std::fs::write(path, bytes).map_err(io_at(path))
}

pub fn load(path: &Path) -> Result<FeatureStore> {
    let bytes = std::fs::read(path).map_err(io_at(path))?;
    decode(&bytes).map_err(at_path(path))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use placerank_core::kernels::normalize;
    use placerank_core::selection::{LocalDescriptor, LocalDescriptorSet};
    use placerank_core::vit::LOCAL_DIM;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
        let mut v: Vec<f32> = (0..d).map(|_| rng.random::<f32>() - 0.5).collect();
        normalize(&mut v);
        v
    }

    pub(crate) fn random_store(n: usize, seed: u64) -> FeatureStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = FeatureStore::new();
        for i in 0..n {
            let k = rng.random_range(0..6);
            let mut att: Vec<f32> = (0..k).map(|_| rng.random()).collect();
            att.sort_by(|a, b| b.total_cmp(a));
            let locals = LocalDescriptorSet {
                records: att
                    .into_iter()
                    .map(|attention| LocalDescriptor {
                        x: rng.random(),
                        y: rng.random(),
                        attention,
                        feature: unit(&mut rng, LOCAL_DIM),
                    })
                    .collect(),
            };
            store
                .add(PlaceRecord {
                    id: format!("img{i:03}"),
                    geo: GeoPoint::new(rng.random::<f64>() * 500.0, rng.random::<f64>() * 500.0),
                    split: if i % 4 == 0 { Split::Reference } else { Split::Query },
                    global: unit(&mut rng, GLOBAL_DIM),
                    locals,
                })
                .unwrap();
        }
        store
    }

    #[test]
    fn f32_round_trip_is_bit_exact() {
        let store = random_store(100, 1);
        assert_eq!(decode(&encode(&store, Precision::F32).unwrap()).unwrap(), store);
    }

    #[test]
    fn f16_round_trip_within_quantization() {
        let store = random_store(20, 2);
        let back = decode(&encode(&store, Precision::F16).unwrap()).unwrap();
        for (a, b) in store.records().iter().zip(back.records()) {
            assert_eq!(a.global, b.global);
            for (x, y) in a.locals.records.iter().zip(&b.locals.records) {
                for (u, v) in x.feature.iter().zip(&y.feature) {
                    assert!((u - v).abs() <= 1.0 / 1024.0);
                }
            }
        }
    }

    #[test]
    fn bad_input_is_rejected() {
        let bytes = encode(&random_store(3, 3), Precision::F32).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[1] = b'?';
        assert!(decode(&bad).is_err());
        let mut longer = bytes;
        longer.push(0);
        assert!(decode(&longer).is_err());
    }
}
