//! Externally computed features: a `manifest.csv` (`id,east_m,north_m,split`)
//! next to one `<id>.r2lf` file per image holding the global descriptor and
//! local block in the store record layout.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use placerank_core::retrieval::{FeatureStore, GeoPoint, PlaceRecord, Split};
use placerank_core::selection::Precision;
use placerank_core::vit::GLOBAL_DIM;
use serde::{Deserialize, Serialize};

use crate::bin_io::Reader;
use crate::error::{io_at, Error, Result};
use crate::store_file::{put_features, read_features};

pub const MANIFEST: &str = "manifest.csv";
pub const FEATURE_EXT: &str = "r2lf";
/// Allowed deviation of descriptor norms from 1.
pub const NORM_TOL: f32 = 1e-3;

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    id: String,
    east_m: f64,
    north_m: f64,
    split: String,
}

/// Writes `store` as a manifest plus feature files under `dir`.
pub fn save_features(store: &FeatureStore, dir: &Path, precision: Precision) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_at(dir))?;
    let manifest = dir.join(MANIFEST);
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| Error::Config(format!("{}: {e}", manifest.display())))?;
    for rec in store.records() {
        w.serialize(Row {
            id: rec.id.clone(),
            east_m: rec.geo.east,
            north_m: rec.geo.north,
            split: rec.split.as_str().into(),
        })
        .map_err(|e| Error::Config(e.to_string()))?;
        let mut bytes = Vec::new();
        put_features(&mut bytes, rec, precision)?;
        let path = dir.join(format!("{}.{FEATURE_EXT}", rec.id));
        std::fs::write(&path, bytes).map_err(io_at(&path))?;
    }
    w.flush().map_err(io_at(&manifest))
}

fn check_global(id: &str, g: &[f32], problems: &mut Vec<String>) -> bool {
    let n = g.iter().map(|v| v * v).sum::<f32>().sqrt();
    if (n - 1.0).abs() > NORM_TOL {
        problems.push(format!(
            "{id}: global descriptor norm {n:.4} is not 1; L2-normalize global descriptors before ingesting"
        ));
        return false;
    }
    true
}

/// Loads every manifest entry, collecting all problems before failing.
pub fn ingest(dir: &Path) -> Result<FeatureStore> {
    let manifest = dir.join(MANIFEST);
    let mut reader = csv::Reader::from_path(&manifest).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io {
            path: manifest.clone(),
            source,
        },
        other => Error::Config(format!("{}: {other:?}", manifest.display())),
    })?;
    let mut problems = Vec::new();
    let mut rows: BTreeMap<String, (GeoPoint, Split)> = BTreeMap::new();
    let mut order = Vec::new();
    for (line, row) in reader.deserialize::<Row>().enumerate() {
        let line = line + 2;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!("{MANIFEST} line {line}: {e}"));
                continue;
            }
        };
        let Some(split) = Split::parse(&row.split) else {
            problems.push(format!(
                "{MANIFEST} line {line}: split `{}` is neither `query` nor `reference`",
                row.split
            ));
            continue;
        };
        if rows.insert(row.id.clone(), (GeoPoint::new(row.east_m, row.north_m), split)).is_some() {
            problems.push(format!("{MANIFEST} line {line}: duplicate id `{}`", row.id));
            continue;
        }
        order.push(row.id);
    }

    let mut on_disk = BTreeSet::new();
    for entry in std::fs::read_dir(dir).map_err(io_at(dir))? {
        let path = entry.map_err(io_at(dir))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(FEATURE_EXT) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                on_disk.insert(stem.to_string());
            }
        }
    }
    for id in on_disk.iter().filter(|id| !rows.contains_key(*id)) {
        problems.push(format!("{id}: feature file has no manifest entry"));
    }

    let mut store = FeatureStore::new();
    for id in &order {
        if !on_disk.contains(id) {
            problems.push(format!("{id}: listed in the manifest but {id}.{FEATURE_EXT} is missing"));
            continue;
        }
        let path = dir.join(format!("{id}.{FEATURE_EXT}"));
        let bytes = std::fs::read(&path).map_err(io_at(&path))?;
        let mut r = Reader::new(&bytes);
        let (global, locals) = match read_features(&mut r) {
            Ok(v) if r.is_empty() => v,
            Ok(_) => {
                problems.push(format!("{id}: trailing bytes after the local block"));
                continue;
            }
            Err(e) => {
                problems.push(format!("{id}: {e} (expected {GLOBAL_DIM} f32 global values then the local block)"));
                continue;
            }
        };
        if let Err(e) = locals.validate(NORM_TOL) {
            problems.push(format!("{id}: local descriptors: {e}"));
            continue;
        }
        if !check_global(id, &global, &mut problems) {
            continue;
        }
        let (geo, split) = rows[id];
        if let Err(e) = store.add(PlaceRecord {
            id: id.clone(),
            geo,
            split,
            global,
            locals,
        }) {
            problems.push(format!("{id}: {e}"));
        }
    }
    if problems.is_empty() {
        Ok(store)
    } else {
        Err(Error::Ingest(problems))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store_file::tests::random_store;

    #[test]
    fn save_then_ingest_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let store = random_store(30, 5);
        save_features(&store, dir.path(), Precision::F32).unwrap();
        assert_eq!(ingest(dir.path()).unwrap(), store);
    }

    #[test]
    fn missing_and_orphan_files_are_itemized() {
        let dir = tempfile::tempdir().unwrap();
        save_features(&random_store(5, 6), dir.path(), Precision::F32).unwrap();
        std::fs::remove_file(dir.path().join("img002.r2lf")).unwrap();
        std::fs::write(dir.path().join("stray.r2lf"), b"").unwrap();
        let Err(Error::Ingest(problems)) = ingest(dir.path()) else {
            panic!("expected ingest error")
        };
        assert_eq!(problems.len(), 2, "{problems:?}");
        assert!(problems.iter().any(|p| p.contains("img002") && p.contains("missing")));
        assert!(problems.iter().any(|p| p.contains("stray")));
    }

    #[test]
    fn unnormalized_locals_get_a_hint() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = random_store(4, 7);
        let mut bad = FeatureStore::new();
        for (i, rec) in store.records().iter().enumerate() {
            let mut rec = rec.clone();
            if i == 1 {
                rec.locals.records.push(placerank_core::selection::LocalDescriptor {
                    x: 0.5,
                    y: 0.5,
                    attention: 0.0,
                    feature: vec![0.5; 128],
                });
            }
            bad.add(rec).unwrap();
        }
        store = bad;
        save_features(&store, dir.path(), Precision::F32).unwrap();
        let err = ingest(dir.path()).unwrap_err().to_string();
        assert!(err.contains("img001") && err.contains("L2-normalize"), "{err}");
    }
}
