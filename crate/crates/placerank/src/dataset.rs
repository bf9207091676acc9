//! Generated datasets on disk: `<dir>/<partition>/manifest.csv` plus
//! `<dir>/<partition>/images/<id>.ppm` for train, val and test.

use std::path::Path;

use placerank_core::retrieval::{GeoPoint, Split};
use placerank_core::synth::{generate_place, partitions, Dataset, Partition, SynthView, WorldSpec};
use placerank_core::training::{TrainData, View, ViewSet};
use serde::{Deserialize, Serialize};

use crate::error::{io_at, Error, Result};
use crate::ingest::MANIFEST;
use crate::ppm;

pub const PARTITIONS: [Partition; 3] = [Partition::Train, Partition::Val, Partition::Test];

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    id: String,
    east_m: f64,
    north_m: f64,
    split: String,
}

/// Same output as the sequential generator, with places spread over up to
/// `threads` workers.
pub fn generate_parallel(spec: &WorldSpec, threads: usize) -> Result<Dataset> {
    spec.validate()?;
    let threads = threads.clamp(1, spec.n_places);
    let chunk = spec.n_places.div_ceil(threads);
    let places: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                s.spawn(move || {
                    (t * chunk..((t + 1) * chunk).min(spec.n_places))
                        .map(|p| generate_place(spec, p))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("generator thread")).collect()
    });
    let parts = partitions(spec);
    let mut data = Dataset {
        centers: Vec::with_capacity(spec.n_places),
        views: Vec::new(),
    };
    for (place, (center, rendered)) in places.into_iter().enumerate() {
        data.centers.push(center);
        for (v, (geo, image)) in rendered.into_iter().enumerate() {
            data.views.push(SynthView {
                id: format!("p{place:04}_v{v}"),
                place,
                geo,
                split: if v == 0 { Split::Reference } else { Split::Query },
                partition: parts[place],
                image,
            });
        }
    }
    Ok(data)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Config(format!("{}: {e}", path.display()))
}

pub fn write(data: &Dataset, dir: &Path) -> Result<()> {
    for part in PARTITIONS {
        let pdir = dir.join(part.as_str());
        let images = pdir.join("images");
        std::fs::create_dir_all(&images).map_err(io_at(&images))?;
        let manifest = pdir.join(MANIFEST);
        let mut w = csv::Writer::from_path(&manifest).map_err(|e| csv_err(&manifest, e))?;
        for v in data.views.iter().filter(|v| v.partition == part) {
            w.serialize(Row {
                id: v.id.clone(),
                east_m: v.geo.east,
                north_m: v.geo.north,
                split: v.split.as_str().into(),
            })
            .map_err(|e| csv_err(&manifest, e))?;
            ppm::save(&v.image, &images.join(format!("{}.ppm", v.id)))?;
        }
        w.flush().map_err(io_at(&manifest))?;
    }
    Ok(())
}

/// Reads one partition directory.
pub fn read_partition(dir: &Path) -> Result<ViewSet> {
    let manifest = dir.join(MANIFEST);
    let mut r = csv::Reader::from_path(&manifest).map_err(|e| csv_err(&manifest, e))?;
    let mut set = ViewSet::default();
    for row in r.deserialize::<Row>() {
        let row = row.map_err(|e| csv_err(&manifest, e))?;
        let split = Split::parse(&row.split)
            .ok_or_else(|| Error::Config(format!("{}: bad split `{}`", manifest.display(), row.split)))?;
        let image = ppm::load(&dir.join("images").join(format!("{}.ppm", row.id)))?;
        let view = View {
            id: row.id,
            geo: GeoPoint::new(row.east_m, row.north_m),
            image,
        };
        match split {
            Split::Query => set.queries.push(view),
            Split::Reference => set.references.push(view),
        }
    }
    Ok(set)
}

pub fn read(dir: &Path, part: Partition) -> Result<ViewSet> {
    read_partition(&dir.join(part.as_str()))
}

pub fn read_train_data(dir: &Path) -> Result<TrainData> {
    Ok(TrainData {
        train: read(dir, Partition::Train)?,
        val: read(dir, Partition::Val)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use placerank_core::synth::generate;

    #[test]
    fn parallel_generation_matches_sequential() {
        let spec = Config::tiny().world();
        assert_eq!(generate_parallel(&spec, 3).unwrap(), generate(&spec).unwrap());
    }

    #[test]
    fn disk_round_trip() {
        let spec = Config::tiny().world();
        let data = generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write(&data, dir.path()).unwrap();
        for part in PARTITIONS {
            assert_eq!(read(dir.path(), part).unwrap(), data.view_set(part));
        }
    }
}
