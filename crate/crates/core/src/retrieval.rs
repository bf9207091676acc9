//! In-memory feature store, exhaustive global kNN and recall@k.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{invalid, Error, Result};
use crate::kernels::dot;
use crate::selection::LocalDescriptorSet;

/// Planar position in meters.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct GeoPoint {
    pub east: f64,
    pub north: f64,
}

impl GeoPoint {
    pub fn new(east: f64, north: f64) -> Self {
        Self { east, north }
    }

    pub fn distance(&self, other: &GeoPoint) -> f64 {
        libm::hypot(self.east - other.east, self.north - other.north)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Query,
    Reference,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Query => "query",
            Split::Reference => "reference",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "query" => Some(Split::Query),
            "reference" => Some(Split::Reference),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlaceRecord {
    pub id: String,
    pub geo: GeoPoint,
    pub split: Split,
    /// Unit-norm global descriptor.
    pub global: Vec<f32>,
    pub locals: LocalDescriptorSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub id: String,
    /// Cosine similarity to the query.
    pub score: f32,
}

/// Candidates ordered by non-increasing score.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct CandidateList {
    pub entries: Vec<Candidate>,
}

impl CandidateList {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|c| c.id.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Score order: higher similarity first, equal scores by ascending id.
pub fn candidate_order(a: (f32, &str), b: (f32, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureStore {
    records: Vec<PlaceRecord>,
    index: BTreeMap<String, usize>,
}

impl FeatureStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn add(&mut self, record: PlaceRecord) -> Result<()> {
        if self.index.contains_key(&record.id) {
            return Err(Error::DuplicateId(record.id));
        }
        if !record.geo.east.is_finite() || !record.geo.north.is_finite() {
            return Err(invalid(alloc::format!("record `{}` has non-finite geo", record.id)));
        }
        let norm = libm::sqrtf(dot(&record.global, &record.global));
        if (norm - 1.0).abs() > 1e-3 {
            return Err(invalid(alloc::format!(
                "record `{}` global descriptor has norm {norm}, expected 1",
                record.id
            )));
        }
        self.index.insert(record.id.clone(), self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&PlaceRecord> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    pub fn records(&self) -> &[PlaceRecord] {
        &self.records
    }

    pub fn references(&self) -> impl Iterator<Item = &PlaceRecord> {
        self.records.iter().filter(|r| r.split == Split::Reference)
    }

    pub fn queries(&self) -> impl Iterator<Item = &PlaceRecord> {
        self.records.iter().filter(|r| r.split == Split::Query)
    }

    /// The `k` references most similar to `query` by cosine similarity.
    pub fn knn(&self, query: &[f32], k: usize) -> Result<CandidateList> {
        if k == 0 {
            return Err(invalid("k must be positive"));
        }
        let mut scored: Vec<(f32, &str)> = self
            .references()
            .map(|r| (dot(query, &r.global), r.id.as_str()))
            .collect();
        if scored.is_empty() {
            return Err(Error::EmptyStore);
        }
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, |a, b| candidate_order(*a, *b));
            scored.truncate(k);
        }
        scored.sort_by(|a, b| candidate_order(*a, *b));
        Ok(CandidateList {
            entries: scored
                .into_iter()
                .map(|(score, id)| Candidate {
                    id: id.into(),
                    score,
                })
                .collect(),
        })
    }
}

#[cfg_attr(feature = "serde", derive(serde::Serialize))]
#[derive(Clone, Debug, PartialEq)]
pub struct RecallReport {
    pub ks: Vec<usize>,
    /// Fraction of evaluated queries with a correct match in the top k.
    pub recall: Vec<f64>,
    pub evaluated: usize,
    /// Queries without any reference inside the radius.
    pub excluded: usize,
}

impl RecallReport {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.recall[i])
    }
}

/// Recall@k over ranked id lists.
///
/// `results[i]` ranks references for the query at `query_geo[i]`;
/// `reference_geo` locates every reference id. Queries with no reference
/// inside `radius` are excluded from the denominator and counted.
pub fn recall_at_k<S: AsRef<str>>(
    results: &[Vec<S>],
    query_geo: &[GeoPoint],
    reference_geo: &BTreeMap<String, GeoPoint>,
    ks: &[usize],
    radius: f64,
) -> Result<RecallReport> {
    if results.len() != query_geo.len() {
        return Err(invalid("one result list per query required"));
    }
    let mut hits = alloc::vec![0usize; ks.len()];
    let mut evaluated = 0;
    let mut excluded = 0;
    for (list, q) in results.iter().zip(query_geo) {
        if !reference_geo.values().any(|g| g.distance(q) <= radius) {
            excluded += 1;
            continue;
        }
        evaluated += 1;
        let first_hit = list.iter().position(|id| {
            reference_geo
                .get(id.as_ref())
                .is_some_and(|g| g.distance(q) <= radius)
        });
        if let Some(pos) = first_hit {
            for (h, &k) in hits.iter_mut().zip(ks) {
                if pos < k {
                    *h += 1;
                }
            }
        }
    }
    let denom = evaluated.max(1) as f64;
    Ok(RecallReport {
        ks: ks.to_vec(),
        recall: hits.iter().map(|&h| h as f64 / denom).collect(),
        evaluated,
        excluded,
    })
}

/// Geo lookup of every reference in a store.
pub fn reference_geo(store: &FeatureStore) -> BTreeMap<String, GeoPoint> {
    store.references().map(|r| (r.id.clone(), r.geo)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::normalize;
    use alloc::format;
    use alloc::string::ToString;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(rng: &mut impl Rng, d: usize) -> Vec<f32> {
        let mut v: Vec<f32> = (0..d).map(|_| rng.random::<f32>() - 0.5).collect();
        normalize(&mut v);
        v
    }

    fn record(id: &str, global: Vec<f32>, geo: GeoPoint) -> PlaceRecord {
        PlaceRecord {
            id: id.to_string(),
            geo,
            split: Split::Reference,
            global,
            locals: LocalDescriptorSet::default(),
        }
    }

    #[test]
    fn add_rejects_duplicates() {
        let mut s = FeatureStore::new();
        s.add(record("a", vec![1.0, 0.0], GeoPoint::default())).unwrap();
        assert_eq!(s.len(), 1);
        let err = s.add(record("a", vec![0.0, 1.0], GeoPoint::default())).unwrap_err();
        assert_eq!(err, Error::DuplicateId("a".into()));
        assert_eq!(s.len(), 1);
        assert!(s.add(record("b", vec![0.5, 0.5], GeoPoint::default())).is_err());
    }

    #[test]
    fn knn_orthogonal_and_self_match() {
        let mut s = FeatureStore::new();
        for (i, v) in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]].iter().enumerate() {
            s.add(record(&format!("r{}", i + 1), v.to_vec(), GeoPoint::default())).unwrap();
        }
        let res = s.knn(&[0.0, 1.0, 0.0], 3).unwrap();
        let ids: Vec<&str> = res.ids().collect();
        assert_eq!(ids, ["r2", "r1", "r3"]);
        assert_eq!(res.entries[0].score, 1.0);
        assert_eq!(res.entries[1].score, 0.0);
        assert!(s.knn(&[0.0, 1.0, 0.0], 0).is_err());
        assert_eq!(FeatureStore::new().knn(&[1.0], 1).unwrap_err(), Error::EmptyStore);
    }

    #[test]
    fn recall_examples() {
        let refs: BTreeMap<String, GeoPoint> = [
            ("near".to_string(), GeoPoint::new(10.0, 0.0)),
            ("far".to_string(), GeoPoint::new(30.0, 0.0)),
            ("close".to_string(), GeoPoint::new(0.0, 5.0)),
        ]
        .into_iter()
        .collect();
        let q = [GeoPoint::new(0.0, 0.0)];
        let r = recall_at_k(&[vec!["near"]], &q, &refs, &[1, 5, 10], 25.0).unwrap();
        assert_eq!(r.recall, vec![1.0, 1.0, 1.0]);
        let r = recall_at_k(&[vec!["far", "far", "close"]], &q, &refs, &[1, 5], 25.0).unwrap();
        assert_eq!(r.recall, vec![0.0, 1.0]);
        let empty: Vec<Vec<&str>> = vec![vec![]];
        let r = recall_at_k(&empty, &q, &refs, &[1], 25.0).unwrap();
        assert_eq!((r.recall[0], r.evaluated), (0.0, 1));
        let r = recall_at_k(&[vec!["far"]], &[GeoPoint::new(500.0, 0.0)], &refs, &[1], 25.0).unwrap();
        assert_eq!((r.evaluated, r.excluded), (0, 1));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn knn_matches_exhaustive_sort(seed in 0u64..10_000, n in 1usize..300, k in 1usize..120) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = FeatureStore::new();
            let mut all = Vec::new();
            for i in 0..n {
                let v = unit(&mut rng, 16);
                all.push((format!("id{i:04}"), v.clone()));
                s.add(record(&format!("id{i:04}"), v, GeoPoint::default())).unwrap();
            }
            let q = unit(&mut rng, 16);
            let got = s.knn(&q, k).unwrap();
            let mut oracle: Vec<(f32, String)> = all.iter().map(|(id, v)| {
                (v.iter().zip(&q).fold(0.0f32, |a, (x, y)| a + x * y), id.clone())
            }).collect();
            oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            oracle.truncate(k);
            let want: Vec<&str> = oracle.iter().map(|(_, id)| id.as_str()).collect();
            let have: Vec<&str> = got.ids().collect();
            prop_assert_eq!(have, want);
            prop_assert!(got.entries.windows(2).all(|w| w[0].score >= w[1].score));
        }

        #[test]
        fn recall_is_monotone_in_k(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let refs: BTreeMap<String, GeoPoint> = (0..30)
                .map(|i| (format!("r{i}"), GeoPoint::new(rng.random_range(0.0..300.0), rng.random_range(0.0..300.0))))
                .collect();
            let ids: Vec<String> = refs.keys().cloned().collect();
            let mut results = Vec::new();
            let mut qs = Vec::new();
            for _ in 0..20 {
                qs.push(GeoPoint::new(rng.random_range(0.0..300.0), rng.random_range(0.0..300.0)));
                let mut l = ids.clone();
                for i in (1..l.len()).rev() {
                    let j = rng.random_range(0..=i);
                    l.swap(i, j);
                }
                results.push(l);
            }
            let r = recall_at_k(&results, &qs, &refs, &[1, 2, 5, 10, 30], 40.0).unwrap();
            prop_assert!(r.recall.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
