//! The encoder and reranker bundled as one model, plus store building and
//! retrieval/rerank evaluation.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::Result;
use crate::image::Image;
use crate::params::ParamStore;
use crate::rerank::{rerank, PairScorer, RerankConfig, RerankModel, RerankedList, Reranker};
use crate::retrieval::{
    recall_at_k, reference_geo, CandidateList, FeatureStore, GeoPoint, PlaceRecord, RecallReport, Split,
};
use crate::selection::select_top_k;
use crate::vit::{EncodedImage, Encoder, EncoderConfig};

/// A reference within this distance of the query counts as correct.
pub const CORRECT_RADIUS_M: f64 = 25.0;
pub const RECALL_KS: [usize; 3] = [1, 5, 10];

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub rerank: RerankConfig,
    /// Local tokens kept per image.
    pub top_k: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            rerank: RerankConfig::default(),
            top_k: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub reranker: RerankModel,
}

impl Model {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore<f32>, config: ModelConfig, rng: &mut R) -> Result<Self> {
        let encoder = Encoder::init(store, config.encoder.clone(), rng)?;
        let reranker = RerankModel::init(store, config.rerank.clone(), rng)?;
        Ok(Self {
            config,
            encoder,
            reranker,
        })
    }

    pub fn bind(store: &ParamStore<f32>, config: ModelConfig) -> Result<Self> {
        Ok(Self {
            encoder: Encoder::bind(store, config.encoder.clone())?,
            reranker: RerankModel::bind(store, config.rerank.clone())?,
            config,
        })
    }

    pub fn scorer<'a>(&'a self, params: &'a ParamStore<f32>) -> Reranker<'a> {
        Reranker {
            model: &self.reranker,
            store: params,
        }
    }

    /// Encodes images in chunks of `batch`.
    pub fn encode(&self, params: &ParamStore<f32>, images: &[&Image], batch: usize) -> Result<Vec<EncodedImage>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(batch.max(1)) {
            out.extend(self.encoder.encode_batch(params, chunk)?);
        }
        Ok(out)
    }

    pub fn record(&self, id: String, geo: GeoPoint, split: Split, encoded: &EncodedImage) -> PlaceRecord {
        PlaceRecord {
            id,
            geo,
            split,
            global: encoded.global.clone(),
            locals: select_top_k(encoded, self.config.top_k),
        }
    }

    /// Encodes every view and collects the records into a store.
    pub fn build_store<'a>(
        &self,
        params: &ParamStore<f32>,
        views: impl IntoIterator<Item = (String, GeoPoint, Split, &'a Image)>,
        batch: usize,
    ) -> Result<FeatureStore> {
        let views: Vec<_> = views.into_iter().collect();
        let images: Vec<&Image> = views.iter().map(|v| v.3).collect();
        let encoded = self.encode(params, &images, batch)?;
        let mut store = FeatureStore::new();
        for ((id, geo, split, _), e) in views.into_iter().zip(&encoded) {
            store.add(self.record(id, geo, split, e))?;
        }
        Ok(store)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryResult {
    pub id: String,
    pub retrieval: CandidateList,
    pub reranked: Option<RerankedList>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub retrieval: RecallReport,
    pub reranked: Option<RecallReport>,
    pub queries: Vec<QueryResult>,
}

/// Retrieves `topk` references for every query of the store and, given a
/// scorer, reranks them. Recall uses [`CORRECT_RADIUS_M`].
pub fn evaluate(store: &FeatureStore, scorer: Option<&dyn PairScorer>, topk: usize, ks: &[usize]) -> Result<Evaluation> {
    let refs = reference_geo(store);
    let mut queries = Vec::new();
    for q in store.queries() {
        let retrieval = store.knn(&q.global, topk)?;
        let reranked = match scorer {
            Some(s) => Some(rerank(q, &retrieval, store, s)?),
            None => None,
        };
        queries.push(QueryResult {
            id: q.id.clone(),
            retrieval,
            reranked,
        });
    }
    let geo: Vec<GeoPoint> = queries
        .iter()
        .map(|r| store.get(&r.id).expect("query from store").geo)
        .collect();
    let lists: Vec<Vec<&str>> = queries.iter().map(|r| r.retrieval.ids().collect()).collect();
    let retrieval = recall_at_k(&lists, &geo, &refs, ks, CORRECT_RADIUS_M)?;
    let reranked = match scorer {
        Some(_) => {
            let lists: Vec<Vec<&str>> = queries
                .iter()
                .map(|r| r.reranked.as_ref().expect("reranked").ids().collect())
                .collect();
            Some(recall_at_k(&lists, &geo, &refs, ks, CORRECT_RADIUS_M)?)
        }
        None => None,
    };
    Ok(Evaluation {
        retrieval,
        reranked,
        queries,
    })
}
