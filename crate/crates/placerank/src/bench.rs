//! Cost accounting: wall-clock medians, feature bytes and analytic
//! operation counts.

use std::time::Instant;

use placerank_core::cost::{encoder_cost, rerank_cost, OpCount};
use placerank_core::image::Image;
use placerank_core::params::ParamStore;
use placerank_core::pipeline::Model;
use placerank_core::rerank::{rerank, RerankConfig};
use placerank_core::retrieval::FeatureStore;
use placerank_core::selection::{payload_bytes, Precision};
use placerank_core::vit::EncoderConfig;
use placerank_core::Error as CoreError;
use rand::{Rng, SeedableRng};
use serde::Serialize;

use crate::error::Result;

pub const MIN_REPS: usize = 20;
/// Images in the large reference database used for the memory extrapolation.
pub const REFERENCE_IMAGES: usize = 18_871;
pub const REFERENCE_TOKENS: usize = 500;
pub const REFERENCE_TOPK: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Ops {
    pub linear_gmacs: f64,
    /// Multiplies and adds counted separately, attention products included.
    pub total_gflops: f64,
}

impl From<OpCount> for Ops {
    fn from(c: OpCount) -> Self {
        Self {
            linear_gmacs: c.linear_giga(),
            total_gflops: c.flops() as f64 * 1e-9,
        }
    }
}

/// Counts for a ViT-S/16 at 640×480 with 500 tokens per side.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReferenceScale {
    pub tokens_per_image: usize,
    pub local_bytes_f32: usize,
    pub images: usize,
    pub store_gb: f64,
    pub encode: Ops,
    pub rerank_pair: Ops,
    pub rerank_topk: usize,
    /// Encode plus `rerank_topk` pairs, linear MACs.
    pub query_linear_gmacs: f64,
}

impl ReferenceScale {
    pub fn compute() -> Self {
        let local = payload_bytes(REFERENCE_TOKENS, Precision::F32);
        let encode: Ops = encoder_cost(&EncoderConfig::vit_small()).into();
        let pair: Ops = rerank_cost(&RerankConfig::default(), 2 * REFERENCE_TOKENS).into();
        Self {
            tokens_per_image: REFERENCE_TOKENS,
            local_bytes_f32: local,
            images: REFERENCE_IMAGES,
            store_gb: (local * REFERENCE_IMAGES) as f64 * 1e-9,
            query_linear_gmacs: encode.linear_gmacs + REFERENCE_TOPK as f64 * pair.linear_gmacs,
            encode,
            rerank_pair: pair,
            rerank_topk: REFERENCE_TOPK,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub reps: usize,
    pub topk: usize,
    pub extraction_ms: f64,
    pub retrieval_ms: f64,
    /// One query against its `topk` candidates in a single batch.
    pub rerank_ms: f64,
    pub tokens_per_image: usize,
    pub local_bytes_f32: usize,
    pub local_bytes_f16: usize,
    pub encode: Ops,
    /// At `2 × tokens_per_image` pair rows.
    pub rerank_pair: Ops,
    pub reference_scale: ReferenceScale,
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    assert!(!xs.is_empty());
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

fn time_ms(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut xs = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        xs.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(median(xs))
}

/// Times extraction, retrieval and reranking with the first query of
/// `store`. The store is only read.
pub fn bench(model: &Model, params: &ParamStore<f32>, store: &FeatureStore, topk: usize, reps: usize) -> Result<CostReport> {
    let reps = reps.max(MIN_REPS);
    let query = store.queries().next().ok_or(CoreError::EmptyStore)?;
    store.references().next().ok_or(CoreError::EmptyStore)?;
    let enc = &model.config.encoder;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let image = Image::new(
        enc.image_h,
        enc.image_w,
        enc.channels,
        (0..enc.image_h * enc.image_w * enc.channels).map(|_| rng.random()).collect(),
    )?;
    let extraction_ms = time_ms(reps, || {
        model.encoder.encode_batch(params, &[&image])?;
        Ok(())
    })?;
    let retrieval_ms = time_ms(reps, || {
        store.knn(&query.global, topk)?;
        Ok(())
    })?;
    let candidates = store.knn(&query.global, topk)?;
    let scorer = model.scorer(params);
    let rerank_ms = time_ms(reps, || {
        rerank(query, &candidates, store, &scorer)?;
        Ok(())
    })?;
    let k = model.config.top_k;
    Ok(CostReport {
        reps,
        topk,
        extraction_ms,
        retrieval_ms,
        rerank_ms,
        tokens_per_image: k,
        local_bytes_f32: payload_bytes(k, Precision::F32),
        local_bytes_f16: payload_bytes(k, Precision::F16),
        encode: encoder_cost(enc).into(),
        rerank_pair: rerank_cost(&model.config.rerank, 2 * k).into(),
        reference_scale: ReferenceScale::compute(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn reference_bytes() {
        let r = ReferenceScale::compute();
        assert_eq!(r.local_bytes_f32, 262_000);
        assert!((r.store_gb - 4.79).abs() / 4.79 < 0.05);
    }
}
