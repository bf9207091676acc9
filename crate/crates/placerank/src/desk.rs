//! The synthetic benchmark: retrieval training once per seed, then one
//! reranker per variant on top of the same encoder, scored on the test
//! places.

use std::time::Instant;

use placerank_core::params::ParamStore;
use placerank_core::pipeline::{evaluate, Model, RECALL_KS};
use placerank_core::rerank::{Ablation, PairScorer};
use placerank_core::retrieval::{FeatureStore, RecallReport};
use placerank_core::synth::{Dataset, Partition};
use placerank_core::training::{train, EpochLog, Stage, TrainData};
use placerank_core::vit::PREFIX as ENCODER_PREFIX;
use rand::SeedableRng;
use serde::Serialize;

use crate::config::Config;
use crate::dataset::generate_parallel;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoCorrelation,
    Top1,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoCorrelation, Variant::Top1];

    pub fn ablation(self) -> Ablation {
        match self {
            Variant::Full => Ablation::default(),
            Variant::NoCorrelation => Ablation {
                no_correlation: true,
                ..Ablation::default()
            },
            Variant::Top1 => Ablation {
                top1: true,
                ..Ablation::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantRun {
    pub variant: Variant,
    pub reranked: RecallReport,
    pub train_seconds: f64,
}

/// Mean cosine similarity between query and reference global descriptors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Separation {
    pub same_place: f64,
    pub cross_place: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedRun {
    pub seed: u64,
    pub config_hash: String,
    pub retrieval: RecallReport,
    pub separation: Separation,
    pub retrieval_seconds: f64,
    pub variants: Vec<VariantRun>,
}

impl SeedRun {
    pub fn variant(&self, v: Variant) -> Option<&VariantRun> {
        self.variants.iter().find(|r| r.variant == v)
    }
}

/// Place of a synthetic id `p0042_v1`.
fn place(id: &str) -> &str {
    id.split('_').next().unwrap_or(id)
}

pub fn separation(store: &FeatureStore) -> Separation {
    let (mut same, mut ns, mut cross, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for q in store.queries() {
        for r in store.references() {
            let s: f32 = q.global.iter().zip(&r.global).map(|(a, b)| a * b).sum();
            if place(&q.id) == place(&r.id) {
                same += s as f64;
                ns += 1;
            } else {
                cross += s as f64;
                nc += 1;
            }
        }
    }
    Separation {
        same_place: same / ns.max(1) as f64,
        cross_place: cross / nc.max(1) as f64,
    }
}

fn test_eval(model: &Model, params: &ParamStore<f32>, data: &Dataset, config: &Config, rerank: bool) -> Result<(FeatureStore, placerank_core::pipeline::Evaluation)> {
    let test = data.view_set(Partition::Test);
    let store = model.build_store(params, test.store_views(), config.encode_batch)?;
    let scorer = model.scorer(params);
    let scorer: Option<&dyn PairScorer> = if rerank { Some(&scorer) } else { None };
    let eval = evaluate(&store, scorer, config.topk, &RECALL_KS)?;
    Ok((store, eval))
}

/// Runs one seed. `config.seed` is replaced by `seed`.
pub fn run_seed(config: &Config, seed: u64, variants: &[Variant], threads: usize, log: &mut dyn FnMut(&str, &EpochLog)) -> Result<SeedRun> {
    let config = Config { seed, ..config.clone() };
    let data = generate_parallel(&config.world(), threads)?;
    let td: TrainData = data.train_data();

    let t = Instant::now();
    let mut params = ParamStore::new();
    let model = Model::init(&mut params, config.model(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))?;
    let out = train(Stage::Retrieval, &config.stage(Stage::Retrieval), &model, params, &td, &mut |l| log("full", l))?;
    let encoder = out.params;
    let retrieval_seconds = t.elapsed().as_secs_f64();
    let (store, eval) = test_eval(&model, &encoder, &data, &config, false)?;

    let mut runs = Vec::new();
    for &v in variants {
        let mut vc = config.clone();
        vc.model.rerank.ablation = v.ablation();
        let mut params = ParamStore::new();
        let vmodel = Model::init(&mut params, vc.model(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))?;
        for (_, name, t) in encoder.iter().filter(|(_, n, _)| n.starts_with(ENCODER_PREFIX)) {
            params.set(name, t.clone())?;
        }
        let t = Instant::now();
        let name = format!("{v:?}");
        let out = train(Stage::Rerank, &vc.stage(Stage::Rerank), &vmodel, params, &td, &mut |l| log(&name, l))?;
        let train_seconds = t.elapsed().as_secs_f64();
        let (_, ev) = test_eval(&vmodel, &out.params, &data, &vc, true)?;
        runs.push(VariantRun {
            variant: v,
            reranked: ev.reranked.expect("scored"),
            train_seconds,
        });
    }
    Ok(SeedRun {
        seed,
        config_hash: config.hash(),
        retrieval: eval.retrieval,
        separation: separation(&store),
        retrieval_seconds,
        variants: runs,
    })
}
