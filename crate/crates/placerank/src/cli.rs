//! Subcommand implementations behind the `placerank` binary.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use placerank_core::image::Image;
use placerank_core::params::ParamStore;
use placerank_core::pipeline::{evaluate, Model, RECALL_KS};
use placerank_core::rerank::{build_pair_features, rerank, PairScorer, RerankedList};
use placerank_core::retrieval::{candidate_order, Candidate, CandidateList, FeatureStore};
use placerank_core::selection::{select_top_k, Precision};
use placerank_core::synth::Partition;
use placerank_core::training::{train, Stage};
use placerank_core::Error as CoreError;
use rand::SeedableRng;
use serde::Serialize;
use serde_json::json;

use crate::checkpoint::{self, Checkpoint, CheckpointMeta};
use crate::config::Config;
use crate::error::{io_at, Error, Result};
use crate::{bench, dataset, ingest, ppm, store_file};

#[derive(Parser, Debug)]
#[command(name = "placerank", version, about = "Place recognition by retrieval and learned reranking")]
pub struct Cli {
    /// TOML configuration; the built-in desk setup when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker cap for parallel stages.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic dataset to a directory.
    Generate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage and write a checkpoint.
    Train(TrainArgs),
    /// Build a feature store from a dataset partition or external features.
    BuildIndex(BuildArgs),
    /// Retrieve (and rerank) candidates for one stored query.
    Query {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        id: String,
        #[arg(long)]
        topk: Option<usize>,
    },
    /// Recall@{1,5,10} before and after reranking over every stored query.
    Evaluate {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        topk: Option<usize>,
        /// Also write per-query result lists here.
        #[arg(long)]
        results: Option<PathBuf>,
    },
    /// Score an explicit candidate list for one stored query.
    Rerank {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long, value_delimiter = ',', required = true)]
        candidates: Vec<String>,
    },
    /// Latency, bytes and operation counts.
    Bench {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long, default_value_t = 100)]
        topk: usize,
        #[arg(long, default_value_t = bench::MIN_REPS)]
        reps: usize,
    },
    /// Draw the most attended token pairs between two images.
    VisualizeAttention {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Pairs to draw.
        #[arg(long, default_value_t = 10)]
        pairs: usize,
        /// Output prefix; writes `<out>.ppm` and `<out>.json`.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = parse_stage)]
    pub stage: Stage,
    /// Checkpoint to continue from; required after the retrieval stage.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch metrics as JSON lines.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BuildArgs {
    /// Directory of externally computed features with a manifest.
    #[arg(long, required_unless_present = "data", conflicts_with_all = ["data", "params"])]
    pub features: Option<PathBuf>,
    /// Dataset root; needs `--params`.
    #[arg(long, requires = "params")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    pub partition: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Store local descriptors as f16.
    #[arg(long)]
    pub half: bool,
}

fn parse_stage(s: &str) -> std::result::Result<Stage, String> {
    Stage::parse(s).ok_or_else(|| format!("unknown stage `{s}` (retrieval, rerank, finetune, end2end)"))
}

struct Ctx {
    config: Config,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self> {
        let mut config = match &cli.config {
            Some(p) => Config::load(p)?,
            None => Config::desk(),
        };
        if let Some(s) = cli.seed {
            config.seed = s;
        }
        Ok(Self { config })
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(io_at(path))
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

/// Checkpoint plus the model it describes.
struct Loaded {
    ckpt: Checkpoint,
    model: Model,
}

impl Loaded {
    fn open(path: &Path) -> Result<Self> {
        let ckpt = checkpoint::load(path)?;
        let model = Model::bind(&ckpt.params, ckpt.meta.config.model())?;
        Ok(Self { ckpt, model })
    }

    fn params(&self) -> &ParamStore<f32> {
        &self.ckpt.params
    }

    fn provenance(&self) -> serde_json::Value {
        json!({
            "config_hash": self.ckpt.meta.config.hash(),
            "seed": self.ckpt.meta.config.seed,
            "stages": self.ckpt.meta.stages,
        })
    }
}

fn provenance(config: &Config) -> serde_json::Value {
    json!({ "config_hash": config.hash(), "seed": config.seed })
}

pub fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx::new(&cli)?;
    match cli.command {
        Command::Generate { out } => generate(&ctx, &out, cli.threads),
        Command::Train(a) => train_stage(&ctx, &a),
        Command::BuildIndex(a) => build_index(&ctx, &a),
        Command::Query { store, params, id, topk } => query(&ctx, &store, params.as_deref(), &id, topk),
        Command::Evaluate {
            store,
            params,
            topk,
            results,
        } => evaluate_cmd(&ctx, &store, params.as_deref(), topk, results.as_deref()),
        Command::Rerank {
            store,
            params,
            id,
            candidates,
        } => rerank_cmd(&store, &params, &id, &candidates),
        Command::Bench {
            store,
            params,
            topk,
            reps,
        } => bench_cmd(&store, &params, topk, reps),
        Command::VisualizeAttention {
            params,
            query,
            reference,
            pairs,
            out,
        } => visualize(&params, &query, &reference, pairs, &out),
    }
}

fn generate(ctx: &Ctx, out: &Path, threads: usize) -> Result<()> {
    let spec = ctx.config.world();
    let data = dataset::generate_parallel(&spec, threads)?;
    dataset::write(&data, out)?;
    let counts: Vec<_> = dataset::PARTITIONS
        .iter()
        .map(|&p| (p.as_str(), data.views.iter().filter(|v| v.partition == p).count()))
        .collect();
    let summary = json!({
        "provenance": provenance(&ctx.config),
        "places": spec.n_places,
        "views": data.views.len(),
        "partitions": counts.into_iter().collect::<std::collections::BTreeMap<_, _>>(),
    });
    write_json(&out.join("dataset.json"), &summary)?;
    print_json(&summary)
}

fn train_stage(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let (config, params, mut stages) = match (&a.init, a.stage) {
        (Some(p), _) => {
            let c = checkpoint::load(p)?;
            if matches!(a.stage, Stage::Rerank | Stage::Finetune) && !c.meta.stages.iter().any(|s| s == "retrieval") {
                return Err(Error::Config(format!(
                    "{}: stage `{}` needs weights from the retrieval stage",
                    p.display(),
                    a.stage.as_str()
                )));
            }
            let config = Config {
                model: c.meta.config.model.clone(),
                ..ctx.config.clone()
            };
            (config, c.params, c.meta.stages)
        }
        (None, Stage::Rerank | Stage::Finetune) => {
            return Err(Error::Config(format!(
                "stage `{}` needs --init with a retrieval checkpoint",
                a.stage.as_str()
            )))
        }
        (None, _) => {
            let mut params = ParamStore::new();
            Model::init(
                &mut params,
                ctx.config.model(),
                &mut rand_chacha::ChaCha8Rng::seed_from_u64(ctx.config.seed),
            )?;
            (ctx.config.clone(), params, Vec::new())
        }
    };
    let model = Model::bind(&params, config.model())?;
    let data = dataset::read_train_data(&a.data)?;
    let mut log = match &a.log {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(io_at(p))?)),
        None => None,
    };
    let hash = config.hash();
    let mut io_err = None;
    let out = train(a.stage, &config.stage(a.stage), &model, params, &data, &mut |l| {
        eprintln!(
            "{} epoch {} triplet {:.4} ce {:.4} val R@1 {:.3}",
            l.stage.as_str(),
            l.epoch,
            l.triplet_loss,
            l.ce_loss,
            l.recall.recall[0]
        );
        if let Some(w) = log.as_mut() {
            let line = json!({ "config_hash": hash, "seed": config.seed, "epoch_log": l });
            if let Err(e) = writeln!(w, "{line}") {
                io_err.get_or_insert(e);
            }
        }
    })?;
    if let (Some(e), Some(p)) = (io_err, &a.log) {
        return Err(io_at(p)(e));
    }
    if let (Some(w), Some(p)) = (log.as_mut(), &a.log) {
        w.flush().map_err(io_at(p))?;
    }
    let config_select_k = config.stage(a.stage).select_k;
    stages.push(a.stage.as_str().to_string());
    let ckpt = Checkpoint {
        meta: CheckpointMeta { stages, config },
        params: out.params,
    };
    checkpoint::save(&ckpt, &a.out)?;
    print_json(&json!({
        "provenance": provenance(&ckpt.meta.config),
        "stage": a.stage,
        "status": out.status,
        "best_epoch": out.best_epoch,
        "best_val_recall": out.best_recall,
        "select_k": config_select_k,
        "checkpoint": a.out,
    }))
}

fn build_index(ctx: &Ctx, a: &BuildArgs) -> Result<()> {
    let precision = if a.half { Precision::F16 } else { Precision::F32 };
    let (store, prov) = match (&a.features, &a.data, &a.params) {
        (Some(dir), _, _) => (ingest::ingest(dir)?, provenance(&ctx.config)),
        (None, Some(data), Some(params)) => {
            let l = Loaded::open(params)?;
            let part = match a.partition.as_str() {
                "train" => Partition::Train,
                "val" => Partition::Val,
                _ => Partition::Test,
            };
            let views = dataset::read(data, part)?;
            let store = l
                .model
                .build_store(l.params(), views.store_views(), l.ckpt.meta.config.encode_batch)?;
            (store, l.provenance())
        }
        _ => unreachable!("clap requires --features or --data with --params"),
    };
    store_file::save(&store, precision, &a.out)?;
    print_json(&json!({
        "provenance": prov,
        "records": store.len(),
        "references": store.references().count(),
        "queries": store.queries().count(),
        "precision": if a.half { "f16" } else { "f32" },
        "store": a.out,
    }))
}

fn load_store(path: &Path) -> Result<FeatureStore> {
    let store = store_file::load(path)?;
    if store.references().next().is_none() {
        return Err(CoreError::EmptyStore.into());
    }
    Ok(store)
}

#[derive(Serialize)]
struct Ranked<'a> {
    id: &'a str,
    retrieval_score: f32,
    retrieval_rank: usize,
    prob_true: Option<f32>,
    within_radius: Option<bool>,
}

fn ranked<'a>(list: &'a RerankedList, hit: impl Fn(&str) -> Option<bool>) -> Vec<Ranked<'a>> {
    list.entries
        .iter()
        .map(|e| Ranked {
            id: &e.id,
            retrieval_score: e.retrieval_score,
            retrieval_rank: e.retrieval_rank,
            prob_true: e.score.map(|s| s.prob_true),
            within_radius: hit(&e.id),
        })
        .collect()
}

fn query(ctx: &Ctx, store: &Path, params: Option<&Path>, id: &str, topk: Option<usize>) -> Result<()> {
    let store = load_store(store)?;
    let q = store.get(id).ok_or_else(|| CoreError::UnknownId(id.into()))?;
    let loaded = params.map(Loaded::open).transpose()?;
    let topk = topk.unwrap_or(ctx.config.topk);
    let cands = store.knn(&q.global, topk)?;
    let hit = |r: &str| {
        store
            .get(r)
            .map(|r| r.geo.distance(&q.geo) <= placerank_core::pipeline::CORRECT_RADIUS_M)
    };
    let retrieval: Vec<_> = cands
        .entries
        .iter()
        .map(|c| json!({ "id": c.id, "score": c.score, "within_radius": hit(&c.id) }))
        .collect();
    let (prov, reranked) = match &loaded {
        Some(l) => {
            let list = rerank(q, &cands, &store, &l.model.scorer(l.params()))?;
            (l.provenance(), Some(serde_json::to_value(ranked(&list, hit))?))
        }
        None => (provenance(&ctx.config), None),
    };
    print_json(&json!({
        "provenance": prov,
        "query": id,
        "topk": topk,
        "retrieval": retrieval,
        "reranked": reranked,
    }))
}

fn evaluate_cmd(ctx: &Ctx, store: &Path, params: Option<&Path>, topk: Option<usize>, results: Option<&Path>) -> Result<()> {
    let store = load_store(store)?;
    let loaded = params.map(Loaded::open).transpose()?;
    let topk = topk.unwrap_or(ctx.config.topk);
    let scorer = loaded.as_ref().map(|l| l.model.scorer(l.params()));
    let eval = evaluate(&store, scorer.as_ref().map(|s| s as &dyn PairScorer), topk, &RECALL_KS)?;
    let prov = loaded.as_ref().map_or_else(|| provenance(&ctx.config), Loaded::provenance);
    let report = json!({
        "provenance": prov,
        "topk": topk,
        "retrieval": eval.retrieval,
        "reranked": eval.reranked,
    });
    if let Some(path) = results {
        let per_query: Vec<_> = eval
            .queries
            .iter()
            .map(|r| {
                json!({
                    "id": r.id,
                    "retrieval": r.retrieval.ids().collect::<Vec<_>>(),
                    "reranked": r.reranked.as_ref().map(|l| l.ids().collect::<Vec<_>>()),
                })
            })
            .collect();
        write_json(path, &json!({ "report": report, "queries": per_query }))?;
    }
    print_json(&report)
}

fn rerank_cmd(store: &Path, params: &Path, id: &str, candidates: &[String]) -> Result<()> {
    let store = load_store(store)?;
    let l = Loaded::open(params)?;
    let q = store.get(id).ok_or_else(|| CoreError::UnknownId(id.into()))?;
    let mut list = Vec::with_capacity(candidates.len());
    for c in candidates {
        let r = store.get(c).ok_or_else(|| CoreError::UnknownId(c.clone()))?;
        let score = q.global.iter().zip(&r.global).map(|(a, b)| a * b).sum();
        list.push(Candidate { id: c.clone(), score });
    }
    list.sort_by(|a, b| candidate_order((a.score, &a.id), (b.score, &b.id)));
    let list = rerank(q, &CandidateList { entries: list }, &store, &l.model.scorer(l.params()))?;
    let hit = |r: &str| {
        store
            .get(r)
            .map(|r| r.geo.distance(&q.geo) <= placerank_core::pipeline::CORRECT_RADIUS_M)
    };
    print_json(&json!({
        "provenance": l.provenance(),
        "query": id,
        "reranked": ranked(&list, hit),
    }))
}

fn bench_cmd(store: &Path, params: &Path, topk: usize, reps: usize) -> Result<()> {
    let store = load_store(store)?;
    let l = Loaded::open(params)?;
    let report = bench::bench(&l.model, l.params(), &store, topk, reps)?;
    print_json(&json!({ "provenance": l.provenance(), "report": report }))
}

fn draw_line(img: &mut Image, x0: f32, y0: f32, x1: f32, y1: f32, rgb: [f32; 3]) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
    for s in 0..=steps {
        let t = s as f32 / steps as f32;
        let (x, y) = ((x0 + t * (x1 - x0)).round(), (y0 + t * (y1 - y0)).round());
        if x >= 0.0 && y >= 0.0 && (x as usize) < img.width && (y as usize) < img.height {
            for (c, v) in rgb.iter().enumerate() {
                *img.at_mut(y as usize, x as usize, c) = *v;
            }
        }
    }
}

/// Side-by-side canvas, each half dimmed outside attended patches.
fn overlay(q: &Image, q_attn: &placerank_core::tensor::Tensor<f32>, r: &Image, r_attn: &placerank_core::tensor::Tensor<f32>) -> Image {
    let (h, w) = (q.height, q.width);
    let mut out = Image::zeros(h, 2 * w, 3);
    for (side, (img, attn)) in [(q, q_attn), (r, r_attn)].into_iter().enumerate() {
        let (gh, gw) = (attn.shape()[0], attn.shape()[1]);
        let max = attn.data().iter().cloned().fold(f32::MIN_POSITIVE, f32::max);
        for y in 0..h {
            for x in 0..w {
                let a = attn.data()[(y * gh / h) * gw + x * gw / w] / max;
                for c in 0..3 {
                    *out.at_mut(y, side * w + x, c) = img.at(y, x, c.min(img.channels - 1)) * (0.35 + 0.65 * a);
                }
            }
        }
    }
    out
}

fn visualize(params: &Path, query: &Path, reference: &Path, pairs: usize, out: &Path) -> Result<()> {
    let l = Loaded::open(params)?;
    let (qi, ri) = (ppm::load(query)?, ppm::load(reference)?);
    let enc = l.model.encoder.encode_batch(l.params(), &[&qi, &ri])?;
    let k = l.model.config.top_k;
    let (qs, rs) = (select_top_k(&enc[0], k), select_top_k(&enc[1], k));
    let feats = build_pair_features(&qs, &rs, l.model.config.rerank.effective_nn())?;
    let score = l.model.reranker.score_pair(l.params(), &feats)?;
    let top = l.model.reranker.top_attention_pairs(l.params(), &feats, pairs)?;
    let mut img = overlay(&qi, &enc[0].attn_map, &ri, &enc[1].attn_map);
    let (h, w) = (qi.height as f32, qi.width as f32);
    let wmax = top.iter().map(|p| p.weight).fold(f32::MIN_POSITIVE, f32::max);
    for p in &top {
        let t = p.weight / wmax;
        draw_line(
            &mut img,
            p.query_xy.0 * w,
            p.query_xy.1 * h,
            w + p.reference_xy.0 * w,
            p.reference_xy.1 * h,
            [1.0, 1.0 - t, 0.0],
        );
    }
    let ppm_path = out.with_extension("ppm");
    let json_path = out.with_extension("json");
    ppm::save(&img, &ppm_path)?;
    let list: Vec<_> = top
        .iter()
        .map(|p| {
            json!({
                "row": p.row,
                "query_xy": [p.query_xy.0, p.query_xy.1],
                "reference_xy": [p.reference_xy.0, p.reference_xy.1],
                "similarity": p.similarity,
                "weight": p.weight,
            })
        })
        .collect();
    let report = json!({
        "provenance": l.provenance(),
        "query": query,
        "reference": reference,
        "prob_true": score.prob_true,
        "pairs": list,
        "overlay": ppm_path,
    });
    write_json(&json_path, &report)?;
    print_json(&report)
}
