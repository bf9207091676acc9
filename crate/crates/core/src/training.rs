//! Losses, positive/negative mining, AdamW and the staged training loop.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::params::{ParamGrads, ParamStore};
use crate::pipeline::{evaluate, Model, RECALL_KS};
use crate::rerank::{build_pair_features, PairFeatures, PairScorer};
use crate::retrieval::{GeoPoint, RecallReport, Split};
use crate::selection::{attention_order, token_xy, LocalDescriptor, LocalDescriptorSet};
use crate::tensor::Tensor;
use crate::vit::{Encoder, LOCAL_HEAD, PREFIX as ENCODER_PREFIX};

/// References within this distance of a query are positives.
pub const POSITIVE_RADIUS_M: f64 = 10.0;
/// References farther than this from a query are negatives.
pub const NEGATIVE_RADIUS_M: f64 = 25.0;

fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `max(‖q−p‖² − ‖q−n‖² + margin, 0)`.
pub fn triplet_loss(q: &[f32], p: &[f32], n: &[f32], margin: f32) -> f32 {
    (sq_dist(q, p) - sq_dist(q, n) + margin).max(0.0)
}

/// Batched triplet loss on the tape, averaged over rows.
pub fn triplet_loss_var(tape: &mut Tape<'_, f32>, q: Var, p: Var, n: Var, margin: f32) -> Result<Var> {
    let dp = tape.sub(q, p)?;
    let dp = tape.row_sq_sum(dp);
    let dn = tape.sub(q, n)?;
    let dn = tape.row_sq_sum(dn);
    let h = tape.sub(dp, dn)?;
    let h = tape.add_scalar(h, margin);
    let h = tape.relu(h);
    Ok(tape.mean(h))
}

/// Cross-entropy of `softmax(logits)` against `label` (index 1 = True).
pub fn rerank_ce_loss(logits: [f64; 2], label: bool) -> f64 {
    let (own, other) = if label { (logits[1], logits[0]) } else { (logits[0], logits[1]) };
    let d = other - own;
    if d > 0.0 {
        d + libm::log1p(libm::exp(-d))
    } else {
        libm::log1p(libm::exp(d))
    }
}

/// Among references within [`POSITIVE_RADIUS_M`], the one nearest in
/// embedding space (ties: lower index).
pub fn assign_positive(query_geo: &GeoPoint, query_emb: &[f32], ref_geo: &[GeoPoint], ref_emb: &Tensor<f32>) -> Option<usize> {
    (0..ref_geo.len())
        .filter(|&j| ref_geo[j].distance(query_geo) <= POSITIVE_RADIUS_M)
        .map(|j| (sq_dist(query_emb, ref_emb.row(j)), j))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, j)| j)
}

/// Indices of references farther than [`NEGATIVE_RADIUS_M`].
pub fn valid_negatives(query_geo: &GeoPoint, ref_geo: &[GeoPoint]) -> Vec<usize> {
    (0..ref_geo.len())
        .filter(|&j| ref_geo[j].distance(query_geo) > NEGATIVE_RADIUS_M)
        .collect()
}

/// The candidate nearest to the query in embedding space (ties: lower index).
pub fn hardest(query_emb: &[f32], candidates: &[usize], ref_emb: &Tensor<f32>) -> Option<usize> {
    candidates
        .iter()
        .map(|&j| (sq_dist(query_emb, ref_emb.row(j)), j))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, j)| j)
}

/// A uniformly random subset of `size` negatives (all of them if fewer).
pub fn partial_subset<R: Rng + ?Sized>(rng: &mut R, negatives: &[usize], size: usize) -> Vec<usize> {
    let take = size.min(negatives.len());
    sample(rng, negatives.len(), take).iter().map(|i| negatives[i]).collect()
}

/// Hardest negative within a random subset of `size` valid negatives.
pub fn mine_partial<R: Rng + ?Sized>(
    rng: &mut R,
    query_emb: &[f32],
    negatives: &[usize],
    ref_emb: &Tensor<f32>,
    size: usize,
) -> Option<usize> {
    hardest(query_emb, &partial_subset(rng, negatives, size), ref_emb)
}

/// The `n` negatives nearest to the query, ascending by embedding distance.
pub fn mine_global_top_n(query_emb: &[f32], negatives: &[usize], ref_emb: &Tensor<f32>, n: usize) -> Vec<usize> {
    let mut scored: Vec<(f32, usize)> = negatives
        .iter()
        .map(|&j| (sq_dist(query_emb, ref_emb.row(j)), j))
        .collect();
    let cmp = |a: &(f32, usize), b: &(f32, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if n == 0 {
        return Vec::new();
    }
    if scored.len() > n {
        scored.select_nth_unstable_by(n - 1, cmp);
        scored.truncate(n);
    }
    scored.sort_by(cmp);
    scored.into_iter().map(|(_, j)| j).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MiningSource {
    Partial,
    GlobalTop,
}

/// Indices into a [`ViewSet`]: query into `queries`, the others into
/// `references`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub query: usize,
    pub positive: usize,
    pub negative: usize,
    pub source: MiningSource,
}

/// Cosine learning rate decaying from `base` at step 0 to 0 at `total`.
pub fn cosine_lr(base: f32, step: usize, total: usize) -> f32 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total) as f64) / total as f64;
    (base as f64 * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * t))) as f32
}

/// Adam with decoupled weight decay on weight matrices (`*.w`).
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    steps: i32,
    m: Vec<Option<Vec<f32>>>,
    v: Vec<Option<Vec<f32>>>,
}

impl AdamW {
    pub fn new(params: usize, weight_decay: f32) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            steps: 0,
            m: vec![None; params],
            v: vec![None; params],
        }
    }

    /// Updates every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &ParamGrads<f32>, lr: f32) {
        self.steps += 1;
        let c1 = 1.0 - libm::powf(self.beta1, self.steps as f32);
        let c2 = 1.0 - libm::powf(self.beta2, self.steps as f32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let decay = params.name(id).ends_with(".w");
            let n = g.len();
            let m = self.m[id.0].get_or_insert_with(|| vec![0.0; n]);
            let v = self.v[id.0].get_or_insert_with(|| vec![0.0; n]);
            let p = params.get_mut(id).data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                if decay {
                    p[i] -= lr * self.weight_decay * p[i];
                }
                p[i] -= lr * (m[i] / c1) / (libm::sqrtf(v[i] / c2) + self.eps);
            }
        }
    }
}

#[cfg_attr(feature = "serde", derive(serde::Serialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Encoder (without the local head) with triplet loss and partial mining.
    Retrieval,
    /// Reranker and local head on a frozen backbone with global hard negatives.
    Rerank,
    /// Everything jointly, starting from trained weights.
    Finetune,
    /// Everything jointly from scratch.
    #[cfg_attr(feature = "serde", serde(rename = "end2end"))]
    EndToEnd,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Retrieval => "retrieval",
            Stage::Rerank => "rerank",
            Stage::Finetune => "finetune",
            Stage::EndToEnd => "end2end",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Stage::Retrieval, Stage::Rerank, Stage::Finetune, Stage::EndToEnd]
            .into_iter()
            .find(|st| st.as_str() == s)
    }

    /// Which parameters this stage updates.
    pub fn trainable(self, params: &ParamStore<f32>) -> Vec<bool> {
        let head = params.mask_prefixes(&[LOCAL_HEAD]);
        match self {
            Stage::Retrieval => params
                .mask_prefixes(&[ENCODER_PREFIX])
                .into_iter()
                .zip(head)
                .map(|(e, h)| e && !h)
                .collect(),
            Stage::Rerank => params
                .mask_prefixes(&[crate::rerank::PREFIX])
                .into_iter()
                .zip(head)
                .map(|(r, h)| r || h)
                .collect(),
            Stage::Finetune | Stage::EndToEnd => vec![true; params.len()],
        }
    }

    fn uses_reranker(self) -> bool {
        self != Stage::Retrieval
    }
}

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub margin: f32,
    pub lr: f32,
    pub batch_triplets: usize,
    pub epochs: usize,
    pub partial_subset: usize,
    /// Length of the precomputed hard-negative list of the rerank stage.
    pub hard_negatives: usize,
    pub weight_decay: f32,
    /// Candidates reranked per validation query.
    pub eval_topk: usize,
    /// Validation recall@k that picks the returned epoch.
    pub select_k: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.1,
            lr: 5e-4,
            batch_triplets: 64,
            epochs: 50,
            partial_subset: 1000,
            hard_negatives: 100,
            weight_decay: 0.05,
            eval_topk: 100,
            select_k: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin.is_nan() || self.margin <= 0.0 || self.lr.is_nan() || self.lr <= 0.0 {
            return Err(invalid("margin and lr must be positive"));
        }
        if self.batch_triplets == 0 || self.partial_subset == 0 || self.hard_negatives == 0 || self.eval_topk == 0 {
            return Err(invalid("batch, subset, hard-negative and eval sizes must be positive"));
        }
        if !RECALL_KS.contains(&self.select_k) {
            return Err(invalid(format!("select_k must be one of {RECALL_KS:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub id: String,
    pub geo: GeoPoint,
    pub image: Image,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ViewSet {
    pub queries: Vec<View>,
    pub references: Vec<View>,
}

impl ViewSet {
    /// `(id, geo, split, image)` of every view, references first.
    pub fn store_views(&self) -> impl Iterator<Item = (String, GeoPoint, Split, &Image)> {
        let r = self.references.iter().map(|v| (v.id.clone(), v.geo, Split::Reference, &v.image));
        let q = self.queries.iter().map(|v| (v.id.clone(), v.geo, Split::Query, &v.image));
        r.chain(q)
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrainData {
    pub train: ViewSet,
    pub val: ViewSet,
}

#[cfg_attr(feature = "serde", derive(serde::Serialize))]
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub stage: Stage,
    pub epoch: usize,
    pub steps: usize,
    pub triplet_loss: f64,
    pub ce_loss: f64,
    pub lr: f32,
    pub skipped_queries: usize,
    /// Validation recall at [`RECALL_KS`], after reranking for stages that
    /// train the reranker.
    pub recall: RecallReport,
}

#[cfg_attr(feature = "serde", derive(serde::Serialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainStatus {
    Completed,
    Diverged { epoch: usize, step: usize },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-validation parameters, or the last finite ones on divergence.
    pub params: ParamStore<f32>,
    pub log: Vec<EpochLog>,
    pub status: TrainStatus,
    pub best_epoch: usize,
    /// Validation recall@`select_k` of the returned parameters.
    pub best_recall: f64,
}

/// Selected tokens of one image: rows into a locals node plus geometry.
#[derive(Clone, Debug)]
struct TokenSel {
    rows: Vec<usize>,
    meta: Vec<(f32, f32, f32)>,
}

impl TokenSel {
    fn from_attention(attn: &[f32], grid: (usize, usize), top_k: usize, row0: usize) -> Self {
        let order: Vec<usize> = attention_order(attn).into_iter().take(top_k).collect();
        Self {
            rows: order.iter().map(|&i| row0 + i).collect(),
            meta: order
                .iter()
                .map(|&i| {
                    let (x, y) = token_xy(i, grid);
                    (x, y, attn[i])
                })
                .collect(),
        }
    }

    fn set(&self, values: &Tensor<f32>) -> LocalDescriptorSet {
        LocalDescriptorSet {
            records: self
                .rows
                .iter()
                .zip(&self.meta)
                .map(|(&r, &(x, y, attention))| LocalDescriptor {
                    x,
                    y,
                    attention,
                    feature: values.row(r).to_vec(),
                })
                .collect(),
        }
    }
}

/// Builds pair features for `(a, b)` image pairs whose local features live
/// in the node `locals`, and the differentiable similarity column.
fn pair_batch(
    tape: &mut Tape<'_, f32>,
    locals: Var,
    sels: &[TokenSel],
    pairs: &[(usize, usize)],
    nn: usize,
) -> Result<(Vec<PairFeatures<f32>>, Var)> {
    let values = tape.value(locals).clone();
    let sets: Vec<LocalDescriptorSet> = sels.iter().map(|s| s.set(&values)).collect();
    let mut feats = Vec::with_capacity(pairs.len());
    let mut rows = Vec::new();
    for &(a, b) in pairs {
        let f = build_pair_features(&sets[a], &sets[b], nn)?;
        rows.extend(
            f.token_pairs()
                .into_iter()
                .map(|(i, j)| (sels[a].rows[i], sels[b].rows[j])),
        );
        feats.push(f);
    }
    let s = tape.pair_dots(locals, locals, rows)?;
    Ok((feats, s))
}

fn global_embeddings(encoder: &Encoder, params: &ParamStore<f32>, images: &[&Image]) -> Result<Tensor<f32>> {
    let mut data = Vec::new();
    let mut dim = 0;
    for chunk in images.chunks(32) {
        let mut tape = Tape::with_trainable(params, vec![false; params.len()]);
        let g = encoder.forward_global(&mut tape, chunk)?;
        let t = tape.value(g);
        dim = t.cols();
        data.extend_from_slice(t.data());
    }
    Tensor::matrix(images.len(), dim, data)
}

fn validate(model: &Model, params: &ParamStore<f32>, val: &ViewSet, stage: Stage, cfg: &TrainConfig) -> Result<RecallReport> {
    let store = model.build_store(params, val.store_views(), 32)?;
    let scorer = model.scorer(params);
    let scorer: Option<&dyn PairScorer> = if stage.uses_reranker() { Some(&scorer) } else { None };
    let eval = evaluate(&store, scorer, cfg.eval_topk, &RECALL_KS)?;
    Ok(eval.reranked.unwrap_or(eval.retrieval))
}

struct Mined {
    triplets: Vec<Triplet>,
    skipped: usize,
}

fn mine_partial_triplets(
    rng: &mut ChaCha8Rng,
    set: &ViewSet,
    q_emb: &Tensor<f32>,
    r_emb: &Tensor<f32>,
    subset: usize,
) -> Mined {
    let ref_geo: Vec<GeoPoint> = set.references.iter().map(|v| v.geo).collect();
    let mut triplets = Vec::new();
    let mut skipped = 0;
    for (qi, q) in set.queries.iter().enumerate() {
        let Some(p) = assign_positive(&q.geo, q_emb.row(qi), &ref_geo, r_emb) else {
            skipped += 1;
            continue;
        };
        let negs = valid_negatives(&q.geo, &ref_geo);
        let Some(n) = mine_partial(rng, q_emb.row(qi), &negs, r_emb, subset) else {
            skipped += 1;
            continue;
        };
        triplets.push(Triplet {
            query: qi,
            positive: p,
            negative: n,
            source: MiningSource::Partial,
        });
    }
    Mined { triplets, skipped }
}

/// Runs one training stage from `params`.
///
/// Validation recall@{1,5,10} is measured after every epoch and the
/// parameters with the best recall@`select_k` are returned; recall@1 (or
/// recall@5 when selecting on recall@1) and then the later epoch break
/// ties. A
/// non-finite loss or gradient stops training and returns the last finite
/// parameters.
pub fn train(
    stage: Stage,
    cfg: &TrainConfig,
    model: &Model,
    params: ParamStore<f32>,
    data: &TrainData,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.queries.is_empty() || data.train.references.is_empty() {
        return Err(invalid("training needs queries and references"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (stage as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let trainable = stage.trainable(&params);
    let mut opt = AdamW::new(params.len(), cfg.weight_decay);
    let mut params = params;
    let mut best: Option<((f64, f64), usize, ParamStore<f32>)> = None;
    let mut log = Vec::new();
    let batches_per_epoch = data.train.queries.len().div_ceil(cfg.batch_triplets);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut step = 0;
    let nn = model.config.rerank.effective_nn();

    let q_images: Vec<&Image> = data.train.queries.iter().map(|v| &v.image).collect();
    let r_images: Vec<&Image> = data.train.references.iter().map(|v| &v.image).collect();

    let frozen = if stage == Stage::Rerank {
        Some(RerankCache::build(model, &params, &data.train, cfg)?)
    } else {
        None
    };

    for epoch in 1..=cfg.epochs {
        let (mut triplets, skipped) = match &frozen {
            Some(cache) => (cache.sample(&mut rng), cache.skipped),
            None => {
                let q_emb = global_embeddings(&model.encoder, &params, &q_images)?;
                let r_emb = global_embeddings(&model.encoder, &params, &r_images)?;
                let m = mine_partial_triplets(&mut rng, &data.train, &q_emb, &r_emb, cfg.partial_subset);
                (m.triplets, m.skipped)
            }
        };
        triplets.shuffle(&mut rng);
        let (mut sum_t, mut sum_c, mut steps) = (0.0f64, 0.0f64, 0usize);
        let mut lr = cfg.lr;
        for batch in triplets.chunks(cfg.batch_triplets) {
            lr = cosine_lr(cfg.lr, step, total_steps);
            let (grads, lt, lc) = {
                let mut tape = Tape::with_trainable(&params, trainable.clone());
                let (loss, lt, lc) = match &frozen {
                    Some(cache) => {
                        let (loss, lc) = cache.batch_loss(&mut tape, model, batch, nn)?;
                        (loss, 0.0, lc)
                    }
                    None => joint_batch_loss(&mut tape, model, cfg, stage, &data.train, batch, nn)?,
                };
                let value = tape.value(loss).data()[0];
                if !value.is_finite() {
                    (None, lt, lc)
                } else {
                    let g = tape.backward(loss)?.params(&tape);
                    (g.all_finite().then_some(g), lt, lc)
                }
            };
            let Some(grads) = grads else {
                let status = TrainStatus::Diverged { epoch, step };
                return Ok(finish(best, params, log, status));
            };
            opt.step(&mut params, &grads, lr);
            if !params.iter().all(|(_, _, t)| t.all_finite()) {
                return Err(Error::NonFinite("parameters after optimizer step"));
            }
            sum_t += lt;
            sum_c += lc;
            steps += 1;
            step += 1;
        }
        let recall = validate(model, &params, &data.val, stage, cfg)?;
        let denom = steps.max(1) as f64;
        let entry = EpochLog {
            stage,
            epoch,
            steps,
            triplet_loss: sum_t / denom,
            ce_loss: sum_c / denom,
            lr,
            skipped_queries: skipped,
            recall,
        };
        on_epoch(&entry);
        let second = if cfg.select_k == 1 { 5 } else { 1 };
        let key = (
            entry.recall.at(cfg.select_k).unwrap_or(0.0),
            entry.recall.at(second).unwrap_or(0.0),
        );
        if best.as_ref().is_none_or(|b| key >= b.0) {
            best = Some((key, epoch, params.clone()));
        }
        log.push(entry);
    }
    Ok(finish(best, params, log, TrainStatus::Completed))
}

fn finish(
    best: Option<((f64, f64), usize, ParamStore<f32>)>,
    last: ParamStore<f32>,
    log: Vec<EpochLog>,
    status: TrainStatus,
) -> TrainOutcome {
    let (best_recall, best_epoch, params) = match (status, best) {
        (TrainStatus::Completed, Some((key, epoch, p))) => (key.0, epoch, p),
        (_, b) => (b.map_or(0.0, |b| b.0 .0), 0, last),
    };
    TrainOutcome {
        params,
        log,
        status,
        best_epoch,
        best_recall,
    }
}

/// Triplet loss on globals plus reranker cross-entropy, through the whole
/// encoder.
fn joint_batch_loss(
    tape: &mut Tape<'_, f32>,
    model: &Model,
    cfg: &TrainConfig,
    stage: Stage,
    set: &ViewSet,
    batch: &[Triplet],
    nn: usize,
) -> Result<(Var, f64, f64)> {
    let b = batch.len();
    let images: Vec<&Image> = batch
        .iter()
        .map(|t| &set.queries[t.query].image)
        .chain(batch.iter().map(|t| &set.references[t.positive].image))
        .chain(batch.iter().map(|t| &set.references[t.negative].image))
        .collect();
    let vars = model.encoder.forward(tape, &images)?;
    let rows = |r: core::ops::Range<usize>| r.collect::<Vec<_>>();
    let q = tape.gather_rows(vars.global, &rows(0..b))?;
    let p = tape.gather_rows(vars.global, &rows(b..2 * b))?;
    let n = tape.gather_rows(vars.global, &rows(2 * b..3 * b))?;
    let lt = triplet_loss_var(tape, q, p, n, cfg.margin)?;
    if stage == Stage::Retrieval {
        let v = tape.value(lt).data()[0] as f64;
        return Ok((lt, v, 0.0));
    }
    let grid = model.config.encoder.grid();
    let sels = (0..images.len())
        .map(|i| {
            let attn = Encoder::attention_map(tape, &vars, i)?;
            Ok(TokenSel::from_attention(&attn, grid, model.config.top_k, i * vars.tokens))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut pairs = Vec::with_capacity(2 * b);
    let mut labels = Vec::with_capacity(2 * b);
    for i in 0..b {
        pairs.push((i, b + i));
        labels.push(1);
        pairs.push((i, 2 * b + i));
        labels.push(0);
    }
    let (feats, s) = pair_batch(tape, vars.locals, &sels, &pairs, nn)?;
    let refs: Vec<&PairFeatures<f32>> = feats.iter().collect();
    let out = model.reranker.forward_with_similarity(tape, &refs, s)?;
    let lc = tape.cross_entropy(out.logits, &labels)?;
    let (vt, vc) = (tape.value(lt).data()[0] as f64, tape.value(lc).data()[0] as f64);
    Ok((tape.add(lt, lc)?, vt, vc))
}

/// Frozen-backbone state of the rerank stage: selected penultimate tokens
/// of every training image, assigned positives and hard-negative lists.
struct RerankCache {
    /// Queries then references.
    patches: Vec<Tensor<f32>>,
    sels: Vec<TokenSel>,
    queries: usize,
    positives: Vec<Option<usize>>,
    hard: Vec<Vec<usize>>,
    skipped: usize,
}

impl RerankCache {
    fn build(model: &Model, params: &ParamStore<f32>, set: &ViewSet, cfg: &TrainConfig) -> Result<Self> {
        let images: Vec<&Image> = set
            .queries
            .iter()
            .chain(&set.references)
            .map(|v| &v.image)
            .collect();
        let mut patches = Vec::with_capacity(images.len());
        let mut sels = Vec::with_capacity(images.len());
        let mut globals = Vec::new();
        for chunk in images.chunks(32) {
            for (enc, tokens) in model.encoder.encode_with_patches(params, chunk)? {
                let sel = TokenSel::from_attention(enc.attn_map.data(), enc.grid, model.config.top_k, 0);
                let d = tokens.cols();
                let mut kept = Vec::with_capacity(sel.rows.len() * d);
                for &r in &sel.rows {
                    kept.extend_from_slice(tokens.row(r));
                }
                patches.push(Tensor::matrix(sel.rows.len(), d, kept)?);
                sels.push(sel);
                globals.push(enc.global);
            }
        }
        let nq = set.queries.len();
        let gd = globals[0].len();
        let q_emb = Tensor::matrix(nq, gd, globals[..nq].concat())?;
        let r_emb = Tensor::matrix(globals.len() - nq, gd, globals[nq..].concat())?;
        let ref_geo: Vec<GeoPoint> = set.references.iter().map(|v| v.geo).collect();
        let mut positives = Vec::with_capacity(nq);
        let mut hard = Vec::with_capacity(nq);
        let mut skipped = 0;
        for (qi, q) in set.queries.iter().enumerate() {
            let p = assign_positive(&q.geo, q_emb.row(qi), &ref_geo, &r_emb);
            let h = mine_global_top_n(q_emb.row(qi), &valid_negatives(&q.geo, &ref_geo), &r_emb, cfg.hard_negatives);
            if p.is_none() || h.is_empty() {
                skipped += 1;
            }
            positives.push(p);
            hard.push(h);
        }
        Ok(Self {
            patches,
            sels,
            queries: nq,
            positives,
            hard,
            skipped,
        })
    }

    /// One negative drawn uniformly from each query's hard list.
    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<Triplet> {
        (0..self.queries)
            .filter_map(|qi| {
                let p = self.positives[qi]?;
                let n = *self.hard[qi].get(rng.random_range(0..self.hard[qi].len().max(1)))?;
                Some(Triplet {
                    query: qi,
                    positive: p,
                    negative: n,
                    source: MiningSource::GlobalTop,
                })
            })
            .collect()
    }

    fn batch_loss(&self, tape: &mut Tape<'_, f32>, model: &Model, batch: &[Triplet], nn: usize) -> Result<(Var, f64)> {
        // Distinct images of the batch, stacked into one local-head pass.
        let mut slot: Vec<Option<usize>> = vec![None; self.patches.len()];
        let mut order = Vec::new();
        let mut pairs = Vec::with_capacity(2 * batch.len());
        let mut labels = Vec::with_capacity(2 * batch.len());
        let mut local = |img: usize, order: &mut Vec<usize>| {
            *slot[img].get_or_insert_with(|| {
                order.push(img);
                order.len() - 1
            })
        };
        for t in batch {
            let q = local(t.query, &mut order);
            let p = local(self.queries + t.positive, &mut order);
            let n = local(self.queries + t.negative, &mut order);
            pairs.push((q, p));
            labels.push(1);
            pairs.push((q, n));
            labels.push(0);
        }
        let d = self.patches[0].cols();
        let mut data = Vec::new();
        let mut sels = Vec::with_capacity(order.len());
        let mut row0 = 0;
        for &img in &order {
            data.extend_from_slice(self.patches[img].data());
            let k = self.patches[img].rows();
            sels.push(TokenSel {
                rows: (row0..row0 + k).collect(),
                meta: self.sels[img].meta.clone(),
            });
            row0 += k;
        }
        let x = tape.input(Tensor::matrix(row0, d, data)?);
        let locals = model.encoder.local_head.forward(tape, x)?;
        let locals = tape.l2_normalize(locals)?;
        let (feats, s) = pair_batch(tape, locals, &sels, &pairs, nn)?;
        let refs: Vec<&PairFeatures<f32>> = feats.iter().collect();
        let out = model.reranker.forward_with_similarity(tape, &refs, s)?;
        let loss = tape.cross_entropy(out.logits, &labels)?;
        let v = tape.value(loss).data()[0] as f64;
        Ok((loss, v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn triplet_examples() {
        let q = [0.0f32, 0.0];
        assert!((triplet_loss(&q, &q, &q, 0.1) - 0.1).abs() < 1e-7);
        assert_eq!(triplet_loss(&q, &q, &[0.2f32.sqrt(), 0.0], 0.1), 0.0);
        assert!((triplet_loss(&q, &[0.2, 0.0], &[0.3, 0.0], 0.1) - 0.05).abs() < 1e-7);
    }

    #[test]
    fn ce_examples() {
        assert!((rerank_ce_loss([3.0, 3.0], true) - core::f64::consts::LN_2).abs() < 1e-12);
        assert!((rerank_ce_loss([-10.0, 10.0], true) - 2.061_153_6e-9).abs() < 1e-15);
        assert!((rerank_ce_loss([-10.0, 10.0], false) - 20.0).abs() < 1e-6);
    }

    #[test]
    fn tape_triplet_matches_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<Vec<f32>> = (0..6).map(|_| (0..4).map(|_| rng.random::<f32>()).collect()).collect();
        let mut tape = Tape::<f32>::new();
        let t = |r: &[Vec<f32>]| Tensor::matrix(2, 4, r.concat()).unwrap();
        let (q, p, n) = (tape.input(t(&rows[0..2])), tape.input(t(&rows[2..4])), tape.input(t(&rows[4..6])));
        let l = triplet_loss_var(&mut tape, q, p, n, 0.1).unwrap();
        let want = (0..2)
            .map(|i| triplet_loss(&rows[i], &rows[2 + i], &rows[4 + i], 0.1))
            .sum::<f32>()
            / 2.0;
        assert!((tape.value(l).data()[0] - want).abs() < 1e-6);
    }

    #[test]
    fn mining_examples() {
        let geo = [GeoPoint::new(3.0, 0.0), GeoPoint::new(0.0, 8.0), GeoPoint::new(100.0, 0.0), GeoPoint::new(20.0, 0.0)];
        let emb = Tensor::matrix(4, 1, vec![0.3, 0.1, 0.05, 0.5]).unwrap();
        let q = GeoPoint::new(0.0, 0.0);
        assert_eq!(assign_positive(&q, &[0.0], &geo, &emb), Some(1));
        assert_eq!(assign_positive(&GeoPoint::new(-9.5, 0.0), &[0.0], &geo, &emb), None);
        assert_eq!(valid_negatives(&q, &geo), vec![2]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(mine_partial(&mut rng, &[0.0], &[3], &emb, 1), Some(3));
        assert_eq!(mine_partial(&mut rng, &[0.0], &[0, 1, 2, 3], &emb, 10), Some(2));
        assert_eq!(mine_global_top_n(&[0.0], &[0, 1, 2, 3], &emb, 3), vec![2, 1, 0]);
        assert_eq!(mine_global_top_n(&[0.0], &[0, 3], &emb, 100).len(), 2);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(5e-4, 0, 10), 5e-4);
        assert!((cosine_lr(5e-4, 5, 10) - 2.5e-4).abs() < 1e-9);
        assert!(cosine_lr(5e-4, 10, 10).abs() < 1e-12);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("x.b", Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap()).unwrap();
        let mut g = ParamGrads::empty(1);
        g.grads[0] = Some(Tensor::matrix(1, 2, vec![0.5, -2.0]).unwrap());
        let mut opt = AdamW::new(1, 0.05);
        opt.step(&mut store, &g, 0.01);
        let p = store.get(id).data();
        assert!((p[0] - 0.99).abs() < 1e-6 && (p[1] + 0.99).abs() < 1e-6, "{p:?}");
    }

    #[test]
    fn stage_names_round_trip() {
        for s in [Stage::Retrieval, Stage::Rerank, Stage::Finetune, Stage::EndToEnd] {
            assert_eq!(Stage::parse(s.as_str()), Some(s));
        }
        assert_eq!(Stage::parse("bogus"), None);
    }
}
