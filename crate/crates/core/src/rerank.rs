//! Correlation-based reranking transformer.
//!
//! For a query/reference pair, every selected token is matched to its
//! nearest neighbors on the other side by cosine similarity. Each match
//! becomes a 7-vector `(x, y, A, x', y', A', S)` where the unprimed
//! channels always describe the query patch and the primed ones the
//! reference patch. Block-1 summarizes the neighbors of each token into a
//! class token, Block-2 summarizes all tokens into a sequence class token,
//! and a linear head emits `(False, True)` logits.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{RowPlan, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::kernels::dot;
use crate::nn::{lookup, sinusoidal_table, LayerNorm, Linear, TransformerLayer};
use crate::params::{normal, ParamId, ParamStore};
use crate::real::Real;
use crate::retrieval::{CandidateList, FeatureStore, PlaceRecord};
use crate::selection::LocalDescriptorSet;
use crate::tensor::Tensor;

pub const PAIR_CHANNELS: usize = 7;
pub const PREFIX: &str = "rerank.";

/// Component toggles of the reranker.
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    /// Zero channels `A` and `A'`.
    pub no_attention_value: bool,
    /// Zero channels `x, y, x', y'`.
    pub no_xy: bool,
    /// Zero channel `S`.
    pub no_correlation: bool,
    /// Keep one neighbor per token instead of `nn`.
    pub top1: bool,
    /// Mean-pool the neighbor tokens instead of running Block-1.
    pub no_block1: bool,
    /// Mean-pool the row tokens instead of running Block-2.
    pub no_block2: bool,
    /// Skip the sinusoidal position tables.
    pub no_pos_embed: bool,
}

impl Ablation {
    /// Zeroes the disabled channels of one 7-vector in place.
    pub fn mask_channels<T: Real>(&self, v: &mut [T]) {
        if self.no_xy {
            for c in [0, 1, 3, 4] {
                v[c] = T::zero();
            }
        }
        if self.no_attention_value {
            v[2] = T::zero();
            v[5] = T::zero();
        }
        if self.no_correlation {
            v[6] = T::zero();
        }
    }
}

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RerankConfig {
    pub dim: usize,
    pub heads: usize,
    pub block1_layers: usize,
    pub block2_layers: usize,
    pub nn: usize,
    pub ablation: Ablation,
}

impl Default for RerankConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            heads: 4,
            block1_layers: 2,
            block2_layers: 6,
            nn: 5,
            ablation: Ablation::default(),
        }
    }
}

impl RerankConfig {
    /// Neighbors per token after the top-1 toggle.
    pub fn effective_nn(&self) -> usize {
        if self.ablation.top1 {
            1
        } else {
            self.nn
        }
    }
}

/// Pair features for one query/reference image pair.
///
/// Rows `0..query_rows` hold query→reference matches (query tokens in
/// attention order), the rest reference→query matches.
#[derive(Clone, Debug, PartialEq)]
pub struct PairFeatures<T> {
    pub rows: usize,
    pub nn: usize,
    pub query_rows: usize,
    /// `rows × nn × 7`
    pub values: Vec<T>,
    /// `rows × nn`; padded neighbor slots are `false`.
    pub slot_mask: Vec<bool>,
    /// `rows`; padded rows are `false`.
    pub row_mask: Vec<bool>,
    /// Neighbor index on the other side, per slot.
    pub neighbors: Vec<usize>,
}

impl<T: Real> PairFeatures<T> {
    #[inline]
    pub fn slot(&self, row: usize, k: usize) -> &[T] {
        let at = (row * self.nn + k) * PAIR_CHANNELS;
        &self.values[at..at + PAIR_CHANNELS]
    }

    /// `(query record, reference record)` indices of every slot.
    pub fn token_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.rows * self.nn);
        for r in 0..self.rows {
            for k in 0..self.nn {
                let other = self.neighbors[r * self.nn + k];
                out.push(if r < self.query_rows {
                    (r, other)
                } else {
                    (other, r - self.query_rows)
                });
            }
        }
        out
    }

    pub fn cast<U: Real>(&self) -> PairFeatures<U> {
        PairFeatures {
            rows: self.rows,
            nn: self.nn,
            query_rows: self.query_rows,
            values: self.values.iter().map(|v| U::of(Real::to_f64(*v))).collect(),
            slot_mask: self.slot_mask.clone(),
            row_mask: self.row_mask.clone(),
            neighbors: self.neighbors.clone(),
        }
    }

    /// Tensor view `(rows·nn) × 7`.
    pub fn shape(&self) -> [usize; 3] {
        [self.rows, self.nn, PAIR_CHANNELS]
    }
}

/// Indices of the `nn` most similar rows of `b` for every row of `a`,
/// ordered by descending similarity (ties: lower index). Fewer than `nn`
/// candidates repeat the last one.
pub fn nearest_neighbors(a: &LocalDescriptorSet, b: &LocalDescriptorSet, nn: usize) -> Vec<Vec<(usize, f32)>> {
    let mut sims = vec![0.0f32; b.len()];
    let mut order: Vec<usize> = Vec::with_capacity(b.len());
    a.records
        .iter()
        .map(|ra| {
            for (s, rb) in sims.iter_mut().zip(&b.records) {
                *s = dot(&ra.feature, &rb.feature).clamp(-1.0, 1.0);
            }
            order.clear();
            order.extend(0..b.len());
            let take = nn.min(b.len());
            let cmp = |x: &usize, y: &usize| sims[*y].total_cmp(&sims[*x]).then(x.cmp(y));
            if take < order.len() {
                order.select_nth_unstable_by(take - 1, cmp);
                order.truncate(take);
            }
            order.sort_by(cmp);
            order.iter().map(|&j| (j, sims[j])).collect()
        })
        .collect()
}

/// Builds the `2K' × nn × 7` pair tensor of a query/reference pair.
pub fn build_pair_features(
    query: &LocalDescriptorSet,
    reference: &LocalDescriptorSet,
    nn: usize,
) -> Result<PairFeatures<f32>> {
    if query.is_empty() || reference.is_empty() {
        return Err(invalid("pair features need local descriptors on both sides"));
    }
    if nn == 0 {
        return Err(invalid("nn must be positive"));
    }
    let rows = query.len() + reference.len();
    let mut values = Vec::with_capacity(rows * nn * PAIR_CHANNELS);
    let mut slot_mask = Vec::with_capacity(rows * nn);
    let mut neighbors = Vec::with_capacity(rows * nn);
    let mut emit = |own_is_query: bool, own: usize, list: &[(usize, f32)], own_set: &LocalDescriptorSet, other_set: &LocalDescriptorSet| {
        for k in 0..nn {
            let valid = k < list.len();
            let (j, s) = list[k.min(list.len() - 1)];
            let (q, r) = if own_is_query {
                (&own_set.records[own], &other_set.records[j])
            } else {
                (&other_set.records[j], &own_set.records[own])
            };
            values.extend_from_slice(&[q.x, q.y, q.attention, r.x, r.y, r.attention, s]);
            slot_mask.push(valid);
            neighbors.push(j);
        }
    };
    for (i, list) in nearest_neighbors(query, reference, nn).iter().enumerate() {
        emit(true, i, list, query, reference);
    }
    for (i, list) in nearest_neighbors(reference, query, nn).iter().enumerate() {
        emit(false, i, list, reference, query);
    }
    Ok(PairFeatures {
        rows,
        nn,
        query_rows: query.len(),
        values,
        slot_mask,
        row_mask: vec![true; rows],
        neighbors,
    })
}

/// Two-logit match score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchScore {
    /// `(False, True)`
    pub logits: [f32; 2],
    pub prob_true: f32,
}

impl MatchScore {
    pub fn from_logits(logits: [f32; 2]) -> Self {
        let m = logits[0].max(logits[1]);
        let e0 = libm::expf(logits[0] - m);
        let e1 = libm::expf(logits[1] - m);
        Self {
            logits,
            prob_true: e1 / (e0 + e1),
        }
    }
}

/// Parameter handles of the reranker.
#[derive(Clone, Debug, PartialEq)]
pub struct RerankModel {
    pub config: RerankConfig,
    pub input: Linear,
    pub group_cls: ParamId,
    pub block1: Vec<TransformerLayer>,
    pub norm1: LayerNorm,
    pub seq_cls: ParamId,
    pub block2: Vec<TransformerLayer>,
    pub norm2: LayerNorm,
    pub head: Linear,
}

/// Tape handles of one batched reranker pass.
#[derive(Clone, Copy, Debug)]
pub struct RerankVars {
    /// `C × 2`
    pub logits: Var,
    /// Last Block-2 attention node, absent when Block-2 is ablated.
    pub block2_attention: Option<Var>,
}

impl RerankModel {
    pub fn init<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: RerankConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = config.dim;
        let layers = |store: &mut ParamStore<T>, rng: &mut R, block: &str, n: usize| {
            (0..n)
                .map(|i| TransformerLayer::init(store, &format!("rerank.{block}.layer{i}"), d, config.heads, rng))
                .collect::<Result<Vec<_>>>()
        };
        let input = Linear::init(store, "rerank.input", PAIR_CHANNELS, d, rng)?;
        let group_cls = store.add("rerank.block1.cls", normal(rng, &[1, d], 0.02))?;
        let block1 = layers(store, rng, "block1", config.block1_layers)?;
        let norm1 = LayerNorm::init(store, "rerank.block1.norm", d)?;
        let seq_cls = store.add("rerank.block2.cls", normal(rng, &[1, d], 0.02))?;
        let block2 = layers(store, rng, "block2", config.block2_layers)?;
        let norm2 = LayerNorm::init(store, "rerank.block2.norm", d)?;
        let head = Linear::init(store, "rerank.head", d, 2, rng)?;
        Ok(Self {
            config,
            input,
            group_cls,
            block1,
            norm1,
            seq_cls,
            block2,
            norm2,
            head,
        })
    }

    pub fn bind<T: Real>(store: &ParamStore<T>, config: RerankConfig) -> Result<Self> {
        let layers = |block: &str, n: usize| {
            (0..n)
                .map(|i| TransformerLayer::bind(store, &format!("rerank.{block}.layer{i}"), config.heads))
                .collect::<Result<Vec<_>>>()
        };
        Ok(Self {
            input: Linear::bind(store, "rerank.input")?,
            group_cls: lookup(store, "rerank.block1.cls")?,
            block1: layers("block1", config.block1_layers)?,
            norm1: LayerNorm::bind(store, "rerank.block1.norm")?,
            seq_cls: lookup(store, "rerank.block2.cls")?,
            block2: layers("block2", config.block2_layers)?,
            norm2: LayerNorm::bind(store, "rerank.block2.norm")?,
            head: Linear::bind(store, "rerank.head")?,
            config,
        })
    }

    fn check_batch<T: Real>(&self, feats: &[&PairFeatures<T>]) -> Result<usize> {
        let nn = feats.first().ok_or_else(|| invalid("no pair features"))?.nn;
        for f in feats {
            if f.nn != nn {
                return Err(invalid("pair features in a batch must share nn"));
            }
            if !f.row_mask.iter().any(|&v| v) {
                return Err(Error::AllMasked);
            }
        }
        Ok(nn)
    }

    /// The 7-channel input with ablated channels zeroed, `(Σ rows·nn) × 7`.
    pub fn input_tensor<T: Real>(&self, feats: &[&PairFeatures<T>]) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(feats.iter().map(|f| f.values.len()).sum());
        for f in feats {
            for chunk in f.values.chunks(PAIR_CHANNELS) {
                let mut v = [T::zero(); PAIR_CHANNELS];
                v.copy_from_slice(chunk);
                self.config.ablation.mask_channels(&mut v);
                data.extend_from_slice(&v);
            }
        }
        let n = data.len() / PAIR_CHANNELS;
        Tensor::matrix(n, PAIR_CHANNELS, data)
    }

    /// Scores a batch of constant pair tensors.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, feats: &[&PairFeatures<T>]) -> Result<RerankVars> {
        self.check_batch(feats)?;
        let x = self.input_tensor(feats)?;
        let x = tape.input(x);
        self.forward_inputs(tape, x, feats)
    }

    /// Scores pairs whose similarity channel is the graph node `similarity`
    /// (`(Σ rows·nn) × 1`), so gradients reach the local features.
    pub fn forward_with_similarity<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        feats: &[&PairFeatures<T>],
        similarity: Var,
    ) -> Result<RerankVars> {
        self.check_batch(feats)?;
        let x = self.input_tensor(feats)?;
        let (n, c) = (x.rows(), PAIR_CHANNELS - 1);
        let mut six = Vec::with_capacity(n * c);
        for i in 0..n {
            six.extend_from_slice(&x.row(i)[..c]);
        }
        let six = tape.input(Tensor::matrix(n, c, six)?);
        let s = if self.config.ablation.no_correlation {
            tape.input(Tensor::zeros(&[n, 1]))
        } else {
            similarity
        };
        let x = tape.concat_cols(six, s)?;
        self.forward_inputs(tape, x, feats)
    }

    fn forward_inputs<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        feats: &[&PairFeatures<T>],
    ) -> Result<RerankVars> {
        let ab = self.config.ablation;
        let nn = self.check_batch(feats)?;
        let total_rows: usize = feats.iter().map(|f| f.rows).sum();
        let tokens = self.input.forward(tape, x)?;

        let row_tokens = if ab.no_block1 {
            let mut plan = RowPlan::new();
            let mut r = 0;
            for f in feats {
                for row in 0..f.rows {
                    let mask = &f.slot_mask[row * nn..(row + 1) * nn];
                    let valid = mask.iter().filter(|&&m| m).count().max(1);
                    let w = T::one() / T::of(valid as f64);
                    plan.push_row(
                        (0..nn)
                            .filter(|&k| mask[k] || (k == 0 && !mask.iter().any(|&m| m)))
                            .map(|k| ((r + row) * nn + k, w)),
                    );
                }
                r += f.rows;
            }
            tape.combine(tokens, plan)?
        } else {
            let cls = tape.param(self.group_cls);
            let all = tape.concat_rows(cls, tokens)?;
            let seq = nn + 1;
            let mut plan = RowPlan::new();
            for r in 0..total_rows {
                plan.push_row([(0, T::one())]);
                for k in 0..nn {
                    plan.push_row([(1 + r * nn + k, T::one())]);
                }
            }
            let mut key_mask = Vec::with_capacity(total_rows * seq);
            for f in feats {
                for row in 0..f.rows {
                    key_mask.push(true);
                    key_mask.extend_from_slice(&f.slot_mask[row * nn..(row + 1) * nn]);
                }
            }
            let mut h = tape.combine(all, plan)?;
            if !ab.no_pos_embed {
                let pe = tape.input(sinusoidal_table(seq, self.config.dim));
                h = tape.add_rows(h, pe)?;
            }
            for layer in &self.block1 {
                h = layer.forward(tape, h, seq, Some(key_mask.clone()))?.tokens;
            }
            let cls_rows: Vec<usize> = (0..total_rows).map(|r| r * seq).collect();
            tape.gather_rows(h, &cls_rows)?
        };
        let row_tokens = self.norm1.forward(tape, row_tokens)?;

        let (pooled, block2_attention) = if ab.no_block2 {
            let mut plan = RowPlan::new();
            let mut off = 0;
            for f in feats {
                let valid = f.row_mask.iter().filter(|&&m| m).count();
                let w = T::one() / T::of(valid as f64);
                plan.push_row((0..f.rows).filter(|&r| f.row_mask[r]).map(|r| (off + r, w)));
                off += f.rows;
            }
            (tape.combine(row_tokens, plan)?, None)
        } else {
            let cls = tape.param(self.seq_cls);
            let all = tape.concat_rows(cls, row_tokens)?;
            let seq = 1 + feats.iter().map(|f| f.rows).max().unwrap_or(0);
            let mut plan = RowPlan::new();
            let mut key_mask = Vec::with_capacity(feats.len() * seq);
            let mut off = 0;
            for f in feats {
                plan.push_row([(0, T::one())]);
                key_mask.push(true);
                for r in 0..seq - 1 {
                    if r < f.rows {
                        plan.push_row([(1 + off + r, T::one())]);
                        key_mask.push(f.row_mask[r]);
                    } else {
                        plan.push_row([(0, T::one())]);
                        key_mask.push(false);
                    }
                }
                off += f.rows;
            }
            let mut h = tape.combine(all, plan)?;
            if !ab.no_pos_embed {
                let pe = tape.input(sinusoidal_table(seq, self.config.dim));
                h = tape.add_rows(h, pe)?;
            }
            let mut attention = None;
            for layer in &self.block2 {
                let out = layer.forward(tape, h, seq, Some(key_mask.clone()))?;
                h = out.tokens;
                attention = Some(out.attention);
            }
            let cls_rows: Vec<usize> = (0..feats.len()).map(|c| c * seq).collect();
            (tape.gather_rows(h, &cls_rows)?, attention)
        };
        let pooled = self.norm2.forward(tape, pooled)?;
        let logits = self.head.forward(tape, pooled)?;
        Ok(RerankVars {
            logits,
            block2_attention,
        })
    }

    pub fn score_batch(&self, store: &ParamStore<f32>, feats: &[&PairFeatures<f32>]) -> Result<Vec<MatchScore>> {
        if feats.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::with_trainable(store, vec![false; store.len()]);
        let vars = self.forward(&mut tape, feats)?;
        let l = tape.value(vars.logits);
        Ok((0..feats.len())
            .map(|i| MatchScore::from_logits([l.row(i)[0], l.row(i)[1]]))
            .collect())
    }

    pub fn score_pair(&self, store: &ParamStore<f32>, feats: &PairFeatures<f32>) -> Result<MatchScore> {
        Ok(self.score_batch(store, &[feats])?[0])
    }

    /// The `m` rows receiving the most Block-2 class-token attention in the
    /// last layer, with the coordinates of each row's first neighbor pair.
    pub fn top_attention_pairs(
        &self,
        store: &ParamStore<f32>,
        feats: &PairFeatures<f32>,
        m: usize,
    ) -> Result<Vec<AttentionPair>> {
        let mut tape = Tape::with_trainable(store, vec![false; store.len()]);
        let vars = self.forward(&mut tape, &[feats])?;
        let node = vars
            .block2_attention
            .ok_or_else(|| invalid("attention pairs need Block-2"))?;
        let att = tape.attention_matrix(node, 0)?;
        let cls_row = att.row(0);
        let mut rows: Vec<usize> = (0..feats.rows).filter(|&r| feats.row_mask[r]).collect();
        rows.sort_by(|&a, &b| cls_row[1 + b].total_cmp(&cls_row[1 + a]).then(a.cmp(&b)));
        rows.truncate(m);
        Ok(rows
            .into_iter()
            .map(|r| {
                let v = feats.slot(r, 0);
                AttentionPair {
                    row: r,
                    query_xy: (v[0], v[1]),
                    reference_xy: (v[3], v[4]),
                    similarity: v[6],
                    weight: cls_row[1 + r],
                }
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionPair {
    pub row: usize,
    pub query_xy: (f32, f32),
    pub reference_xy: (f32, f32),
    pub similarity: f32,
    pub weight: f32,
}

/// Anything that can score a batch of pair tensors.
pub trait PairScorer {
    fn nn(&self) -> usize;
    fn score_batch(&self, feats: &[&PairFeatures<f32>]) -> Result<Vec<MatchScore>>;
}

/// A reranker bound to its weights.
pub struct Reranker<'a> {
    pub model: &'a RerankModel,
    pub store: &'a ParamStore<f32>,
}

impl PairScorer for Reranker<'_> {
    fn nn(&self) -> usize {
        self.model.config.effective_nn()
    }

    fn score_batch(&self, feats: &[&PairFeatures<f32>]) -> Result<Vec<MatchScore>> {
        self.model.score_batch(self.store, feats)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RerankedCandidate {
    pub id: String,
    pub retrieval_score: f32,
    pub retrieval_rank: usize,
    /// `None` when either side lacks local descriptors.
    pub score: Option<MatchScore>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RerankedList {
    pub entries: Vec<RerankedCandidate>,
}

impl RerankedList {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|c| c.id.as_str())
    }
}

/// Reorders retrieval candidates by descending `prob_true`.
///
/// All scorable candidates are scored in one batch; the sort is stable so
/// equal probabilities keep retrieval order. Candidates without local
/// descriptors follow the scored ones in retrieval order.
pub fn rerank(
    query: &PlaceRecord,
    candidates: &CandidateList,
    store: &FeatureStore,
    scorer: &dyn PairScorer,
) -> Result<RerankedList> {
    let mut scored_feats = Vec::new();
    let mut scored_idx = Vec::new();
    let mut entries = Vec::with_capacity(candidates.len());
    for (rank, c) in candidates.entries.iter().enumerate() {
        let rec = store
            .get(&c.id)
            .ok_or_else(|| Error::UnknownId(c.id.clone()))?;
        if !query.locals.is_empty() && !rec.locals.is_empty() {
            scored_feats.push(build_pair_features(&query.locals, &rec.locals, scorer.nn())?);
            scored_idx.push(rank);
        }
        entries.push(RerankedCandidate {
            id: c.id.clone(),
            retrieval_score: c.score,
            retrieval_rank: rank,
            score: None,
        });
    }
    let refs: Vec<&PairFeatures<f32>> = scored_feats.iter().collect();
    let scores = if refs.is_empty() {
        Vec::new()
    } else {
        scorer.score_batch(&refs)?
    };
    for (i, s) in scored_idx.into_iter().zip(scores) {
        entries[i].score = Some(s);
    }
    entries.sort_by(|a, b| match (&a.score, &b.score) {
        (Some(x), Some(y)) => y.prob_true.total_cmp(&x.prob_true),
        (Some(_), None) => core::cmp::Ordering::Less,
        (None, Some(_)) => core::cmp::Ordering::Greater,
        (None, None) => core::cmp::Ordering::Equal,
    });
    Ok(RerankedList { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::normalize;
    use crate::retrieval::{Candidate, GeoPoint, Split};
    use crate::selection::LocalDescriptor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(rng: &mut ChaCha8Rng, n: usize) -> LocalDescriptorSet {
        LocalDescriptorSet {
            records: (0..n)
                .map(|_| {
                    let mut f: Vec<f32> = (0..16).map(|_| rng.random::<f32>() - 0.5).collect();
                    normalize(&mut f);
                    LocalDescriptor {
                        x: rng.random(),
                        y: rng.random(),
                        attention: rng.random(),
                        feature: f,
                    }
                })
                .collect(),
        }
    }

    fn small() -> RerankConfig {
        RerankConfig {
            dim: 8,
            heads: 2,
            block1_layers: 1,
            block2_layers: 2,
            nn: 3,
            ablation: Ablation::default(),
        }
    }

    #[test]
    fn pair_features_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (q, r) = (set(&mut rng, 6), set(&mut rng, 4));
        let f = build_pair_features(&q, &r, 3).unwrap();
        assert_eq!(f.shape(), [10, 3, 7]);
        assert_eq!(f.query_rows, 6);
        for row in 0..10 {
            let (own, other) = if row < 6 { (&q.records[row], &r) } else { (&r.records[row - 6], &q) };
            let mut sims: Vec<(f32, usize)> = other
                .records
                .iter()
                .enumerate()
                .map(|(j, o)| (own.feature.iter().zip(&o.feature).map(|(a, b)| a * b).sum(), j))
                .collect();
            sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            for (k, &(sim, j)) in sims.iter().take(3).enumerate() {
                let v = f.slot(row, k);
                let nb = &other.records[j];
                let (qd, rd) = if row < 6 { (own, nb) } else { (nb, own) };
                assert_eq!(&v[..6], &[qd.x, qd.y, qd.attention, rd.x, rd.y, rd.attention]);
                assert!((v[6] - sim).abs() < 1e-6);
                assert!(f.slot_mask[row * 3 + k]);
            }
        }
    }

    #[test]
    fn short_side_pads_with_masked_slots() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (q, r) = (set(&mut rng, 4), set(&mut rng, 2));
        let f = build_pair_features(&q, &r, 3).unwrap();
        for row in 0..4 {
            assert_eq!(&f.slot_mask[row * 3..row * 3 + 3], &[true, true, false]);
            assert_eq!(f.slot(row, 2), f.slot(row, 1));
        }
        assert!(build_pair_features(&q, &LocalDescriptorSet::default(), 3).is_err());
    }

    #[test]
    fn batched_scores_equal_single_scores_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let model = RerankModel::init(&mut store, small(), &mut rng).unwrap();
        let q = set(&mut rng, 5);
        let feats: Vec<_> = [2, 7, 5]
            .iter()
            .map(|&n| build_pair_features(&q, &set(&mut rng, n), 3).unwrap())
            .collect();
        let refs: Vec<_> = feats.iter().collect();
        let batch = model.score_batch(&store, &refs).unwrap();
        for (f, b) in feats.iter().zip(&batch) {
            let single = model.score_pair(&store, f).unwrap();
            assert_eq!(single.logits, b.logits);
            assert!((0.0..=1.0).contains(&single.prob_true));
        }
    }

    #[test]
    fn ablations_run_and_reject_all_masked() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (q, r) = (set(&mut rng, 4), set(&mut rng, 4));
        let f = build_pair_features(&q, &r, 3).unwrap();
        for ab in [
            Ablation { no_block1: true, ..Default::default() },
            Ablation { no_block2: true, ..Default::default() },
            Ablation { no_xy: true, no_attention_value: true, no_correlation: true, no_pos_embed: true, ..Default::default() },
        ] {
            let mut store = ParamStore::new();
            let model = RerankModel::init(&mut store, RerankConfig { ablation: ab, ..small() }, &mut rng).unwrap();
            assert!(model.score_pair(&store, &f).unwrap().prob_true.is_finite());
        }
        let mut store = ParamStore::new();
        let model = RerankModel::init(&mut store, small(), &mut rng).unwrap();
        let mut dead = f.clone();
        dead.row_mask.iter_mut().for_each(|m| *m = false);
        assert_eq!(model.score_pair(&store, &dead), Err(Error::AllMasked));
    }

    #[test]
    fn channel_ablation_hides_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cfg = RerankConfig {
            ablation: Ablation { no_correlation: true, ..Default::default() },
            ..small()
        };
        let model = RerankModel::init(&mut store, cfg, &mut rng).unwrap();
        let f = build_pair_features(&set(&mut rng, 3), &set(&mut rng, 3), 3).unwrap();
        let mut g = f.clone();
        g.values.chunks_mut(7).for_each(|v| v[6] = 0.123);
        assert_eq!(model.score_pair(&store, &f).unwrap(), model.score_pair(&store, &g).unwrap());
    }

    #[test]
    fn match_score_softmax_is_stable() {
        let s = MatchScore::from_logits([1000.0, 1001.0]);
        assert!((s.prob_true - 0.7310586).abs() < 1e-6);
    }

    struct ByAttention;

    impl PairScorer for ByAttention {
        fn nn(&self) -> usize {
            1
        }
        fn score_batch(&self, feats: &[&PairFeatures<f32>]) -> Result<Vec<MatchScore>> {
            Ok(feats
                .iter()
                .map(|f| MatchScore {
                    logits: [0.0, 0.0],
                    prob_true: (f.slot(f.query_rows, 0)[5] * 10.0).round() / 10.0,
                })
                .collect())
        }
    }

    fn record(id: &str, locals: LocalDescriptorSet) -> PlaceRecord {
        let mut global = vec![0.0; 4];
        global[0] = 1.0;
        PlaceRecord {
            id: id.into(),
            geo: GeoPoint::new(0.0, 0.0),
            split: Split::Reference,
            global,
            locals,
        }
    }

    fn one(attention: f32) -> LocalDescriptorSet {
        let mut feature = vec![0.0; 16];
        feature[0] = 1.0;
        LocalDescriptorSet {
            records: vec![LocalDescriptor { x: 0.5, y: 0.5, attention, feature }],
        }
    }

    #[test]
    fn rerank_sorts_stably_and_keeps_unscored_last() {
        let mut store = FeatureStore::new();
        store.add(record("a", one(0.2))).unwrap();
        store.add(record("b", LocalDescriptorSet::default())).unwrap();
        store.add(record("c", one(0.9))).unwrap();
        store.add(record("d", one(0.21))).unwrap();
        let cands = CandidateList {
            entries: ["a", "b", "c", "d"]
                .iter()
                .enumerate()
                .map(|(i, id)| Candidate { id: (*id).into(), score: 1.0 - i as f32 * 0.1 })
                .collect(),
        };
        let q = record("q", one(0.5));
        let out = rerank(&q, &cands, &store, &ByAttention).unwrap();
        assert_eq!(out.ids().collect::<Vec<_>>(), ["c", "a", "d", "b"]);
        assert!(out.entries[3].score.is_none());
        assert_eq!(out.entries[3].retrieval_rank, 1);

        let bare = record("q", LocalDescriptorSet::default());
        let out = rerank(&bare, &cands, &store, &ByAttention).unwrap();
        assert_eq!(out.ids().collect::<Vec<_>>(), ["a", "b", "c", "d"]);

        let missing = CandidateList { entries: vec![Candidate { id: "zz".into(), score: 0.0 }] };
        assert_eq!(rerank(&q, &missing, &store, &ByAttention), Err(Error::UnknownId("zz".into())));
    }

    #[test]
    fn attention_pairs_are_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let model = RerankModel::init(&mut store, small(), &mut rng).unwrap();
        let f = build_pair_features(&set(&mut rng, 5), &set(&mut rng, 5), 3).unwrap();
        let top = model.top_attention_pairs(&store, &f, 4).unwrap();
        assert_eq!(top.len(), 4);
        assert!(top.windows(2).all(|w| w[0].weight >= w[1].weight));
    }
}
