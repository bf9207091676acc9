//! Analytic operation counts for the encoder and the reranker.
//!
//! Two conventions are reported. `linear_macs` counts multiply-accumulates
//! in dense projections only (patch embedding, QKV/output projections, MLPs
//! and heads), which is how backbone costs are usually quoted as "GFLOPs".
//! `attention_macs` adds the `QKᵀ` and `AV` products; `flops()` doubles the
//! sum of both to count a multiply and an add separately.

use crate::rerank::{RerankConfig, PAIR_CHANNELS};
use crate::vit::EncoderConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCount {
    pub linear_macs: u64,
    pub attention_macs: u64,
}

impl OpCount {
    pub fn macs(&self) -> u64 {
        self.linear_macs + self.attention_macs
    }

    pub fn flops(&self) -> u64 {
        2 * self.macs()
    }

    pub fn linear_giga(&self) -> f64 {
        self.linear_macs as f64 * 1e-9
    }

    fn add(&mut self, other: OpCount) {
        self.linear_macs += other.linear_macs;
        self.attention_macs += other.attention_macs;
    }
}

/// `layers` pre-norm layers over `seqs` sequences of `len` tokens at width `d`
/// with a 4× MLP: QKV `3d²`, output `d²`, MLP `8d²` per token.
pub fn transformer_cost(seqs: u64, len: u64, d: u64, layers: u64) -> OpCount {
    OpCount {
        linear_macs: seqs * len * layers * 12 * d * d,
        attention_macs: seqs * layers * 2 * len * len * d,
    }
}

/// One image through the encoder, including both descriptor heads.
pub fn encoder_cost(cfg: &EncoderConfig) -> OpCount {
    let n = cfg.num_patches() as u64;
    let d = cfg.dim as u64;
    let mut c = OpCount {
        linear_macs: n * cfg.patch_len() as u64 * d + d * cfg.global_dim as u64 + n * d * cfg.local_dim as u64,
        attention_macs: 0,
    };
    c.add(transformer_cost(1, n + 1, d, cfg.depth as u64));
    c
}

/// One query/reference pair with `rows` pair rows (`K'_q + K'_r`).
pub fn rerank_cost(cfg: &RerankConfig, rows: usize) -> OpCount {
    let (r, d) = (rows as u64, cfg.dim as u64);
    let nn = cfg.effective_nn() as u64;
    let ab = cfg.ablation;
    let mut c = OpCount {
        linear_macs: r * nn * PAIR_CHANNELS as u64 * d + d * 2,
        attention_macs: 0,
    };
    if !ab.no_block1 {
        c.add(transformer_cost(r, nn + 1, d, cfg.block1_layers as u64));
    }
    if !ab.no_block2 {
        c.add(transformer_cost(1, r + 1, d, cfg.block2_layers as u64));
    }
    c
}

/// Extraction of one query plus reranking of `topk` candidates, in giga
/// linear MACs.
pub fn query_linear_giga(enc: &EncoderConfig, rr: &RerankConfig, rows: usize, topk: usize) -> f64 {
    encoder_cost(enc).linear_giga() + topk as f64 * rerank_cost(rr, rows).linear_giga()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_transformer_by_hand() {
        // 2 tokens, width 2, one layer: 2·12·4 linear, 2·2²·2 attention.
        assert_eq!(
            transformer_cost(1, 2, 2, 1),
            OpCount {
                linear_macs: 96,
                attention_macs: 16
            }
        );
    }

    #[test]
    fn vit_small_backbone_cost() {
        let g = encoder_cost(&EncoderConfig::vit_small()).linear_giga();
        assert!((g - 25.90).abs() / 25.90 < 0.01, "{g}");
    }

    #[test]
    fn reranker_pair_cost() {
        let c = rerank_cost(&RerankConfig::default(), 1000);
        let g = c.linear_giga();
        assert!((g - 0.226).abs() / 0.226 < 0.05, "{g}");
        assert!(c.flops() > c.linear_macs);
    }
}
