//! Run configuration, read from TOML as overrides of the desk setup.
//!
//! The top-level `seed` drives world generation, initialization and every
//! training stage; `seed` keys inside subsections are overwritten by it.

use std::path::Path;

use placerank_core::pipeline::ModelConfig;
use placerank_core::rerank::RerankConfig;
use placerank_core::synth::WorldSpec;
use placerank_core::training::{Stage, TrainConfig};
use placerank_core::vit::EncoderConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_at, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfigs {
    pub retrieval: TrainConfig,
    pub rerank: TrainConfig,
    /// Used by both `finetune` and `end2end`.
    pub finetune: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    /// Candidates reranked per query at evaluation time.
    pub topk: usize,
    /// Images per encoder forward pass.
    pub encode_batch: usize,
    pub world: WorldSpec,
    pub model: ModelConfig,
    pub train: StageConfigs,
}

impl Default for Config {
    fn default() -> Self {
        Self::desk()
    }
}

impl Config {
    /// The CPU-sized setup used for the synthetic benchmark.
    pub fn desk() -> Self {
        let stage = |epochs, batch, lr, hard, select_k| TrainConfig {
            epochs,
            batch_triplets: batch,
            lr,
            hard_negatives: hard,
            eval_topk: 10,
            select_k,
            ..TrainConfig::default()
        };
        Self {
            seed: 1,
            topk: 10,
            encode_batch: 32,
            world: WorldSpec {
                train_places: 130,
                val_places: 20,
                ..WorldSpec::default()
            },
            model: ModelConfig {
                encoder: EncoderConfig {
                    image_h: 48,
                    image_w: 64,
                    patch: 8,
                    depth: 3,
                    dim: 32,
                    heads: 2,
                    ..EncoderConfig::default()
                },
                rerank: RerankConfig::default(),
                top_k: 24,
            },
            train: StageConfigs {
                retrieval: stage(20, 16, 5e-4, 100, 5),
                rerank: stage(20, 8, 1e-3, 10, 1),
                finetune: stage(3, 8, 1e-4, 10, 5),
            },
        }
    }

    /// A few seconds of work end to end; for tests.
    pub fn tiny() -> Self {
        let mut c = Self::desk();
        c.world = WorldSpec {
            n_places: 12,
            views_per_place: 3,
            extent_m: 400.0,
            image_h: 16,
            image_w: 24,
            shapes_per_place: 3,
            max_shift_px: 2,
            train_places: 6,
            val_places: 2,
            ..WorldSpec::default()
        };
        c.model.encoder = EncoderConfig {
            image_h: 16,
            image_w: 24,
            depth: 1,
            dim: 16,
            ..c.model.encoder
        };
        c.model.rerank = RerankConfig {
            dim: 8,
            heads: 2,
            block1_layers: 1,
            block2_layers: 1,
            ..RerankConfig::default()
        };
        c.model.top_k = 4;
        c.topk = 3;
        for t in [&mut c.train.retrieval, &mut c.train.rerank, &mut c.train.finetune] {
            t.epochs = 1;
            t.batch_triplets = 4;
            t.hard_negatives = 3;
            t.eval_topk = 3;
        }
        c
    }

    /// Parses `text` as overrides of [`Config::desk`]; absent keys keep the
    /// desk values at any nesting depth.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut base = toml::Table::try_from(Self::desk()).expect("config serializes");
        merge(&mut base, user);
        let c: Self = base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_at(path))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.world().validate()?;
        self.model.encoder.validate()?;
        for s in [Stage::Retrieval, Stage::Rerank, Stage::Finetune] {
            self.stage(s).validate()?;
        }
        let (e, w) = (&self.model.encoder, &self.world);
        if (e.image_h, e.image_w) != (w.image_h, w.image_w) {
            return Err(Error::Config(format!(
                "encoder input {}x{} differs from world images {}x{}",
                e.image_h, e.image_w, w.image_h, w.image_w
            )));
        }
        if self.topk == 0 || self.model.top_k == 0 || self.encode_batch == 0 {
            return Err(Error::Config("topk, model.top_k and encode_batch must be positive".into()));
        }
        Ok(())
    }

    pub fn world(&self) -> WorldSpec {
        WorldSpec {
            seed: self.seed,
            ..self.world.clone()
        }
    }

    pub fn model(&self) -> ModelConfig {
        self.model.clone()
    }

    pub fn stage(&self, stage: Stage) -> TrainConfig {
        let t = match stage {
            Stage::Retrieval => &self.train.retrieval,
            Stage::Rerank => &self.train.rerank,
            Stage::Finetune | Stage::EndToEnd => &self.train.finetune,
        };
        TrainConfig {
            seed: self.seed,
            ..t.clone()
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_desk_config_matches_builtin() {
        let text = include_str!("../../../configs/desk.toml");
        assert_eq!(Config::from_toml(text).unwrap(), Config::desk());
    }

    #[test]
    fn toml_round_trip_and_hash() {
        for c in [Config::desk(), Config::tiny()] {
            c.validate().unwrap();
            let back = Config::from_toml(&c.to_toml()).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.hash(), c.hash());
        }
        assert_ne!(Config::desk().hash(), Config::tiny().hash());
    }

    #[test]
    fn partial_and_bad_configs() {
        let c = Config::from_toml("seed = 3\n[model]\ntop_k = 7\n").unwrap();
        assert_eq!((c.seed, c.model.top_k), (3, 7));
        assert_eq!(c.model.encoder, Config::desk().model.encoder);
        assert_eq!(c.stage(Stage::Rerank).seed, 3);
        assert!(Config::from_toml("sed = 3").is_err());
        assert!(Config::from_toml("[model.encoder]\nimage_h = 32").is_err());
        assert!(Config::from_toml("[train.rerank]\nlr = -1.0").is_err());
        assert!(Config::from_toml("[model.rerank.ablation]\ntop2 = true").is_err());
    }
}
