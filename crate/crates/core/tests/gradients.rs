use placerank_core::autodiff::{RowPlan, Tape, Var};
use placerank_core::gradcheck::gradient_check;
use placerank_core::image::Image;
use placerank_core::params::{normal, ParamStore};
use placerank_core::rerank::{build_pair_features, Ablation, RerankConfig, RerankModel};
use placerank_core::selection::{LocalDescriptor, LocalDescriptorSet};
use placerank_core::tensor::Tensor;
use placerank_core::vit::{Encoder, EncoderConfig};
use placerank_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Squared distance to a fixed random target, averaged over rows.
fn probe(tape: &mut Tape<'_, f64>, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let target = normal(&mut rng(seed), &shape, 1.0);
    let t = tape.input(target);
    let d = tape.sub(x, t)?;
    let s = tape.row_sq_sum(d);
    Ok(tape.mean(s))
}

fn store_with(shapes: &[(&str, &[usize])], seed: u64) -> ParamStore<f64> {
    let mut r = rng(seed);
    let mut s = ParamStore::new();
    for (name, shape) in shapes {
        s.add(name, normal(&mut r, shape, 1.0)).unwrap();
    }
    s
}

fn check(store: &ParamStore<f64>, f: impl for<'a> Fn(&mut Tape<'a, f64>) -> Result<Var>) {
    let report = gradient_check(store, None, 1e-6, 12, 7, f).unwrap();
    assert!(
        report.max_relative_error < TOL,
        "{} [{}]: {:e}",
        report.worst_param,
        report.worst_index,
        report.max_relative_error
    );
}

fn id(s: &ParamStore<f64>, name: &str) -> placerank_core::params::ParamId {
    s.id(name).unwrap()
}

#[test]
fn linear_add_sub_scale() {
    let s = store_with(&[("x", &[4, 3]), ("w", &[3, 5]), ("b", &[1, 5]), ("y", &[4, 5])], 1);
    check(&s, |t| {
        let (x, w, b, y) = (t.param(id(&s, "x")), t.param(id(&s, "w")), t.param(id(&s, "b")), t.param(id(&s, "y")));
        let h = t.linear(x, w, Some(b))?;
        let h = t.add(h, y)?;
        let h = t.scale(h, 0.7);
        let h = t.add_scalar(h, 0.3);
        let h = t.sub(h, y)?;
        probe(t, h, 11)
    });
}

#[test]
fn add_rows_broadcasts_periodically() {
    let s = store_with(&[("x", &[6, 4]), ("pe", &[3, 4])], 2);
    check(&s, |t| {
        let (x, pe) = (t.param(id(&s, "x")), t.param(id(&s, "pe")));
        let h = t.add_rows(x, pe)?;
        probe(t, h, 12)
    });
}

#[test]
fn layer_norm_and_activations() {
    let s = store_with(&[("x", &[5, 6]), ("g", &[1, 6]), ("b", &[1, 6])], 3);
    check(&s, |t| {
        let (x, g, b) = (t.param(id(&s, "x")), t.param(id(&s, "g")), t.param(id(&s, "b")));
        let h = t.layer_norm(x, g, b)?;
        let h = t.gelu(h);
        probe(t, h, 13)
    });
    // Shifted away from the kink so central differences stay valid.
    let mut s = store_with(&[("x", &[3, 4])], 4);
    let id_x = s.id("x").unwrap();
    for v in s.get_mut(id_x).data_mut() {
        *v += if *v >= 0.0 { 0.1 } else { -0.1 };
    }
    check(&s, |t| {
        let x = t.param(id_x);
        let h = t.relu(x);
        probe(t, h, 14)
    });
}

#[test]
fn masked_attention() {
    let (seq, batch, d) = (4, 2, 8);
    let s = store_with(&[("qkv", &[seq * batch, 3 * d])], 5);
    let mask = vec![true, false, true, true, true, true, false, true];
    check(&s, |t| {
        let qkv = t.param(id(&s, "qkv"));
        let h = t.attention(qkv, 2, seq, Some(mask.clone()))?;
        probe(t, h, 15)
    });
}

#[test]
fn row_plumbing() {
    let s = store_with(&[("a", &[4, 3]), ("b", &[2, 3]), ("c", &[6, 2])], 6);
    check(&s, |t| {
        let (a, b, c) = (t.param(id(&s, "a")), t.param(id(&s, "b")), t.param(id(&s, "c")));
        let ab = t.concat_rows(a, b)?;
        let abc = t.concat_cols(ab, c)?;
        let mut plan = RowPlan::new();
        plan.push_row([(0, 0.5), (5, -1.5)]);
        plan.push_row([(3, 1.0)]);
        plan.push_row([(2, 2.0), (2, 1.0), (4, 0.25)]);
        let h = t.combine(abc, plan)?;
        let g = t.gather_rows(abc, &[5, 0, 5])?;
        let h = t.concat_rows(h, g)?;
        probe(t, h, 16)
    });
}

#[test]
fn normalization_and_pair_dots() {
    let s = store_with(&[("a", &[3, 5]), ("b", &[4, 5])], 7);
    check(&s, |t| {
        let (a, b) = (t.param(id(&s, "a")), t.param(id(&s, "b")));
        let a = t.l2_normalize(a)?;
        let b = t.l2_normalize(b)?;
        let d = t.pair_dots(a, b, vec![(0, 0), (2, 3), (1, 1), (2, 0), (0, 0)])?;
        probe(t, d, 17)
    });
}

#[test]
fn cross_entropy_loss() {
    let s = store_with(&[("z", &[5, 2])], 8);
    check(&s, |t| {
        let z = t.param(id(&s, "z"));
        t.cross_entropy(z, &[0, 1, 1, 0, 1])
    });
}

#[test]
fn encoder_end_to_end() {
    let config = EncoderConfig {
        image_h: 8,
        image_w: 12,
        channels: 3,
        patch: 4,
        depth: 2,
        dim: 8,
        heads: 2,
        global_dim: 6,
        local_dim: 5,
    };
    let mut store = ParamStore::<f64>::new();
    let enc = Encoder::init(&mut store, config, &mut rng(9)).unwrap();
    let mut r = rng(10);
    let imgs: Vec<Image> = (0..2)
        .map(|_| Image::new(8, 12, 3, (0..8 * 12 * 3).map(|_| r.random::<f32>()).collect()).unwrap())
        .collect();
    check(&store, |t| {
        let refs: Vec<&Image> = imgs.iter().collect();
        let v = enc.forward(t, &refs)?;
        let g = probe(t, v.global, 18)?;
        let l = probe(t, v.locals, 19)?;
        let s = t.add(g, l)?;
        Ok(s)
    });
}

fn random_set(r: &mut ChaCha8Rng, n: usize, dim: usize) -> LocalDescriptorSet {
    LocalDescriptorSet {
        records: (0..n)
            .map(|_| {
                let mut f: Vec<f32> = (0..dim).map(|_| r.random::<f32>() - 0.5).collect();
                let norm = f.iter().map(|v| v * v).sum::<f32>().sqrt();
                f.iter_mut().for_each(|v| *v /= norm);
                LocalDescriptor {
                    x: r.random(),
                    y: r.random(),
                    attention: r.random::<f32>() * 0.1,
                    feature: f,
                }
            })
            .collect(),
    }
}

fn small_rerank(ablation: Ablation) -> RerankConfig {
    RerankConfig {
        dim: 8,
        heads: 2,
        block1_layers: 1,
        block2_layers: 2,
        nn: 3,
        ablation,
    }
}

#[test]
fn reranker_all_variants() {
    let mut r = rng(20);
    let pairs: Vec<_> = [(4, 5), (3, 2)]
        .iter()
        .map(|&(a, b)| {
            build_pair_features(&random_set(&mut r, a, 16), &random_set(&mut r, b, 16), 3)
                .unwrap()
                .cast::<f64>()
        })
        .collect();
    let variants = [
        Ablation::default(),
        Ablation { no_block1: true, ..Default::default() },
        Ablation { no_block2: true, no_pos_embed: true, ..Default::default() },
    ];
    for ab in variants {
        let mut store = ParamStore::<f64>::new();
        let model = RerankModel::init(&mut store, small_rerank(ab), &mut rng(21)).unwrap();
        check(&store, |t| {
            let refs: Vec<_> = pairs.iter().collect();
            let v = model.forward(t, &refs)?;
            t.cross_entropy(v.logits, &[1, 0])
        });
    }
}

#[test]
fn similarity_channel_carries_gradient_to_features() {
    let mut r = rng(22);
    let (q, rf) = (random_set(&mut r, 4, 6), random_set(&mut r, 3, 6));
    let feats = build_pair_features(&q, &rf, 2).unwrap().cast::<f64>();
    let mut store = ParamStore::<f64>::new();
    let model = RerankModel::init(&mut store, small_rerank(Ablation::default()), &mut rng(23)).unwrap();
    let flat = |s: &LocalDescriptorSet| {
        Tensor::matrix(s.len(), 6, s.records.iter().flat_map(|d| d.feature.iter().map(|&v| v as f64)).collect()).unwrap()
    };
    store.add("fq", flat(&q)).unwrap();
    store.add("fr", flat(&rf)).unwrap();
    let (iq, ir) = (store.id("fq").unwrap(), store.id("fr").unwrap());
    let pairs = feats.token_pairs();
    check(&store, |t| {
        let a = t.param(iq);
        let b = t.param(ir);
        let a = t.l2_normalize(a)?;
        let b = t.l2_normalize(b)?;
        let s = t.pair_dots(a, b, pairs.clone())?;
        let v = model.forward_with_similarity(t, &[&feats], s)?;
        t.cross_entropy(v.logits, &[1])
    });
}
