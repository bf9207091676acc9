//! Transformer building blocks recorded on a [`Tape`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{AttentionMatrix, Tape, Var};
use crate::error::{invalid, shape_err, Result};
use crate::params::{normal, xavier, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn init<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(&format!("{name}.w"), xavier(rng, fan_in, fan_out))?;
        let b = store.add(&format!("{name}.b"), Tensor::zeros(&[fan_out]))?;
        Ok(Self { w, b, fan_in, fan_out })
    }

    pub fn bind<T: Real>(store: &ParamStore<T>, name: &str) -> Result<Self> {
        let w = lookup(store, &format!("{name}.w"))?;
        let b = lookup(store, &format!("{name}.b"))?;
        let shape = store.get(w).shape();
        if shape.len() != 2 {
            return Err(shape_err("Linear::bind", &[0, 0], shape));
        }
        Ok(Self {
            w,
            b,
            fan_in: shape[0],
            fan_out: shape[1],
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        tape.linear(x, w, Some(b))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn init<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(&format!("{name}.gamma"), Tensor::filled(&[dim], T::one()))?;
        let beta = store.add(&format!("{name}.beta"), Tensor::zeros(&[dim]))?;
        Ok(Self { gamma, beta })
    }

    pub fn bind<T: Real>(store: &ParamStore<T>, name: &str) -> Result<Self> {
        Ok(Self {
            gamma: lookup(store, &format!("{name}.gamma"))?,
            beta: lookup(store, &format!("{name}.beta"))?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b)
    }
}

pub(crate) fn lookup<T: Real>(store: &ParamStore<T>, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| invalid(format!("missing parameter `{name}`")))
}

/// Pre-norm transformer layer: `x + MHA(LN(x))`, then `+ MLP(LN(·))` with
/// GELU and a 4× hidden expansion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransformerLayer {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

/// Output of a layer: new tokens plus the attention node for introspection.
#[derive(Clone, Copy, Debug)]
pub struct LayerOutput {
    pub tokens: Var,
    pub attention: Var,
}

impl TransformerLayer {
    pub fn init<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(invalid(format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            ln1: LayerNorm::init(store, &format!("{name}.ln1"), dim)?,
            qkv: Linear::init(store, &format!("{name}.qkv"), dim, 3 * dim, rng)?,
            proj: Linear::init(store, &format!("{name}.proj"), dim, dim, rng)?,
            ln2: LayerNorm::init(store, &format!("{name}.ln2"), dim)?,
            fc1: Linear::init(store, &format!("{name}.fc1"), dim, 4 * dim, rng)?,
            fc2: Linear::init(store, &format!("{name}.fc2"), 4 * dim, dim, rng)?,
            heads,
        })
    }

    pub fn bind<T: Real>(store: &ParamStore<T>, name: &str, heads: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::bind(store, &format!("{name}.ln1"))?,
            qkv: Linear::bind(store, &format!("{name}.qkv"))?,
            proj: Linear::bind(store, &format!("{name}.proj"))?,
            ln2: LayerNorm::bind(store, &format!("{name}.ln2"))?,
            fc1: Linear::bind(store, &format!("{name}.fc1"))?,
            fc2: Linear::bind(store, &format!("{name}.fc2"))?,
            heads,
        })
    }

    /// Runs the layer over `rows / seq_len` independent sequences.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        seq_len: usize,
        key_mask: Option<Vec<bool>>,
    ) -> Result<LayerOutput> {
        let h = self.ln1.forward(tape, x)?;
        let qkv = self.qkv.forward(tape, h)?;
        let attention = tape.attention(qkv, self.heads, seq_len, key_mask)?;
        let a = self.proj.forward(tape, attention)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, x)?;
        let h = self.fc1.forward(tape, h)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, h)?;
        let tokens = tape.add(x, h)?;
        Ok(LayerOutput { tokens, attention })
    }
}

/// Standard sinusoidal position table, `len × dim`.
pub fn sinusoidal_table<T: Real>(len: usize, dim: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / libm::pow(10_000.0, 2.0 * pair / dim as f64);
            data[pos * dim + i] = T::of(if i % 2 == 0 {
                libm::sin(angle)
            } else {
                libm::cos(angle)
            });
        }
    }
    Tensor::matrix(len, dim, data).expect("table shape")
}

/// Standalone attention weights for [`multi_head_attention`].
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    /// `d × 3d`, columns laid out `[q | k | v]`.
    pub w_qkv: Tensor<T>,
    pub b_qkv: Tensor<T>,
    /// `d × d`
    pub w_out: Tensor<T>,
    pub b_out: Tensor<T>,
}

impl<T: Real> AttentionParams<T> {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Self {
        Self {
            w_qkv: normal(rng, &[dim, 3 * dim], 0.3),
            b_qkv: normal(rng, &[3 * dim], 0.1),
            w_out: normal(rng, &[dim, dim], 0.3),
            b_out: normal(rng, &[dim], 0.1),
        }
    }
}

/// Token outputs plus the head-averaged, row-stochastic attention matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput<T> {
    pub tokens: Tensor<T>,
    pub attn: AttentionMatrix<T>,
}

/// Multi-head self-attention over one sequence of `n + 1` tokens.
pub fn multi_head_attention<T: Real>(
    tokens: &Tensor<T>,
    params: &AttentionParams<T>,
    heads: usize,
) -> Result<AttentionOutput<T>> {
    let d = tokens.cols();
    if tokens.rows() < 2 {
        return Err(shape_err("multi_head_attention", &[2, d], tokens.shape()));
    }
    if params.w_qkv.shape() != [d, 3 * d] || params.w_out.shape() != [d, d] {
        return Err(shape_err(
            "multi_head_attention",
            &[d, 3 * d],
            params.w_qkv.shape(),
        ));
    }
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(invalid(format!("dim {d} not divisible by {heads} heads")));
    }
    let mut tape = Tape::new();
    let x = tape.input(tokens.clone());
    let wq = tape.input(params.w_qkv.clone());
    let bq = tape.input(params.b_qkv.clone());
    let wo = tape.input(params.w_out.clone());
    let bo = tape.input(params.b_out.clone());
    let qkv = tape.linear(x, wq, Some(bq))?;
    let att = tape.attention(qkv, heads, tokens.rows(), None)?;
    let out = tape.linear(att, wo, Some(bo))?;
    Ok(AttentionOutput {
        tokens: tape.value(out).clone(),
        attn: tape.attention_matrix(att, 0)?,
    })
}

/// Applies one transformer layer from `store` to a single token sequence.
pub fn transformer_layer<T: Real>(
    tokens: &Tensor<T>,
    store: &ParamStore<T>,
    layer: &TransformerLayer,
) -> Result<Tensor<T>> {
    let d = store.get(layer.ln1.gamma).len();
    if tokens.cols() != d {
        return Err(shape_err("transformer_layer", &[d], &[tokens.cols()]));
    }
    let mut tape = Tape::with_params(store);
    let x = tape.input(tokens.clone());
    let out = layer.forward(&mut tape, x, tokens.rows(), None)?;
    Ok(tape.value(out.tokens).clone())
}
