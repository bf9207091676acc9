//! Vision-transformer backbone emitting one global descriptor, per-patch
//! local descriptors, and the CLS attention map.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{RowPlan, Tape, Var};
use crate::error::{invalid, shape_err, Result};
use crate::image::Image;
use crate::nn::{lookup, LayerNorm, Linear, TransformerLayer};
use crate::params::{normal, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

pub const GLOBAL_DIM: usize = 256;
pub const LOCAL_DIM: usize = 128;

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub global_dim: usize,
    pub local_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_h: 64,
            image_w: 64,
            channels: 3,
            patch: 8,
            depth: 4,
            dim: 64,
            heads: 4,
            global_dim: GLOBAL_DIM,
            local_dim: LOCAL_DIM,
        }
    }
}

impl EncoderConfig {
    /// ViT-S at 640×480 with 16-pixel patches.
    pub fn vit_small() -> Self {
        Self {
            image_h: 480,
            image_w: 640,
            channels: 3,
            patch: 16,
            depth: 12,
            dim: 384,
            heads: 6,
            global_dim: GLOBAL_DIM,
            local_dim: LOCAL_DIM,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.image_h.is_multiple_of(self.patch) || !self.image_w.is_multiple_of(self.patch) {
            return Err(invalid(format!(
                "image {}×{} not divisible by patch {}",
                self.image_h, self.image_w, self.patch
            )));
        }
        if self.depth == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(invalid("depth must be ≥ 1 and dim divisible by heads"));
        }
        Ok(())
    }

    /// `(rows, cols)` of the patch grid.
    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.patch, self.image_w / self.patch)
    }

    pub fn num_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

/// Per-image encoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedImage {
    /// Unit-norm global descriptor.
    pub global: Vec<f32>,
    /// `n × local_dim` unit rows.
    pub locals: Tensor<f32>,
    /// `grid_h × grid_w` CLS attention over patches.
    pub attn_map: Tensor<f32>,
    pub grid: (usize, usize),
}

impl EncodedImage {
    /// `(col, row)` grid indices of token `i`.
    pub fn coords(&self, i: usize) -> (usize, usize) {
        (i % self.grid.1, i / self.grid.1)
    }
}

/// Flattens the image into `n × (p·p·c)` patches in row-major grid order.
pub fn extract_patches<T: Real>(image: &Image, patch: usize) -> Result<Tensor<T>> {
    if patch == 0 || !image.height.is_multiple_of(patch) || !image.width.is_multiple_of(patch) {
        return Err(invalid(format!(
            "image {}×{} not divisible by patch {patch}; resize first",
            image.height, image.width
        )));
    }
    let (gh, gw) = (image.height / patch, image.width / patch);
    let c = image.channels;
    let plen = patch * patch * c;
    let mut data = Vec::with_capacity(gh * gw * plen);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                let y = gy * patch + py;
                let start = (y * image.width + gx * patch) * c;
                data.extend(image.data[start..start + patch * c].iter().map(|&v| T::of(v as f64)));
            }
        }
    }
    Tensor::matrix(gh * gw, plen, data)
}

/// Bilinear resampling of the patch rows of a positional table.
///
/// Row 0 (CLS) passes through unchanged. Sample positions follow the
/// half-pixel convention with edge clamping.
pub fn interpolate_pos_embed<T: Real>(
    pe: &Tensor<T>,
    old_grid: (usize, usize),
    new_grid: (usize, usize),
) -> Result<Tensor<T>> {
    let d = pe.cols();
    let (oh, ow) = old_grid;
    let (nh, nw) = new_grid;
    if oh == 0 || ow == 0 || nh == 0 || nw == 0 {
        return Err(invalid("grids must be positive"));
    }
    if pe.rows() != oh * ow + 1 {
        return Err(shape_err("interpolate_pos_embed", &[oh * ow + 1, d], pe.shape()));
    }
    if old_grid == new_grid {
        return Ok(pe.clone());
    }
    let src = |r: usize, c: usize| pe.row(1 + r * ow + c);
    let coord = |i: usize, n_new: usize, n_old: usize| -> (usize, usize, T) {
        let pos = (i as f64 + 0.5) * n_old as f64 / n_new as f64 - 0.5;
        let pos = pos.clamp(0.0, (n_old - 1) as f64);
        let lo = libm::floor(pos) as usize;
        let hi = (lo + 1).min(n_old - 1);
        (lo, hi, T::of(pos - lo as f64))
    };
    let mut data = Vec::with_capacity((nh * nw + 1) * d);
    data.extend_from_slice(pe.row(0));
    for r in 0..nh {
        let (r0, r1, fr) = coord(r, nh, oh);
        for c in 0..nw {
            let (c0, c1, fc) = coord(c, nw, ow);
            let (a, b, cc, dd) = (src(r0, c0), src(r0, c1), src(r1, c0), src(r1, c1));
            for j in 0..d {
                let top = a[j] + (b[j] - a[j]) * fc;
                let bottom = cc[j] + (dd[j] - cc[j]) * fc;
                data.push(top + (bottom - top) * fr);
            }
        }
    }
    Tensor::matrix(nh * nw + 1, d, data)
}

/// Parameter handles of the backbone; weights live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub patch_embed: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub norm: LayerNorm,
    pub global_head: Linear,
    pub local_head: Linear,
}

/// Tape handles produced by [`Encoder::forward`].
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    /// `B × global_dim`, unit rows.
    pub global: Var,
    /// `B·n × local_dim`, unit rows.
    pub locals: Var,
    /// Last-layer attention node (sequences of `n + 1`).
    pub attention: Var,
    /// `B·n × dim` penultimate patch tokens before the local head.
    pub patches: Var,
    pub batch: usize,
    pub tokens: usize,
}

pub const PREFIX: &str = "encoder.";
pub const LOCAL_HEAD: &str = "encoder.local_head.";

impl Encoder {
    pub fn init<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let n = config.num_patches();
        let patch_embed = Linear::init(store, "encoder.patch", config.patch_len(), d, rng)?;
        let cls = store.add("encoder.cls", normal(rng, &[1, d], 0.02))?;
        let pos = store.add("encoder.pos", normal(rng, &[n + 1, d], 0.02))?;
        let layers = (0..config.depth)
            .map(|i| TransformerLayer::init(store, &format!("encoder.layer{i}"), d, config.heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::init(store, "encoder.norm", d)?;
        let global_head = Linear::init(store, "encoder.global_head", d, config.global_dim, rng)?;
        let local_head = Linear::init(store, "encoder.local_head", d, config.local_dim, rng)?;
        Ok(Self {
            config,
            patch_embed,
            cls,
            pos,
            layers,
            norm,
            global_head,
            local_head,
        })
    }

    pub fn bind<T: Real>(store: &ParamStore<T>, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.depth)
            .map(|i| TransformerLayer::bind(store, &format!("encoder.layer{i}"), config.heads))
            .collect::<Result<Vec<_>>>()?;
        let pos = lookup(store, "encoder.pos")?;
        if store.get(pos).rows() != config.num_patches() + 1 {
            return Err(shape_err(
                "Encoder::bind pos",
                &[config.num_patches() + 1, config.dim],
                store.get(pos).shape(),
            ));
        }
        Ok(Self {
            patch_embed: Linear::bind(store, "encoder.patch")?,
            cls: lookup(store, "encoder.cls")?,
            pos,
            layers,
            norm: LayerNorm::bind(store, "encoder.norm")?,
            global_head: Linear::bind(store, "encoder.global_head")?,
            local_head: Linear::bind(store, "encoder.local_head")?,
            config,
        })
    }

    fn grid_of(&self, image: &Image) -> Result<(usize, usize)> {
        let p = self.config.patch;
        if image.channels != self.config.channels {
            return Err(invalid("channel count differs from encoder config"));
        }
        if !image.height.is_multiple_of(p) || !image.width.is_multiple_of(p) {
            return Err(invalid(format!(
                "image {}×{} not divisible by patch {p}; resize first",
                image.height, image.width
            )));
        }
        Ok((image.height / p, image.width / p))
    }

    /// Patch tokens with prepended CLS and positional embedding, `B·(n+1) × d`.
    ///
    /// Pixels in `[0, 1]` are mapped to `[-1, 1]` before the patch projection.
    /// Images must share one resolution; a resolution other than the
    /// configured one uses an interpolated (constant) positional table.
    pub fn embed<T: Real>(&self, tape: &mut Tape<'_, T>, images: &[&Image]) -> Result<(Var, usize)> {
        let first = images.first().ok_or_else(|| invalid("no images"))?;
        let grid = self.grid_of(first)?;
        let n = grid.0 * grid.1;
        let plen = self.config.patch_len();
        let mut pixels = Vec::with_capacity(images.len() * n * plen);
        for img in images {
            if self.grid_of(img)? != grid {
                return Err(invalid("images in one batch must share a resolution"));
            }
            let raw = extract_patches::<T>(img, self.config.patch)?.into_data();
            pixels.extend(raw.into_iter().map(|v| (v - T::of(0.5)) * T::of(2.0)));
        }
        let patches = tape.input(Tensor::matrix(images.len() * n, plen, pixels)?);
        let tokens = self.patch_embed.forward(tape, patches)?;
        let cls = tape.param(self.cls);
        let all = tape.concat_rows(cls, tokens)?;
        let mut plan = RowPlan::new();
        for b in 0..images.len() {
            plan.push_row([(0, T::one())]);
            for i in 0..n {
                plan.push_row([(1 + b * n + i, T::one())]);
            }
        }
        let seq = tape.combine(all, plan)?;
        let pos = if grid == self.config.grid() {
            tape.param(self.pos)
        } else {
            let resized = interpolate_pos_embed(tape.param_tensor(self.pos), self.config.grid(), grid)?;
            tape.input(resized)
        };
        Ok((tape.add_rows(seq, pos)?, n))
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, images: &[&Image]) -> Result<EncoderVars> {
        let (mut x, n) = self.embed(tape, images)?;
        let seq = n + 1;
        let batch = images.len();
        let mut penultimate = x;
        let mut attention = None;
        for (i, layer) in self.layers.iter().enumerate() {
            if i + 1 == self.layers.len() {
                penultimate = x;
            }
            let out = layer.forward(tape, x, seq, None)?;
            x = out.tokens;
            attention = Some(out.attention);
        }
        let cls_rows: Vec<usize> = (0..batch).map(|b| b * seq).collect();
        let cls = tape.gather_rows(x, &cls_rows)?;
        let cls = self.norm.forward(tape, cls)?;
        let global = self.global_head.forward(tape, cls)?;
        let global = tape.l2_normalize(global)?;
        let patch_rows: Vec<usize> = (0..batch)
            .flat_map(|b| (1..seq).map(move |i| b * seq + i))
            .collect();
        let patches = tape.gather_rows(penultimate, &patch_rows)?;
        let locals = self.local_head.forward(tape, patches)?;
        let locals = tape.l2_normalize(locals)?;
        Ok(EncoderVars {
            global,
            locals,
            attention: attention.expect("depth ≥ 1"),
            patches,
            batch,
            tokens: n,
        })
    }

    /// Global descriptors only (skips the local head).
    pub fn forward_global<T: Real>(&self, tape: &mut Tape<'_, T>, images: &[&Image]) -> Result<Var> {
        let (mut x, n) = self.embed(tape, images)?;
        let seq = n + 1;
        for layer in &self.layers {
            x = layer.forward(tape, x, seq, None)?.tokens;
        }
        let cls_rows: Vec<usize> = (0..images.len()).map(|b| b * seq).collect();
        let cls = tape.gather_rows(x, &cls_rows)?;
        let cls = self.norm.forward(tape, cls)?;
        let global = self.global_head.forward(tape, cls)?;
        tape.l2_normalize(global)
    }

    /// CLS attention map of image `b` from the last-layer attention node.
    pub fn attention_map<T: Real>(
        tape: &Tape<'_, T>,
        vars: &EncoderVars,
        b: usize,
    ) -> Result<Vec<T>> {
        let m = tape.attention_matrix(vars.attention, b)?;
        Ok(m.row(0)[1..].to_vec())
    }

    /// Encodes a batch of same-resolution images.
    pub fn encode_batch(&self, store: &ParamStore<f32>, images: &[&Image]) -> Result<Vec<EncodedImage>> {
        Ok(self
            .encode_with_patches(store, images)?
            .into_iter()
            .map(|(e, _)| e)
            .collect())
    }

    /// Like [`Encoder::encode_batch`], also returning each image's
    /// penultimate patch tokens (`n × dim`).
    pub fn encode_with_patches(
        &self,
        store: &ParamStore<f32>,
        images: &[&Image],
    ) -> Result<Vec<(EncodedImage, Tensor<f32>)>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let grid = self.grid_of(images[0])?;
        let mut tape = Tape::with_trainable(store, vec![false; store.len()]);
        let vars = self.forward(&mut tape, images)?;
        let (g, l, p) = (tape.value(vars.global), tape.value(vars.locals), tape.value(vars.patches));
        let n = vars.tokens;
        let (ld, d) = (l.cols(), p.cols());
        (0..images.len())
            .map(|b| {
                let attn = Self::attention_map(&tape, &vars, b)?;
                Ok((
                    EncodedImage {
                        global: g.row(b).to_vec(),
                        locals: Tensor::matrix(n, ld, l.data()[b * n * ld..(b + 1) * n * ld].to_vec())?,
                        attn_map: Tensor::matrix(grid.0, grid.1, attn)?,
                        grid,
                    },
                    Tensor::matrix(n, d, p.data()[b * n * d..(b + 1) * n * d].to_vec())?,
                ))
            })
            .collect()
    }

    pub fn encode(&self, store: &ParamStore<f32>, image: &Image) -> Result<EncodedImage> {
        Ok(self.encode_batch(store, &[image])?.remove(0))
    }

    /// Patch tokens plus CLS with positional embedding, `(n+1) × d`.
    pub fn patchify(&self, store: &ParamStore<f32>, image: &Image) -> Result<Tensor<f32>> {
        let mut tape = Tape::with_trainable(store, vec![false; store.len()]);
        let (x, _) = self.embed(&mut tape, &[image])?;
        Ok(tape.value(x).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> EncoderConfig {
        EncoderConfig {
            image_h: 16,
            image_w: 24,
            patch: 8,
            depth: 2,
            dim: 16,
            heads: 2,
            ..EncoderConfig::default()
        }
    }

    fn image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, 3, (0..h * w * 3).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn patch_counts() {
        assert_eq!(EncoderConfig::vit_small().num_patches(), 1200);
        let c = EncoderConfig::default();
        assert_eq!(c.num_patches(), 64);
        assert_eq!(c.grid(), (8, 8));
    }

    #[test]
    fn non_divisible_image_is_rejected() {
        let img = Image::zeros(10, 16, 3);
        assert!(extract_patches::<f32>(&img, 8).is_err());
        let c = EncoderConfig { image_h: 60, ..EncoderConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn patch_order_is_row_major() {
        let mut img = Image::zeros(16, 16, 1);
        *img.at_mut(0, 8, 0) = 1.0; // top-right patch, first pixel
        *img.at_mut(9, 1, 0) = 0.5; // bottom-left patch, pixel (1, 1)
        let p = extract_patches::<f32>(&img, 8).unwrap();
        assert_eq!(p.shape(), &[4, 64]);
        assert_eq!(p.row(1)[0], 1.0);
        assert_eq!(p.row(2)[9], 0.5);
    }

    #[test]
    fn mid_gray_tokens_equal_positional_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = Encoder::init(&mut store, small(), &mut rng).unwrap();
        let gray = Image::new(16, 24, 3, vec![0.5; 16 * 24 * 3]).unwrap();
        let t = enc.patchify(&store, &gray).unwrap();
        let pos = store.get(enc.pos);
        assert_eq!(t.shape(), &[7, 16]);
        for i in 1..7 {
            assert_eq!(t.row(i), pos.row(i));
        }
        let cls = store.get(enc.cls);
        for j in 0..16 {
            assert_eq!(t.row(0)[j], cls.data()[j] + pos.row(0)[j]);
        }
    }

    #[test]
    fn interpolation_identity_and_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pe: Tensor<f32> = normal(&mut rng, &[10, 5], 1.0);
        assert_eq!(interpolate_pos_embed(&pe, (3, 3), (3, 3)).unwrap(), pe);
        let c = Tensor::filled(&[5, 4], 0.7f32);
        let out = interpolate_pos_embed(&c, (2, 2), (5, 3)).unwrap();
        assert_eq!(out.shape(), &[16, 4]);
        assert!(out.data().iter().all(|v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn bilinear_center_of_upsampled_2x2() {
        // CLS row then values 0, 1, 2, 3 laid out on a 2×2 grid.
        let pe = Tensor::matrix(5, 1, vec![9.0f64, 0.0, 1.0, 2.0, 3.0]).unwrap();
        let out = interpolate_pos_embed(&pe, (2, 2), (3, 3)).unwrap();
        assert_eq!(out.row(0)[0], 9.0);
        assert!((out.row(1 + 4)[0] - 1.5).abs() < 1e-12);
        // corners keep the original values
        assert_eq!(out.row(1)[0], 0.0);
        assert_eq!(out.row(9)[0], 3.0);
    }

    #[test]
    fn encode_shapes_norms_and_attention_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cfg = EncoderConfig {
            depth: 4,
            ..EncoderConfig::default()
        };
        let enc = Encoder::init(&mut store, cfg, &mut rng).unwrap();
        let img = image(64, 64, 4);
        let e = enc.encode(&store, &img).unwrap();
        assert_eq!(e.global.len(), 256);
        assert_eq!(e.locals.shape(), &[64, 128]);
        assert_eq!(e.attn_map.shape(), &[8, 8]);
        let gn: f32 = e.global.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((gn - 1.0).abs() < 1e-5);
        for i in 0..64 {
            let n: f32 = e.locals.row(i).iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
        let mass: f32 = e.attn_map.data().iter().sum();
        assert!(mass <= 1.0 + 1e-6 && e.attn_map.data().iter().all(|&v| v >= 0.0));
        // plus the CLS self-attention entry the row sums to one
        let mut tape = Tape::with_trainable(&store, vec![false; store.len()]);
        let vars = enc.forward(&mut tape, &[&img]).unwrap();
        let row = tape.attention_matrix(vars.attention, 0).unwrap();
        let total: f32 = row.row(0).iter().sum();
        assert!((total - 1.0).abs() < 1e-5);
        assert!((row.row(0)[0] + mass - 1.0).abs() < 1e-5);
        // deterministic
        assert_eq!(enc.encode(&store, &img).unwrap(), e);
    }

    #[test]
    fn batched_encoding_matches_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let enc = Encoder::init(&mut store, small(), &mut rng).unwrap();
        let imgs: Vec<Image> = (0..3).map(|s| image(16, 24, s)).collect();
        let refs: Vec<&Image> = imgs.iter().collect();
        let batch = enc.encode_batch(&store, &refs).unwrap();
        for (img, b) in imgs.iter().zip(&batch) {
            assert_eq!(&enc.encode(&store, img).unwrap(), b);
        }
    }

    #[test]
    fn other_resolution_keeps_descriptor_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let enc = Encoder::init(&mut store, small(), &mut rng).unwrap();
        let e = enc.encode(&store, &image(32, 40, 1)).unwrap();
        assert_eq!(e.grid, (4, 5));
        assert_eq!(e.locals.shape(), &[20, 128]);
        assert_eq!(e.global.len(), 256);
    }
}
