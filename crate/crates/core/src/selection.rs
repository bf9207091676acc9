//! Attention-ranked local descriptor selection and its byte layout.
//!
//! Layout (little-endian): `count: u32`, `dtype: u8` (0 = f32, 1 = f16),
//! then per record `x, y, A, f[128]` in the declared width.

use alloc::format;
use alloc::vec::Vec;

use half::f16;

use crate::error::{invalid, Error, Result};
use crate::vit::{EncodedImage, LOCAL_DIM};

/// Values stored per record: 3 scalars plus the feature.
pub const RECORD_VALUES: usize = LOCAL_DIM + 3;
pub const HEADER_BYTES: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct LocalDescriptor {
    /// Normalized column in `[0, 1]`.
    pub x: f32,
    /// Normalized row in `[0, 1]`.
    pub y: f32,
    /// Raw attention value from the CLS row.
    pub attention: f32,
    /// Unit-norm feature.
    pub feature: Vec<f32>,
}

/// Records sorted by non-increasing attention.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct LocalDescriptorSet {
    pub records: Vec<LocalDescriptor>,
}

impl LocalDescriptorSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Checks ordering, coordinate range and unit norm within `tol`.
    pub fn validate(&self, tol: f32) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if !(0.0..=1.0).contains(&r.x) || !(0.0..=1.0).contains(&r.y) || r.attention.is_nan() || r.attention < 0.0 {
                return Err(invalid(format!("record {i}: coordinates or attention out of range")));
            }
            if r.feature.len() != LOCAL_DIM {
                return Err(invalid(format!(
                    "record {i}: feature has {} values, expected {LOCAL_DIM}",
                    r.feature.len()
                )));
            }
            let n = libm::sqrtf(r.feature.iter().map(|v| v * v).sum());
            if (n - 1.0).abs() > tol {
                return Err(invalid(format!(
                    "record {i}: feature norm {n} is not 1; L2-normalize local features before ingesting"
                )));
            }
            if i > 0 && self.records[i - 1].attention < r.attention {
                return Err(invalid(format!("record {i}: attention not sorted descending")));
            }
        }
        Ok(())
    }
}

/// Token ordering by descending attention; equal values keep the lower
/// row-major index first.
pub fn attention_order(attn: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..attn.len()).collect();
    idx.sort_by(|&a, &b| attn[b].total_cmp(&attn[a]).then(a.cmp(&b)));
    idx
}

/// Normalized center `(x, y)` of patch `i` on a `(rows, cols)` grid.
pub fn token_xy(i: usize, grid: (usize, usize)) -> (f32, f32) {
    let (gh, gw) = grid;
    (((i % gw) as f32 + 0.5) / gw as f32, ((i / gw) as f32 + 0.5) / gh as f32)
}

/// The `min(k, n)` highest-attention tokens of an encoded image.
pub fn select_top_k(encoded: &EncodedImage, k: usize) -> LocalDescriptorSet {
    let order = attention_order(encoded.attn_map.data());
    let records = order
        .into_iter()
        .take(k)
        .map(|i| {
            let (x, y) = token_xy(i, encoded.grid);
            LocalDescriptor {
                x,
                y,
                attention: encoded.attn_map.data()[i],
                feature: encoded.locals.row(i).to_vec(),
            }
        })
        .collect();
    LocalDescriptorSet { records }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F16,
}

impl Precision {
    pub fn width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F16 => 2,
        }
    }

    fn tag(self) -> u8 {
        match self {
            Precision::F32 => 0,
            Precision::F16 => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Precision::F32),
            1 => Some(Precision::F16),
            _ => None,
        }
    }
}

/// Payload bytes of `count` records (header excluded).
pub fn payload_bytes(count: usize, precision: Precision) -> usize {
    count * RECORD_VALUES * precision.width()
}

pub fn encoded_len(count: usize, precision: Precision) -> usize {
    HEADER_BYTES + payload_bytes(count, precision)
}

pub fn quantize(set: &LocalDescriptorSet, precision: Precision) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(encoded_len(set.len(), precision));
    out.extend_from_slice(&(set.len() as u32).to_le_bytes());
    out.push(precision.tag());
    for (i, r) in set.records.iter().enumerate() {
        if r.feature.len() != LOCAL_DIM {
            return Err(invalid(format!("record {i}: feature must have {LOCAL_DIM} values")));
        }
        let values = [r.x, r.y, r.attention].into_iter().chain(r.feature.iter().copied());
        match precision {
            Precision::F32 => values.for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Precision::F16 => {
                values.for_each(|v| out.extend_from_slice(&f16::from_f32(v).to_le_bytes()))
            }
        }
    }
    Ok(out)
}

/// Decodes one set from the front of `bytes`, returning it with the byte count consumed.
pub fn dequantize_prefix(bytes: &[u8], base_offset: usize) -> Result<(LocalDescriptorSet, Precision, usize)> {
    if bytes.len() < HEADER_BYTES {
        return Err(Error::Format {
            offset: base_offset + bytes.len(),
            reason: "truncated local descriptor header".into(),
        });
    }
    let count = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let precision = Precision::from_tag(bytes[4]).ok_or_else(|| Error::Format {
        offset: base_offset + 4,
        reason: format!("unknown dtype tag {}", bytes[4]),
    })?;
    let need = encoded_len(count, precision);
    if bytes.len() < need {
        return Err(Error::Format {
            offset: base_offset + bytes.len(),
            reason: format!("local descriptor block needs {need} bytes, {} available", bytes.len()),
        });
    }
    let w = precision.width();
    let read = |i: usize| -> f32 {
        let at = HEADER_BYTES + i * w;
        match precision {
            Precision::F32 => f32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")),
            Precision::F16 => f16::from_le_bytes(bytes[at..at + 2].try_into().expect("2 bytes")).to_f32(),
        }
    };
    let records = (0..count)
        .map(|r| {
            let base = r * RECORD_VALUES;
            LocalDescriptor {
                x: read(base),
                y: read(base + 1),
                attention: read(base + 2),
                feature: (0..LOCAL_DIM).map(|j| read(base + 3 + j)).collect(),
            }
        })
        .collect();
    Ok((LocalDescriptorSet { records }, precision, need))
}

/// Decodes a buffer holding exactly one set.
pub fn dequantize(bytes: &[u8]) -> Result<LocalDescriptorSet> {
    let (set, _, used) = dequantize_prefix(bytes, 0)?;
    if used != bytes.len() {
        return Err(Error::Format {
            offset: used,
            reason: format!("{} trailing bytes", bytes.len() - used),
        });
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::normalize;
    use crate::tensor::Tensor;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_encoded(rng: &mut impl Rng, gh: usize, gw: usize) -> EncodedImage {
        let n = gh * gw;
        let mut locals = Vec::with_capacity(n * LOCAL_DIM);
        for _ in 0..n {
            let mut f: Vec<f32> = (0..LOCAL_DIM).map(|_| rng.random::<f32>() - 0.5).collect();
            normalize(&mut f);
            locals.extend(f);
        }
        let mut attn: Vec<f32> = (0..n).map(|_| rng.random::<f32>()).collect();
        let s: f32 = attn.iter().sum::<f32>() * 1.1;
        attn.iter_mut().for_each(|v| *v /= s);
        EncodedImage {
            global: vec![0.0; 256],
            locals: Tensor::matrix(n, LOCAL_DIM, locals).unwrap(),
            attn_map: Tensor::matrix(gh, gw, attn).unwrap(),
            grid: (gh, gw),
        }
    }

    #[test]
    fn keeps_everything_when_k_exceeds_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = random_encoded(&mut rng, 8, 8);
        let s = select_top_k(&e, 500);
        assert_eq!(s.len(), 64);
        s.validate(1e-3).unwrap();
    }

    #[test]
    fn unique_maximum_is_selected_for_k1() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut e = random_encoded(&mut rng, 4, 5);
        e.attn_map.data_mut()[13] = 0.99;
        let s = select_top_k(&e, 1);
        assert_eq!(s.len(), 1);
        assert_eq!(s.records[0].attention, 0.99);
        // token 13 sits at column 3, row 2 of a 4×5 grid
        assert_eq!((s.records[0].x, s.records[0].y), (3.5 / 5.0, 2.5 / 4.0));
        assert_eq!(s.records[0].feature, e.locals.row(13));
    }

    #[test]
    fn ties_prefer_lower_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut e = random_encoded(&mut rng, 2, 2);
        e.attn_map.data_mut().copy_from_slice(&[0.1, 0.3, 0.3, 0.2]);
        assert_eq!(attention_order(e.attn_map.data()), vec![1, 2, 3, 0]);
    }

    #[test]
    fn payload_sizes() {
        assert_eq!(payload_bytes(500, Precision::F32), 262_000);
        assert_eq!(payload_bytes(500, Precision::F16), 131_000);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let big = random_encoded(&mut rng, 25, 20);
        let s = select_top_k(&big, 500);
        assert_eq!(quantize(&s, Precision::F32).unwrap().len(), HEADER_BYTES + 262_000);
        assert_eq!(quantize(&s, Precision::F16).unwrap().len(), HEADER_BYTES + 131_000);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = select_top_k(&random_encoded(&mut rng, 3, 3), 4);
        let mut bytes = quantize(&s, Precision::F32).unwrap();
        assert!(matches!(dequantize(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
        bytes[4] = 9;
        assert!(matches!(dequantize(&bytes), Err(Error::Format { offset: 4, .. })));
        assert!(dequantize(&[1, 0]).is_err());
    }

    #[test]
    fn unnormalized_features_fail_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = select_top_k(&random_encoded(&mut rng, 3, 3), 4);
        s.records[2].feature[0] += 0.5;
        let err = s.validate(1e-3).unwrap_err();
        assert!(format!("{err}").contains("normalize"));
    }

    proptest! {
        #[test]
        fn top_k_matches_full_sort(seed in 0u64..1000, k in 1usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut e = random_encoded(&mut rng, 5, 6);
            // force some ties
            let d = e.attn_map.data_mut();
            d[3] = d[7];
            d[11] = d[7];
            let s = select_top_k(&e, k);
            let mut oracle: Vec<(f32, usize)> = e.attn_map.data().iter().copied().zip(0..).collect();
            oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            prop_assert_eq!(s.len(), k.min(30));
            for (r, (a, i)) in s.records.iter().zip(oracle) {
                prop_assert_eq!(r.attention, a);
                prop_assert_eq!(&r.feature[..], e.locals.row(i));
            }
        }

        #[test]
        fn quantization_round_trips(seed in 0u64..1000, k in 0usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = select_top_k(&random_encoded(&mut rng, 4, 5), k);
            let exact = dequantize(&quantize(&s, Precision::F32).unwrap()).unwrap();
            prop_assert_eq!(&exact, &s);
            let half = dequantize(&quantize(&s, Precision::F16).unwrap()).unwrap();
            for (a, b) in half.records.iter().zip(&s.records) {
                prop_assert!((a.x - b.x).abs() <= 1.0 / 1024.0);
                prop_assert!((a.y - b.y).abs() <= 1.0 / 1024.0);
                prop_assert!((a.attention - b.attention).abs() <= 1.0 / 1024.0);
                for (u, v) in a.feature.iter().zip(&b.feature) {
                    prop_assert!((u - v).abs() <= 1.0 / 1024.0);
                }
            }
            half.validate(1e-2).unwrap();
        }
    }
}
