//! Procedural places with metric ground truth.
//!
//! Each place owns a canvas larger than the rendered view: a two-colour
//! gradient plus a handful of shapes. Places come in families that share
//! the background and palette, so global appearance alone is ambiguous
//! inside a family while the shape layout stays distinctive. Views crop the
//! canvas at a random shift, then apply brightness change, additive noise
//! and random occluders.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::image::Image;
use crate::retrieval::{GeoPoint, Split};
use crate::training::{TrainData, View, ViewSet};

/// Minimum distance between place centers.
pub const MIN_SPACING_M: f64 = 60.0;
/// Maximum distance of a view from its place center.
pub const MAX_JITTER_M: f64 = 5.0;

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
#[derive(Clone, Debug, PartialEq)]
pub struct WorldSpec {
    pub seed: u64,
    pub n_places: usize,
    /// One reference view per place; the rest are queries.
    pub views_per_place: usize,
    /// Side of the square area holding the place grid.
    pub extent_m: f64,
    pub spacing_m: f64,
    pub jitter_m: f64,
    pub image_h: usize,
    pub image_w: usize,
    /// Places sharing a background and palette.
    pub family_size: usize,
    pub shapes_per_place: usize,
    pub max_shift_px: usize,
    /// Brightness factor range `1 ± brightness`.
    pub brightness: f32,
    pub noise_sigma: f32,
    pub occluders: usize,
    /// Places assigned to the train and validation partitions; the rest
    /// form the test partition.
    pub train_places: usize,
    pub val_places: usize,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            n_places: 200,
            views_per_place: 4,
            extent_m: 1200.0,
            spacing_m: 80.0,
            jitter_m: 4.0,
            image_h: 48,
            image_w: 64,
            family_size: 4,
            shapes_per_place: 8,
            max_shift_px: 6,
            brightness: 0.15,
            noise_sigma: 0.03,
            occluders: 2,
            train_places: 80,
            val_places: 20,
        }
    }
}

impl WorldSpec {
    /// Places per grid row.
    pub fn grid_cols(&self) -> usize {
        let mut c = 1;
        while c * c < self.n_places {
            c += 1;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_places == 0 || self.views_per_place < 2 {
            return Err(invalid("need at least one place and two views per place"));
        }
        if self.spacing_m < MIN_SPACING_M {
            return Err(invalid(format!("spacing {} m is below {MIN_SPACING_M} m", self.spacing_m)));
        }
        if !(0.0..=MAX_JITTER_M).contains(&self.jitter_m) {
            return Err(invalid(format!("jitter must lie in [0, {MAX_JITTER_M}] m")));
        }
        let needed = (self.grid_cols() - 1) as f64 * self.spacing_m;
        if needed > self.extent_m {
            return Err(invalid(format!(
                "extent {} m too small: {} places at {} m spacing need {needed} m",
                self.extent_m, self.n_places, self.spacing_m
            )));
        }
        if self.train_places + self.val_places > self.n_places {
            return Err(invalid("train + val places exceed n_places"));
        }
        if self.image_h < 8 || self.image_w < 8 || self.family_size == 0 {
            return Err(invalid("image too small or empty family"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthView {
    pub id: String,
    pub place: usize,
    pub geo: GeoPoint,
    pub split: Split,
    pub partition: Partition,
    pub image: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub centers: Vec<GeoPoint>,
    pub views: Vec<SynthView>,
}

impl Dataset {
    pub fn view_set(&self, partition: Partition) -> ViewSet {
        let mut set = ViewSet::default();
        for v in self.views.iter().filter(|v| v.partition == partition) {
            let view = View {
                id: v.id.clone(),
                geo: v.geo,
                image: v.image.clone(),
            };
            match v.split {
                Split::Query => set.queries.push(view),
                Split::Reference => set.references.push(view),
            }
        }
        set
    }

    pub fn train_data(&self) -> TrainData {
        TrainData {
            train: self.view_set(Partition::Train),
            val: self.view_set(Partition::Val),
        }
    }
}

type Rgb = [f32; 3];

fn color<R: Rng + ?Sized>(rng: &mut R) -> Rgb {
    [rng.random(), rng.random(), rng.random()]
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect { x0: f32, y0: f32, x1: f32, y1: f32 },
    Disc { cx: f32, cy: f32, r: f32 },
    Ring { cx: f32, cy: f32, r: f32, w: f32 },
    Stripes { x0: f32, y0: f32, x1: f32, y1: f32, period: f32, vertical: bool },
}

impl Shape {
    fn random<R: Rng + ?Sized>(rng: &mut R, h: f32, w: f32) -> Self {
        let (cx, cy) = (rng.random::<f32>() * w, rng.random::<f32>() * h);
        let size = 4.0 + rng.random::<f32>() * 0.22 * h.min(w);
        match rng.random_range(0..4) {
            0 => {
                let a = size * (0.5 + rng.random::<f32>());
                Shape::Rect { x0: cx - a, y0: cy - size, x1: cx + a, y1: cy + size }
            }
            1 => Shape::Disc { cx, cy, r: size },
            2 => Shape::Ring { cx, cy, r: size, w: 1.5 + rng.random::<f32>() * 2.0 },
            _ => Shape::Stripes {
                x0: cx - size,
                y0: cy - size,
                x1: cx + size,
                y1: cy + size,
                period: 3.0 + rng.random::<f32>() * 4.0,
                vertical: rng.random(),
            },
        }
    }

    fn covers(&self, x: f32, y: f32) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Disc { cx, cy, r } => (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r,
            Shape::Ring { cx, cy, r, w } => {
                let d = libm::sqrtf((x - cx) * (x - cx) + (y - cy) * (y - cy));
                d <= r && d >= r - w
            }
            Shape::Stripes { x0, y0, x1, y1, period, vertical } => {
                let inside = x >= x0 && x < x1 && y >= y0 && y < y1;
                let t = if vertical { x - x0 } else { y - y0 };
                inside && (t / period) as i64 % 2 == 0
            }
        }
    }
}

fn paint(img: &mut Image, shape: &Shape, c: Rgb) {
    for y in 0..img.height {
        for x in 0..img.width {
            if shape.covers(x as f32, y as f32) {
                for (k, &v) in c.iter().enumerate() {
                    *img.at_mut(y, x, k) = v;
                }
            }
        }
    }
}

struct Family {
    top: Rgb,
    bottom: Rgb,
    angle: f32,
    palette: [Rgb; 3],
}

fn canvas(spec: &WorldSpec, family: &Family, rng: &mut ChaCha8Rng) -> Image {
    let m = spec.max_shift_px;
    let (h, w) = (spec.image_h + 2 * m, spec.image_w + 2 * m);
    let mut img = Image::zeros(h, w, 3);
    let (s, c) = (libm::sinf(family.angle), libm::cosf(family.angle));
    let span = (h + w) as f32;
    for y in 0..h {
        for x in 0..w {
            let t = ((x as f32 * c + y as f32 * s) / span + 0.5).clamp(0.0, 1.0);
            for k in 0..3 {
                *img.at_mut(y, x, k) = family.top[k] * (1.0 - t) + family.bottom[k] * t;
            }
        }
    }
    for _ in 0..spec.shapes_per_place {
        let shape = Shape::random(rng, h as f32, w as f32);
        let col = family.palette[rng.random_range(0..3)];
        paint(&mut img, &shape, col);
    }
    img
}

fn render(spec: &WorldSpec, canvas: &Image, rng: &mut ChaCha8Rng) -> Image {
    let m = spec.max_shift_px as i64;
    let (dx, dy) = (rng.random_range(-m..=m), rng.random_range(-m..=m));
    let (ox, oy) = ((m + dx) as usize, (m + dy) as usize);
    let gain = 1.0 + (rng.random::<f32>() * 2.0 - 1.0) * spec.brightness;
    let mut img = Image::zeros(spec.image_h, spec.image_w, 3);
    for y in 0..spec.image_h {
        for x in 0..spec.image_w {
            for k in 0..3 {
                *img.at_mut(y, x, k) = canvas.at(oy + y, ox + x, k) * gain;
            }
        }
    }
    for _ in 0..spec.occluders {
        let shape = Shape::random(rng, spec.image_h as f32, spec.image_w as f32);
        paint(&mut img, &shape, color(rng));
    }
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0f32, spec.noise_sigma).expect("positive sigma");
        for v in img.data.iter_mut() {
            *v += noise.sample(rng);
        }
    }
    for v in img.data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    img
}

fn family(seed: u64, index: usize) -> Family {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xFA41_1700_0000_0000 ^ index as u64);
    Family {
        top: color(&mut rng),
        bottom: color(&mut rng),
        angle: rng.random::<f32>() * core::f32::consts::TAU,
        palette: [color(&mut rng), color(&mut rng), color(&mut rng)],
    }
}

/// Renders one place: its views in order, reference first.
/// Views come out quantized to 8 bits, so they survive a PPM round trip.
pub fn generate_place(spec: &WorldSpec, place: usize) -> (GeoPoint, Vec<(GeoPoint, Image)>) {
    let cols = spec.grid_cols();
    let center = GeoPoint::new((place % cols) as f64 * spec.spacing_m, (place / cols) as f64 * spec.spacing_m);
    let fam = family(spec.seed, place / spec.family_size);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ place as u64);
    let canvas = canvas(spec, &fam, &mut rng);
    let views = (0..spec.views_per_place)
        .map(|_| {
            let r = spec.jitter_m * libm::sqrt(rng.random::<f64>());
            let a = rng.random::<f64>() * core::f64::consts::TAU;
            let geo = GeoPoint::new(center.east + r * libm::cos(a), center.north + r * libm::sin(a));
            let img = render(spec, &canvas, &mut rng);
            let img = Image::from_u8(img.height, img.width, img.channels, &img.to_u8()).expect("same shape");
            (geo, img)
        })
        .collect();
    (center, views)
}

/// Which partition a place belongs to. Places are shuffled by the seed so
/// partitions mix families and grid positions.
pub fn partitions(spec: &WorldSpec) -> Vec<Partition> {
    let mut order: Vec<usize> = (0..spec.n_places).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5EED_0000_5911_7000);
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let mut out = alloc::vec![Partition::Test; spec.n_places];
    for (rank, &p) in order.iter().enumerate() {
        out[p] = if rank < spec.train_places {
            Partition::Train
        } else if rank < spec.train_places + spec.val_places {
            Partition::Val
        } else {
            Partition::Test
        };
    }
    out
}

/// Generates the full dataset; identical specs give identical datasets.
pub fn generate(spec: &WorldSpec) -> Result<Dataset> {
    spec.validate()?;
    let parts = partitions(spec);
    let mut centers = Vec::with_capacity(spec.n_places);
    let mut views = Vec::with_capacity(spec.n_places * spec.views_per_place);
    for (place, &partition) in parts.iter().enumerate() {
        let (center, rendered) = generate_place(spec, place);
        centers.push(center);
        for (v, (geo, image)) in rendered.into_iter().enumerate() {
            views.push(SynthView {
                id: format!("p{place:04}_v{v}"),
                place,
                geo,
                split: if v == 0 { Split::Reference } else { Split::Query },
                partition,
                image,
            });
        }
    }
    Ok(Dataset { centers, views })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> WorldSpec {
        WorldSpec {
            n_places: 12,
            train_places: 6,
            val_places: 2,
            image_h: 16,
            image_w: 24,
            ..WorldSpec::default()
        }
    }

    #[test]
    fn deterministic_under_seed() {
        assert_eq!(generate(&tiny()).unwrap(), generate(&tiny()).unwrap());
        let other = WorldSpec { seed: 8, ..tiny() };
        assert_ne!(generate(&tiny()).unwrap().views[0].image, generate(&other).unwrap().views[0].image);
    }

    #[test]
    fn geometry_and_counts() {
        let d = generate(&tiny()).unwrap();
        assert_eq!(d.views.len(), 48);
        for (i, a) in d.centers.iter().enumerate() {
            for b in &d.centers[i + 1..] {
                assert!(a.distance(b) >= MIN_SPACING_M);
            }
        }
        for v in &d.views {
            assert!(v.geo.distance(&d.centers[v.place]) <= MAX_JITTER_M);
            assert!(v.image.data.iter().all(|x| (0.0..=1.0).contains(x)));
        }
        let refs = d.views.iter().filter(|v| v.split == Split::Reference).count();
        assert_eq!(refs, 12);
        let parts = partitions(&tiny());
        assert_eq!(parts.iter().filter(|&&p| p == Partition::Train).count(), 6);
        assert_eq!(parts.iter().filter(|&&p| p == Partition::Val).count(), 2);
    }

    #[test]
    fn rejects_cramped_worlds() {
        let spec = WorldSpec { extent_m: 100.0, ..tiny() };
        assert!(generate(&spec).is_err());
        let spec = WorldSpec { spacing_m: 30.0, ..tiny() };
        assert!(generate(&spec).is_err());
    }
}
