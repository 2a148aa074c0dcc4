//! Synthetic few-shot episodes: coloured shapes on textured backgrounds.
//!
//! A class is a (shape family, colour) pair. Each image contains the class
//! object drawn last, over one or two distractors of other colours, on a
//! grey textured background, so the object mask is exactly the analytic
//! raster of its geometry.

use std::f64::consts::PI;

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Result, VatError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeFamily {
    Circle,
    Square,
    Triangle,
    Cross,
    Diamond,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 5] = [
        ShapeFamily::Circle,
        ShapeFamily::Square,
        ShapeFamily::Triangle,
        ShapeFamily::Cross,
        ShapeFamily::Diamond,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Saturated object colours; backgrounds are grey.
pub const PALETTE: [[f64; 3]; 6] = [
    [0.9, 0.15, 0.15],
    [0.15, 0.8, 0.2],
    [0.2, 0.3, 0.95],
    [0.95, 0.85, 0.1],
    [0.85, 0.2, 0.85],
    [0.1, 0.85, 0.9],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ShapeClass {
    pub family: ShapeFamily,
    pub color: usize,
}

impl ShapeClass {
    pub fn id(self) -> usize {
        self.family.index() * PALETTE.len() + self.color
    }

    pub fn from_id(id: usize) -> Result<Self> {
        let family = *ShapeFamily::ALL
            .get(id / PALETTE.len())
            .ok_or_else(|| VatError::InvalidInput(format!("no shape class {id}")))?;
        Ok(Self {
            family,
            color: id % PALETTE.len(),
        })
    }

    pub fn all() -> Vec<ShapeClass> {
        ShapeFamily::ALL
            .iter()
            .flat_map(|&family| (0..PALETTE.len()).map(move |color| ShapeClass { family, color }))
            .collect()
    }

    /// Combinations reserved for evaluation. Every family and colour still
    /// appears in training, only these pairings do not.
    pub fn is_held_out(self) -> bool {
        (self.family.index() + self.color) % 5 == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    HeldOut,
}

impl Split {
    /// Classes of the split with family and colour both cycling from one
    /// entry to the next: entry `k` of the full list is (family `k mod 5`,
    /// colour `k mod 6`), which visits all 30 pairs since 5 and 6 are
    /// coprime. Any short run of consecutive classes therefore spans every
    /// colour and most families.
    pub fn classes(self) -> Vec<ShapeClass> {
        (0..ShapeFamily::ALL.len() * PALETTE.len())
            .map(|k| ShapeClass {
                family: ShapeFamily::ALL[k % ShapeFamily::ALL.len()],
                color: k % PALETTE.len(),
            })
            .filter(|c| c.is_held_out() == (self == Split::HeldOut))
            .collect()
    }
}

/// Shape geometry in continuous pixel coordinates (`x` right, `y` down).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub family: ShapeFamily,
    pub cx: f64,
    pub cy: f64,
    /// Circumscribed radius.
    pub radius: f64,
    pub angle: f64,
}

/// Half-width of a cross arm relative to the radius.
pub const CROSS_ARM: f64 = 0.35;
/// Half-side of a square relative to the radius.
pub const SQUARE_HALF: f64 = 0.75;

impl Placement {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let r = self.radius;
        match self.family {
            ShapeFamily::Circle => dx * dx + dy * dy <= r * r,
            ShapeFamily::Square => u.abs() <= SQUARE_HALF * r && v.abs() <= SQUARE_HALF * r,
            ShapeFamily::Diamond => u.abs() + v.abs() <= r,
            ShapeFamily::Cross => {
                (u.abs() <= r && v.abs() <= CROSS_ARM * r)
                    || (v.abs() <= r && u.abs() <= CROSS_ARM * r)
            }
            ShapeFamily::Triangle => {
                // Equilateral, circumradius r, one vertex along +u: the
                // inradius is r/2 and the edge normals point at 60°, 180°, 300°.
                (0..3).all(|k| {
                    let a = PI / 3.0 + 2.0 * PI / 3.0 * k as f64;
                    u * a.cos() + v * a.sin() <= r / 2.0
                })
            }
        }
    }

    /// Binary mask sampled at pixel centres.
    pub fn rasterize(&self, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[h, w], |i| {
            f64::from(self.contains(i[1] as f64 + 0.5, i[0] as f64 + 0.5))
        })
    }
}

/// One few-shot task: `K` annotated support images and a query.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSample {
    pub support: Vec<(Tensor, Tensor)>,
    pub query_image: Tensor,
    pub query_mask: Tensor,
    pub class_id: usize,
}

impl EpisodeSample {
    pub fn validate(&self) -> Result<()> {
        let s = self.query_image.shape();
        if s.len() != 3 || s[2] != 3 {
            return shape_err(format!("episode: query image {s:?} is not (H, W, 3)"));
        }
        if self.support.is_empty() {
            return Err(VatError::InvalidInput(
                "episode has no support shots".into(),
            ));
        }
        let binary =
            |m: &Tensor| m.shape() == &s[..2] && m.data().iter().all(|&v| v == 0.0 || v == 1.0);
        if !binary(&self.query_mask)
            || self
                .support
                .iter()
                .any(|(img, m)| img.shape() != s || !binary(m))
        {
            return shape_err("episode: images or masks disagree in size or masks are not binary");
        }
        Ok(())
    }

    pub fn shots(&self) -> usize {
        self.support.len()
    }
}

/// A generated episode together with the geometry of its class objects.
#[derive(Clone, Debug)]
pub struct SynthEpisode {
    pub sample: EpisodeSample,
    pub query_shape: Placement,
    pub support_shapes: Vec<Placement>,
}

fn random_placement(family: ShapeFamily, size: usize, rng: &mut impl Rng) -> Placement {
    let s = size as f64;
    let radius = rng.random_range(0.14..0.26) * s;
    Placement {
        family,
        cx: rng.random_range(radius..s - radius),
        cy: rng.random_range(radius..s - radius),
        radius,
        angle: rng.random_range(0.0..2.0 * PI),
    }
}

fn paint(
    img: &mut Tensor,
    shape: &Placement,
    color: [f64; 3],
    noise: &Normal<f64>,
    rng: &mut impl Rng,
) {
    let (h, w) = (img.dim(0), img.dim(1));
    for y in 0..h {
        for x in 0..w {
            if shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                let n = noise.sample(rng);
                for (ch, &c) in color.iter().enumerate() {
                    img.set(&[y, x, ch], (c + n).clamp(0.0, 1.0));
                }
            }
        }
    }
}

/// Renders one image containing `class` and returns it with its placement.
fn render(class: ShapeClass, size: usize, rng: &mut impl Rng) -> (Tensor, Placement) {
    let noise = Normal::new(0.0, 0.02).expect("valid std");
    let base = rng.random_range(0.35..0.65);
    let tint: [f64; 3] = [
        rng.random_range(-0.03..0.03),
        rng.random_range(-0.03..0.03),
        rng.random_range(-0.03..0.03),
    ];
    let (fx, fy, phase) = (
        rng.random_range(0.1..0.6),
        rng.random_range(0.1..0.6),
        rng.random_range(0.0..2.0 * PI),
    );
    let mut img = Tensor::zeros(&[size, size, 3]);
    for y in 0..size {
        for x in 0..size {
            let v = base + 0.08 * (fx * x as f64 + fy * y as f64 + phase).sin() + noise.sample(rng);
            for ch in 0..3 {
                img.set(&[y, x, ch], (v + tint[ch]).clamp(0.0, 1.0));
            }
        }
    }
    let distractors = rng.random_range(1..=2);
    for _ in 0..distractors {
        let family = ShapeFamily::ALL[rng.random_range(0..ShapeFamily::ALL.len())];
        let mut color = rng.random_range(0..PALETTE.len() - 1);
        if color >= class.color {
            color += 1;
        }
        let p = random_placement(family, size, rng);
        paint(&mut img, &p, PALETTE[color], &noise, rng);
    }
    let jitter = PALETTE[class.color].map(|c| c + rng.random_range(-0.05..0.05));
    let target = random_placement(class.family, size, rng);
    paint(&mut img, &target, jitter, &noise, rng);
    (img, target)
}

/// Deterministic episode of `class` with `shots` support images.
pub fn synth_episode(
    seed: u64,
    shots: usize,
    size: usize,
    class: ShapeClass,
) -> Result<SynthEpisode> {
    if shots == 0 || size == 0 {
        return Err(VatError::InvalidInput(
            "episodes need at least one shot and a positive size".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut support = Vec::with_capacity(shots);
    let mut support_shapes = Vec::with_capacity(shots);
    for _ in 0..shots {
        let (img, p) = render(class, size, &mut rng);
        support.push((img, p.rasterize(size, size)));
        support_shapes.push(p);
    }
    let (query_image, query_shape) = render(class, size, &mut rng);
    let query_mask = query_shape.rasterize(size, size);
    let sample = EpisodeSample {
        support,
        query_image,
        query_mask,
        class_id: class.id(),
    };
    Ok(SynthEpisode {
        sample,
        query_shape,
        support_shapes,
    })
}

/// Episode `index` of the stream defined by `seed` and `split`; a pure
/// function of its arguments, so large pools need not be held in memory.
///
/// Episodes walk [`Split::classes`] in order from a seed-dependent start,
/// so a pool of `n` episodes holds `min(n, classes)` distinct classes that
/// cover the colours and families evenly.
pub fn episode_at(
    seed: u64,
    index: u64,
    shots: usize,
    size: usize,
    split: Split,
) -> Result<EpisodeSample> {
    let classes = split.classes();
    let start = ChaCha8Rng::seed_from_u64(seed).random_range(0..classes.len());
    let class = classes[(start + (index % classes.len() as u64) as usize) % classes.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    let ep_seed: u64 = rng.random();
    Ok(synth_episode(ep_seed, shots, size, class)?.sample)
}

/// The first `count` episodes of the stream of [`episode_at`].
pub fn episode_set(
    seed: u64,
    count: usize,
    shots: usize,
    size: usize,
    split: Split,
) -> Result<Vec<EpisodeSample>> {
    (0..count as u64)
        .map(|i| episode_at(seed, i, shots, size, split))
        .collect()
}
