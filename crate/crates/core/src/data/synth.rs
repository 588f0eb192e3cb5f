//! Deterministic phantom generator.
//!
//! Each case has a smooth, noisy background, one large rotated ellipsoid
//! (class 1), one to four small spheres (class 2) kept apart from it, and a
//! couple of unlabeled distractor blobs. Intensities, poses and sizes are
//! drawn per case so that appearance alone does not separate the classes.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::grid::{Grid, LabelMap, Volume};
use crate::error::{Error, Result};
use crate::tensor::{voxel_count, Dims3};

pub const MIN_EXTENT: usize = 16;

const SMOOTHING_SIGMA: f64 = 1.0;
const NOISE_STD: f64 = 0.25;
const BIAS_AMPLITUDE: f64 = 0.15;
/// Empty voxels required between a lesion sphere and any other structure.
const CLEARANCE: f64 = 2.0;

/// One synthetic case.
pub fn generate_case(dims: Dims3, seed: u64) -> Result<(Volume, LabelMap)> {
    if dims.iter().any(|&d| d < MIN_EXTENT) {
        return Err(Error::Input(format!(
            "synthetic volumes need at least {MIN_EXTENT} voxels per axis, got {dims:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extent = *dims.iter().min().expect("three axes") as f64;
    let n = voxel_count(dims);
    let mut labels = vec![0u8; n];
    let mut shade = vec![0.0f64; n];

    let body = Ellipsoid::random(dims, extent, &mut rng);
    let body_level = rng.gen_range(0.7..1.1);
    paint(dims, &mut labels, &mut shade, 1, body_level, |p| body.contains(p));

    let lesions = rng.gen_range(1..=4);
    let mut placed = 0;
    let mut attempts = 0;
    while placed < lesions && attempts < 400 {
        attempts += 1;
        // keep at least one lesion even on cramped grids
        let shrink = if attempts > 200 { 0.5 } else { 1.0 };
        let radius = (extent * rng.gen_range(0.045..0.08) * shrink).max(0.75);
        let centre: [f64; 3] = std::array::from_fn(|a| {
            let margin = radius + 1.0;
            rng.gen_range(margin..dims[a] as f64 - 1.0 - margin)
        });
        let reach = radius + CLEARANCE;
        if touches(dims, &labels, centre, reach) {
            continue;
        }
        let level = rng.gen_range(0.7..1.2);
        paint(dims, &mut labels, &mut shade, 2, level, |p| {
            dist2(p, centre) <= radius * radius
        });
        placed += 1;
    }
    if placed == 0 {
        return Err(Error::Dataset(format!("no room for a lesion in a {dims:?} grid")));
    }

    // unlabeled look-alikes: same intensity range, elongated, no label
    for _ in 0..rng.gen_range(1..=2) {
        let blob = Ellipsoid::random_small(dims, extent, &mut rng);
        let level = rng.gen_range(0.5..0.9);
        for (i, s) in shade.iter_mut().enumerate() {
            if labels[i] == 0 && blob.contains(position(dims, i)) {
                *s = s.max(level);
            }
        }
    }

    let mut image = gaussian_smooth(dims, &shade, SMOOTHING_SIGMA);
    let bias = BiasField::random(&mut rng);
    for (i, v) in image.iter_mut().enumerate() {
        let noise: f64 = StandardNormal.sample(&mut rng);
        *v += bias.at(position(dims, i), extent) + NOISE_STD * noise;
    }

    let volume = Grid::new(dims, [1.0; 3], image.into_iter().map(|v| v as f32).collect())?;
    let labels = Grid::new(dims, [1.0; 3], labels)?;
    Ok((volume, labels))
}

fn position(dims: Dims3, i: usize) -> [f64; 3] {
    let x = i % dims[2];
    let y = (i / dims[2]) % dims[1];
    let z = i / (dims[1] * dims[2]);
    [z as f64, y as f64, x as f64]
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

fn paint(dims: Dims3, labels: &mut [u8], shade: &mut [f64], class: u8, level: f64, inside: impl Fn([f64; 3]) -> bool) {
    for (i, (l, s)) in labels.iter_mut().zip(shade.iter_mut()).enumerate() {
        if inside(position(dims, i)) {
            *l = class;
            *s = level;
        }
    }
}

/// Whether any labelled voxel lies within `reach` of `centre`.
fn touches(dims: Dims3, labels: &[u8], centre: [f64; 3], reach: f64) -> bool {
    let lo = |a: usize| (centre[a] - reach).floor().max(0.0) as usize;
    let hi = |a: usize| ((centre[a] + reach).ceil() as usize).min(dims[a] - 1);
    for z in lo(0)..=hi(0) {
        for y in lo(1)..=hi(1) {
            for x in lo(2)..=hi(2) {
                let p = [z as f64, y as f64, x as f64];
                if labels[(z * dims[1] + y) * dims[2] + x] != 0 && dist2(p, centre) <= reach * reach {
                    return true;
                }
            }
        }
    }
    false
}

struct Ellipsoid {
    centre: [f64; 3],
    radii: [f64; 3],
    /// Rows are the principal axes.
    axes: [[f64; 3]; 3],
}

impl Ellipsoid {
    fn random<R: Rng>(dims: Dims3, extent: f64, rng: &mut R) -> Self {
        Self {
            centre: std::array::from_fn(|a| dims[a] as f64 * rng.gen_range(0.38..0.62)),
            radii: std::array::from_fn(|_| extent * rng.gen_range(0.13..0.22)),
            axes: random_rotation(rng),
        }
    }

    fn random_small<R: Rng>(dims: Dims3, extent: f64, rng: &mut R) -> Self {
        let long = extent * rng.gen_range(0.06..0.1);
        let short = extent * rng.gen_range(0.025..0.045);
        Self {
            centre: std::array::from_fn(|a| dims[a] as f64 * rng.gen_range(0.15..0.85)),
            radii: [long, short, short],
            axes: random_rotation(rng),
        }
    }

    fn local(&self, p: [f64; 3]) -> [f64; 3] {
        let d = [p[0] - self.centre[0], p[1] - self.centre[1], p[2] - self.centre[2]];
        std::array::from_fn(|k| (0..3).map(|j| self.axes[k][j] * d[j]).sum())
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        let q = self.local(p);
        (0..3).map(|k| (q[k] / self.radii[k]).powi(2)).sum::<f64>() <= 1.0
    }
}

fn random_rotation<R: Rng>(rng: &mut R) -> [[f64; 3]; 3] {
    // uniform unit quaternion
    let mut q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    q.iter_mut().for_each(|v| *v /= norm);
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

struct BiasField {
    offset: f64,
    waves: Vec<([f64; 3], f64)>,
}

impl BiasField {
    fn random<R: Rng>(rng: &mut R) -> Self {
        let waves = (0..3)
            .map(|_| {
                let f: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.5..1.5));
                (f, rng.gen_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        Self {
            offset: rng.gen_range(-0.1..0.1),
            waves,
        }
    }

    fn at(&self, p: [f64; 3], extent: f64) -> f64 {
        let waves: f64 = self
            .waves
            .iter()
            .map(|(f, phase)| {
                let arg = (0..3).map(|k| f[k] * p[k]).sum::<f64>() / extent * std::f64::consts::TAU;
                (arg + phase).cos()
            })
            .sum();
        self.offset + BIAS_AMPLITUDE * waves / self.waves.len() as f64
    }
}

/// Separable Gaussian filter with edge replication.
pub fn gaussian_smooth(dims: Dims3, data: &[f64], sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut cur = data.to_vec();
    let mut next = vec![0.0; cur.len()];
    for axis in 0..3 {
        let len = dims[axis] as isize;
        let stride = strides[axis];
        for (i, out) in next.iter_mut().enumerate() {
            let coord = ((i / stride) % dims[axis]) as isize;
            let base = i - coord as usize * stride;
            *out = kernel
                .iter()
                .enumerate()
                .map(|(j, k)| {
                    let c = (coord + j as isize - radius).clamp(0, len - 1) as usize;
                    k * cur[base + c * stride]
                })
                .sum();
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}
