//! Synthetic data generation: random-ellipse phantoms, measurement noise,
//! the adversarial high-intensity disc, and seeded train/val/test datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use thiserror::Error;

use crate::grid::{mean, Grid, Image, Sinogram};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("disc outside image: {0}")]
    DiscOutsideImage(String),
}

/// SplitMix64 seed derivation; used to give every split and every item its
/// own independent RNG stream.
pub fn derive_seed(master: u64, stream: u64, item: u64) -> u64 {
    let mut x = master
        .wrapping_add(stream.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(item.wrapping_mul(0xbf58476d1ce4e5b9));
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos_t: f64,
    sin_t: f64,
    intensity: f64,
}

impl Ellipse {
    #[inline]
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let xr = self.cos_t * dx + self.sin_t * dy;
        let yr = -self.sin_t * dx + self.cos_t * dy;
        (xr / self.a).powi(2) + (yr / self.b).powi(2) <= 1.0
    }
}

/// Random phantom: a background ellipse carrying `k` random ellipses, with
/// k drawn from `k_range`. Values are clipped at 0 and rescaled to [0,1];
/// the support stays inside the radius-0.95 disc.
pub fn random_phantom(rng: &mut impl Rng, n: usize, k_range: (usize, usize)) -> Image {
    assert!(n >= 8);
    let background = Ellipse {
        cx: rng.gen_range(-0.05..0.05),
        cy: rng.gen_range(-0.05..0.05),
        a: rng.gen_range(0.6..0.88),
        b: rng.gen_range(0.6..0.88),
        cos_t: 1.0,
        sin_t: 0.0,
        intensity: rng.gen_range(0.2..0.4),
    };
    let k = rng.gen_range(k_range.0..=k_range.1);
    let inner: Vec<Ellipse> = (0..k)
        .map(|_| {
            // center uniform in the radius-0.8 disc
            let r = 0.8 * rng.gen_range(0.0f64..1.0).sqrt();
            let phi = rng.gen_range(0.0..std::f64::consts::TAU);
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            Ellipse {
                cx: r * phi.cos(),
                cy: r * phi.sin(),
                a: rng.gen_range(0.05..0.6),
                b: rng.gen_range(0.05..0.6),
                cos_t: theta.cos(),
                sin_t: theta.sin(),
                intensity: rng.gen_range(-0.4..0.6),
            }
        })
        .collect();
    let mut img = Image::zeros(n);
    let mut max = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let (x, y) = img.pixel_center(i, j);
            // all mass lives on the background ellipse, so the support is
            // bounded by its axes (< 0.95 with the centering above)
            if !background.contains(x, y) {
                continue;
            }
            let mut v = background.intensity;
            for e in &inner {
                if e.contains(x, y) {
                    v += e.intensity;
                }
            }
            let v = v.max(0.0);
            max = max.max(v);
            *img.at_mut(i, j) = v;
        }
    }
    if max > 0.0 {
        for v in img.values_mut() {
            *v /= max;
        }
    }
    img
}

/// y + level * mean(y) * delta with delta i.i.d. standard normal per bin.
/// A level of 0 returns the input unchanged, bit for bit.
pub fn add_noise(y: &Sinogram, level: f64, rng: &mut impl Rng) -> Sinogram {
    assert!(level >= 0.0);
    if level == 0.0 {
        return y.clone();
    }
    let sigma = level * mean(y);
    let values = y
        .values()
        .iter()
        .map(|&v| {
            let delta: f64 = rng.sample(StandardNormal);
            v + sigma * delta
        })
        .collect();
    Sinogram::same_shape(y, values)
}

/// Overwrite (not add) every pixel whose center lies inside the disc.
pub fn add_disc(
    u: &Image,
    center: (f64, f64),
    radius: f64,
    intensity: f64,
) -> Result<Image, PhantomError> {
    let (cx, cy) = center;
    if cx - radius < -1.0 || cx + radius > 1.0 || cy - radius < -1.0 || cy + radius > 1.0 {
        return Err(PhantomError::DiscOutsideImage(format!(
            "center ({cx}, {cy}), radius {radius}"
        )));
    }
    let mut out = u.clone();
    let n = u.side();
    for i in 0..n {
        for j in 0..n {
            let (x, y) = u.pixel_center(i, j);
            if (x - cx).powi(2) + (y - cy).powi(2) <= radius * radius {
                *out.at_mut(i, j) = intensity;
            }
        }
    }
    Ok(out)
}

pub const DEFAULT_DISC_RADIUS: f64 = 0.08;
pub const DEFAULT_DISC_INTENSITY: f64 = 1.0;
/// Placed off-center in a typically low-variation region of the phantoms.
pub const DEFAULT_DISC_CENTER: (f64, f64) = (0.35, 0.35);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for DatasetCounts {
    fn default() -> Self {
        DatasetCounts {
            train: 400,
            val: 50,
            test: 50,
        }
    }
}

fn generate_split(master: u64, stream: u64, count: usize, n: usize) -> Vec<Image> {
    let make = |i: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master, stream, i as u64));
        random_phantom(&mut rng, n, (3, 12))
    };
    #[cfg(feature = "parallel")]
    return (0..count).into_par_iter().map(make).collect();
    #[cfg(not(feature = "parallel"))]
    (0..count).map(make).collect()
}

/// Three disjointly seeded phantom lists (train, val, test), deterministic
/// per master seed.
pub fn make_dataset(
    master_seed: u64,
    counts: DatasetCounts,
    n: usize,
) -> (Vec<Image>, Vec<Image>, Vec<Image>) {
    (
        generate_split(master_seed, 0, counts.train, n),
        generate_split(master_seed, 1, counts.val, n),
        generate_split(master_seed, 2, counts.test, n),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn phantom_values_within_unit_interval_and_supported_inside_disc() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = random_phantom(&mut rng, 64, (3, 12));
            assert!(img.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let n = img.side();
            for i in 0..n {
                for j in 0..n {
                    let (x, y) = img.pixel_center(i, j);
                    if x * x + y * y > 0.95 * 0.95 {
                        assert_eq!(img.at(i, j), 0.0, "pixel ({i},{j}) outside support");
                    }
                }
            }
        }
    }

    #[test]
    fn phantom_is_deterministic_per_seed() {
        let a = random_phantom(&mut ChaCha8Rng::seed_from_u64(7), 32, (3, 12));
        let b = random_phantom(&mut ChaCha8Rng::seed_from_u64(7), 32, (3, 12));
        assert_eq!(a, b);
    }

    #[test]
    fn zero_noise_level_is_bit_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = Sinogram::from_values(4, 10, (0..40).map(|v| v as f64).collect()).unwrap();
        let out = add_noise(&y, 0.0, &mut rng);
        assert_eq!(y, out);
    }

    #[test]
    fn noise_statistics_match_the_requested_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bins = 10_000;
        let y = Sinogram::from_values(100, 100, vec![0.8; bins]).unwrap();
        let level = 0.05;
        let noisy = add_noise(&y, level, &mut rng);
        let diffs: Vec<f64> = noisy
            .values()
            .iter()
            .zip(y.values())
            .map(|(a, b)| a - b)
            .collect();
        let m = diffs.iter().sum::<f64>() / bins as f64;
        let std = (diffs.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / bins as f64).sqrt();
        let expected = level * mean(&y);
        assert!((std - expected).abs() <= 0.05 * expected, "std {std}");
        // zero-mean: |mean| within 3 standard errors
        assert!(m.abs() <= 3.0 * expected / (bins as f64).sqrt(), "mean {m}");
    }

    #[test]
    fn disc_overwrites_inside_and_leaves_outside() {
        let base = Image::from_values(64, vec![0.2; 64 * 64]).unwrap();
        let out = add_disc(&base, (0.3, -0.1), 0.15, 1.0).unwrap();
        // pixel nearest the disc center
        let n = 64;
        let h = 2.0 / n as f64;
        let jc = ((0.3f64 + 1.0) / h - 0.5).round() as usize;
        let ic = ((-0.1f64 + 1.0) / h - 0.5).round() as usize;
        assert_eq!(out.at(ic, jc), 1.0);
        // a pixel two radii away is untouched
        let jf = ((0.3f64 + 2.0 * 0.15 + 0.1 + 1.0) / h - 0.5).round() as usize;
        assert_eq!(out.at(ic, jf), 0.2);
    }

    #[test]
    fn disc_area_matches_pixel_count_oracle() {
        let n = 128;
        let base = Image::zeros(n);
        let r = 0.3;
        let out = add_disc(&base, (0.0, 0.0), r, 1.0).unwrap();
        let pixel_area = (2.0 / n as f64).powi(2);
        let count = out.values().iter().filter(|&&v| v == 1.0).count();
        let measured = count as f64 * pixel_area;
        let tolerance = 2.0 * PI * r * 2.0 * (2.0 / n as f64); // boundary band
        assert!((measured - PI * r * r).abs() <= tolerance);
    }

    #[test]
    fn disc_outside_image_is_an_error() {
        let base = Image::zeros(32);
        assert!(add_disc(&base, (0.95, 0.0), 0.2, 1.0).is_err());
    }

    #[test]
    fn dataset_counts_streams_and_determinism() {
        let counts = DatasetCounts {
            train: 6,
            val: 3,
            test: 3,
        };
        let (tr, va, te) = make_dataset(99, counts, 32);
        assert_eq!((tr.len(), va.len(), te.len()), (6, 3, 3));
        // disjoint streams: no test phantom reproduces a training phantom
        for t in &te {
            assert!(tr.iter().all(|u| u != t));
        }
        let (tr2, va2, te2) = make_dataset(99, counts, 32);
        assert_eq!(tr, tr2);
        assert_eq!(va, va2);
        assert_eq!(te, te2);
    }
}
