use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn jitter(noise: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, noise).map_err(|e| Error::InvalidArgument(format!("noise {noise}: {e}")))
}

fn shuffled(name: &str, points: Vec<([f64; 2], usize)>, classes: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let mut points = points;
    points.shuffle(rng);
    let n = points.len();
    let data = points.iter().flat_map(|(p, _)| *p).collect();
    let labels = points.iter().map(|(_, l)| *l).collect();
    Dataset::new(name, Tensor::new(vec![n, 2], data)?, labels, classes)
}

/// Two interleaved unit half-circles, centred at `(0, 0)` (upper, class 0)
/// and `(1, 0.5)` (lower, class 1), with isotropic Gaussian jitter.
pub fn two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("two_moons needs n >= 2, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = jitter(noise)?;
    let n0 = n / 2;
    let n1 = n - n0;
    let angle = |i: usize, m: usize| if m > 1 { PI * i as f64 / (m - 1) as f64 } else { 0.0 };
    let mut points = Vec::with_capacity(n);
    for i in 0..n0 {
        let t = angle(i, n0);
        points.push(([t.cos(), t.sin()], 0));
    }
    for i in 0..n1 {
        let t = angle(i, n1);
        points.push(([1.0 - t.cos(), 0.5 - t.sin()], 1));
    }
    for (p, _) in points.iter_mut() {
        p[0] += jitter.sample(&mut rng);
        p[1] += jitter.sample(&mut rng);
    }
    shuffled("two_moons", points, 2, &mut rng)
}

/// `classes` isotropic clusters with centres evenly spaced on a radius-2 circle.
pub fn gaussians(n: usize, classes: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 || classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "gaussians needs n >= 2 and classes >= 2, got n={n}, classes={classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = jitter(noise)?;
    let points = (0..n)
        .map(|i| {
            let c = i % classes;
            let a = 2.0 * PI * c as f64 / classes as f64;
            let p = [
                2.0 * a.cos() + jitter.sample(&mut rng),
                2.0 * a.sin() + jitter.sample(&mut rng),
            ];
            (p, c)
        })
        .collect();
    shuffled("gaussians", points, classes, &mut rng)
}

/// Named synthetic dataset; `gaussians` uses three clusters.
pub fn synthetic(name: &str, n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    match name {
        "two_moons" => two_moons(n, noise, seed),
        "gaussians" => gaussians(n, 3, noise, seed),
        other => Err(Error::Config(format!("unknown synthetic dataset `{other}`"))),
    }
}
