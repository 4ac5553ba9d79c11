//! Independent brute-force verifiers: exact uniform samplers over frustums
//! and cylinders, Monte-Carlo expectations with standard errors, and central
//! finite differences. These are the ground-truth side of every property
//! test; nothing here may share a code path with the closed forms it checks.

use crate::geometry::{frustum_contains, ConicalFrustum, GeometryError, Ray};
use crate::vecmath::Vec3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("non-finite loss value {0}")]
    NonFiniteLoss(f64),
}

/// Monte-Carlo estimate with per-component standard errors.
#[derive(Clone, Debug)]
pub struct McEstimate {
    pub mean: Vec<f64>,
    pub standard_error: Vec<f64>,
    pub n_samples: usize,
}

impl McEstimate {
    /// |closed_form - mean| in units of the standard error. A zero standard
    /// error with zero deviation reports 0.
    pub fn deviation_sigmas(&self, component: usize, closed_form: f64) -> f64 {
        let diff = (closed_form - self.mean[component]).abs();
        let se = self.standard_error[component];
        if diff == 0.0 {
            0.0
        } else {
            diff / se.max(f64::MIN_POSITIVE)
        }
    }
}

/// One exact draw from the uniform distribution over a conical frustum.
///
/// Change of variables `(r, t, theta)` with density proportional to
/// `r t^2`: `t` comes from inverting the cubic CDF
/// `(t^3 - t0^3)/(t1^3 - t0^3)`, `r` from sqrt scaling, `theta` uniform.
/// The point is mapped to world space through the ray origin, direction and
/// an orthonormal frame perpendicular to the direction.
pub fn sample_frustum_point(f: &ConicalFrustum, rng: &mut ChaCha8Rng) -> Vec3 {
    let u: f64 = rng.random();
    let t03 = f.t0.powi(3);
    let t13 = f.t1.powi(3);
    let t = (t03 + u * (t13 - t03)).cbrt();
    let r = f.ray.pixel_radius * rng.random::<f64>().sqrt();
    let theta = 2.0 * std::f64::consts::PI * rng.random::<f64>();
    let (e1, e2) = f.ray.direction.orthonormal_basis();
    let radial = r * t;
    f.ray.origin
        + f.ray.direction * t
        + e1 * (radial * theta.cos())
        + e2 * (radial * theta.sin())
}

/// `n` i.i.d. uniform samples inside the frustum.
pub fn sample_frustum_uniform(
    f: &ConicalFrustum,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec3> {
    (0..n).map(|_| sample_frustum_point(f, rng)).collect()
}

/// One exact draw from the uniform distribution over a cylinder of the given
/// radius around the ray segment `[t0, t1]`.
pub fn sample_cylinder_point(
    ray: &Ray,
    radius: f64,
    t0: f64,
    t1: f64,
    rng: &mut ChaCha8Rng,
) -> Vec3 {
    let t = t0 + (t1 - t0) * rng.random::<f64>();
    let r = radius * rng.random::<f64>().sqrt();
    let theta = 2.0 * std::f64::consts::PI * rng.random::<f64>();
    let (e1, e2) = ray.direction.orthonormal_basis();
    ray.origin + ray.direction * t + e1 * (r * theta.cos()) + e2 * (r * theta.sin())
}

/// Rejection sampler against the frustum indicator, used to cross-check the
/// inverse-CDF sampler's distribution. Proposes uniformly inside the bounding
/// cylinder of the frustum.
pub fn sample_frustum_rejection(f: &ConicalFrustum, rng: &mut ChaCha8Rng) -> Vec3 {
    let bound_radius = f.ray.pixel_radius * f.t1;
    loop {
        let p = sample_cylinder_point(&f.ray, bound_radius, f.t0, f.t1, rng);
        if frustum_contains(f, p) {
            return p;
        }
    }
}

/// Sum `values` with a fixed pairwise reduction order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}

/// Monte-Carlo mean and standard error of a vector-valued function under the
/// given sampler. Parallel over fixed-size chunks with a deterministic
/// pairwise reduction, so results do not depend on thread scheduling.
///
/// The sampler receives the chunk's own RNG stream; `dim` is the output
/// dimension of `f`.
pub fn mc_expectation<S, F>(
    seed: u64,
    stream_tag: u64,
    n: usize,
    dim: usize,
    sampler: S,
    f: F,
) -> Result<McEstimate, OracleError>
where
    S: Fn(&mut ChaCha8Rng) -> Vec3 + Sync,
    F: Fn(Vec3, &mut [f64]) + Sync,
{
    if n < 2 {
        return Err(OracleError::TooFewSamples(n));
    }
    const CHUNK: usize = 16_384;
    let n_chunks = n.div_ceil(CHUNK);
    let partials: Vec<(Vec<f64>, Vec<f64>, usize)> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let lo = chunk * CHUNK;
            let hi = ((chunk + 1) * CHUNK).min(n);
            let mut rng = crate::rng::stream_rng(seed, &[crate::rng::stream::ORACLE, stream_tag, chunk as u64]);
            let mut sums = vec![0.0f64; dim];
            let mut sq_sums = vec![0.0f64; dim];
            let mut buf = vec![0.0f64; dim];
            for _ in lo..hi {
                let x = sampler(&mut rng);
                f(x, &mut buf);
                for (k, &v) in buf.iter().enumerate() {
                    sums[k] += v;
                    sq_sums[k] += v * v;
                }
            }
            (sums, sq_sums, hi - lo)
        })
        .collect();

    let mut mean = vec![0.0f64; dim];
    let mut se = vec![0.0f64; dim];
    for k in 0..dim {
        let sums: Vec<f64> = partials.iter().map(|p| p.0[k]).collect();
        let sqs: Vec<f64> = partials.iter().map(|p| p.1[k]).collect();
        let s = pairwise_sum(&sums);
        let s2 = pairwise_sum(&sqs);
        let nf = n as f64;
        let m = s / nf;
        let var = (s2 / nf - m * m).max(0.0);
        mean[k] = m;
        se[k] = (var / (nf - 1.0)).sqrt();
    }
    Ok(McEstimate { mean, standard_error: se, n_samples: n })
}

/// Central finite differences of a scalar loss with respect to the selected
/// parameter indices.
///
/// `get`/`set` expose the flat parameter vector; the closure is re-evaluated
/// with each index displaced by `±h` and restored afterwards.
pub fn finite_diff_gradient<L, G, S>(
    mut loss: L,
    get: G,
    mut set: S,
    indices: &[usize],
    h: f64,
) -> Result<Vec<f64>, OracleError>
where
    L: FnMut() -> f64,
    G: Fn(usize) -> f64,
    S: FnMut(usize, f64),
{
    let mut grads = Vec::with_capacity(indices.len());
    for &idx in indices {
        let x0 = get(idx);
        set(idx, x0 + h);
        let fp = loss();
        set(idx, x0 - h);
        let fm = loss();
        set(idx, x0);
        if !fp.is_finite() || !fm.is_finite() {
            return Err(OracleError::NonFiniteLoss(if fp.is_finite() { fm } else { fp }));
        }
        grads.push((fp - fm) / (2.0 * h));
    }
    Ok(grads)
}
