//! The self-verification registry behind the `verify` subcommand.
//!
//! Every closed-form formula in the geometry and encoding modules is checked
//! here against an independent brute-force oracle (Monte Carlo sampling,
//! exact rationals, scalar re-evaluation loops, finite differences, or
//! fine-grid integration), each by exactly one registered check; the
//! coverage audit test at the bottom enforces that accounting. Monte-Carlo
//! tolerances are stated in standard errors so sample counts can shrink on
//! slow machines without invalidating the thresholds.

use crate::encoding::{
    concat_positional_encode, expected_trig, integrated_positional_encode, positional_encode,
};
use crate::field::ModelSpec;
use crate::geometry::{
    cylinder_moments, frustum_moments_naive, frustum_moments_stable, frustum_to_gaussian_full,
    ConicalFrustum, FrustumMoments, GaussianRegion, Ray,
};
use crate::oracle::pairwise_sum;
use crate::renderer::{
    composite, trace_ray, FieldModel, FieldParams, RayRngKey, RenderConfig, SpatialEncoder,
};
use crate::rng::{stream, stream_rng};
use crate::vecmath::Vec3;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::path::Path;

/// One verification result, exactly the documented report schema.
#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub check: String,
    pub statistic: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckOutcome {
    fn new(check: &str, statistic: f64, tolerance: f64) -> Self {
        CheckOutcome {
            check: check.to_string(),
            statistic,
            tolerance,
            pass: statistic.is_finite() && statistic <= tolerance,
        }
    }
}

/// Deliberate formula corruptions for exercising the harness itself: a
/// mutated run must fail its moment check.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mutation {
    /// Flip the sign of the axial variance.
    SigmaT2SignFlip,
}

impl Mutation {
    pub fn parse(name: &str) -> Option<Mutation> {
        match name {
            "sigma-t2-sign" => Some(Mutation::SigmaT2SignFlip),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct VerifyConfig {
    pub seed: u64,
    /// Monte-Carlo draws per case.
    pub mc_samples: usize,
    /// Randomized frustum cases for the moment check.
    pub frustum_cases: usize,
    /// Random Gaussian regions for the IPE expectation check.
    pub ipe_cases: usize,
    /// Parameters probed by the end-to-end finite-difference check.
    pub fd_params: usize,
    pub mutation: Option<Mutation>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            seed: 0,
            mc_samples: 1_000_000,
            frustum_cases: 100,
            ipe_cases: 50,
            fd_params: 208,
            mutation: None,
        }
    }
}

/// Closed forms that must each be covered by exactly one registered check.
pub const CLOSED_FORMS: &[&str] = &[
    "frustum_mu_t",
    "frustum_sigma_t2",
    "frustum_sigma_r2",
    "frustum_moments_naive",
    "world_gaussian_diag",
    "cylinder_moments",
    "frustum_indicator",
    "expected_sin",
    "expected_cos",
    "ipe_attenuation",
    "ipe_point_limit",
    "pe_layout",
    "concat_pe",
];

struct CheckDef {
    name: &'static str,
    covers: &'static [&'static str],
    run: fn(&VerifyConfig) -> CheckOutcome,
}

const REGISTRY: &[CheckDef] = &[
    CheckDef {
        name: "frustum_moments_mc",
        covers: &["frustum_mu_t", "frustum_sigma_t2", "frustum_sigma_r2"],
        run: check_frustum_moments_mc,
    },
    CheckDef {
        name: "moments_stable_exact",
        covers: &[],
        run: check_moments_stable_exact,
    },
    CheckDef {
        name: "moments_stable_degenerate",
        covers: &[],
        run: check_moments_stable_degenerate,
    },
    CheckDef {
        name: "moments_stable_vs_naive",
        covers: &["frustum_moments_naive"],
        run: check_moments_stable_vs_naive,
    },
    CheckDef {
        name: "gaussian_diag_explicit",
        covers: &["world_gaussian_diag"],
        run: check_gaussian_diag_explicit,
    },
    CheckDef {
        name: "cylinder_moments_mc",
        covers: &["cylinder_moments"],
        run: check_cylinder_moments_mc,
    },
    CheckDef {
        name: "frustum_sampler_chi2",
        covers: &["frustum_indicator"],
        run: check_frustum_sampler_chi2,
    },
    CheckDef {
        name: "expected_trig_mc",
        covers: &["expected_sin", "expected_cos"],
        run: check_expected_trig_mc,
    },
    CheckDef {
        name: "ipe_mc",
        covers: &["ipe_attenuation"],
        run: check_ipe_mc,
    },
    CheckDef {
        name: "ipe_point_limit",
        covers: &["ipe_point_limit"],
        run: check_ipe_point_limit,
    },
    CheckDef {
        name: "pe_scalar_loop",
        covers: &["pe_layout"],
        run: check_pe_scalar_loop,
    },
    CheckDef {
        name: "concat_pe_scalar_loop",
        covers: &["concat_pe"],
        run: check_concat_pe_scalar_loop,
    },
    CheckDef {
        name: "quadrature_closed_form",
        covers: &[],
        run: check_quadrature_closed_form,
    },
    CheckDef {
        name: "quadrature_fine_grid",
        covers: &[],
        run: check_quadrature_fine_grid,
    },
    CheckDef {
        name: "blurpool_hand_case",
        covers: &[],
        run: check_blurpool_hand_case,
    },
    CheckDef {
        name: "fd_gradient_full_pipeline",
        covers: &[],
        run: check_fd_gradient_full_pipeline,
    },
];

pub fn check_names() -> Vec<&'static str> {
    REGISTRY.iter().map(|c| c.name).collect()
}

/// The coverage manifest: which closed forms each check is the oracle for.
pub fn coverage() -> Vec<(&'static str, &'static [&'static str])> {
    REGISTRY.iter().map(|c| (c.name, c.covers)).collect()
}

/// Run every registered check.
pub fn run_all(cfg: &VerifyConfig) -> Vec<CheckOutcome> {
    REGISTRY.iter().map(|c| (c.run)(cfg)).collect()
}

/// Run one named check (used by the mutation harness and tests).
pub fn run_one(name: &str, cfg: &VerifyConfig) -> Option<CheckOutcome> {
    REGISTRY.iter().find(|c| c.name == name).map(|c| (c.run)(cfg))
}

#[derive(Serialize)]
struct Report<'a> {
    seed: u64,
    mc_samples: usize,
    checks: &'a [CheckOutcome],
}

pub fn write_report(path: &Path, cfg: &VerifyConfig, outcomes: &[CheckOutcome]) -> std::io::Result<()> {
    let report = Report { seed: cfg.seed, mc_samples: cfg.mc_samples, checks: outcomes };
    std::fs::write(path, serde_json::to_string_pretty(&report).expect("serializable"))
}

/// Validate a report against the documented schema: a `seed` integer, an
/// `mc_samples` integer, and a `checks` array whose entries carry exactly
/// `check` (string), `statistic` (number), `tolerance` (number), `pass`
/// (bool).
pub fn report_schema_ok(json: &str) -> bool {
    let Ok(v) = serde_json::from_str::<serde_json::Value>(json) else {
        return false;
    };
    let Some(obj) = v.as_object() else { return false };
    if !obj.get("seed").is_some_and(|s| s.is_u64()) {
        return false;
    }
    if !obj.get("mc_samples").is_some_and(|s| s.is_u64()) {
        return false;
    }
    let Some(checks) = obj.get("checks").and_then(|c| c.as_array()) else {
        return false;
    };
    checks.iter().all(|c| {
        c.as_object().is_some_and(|o| {
            o.len() == 4
                && o.get("check").is_some_and(|x| x.is_string())
                && o.get("statistic").is_some_and(|x| x.is_number())
                && o.get("tolerance").is_some_and(|x| x.is_number())
                && o.get("pass").is_some_and(|x| x.is_boolean())
        })
    })
}

fn moments_with_mutation(cfg: &VerifyConfig, t0: f64, t1: f64) -> FrustumMoments {
    let mut m = frustum_moments_stable(t0, t1).expect("valid interval");
    if cfg.mutation == Some(Mutation::SigmaT2SignFlip) {
        m.sigma_t2 = -m.sigma_t2;
    }
    m
}

/// Sampled moments of `(t - t_mu)/t_mu` and of the perpendicular coordinate
/// normalized by `pixel_radius * t_mu`, with enough fourth-moment
/// information to put standard errors on the variance estimates.
struct MomentStats {
    mean_u: f64,
    se_u: f64,
    var_u: f64,
    se_var_u: f64,
    mean_x2: f64,
    se_x2: f64,
}

fn sample_normalized_moments(
    seed: u64,
    tag: u64,
    n: usize,
    t0: f64,
    t1: f64,
    radius: f64,
    cylinder: bool,
) -> MomentStats {
    let t_mu = 0.5 * (t0 + t1);
    const CHUNK: usize = 65_536;
    let n_chunks = n.div_ceil(CHUNK);
    let t03 = t0.powi(3);
    let t13 = t1.powi(3);
    let partials: Vec<[f64; 7]> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let lo = chunk * CHUNK;
            let hi = ((chunk + 1) * CHUNK).min(n);
            let mut rng = stream_rng(seed, &[stream::ORACLE, tag, chunk as u64]);
            let mut acc = [0.0f64; 7];
            for _ in lo..hi {
                let t = if cylinder {
                    t0 + (t1 - t0) * rng.random::<f64>()
                } else {
                    (t03 + rng.random::<f64>() * (t13 - t03)).cbrt()
                };
                let r = radius * rng.random::<f64>().sqrt();
                let theta = 2.0 * std::f64::consts::PI * rng.random::<f64>();
                // Perpendicular coordinate: the cone's radius grows with t,
                // a cylinder's does not.
                let x = if cylinder { r * theta.cos() } else { r * t * theta.cos() };
                let u = (t - t_mu) / t_mu;
                let xn = x / (radius * t_mu);
                let u2 = u * u;
                acc[0] += u;
                acc[1] += u2;
                acc[2] += u2 * u;
                acc[3] += u2 * u2;
                let x2 = xn * xn;
                acc[4] += x2;
                acc[5] += x2 * x2;
                acc[6] += 1.0;
            }
            acc
        })
        .collect();
    let mut sums = [0.0f64; 7];
    for k in 0..7 {
        let col: Vec<f64> = partials.iter().map(|p| p[k]).collect();
        sums[k] = pairwise_sum(&col);
    }
    let nf = sums[6];
    let m1 = sums[0] / nf;
    let m2r = sums[1] / nf;
    let m3r = sums[2] / nf;
    let m4r = sums[3] / nf;
    let var_u = (m2r - m1 * m1).max(0.0);
    // Central fourth moment from raw moments.
    let m4c = m4r - 4.0 * m1 * m3r + 6.0 * m1 * m1 * m2r - 3.0 * m1.powi(4);
    let mean_x2 = sums[4] / nf;
    let m4x = sums[5] / nf;
    MomentStats {
        mean_u: m1,
        se_u: (var_u / nf).sqrt(),
        var_u,
        se_var_u: ((m4c - var_u * var_u).max(0.0) / nf).sqrt(),
        mean_x2,
        se_x2: ((m4x - mean_x2 * mean_x2).max(0.0) / nf).sqrt(),
    }
}

/// Deviation between a closed-form value and an MC estimate, in standard
/// errors.
fn sigmas(closed: f64, mc: f64, se: f64) -> f64 {
    let diff = (closed - mc).abs();
    if diff == 0.0 {
        0.0
    } else {
        diff / se.max(f64::MIN_POSITIVE)
    }
}

fn check_frustum_moments_mc(cfg: &VerifyConfig) -> CheckOutcome {
    let mut rng = stream_rng(cfg.seed, &[stream::ORACLE, 1]);
    let mut worst = 0.0f64;
    for case in 0..cfg.frustum_cases {
        let t_mu = 10f64.powf(rng.random_range(-1.0..2.0));
        let ratio = 10f64.powf(rng.random_range(-3.0..0.0));
        let t_delta = ratio * t_mu * 0.999_999;
        let (t0, t1) = (t_mu - t_delta, t_mu + t_delta);
        let radius = 10f64.powf(rng.random_range(-3.0..0.2f64.log10())) * t_mu;
        let m = moments_with_mutation(cfg, t0, t1);
        let stats = sample_normalized_moments(
            cfg.seed,
            1000 + case as u64,
            cfg.mc_samples,
            t0,
            t1,
            radius,
            false,
        );
        // Closed forms in the same normalized units as the samples.
        let mu_n = (m.mu_t - t_mu) / t_mu;
        let var_n = m.sigma_t2 / (t_mu * t_mu);
        let x2_n = m.sigma_r2 / (t_mu * t_mu); // unit pixel radius, normalized by t_mu
        worst = worst
            .max(sigmas(mu_n, stats.mean_u, stats.se_u))
            .max(sigmas(var_n, stats.var_u, stats.se_var_u))
            .max(sigmas(x2_n, stats.mean_x2, stats.se_x2));
        let _ = radius; // the normalized perpendicular moment cancels it
    }
    CheckOutcome::new("frustum_moments_mc", worst, 5.0)
}

fn check_moments_stable_exact(_cfg: &VerifyConfig) -> CheckOutcome {
    // t0=1, t1=2: E[t] = 45/28, E[t^2] = 93/35, E[x^2] = 93/140.
    let m = frustum_moments_stable(1.0, 2.0).expect("valid");
    let mu = 45.0 / 28.0;
    let var = 93.0 / 35.0 - mu * mu;
    let x2 = 93.0 / 140.0;
    let stat = ((m.mu_t - mu) / mu)
        .abs()
        .max(((m.sigma_t2 - var) / var).abs())
        .max(((m.sigma_r2 - x2) / x2).abs());
    CheckOutcome::new("moments_stable_exact", stat, 1e-9)
}

fn check_moments_stable_degenerate(_cfg: &VerifyConfig) -> CheckOutcome {
    // Finite and near the disk limit down to half-width ratios of 1e-12,
    // where the naive form is permitted to fail.
    let mut stat = 0.0f64;
    for t_mu in [0.1, 1.0, 37.0, 100.0] {
        let t_delta = 1e-12 * t_mu;
        match frustum_moments_stable(t_mu - t_delta, t_mu + t_delta) {
            Ok(m) if m.mu_t.is_finite() && m.sigma_t2.is_finite() && m.sigma_r2.is_finite() => {
                stat = stat
                    .max((m.mu_t / t_mu - 1.0).abs())
                    .max((m.sigma_r2 / (t_mu * t_mu / 4.0) - 1.0).abs());
            }
            _ => return CheckOutcome::new("moments_stable_degenerate", f64::INFINITY, 1e-6),
        }
    }
    CheckOutcome::new("moments_stable_degenerate", stat, 1e-6)
}

fn check_moments_stable_vs_naive(cfg: &VerifyConfig) -> CheckOutcome {
    let mut rng = stream_rng(cfg.seed, &[stream::ORACLE, 2]);
    let mut stat = 0.0f64;
    for _ in 0..200 {
        let t_mu = 10f64.powf(rng.random_range(-1.0..2.0));
        let ratio = 10f64.powf(rng.random_range(-2.0..0.0));
        let t_delta = ratio * t_mu * 0.999_999;
        let (t0, t1) = (t_mu - t_delta, t_mu + t_delta);
        let a = frustum_moments_stable(t0, t1).expect("valid");
        let b = frustum_moments_naive(t0, t1).expect("valid");
        stat = stat
            .max(((a.mu_t - b.mu_t) / a.mu_t).abs())
            .max(((a.sigma_t2 - b.sigma_t2) / a.sigma_t2).abs())
            .max(((a.sigma_r2 - b.sigma_r2) / a.sigma_r2).abs());
    }
    CheckOutcome::new("moments_stable_vs_naive", stat, 1e-9)
}

fn check_gaussian_diag_explicit(cfg: &VerifyConfig) -> CheckOutcome {
    let mut rng = stream_rng(cfg.seed, &[stream::ORACLE, 3]);
    let mut stat = 0.0f64;
    for _ in 0..200 {
        let dir = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if dir.norm() < 0.1 {
            continue;
        }
        let ray = Ray::new(Vec3::ZERO, dir, rng.random_range(1e-3..0.3)).expect("valid");
        let t0 = rng.random_range(0.1..10.0);
        let f = ConicalFrustum::new(ray, t0, t0 + rng.random_range(0.01..3.0)).expect("valid");
        let g = frustum_to_gaussian_full(&f).expect("valid");
        let full = g.cov_full.expect("materialized");
        for (i, d) in g.cov_diag.to_array().iter().enumerate() {
            let denom = d.abs().max(1e-300);
            stat = stat.max((full[i][i] - d).abs() / denom);
        }
    }
    CheckOutcome::new("gaussian_diag_explicit", stat, 1e-12)
}

fn check_cylinder_moments_mc(cfg: &VerifyConfig) -> CheckOutcome {
    let mut rng = stream_rng(cfg.seed, &[stream::ORACLE, 4]);
    let mut worst = 0.0f64;
    for case in 0..5 {
        let t0 = rng.random_range(0.1..3.0);
        let t1 = t0 + rng.random_range(0.1..4.0);
        let radius = rng.random_range(0.05..2.0);
        let t_mu = 0.5 * (t0 + t1);
        let m = cylinder_moments(radius, t0, t1).expect("valid");
        let stats = sample_normalized_moments(
            cfg.seed,
            2000 + case as u64,
            cfg.mc_samples / 2,
            t0,
            t1,
            radius,
            true,
        );
        let var_n = m.sigma_t2 / (t_mu * t_mu);
        // The sampler normalizes x by radius * t_mu, so the closed form
        // sigma_r2 = radius^2/4 becomes 1/(4 t_mu^2).
        let x2_closed = m.sigma_r2 / (radius * radius * t_mu * t_mu);
        worst = worst
            .max(sigmas((m.mu_t - t_mu) / t_mu, stats.mean_u, stats.se_u))
            .max(sigmas(var_n, stats.var_u, stats.se_var_u))
            .max(sigmas(x2_closed, stats.mean_x2, stats.se_x2));
    }
    CheckOutcome::new("cylinder_moments_mc", worst, 5.0)
}

fn check_frustum_sampler_chi2(cfg: &VerifyConfig) -> CheckOutcome {
    // Two-sample chi-squared between the inverse-CDF sampler and a rejection
    // sampler driven by the frustum indicator, on a 4x4x4 histogram.
    let ray = Ray::new(
        Vec3::new(0.3, -0.2, 0.5),
        Vec3::new(0.4, -0.7, 0.9),
        0.35,
    )
    .expect("valid");
    let f = ConicalFrustum::new(ray, 1.0, 2.5).expect("valid");
    let n = (cfg.mc_samples / 10).max(10_000);
    let mut rng_a = stream_rng(cfg.seed, &[stream::ORACLE, 5]);
    let mut rng_b = stream_rng(cfg.seed, &[stream::ORACLE, 6]);
    let d = f.ray.direction;
    let (e1, e2) = d.orthonormal_basis();
    let bin = |p: Vec3| -> usize {
        let rel = p - f.ray.origin;
        let t = d.dot(rel) / d.norm_squared();
        let x = e1.dot(rel);
        let y = e2.dot(rel);
        let radial = (x * x + y * y).sqrt() / (f.ray.pixel_radius * t);
        let theta = y.atan2(x) + std::f64::consts::PI;
        let bt = (((t - f.t0) / (f.t1 - f.t0)) * 4.0).clamp(0.0, 3.999) as usize;
        let br = ((radial * radial) * 4.0).clamp(0.0, 3.999) as usize;
        let ba = (theta / (2.0 * std::f64::consts::PI) * 4.0).clamp(0.0, 3.999) as usize;
        bt * 16 + br * 4 + ba
    };
    let mut hist_a = vec![0.0f64; 64];
    let mut hist_b = vec![0.0f64; 64];
    for _ in 0..n {
        hist_a[bin(crate::oracle::sample_frustum_point(&f, &mut rng_a))] += 1.0;
        hist_b[bin(crate::oracle::sample_frustum_rejection(&f, &mut rng_b))] += 1.0;
    }
    let mut chi2 = 0.0;
    for k in 0..64 {
        let tot = hist_a[k] + hist_b[k];
        if tot > 0.0 {
            chi2 += (hist_a[k] - hist_b[k]).powi(2) / tot;
        }
    }
    // 63 dof at p > 0.001.
    CheckOutcome::new("frustum_sampler_chi2", chi2, 103.4)
}

fn check_expected_trig_mc(cfg: &VerifyConfig) -> CheckOutcome {
    // 5x4 grid of (mu, var); Box-Muller normal draws.
    let mus = [-2.5f64, -1.0, 0.0, 1.0, 2.5];
    let vars = [0.05f64, 0.3, 1.0, 3.0];
    let n = cfg.mc_samples;
    let mut worst = 0.0f64;
    for (i, &mu) in mus.iter().enumerate() {
        for (j, &var) in vars.iter().enumerate() {
            let sd = var.sqrt();
            let tag = 3000 + (i * vars.len() + j) as u64;
            const CHUNK: usize = 65_536;
            let n_chunks = n.div_ceil(CHUNK);
            let partials: Vec<[f64; 5]> = (0..n_chunks)
                .into_par_iter()
                .map(|chunk| {
                    let lo = chunk * CHUNK;
                    let hi = ((chunk + 1) * CHUNK).min(n);
                    let mut rng = stream_rng(cfg.seed, &[stream::ORACLE, tag, chunk as u64]);
                    let mut acc = [0.0f64; 5];
                    for _ in lo..hi {
                        let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                        let u2: f64 = rng.random();
                        let z = (-2.0 * u1.ln()).sqrt()
                            * (2.0 * std::f64::consts::PI * u2).cos();
                        let x = mu + sd * z;
                        let (s, c) = x.sin_cos();
                        acc[0] += s;
                        acc[1] += s * s;
                        acc[2] += c;
                        acc[3] += c * c;
                        acc[4] += 1.0;
                    }
                    acc
                })
                .collect();
            let mut sums = [0.0f64; 5];
            for k in 0..5 {
                let col: Vec<f64> = partials.iter().map(|p| p[k]).collect();
                sums[k] = pairwise_sum(&col);
            }
            let nf = sums[4];
            let mean_s = sums[0] / nf;
            let mean_c = sums[2] / nf;
            let se_s = (((sums[1] / nf - mean_s * mean_s).max(0.0)) / nf).sqrt();
            let se_c = (((sums[3] / nf - mean_c * mean_c).max(0.0)) / nf).sqrt();
            let (es, ec) = expected_trig(mu, var).expect("valid variance");
            worst = worst.max(sigmas(es, mean_s, se_s)).max(sigmas(ec, mean_c, se_c));
        }
    }
    CheckOutcome::new("expected_trig_mc", worst, 5.0)
}

fn check_ipe_mc(cfg: &VerifyConfig) -> CheckOutcome {
    // IPE must equal the Monte-Carlo expectation of PE under the region's
    // Gaussian, per component, within 5 standard errors. L=4 keeps the MC
    // variance manageable.
    let l = 4;
    let dim = 6 * l;
    let mut rng = stream_rng(cfg.seed, &[stream::ORACLE, 7]);
    let mut worst = 0.0f64;
    for case in 0..cfg.ipe_cases {
        let mean = [
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
        ];
        let cov = [
            10f64.powf(rng.random_range(-4.0..-0.3)),
            10f64.powf(rng.random_range(-4.0..-0.3)),
            10f64.powf(rng.random_range(-4.0..-0.3)),
        ];
        let region = GaussianRegion {
            mean: Vec3::from_array(mean),
            cov_diag: Vec3::from_array(cov),
            cov_full: None,
        };
        let ipe = integrated_positional_encode(&region, l).expect("valid");
        let n = cfg.mc_samples;
        const CHUNK: usize = 32_768;
        let n_chunks = n.div_ceil(CHUNK);
        let tag = 4000 + case as u64;
        let partials: Vec<(Vec<f64>, Vec<f64>, f64)> = (0..n_chunks)
            .into_par_iter()
            .map(|chunk| {
                let lo = chunk * CHUNK;
                let hi = ((chunk + 1) * CHUNK).min(n);
                let mut rng = stream_rng(cfg.seed, &[stream::ORACLE, tag, chunk as u64]);
                let mut sums = vec![0.0f64; dim];
                let mut sqs = vec![0.0f64; dim];
                let mut buf = vec![0.0f64; dim];
                for _ in lo..hi {
                    let mut x = [0.0f64; 3];
                    for (k, xi) in x.iter_mut().enumerate() {
                        let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                        let u2: f64 = rng.random();
                        let z = (-2.0 * u1.ln()).sqrt()
                            * (2.0 * std::f64::consts::PI * u2).cos();
                        *xi = mean[k] + cov[k].sqrt() * z;
                    }
                    crate::encoding::positional_encode_into(&x, l, &mut buf);
                    for (k, v) in buf.iter().enumerate() {
                        sums[k] += v;
                        sqs[k] += v * v;
                    }
                }
                (sums, sqs, (hi - lo) as f64)
            })
            .collect();
        for k in 0..dim {
            let col: Vec<f64> = partials.iter().map(|p| p.0[k]).collect();
            let col2: Vec<f64> = partials.iter().map(|p| p.1[k]).collect();
            let nf: f64 = partials.iter().map(|p| p.2).sum();
            let mean_k = pairwise_sum(&col) / nf;
            let var_k = (pairwise_sum(&col2) / nf - mean_k * mean_k).max(0.0);
            let se_k = (var_k / nf).sqrt();
            worst = worst.max(sigmas(ipe.values[k], mean_k, se_k));
        }
    }
    CheckOutcome::new("ipe_mc", worst, 5.0)
}

fn check_ipe_point_limit(cfg: &VerifyConfig) -> CheckOutcome {
    // With zero covariance the integrated encoding is plain positional
    // encoding of the mean.
    let mut rng = stream_rng(cfg.seed, &[stream::ORACLE, 8]);
    let mut stat = 0.0f64;
    for _ in 0..100 {
        let mean = Vec3::new(
            rng.random_range(-4.0..4.0),
            rng.random_range(-4.0..4.0),
            rng.random_range(-4.0..4.0),
        );
        let ipe = integrated_positional_encode(&GaussianRegion::point(mean), 16).expect("valid");
        let pe = positional_encode(mean, 16);
        for (a, b) in ipe.values.iter().zip(pe.iter()) {
            stat = stat.max((a - b).abs());
        }
    }
    CheckOutcome::new("ipe_point_limit", stat, 1e-12)
}

fn check_pe_scalar_loop(cfg: &VerifyConfig) -> CheckOutcome {
    // Term-by-term re-evaluation of the definition, independent of the
    // block-layout implementation.
    let mut rng = stream_rng(cfg.seed, &[stream::ORACLE, 9]);
    let mut stat = 0.0f64;
    for _ in 0..100 {
        let x = [
            rng.random_range(-4.0..4.0),
            rng.random_range(-4.0..4.0),
            rng.random_range(-4.0..4.0),
        ];
        let l = rng.random_range(1..8usize);
        let f = positional_encode(Vec3::from_array(x), l);
        for j in 0..l {
            for i in 0..3 {
                let arg = 2f64.powi(j as i32) * x[i];
                stat = stat.max((f[j * 3 + i] - arg.sin()).abs());
                stat = stat.max((f[3 * l + j * 3 + i] - arg.cos()).abs());
            }
        }
    }
    CheckOutcome::new("pe_scalar_loop", stat, 1e-12)
}

fn check_concat_pe_scalar_loop(cfg: &VerifyConfig) -> CheckOutcome {
    let mut rng = stream_rng(cfg.seed, &[stream::ORACLE, 10]);
    let mut stat = 0.0f64;
    for _ in 0..50 {
        // Random symmetric PSD-ish covariance via A A^T scaling.
        let mut a = [[0.0f64; 3]; 3];
        for row in a.iter_mut() {
            for v in row.iter_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        let mut cov = [[0.0f64; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] = (0..3).map(|k| a[i][k] * a[j][k]).sum();
            }
        }
        let mean = Vec3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        );
        let region = GaussianRegion {
            mean,
            cov_diag: Vec3::new(cov[0][0], cov[1][1], cov[2][2]),
            cov_full: Some(cov),
        };
        let f = concat_positional_encode(&region).expect("valid");
        // Scalar re-evaluation.
        let mean_arr = mean.to_array();
        for j in 0..12 {
            for i in 0..3 {
                let arg = 2f64.powi(j as i32) * mean_arr[i];
                stat = stat.max((f[j * 3 + i] - arg.sin()).abs());
                stat = stat.max((f[36 + j * 3 + i] - arg.cos()).abs());
            }
        }
        let triu = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];
        for j in 0..2 {
            for (slot, &(r, c)) in triu.iter().enumerate() {
                let v = cov[r][c].signum() * cov[r][c].abs().sqrt();
                let arg = 2f64.powi(j as i32) * v;
                stat = stat.max((f[72 + j * 6 + slot] - arg.sin()).abs());
                stat = stat.max((f[72 + 12 + j * 6 + slot] - arg.cos()).abs());
            }
        }
    }
    CheckOutcome::new("concat_pe_scalar_loop", stat, 1e-12)
}

fn check_quadrature_closed_form(_cfg: &VerifyConfig) -> CheckOutcome {
    use ndarray::Array2;
    let taus = [1.0f64, 2.0];
    let colors = Array2::from_shape_vec((2, 3), vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).expect("shape");
    let ts = [0.0, 0.5, 1.0];
    let (c, w, _) = composite(&taus, colors.view(), &ts).expect("valid");
    let w0 = 1.0 - (-0.5f64).exp();
    let w1 = (-0.5f64).exp() * (1.0 - (-1.0f64).exp());
    let stat = (c[0] - w0)
        .abs()
        .max((c[1] - w1).abs())
        .max(c[2].abs())
        .max((w[0] - w0).abs())
        .max((w[1] - w1).abs());
    CheckOutcome::new("quadrature_closed_form", stat, 1e-12)
}

fn check_quadrature_fine_grid(cfg: &VerifyConfig) -> CheckOutcome {
    // Quadrature compositing on a 1e4-interval grid against an independent
    // integration of the continuous transmittance equation, on random smooth
    // density/color profiles.
    use ndarray::Array2;
    let mut rng = stream_rng(cfg.seed, &[stream::ORACLE, 11]);
    let mut stat = 0.0f64;
    for _ in 0..20 {
        // Smooth positive density: offset sum of two sinusoids.
        let (a0, a1, f1, p1) = (
            rng.random_range(0.3..1.5),
            rng.random_range(0.1..1.0),
            rng.random_range(0.5..3.0),
            rng.random_range(0.0..6.28),
        );
        let (cf, cp): (Vec<f64>, Vec<f64>) = (0..3)
            .map(|_| (rng.random_range(0.3..2.0), rng.random_range(0.0..6.28)))
            .unzip();
        let tau = |t: f64| a0 + a1 * (f1 * t + p1).sin().powi(2);
        let color = |t: f64, c: usize| 0.5 + 0.45 * (cf[c] * t + cp[c]).cos();
        let (near, far) = (0.5, 4.5);
        let n = 10_000usize;

        // Production route: composite on midpoint-evaluated intervals.
        let ts: Vec<f64> = (0..=n).map(|i| near + (far - near) * i as f64 / n as f64).collect();
        let taus: Vec<f64> = (0..n).map(|k| tau(0.5 * (ts[k] + ts[k + 1]))).collect();
        let colors = Array2::from_shape_fn((n, 3), |(k, c)| color(0.5 * (ts[k] + ts[k + 1]), c));
        let (quad, _, _) = composite(&taus, colors.view(), &ts).expect("valid");

        // Independent route: cumulative optical depth by trapezoid on a
        // staggered grid, integrand T(t) tau(t) c(t) by midpoint rule.
        let m = 40_000usize;
        let h = (far - near) / m as f64;
        let mut depth = 0.0;
        let mut integral = [0.0f64; 3];
        let mut prev_tau = tau(near);
        for i in 0..m {
            let mid = near + (i as f64 + 0.5) * h;
            let t_right = near + (i + 1) as f64 * h;
            let tau_mid = tau(mid);
            // Optical depth to the midpoint by trapezoid.
            let depth_mid = depth + (prev_tau + tau_mid) * 0.25 * h;
            let trans = (-depth_mid).exp();
            for (c, out) in integral.iter_mut().enumerate() {
                *out += trans * tau_mid * color(mid, c) * h;
            }
            let tau_right = tau(t_right);
            depth += (prev_tau + 2.0 * tau_mid + tau_right) * 0.25 * h;
            prev_tau = tau_right;
        }
        for c in 0..3 {
            stat = stat.max((quad[c] - integral[c]).abs());
        }
    }
    CheckOutcome::new("quadrature_fine_grid", stat, 1e-3)
}

fn check_blurpool_hand_case(_cfg: &VerifyConfig) -> CheckOutcome {
    let out = crate::renderer::blurpool_weights(&[0.0f64, 1.0, 0.0], 0.0).expect("valid");
    let stat = (out[0] - 0.25).abs().max((out[1] - 0.5).abs()).max((out[2] - 0.25).abs());
    CheckOutcome::new("blurpool_hand_case", stat, 1e-12)
}

fn check_fd_gradient_full_pipeline(cfg: &VerifyConfig) -> CheckOutcome {
    CheckOutcome::new(
        "fd_gradient_full_pipeline",
        fd_gradient_worst_rel_error(cfg),
        1e-4,
    )
}

/// Worst relative error between the analytic end-to-end gradient and central
/// finite differences, over parameters stratified across every tensor.
///
/// The loss is the full pipeline (cone featurization, both rendering passes,
/// background compositing, the weighted squared error), evaluated at f64.
/// Sample placement is frozen at the base parameters, matching the
/// stop-gradient treatment the optimizer uses.
pub fn fd_gradient_worst_rel_error(cfg: &VerifyConfig) -> f64 {
    use crate::renderer::composite_backward;
    use ndarray::Array1;

    let l = 8;
    let l_dir = 4;
    let spec = ModelSpec {
        feature_len: 6 * l,
        view_len: 6 * l_dir,
        depth: 3,
        width: 24,
        skip_layer: Some(1),
        view_width: 12,
    };
    let model = FieldModel {
        encoder: SpatialEncoder::Ipe { l },
        l_dir,
        params: FieldParams::Single(crate::field::RadianceMlp::<f64>::new(spec, cfg.seed ^ 77)),
        union_fine: false,
    };
    let rcfg = RenderConfig {
        n_coarse: 12,
        n_fine: 12,
        alpha: 0.01,
        t_near: 1.2,
        t_far: 4.2,
        supersample_count: 1,
        white_background: true,
    };
    let lambda = 0.1;

    // A handful of rays with fixed targets and area weights.
    let mut rng = stream_rng(cfg.seed, &[stream::ORACLE, 12]);
    let rays: Vec<(Ray, [f64; 3], f64, RayRngKey)> = (0..4)
        .map(|i| {
            let dir = Vec3::new(
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
                -1.0,
            );
            let ray = Ray::new(Vec3::new(0.0, 0.0, 3.0), dir, 0.01).expect("valid");
            let target = [rng.random(), rng.random(), rng.random()];
            let weight = [1.0, 4.0, 16.0, 64.0][i % 4];
            let key = RayRngKey { seed: cfg.seed ^ 31, image: 9, pixel: i as u64 };
            (ray, target, weight, key)
        })
        .collect();

    // Freeze sample placement at the base parameters.
    let frozen: Vec<(Vec<f64>, Vec<f64>)> = rays
        .iter()
        .map(|(ray, _, _, key)| {
            let (coarse, fine) = trace_ray(&model, ray, &rcfg, *key, 0).expect("trace");
            (coarse.ts, fine.ts)
        })
        .collect();

    let loss_of = |m: &FieldModel<f64>| -> f64 {
        let mut total = 0.0;
        for ((ray, target, weight, _), (cts, fts)) in rays.iter().zip(frozen.iter()) {
            let pass_color = |ts: &[f64], fine: bool| -> [f64; 3] {
                let (taus, rgbs, _, _, _) = m.trace_pass(ray, ts, fine).expect("pass");
                let (c, w, _) = composite(taus.as_slice().unwrap(), rgbs.view(), ts).expect("ok");
                let rest: f64 = 1.0 - w.iter().sum::<f64>();
                [c[0] + rest, c[1] + rest, c[2] + rest]
            };
            let cc = pass_color(cts, false);
            let fc = pass_color(fts, true);
            let sq = |a: &[f64; 3]| {
                (a[0] - target[0]).powi(2) + (a[1] - target[1]).powi(2) + (a[2] - target[2]).powi(2)
            };
            total += weight * (lambda * sq(&cc) + sq(&fc));
        }
        total / rays.len() as f64
    };

    // Analytic gradient at the base parameters over the same frozen t's.
    let mut grads = crate::field::GradientBuffer::zeros(&spec);
    {
        let inv_n = 1.0 / rays.len() as f64;
        for ((ray, target, weight, _), (cts, fts)) in rays.iter().zip(frozen.iter()) {
            for (ts, fine, scale) in [(cts, false, lambda), (fts, true, 1.0)] {
                let (taus, rgbs, _, _, cache) = model.trace_pass(ray, ts, fine).expect("pass");
                let (c, w, trans) =
                    composite(taus.as_slice().unwrap(), rgbs.view(), ts).expect("ok");
                let rest: f64 = 1.0 - w.iter().sum::<f64>();
                let color = [c[0] + rest, c[1] + rest, c[2] + rest];
                let d_color = [
                    2.0 * scale * weight * inv_n * (color[0] - target[0]),
                    2.0 * scale * weight * inv_n * (color[1] - target[1]),
                    2.0 * scale * weight * inv_n * (color[2] - target[2]),
                ];
                let (d_taus, d_rgbs) = composite_backward(
                    taus.as_slice().unwrap(),
                    rgbs.view(),
                    ts,
                    &w,
                    &trans,
                    d_color,
                    Some([1.0; 3]),
                );
                let d_taus = Array1::from_vec(d_taus);
                model
                    .params
                    .fine()
                    .backward(&cache, d_taus.view(), d_rgbs.view(), &mut grads);
            }
        }
    }

    // Stratified parameter selection: every tensor is probed.
    let mlp = match &model.params {
        FieldParams::Single(m) => m,
        _ => unreachable!(),
    };
    let total_params = mlp.param_count();
    let mut indices = Vec::new();
    let mut offset = 0usize;
    let sizes: Vec<usize> = mlp.layers().iter().flat_map(|d| [d.w.len(), d.b.len()]).collect();
    let per_tensor = (cfg.fd_params / sizes.len()).max(1);
    let mut pick_rng = stream_rng(cfg.seed, &[stream::ORACLE, 13]);
    for size in sizes {
        for _ in 0..per_tensor.min(size) {
            indices.push(offset + pick_rng.random_range(0..size));
        }
        offset += size;
    }
    while indices.len() < cfg.fd_params {
        indices.push(pick_rng.random_range(0..total_params));
    }

    let model_cell = std::cell::RefCell::new(model);
    let h = 1e-4;
    let fd = crate::oracle::finite_diff_gradient(
        || loss_of(&model_cell.borrow()),
        |i| {
            let m = model_cell.borrow();
            let FieldParams::Single(mlp) = &m.params else { unreachable!() };
            mlp.get_param(i).expect("index")
        },
        |i, v| {
            let mut m = model_cell.borrow_mut();
            let FieldParams::Single(mlp) = &mut m.params else { unreachable!() };
            mlp.set_param(i, v).expect("index");
        },
        &indices,
        h,
    )
    .expect("finite differences");

    let mut worst = 0.0f64;
    for (&idx, fd_g) in indices.iter().zip(fd.iter()) {
        let analytic = crate::field::RadianceMlp::grad_param(&grads, idx).expect("index");
        let rel = (analytic - fd_g).abs() / fd_g.abs().max(1.0);
        worst = worst.max(rel);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fast_cfg() -> VerifyConfig {
        VerifyConfig {
            mc_samples: 40_000,
            frustum_cases: 8,
            ipe_cases: 4,
            fd_params: 40,
            ..Default::default()
        }
    }

    #[test]
    fn coverage_audit_each_closed_form_exactly_once() {
        let mut seen = std::collections::HashMap::new();
        for def in REGISTRY {
            for form in def.covers {
                *seen.entry(*form).or_insert(0usize) += 1;
            }
        }
        for form in CLOSED_FORMS {
            assert_eq!(
                seen.get(form).copied().unwrap_or(0),
                1,
                "closed form {form} must be covered exactly once"
            );
        }
        assert_eq!(seen.len(), CLOSED_FORMS.len(), "no unregistered forms");
    }

    #[test]
    fn fast_suite_passes() {
        let outcomes = run_all(&fast_cfg());
        for o in &outcomes {
            assert!(
                o.pass,
                "{} failed: statistic {} vs tolerance {}",
                o.check, o.statistic, o.tolerance
            );
        }
        assert_eq!(outcomes.len(), REGISTRY.len());
    }

    #[test]
    fn mutation_fails_the_moment_check() {
        let cfg = VerifyConfig {
            mutation: Some(Mutation::SigmaT2SignFlip),
            mc_samples: 20_000,
            frustum_cases: 4,
            ..Default::default()
        };
        let outcome = run_one("frustum_moments_mc", &cfg).expect("registered");
        assert!(!outcome.pass, "sign-flipped variance must be caught");
    }

    #[test]
    fn report_round_trip_and_schema() {
        let cfg = fast_cfg();
        let outcomes = vec![
            CheckOutcome::new("a", 0.1, 5.0),
            CheckOutcome::new("b", 9.0, 5.0),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        write_report(&path, &cfg, &outcomes).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(report_schema_ok(&text));
        assert!(!report_schema_ok("{\"checks\": [{\"check\": 1}]}"));
        assert!(!report_schema_ok("[]"));
    }

    #[test]
    fn determinism_of_outcomes() {
        let cfg = VerifyConfig { mc_samples: 20_000, frustum_cases: 3, ipe_cases: 2, fd_params: 10, ..Default::default() };
        let a = run_one("frustum_moments_mc", &cfg).unwrap();
        let b = run_one("frustum_moments_mc", &cfg).unwrap();
        assert_eq!(a.statistic.to_bits(), b.statistic.to_bits());
    }
}
