//! Cone-traced volume rendering: stratified interval sampling, frustum
//! featurization, quadrature compositing, blurpool-filtered hierarchical
//! resampling, and jittered supersampling.
//!
//! Both rendering passes query one model: the coarse pass uses stratified
//! intervals, the fine pass resamples intervals from the blurpool-filtered
//! coarse weights and is used alone (the fine t-vector never concatenates
//! the coarse one). All randomness is drawn from per-(image, pixel, pass)
//! streams, so full-image renders are deterministic under any parallel
//! schedule.

use crate::encoding::{
    concat_positional_encode_into, integrated_positional_encode_into, positional_encode_into,
    EncodingError, CONCAT_PE_LEN,
};
use crate::field::{FieldError, ForwardCache, GradientBuffer, RadianceMlp};
use crate::geometry::{
    cylinder_to_gaussian, frustum_moments_stable, frustum_to_gaussian_full, moments_to_gaussian,
    pixel_cone_at, GeometryError, Ray,
};
use crate::rng::{stream, stream_rng};
use crate::Real;
use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("negative density {0} passed to composite")]
    NegativeDensity(f64),
    #[error("inconsistent lengths: {n_ts} t values for {n_taus} densities")]
    LengthMismatch { n_ts: usize, n_taus: usize },
    #[error("cannot normalize all-zero weights with zero padding")]
    DegenerateWeights,
    #[error("invalid pdf: {0}")]
    InvalidPdf(String),
    #[error("invalid near/far interval [{near}, {far}]")]
    BadInterval { near: f64, far: f64 },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
}

/// How interval volumes are turned into spatial MLP features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpatialEncoder {
    /// Integrated positional encoding of the frustum Gaussian.
    Ipe { l: usize },
    /// Plain positional encoding of the interval midpoint (ray casting).
    PointPe { l: usize },
    /// Positional encoding of the Gaussian mean concatenated with an
    /// encoding of its full covariance.
    ConcatPe,
    /// Integrated positional encoding of a cylinder slice of fixed radius
    /// (forward-facing variant).
    CylinderIpe { l: usize },
}

impl SpatialEncoder {
    pub fn feature_len(&self) -> usize {
        match self {
            SpatialEncoder::Ipe { l } | SpatialEncoder::PointPe { l } | SpatialEncoder::CylinderIpe { l } => 6 * l,
            SpatialEncoder::ConcatPe => CONCAT_PE_LEN,
        }
    }

    /// Encode the volume spanned by `[t0, t1]` along `ray` into `out`.
    pub fn encode_interval<T: Real>(
        &self,
        ray: &Ray,
        t0: f64,
        t1: f64,
        out: &mut [T],
    ) -> Result<(), RenderError> {
        match *self {
            SpatialEncoder::Ipe { l } => {
                let mut m = frustum_moments_stable(t0, t1)?;
                m.sigma_r2 *= ray.pixel_radius * ray.pixel_radius;
                let g = moments_to_gaussian(ray, &m);
                integrated_positional_encode_into(&g.mean.to_array(), &g.cov_diag.to_array(), l, out)?;
            }
            SpatialEncoder::PointPe { l } => {
                let mid = ray.point_at(0.5 * (t0 + t1));
                positional_encode_into(&mid.to_array(), l, out);
            }
            SpatialEncoder::ConcatPe => {
                let f = crate::geometry::ConicalFrustum::new(*ray, t0, t1)?;
                let g = frustum_to_gaussian_full(&f)?;
                concat_positional_encode_into(&g, out)?;
            }
            SpatialEncoder::CylinderIpe { l } => {
                let g = cylinder_to_gaussian(ray, ray.pixel_radius, t0, t1)?;
                integrated_positional_encode_into(&g.mean.to_array(), &g.cov_diag.to_array(), l, out)?;
            }
        }
        Ok(())
    }
}

/// Model parameters: one shared MLP, or separate coarse/fine networks for
/// the two-network ablation.
#[derive(Clone, Debug)]
pub enum FieldParams<T> {
    Single(RadianceMlp<T>),
    Two { coarse: RadianceMlp<T>, fine: RadianceMlp<T> },
}

impl<T: Real> FieldParams<T> {
    pub fn coarse(&self) -> &RadianceMlp<T> {
        match self {
            FieldParams::Single(m) => m,
            FieldParams::Two { coarse, .. } => coarse,
        }
    }

    pub fn fine(&self) -> &RadianceMlp<T> {
        match self {
            FieldParams::Single(m) => m,
            FieldParams::Two { fine, .. } => fine,
        }
    }

    pub fn is_two(&self) -> bool {
        matches!(self, FieldParams::Two { .. })
    }

    pub fn param_count(&self) -> usize {
        match self {
            FieldParams::Single(m) => m.param_count(),
            FieldParams::Two { coarse, fine } => coarse.param_count() + fine.param_count(),
        }
    }
}

/// A queryable radiance field: encoder plus parameters.
#[derive(Clone, Debug)]
pub struct FieldModel<T> {
    pub encoder: SpatialEncoder,
    pub l_dir: usize,
    pub params: FieldParams<T>,
    /// Two-network mode evaluates the fine pass on the sorted union of
    /// coarse and fine t values.
    pub union_fine: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub n_coarse: usize,
    pub n_fine: usize,
    /// Histogram padding added to blurpooled weights before normalization.
    pub alpha: f64,
    pub t_near: f64,
    pub t_far: f64,
    /// Jittered sub-pixel cone renders averaged per pixel.
    pub supersample_count: usize,
    pub white_background: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            n_coarse: 128,
            n_fine: 128,
            alpha: 0.01,
            t_near: 2.0,
            t_far: 6.0,
            supersample_count: 1,
            white_background: true,
        }
    }
}

/// `count` stratified samples: one uniform draw in each of `count`
/// equal-width bins spanning [t_near, t_far]; sorted by construction.
pub fn stratified_samples(
    t_near: f64,
    t_far: f64,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, RenderError> {
    if !(t_far > t_near) {
        return Err(RenderError::BadInterval { near: t_near, far: t_far });
    }
    let width = (t_far - t_near) / count as f64;
    Ok((0..count)
        .map(|i| t_near + width * (i as f64 + rng.random::<f64>()))
        .collect())
}

/// Sampled intervals along one ray with everything the hierarchical pass and
/// the tests need to inspect.
#[derive(Clone, Debug)]
pub struct RaySampleSet<T> {
    /// `n+1` sorted distances bounding `n` intervals.
    pub t_values: Vec<f64>,
    pub taus: Vec<T>,
    /// `n x 3` per-interval colors.
    pub colors: Array2<T>,
    /// Compositing weights, one per interval.
    pub weights: Vec<T>,
    /// Transmittance at the start of each interval; the first entry is 1.
    pub transmittances: Vec<T>,
}

/// Quadrature compositing of densities and colors over the intervals bounded
/// by `ts`: `C = sum_k T_k (1 - exp(-tau_k d_k)) c_k`.
pub fn composite<T: Real>(
    taus: &[T],
    colors: ArrayView2<T>,
    ts: &[f64],
) -> Result<([T; 3], Vec<T>, Vec<T>), RenderError> {
    let n = taus.len();
    if ts.len() != n + 1 || colors.nrows() != n {
        return Err(RenderError::LengthMismatch { n_ts: ts.len(), n_taus: n });
    }
    let mut weights = Vec::with_capacity(n);
    let mut trans = Vec::with_capacity(n);
    let mut t_k = T::one();
    let mut color = [T::zero(); 3];
    for k in 0..n {
        if taus[k] < T::zero() {
            return Err(RenderError::NegativeDensity(taus[k].as_f64()));
        }
        let delta = T::of_f64(ts[k + 1] - ts[k]);
        let decay = (taus[k].neg() * delta).exp();
        let alpha = T::one() - decay;
        let w = t_k * alpha;
        trans.push(t_k);
        weights.push(w);
        for (c, out) in color.iter_mut().enumerate() {
            *out = *out + w * colors[(k, c)];
        }
        t_k = t_k * decay;
    }
    Ok((color, weights, trans))
}

/// Gradient of an upstream color gradient through [`composite`] to the
/// densities and colors. `background` must match the compositing call: when
/// the render added `(1 - sum w) * bg`, pass that `bg` here.
pub fn composite_backward<T: Real>(
    taus: &[T],
    colors: ArrayView2<T>,
    ts: &[f64],
    weights: &[T],
    transmittances: &[T],
    d_color: [T; 3],
    background: Option<[T; 3]>,
) -> (Vec<T>, Array2<T>) {
    let n = taus.len();
    let bg = background.unwrap_or([T::zero(); 3]);
    let mut d_taus = vec![T::zero(); n];
    let mut d_colors = Array2::zeros((n, 3));
    // Suffix accumulator of sum_{j>k} w_j ((c_j - bg) . g).
    let mut suffix = T::zero();
    for k in (0..n).rev() {
        let delta = T::of_f64(ts[k + 1] - ts[k]);
        let decay = (taus[k].neg() * delta).exp();
        let mut dot = T::zero();
        for c in 0..3 {
            dot = dot + (colors[(k, c)] - bg[c]) * d_color[c];
            d_colors[(k, c)] = weights[k] * d_color[c];
        }
        d_taus[k] = delta * (transmittances[k] * decay * dot - suffix);
        suffix = suffix + weights[k] * dot;
    }
    (d_taus, d_colors)
}

/// Blurpool filtering of compositing weights: a 2-tap max filter followed by
/// a 2-tap blur (zero-padded at the boundaries), plus the `alpha` padding,
/// normalized to sum to one.
pub fn blurpool_weights<T: Real>(w: &[T], alpha: T) -> Result<Vec<T>, RenderError> {
    let n = w.len();
    let zero = T::zero();
    let half = T::of_f64(0.5);
    let mut out = Vec::with_capacity(n);
    let mut sum = zero;
    for k in 0..n {
        let prev = if k == 0 { zero } else { w[k - 1] };
        let next = if k + 1 == n { zero } else { w[k + 1] };
        let v = half * (prev.max(w[k]) + w[k].max(next)) + alpha;
        sum += v;
        out.push(v);
    }
    if !(sum > zero) {
        return Err(RenderError::DegenerateWeights);
    }
    for v in out.iter_mut() {
        *v /= sum;
    }
    Ok(out)
}

/// `count` draws from the piecewise-constant density over the intervals
/// bounded by `edges`, via inverse transform sampling; sorted.
pub fn inverse_transform_sample(
    pdf: &[f64],
    edges: &[f64],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, RenderError> {
    if edges.len() != pdf.len() + 1 {
        return Err(RenderError::InvalidPdf(format!(
            "{} edges for {} bins",
            edges.len(),
            pdf.len()
        )));
    }
    let mut cdf = Vec::with_capacity(pdf.len() + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for &p in pdf {
        if p < 0.0 {
            return Err(RenderError::InvalidPdf(format!("negative mass {p}")));
        }
        acc += p;
        cdf.push(acc);
    }
    if (acc - 1.0).abs() > 1e-6 {
        return Err(RenderError::InvalidPdf(format!("mass sums to {acc}")));
    }
    *cdf.last_mut().unwrap() = 1.0;

    let mut ts = Vec::with_capacity(count);
    for _ in 0..count {
        let u: f64 = rng.random();
        // Index of the bin with cdf[k] <= u < cdf[k+1].
        let k = cdf.partition_point(|&c| c <= u).saturating_sub(1).min(pdf.len() - 1);
        let span = cdf[k + 1] - cdf[k];
        let frac = if span > 0.0 { (u - cdf[k]) / span } else { 0.0 };
        ts.push(edges[k] + frac * (edges[k + 1] - edges[k]));
    }
    ts.sort_unstable_by(f64::total_cmp);
    // Nudge exact ties so interval bounds stay strictly increasing.
    for i in 1..ts.len() {
        if ts[i] <= ts[i - 1] {
            ts[i] = ts[i - 1].next_up();
        }
    }
    Ok(ts)
}

/// Anything that can answer a density/color query for the intervals of a
/// ray. Implemented by [`FieldModel`] and by analytic test scenes.
pub trait RadianceSource<T: Real> {
    fn query_intervals(
        &self,
        ray: &Ray,
        ts: &[f64],
        fine_pass: bool,
    ) -> Result<(Array1<T>, Array2<T>), RenderError>;
}

impl<T: Real> FieldModel<T> {
    pub fn new_single(encoder: SpatialEncoder, l_dir: usize, mlp: RadianceMlp<T>) -> Self {
        FieldModel { encoder, l_dir, params: FieldParams::Single(mlp), union_fine: false }
    }

    /// Spatial feature rows for each interval of a ray.
    pub fn encode_spatial(&self, ray: &Ray, ts: &[f64]) -> Result<Array2<T>, RenderError> {
        let n = ts.len() - 1;
        let flen = self.encoder.feature_len();
        let mut features = Array2::zeros((n, flen));
        for k in 0..n {
            let mut row = features.row_mut(k);
            self.encoder
                .encode_interval(ray, ts[k], ts[k + 1], row.as_slice_mut().expect("contiguous"))?;
        }
        Ok(features)
    }

    /// Encoded (normalized) view direction, replicated for `n` samples.
    pub fn encode_views(&self, ray: &Ray, n: usize) -> Array2<T> {
        let dir = ray.direction.normalized();
        let mut row = vec![T::zero(); 6 * self.l_dir];
        positional_encode_into(&dir.to_array(), self.l_dir, &mut row);
        let base = Array1::from_vec(row);
        let mut out = Array2::zeros((n, 6 * self.l_dir));
        for mut r in out.rows_mut() {
            r.assign(&base);
        }
        out
    }

    /// Forward one pass over the intervals of `ts`, keeping the MLP cache
    /// for backpropagation.
    pub fn trace_pass(
        &self,
        ray: &Ray,
        ts: &[f64],
        fine_pass: bool,
    ) -> Result<(Array1<T>, Array2<T>, Array2<T>, Array2<T>, ForwardCache<T>), RenderError> {
        let features = self.encode_spatial(ray, ts)?;
        let views = self.encode_views(ray, ts.len() - 1);
        let mlp = if fine_pass { self.params.fine() } else { self.params.coarse() };
        let (taus, rgbs, cache) = mlp.forward(&features, &views)?;
        Ok((taus, rgbs, features, views, cache))
    }
}

impl<T: Real> RadianceSource<T> for FieldModel<T> {
    fn query_intervals(
        &self,
        ray: &Ray,
        ts: &[f64],
        fine_pass: bool,
    ) -> Result<(Array1<T>, Array2<T>), RenderError> {
        let (taus, rgbs, _, _, _) = self.trace_pass(ray, ts, fine_pass)?;
        Ok((taus, rgbs))
    }
}

fn finish_color<T: Real>(color: [T; 3], weights: &[T], white_background: bool) -> [T; 3] {
    if !white_background {
        return color;
    }
    let covered: T = weights.iter().copied().sum();
    let rest = T::one() - covered;
    [color[0] + rest, color[1] + rest, color[2] + rest]
}

/// Identifies a pixel's RNG streams: rendering is deterministic in
/// `(seed, image, pixel)` regardless of the parallel schedule.
#[derive(Clone, Copy, Debug)]
pub struct RayRngKey {
    pub seed: u64,
    pub image: u64,
    pub pixel: u64,
}

impl RayRngKey {
    pub fn pass_rng(&self, pass: u64, subsample: u64) -> ChaCha8Rng {
        stream_rng(self.seed, &[stream::RENDER_RAY, self.image, self.pixel, pass, subsample])
    }
}

const PASS_COARSE: u64 = 0;
const PASS_FINE: u64 = 1;
const PASS_JITTER: u64 = 2;

/// Both colors produced for one ray.
#[derive(Clone, Copy, Debug)]
pub struct RayColors<T> {
    pub coarse: [T; 3],
    pub fine: [T; 3],
}

/// Coarse-then-fine render of a single cone through any radiance source.
///
/// The fine t-vector is used alone unless `union_fine` is set, in which case
/// the fine pass queries the sorted union of coarse and fine t values (the
/// two-network scheme).
pub fn render_ray<T: Real, S: RadianceSource<T>>(
    source: &S,
    union_fine: bool,
    ray: &Ray,
    cfg: &RenderConfig,
    key: RayRngKey,
    subsample: u64,
) -> Result<RayColors<T>, RenderError> {
    let mut rng_c = key.pass_rng(PASS_COARSE, subsample);
    let coarse_ts = stratified_samples(cfg.t_near, cfg.t_far, cfg.n_coarse + 1, &mut rng_c)?;
    let (taus, rgbs) = source.query_intervals(ray, &coarse_ts, false)?;
    let (coarse_color, weights, _) = composite(taus.as_slice().unwrap(), rgbs.view(), &coarse_ts)?;

    let fine_ts = resample_fine(&coarse_ts, &weights, cfg, key, subsample)?;
    let fine_ts = if union_fine { sorted_union(&coarse_ts, &fine_ts) } else { fine_ts };
    let (taus, rgbs) = source.query_intervals(ray, &fine_ts, true)?;
    let (fine_color, fine_weights, _) = composite(taus.as_slice().unwrap(), rgbs.view(), &fine_ts)?;
    Ok(RayColors {
        coarse: finish_color(coarse_color, &weights, cfg.white_background),
        fine: finish_color(fine_color, &fine_weights, cfg.white_background),
    })
}

/// Blurpool the coarse weights and draw the fine t-vector: `n_fine + 1`
/// bounds so the fine pass evaluates exactly `n_fine` intervals.
pub fn resample_fine<T: Real>(
    coarse_ts: &[f64],
    weights: &[T],
    cfg: &RenderConfig,
    key: RayRngKey,
    subsample: u64,
) -> Result<Vec<f64>, RenderError> {
    let pooled = blurpool_weights(weights, T::of_f64(cfg.alpha))?;
    let pdf: Vec<f64> = pooled.iter().map(|v| v.as_f64()).collect();
    // Renormalize in f64; the f32 path can be a few ulps off 1.
    let total: f64 = pdf.iter().sum();
    let pdf: Vec<f64> = pdf.iter().map(|p| p / total).collect();
    let mut rng_f = key.pass_rng(PASS_FINE, subsample);
    inverse_transform_sample(&pdf, coarse_ts, cfg.n_fine + 1, &mut rng_f)
}

fn sorted_union(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    out.sort_unstable_by(f64::total_cmp);
    for i in 1..out.len() {
        if out[i] <= out[i - 1] {
            out[i] = out[i - 1].next_up();
        }
    }
    out
}

/// Render one pixel: casts the pixel's cone (through its center), or for
/// supersample counts above one averages that many jittered sub-pixel cones
/// with footprints shrunk by `1/sqrt(count)` so the union footprint matches
/// the pixel's.
pub fn render_pixel<T: Real>(
    model: &FieldModel<T>,
    camera: &crate::dataset::Camera,
    row: u32,
    col: u32,
    cfg: &RenderConfig,
    seed: u64,
    image: u64,
) -> Result<RayColors<T>, RenderError> {
    let key = RayRngKey { seed, image, pixel: (row as u64) << 32 | col as u64 };
    let k = cfg.supersample_count.max(1);
    if k == 1 {
        let ray = pixel_cone_at(camera, row, col, 0.5, 0.5, 1.0)?;
        return render_ray(model, model.union_fine, &ray, cfg, key, 0);
    }
    let mut jitter = key.pass_rng(PASS_JITTER, 0);
    let shrink = 1.0 / (k as f64).sqrt();
    let mut acc = RayColors { coarse: [T::zero(); 3], fine: [T::zero(); 3] };
    for s in 0..k {
        let dx: f64 = jitter.random();
        let dy: f64 = jitter.random();
        let ray = pixel_cone_at(camera, row, col, dx, dy, shrink)?;
        let c = render_ray(model, model.union_fine, &ray, cfg, key, s as u64 + 1)?;
        for i in 0..3 {
            acc.coarse[i] += c.coarse[i];
            acc.fine[i] += c.fine[i];
        }
    }
    let inv = T::of_f64(1.0 / k as f64);
    for i in 0..3 {
        acc.coarse[i] *= inv;
        acc.fine[i] *= inv;
    }
    Ok(acc)
}

/// Full-image render (fine colors, plus coarse as a second image).
/// Parallel over pixels; bit-deterministic in `(seed, camera, params)`.
pub fn render_image<T: Real>(
    model: &FieldModel<T>,
    camera: &crate::dataset::Camera,
    cfg: &RenderConfig,
    seed: u64,
    image: u64,
) -> Result<(crate::dataset::ImageF32, crate::dataset::ImageF32), RenderError> {
    let (w, h) = (camera.width, camera.height);
    let pixels: Result<Vec<RayColors<T>>, RenderError> = (0..(w * h))
        .into_par_iter()
        .map(|i| render_pixel(model, camera, i / w, i % w, cfg, seed, image))
        .collect();
    let pixels = pixels?;
    let mut fine = crate::dataset::ImageF32::new(w, h);
    let mut coarse = crate::dataset::ImageF32::new(w, h);
    for (i, px) in pixels.iter().enumerate() {
        let (r, c) = (i as u32 / w, i as u32 % w);
        fine.set_pixel(r, c, [
            px.fine[0].as_f64() as f32,
            px.fine[1].as_f64() as f32,
            px.fine[2].as_f64() as f32,
        ]);
        coarse.set_pixel(r, c, [
            px.coarse[0].as_f64() as f32,
            px.coarse[1].as_f64() as f32,
            px.coarse[2].as_f64() as f32,
        ]);
    }
    Ok((fine, coarse))
}

/// Everything the trainer needs from one differentiable pass over a ray.
pub struct PassTrace<T: Real> {
    pub ts: Vec<f64>,
    pub features: Array2<T>,
    pub views: Array2<T>,
    pub taus: Array1<T>,
    pub rgbs: Array2<T>,
    pub weights: Vec<T>,
    pub transmittances: Vec<T>,
    pub color: [T; 3],
    pub cache: ForwardCache<T>,
}

impl<T: Real> PassTrace<T> {
    pub fn sample_set(&self) -> RaySampleSet<T> {
        RaySampleSet {
            t_values: self.ts.clone(),
            taus: self.taus.to_vec(),
            colors: self.rgbs.clone(),
            weights: self.weights.clone(),
            transmittances: self.transmittances.clone(),
        }
    }
}

/// Differentiable coarse+fine trace of one ray, keeping forward caches.
///
/// Sample placement (the coarse stratification and the weight-driven fine
/// resampling) is treated as a constant of the graph: gradients flow through
/// the MLP outputs at the chosen samples, not through the sample positions.
pub fn trace_ray<T: Real>(
    model: &FieldModel<T>,
    ray: &Ray,
    cfg: &RenderConfig,
    key: RayRngKey,
    subsample: u64,
) -> Result<(PassTrace<T>, PassTrace<T>), RenderError> {
    let mut rng_c = key.pass_rng(PASS_COARSE, subsample);
    let coarse_ts = stratified_samples(cfg.t_near, cfg.t_far, cfg.n_coarse + 1, &mut rng_c)?;
    let (taus, rgbs, features, views, cache) = model.trace_pass(ray, &coarse_ts, false)?;
    let (color, weights, trans) = composite(taus.as_slice().unwrap(), rgbs.view(), &coarse_ts)?;
    let coarse = PassTrace {
        color: finish_color(color, &weights, cfg.white_background),
        ts: coarse_ts,
        features,
        views,
        taus,
        rgbs,
        weights,
        transmittances: trans,
        cache,
    };

    let fine_ts = resample_fine(&coarse.ts, &coarse.weights, cfg, key, subsample)?;
    let fine_ts = if model.union_fine { sorted_union(&coarse.ts, &fine_ts) } else { fine_ts };
    if !model.union_fine {
        debug_assert_eq!(fine_ts.len(), cfg.n_fine + 1);
    }
    let (taus, rgbs, features, views, cache) = model.trace_pass(ray, &fine_ts, true)?;
    let (color, weights, trans) = composite(taus.as_slice().unwrap(), rgbs.view(), &fine_ts)?;
    let fine = PassTrace {
        color: finish_color(color, &weights, cfg.white_background),
        ts: fine_ts,
        features,
        views,
        taus,
        rgbs,
        weights,
        transmittances: trans,
        cache,
    };
    Ok((coarse, fine))
}

/// Backpropagate an upstream gradient on a pass's output color into the
/// MLP parameter gradients for that pass.
pub fn backward_pass<T: Real>(
    model: &FieldModel<T>,
    trace: &PassTrace<T>,
    fine_pass: bool,
    d_color: [T; 3],
    white_background: bool,
    grads: &mut GradientBuffer<T>,
) {
    let bg = if white_background { Some([T::one(); 3]) } else { None };
    let (d_taus, d_rgbs) = composite_backward(
        trace.taus.as_slice().unwrap(),
        trace.rgbs.view(),
        &trace.ts,
        &trace.weights,
        &trace.transmittances,
        d_color,
        bg,
    );
    let d_taus = Array1::from_vec(d_taus);
    let mlp = if fine_pass { model.params.fine() } else { model.params.coarse() };
    mlp.backward(&trace.cache, d_taus.view(), d_rgbs.view(), grads);
}
