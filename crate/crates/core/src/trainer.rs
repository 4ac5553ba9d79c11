//! The optimization loop: coarse+fine loss on a single multiscale MLP (or
//! separate networks for the two-network ablation), footprint-area-weighted
//! ray batches drawn uniformly over all pixels of all scales, Adam with
//! sinusoidal warmup and logarithmic decay, and deterministic CSV logging.
//!
//! Two runs with the same seed produce bit-identical logs and checkpoints:
//! every random decision is keyed by logical indices, batches are processed
//! in fixed-size chunks, and chunk gradients are reduced in index order.
//! Wall-clock timings go to a separate sidecar that is excluded from the
//! determinism contract.

use crate::dataset::{Camera, MultiscaleDataset};
use crate::field::{GradientBuffer, ModelSpec, RadianceMlp};
use crate::geometry::pixel_cone_at;
use crate::metrics;
use crate::renderer::{
    backward_pass, render_image, trace_ray, FieldModel, FieldParams, RayRngKey, RenderConfig,
    RenderError, SpatialEncoder,
};
use crate::rng::{stream, stream_rng};
use crate::Real;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
    #[error(transparent)]
    Field(#[from] crate::field::FieldError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error("non-finite loss at iteration {iter}: coarse={loss_coarse} fine={loss_fine}")]
    NonFiniteLoss { iter: usize, loss_coarse: f64, loss_fine: f64 },
    #[error("non-finite gradient at iteration {iter}")]
    NonFiniteGradient { iter: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("requested scale {0} not present in dataset")]
    MissingScale(u32),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Optimization hyperparameters. Defaults are the desk-scale preset; the
/// published-scale constants (1M iterations, 4096-ray batches) remain
/// selectable through the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Balance of the coarse loss term against the fine one.
    pub lambda_coarse: f64,
    pub lr_init: f64,
    pub lr_final: f64,
    pub warmup_iters: usize,
    pub warmup_scale: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub eval_every: usize,
    /// Separate coarse/fine networks with a union-sorted fine pass.
    pub two_mlps: bool,
    /// Scale each pixel's loss by its footprint area (factor squared).
    pub area_loss: bool,
    /// Jittered cones per training pixel, averaged before the loss.
    pub supersample_train: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 25_000,
            batch_size: 64,
            lambda_coarse: 0.1,
            lr_init: 5e-4,
            lr_final: 5e-6,
            warmup_iters: 2500,
            warmup_scale: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            eval_every: 2500,
            two_mlps: false,
            area_loss: true,
            supersample_train: 1,
        }
    }
}

/// Learning rate at iteration `i`: logarithmic interpolation between the
/// initial and final rates, scaled by a sinusoidal warmup envelope over the
/// first `warmup_iters` iterations.
pub fn learning_rate(i: usize, cfg: &TrainConfig) -> f64 {
    let n = cfg.iterations.max(1) as f64;
    let frac = i as f64 / n;
    let warm = if cfg.warmup_iters == 0 {
        1.0
    } else {
        let p = (i as f64 / cfg.warmup_iters as f64).clamp(0.0, 1.0);
        cfg.warmup_scale + (1.0 - cfg.warmup_scale) * (std::f64::consts::FRAC_PI_2 * p).sin()
    };
    warm * ((1.0 - frac) * cfg.lr_init.ln() + frac * cfg.lr_final.ln()).exp()
}

/// Gradients for whichever parameter layout the model uses.
#[derive(Clone, Debug)]
pub enum ModelGrads<T> {
    Single(GradientBuffer<T>),
    Two { coarse: GradientBuffer<T>, fine: GradientBuffer<T> },
}

impl<T: Real> ModelGrads<T> {
    pub fn zeros(params: &FieldParams<T>) -> Self {
        match params {
            FieldParams::Single(m) => ModelGrads::Single(GradientBuffer::zeros(&m.spec)),
            FieldParams::Two { coarse, fine } => ModelGrads::Two {
                coarse: GradientBuffer::zeros(&coarse.spec),
                fine: GradientBuffer::zeros(&fine.spec),
            },
        }
    }

    pub fn coarse_mut(&mut self) -> &mut GradientBuffer<T> {
        match self {
            ModelGrads::Single(g) => g,
            ModelGrads::Two { coarse, .. } => coarse,
        }
    }

    pub fn fine_mut(&mut self) -> &mut GradientBuffer<T> {
        match self {
            ModelGrads::Single(g) => g,
            ModelGrads::Two { fine, .. } => fine,
        }
    }

    pub fn add_assign(&mut self, other: &ModelGrads<T>) {
        match (self, other) {
            (ModelGrads::Single(a), ModelGrads::Single(b)) => a.add_assign(b),
            (
                ModelGrads::Two { coarse: ac, fine: af },
                ModelGrads::Two { coarse: bc, fine: bf },
            ) => {
                ac.add_assign(bc);
                af.add_assign(bf);
            }
            _ => panic!("mismatched gradient layouts"),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            ModelGrads::Single(g) => g.is_finite(),
            ModelGrads::Two { coarse, fine } => coarse.is_finite() && fine.is_finite(),
        }
    }

    fn buffers(&self) -> Vec<&GradientBuffer<T>> {
        match self {
            ModelGrads::Single(g) => vec![g],
            ModelGrads::Two { coarse, fine } => vec![coarse, fine],
        }
    }

    fn buffers_mut(&mut self) -> Vec<&mut GradientBuffer<T>> {
        match self {
            ModelGrads::Single(g) => vec![g],
            ModelGrads::Two { coarse, fine } => vec![coarse, fine],
        }
    }
}

/// Adam first/second moment state, shaped like the model gradients.
pub struct AdamState<T> {
    pub m: ModelGrads<T>,
    pub v: ModelGrads<T>,
    pub step: usize,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &FieldParams<T>) -> Self {
        AdamState { m: ModelGrads::zeros(params), v: ModelGrads::zeros(params), step: 0 }
    }
}

fn param_buffers_mut<T: Real>(params: &mut FieldParams<T>) -> Vec<&mut RadianceMlp<T>> {
    match params {
        FieldParams::Single(m) => vec![m],
        FieldParams::Two { coarse, fine } => vec![coarse, fine],
    }
}

/// One Adam update with bias correction over every parameter tensor.
pub fn adam_step<T: Real>(
    params: &mut FieldParams<T>,
    grads: &ModelGrads<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) {
    state.step += 1;
    let t = state.step as f64;
    let b1 = T::of_f64(cfg.beta1);
    let b2 = T::of_f64(cfg.beta2);
    let one = T::one();
    let eps = T::of_f64(cfg.adam_eps);
    let corr1 = T::of_f64(1.0 - cfg.beta1.powf(t));
    let corr2 = T::of_f64(1.0 - cfg.beta2.powf(t));
    let lr_t = T::of_f64(lr);

    let models = param_buffers_mut(params);
    let g_buffers = grads.buffers();
    let mut m_buffers = state.m.buffers_mut();
    let mut v_buffers = state.v.buffers_mut();
    for (((model, g), m), v) in models
        .into_iter()
        .zip(g_buffers)
        .zip(m_buffers.iter_mut())
        .zip(v_buffers.iter_mut())
    {
        for (((pd, gd), md), vd) in model
            .layers_mut()
            .into_iter()
            .zip(g.layers())
            .zip(m.layers_mut())
            .zip(v.layers_mut())
        {
            let update = |p: &mut T, g: T, m: &mut T, v: &mut T| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / corr1;
                let v_hat = *v / corr2;
                *p = *p - lr_t * m_hat / (v_hat.sqrt() + eps);
            };
            for ((p, g), (m, v)) in pd
                .w
                .iter_mut()
                .zip(gd.w.iter())
                .zip(md.w.iter_mut().zip(vd.w.iter_mut()))
            {
                update(p, *g, m, v);
            }
            for ((p, g), (m, v)) in pd
                .b
                .iter_mut()
                .zip(gd.b.iter())
                .zip(md.b.iter_mut().zip(vd.b.iter_mut()))
            {
                update(p, *g, m, v);
            }
        }
    }
}

/// One training pixel resolved out of the dataset.
#[derive(Clone, Debug)]
pub struct TrainPixel {
    pub camera: Camera,
    pub target: [f64; 3],
    pub area_weight: f64,
    pub row: u32,
    pub col: u32,
    /// Stable identifier feeding the pixel's RNG stream.
    pub stream_id: u64,
}

/// Mean over the batch of `a_r (lambda |C* - C_coarse|^2 + |C* - C_fine|^2)`
/// plus the gradients of that mean, via the hand-derived backward passes.
///
/// Sample placement is a constant of the differentiated graph: the same
/// stop-gradient treatment the optimizer applies.
pub fn batch_loss_and_grads<T: Real>(
    model: &FieldModel<T>,
    batch: &[TrainPixel],
    rcfg: &RenderConfig,
    lambda: f64,
    supersample: usize,
    ray_seed: u64,
) -> Result<(f64, f64, ModelGrads<T>), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    const CHUNK: usize = 8;
    let inv_n = 1.0 / batch.len() as f64;
    let k = supersample.max(1);
    let results: Result<Vec<(f64, f64, ModelGrads<T>)>, TrainError> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grads = ModelGrads::zeros(&model.params);
            let mut loss_c = 0.0;
            let mut loss_f = 0.0;
            for px in chunk {
                let key = RayRngKey {
                    seed: ray_seed,
                    image: px.stream_id,
                    pixel: (px.row as u64) << 32 | px.col as u64,
                };
                let shrink = 1.0 / (k as f64).sqrt();
                let mut jitter = key.pass_rng(2, 0);
                let mut traces = Vec::with_capacity(k);
                let mut c_sum = [T::zero(); 3];
                let mut f_sum = [T::zero(); 3];
                for s in 0..k {
                    let (dx, dy, rs, sub) = if k == 1 {
                        (0.5, 0.5, 1.0, 0)
                    } else {
                        (jitter.random(), jitter.random(), shrink, s as u64 + 1)
                    };
                    let ray = pixel_cone_at(&px.camera, px.row, px.col, dx, dy, rs)
                        .map_err(RenderError::from)?;
                    let (coarse, fine) = trace_ray(model, &ray, rcfg, key, sub)?;
                    for c in 0..3 {
                        c_sum[c] += coarse.color[c];
                        f_sum[c] += fine.color[c];
                    }
                    traces.push((coarse, fine));
                }
                let inv_k = T::of_f64(1.0 / k as f64);
                let c_avg = [c_sum[0] * inv_k, c_sum[1] * inv_k, c_sum[2] * inv_k];
                let f_avg = [f_sum[0] * inv_k, f_sum[1] * inv_k, f_sum[2] * inv_k];
                let mut res_c = [0.0f64; 3];
                let mut res_f = [0.0f64; 3];
                for c in 0..3 {
                    res_c[c] = c_avg[c].as_f64() - px.target[c];
                    res_f[c] = f_avg[c].as_f64() - px.target[c];
                }
                let sq = |r: &[f64; 3]| r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
                loss_c += px.area_weight * lambda * sq(&res_c);
                loss_f += px.area_weight * sq(&res_f);

                // d loss / d (averaged colors), with the batch mean folded in.
                let scale_c = 2.0 * lambda * px.area_weight * inv_n / k as f64;
                let scale_f = 2.0 * px.area_weight * inv_n / k as f64;
                let d_c = [
                    T::of_f64(scale_c * res_c[0]),
                    T::of_f64(scale_c * res_c[1]),
                    T::of_f64(scale_c * res_c[2]),
                ];
                let d_f = [
                    T::of_f64(scale_f * res_f[0]),
                    T::of_f64(scale_f * res_f[1]),
                    T::of_f64(scale_f * res_f[2]),
                ];
                let coarse_zero = d_c.iter().all(|v| *v == T::zero());
                let fine_zero = d_f.iter().all(|v| *v == T::zero());
                for (coarse, fine) in &traces {
                    if !coarse_zero {
                        backward_pass(model, coarse, false, d_c, rcfg.white_background, grads.coarse_mut());
                    }
                    if !fine_zero {
                        backward_pass(model, fine, true, d_f, rcfg.white_background, grads.fine_mut());
                    }
                }
            }
            Ok((loss_c, loss_f, grads))
        })
        .collect();
    let results = results?;
    let mut total = ModelGrads::zeros(&model.params);
    let mut loss_c = 0.0;
    let mut loss_f = 0.0;
    for (lc, lf, g) in &results {
        loss_c += lc;
        loss_f += lf;
        total.add_assign(g);
    }
    Ok((loss_c * inv_n, loss_f * inv_n, total))
}

/// Everything needed to construct and train a model.
#[derive(Clone, Debug)]
pub struct TrainSetup {
    pub train: TrainConfig,
    pub render: RenderConfig,
    pub model_spec: ModelSpec,
    pub encoder: SpatialEncoder,
    pub l_dir: usize,
    /// Scales evaluated at the periodic eval cadence (test split).
    pub eval_scales: Vec<u32>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainLogRow {
    pub iter: usize,
    pub loss_coarse: f64,
    pub loss_fine: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalLogRow {
    pub iter: usize,
    pub scale: u32,
    pub pose: usize,
    pub psnr: f64,
}

pub struct TrainOutputs {
    pub model: FieldModel<f32>,
    pub train_log: Vec<TrainLogRow>,
    pub eval_log: Vec<EvalLogRow>,
    /// Wall-clock milliseconds per logged iteration; excluded from the
    /// determinism contract.
    pub timings_ms: Vec<(usize, f64)>,
}

pub fn build_model(setup: &TrainSetup) -> FieldModel<f32> {
    let params = if setup.train.two_mlps {
        FieldParams::Two {
            coarse: RadianceMlp::new(setup.model_spec, setup.train.seed),
            fine: RadianceMlp::new(setup.model_spec, setup.train.seed ^ 0x9E37_79B9),
        }
    } else {
        FieldParams::Single(RadianceMlp::new(setup.model_spec, setup.train.seed))
    };
    FieldModel {
        encoder: setup.encoder,
        l_dir: setup.l_dir,
        params,
        union_fine: setup.train.two_mlps,
    }
}

fn draw_batch(dataset: &MultiscaleDataset, cfg: &TrainConfig, iter: usize) -> Vec<TrainPixel> {
    let total = dataset.total_pixels();
    let mut rng = stream_rng(cfg.seed, &[stream::TRAIN_BATCH, iter as u64]);
    (0..cfg.batch_size)
        .map(|slot| {
            let idx = rng.random_range(0..total);
            let (li, ii, row, col) = dataset.locate(idx);
            let level = &dataset.levels[li];
            let img = &level.images[ii];
            let px = img.pixel(row, col);
            TrainPixel {
                camera: level.cameras[ii],
                target: [px[0] as f64, px[1] as f64, px[2] as f64],
                area_weight: if cfg.area_loss { level.loss_weight } else { 1.0 },
                row,
                col,
                stream_id: slot as u64,
            }
        })
        .collect()
}

/// Render the test split at the given scale and report per-pose PSNR of the
/// fine pass.
pub fn eval_psnr(
    model: &FieldModel<f32>,
    test: &MultiscaleDataset,
    scale: u32,
    render: &RenderConfig,
    seed: u64,
) -> Result<Vec<f64>, TrainError> {
    let level = test
        .levels
        .iter()
        .find(|l| l.factor == scale)
        .ok_or(TrainError::MissingScale(scale))?;
    let mut out = Vec::with_capacity(level.images.len());
    for (i, (img, cam)) in level.images.iter().zip(level.cameras.iter()).enumerate() {
        let (fine, _) = render_image(model, cam, render, seed, (scale as u64) << 32 | i as u64)?;
        out.push(metrics::psnr(&fine, img)?);
    }
    Ok(out)
}

/// Full training run. Deterministic given the setup (including seed); the
/// returned logs and model are bit-identical across repeated runs.
pub fn train(
    dataset: &MultiscaleDataset,
    test: Option<&MultiscaleDataset>,
    setup: &TrainSetup,
) -> Result<TrainOutputs, TrainError> {
    let cfg = &setup.train;
    let mut model = build_model(setup);
    let mut adam = AdamState::new(&model.params);
    let mut train_log = Vec::new();
    let mut eval_log = Vec::new();
    let mut timings = Vec::new();

    let log_every = (cfg.iterations / 500).max(1);
    for iter in 0..cfg.iterations {
        let t0 = std::time::Instant::now();
        let batch = draw_batch(dataset, cfg, iter);
        let ray_seed = stream_rng(cfg.seed, &[stream::TRAIN_RAY, iter as u64]).random();
        let (loss_c, loss_f, grads) = batch_loss_and_grads(
            &model,
            &batch,
            &setup.render,
            cfg.lambda_coarse,
            cfg.supersample_train,
            ray_seed,
        )?;
        if !loss_c.is_finite() || !loss_f.is_finite() {
            return Err(TrainError::NonFiniteLoss { iter, loss_coarse: loss_c, loss_fine: loss_f });
        }
        if !grads.is_finite() {
            return Err(TrainError::NonFiniteGradient { iter });
        }
        let lr = learning_rate(iter, cfg);
        adam_step(&mut model.params, &grads, &mut adam, lr, cfg);

        if iter % log_every == 0 || iter + 1 == cfg.iterations {
            train_log.push(TrainLogRow { iter, loss_coarse: loss_c, loss_fine: loss_f, lr });
            timings.push((iter, t0.elapsed().as_secs_f64() * 1e3));
        }
        let at_eval = cfg.eval_every > 0 && (iter + 1) % cfg.eval_every == 0;
        if at_eval {
            if let Some(test) = test {
                for &scale in &setup.eval_scales {
                    for (pose, psnr) in eval_psnr(&model, test, scale, &setup.render, cfg.seed)?
                        .into_iter()
                        .enumerate()
                    {
                        eval_log.push(EvalLogRow { iter: iter + 1, scale, pose, psnr });
                    }
                }
            }
        }
    }
    Ok(TrainOutputs { model, train_log, eval_log, timings_ms: timings })
}

/// Write the deterministic training log.
pub fn write_train_csv(path: &Path, rows: &[TrainLogRow]) -> std::io::Result<()> {
    let mut s = String::from("iter,loss_coarse,loss_fine,lr\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.10e},{:.10e},{:.10e}\n",
            r.iter, r.loss_coarse, r.loss_fine, r.lr
        ));
    }
    std::fs::write(path, s)
}

/// Write per-iteration wall-clock timings (not covered by determinism).
pub fn write_timing_csv(path: &Path, rows: &[(usize, f64)]) -> std::io::Result<()> {
    let mut s = String::from("iter,wall_ms\n");
    for (iter, ms) in rows {
        s.push_str(&format!("{iter},{ms:.3}\n"));
    }
    std::fs::write(path, s)
}

pub fn write_eval_csv(path: &Path, rows: &[EvalLogRow]) -> std::io::Result<()> {
    let mut s = String::from("iter,scale,pose,psnr\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{:.10e}\n", r.iter, r.scale, r.pose, r.psnr));
    }
    std::fs::write(path, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_multiscale, camera_rig, generate_scene, three_spheres_scene};
    use approx::assert_relative_eq;

    fn tiny_setup(two_mlps: bool) -> TrainSetup {
        let l = 4;
        TrainSetup {
            train: TrainConfig {
                iterations: 4,
                batch_size: 8,
                eval_every: 0,
                two_mlps,
                ..Default::default()
            },
            render: RenderConfig {
                n_coarse: 8,
                n_fine: 8,
                t_near: 2.0,
                t_far: 5.5,
                ..Default::default()
            },
            model_spec: ModelSpec {
                feature_len: 6 * l,
                view_len: 6 * 2,
                depth: 2,
                width: 16,
                skip_layer: None,
                view_width: 8,
            },
            encoder: SpatialEncoder::Ipe { l },
            l_dir: 2,
            eval_scales: vec![],
        }
    }

    fn tiny_dataset() -> MultiscaleDataset {
        let spec = three_spheres_scene(1.0);
        let cams = camera_rig(2, 3.5, 0.7, 16, 16, 2.0, 5.5, 0.0);
        let imgs: Vec<_> = cams.iter().map(|c| generate_scene(&spec, c, 2).unwrap()).collect();
        build_multiscale(&imgs, &cams, &[1, 2]).unwrap()
    }

    #[test]
    fn learning_rate_schedule_endpoints() {
        let cfg = TrainConfig { iterations: 1_000_000, ..Default::default() };
        // i=0: warmup floor times lr_init.
        assert_relative_eq!(learning_rate(0, &cfg), 0.01 * 5e-4, max_relative = 1e-12);
        // i=n_w: warmup factor exactly 1; the decayed rate is on the log line.
        let at_warm = learning_rate(cfg.warmup_iters, &cfg);
        let frac = cfg.warmup_iters as f64 / cfg.iterations as f64;
        let want = ((1.0 - frac) * 5e-4f64.ln() + frac * 5e-6f64.ln()).exp();
        assert_relative_eq!(at_warm, want, max_relative = 1e-12);
        // i=n: final rate.
        assert_relative_eq!(learning_rate(cfg.iterations, &cfg), 5e-6, max_relative = 1e-12);
    }

    #[test]
    fn learning_rate_monotone_after_warmup() {
        let cfg = TrainConfig { iterations: 10_000, ..Default::default() };
        let mut prev = learning_rate(cfg.warmup_iters, &cfg);
        for i in (cfg.warmup_iters + 1..=cfg.iterations).step_by(500) {
            let lr = learning_rate(i, &cfg);
            assert!(lr < prev);
            prev = lr;
        }
    }

    /// Independent scalar Adam, written from the update equations.
    struct ScalarAdam {
        m: Vec<f64>,
        v: Vec<f64>,
        t: usize,
    }

    impl ScalarAdam {
        fn step(&mut self, p: &mut [f64], g: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) {
            self.t += 1;
            for i in 0..p.len() {
                self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
                self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = self.m[i] / (1.0 - b1.powi(self.t as i32));
                let vh = self.v[i] / (1.0 - b2.powi(self.t as i32));
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }

    #[test]
    fn adam_matches_scalar_reference() {
        let setup = tiny_setup(false);
        let model64 = {
            let m = build_model(&setup);
            match m.params {
                FieldParams::Single(ref mlp) => mlp.convert::<f64>(),
                _ => unreachable!(),
            }
        };
        let n = model64.param_count();
        let mut rng = stream_rng(3, &[stream::ORACLE, 70]);
        let g_flat: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();

        // Reference path.
        let mut p_ref: Vec<f64> = (0..n).map(|i| model64.get_param(i).unwrap()).collect();
        let mut scalar = ScalarAdam { m: vec![0.0; n], v: vec![0.0; n], t: 0 };

        // Library path.
        let mut params = FieldParams::Single(model64.clone());
        let mut grads = ModelGrads::zeros(&params);
        {
            let g = grads.coarse_mut();
            let mut idx = 0;
            for d in g.layers_mut() {
                for v in d.w.iter_mut() {
                    *v = g_flat[idx];
                    idx += 1;
                }
                for v in d.b.iter_mut() {
                    *v = g_flat[idx];
                    idx += 1;
                }
            }
        }
        let cfg = setup.train.clone();
        let mut adam = AdamState::new(&params);
        for step in 0..3 {
            let lr = learning_rate(step, &cfg);
            adam_step(&mut params, &grads, &mut adam, lr, &cfg);
            scalar.step(&mut p_ref, &g_flat, lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
        }
        let updated = match params {
            FieldParams::Single(m) => m,
            _ => unreachable!(),
        };
        for i in (0..n).step_by(17) {
            let lib = updated.get_param(i).unwrap();
            assert_relative_eq!(lib, p_ref[i], max_relative = 1e-7, epsilon = 1e-12);
        }
    }

    #[test]
    fn perfect_predictor_has_zero_loss_and_gradient() {
        let setup = tiny_setup(false);
        let model = build_model(&setup);
        let ds = tiny_dataset();
        let mut batch = draw_batch(&ds, &setup.train, 0);
        // Replace targets with the model's own fine renders, then check that
        // the fine loss and all gradients vanish (coarse term disabled so
        // only the exactly-matching pass contributes).
        let ray_seed: u64 = stream_rng(setup.train.seed, &[stream::TRAIN_RAY, 0]).random();
        for px in batch.iter_mut() {
            let key = RayRngKey {
                seed: ray_seed,
                image: px.stream_id,
                pixel: (px.row as u64) << 32 | px.col as u64,
            };
            let ray = pixel_cone_at(&px.camera, px.row, px.col, 0.5, 0.5, 1.0).unwrap();
            let (_, fine) = trace_ray(&model, &ray, &setup.render, key, 0).unwrap();
            px.target = [fine.color[0] as f64, fine.color[1] as f64, fine.color[2] as f64];
        }
        let (_, loss_f, grads) =
            batch_loss_and_grads(&model, &batch, &setup.render, 0.0, 1, ray_seed).unwrap();
        assert_eq!(loss_f, 0.0);
        match grads {
            ModelGrads::Single(g) => {
                for d in g.layers() {
                    assert!(d.w.iter().all(|v| *v == 0.0));
                    assert!(d.b.iter().all(|v| *v == 0.0));
                }
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn lambda_zero_means_no_coarse_gradient() {
        // With lambda = 0 the coarse pass still drives fine sampling but
        // contributes nothing to the gradient. In two-MLP mode the coarse
        // buffer is disjoint, so it must come back untouched.
        let setup = tiny_setup(true);
        let model = build_model(&setup);
        let ds = tiny_dataset();
        let batch = draw_batch(&ds, &setup.train, 1);
        let (_, _, grads) =
            batch_loss_and_grads(&model, &batch, &setup.render, 0.0, 1, 77).unwrap();
        match grads {
            ModelGrads::Two { coarse, fine } => {
                for d in coarse.layers() {
                    assert!(d.w.iter().all(|v| *v == 0.0), "coarse buffer untouched");
                }
                assert!(fine.layers().iter().any(|d| d.w.iter().any(|v| *v != 0.0)));
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn doubling_area_weights_doubles_loss_and_gradients() {
        let setup = tiny_setup(false);
        let model = build_model(&setup);
        let ds = tiny_dataset();
        let batch = draw_batch(&ds, &setup.train, 2);
        let mut doubled = batch.clone();
        for px in doubled.iter_mut() {
            px.area_weight *= 2.0;
        }
        let (lc1, lf1, g1) = batch_loss_and_grads(&model, &batch, &setup.render, 0.1, 1, 5).unwrap();
        let (lc2, lf2, g2) =
            batch_loss_and_grads(&model, &doubled, &setup.render, 0.1, 1, 5).unwrap();
        assert_eq!(lc2, lc1 * 2.0);
        assert_eq!(lf2, lf1 * 2.0);
        let (ModelGrads::Single(a), ModelGrads::Single(b)) = (&g1, &g2) else { unreachable!() };
        for (da, db) in a.layers().iter().zip(b.layers().iter()) {
            for (x, y) in da.w.iter().zip(db.w.iter()) {
                assert_eq!(*y, *x * 2.0);
            }
        }
    }

    #[test]
    fn single_mlp_routes_both_losses_to_one_buffer() {
        let setup = tiny_setup(false);
        let model = build_model(&setup);
        let ds = tiny_dataset();
        let batch = draw_batch(&ds, &setup.train, 3);
        let (_, _, grads) = batch_loss_and_grads(&model, &batch, &setup.render, 0.5, 1, 6).unwrap();
        assert!(matches!(grads, ModelGrads::Single(_)));
        // Two-MLP mode keeps disjoint parameter sets of twice the size.
        let setup2 = tiny_setup(true);
        let model2 = build_model(&setup2);
        assert_eq!(model2.params.param_count(), 2 * model.params.param_count());
        let (_, _, grads2) =
            batch_loss_and_grads(&model2, &batch, &setup2.render, 0.5, 1, 6).unwrap();
        match grads2 {
            ModelGrads::Two { coarse, fine } => {
                assert!(coarse.layers().iter().any(|d| d.w.iter().any(|v| *v != 0.0)));
                assert!(fine.layers().iter().any(|d| d.w.iter().any(|v| *v != 0.0)));
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn zero_iterations_returns_initialization() {
        let mut setup = tiny_setup(false);
        setup.train.iterations = 0;
        let ds = tiny_dataset();
        let out = train(&ds, None, &setup).unwrap();
        let fresh = build_model(&setup);
        let (FieldParams::Single(a), FieldParams::Single(b)) = (&out.model.params, &fresh.params)
        else {
            unreachable!()
        };
        for (x, y) in a.layers().iter().zip(b.layers().iter()) {
            assert_eq!(x.w, y.w);
            assert_eq!(x.b, y.b);
        }
    }

    #[test]
    fn training_is_bit_deterministic() {
        let setup = tiny_setup(false);
        let ds = tiny_dataset();
        let a = train(&ds, None, &setup).unwrap();
        let b = train(&ds, None, &setup).unwrap();
        for (ra, rb) in a.train_log.iter().zip(b.train_log.iter()) {
            assert_eq!(ra.loss_coarse.to_bits(), rb.loss_coarse.to_bits());
            assert_eq!(ra.loss_fine.to_bits(), rb.loss_fine.to_bits());
        }
        let (FieldParams::Single(ma), FieldParams::Single(mb)) = (&a.model.params, &b.model.params)
        else {
            unreachable!()
        };
        for (x, y) in ma.layers().iter().zip(mb.layers().iter()) {
            assert_eq!(x.w, y.w);
        }
    }

    #[test]
    fn training_reduces_loss_on_tiny_scene() {
        let mut setup = tiny_setup(false);
        setup.train.iterations = 150;
        setup.train.batch_size = 16;
        // Skip warmup so the tiny run trains at full rate.
        setup.train.warmup_iters = 0;
        setup.train.lr_init = 2e-3;
        let ds = tiny_dataset();
        let out = train(&ds, None, &setup).unwrap();
        let first: f64 = out.train_log.iter().take(10).map(|r| r.loss_fine).sum::<f64>() / 10.0;
        let last: f64 = out.train_log.iter().rev().take(10).map(|r| r.loss_fine).sum::<f64>() / 10.0;
        assert!(last < first, "loss should fall on a trivial scene: first {first}, last {last}");
    }
}
