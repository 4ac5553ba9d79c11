//! Experiment orchestration shared by the command-line tool and the
//! acceptance suite: dataset generation from a config, training runs with
//! their on-disk artifacts, evaluation tables, and the positional-encoding
//! degree sweep.

use crate::config::RunConfig;
use crate::dataset::{
    build_multiscale, camera_rig, generate_scene, three_spheres_scene, Camera, ImageF32,
    MultiscaleDataset, SceneSpec,
};
use crate::metrics::{self, MetricReport};
use crate::renderer::{render_image, FieldModel, FieldParams, RenderConfig};
use crate::trainer::{self, TrainError, TrainOutputs};
use rayon::prelude::*;
use serde::Serialize;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("unknown scene `{0}` (available: three-spheres)")]
    UnknownScene(String),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Render(#[from] crate::renderer::RenderError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error(transparent)]
    Field(#[from] crate::field::FieldError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub fn scene_from_config(cfg: &RunConfig) -> Result<SceneSpec, ExperimentError> {
    match cfg.scene.as_str() {
        "three-spheres" => Ok(three_spheres_scene(cfg.world_scale)),
        other => Err(ExperimentError::UnknownScene(other.to_string())),
    }
}

fn rig(cfg: &RunConfig, count: usize, phase: f64) -> Vec<Camera> {
    camera_rig(
        count,
        cfg.ring_radius(),
        cfg.fov_rad(),
        cfg.image_size,
        cfg.image_size,
        cfg.near(),
        cfg.far(),
        phase,
    )
}

fn render_rig(
    scene: &SceneSpec,
    cams: &[Camera],
    grid: u32,
) -> Result<Vec<ImageF32>, ExperimentError> {
    let imgs: Result<Vec<ImageF32>, _> = cams
        .par_iter()
        .map(|c| generate_scene(scene, c, grid))
        .collect();
    Ok(imgs?)
}

/// Generate the train and test splits for a config, in memory.
pub fn generate_datasets(
    cfg: &RunConfig,
) -> Result<(MultiscaleDataset, MultiscaleDataset), ExperimentError> {
    let scene = scene_from_config(cfg)?;
    let train_cams = rig(cfg, cfg.train_poses, 0.0);
    // Offset phase keeps test poses away from train azimuths.
    let test_cams = rig(cfg, cfg.test_poses, 0.77);
    let train_imgs = render_rig(&scene, &train_cams, cfg.gt_grid)?;
    let test_imgs = render_rig(&scene, &test_cams, cfg.gt_grid)?;
    Ok((
        build_multiscale(&train_imgs, &train_cams, &cfg.scales)?,
        build_multiscale(&test_imgs, &test_cams, &cfg.scales)?,
    ))
}

/// Generate and write both splits under `dir` (used by `gen-data`).
pub fn write_datasets(cfg: &RunConfig, dir: &Path) -> Result<(), ExperimentError> {
    let (train, test) = generate_datasets(cfg)?;
    std::fs::create_dir_all(dir)?;
    crate::dataset::write_split(dir, "train", &train)?;
    crate::dataset::write_split(dir, "test", &test)?;
    Ok(())
}

pub fn load_datasets(
    cfg: &RunConfig,
    dir: &Path,
) -> Result<(MultiscaleDataset, MultiscaleDataset), ExperimentError> {
    Ok((
        crate::dataset::load_split(dir, "train", &cfg.scales, cfg.near(), cfg.far())?,
        crate::dataset::load_split(dir, "test", &cfg.scales, cfg.near(), cfg.far())?,
    ))
}

/// Per-(scale, pose) evaluation row.
#[derive(Clone, Debug, Serialize)]
pub struct EvalRow {
    pub scale: u32,
    pub pose: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub avg2: f64,
}

/// Render the fine pass for every requested scale/pose of the test split and
/// compare against ground truth.
pub fn evaluate_model(
    model: &FieldModel<f32>,
    test: &MultiscaleDataset,
    scales: &[u32],
    render_cfg: &RenderConfig,
    seed: u64,
) -> Result<Vec<EvalRow>, ExperimentError> {
    let mut rows = Vec::new();
    for &scale in scales {
        let level = test
            .levels
            .iter()
            .find(|l| l.factor == scale)
            .ok_or(TrainError::MissingScale(scale))?;
        for (pose, (img, cam)) in level.images.iter().zip(level.cameras.iter()).enumerate() {
            let (fine, _) = render_image(model, cam, render_cfg, seed, (scale as u64) << 32 | pose as u64)?;
            let MetricReport { psnr, ssim, avg2 } = metrics::report(&fine, img)?;
            rows.push(EvalRow { scale, pose, psnr, ssim, avg2 });
        }
    }
    Ok(rows)
}

/// Mean PSNR per scale from evaluation rows.
pub fn mean_psnr(rows: &[EvalRow], scale: u32) -> f64 {
    let sel: Vec<f64> = rows.iter().filter(|r| r.scale == scale).map(|r| r.psnr).collect();
    sel.iter().sum::<f64>() / sel.len() as f64
}

/// Mean two-term summary across all scales present in the rows (the
/// arithmetic mean over scales of per-scale means).
pub fn mean_avg2(rows: &[EvalRow]) -> f64 {
    let mut scales: Vec<u32> = rows.iter().map(|r| r.scale).collect();
    scales.sort_unstable();
    scales.dedup();
    let per_scale: Vec<f64> = scales
        .iter()
        .map(|&s| {
            let sel: Vec<f64> = rows.iter().filter(|r| r.scale == s).map(|r| r.avg2).collect();
            sel.iter().sum::<f64>() / sel.len() as f64
        })
        .collect();
    per_scale.iter().sum::<f64>() / per_scale.len() as f64
}

/// Write the metrics table: one row per (scene, scale, method), metrics
/// averaged over test poses. The summary column is labeled avg2 because it
/// omits the perceptual term.
pub fn write_metrics_csv(
    path: &Path,
    scene: &str,
    methods: &[(String, Vec<EvalRow>)],
) -> std::io::Result<()> {
    let mut s = String::from("scene,scale,method,psnr,ssim,avg2\n");
    for (method, rows) in methods {
        let mut scales: Vec<u32> = rows.iter().map(|r| r.scale).collect();
        scales.sort_unstable();
        scales.dedup();
        for scale in scales {
            let sel: Vec<&EvalRow> = rows.iter().filter(|r| r.scale == scale).collect();
            let n = sel.len() as f64;
            let psnr = sel.iter().map(|r| r.psnr).sum::<f64>() / n;
            let ssim = sel.iter().map(|r| r.ssim).sum::<f64>() / n;
            let avg2 = sel.iter().map(|r| r.avg2).sum::<f64>() / n;
            s.push_str(&format!(
                "{scene},{scale},{method},{psnr:.6},{ssim:.6},{avg2:.8}\n"
            ));
        }
    }
    std::fs::write(path, s)
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config: &'a RunConfig,
}

/// Every command records its full configuration next to its artifacts.
pub fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig) -> Result<(), ExperimentError> {
    std::fs::create_dir_all(dir)?;
    let manifest = Manifest { command, config: cfg };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Train per the config and write all artifacts (logs, checkpoints,
/// manifest) under `out` when given.
pub fn run_training(
    cfg: &RunConfig,
    train_ds: &MultiscaleDataset,
    test_ds: Option<&MultiscaleDataset>,
    out: Option<&Path>,
) -> Result<TrainOutputs, ExperimentError> {
    let setup = cfg.train_setup();
    let outputs = trainer::train(train_ds, test_ds, &setup)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        trainer::write_train_csv(&dir.join("train.csv"), &outputs.train_log)?;
        trainer::write_timing_csv(&dir.join("timing.csv"), &outputs.timings_ms)?;
        trainer::write_eval_csv(&dir.join("eval.csv"), &outputs.eval_log)?;
        save_model(&outputs.model, dir)?;
    }
    Ok(outputs)
}

pub fn save_model(model: &FieldModel<f32>, dir: &Path) -> Result<(), ExperimentError> {
    match &model.params {
        FieldParams::Single(m) => m.save(&dir.join("model.ckpt"))?,
        FieldParams::Two { coarse, fine } => {
            coarse.save(&dir.join("model_coarse.ckpt"))?;
            fine.save(&dir.join("model_fine.ckpt"))?;
        }
    }
    Ok(())
}

/// Rebuild a trained model from a run directory (its manifest supplies the
/// architecture and encoder).
pub fn load_model(run_dir: &Path) -> Result<(FieldModel<f32>, RunConfig), ExperimentError> {
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("manifest.json"))?)?;
    let cfg: RunConfig = serde_json::from_value(manifest["config"].clone())?;
    let params = if cfg.two_mlps {
        FieldParams::Two {
            coarse: crate::field::RadianceMlp::load(&run_dir.join("model_coarse.ckpt"))?,
            fine: crate::field::RadianceMlp::load(&run_dir.join("model_fine.ckpt"))?,
        }
    } else {
        FieldParams::Single(crate::field::RadianceMlp::load(&run_dir.join("model.ckpt"))?)
    };
    Ok((
        FieldModel { encoder: cfg.encoder(), l_dir: cfg.l_dir, params, union_fine: cfg.two_mlps },
        cfg,
    ))
}

/// One sweep measurement: a variant (`pe` or `ipe`) trained at degree `l`.
#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub variant: String,
    pub l: usize,
    pub psnr: f64,
}

/// Train each encoding variant at every requested degree and report mean
/// full-resolution test PSNR. The datasets are built once per call.
pub fn sweep_l(
    base: &RunConfig,
    l_values: &[usize],
    variants: &[String],
    progress: bool,
) -> Result<Vec<SweepRow>, ExperimentError> {
    let mut cfg = base.clone();
    // The degree sweep probes representation bandwidth on single-scale data.
    cfg.scales = vec![1];
    cfg.eval_scales = vec![];
    let (train_ds, test_ds) = generate_datasets(&cfg)?;
    let mut rows = Vec::new();
    for variant in variants {
        for &l in l_values {
            let mut run = cfg.clone();
            run.encoding = variant.clone();
            run.l_pos = l;
            let outputs = run_training(&run, &train_ds, None, None)?;
            let eval = evaluate_model(
                &outputs.model,
                &test_ds,
                &[1],
                &run.render_config(),
                run.seed,
            )?;
            let psnr = mean_psnr(&eval, 1);
            if progress {
                eprintln!("sweep: variant={variant} L={l} psnr={psnr:.3}");
            }
            rows.push(SweepRow { variant: variant.clone(), l, psnr });
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> std::io::Result<()> {
    let mut s = String::from("variant,l,psnr\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.6}\n", r.variant, r.l, r.psnr));
    }
    std::fs::write(path, s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        for (k, v) in [
            ("image_size", "16"),
            ("train_poses", "2"),
            ("test_poses", "1"),
            ("scales", "1,2"),
            ("eval_scales", "2"),
            ("gt_grid", "2"),
            ("iterations", "3"),
            ("batch", "4"),
            ("n_coarse", "6"),
            ("n_fine", "6"),
            ("l_pos", "4"),
            ("l_dir", "2"),
            ("mlp_depth", "2"),
            ("mlp_width", "12"),
            ("view_width", "6"),
            ("eval_every", "0"),
        ] {
            cfg.apply(k, v).unwrap();
        }
        cfg
    }

    #[test]
    fn unknown_scene_is_rejected() {
        let mut cfg = tiny_cfg();
        cfg.scene = "teapot".into();
        assert!(matches!(
            generate_datasets(&cfg),
            Err(ExperimentError::UnknownScene(_))
        ));
    }

    #[test]
    fn train_artifacts_round_trip() {
        let cfg = tiny_cfg();
        let dir = tempfile::tempdir().unwrap();
        let (train_ds, test_ds) = generate_datasets(&cfg).unwrap();
        let outputs = run_training(&cfg, &train_ds, Some(&test_ds), Some(dir.path())).unwrap();
        write_manifest(dir.path(), "train", &cfg).unwrap();
        assert!(dir.path().join("train.csv").exists());
        assert!(dir.path().join("timing.csv").exists());
        assert!(dir.path().join("model.ckpt").exists());
        let (loaded, loaded_cfg) = load_model(dir.path()).unwrap();
        assert_eq!(loaded_cfg, cfg);
        // Loaded model renders identically to the trained one.
        let cam = test_ds.levels[0].cameras[0];
        let a = render_image(&outputs.model, &cam, &cfg.render_config(), 0, 0).unwrap();
        let b = render_image(&loaded, &cam, &cfg.render_config(), 0, 0).unwrap();
        assert_eq!(a.0.data, b.0.data);
    }

    #[test]
    fn eval_rows_cover_scales_and_poses() {
        let cfg = tiny_cfg();
        let (train_ds, test_ds) = generate_datasets(&cfg).unwrap();
        let outputs = run_training(&cfg, &train_ds, None, None).unwrap();
        // 16x16 at scale 2 gives 8x8 which is too small for the structural
        // metric window, so evaluate at full resolution only.
        let rows =
            evaluate_model(&outputs.model, &test_ds, &[1], &cfg.render_config(), 0).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].psnr.is_finite());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_metrics_csv(&path, &cfg.scene, &[("ipe".into(), rows)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2, "header plus one (scene,scale,method) row");
        assert!(text.contains("three-spheres,1,ipe,"));
    }
}
