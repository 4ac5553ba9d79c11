//! Flat run configuration: a commented `key = value` text file plus
//! command-line overrides. No nesting; unknown keys are rejected by exact
//! name so experiment manifests stay greppable.
//!
//! Defaults are the desk-scale preset (small images, a 4x64 network, 32+32
//! samples, 25k iterations). The published-scale constants are reachable by
//! overriding `image_size`, `mlp_depth=8`, `mlp_width=256`, `skip_layer=4`,
//! `view_width=128`, `n_coarse=128`, `n_fine=128`, `batch=4096`,
//! `iterations=1000000`.

use crate::field::ModelSpec;
use crate::renderer::{RenderConfig, SpatialEncoder};
use crate::trainer::{TrainConfig, TrainSetup};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for key `{key}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("malformed line {line}: expected `key = value`, got `{text}`")]
    MalformedLine { line: usize, text: String },
    #[error("io error: {0}")]
    Io(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    // Scene and dataset.
    pub scene: String,
    pub world_scale: f64,
    pub image_size: u32,
    pub train_poses: usize,
    pub test_poses: usize,
    pub fov_deg: f64,
    /// Camera ring radius; derived from `world_scale` when absent.
    pub ring_radius: Option<f64>,
    /// Near plane; derived from `world_scale` when absent.
    pub near: Option<f64>,
    /// Far plane; derived from `world_scale` when absent.
    pub far: Option<f64>,
    /// Ground-truth supersampling lattice edge (spp is the square).
    pub gt_grid: u32,
    pub scales: Vec<u32>,
    // Model.
    pub encoding: String,
    pub l_pos: usize,
    pub l_dir: usize,
    pub mlp_depth: usize,
    pub mlp_width: usize,
    pub skip_layer: Option<usize>,
    pub view_width: usize,
    // Rendering.
    pub n_coarse: usize,
    pub n_fine: usize,
    pub alpha: f64,
    pub supersample: usize,
    pub white_background: bool,
    // Training.
    pub iterations: usize,
    pub batch: usize,
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
    pub eval_scales: Vec<u32>,
    pub two_mlps: bool,
    pub area_loss: bool,
    pub supersample_train: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scene: "three-spheres".into(),
            world_scale: 0.33,
            image_size: 96,
            train_poses: 16,
            test_poses: 4,
            fov_deg: 40.0,
            ring_radius: None,
            near: None,
            far: None,
            gt_grid: 8,
            scales: vec![1, 2, 4, 8],
            encoding: "ipe".into(),
            l_pos: 16,
            l_dir: 4,
            mlp_depth: 4,
            mlp_width: 64,
            skip_layer: None,
            view_width: 32,
            n_coarse: 32,
            n_fine: 32,
            alpha: 0.01,
            supersample: 1,
            white_background: true,
            iterations: 25_000,
            batch: 64,
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
            eval_scales: vec![8],
            two_mlps: false,
            area_loss: true,
            supersample_train: 1,
        }
    }
}

fn bad(key: &str, value: &str, reason: impl ToString) -> ConfigError {
    ConfigError::BadValue { key: key.into(), value: value.into(), reason: reason.to_string() }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse::<T>().map_err(|e| bad(key, value, e))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(key, value, "expected true/false")),
    }
}

fn parse_scales(key: &str, value: &str) -> Result<Vec<u32>, ConfigError> {
    let list: Result<Vec<u32>, _> = value
        .split(',')
        .map(|s| s.trim().parse::<u32>().map_err(|e| bad(key, value, e)))
        .collect();
    let list = list?;
    if list.is_empty() || list.iter().any(|s| !s.is_power_of_two()) {
        return Err(bad(key, value, "expected comma-separated powers of two"));
    }
    Ok(list)
}

impl RunConfig {
    /// Apply one `key = value` override.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "scene" => self.scene = v.to_string(),
            "world_scale" => self.world_scale = parse_num(key, v)?,
            "image_size" => self.image_size = parse_num(key, v)?,
            "train_poses" => self.train_poses = parse_num(key, v)?,
            "test_poses" => self.test_poses = parse_num(key, v)?,
            "fov_deg" => self.fov_deg = parse_num(key, v)?,
            "ring_radius" => {
                self.ring_radius = if v == "auto" { None } else { Some(parse_num(key, v)?) }
            }
            "near" => self.near = if v == "auto" { None } else { Some(parse_num(key, v)?) },
            "far" => self.far = if v == "auto" { None } else { Some(parse_num(key, v)?) },
            "gt_grid" => self.gt_grid = parse_num(key, v)?,
            "scales" => self.scales = parse_scales(key, v)?,
            "encoding" => match v {
                "ipe" | "pe" | "concat-pe" | "cylinder-ipe" => self.encoding = v.to_string(),
                _ => return Err(bad(key, v, "expected ipe | pe | concat-pe | cylinder-ipe")),
            },
            "l_pos" => self.l_pos = parse_num(key, v)?,
            "l_dir" => self.l_dir = parse_num(key, v)?,
            "mlp_depth" => self.mlp_depth = parse_num(key, v)?,
            "mlp_width" => self.mlp_width = parse_num(key, v)?,
            "skip_layer" => {
                self.skip_layer = if v == "none" { None } else { Some(parse_num(key, v)?) }
            }
            "view_width" => self.view_width = parse_num(key, v)?,
            "n_coarse" => self.n_coarse = parse_num(key, v)?,
            "n_fine" => self.n_fine = parse_num(key, v)?,
            "alpha" => self.alpha = parse_num(key, v)?,
            "supersample" => self.supersample = parse_num(key, v)?,
            "white_background" => self.white_background = parse_bool(key, v)?,
            "iterations" => self.iterations = parse_num(key, v)?,
            "batch" => self.batch = parse_num(key, v)?,
            "lambda_coarse" => self.lambda_coarse = parse_num(key, v)?,
            "lr_init" => self.lr_init = parse_num(key, v)?,
            "lr_final" => self.lr_final = parse_num(key, v)?,
            "warmup_iters" => self.warmup_iters = parse_num(key, v)?,
            "warmup_scale" => self.warmup_scale = parse_num(key, v)?,
            "beta1" => self.beta1 = parse_num(key, v)?,
            "beta2" => self.beta2 = parse_num(key, v)?,
            "adam_eps" => self.adam_eps = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "eval_every" => self.eval_every = parse_num(key, v)?,
            "eval_scales" => self.eval_scales = parse_scales(key, v)?,
            "two_mlps" => self.two_mlps = parse_bool(key, v)?,
            "area_loss" => self.area_loss = parse_bool(key, v)?,
            "supersample_train" => self.supersample_train = parse_num(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Parse a config file: `#` comments, blank lines, `key = value` pairs.
    pub fn from_file(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(e.to_string()))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::MalformedLine { line: lineno + 1, text: raw.to_string() });
            };
            self.apply(key.trim(), value)?;
        }
        Ok(())
    }

    /// Apply `key=value` override strings (from the command line).
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), ConfigError> {
        for ov in overrides {
            let Some((key, value)) = ov.split_once('=') else {
                return Err(ConfigError::MalformedLine { line: 0, text: ov.clone() });
            };
            self.apply(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn ring_radius(&self) -> f64 {
        self.ring_radius.unwrap_or(3.4 * self.world_scale)
    }

    pub fn near(&self) -> f64 {
        self.near.unwrap_or(1.8 * self.world_scale)
    }

    pub fn far(&self) -> f64 {
        self.far.unwrap_or(5.0 * self.world_scale)
    }

    pub fn fov_rad(&self) -> f64 {
        self.fov_deg.to_radians()
    }

    pub fn encoder(&self) -> SpatialEncoder {
        match self.encoding.as_str() {
            "pe" => SpatialEncoder::PointPe { l: self.l_pos },
            "concat-pe" => SpatialEncoder::ConcatPe,
            "cylinder-ipe" => SpatialEncoder::CylinderIpe { l: self.l_pos },
            _ => SpatialEncoder::Ipe { l: self.l_pos },
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            feature_len: self.encoder().feature_len(),
            view_len: 6 * self.l_dir,
            depth: self.mlp_depth,
            width: self.mlp_width,
            skip_layer: self.skip_layer,
            view_width: self.view_width,
        }
    }

    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            n_coarse: self.n_coarse,
            n_fine: self.n_fine,
            alpha: self.alpha,
            t_near: self.near(),
            t_far: self.far(),
            supersample_count: self.supersample,
            white_background: self.white_background,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            batch_size: self.batch,
            lambda_coarse: self.lambda_coarse,
            lr_init: self.lr_init,
            lr_final: self.lr_final,
            warmup_iters: self.warmup_iters,
            warmup_scale: self.warmup_scale,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            seed: self.seed,
            eval_every: self.eval_every,
            two_mlps: self.two_mlps,
            area_loss: self.area_loss,
            supersample_train: self.supersample_train,
        }
    }

    pub fn train_setup(&self) -> TrainSetup {
        TrainSetup {
            train: self.train_config(),
            render: self.render_config(),
            model_spec: self.model_spec(),
            encoder: self.encoder(),
            l_dir: self.l_dir,
            eval_scales: self.eval_scales.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_apply() {
        let mut cfg = RunConfig::default();
        cfg.apply("iterations", "123").unwrap();
        cfg.apply("encoding", "pe").unwrap();
        cfg.apply("scales", "1,2").unwrap();
        cfg.apply("skip_layer", "4").unwrap();
        cfg.apply("two_mlps", "true").unwrap();
        assert_eq!(cfg.iterations, 123);
        assert_eq!(cfg.encoding, "pe");
        assert_eq!(cfg.scales, vec![1, 2]);
        assert_eq!(cfg.skip_layer, Some(4));
        assert!(cfg.two_mlps);
    }

    #[test]
    fn unknown_key_rejected_by_exact_name() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply("iterotions", "5").unwrap_err();
        assert_eq!(err, ConfigError::UnknownKey("iterotions".into()));
    }

    #[test]
    fn bad_values_carry_key_and_value() {
        let mut cfg = RunConfig::default();
        match cfg.apply("iterations", "lots").unwrap_err() {
            ConfigError::BadValue { key, value, .. } => {
                assert_eq!(key, "iterations");
                assert_eq!(value, "lots");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(cfg.apply("encoding", "fourier").is_err());
        assert!(cfg.apply("scales", "3").is_err());
    }

    #[test]
    fn text_parsing_with_comments() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# a comment\n\niterations = 77 # trailing\n  seed=9\n").unwrap();
        assert_eq!(cfg.iterations, 77);
        assert_eq!(cfg.seed, 9);
        let err = cfg.apply_text("just words\n").unwrap_err();
        assert!(matches!(err, ConfigError::MalformedLine { line: 1, .. }));
    }

    #[test]
    fn derived_geometry_follows_world_scale() {
        let mut cfg = RunConfig::default();
        cfg.apply("world_scale", "2.0").unwrap();
        assert_eq!(cfg.ring_radius(), 6.8);
        assert_eq!(cfg.near(), 3.6);
        assert_eq!(cfg.far(), 10.0);
        cfg.apply("near", "0.5").unwrap();
        assert_eq!(cfg.near(), 0.5);
    }

    #[test]
    fn model_spec_tracks_encoding() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.model_spec().feature_len, 96);
        cfg.apply("encoding", "concat-pe").unwrap();
        assert_eq!(cfg.model_spec().feature_len, crate::encoding::CONCAT_PE_LEN);
        cfg.apply("encoding", "pe").unwrap();
        cfg.apply("l_pos", "10").unwrap();
        assert_eq!(cfg.model_spec().feature_len, 60);
    }
}
