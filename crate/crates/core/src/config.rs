//! Flat key=value run configuration.
//!
//! One file drives every command; presets (`desk`, `bf-like`, `yti-like`)
//! provide complete starting points and explicit keys override them. Unknown
//! keys are rejected so experiment records stay trustworthy, and the
//! effective configuration echoes into every output directory in a form that
//! re-parses to an equal `RunConfig`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::dataio::SynthConfig;
use crate::decode::BackgroundConfig;
use crate::eval::EvalSettings;
use crate::losses::LossConfig;
use crate::model::BackboneConfig;
use crate::training::TrainConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Dataset directory; defaults to `<out_dir>/dataset`.
    pub dataset_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Segmentation CSV directory; defaults to `<out_dir>/segments`.
    pub segments_dir: Option<PathBuf>,
    pub svg: bool,
    pub print_mof_bg: bool,

    // synth
    pub synth_activities: usize,
    pub synth_actions: usize,
    pub synth_shared_actions: usize,
    pub synth_videos_per_activity: usize,
    pub synth_frames_per_video: usize,
    pub synth_feature_dim: usize,
    pub synth_noise_sigma: f64,
    pub synth_video_offset_sigma: f64,
    pub synth_confusable_actions: bool,
    pub synth_shared_length_factor: f64,
    pub synth_background_fraction: f64,
    pub synth_segment_min: usize,
    pub synth_segment_max: usize,

    // model
    pub model_stages: usize,
    pub model_embed_dim: usize,
    pub model_window: usize,
    pub model_context_stride: usize,
    pub model_layers_per_stage: usize,

    // train
    pub train_lr: f64,
    pub train_weight_decay: f64,
    pub train_batch_size: usize,
    pub train_epochs_stage1: usize,
    pub train_epochs_stage2: usize,
    pub train_epoch_fraction: f64,
    pub train_kmeans_init: bool,
    pub train_downsample_len: usize,
    pub train_resample_per_epoch: bool,
    pub train_threads: usize,

    // loss
    pub loss_alpha: f64,
    pub loss_beta: f64,
    pub loss_margin: f64,
    pub loss_lambda_var: f64,
    /// 0 means auto (0.1 * embed_dim).
    pub loss_temperature: f64,
    pub loss_cbr_floor: f64,
    pub loss_cycle_depths: Vec<usize>,
    pub loss_cyclic_term: bool,
    pub loss_clamped_mse: bool,
    pub loss_pdrop_from_adjusted: bool,
    pub loss_activity_enabled: bool,

    // decode
    pub decode_vocab_size: usize,
    pub decode_group_count: usize,
    pub decode_actions_per_group: usize,
    pub decode_background: bool,
    pub decode_background_fraction: f64,

    // eval
    pub eval_tau: f64,
    pub eval_macro_f1: bool,
}

impl Default for RunConfig {
    /// The `desk` preset: a three-activity synthetic dataset sized so the
    /// whole pipeline runs in minutes on a laptop CPU.
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/out"),
            dataset_dir: None,
            checkpoint: None,
            segments_dir: None,
            svg: false,
            print_mof_bg: false,

            synth_activities: 3,
            synth_actions: 6,
            synth_shared_actions: 2,
            synth_videos_per_activity: 20,
            synth_frames_per_video: 256,
            synth_feature_dim: 16,
            synth_noise_sigma: 1.0,
            synth_video_offset_sigma: 0.0,
            synth_confusable_actions: true,
            synth_shared_length_factor: 0.4,
            synth_background_fraction: 0.0,
            synth_segment_min: 8,
            synth_segment_max: 48,

            model_stages: 2,
            model_embed_dim: 16,
            model_window: 16,
            model_context_stride: 4,
            model_layers_per_stage: 1,

            train_lr: 2e-4,
            train_weight_decay: 1e-4,
            train_batch_size: 32,
            train_epochs_stage1: 30,
            train_epochs_stage2: 30,
            train_epoch_fraction: 0.1,
            train_kmeans_init: true,
            train_downsample_len: 256,
            train_resample_per_epoch: false,
            train_threads: 0,

            loss_alpha: 0.15,
            loss_beta: 0.5,
            loss_margin: 1.0,
            loss_lambda_var: 1e-3,
            loss_temperature: 0.0,
            loss_cbr_floor: 1e-6,
            loss_cycle_depths: vec![1, 2],
            loss_cyclic_term: true,
            loss_clamped_mse: false,
            loss_pdrop_from_adjusted: true,
            loss_activity_enabled: true,

            decode_vocab_size: 50,
            decode_group_count: 3,
            decode_actions_per_group: 4,
            decode_background: false,
            decode_background_fraction: 0.0,

            eval_tau: 0.75,
            eval_macro_f1: false,
        }
    }
}

/// Named complete configurations.
pub fn preset(name: &str) -> Result<RunConfig> {
    match name {
        "desk" => Ok(RunConfig::default()),
        "bf-like" => Ok(RunConfig {
            synth_activities: 10,
            synth_actions: 48,
            synth_shared_actions: 5,
            synth_videos_per_activity: 4,
            synth_background_fraction: 0.07,
            decode_group_count: 10,
            decode_actions_per_group: 5,
            decode_background: true,
            decode_background_fraction: 0.07,
            ..RunConfig::default()
        }),
        "yti-like" => Ok(RunConfig {
            synth_activities: 5,
            synth_actions: 47,
            synth_shared_actions: 5,
            synth_videos_per_activity: 5,
            synth_background_fraction: 0.635,
            synth_segment_min: 4,
            synth_segment_max: 16,
            decode_group_count: 5,
            decode_actions_per_group: 9,
            decode_background: true,
            decode_background_fraction: 0.635,
            ..RunConfig::default()
        }),
        other => Err(Error::Config(format!(
            "unknown preset `{other}` (expected desk, bf-like, or yti-like)"
        ))),
    }
}

impl RunConfig {
    /// Parse key=value text. A `preset` key switches the baseline; every
    /// other key overrides it. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut pairs = Vec::new();
        let mut base = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{line}`", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if key == "preset" {
                base = preset(value)?;
            } else {
                pairs.push((key.to_string(), value.to_string()));
            }
        }
        for (key, value) in pairs {
            base.set(&key, &value)?;
        }
        Ok(base)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io { path: path.to_path_buf(), message: e.to_string() })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                Error::Config(format!("key {key}: cannot parse `{value}`"))
            })
        }
        fn flag(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" | "1" | "on" | "yes" => Ok(true),
                "false" | "0" | "off" | "no" => Ok(false),
                _ => Err(Error::Config(format!("key {key}: expected a boolean, got `{value}`"))),
            }
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "dataset_dir" => self.dataset_dir = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "segments_dir" => self.segments_dir = Some(PathBuf::from(value)),
            "svg" => self.svg = flag(key, value)?,
            "print_mof_bg" => self.print_mof_bg = flag(key, value)?,

            "synth.activities" => self.synth_activities = num(key, value)?,
            "synth.actions" => self.synth_actions = num(key, value)?,
            "synth.shared_actions" => self.synth_shared_actions = num(key, value)?,
            "synth.videos_per_activity" => self.synth_videos_per_activity = num(key, value)?,
            "synth.frames_per_video" => self.synth_frames_per_video = num(key, value)?,
            "synth.feature_dim" => self.synth_feature_dim = num(key, value)?,
            "synth.noise_sigma" => self.synth_noise_sigma = num(key, value)?,
            "synth.video_offset_sigma" => self.synth_video_offset_sigma = num(key, value)?,
            "synth.confusable_actions" => self.synth_confusable_actions = flag(key, value)?,
            "synth.shared_length_factor" => self.synth_shared_length_factor = num(key, value)?,
            "synth.background_fraction" => self.synth_background_fraction = num(key, value)?,
            "synth.segment_min" => self.synth_segment_min = num(key, value)?,
            "synth.segment_max" => self.synth_segment_max = num(key, value)?,

            "model.stages" => self.model_stages = num(key, value)?,
            "model.embed_dim" => self.model_embed_dim = num(key, value)?,
            "model.window" => self.model_window = num(key, value)?,
            "model.context_stride" => self.model_context_stride = num(key, value)?,
            "model.layers_per_stage" => self.model_layers_per_stage = num(key, value)?,

            "train.lr" => self.train_lr = num(key, value)?,
            "train.weight_decay" => self.train_weight_decay = num(key, value)?,
            "train.batch_size" => self.train_batch_size = num(key, value)?,
            "train.epochs_stage1" => self.train_epochs_stage1 = num(key, value)?,
            "train.epochs_stage2" => self.train_epochs_stage2 = num(key, value)?,
            "train.epoch_fraction" => self.train_epoch_fraction = num(key, value)?,
            "train.kmeans_init" => self.train_kmeans_init = flag(key, value)?,
            "train.downsample_len" => self.train_downsample_len = num(key, value)?,
            "train.resample_per_epoch" => self.train_resample_per_epoch = flag(key, value)?,
            "train.threads" => self.train_threads = num(key, value)?,

            "loss.alpha" => self.loss_alpha = num(key, value)?,
            "loss.beta" => self.loss_beta = num(key, value)?,
            "loss.margin" => self.loss_margin = num(key, value)?,
            "loss.lambda_var" => self.loss_lambda_var = num(key, value)?,
            "loss.temperature" => self.loss_temperature = num(key, value)?,
            "loss.cbr_floor" => self.loss_cbr_floor = num(key, value)?,
            "loss.cycle_depths" => {
                let depths: Result<Vec<usize>> = value
                    .split(',')
                    .map(|d| num::<usize>(key, d.trim()))
                    .collect();
                self.loss_cycle_depths = depths?;
            }
            "loss.cyclic_term" => self.loss_cyclic_term = flag(key, value)?,
            "loss.clamped_mse" => self.loss_clamped_mse = flag(key, value)?,
            "loss.pdrop_from_adjusted" => self.loss_pdrop_from_adjusted = flag(key, value)?,
            "loss.activity_enabled" => self.loss_activity_enabled = flag(key, value)?,

            "decode.vocab_size" => self.decode_vocab_size = num(key, value)?,
            "decode.group_count" => self.decode_group_count = num(key, value)?,
            "decode.actions_per_group" => self.decode_actions_per_group = num(key, value)?,
            "decode.background" => self.decode_background = flag(key, value)?,
            "decode.background_fraction" => self.decode_background_fraction = num(key, value)?,

            "eval.tau" => self.eval_tau = num(key, value)?,
            "eval.macro_f1" => self.eval_macro_f1 = flag(key, value)?,

            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Serialize every effective key; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        kv("seed", self.seed.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        if let Some(d) = &self.dataset_dir {
            kv("dataset_dir", d.display().to_string());
        }
        if let Some(c) = &self.checkpoint {
            kv("checkpoint", c.display().to_string());
        }
        if let Some(s) = &self.segments_dir {
            kv("segments_dir", s.display().to_string());
        }
        kv("svg", self.svg.to_string());
        kv("print_mof_bg", self.print_mof_bg.to_string());

        kv("synth.activities", self.synth_activities.to_string());
        kv("synth.actions", self.synth_actions.to_string());
        kv("synth.shared_actions", self.synth_shared_actions.to_string());
        kv("synth.videos_per_activity", self.synth_videos_per_activity.to_string());
        kv("synth.frames_per_video", self.synth_frames_per_video.to_string());
        kv("synth.feature_dim", self.synth_feature_dim.to_string());
        kv("synth.noise_sigma", self.synth_noise_sigma.to_string());
        kv("synth.video_offset_sigma", self.synth_video_offset_sigma.to_string());
        kv("synth.confusable_actions", self.synth_confusable_actions.to_string());
        kv("synth.shared_length_factor", self.synth_shared_length_factor.to_string());
        kv("synth.background_fraction", self.synth_background_fraction.to_string());
        kv("synth.segment_min", self.synth_segment_min.to_string());
        kv("synth.segment_max", self.synth_segment_max.to_string());

        kv("model.stages", self.model_stages.to_string());
        kv("model.embed_dim", self.model_embed_dim.to_string());
        kv("model.window", self.model_window.to_string());
        kv("model.context_stride", self.model_context_stride.to_string());
        kv("model.layers_per_stage", self.model_layers_per_stage.to_string());

        kv("train.lr", self.train_lr.to_string());
        kv("train.weight_decay", self.train_weight_decay.to_string());
        kv("train.batch_size", self.train_batch_size.to_string());
        kv("train.epochs_stage1", self.train_epochs_stage1.to_string());
        kv("train.epochs_stage2", self.train_epochs_stage2.to_string());
        kv("train.epoch_fraction", self.train_epoch_fraction.to_string());
        kv("train.kmeans_init", self.train_kmeans_init.to_string());
        kv("train.downsample_len", self.train_downsample_len.to_string());
        kv("train.resample_per_epoch", self.train_resample_per_epoch.to_string());
        kv("train.threads", self.train_threads.to_string());

        kv("loss.alpha", self.loss_alpha.to_string());
        kv("loss.beta", self.loss_beta.to_string());
        kv("loss.margin", self.loss_margin.to_string());
        kv("loss.lambda_var", self.loss_lambda_var.to_string());
        kv("loss.temperature", self.loss_temperature.to_string());
        kv("loss.cbr_floor", self.loss_cbr_floor.to_string());
        kv(
            "loss.cycle_depths",
            self.loss_cycle_depths
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("loss.cyclic_term", self.loss_cyclic_term.to_string());
        kv("loss.clamped_mse", self.loss_clamped_mse.to_string());
        kv("loss.pdrop_from_adjusted", self.loss_pdrop_from_adjusted.to_string());
        kv("loss.activity_enabled", self.loss_activity_enabled.to_string());

        kv("decode.vocab_size", self.decode_vocab_size.to_string());
        kv("decode.group_count", self.decode_group_count.to_string());
        kv("decode.actions_per_group", self.decode_actions_per_group.to_string());
        kv("decode.background", self.decode_background.to_string());
        kv("decode.background_fraction", self.decode_background_fraction.to_string());

        kv("eval.tau", self.eval_tau.to_string());
        kv("eval.macro_f1", self.eval_macro_f1.to_string());
        out
    }

    // ---- derived module configs ----

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            activities: self.synth_activities,
            actions: self.synth_actions,
            shared_actions: self.synth_shared_actions,
            videos_per_activity: self.synth_videos_per_activity,
            frames_per_video: self.synth_frames_per_video,
            feature_dim: self.synth_feature_dim,
            feature_noise_sigma: self.synth_noise_sigma,
            video_offset_sigma: self.synth_video_offset_sigma,
            confusable_actions: self.synth_confusable_actions,
            shared_length_factor: self.synth_shared_length_factor,
            background_fraction: self.synth_background_fraction,
            segment_length_range: (self.synth_segment_min, self.synth_segment_max),
            seed: self.seed,
        }
    }

    pub fn cluster_count(&self) -> usize {
        self.decode_group_count * self.decode_actions_per_group
    }

    pub fn backbone_config(&self, input_dim: usize) -> BackboneConfig {
        BackboneConfig {
            stages: self.model_stages,
            embed_dim: self.model_embed_dim,
            window: self.model_window,
            context_stride: self.model_context_stride,
            cluster_count: self.cluster_count(),
            layers_per_stage: self.model_layers_per_stage,
            input_dim,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        let temperature = if self.loss_temperature > 0.0 {
            self.loss_temperature
        } else {
            0.1 * self.model_embed_dim as f64
        };
        LossConfig {
            alpha: self.loss_alpha,
            beta: self.loss_beta,
            margin: self.loss_margin,
            lambda_var: self.loss_lambda_var,
            temperature,
            cbr_floor: self.loss_cbr_floor,
            cycle_depths: self.loss_cycle_depths.clone(),
            cyclic_term_enabled: self.loss_cyclic_term,
            use_clamped_mse: self.loss_clamped_mse,
            pdrop_from_adjusted: self.loss_pdrop_from_adjusted,
            activity_enabled: self.loss_activity_enabled,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train_lr,
            weight_decay: self.train_weight_decay,
            batch_size: self.train_batch_size,
            epochs_stage1: self.train_epochs_stage1,
            epochs_stage2: self.train_epochs_stage2,
            epoch_fraction: self.train_epoch_fraction,
            seed: self.seed,
            kmeans_init: self.train_kmeans_init,
            downsample_len: self.train_downsample_len,
            resample_per_epoch: self.train_resample_per_epoch,
            threads: self.train_threads,
            loss: self.loss_config(),
        }
    }

    pub fn background(&self) -> BackgroundConfig {
        BackgroundConfig {
            enabled: self.decode_background,
            fraction: self.decode_background_fraction,
        }
    }

    pub fn eval_settings(&self) -> EvalSettings {
        EvalSettings { tau: self.eval_tau, seed: self.seed, macro_f1: self.eval_macro_f1 }
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.dataset_dir.clone().unwrap_or_else(|| self.out_dir.join("dataset"))
    }

    pub fn segments_dir(&self) -> PathBuf {
        self.segments_dir.clone().unwrap_or_else(|| self.out_dir.join("segments"))
    }
}

/// The `--ablate` switch values.
pub fn apply_ablation(config: &mut RunConfig, name: &str) -> Result<()> {
    match name {
        "no-cyclic" => config.loss_cyclic_term = false,
        "no-kmeans" => config.train_kmeans_init = false,
        "no-video" => config.loss_beta = 0.0,
        "no-activity" => config.loss_activity_enabled = false,
        "global-only" => {
            config.loss_beta = 0.0;
            config.loss_activity_enabled = false;
        }
        other => {
            return Err(Error::Config(format!(
                "unknown ablation `{other}` (expected no-cyclic, no-kmeans, no-video, no-activity, global-only)"
            )))
        }
    }
    Ok(())
}
