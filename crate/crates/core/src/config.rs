//! Run configuration: one JSON document with embedded defaults, dotted-path
//! overrides, and validation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::losses::MotionMode;
use crate::nets::BackboneConfig;
use crate::schedule::{CmCoeffs, LossWeights, NoiseSchedule};
use crate::solver::SamplerConfig;
use crate::synthdata::DataConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Data scale `sigma` of the consistency skip/output scalings.
    pub cm_sigma: f64,
    pub teacher_iterations: u64,
    pub teacher_lr: f64,
    /// Probability of nulling audio and reference together during teacher
    /// training.
    pub cond_dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            cm_sigma: 0.1,
            teacher_iterations: 20_000,
            teacher_lr: 1e-3,
            cond_dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.steps, self.beta_min, self.beta_max).map_err(|e| Error::Config {
            path: "schedule".into(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    /// Total iterations; odd ones update the student, even ones the
    /// discriminator.
    pub iterations: u64,
    pub lr: f64,
    /// Discriminator learning rate as a multiple of the student's.
    pub disc_lr_ratio: f64,
    /// Halve both learning rates at the midpoint.
    pub halve_lr_at_midpoint: bool,
    /// Weight of the ground-truth distance term.
    pub gamma: f64,
    /// Weight of the adversarial term.
    pub lambda: f64,
    pub motion_weight: f64,
    pub huber_delta: f64,
    /// Widen the discriminator timestep range with its update count.
    pub progressive: bool,
    /// Train a discriminator at all; when off, its iterations are skipped.
    pub discriminator: bool,
    pub max_dt: usize,
    pub motion_mode: MotionMode,
    /// Restrict student updates to the attention layers.
    pub attention_only: bool,
    /// Zero the student's input gate when copying it from the teacher.
    pub reset_input_gate: bool,
}

impl Stage1Config {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            gamma: self.gamma,
            lambda: self.lambda,
            motion_weight: self.motion_weight,
            huber_delta: self.huber_delta,
        }
    }
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            iterations: 30_000,
            lr: 1e-3,
            disc_lr_ratio: 10.0,
            halve_lr_at_midpoint: true,
            gamma: LossWeights::default().gamma,
            lambda: LossWeights::default().lambda,
            motion_weight: LossWeights::default().motion_weight,
            huber_delta: LossWeights::default().huber_delta,
            progressive: true,
            discriminator: true,
            max_dt: 5,
            motion_mode: MotionMode::PerTransition,
            attention_only: false,
            reset_input_gate: true,
        }
    }
}

/// Which fragment's conditioning the editing stage feeds the networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditConditioning {
    /// The fragment being produced (audio of fragment n+1, past frames from
    /// the tail of fragment n), matching what rolling sampling supplies.
    Target,
    /// The fragment being edited (fragment n).
    Source,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub iterations: u64,
    pub lr: f64,
    pub disc_lr_ratio: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub huber_delta: f64,
    pub max_dt: usize,
    pub attention_only: bool,
    pub condition_on: EditConditioning,
}

impl Stage2Config {
    /// Editing weights; the editing objective has no motion term.
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            gamma: self.gamma,
            lambda: self.lambda,
            motion_weight: 0.0,
            huber_delta: self.huber_delta,
        }
    }
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            iterations: 3_000,
            lr: 1e-5,
            disc_lr_ratio: 10.0,
            gamma: LossWeights::default().gamma,
            lambda: LossWeights::default().lambda,
            huber_delta: LossWeights::default().huber_delta,
            max_dt: 5,
            attention_only: false,
            condition_on: EditConditioning::Target,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Generated and held-out clips per comparison.
    pub clips: usize,
    pub projection_dim: usize,
    pub projection_seed: u64,
    /// DDIM steps of the teacher baseline.
    pub teacher_steps: usize,
    pub rolling_levels: Vec<usize>,
    /// Fragments generated per video in the rolling sweep.
    pub rolling_fragments: usize,
    /// Videos used in the rolling sweep.
    pub rolling_videos: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            clips: 100,
            projection_dim: 16,
            projection_seed: 20_240_917,
            teacher_steps: 20,
            rolling_levels: vec![980, 950, 900, 850],
            rolling_fragments: 4,
            rolling_videos: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
}

fn cfg_err(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_string(),
        message: message.into(),
    }
}

fn check_lr(path: &str, lr: f64) -> Result<()> {
    if !(lr.is_finite() && lr > 0.0) {
        return Err(cfg_err(
            path,
            format!("learning rate must be positive, got {lr}"),
        ));
    }
    Ok(())
}

impl RunConfig {
    /// A few-second configuration on 4x4 clips for tests and smoke runs.
    pub fn small() -> Self {
        let mut c = Self::default();
        c.data.frames = 4;
        c.data.height = 4;
        c.data.width = 4;
        c.data.video_length = 24;
        c.data.train_videos = 8;
        c.data.heldout_videos = 8;
        c.data.blob_sigma = 0.8;
        c.model.backbone.width = 16;
        c.model.backbone.depth = 1;
        c.model.backbone.time_dim = 8;
        c.model.backbone.disc_channels = 4;
        c.model.teacher_iterations = 100;
        c.stage1.iterations = 100;
        c.stage2.iterations = 50;
        c.eval.clips = 20;
        c.eval.teacher_steps = 4;
        c.eval.rolling_videos = 10;
        c.eval.rolling_fragments = 2;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.backbone.validate()?;
        let sched = self.schedule.build()?;
        if self.model.cm_sigma.is_nan() || self.model.cm_sigma <= 0.0 {
            return Err(cfg_err("model.cm_sigma", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.model.cond_dropout) {
            return Err(cfg_err("model.cond_dropout", "must lie in [0, 1]"));
        }
        check_lr("model.teacher_lr", self.model.teacher_lr)?;
        check_lr("stage1.lr", self.stage1.lr)?;
        check_lr("stage2.lr", self.stage2.lr)?;
        check_lr("stage1.disc_lr_ratio", self.stage1.disc_lr_ratio)?;
        check_lr("stage2.disc_lr_ratio", self.stage2.disc_lr_ratio)?;
        let (s1, s2) = (&self.stage1, &self.stage2);
        for (path, w) in [
            ("stage1.gamma", s1.gamma),
            ("stage1.lambda", s1.lambda),
            ("stage1.motion_weight", s1.motion_weight),
            ("stage2.gamma", s2.gamma),
            ("stage2.lambda", s2.lambda),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(cfg_err(path, "must be finite and non-negative"));
            }
        }
        for (path, d) in [
            ("stage1.huber_delta", s1.huber_delta),
            ("stage2.huber_delta", s2.huber_delta),
        ] {
            if !(d.is_finite() && d > 0.0) {
                return Err(cfg_err(path, "must be finite and positive"));
            }
        }
        for (path, dt) in [
            ("stage1.max_dt", self.stage1.max_dt),
            ("stage2.max_dt", self.stage2.max_dt),
        ] {
            if dt >= sched.steps() {
                return Err(cfg_err(path, "must be below the schedule length"));
            }
        }
        self.sampler.validate(sched.steps())?;
        let e = &self.eval;
        if e.clips < 20 {
            return Err(cfg_err(
                "eval.clips",
                "the Fréchet score needs at least 20 clips",
            ));
        }
        if e.projection_dim == 0 {
            return Err(cfg_err("eval.projection_dim", "must be positive"));
        }
        if e.teacher_steps == 0 || e.teacher_steps > sched.steps() {
            return Err(cfg_err(
                "eval.teacher_steps",
                "must lie in [1, schedule.steps]",
            ));
        }
        if e.rolling_levels
            .iter()
            .any(|&l| l == 0 || l > sched.steps())
        {
            return Err(cfg_err(
                "eval.rolling_levels",
                "levels must lie in (0, schedule.steps]",
            ));
        }
        if e.rolling_fragments < 2 || e.rolling_videos == 0 {
            return Err(cfg_err(
                "eval.rolling_fragments",
                "need at least 2 fragments and 1 video",
            ));
        }
        let needed = self.data.start_margin + e.rolling_fragments * self.data.frames;
        if needed > self.data.video_length {
            return Err(cfg_err(
                "eval.rolling_fragments",
                format!(
                    "{needed} frames needed but videos have {}",
                    self.data.video_length
                ),
            ));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.schedule.build()
    }

    pub fn coeffs(&self) -> CmCoeffs {
        CmCoeffs::new(self.model.cm_sigma, self.schedule.steps)
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Parse a config document; errors name the offending field path and
    /// the line and column in `origin`.
    pub fn from_json_str(text: &str, origin: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let path = if path == "." { String::new() } else { path };
            Error::Config {
                path: if path.is_empty() {
                    origin.to_string()
                } else {
                    path
                },
                message: format!("{inner} (in {origin})"),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| cfg_err(&path.display().to_string(), e.to_string()))?;
        Self::from_json_str(&text, &path.display().to_string())
    }

    /// Apply `key=value` overrides (dotted keys, JSON values; bare words are
    /// read as strings) and validate the result.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut v = self.to_json();
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| cfg_err(o, "override must look like key=value"))?;
            apply_override(&mut v, key.trim(), raw.trim())?;
        }
        let out: RunConfig =
            serde_json::from_value(v).map_err(|e| cfg_err("--set", e.to_string()))?;
        Ok(out)
    }
}

pub fn apply_override(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let here = parts[..=i].join(".");
        let obj = node
            .as_object_mut()
            .ok_or_else(|| cfg_err(&here, "not a config section"))?;
        node = obj
            .get_mut(*part)
            .ok_or_else(|| cfg_err(&here, "unknown config key"))?;
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    *node = value;
    Ok(())
}
