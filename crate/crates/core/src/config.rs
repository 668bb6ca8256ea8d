//! Model, sampler and training configuration, loadable from TOML.
//!
//! ```toml
//! [model]
//! domain = "urban"        # or "highway"
//! frame = "relative"      # or "global" (frame-dependent ablation)
//! hidden = 128
//! pair_dim = 32
//! n_freq = 16
//! freq_sign = -1.0
//! lane_layers = 4
//! scene_layers = 2
//! goal_layers = 2
//! agent_radius = 100.0
//! conflict_radius = 2.5
//! output_scale = 10.0
//!
//! [sampler]
//! k = 6
//! gamma = 2.0
//! nu = 4.0
//! tau = 10.0
//!
//! [train]
//! w_cls = 1.0
//! ...
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Sampling rate of raw tracks.
pub const TRACK_HZ: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Urban,
    Highway,
}

impl Domain {
    /// Lane-graph sampling interval in meters.
    pub fn interval(self) -> f64 {
        match self {
            Domain::Urban => 3.0,
            Domain::Highway => 10.0,
        }
    }

    /// History poses including the current one.
    pub fn history_len(self) -> usize {
        match self {
            Domain::Urban => 51,
            Domain::Highway => 6,
        }
    }

    /// Number of future waypoints.
    pub fn future_len(self) -> usize {
        match self {
            Domain::Urban => 60,
            Domain::Highway => 12,
        }
    }

    /// Track steps between consecutive future waypoints.
    pub fn future_stride(self) -> usize {
        match self {
            Domain::Urban => 1,
            Domain::Highway => 5,
        }
    }

    /// Seconds between future waypoints.
    pub fn future_dt(self) -> f64 {
        self.future_stride() as f64 / TRACK_HZ
    }

    pub fn horizon(self) -> f64 {
        self.future_len() as f64 * self.future_dt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameMode {
    /// Pair-wise relative encodings everywhere.
    Relative,
    /// Ablation: raw global coordinates as node features, no edge attributes.
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub domain: Domain,
    pub frame: FrameMode,
    pub hidden: usize,
    pub pair_dim: usize,
    pub n_freq: usize,
    pub freq_sign: f64,
    pub lane_layers: usize,
    pub scene_layers: usize,
    pub goal_layers: usize,
    /// Agent-to-agent connection radius in meters.
    pub agent_radius: f64,
    pub conflict_radius: f64,
    /// Meters per unit of completion-head output.
    pub output_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            domain: Domain::Urban,
            frame: FrameMode::Relative,
            hidden: 128,
            pair_dim: 32,
            n_freq: 16,
            freq_sign: -1.0,
            lane_layers: 4,
            scene_layers: 2,
            goal_layers: 2,
            agent_radius: 100.0,
            conflict_radius: 2.5,
            output_scale: 10.0,
        }
    }
}

impl ModelConfig {
    /// Small widths for fast tests and desk experiments.
    pub fn compact(domain: Domain) -> Self {
        Self {
            domain,
            hidden: 32,
            pair_dim: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(m.to_string()));
        if self.hidden == 0 || self.pair_dim == 0 || self.n_freq == 0 {
            return bad("hidden, pair_dim and n_freq must be positive");
        }
        if self.freq_sign != 1.0 && self.freq_sign != -1.0 {
            return bad("freq_sign must be 1 or -1");
        }
        if !(self.agent_radius > 0.0) || !(self.conflict_radius > 0.0) {
            return bad("radii must be positive");
        }
        if !(self.output_scale > 0.0) {
            return bad("output_scale must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub k: usize,
    /// Hard removal radius in meters.
    pub gamma: f64,
    /// Downweight radius in meters.
    pub nu: f64,
    /// Downweight factor.
    pub tau: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            k: 6,
            gamma: 2.0,
            nu: 4.0,
            tau: 10.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(CoreError::Config("sampler k must be at least 1".into()));
        }
        if !(self.gamma > 0.0 && self.nu > self.gamma) {
            return Err(CoreError::Config("sampler needs nu > gamma > 0".into()));
        }
        if !(self.tau > 1.0) {
            return Err(CoreError::Config("sampler tau must exceed 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub w_cls: f64,
    pub w_reg: f64,
    pub w_traj: f64,
    pub focal_gamma: f64,
    pub huber_delta: f64,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_step: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Agents whose future leaves this distance from the lane graph are
    /// not supervised.
    pub margin: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
    /// Evaluate on the holdout set every this many epochs; 0 disables.
    pub eval_every: usize,
    /// Reference values at full scale, not used by the desk trainer.
    pub reference_batch_size: usize,
    pub reference_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            w_cls: 1.0,
            w_reg: 1.0,
            w_traj: 1.0,
            focal_gamma: 2.0,
            huber_delta: 1.0,
            lr: 5e-4,
            lr_decay: 0.25,
            lr_step: 15,
            epochs: 30,
            batch_size: 8,
            scale_min: 0.8,
            scale_max: 1.2,
            margin: 10.0,
            grad_clip: 5.0,
            seed: 0,
            eval_every: 1,
            reference_batch_size: 64,
            reference_epochs: 17,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(m.to_string()));
        if [self.w_cls, self.w_reg, self.w_traj].iter().any(|w| !(*w >= 0.0)) {
            return bad("loss weights must be non-negative");
        }
        if !(self.focal_gamma >= 0.0) || !(self.huber_delta > 0.0) {
            return bad("focal gamma must be >= 0 and huber delta > 0");
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0) || self.lr_step == 0 {
            return bad("invalid learning-rate schedule");
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return bad("need 0 < scale_min <= scale_max");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.margin > 0.0) || !(self.grad_clip >= 0.0) {
            return bad("margin must be positive and grad_clip non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sampler.validate()?;
        self.train.validate()
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| CoreError::Toml(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CoreError::Toml(e.to_string()))
    }
}
