//! Network architecture and its parameters.

use std::path::Path;

use diffmath::checkpoint;
use diffmath::nn::{Activation, Conv1dResidual, GruCell, Linear, Mlp};
use diffmath::{ParamStore, Real};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::{FrameMode, ModelConfig};
use crate::error::{CoreError, Result};
use crate::geometry::{FreqBank, PairPose};
use crate::hmp::HmpStack;
use crate::lanegraph::{EdgeKind, NODE_FEATURES};
use crate::track::AgentClass;

/// Extra per-node and per-step inputs in the global-frame ablation.
pub const GLOBAL_POSE_FEATURES: usize = 4;
/// Meters per unit of global coordinate input.
pub const GLOBAL_POSITION_SCALE: f64 = 50.0;

/// Edge slots of the scene graph beyond the lane-graph kinds.
pub const SLOT_A2A: usize = EdgeKind::COUNT;
pub const SLOT_A2M: usize = EdgeKind::COUNT + 1;
pub const SLOT_M2A: usize = EdgeKind::COUNT + 2;
pub const SCENE_SLOTS: usize = EdgeKind::COUNT + 3;
/// The goal graph has no agent-to-agent edges.
pub const GOAL_A2M: usize = EdgeKind::COUNT;
pub const GOAL_M2A: usize = EdgeKind::COUNT + 1;
pub const GOAL_SLOTS: usize = EdgeKind::COUNT + 2;

/// Node classes of the scene and goal graphs.
pub const AGENT: usize = 0;
pub const MAP: usize = 1;

#[derive(Clone, Debug)]
pub struct Network {
    pub cfg: ModelConfig,
    pub bank: FreqBank,
    pub pp_hist: PairPose,
    pub pp_lane: PairPose,
    pub pp_scene: PairPose,
    pub pp_goal: PairPose,
    pub map_input: Mlp,
    pub hist_input: Linear,
    pub hist_conv: Conv1dResidual,
    pub hist_gru: GruCell,
    pub lane_stack: HmpStack,
    pub scene_stack: HmpStack,
    pub goal_stack: HmpStack,
    pub logit_head: Mlp,
    pub offset_head: Mlp,
    pub completion: Mlp,
}

impl Network {
    pub fn map_feature_width(&self) -> usize {
        map_feature_width(&self.cfg)
    }

    pub fn history_feature_width(&self) -> usize {
        history_feature_width(&self.cfg)
    }

    pub fn completion_input_width(&self) -> usize {
        self.cfg.hidden + self.bank.width() + 2
    }

    pub fn relative(&self) -> bool {
        self.cfg.frame == FrameMode::Relative
    }
}

pub fn map_feature_width(cfg: &ModelConfig) -> usize {
    match cfg.frame {
        FrameMode::Relative => NODE_FEATURES,
        FrameMode::Global => NODE_FEATURES + GLOBAL_POSE_FEATURES,
    }
}

/// Per step: pose encoding, its finite difference, velocity (2), box size
/// (2), observed flag, class one-hot, plus the global pose in the ablation.
pub fn history_feature_width(cfg: &ModelConfig) -> usize {
    let base = 2 * cfg.pair_dim + 5 + AgentClass::COUNT;
    match cfg.frame {
        FrameMode::Relative => base,
        FrameMode::Global => base + GLOBAL_POSE_FEATURES,
    }
}

#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub net: Network,
    pub store: ParamStore<T>,
}

impl<T: Real> Model<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let bank = FreqBank::new(cfg.n_freq, cfg.freq_sign)?;
        let (h, d) = (cfg.hidden, cfg.pair_dim);
        let s = &mut store;
        let r = &mut rng;
        let pair = |s: &mut ParamStore<T>, r: &mut ChaCha8Rng, name: &str| -> Result<PairPose> {
            Ok(PairPose {
                bank: bank.clone(),
                mlp: Mlp::two_layer(s, r, name, bank.width(), d)?,
            })
        };
        let pp_hist = pair(s, r, "hist.pair")?;
        let pp_lane = pair(s, r, "lane.pair")?;
        let pp_scene = pair(s, r, "scene.pair")?;
        let pp_goal = pair(s, r, "goal.pair")?;
        let map_input = Mlp::new(s, r, "map.input", map_feature_width(cfg), &[(h, Activation::Relu), (h, Activation::None)])?;
        let hist_input = Linear::new(s, r, "hist.input", history_feature_width(cfg), h)?;
        let hist_conv = Conv1dResidual::new(s, r, "hist.conv", h, h, 3)?;
        let hist_gru = GruCell::new(s, r, "hist.gru", h, h)?;
        let lane_stack = HmpStack::new(s, r, "lane.hmp", cfg.lane_layers, 1, EdgeKind::COUNT, h, d)?;
        let scene_stack = HmpStack::new(s, r, "scene.hmp", cfg.scene_layers, 2, SCENE_SLOTS, h, d)?;
        let goal_stack = HmpStack::new(s, r, "goal.hmp", cfg.goal_layers, 2, GOAL_SLOTS, h, d)?;
        let logit_head = Mlp::new(s, r, "goal.logit", h, &[(h, Activation::Relu), (1, Activation::None)])?;
        let offset_head = Mlp::new(s, r, "goal.offset", h, &[(h, Activation::Relu), (2, Activation::None)])?;
        let completion = Mlp::new(
            s,
            r,
            "traj",
            h + bank.width() + 2,
            &[
                (h, Activation::Relu),
                (h, Activation::Relu),
                (2 * cfg.domain.future_len(), Activation::None),
            ],
        )?;
        let net = Network {
            cfg: cfg.clone(),
            bank,
            pp_hist,
            pp_lane,
            pp_scene,
            pp_goal,
            map_input,
            hist_input,
            hist_conv,
            hist_gru,
            lane_stack,
            scene_stack,
            goal_stack,
            logit_head,
            offset_head,
            completion,
        };
        Ok(Self { net, store })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.net.cfg
    }

    /// SHA-256 of the parameter values; identifies the weights a cache was
    /// produced with.
    pub fn checkpoint_hash(&self) -> [u8; 32] {
        Sha256::digest(self.store.value_bytes()).into()
    }

    pub fn save(&self, path: &Path, include_optimizer: bool) -> Result<()> {
        let meta = serde_json::to_string(&self.net.cfg)?;
        checkpoint::save(path, &self.store, include_optimizer, &meta)?;
        Ok(())
    }

    /// Loads a checkpoint written by [`Model::save`], rebuilding the
    /// architecture from the embedded configuration.
    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = checkpoint::load::<T>(path)?;
        let cfg: ModelConfig = serde_json::from_str(&ckpt.metadata)
            .map_err(|e| CoreError::Config(format!("checkpoint metadata: {e}")))?;
        let mut model = Self::new(&cfg, 0)?;
        model.store.restore_from(&ckpt.store, ckpt.has_optimizer)?;
        Ok(model)
    }

    pub fn cast<U: Real>(&self) -> Result<Model<U>> {
        let mut out = Model::<U>::new(&self.net.cfg, 0)?;
        for id in self.store.ids() {
            *out.store.value_mut(id) = self.store.value(id).cast();
        }
        Ok(out)
    }
}
