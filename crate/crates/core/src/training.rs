//! Supervision targets, the three-term objective and the training loop.
//!
//! The objective sums a focal loss over each agent's goal logits, a Huber
//! loss on the goal offset at the target node (node frame) and a Huber loss
//! on the completed trajectory (agent frame). Each term is averaged over the
//! supervised agents of the whole batch. Trajectory completion is conditioned
//! on the ground-truth goal, or on the most likely predicted goal (treated as
//! a constant) when the ground-truth goal is missing.

use std::path::{Path, PathBuf};

use diffmath::{Adam, DiffError, Real, StepLr, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{SamplerConfig, TrainConfig};
use crate::decoder::{build_goal_graph, complete_trajectory, goal_world, predict_goals};
use crate::encoders::{encode, SceneInputs};
use crate::error::{CoreError, Result};
use crate::evaluation::evaluate;
use crate::geometry::Vec2;
use crate::lanegraph::LaneGraph;
use crate::model::Model;
use crate::track::Scenario;

#[derive(Clone, Debug, PartialEq)]
pub struct AgentTarget {
    pub goal_supervised: bool,
    pub traj_supervised: bool,
    /// Lane-graph node closest to the ground-truth goal.
    pub node: usize,
    /// Ground-truth goal in the frame of `node`.
    pub offset: Vec2,
    /// Ground-truth goal in world coordinates.
    pub goal: Vec2,
    /// Ground-truth waypoints in the agent frame, flattened `x0 y0 x1 y1 ..`.
    pub waypoints: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Per-agent supervision, in scenario agent order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct SupervisionMask {
    pub agents: Vec<AgentTarget>,
}

impl SupervisionMask {
    pub fn goal_count(&self) -> usize {
        self.agents.iter().filter(|a| a.goal_supervised).count()
    }

    pub fn traj_count(&self) -> usize {
        self.agents.iter().filter(|a| a.traj_supervised).count()
    }

    pub fn any(&self) -> bool {
        self.agents.iter().any(|a| a.goal_supervised || a.traj_supervised)
    }

    pub fn norm(&self) -> Norm {
        Norm {
            goals: self.goal_count(),
            trajectories: self.traj_count(),
        }
    }
}

/// Number of supervised agents each term is averaged over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Norm {
    pub goals: usize,
    pub trajectories: usize,
}

impl std::ops::Add for Norm {
    type Output = Norm;

    fn add(self, o: Norm) -> Norm {
        Norm {
            goals: self.goals + o.goals,
            trajectories: self.trajectories + o.trajectories,
        }
    }
}

/// Builds targets for every agent. Agents whose future leaves the lane-graph
/// margin at any valid step get no supervision but stay in the graph.
pub fn make_targets(scenario: &Scenario, g: &LaneGraph, margin: f64) -> Result<SupervisionMask> {
    if g.is_empty() {
        return Err(CoreError::Empty("lane graph has no nodes".into()));
    }
    let mut agents = Vec::with_capacity(scenario.agents.len());
    for a in &scenario.agents {
        let pose0 = *a.current();
        let valid = a.future_valid.clone();
        let inside = a
            .future
            .iter()
            .zip(&valid)
            .filter(|(_, v)| **v)
            .all(|(p, _)| g.distance_to_map(*p) <= margin);
        let goal = match (a.future.last(), valid.last()) {
            (Some(p), Some(true)) => Some(*p),
            _ => None,
        };
        let goal_supervised = inside && goal.is_some();
        let traj_supervised = inside && valid.iter().any(|v| *v);
        let (node, offset, goal) = match goal {
            Some(p) => {
                let n = g.nearest_node(p).expect("nonempty graph");
                (n, g.nodes[n].pose.to_local(p), p)
            }
            None => (0, [0.0, 0.0], [f64::NAN, f64::NAN]),
        };
        let waypoints = a.future.iter().flat_map(|p| pose0.to_local(*p)).collect();
        agents.push(AgentTarget {
            goal_supervised,
            traj_supervised,
            node,
            offset,
            goal,
            waypoints,
            valid,
        });
    }
    Ok(SupervisionMask { agents })
}

/// Goal that conditions trajectory completion during training.
pub fn teacher_force_goal(target: &AgentTarget, predicted: Vec2) -> Vec2 {
    if target.goal_supervised {
        target.goal
    } else {
        predicted
    }
}

/// Scales every coordinate, velocity and box size; headings are unchanged.
pub fn scale_augment(scenario: &Scenario, s: f64) -> Result<Scenario> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(CoreError::Config(format!("scale factor must be positive, got {s}")));
    }
    Ok(scenario.scaled(s))
}

/// Loss values; `total` is the weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub cls: f64,
    pub reg: f64,
    pub traj: f64,
    pub total: f64,
}

impl std::ops::AddAssign for LossTerms {
    fn add_assign(&mut self, o: LossTerms) {
        self.cls += o.cls;
        self.reg += o.reg;
        self.traj += o.traj;
        self.total += o.total;
    }
}

fn sum_scalars<T: Real>(tape: &mut Tape<T>, parts: &[Var]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for &p in parts {
        acc = Some(match acc {
            None => p,
            Some(a) => tape.add(a, p)?,
        });
    }
    Ok(acc)
}

/// The objective on decoder outputs.
///
/// `logits` is `A·M × 1`, `offsets` is `A·M × 2` and `traj` holds one
/// agent-frame row per trajectory-supervised agent, in agent order. Returns
/// `None` when nothing in `mask` is supervised.
#[allow(clippy::too_many_arguments)]
pub fn objective<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    offsets: Var,
    traj: Option<Var>,
    mask: &SupervisionMask,
    nodes: usize,
    norm: Norm,
    cfg: &TrainConfig,
) -> Result<Option<(Var, LossTerms)>> {
    let delta = T::of(cfg.huber_delta);
    let mut cls = Vec::new();
    let mut reg = Vec::new();
    let mut trj = Vec::new();
    let mut row = 0;
    for (a, t) in mask.agents.iter().enumerate() {
        if t.goal_supervised {
            let z = tape.slice_rows(logits, a * nodes, nodes)?;
            cls.push(tape.focal_loss(z, t.node, T::of(cfg.focal_gamma))?);
            let o = tape.slice_rows(offsets, a * nodes + t.node, 1)?;
            reg.push(tape.huber(o, &Tensor::from_f64(&[1, 2], &t.offset)?, delta)?);
        }
        if t.traj_supervised {
            let traj = traj.ok_or_else(|| CoreError::Shape("trajectory rows missing".into()))?;
            let w = t.waypoints.len();
            let pred = tape.slice_rows(traj, row, 1)?;
            row += 1;
            let n_valid = t.valid.iter().filter(|v| **v).count();
            let loss = if n_valid == t.valid.len() {
                tape.huber(pred, &Tensor::from_f64(&[1, w], &t.waypoints)?, delta)?
            } else {
                let m: Vec<f64> = t.valid.iter().flat_map(|&v| [v as u8 as f64; 2]).collect();
                let target: Vec<f64> = t.waypoints.iter().zip(&m).map(|(x, k)| x * k).collect();
                let mv = tape.constant(Tensor::from_f64(&[1, w], &m)?)?;
                let pred = tape.mul(pred, mv)?;
                let l = tape.huber(pred, &Tensor::from_f64(&[1, w], &target)?, delta)?;
                tape.scale(l, T::of(t.valid.len() as f64 / n_valid as f64))?
            };
            trj.push(loss);
        }
    }
    let mut weighted = Vec::new();
    let mut terms = LossTerms::default();
    for (parts, count, w, slot) in [
        (&cls, norm.goals, cfg.w_cls, &mut terms.cls),
        (&reg, norm.goals, cfg.w_reg, &mut terms.reg),
        (&trj, norm.trajectories, cfg.w_traj, &mut terms.traj),
    ] {
        if let Some(s) = sum_scalars(tape, parts)? {
            let mean = tape.scale(s, T::of(1.0 / count as f64))?;
            *slot = tape.value(mean).item().as_f64();
            weighted.push(tape.scale(mean, T::of(w))?);
        }
    }
    Ok(match sum_scalars(tape, &weighted)? {
        Some(total) => {
            terms.total = tape.value(total).item().as_f64();
            Some((total, terms))
        }
        None => None,
    })
}

/// Forward pass and objective for one scene.
pub fn scene_loss<T: Real>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    si: &SceneInputs,
    mask: &SupervisionMask,
    norm: Norm,
    cfg: &TrainConfig,
) -> Result<Option<(Var, LossTerms)>> {
    if !mask.any() {
        return Ok(None);
    }
    let emb = encode(tape, model, si, None)?;
    let gi = build_goal_graph(&model.net, si);
    let out = predict_goals(tape, model, si, &gi, &emb)?;
    let m = gi.nodes;
    let logits = tape.value(out.logits).to_f64_vec();
    let offsets = tape.value(out.offsets).to_f64_vec();
    let mut requests = Vec::new();
    for (a, t) in mask.agents.iter().enumerate() {
        if !t.traj_supervised {
            continue;
        }
        let predicted = if t.goal_supervised {
            t.goal
        } else {
            // weak teacher: the top-scoring node, as a constant
            let row = &logits[a * m..(a + 1) * m];
            let mut best = 0;
            for (i, z) in row.iter().enumerate() {
                if *z > row[best] {
                    best = i;
                }
            }
            let k = a * m + best;
            goal_world(&si.lane.graph.nodes[best].pose, [offsets[2 * k], offsets[2 * k + 1]])
        };
        requests.push((a, teacher_force_goal(t, predicted)));
    }
    let traj = if requests.is_empty() {
        None
    } else {
        Some(complete_trajectory(tape, model, out.agents, &si.agent_poses, &requests)?)
    };
    objective(tape, out.logits, out.offsets, traj, mask, m, norm, cfg)
}

/// Inputs and targets of one training sample.
pub struct Sample {
    pub inputs: SceneInputs,
    pub mask: SupervisionMask,
}

pub fn prepare_sample<T: Real>(model: &Model<T>, scenario: &Scenario, margin: f64) -> Result<Sample> {
    let inputs = SceneInputs::from_scenario(&model.net, scenario)?;
    let mask = make_targets(scenario, &inputs.lane.graph, margin)?;
    Ok(Sample { inputs, mask })
}

/// Loss of a single scenario, normalised by its own supervised counts.
pub fn scenario_loss<T: Real>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    scenario: &Scenario,
    cfg: &TrainConfig,
) -> Result<Option<(Var, LossTerms)>> {
    let s = prepare_sample(model, scenario, cfg.margin)?;
    let norm = s.mask.norm();
    scene_loss(tape, model, &s.inputs, &s.mask, norm, cfg)
}

/// One row of the metric history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub cls: f64,
    pub reg: f64,
    pub traj: f64,
    pub steps: usize,
    pub skipped: usize,
    pub eval_min_fde_1: Option<f64>,
    pub eval_min_fde_k: Option<f64>,
    pub eval_brier_fde_k: Option<f64>,
    pub eval_mr_k: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub sampler: SamplerConfig,
    /// Directory for per-epoch checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
    /// Metric history, rewritten after every epoch.
    pub history_csv: Option<PathBuf>,
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|x| x.map_err(CoreError::from)).collect()
}

fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:03}.ckpt"))
}

/// Trains `model` in place with Adam and a step learning-rate schedule.
/// Deterministic for a fixed `cfg.seed`.
pub fn train<T: Real>(
    model: &mut Model<T>,
    train_set: &[Scenario],
    holdout: &[Scenario],
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    opts.sampler.validate()?;
    if train_set.is_empty() {
        return Err(CoreError::Empty("training set is empty".into()));
    }
    if let Some(d) = &opts.checkpoint_dir {
        std::fs::create_dir_all(d)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let adam = Adam::default();
    let sched = StepLr {
        base: cfg.lr,
        decay: cfg.lr_decay,
        step_size: cfg.lr_step,
    };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut last_good: Option<PathBuf> = None;
    for epoch in 0..cfg.epochs {
        let lr = sched.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut sums = LossTerms::default();
        let mut steps = 0;
        let mut skipped = 0;
        for batch in order.chunks(cfg.batch_size) {
            let mut samples = Vec::with_capacity(batch.len());
            for &i in batch {
                let s = rng.gen_range(cfg.scale_min..=cfg.scale_max);
                let sc = scale_augment(&train_set[i], s)?;
                samples.push(prepare_sample(model, &sc, cfg.margin)?);
            }
            let norm = samples.iter().fold(Norm::default(), |n, s| n + s.mask.norm());
            if norm.goals == 0 && norm.trajectories == 0 {
                log::warn!("epoch {epoch}: batch without supervised agents skipped");
                skipped += 1;
                continue;
            }
            model.store.zero_grad();
            let mut batch_terms = LossTerms::default();
            for s in &samples {
                let mut tape = Tape::new();
                let out = match scene_loss(&mut tape, model, &s.inputs, &s.mask, norm, cfg) {
                    Err(CoreError::Diff(DiffError::NonFinite { .. })) => {
                        return Err(CoreError::Diverged { epoch, last_good })
                    }
                    other => other?,
                };
                if let Some((loss, terms)) = out {
                    tape.backward(loss)?.accumulate_into(&mut model.store);
                    batch_terms += terms;
                }
            }
            if !batch_terms.total.is_finite() || !model.store.grads_finite() {
                return Err(CoreError::Diverged { epoch, last_good });
            }
            if cfg.grad_clip > 0.0 {
                model.store.clip_grad_norm(cfg.grad_clip);
            }
            adam.step(&mut model.store, lr);
            sums += batch_terms;
            steps += 1;
        }
        let n = steps.max(1) as f64;
        let mut rec = EpochRecord {
            epoch,
            lr,
            loss: sums.total / n,
            cls: sums.cls / n,
            reg: sums.reg / n,
            traj: sums.traj / n,
            steps,
            skipped,
            eval_min_fde_1: None,
            eval_min_fde_k: None,
            eval_brier_fde_k: None,
            eval_mr_k: None,
        };
        let last_epoch = epoch + 1 == cfg.epochs;
        if !holdout.is_empty() && cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || last_epoch) {
            let (_, report) = evaluate(model, holdout, &opts.sampler)?;
            let a = &report.aggregate;
            rec.eval_min_fde_1 = Some(a.min_fde_1);
            rec.eval_min_fde_k = Some(a.min_fde_k);
            rec.eval_brier_fde_k = Some(a.brier_fde_k);
            rec.eval_mr_k = Some(a.mr_k);
        }
        log::info!(
            "epoch {epoch}: lr {lr:.2e} loss {:.4} (cls {:.4} reg {:.4} traj {:.4}) eval minFDE@1 {:?}",
            rec.loss,
            rec.cls,
            rec.reg,
            rec.traj,
            rec.eval_min_fde_1
        );
        history.push(rec);
        if let Some(d) = &opts.checkpoint_dir {
            let p = checkpoint_path(d, epoch);
            model.save(&p, true)?;
            last_good = Some(p);
        }
        if let Some(p) = &opts.history_csv {
            write_history(p, &history)?;
        }
    }
    Ok(history)
}
