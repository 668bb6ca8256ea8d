//! Agent history encoder, lane-graph encoder and the heterogeneous scene
//! encoder, plus the weight-independent inputs they consume.

use diffmath::{Real, Tape, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::geometry::{dist, unrotate, Pose2};
use crate::hmp::{EdgeAttr, EdgeSet, HeteroGraph};
use crate::lanegraph::{EdgeKind, LaneGraph};
use crate::model::{
    history_feature_width, map_feature_width, Model, Network, AGENT, GLOBAL_POSITION_SCALE, MAP, SLOT_A2A,
    SLOT_A2M, SLOT_M2A,
};
use crate::config::FrameMode;
use crate::geometry::PairPose;
use crate::lanegraph::lane_graph;
use crate::track::{AgentTrack, Scenario};

pub const VELOCITY_SCALE: f64 = 10.0;
pub const SIZE_SCALE: f64 = 5.0;

/// History inputs for a batch of agents, `steps` rows per agent.
#[derive(Clone, Debug)]
pub struct HistoryInputs {
    pub agents: usize,
    pub steps: usize,
    /// `agents·steps × bank.width()` raw geometry of `pose_t → pose_0`.
    pub raw: Vec<f64>,
    /// 1 for observed steps, 0 otherwise.
    pub observed: Vec<f64>,
    /// Velocity, size, flag, class one-hot and (ablation) global pose.
    pub extra: Vec<f64>,
    pub extra_width: usize,
}

pub fn history_inputs(net: &Network, tracks: &[&AgentTrack]) -> Result<HistoryInputs> {
    let steps = tracks.first().map_or(net.cfg.domain.history_len(), |t| t.history_len());
    let w = net.bank.width();
    let global = net.cfg.frame == FrameMode::Global;
    let extra_width = history_feature_width(&net.cfg) - 2 * net.cfg.pair_dim;
    let mut raw = vec![0.0; tracks.len() * steps * w];
    let mut observed = Vec::with_capacity(tracks.len() * steps);
    let mut extra = Vec::with_capacity(tracks.len() * steps * extra_width);
    for (a, tr) in tracks.iter().enumerate() {
        tr.validate()?;
        if tr.history_len() != steps {
            return Err(CoreError::Shape("all agents in a batch need equal history length".into()));
        }
        let p0 = *tr.current();
        for t in 0..steps {
            let obs = tr.observed[t];
            let row = a * steps + t;
            if obs && !global {
                net.bank.encode_into(&tr.poses[t], &p0, &mut raw[row * w..(row + 1) * w]);
            }
            observed.push(if obs { 1.0 } else { 0.0 });
            let v = if !obs {
                [0.0, 0.0]
            } else if global {
                tr.velocities[t]
            } else {
                unrotate(tr.velocities[t], p0.h)
            };
            extra.extend([v[0] / VELOCITY_SCALE, v[1] / VELOCITY_SCALE]);
            extra.extend([tr.size[0] / SIZE_SCALE, tr.size[1] / SIZE_SCALE]);
            extra.push(observed[row]);
            extra.extend(tr.class.one_hot());
            if global {
                let p = &tr.poses[t];
                if obs {
                    extra.extend([p.c[0] / GLOBAL_POSITION_SCALE, p.c[1] / GLOBAL_POSITION_SCALE, p.h[0], p.h[1]]);
                } else {
                    extra.extend([0.0; 4]);
                }
            }
        }
    }
    Ok(HistoryInputs {
        agents: tracks.len(),
        steps,
        raw,
        observed,
        extra,
        extra_width,
    })
}

/// Embeds every agent history; returns `agents × hidden`.
pub fn encode_history<T: Real>(tape: &mut Tape<T>, model: &Model<T>, h: &HistoryInputs) -> Result<Var> {
    let net = &model.net;
    let store = &model.store;
    let hidden = net.cfg.hidden;
    if h.agents == 0 {
        return Ok(tape.constant(Tensor::zeros(&[0, hidden]))?);
    }
    if h.steps == 0 {
        return Err(CoreError::Shape("history needs at least one step".into()));
    }
    let rows = h.agents * h.steps;
    let d = net.cfg.pair_dim;
    let pose_part = if net.relative() {
        let e = net.pp_hist.embed_raw(tape, store, &h.raw)?;
        let mask = tape.constant(Tensor::from_f64(&[rows, d], &broadcast_cols(&h.observed, d))?)?;
        let e = tape.mul(e, mask)?;
        let prev: Vec<usize> = (0..rows).map(|r| if r % h.steps == 0 { r } else { r - 1 }).collect();
        let e_prev = tape.gather_rows(e, &prev)?;
        let diff = tape.sub(e, e_prev)?;
        tape.concat_cols(&[e, diff])?
    } else {
        tape.constant(Tensor::zeros(&[rows, 2 * d]))?
    };
    let extra = tape.constant(Tensor::from_f64(&[rows, h.extra_width], &h.extra)?)?;
    let x = tape.concat_cols(&[pose_part, extra])?;
    let x = net.hist_input.forward(tape, store, x)?;
    let x = tape.relu(x)?;
    let x = net.hist_conv.forward(tape, store, x, h.agents, h.steps)?;
    let mut state = tape.constant(Tensor::zeros(&[h.agents, hidden]))?;
    for t in 0..h.steps {
        let idx: Vec<usize> = (0..h.agents).map(|a| a * h.steps + t).collect();
        let xt = tape.gather_rows(x, &idx)?;
        state = net.hist_gru.forward(tape, store, state, xt)?;
    }
    Ok(state)
}

fn broadcast_cols(v: &[f64], cols: usize) -> Vec<f64> {
    v.iter().flat_map(|&x| std::iter::repeat(x).take(cols)).collect()
}

/// Lane-graph edges as a single-class heterogeneous graph, one edge set per
/// [`EdgeKind`] in index order.
pub fn lane_hetero(g: &LaneGraph) -> HeteroGraph {
    HeteroGraph {
        poses: vec![g.poses()],
        edge_sets: EdgeKind::all()
            .into_iter()
            .map(|k| EdgeSet::new(k.index(), 0, 0, g.edges_of(k)))
            .collect(),
    }
}

/// Weight-independent inputs of the lane-graph encoder.
#[derive(Clone, Debug)]
pub struct LaneInputs {
    pub graph: LaneGraph,
    pub hetero: HeteroGraph,
    /// Raw edge geometry per edge kind; empty in the global-frame ablation.
    pub raw: Vec<Vec<f64>>,
    pub features: Vec<f64>,
    pub feature_width: usize,
}

impl LaneInputs {
    pub fn new(net: &Network, graph: LaneGraph) -> Result<Self> {
        if graph.is_empty() {
            return Err(CoreError::Empty("lane graph has no nodes".into()));
        }
        let hetero = lane_hetero(&graph);
        let raw = if net.relative() {
            (0..hetero.edge_sets.len()).map(|k| hetero.raw_geometry(&net.bank, k)).collect()
        } else {
            vec![Vec::new(); hetero.edge_sets.len()]
        };
        let feature_width = map_feature_width(&net.cfg);
        let mut features = Vec::with_capacity(graph.len() * feature_width);
        for n in &graph.nodes {
            features.extend_from_slice(&n.features);
            if !net.relative() {
                let p = &n.pose;
                features.extend([p.c[0] / GLOBAL_POSITION_SCALE, p.c[1] / GLOBAL_POSITION_SCALE, p.h[0], p.h[1]]);
            }
        }
        Ok(Self {
            graph,
            hetero,
            raw,
            features,
            feature_width,
        })
    }

    pub fn len(&self) -> usize {
        self.graph.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graph.is_empty()
    }
}

pub(crate) fn embed_attrs<T: Real>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    pp: &PairPose,
    raw: &[Vec<f64>],
) -> Result<Vec<EdgeAttr>> {
    raw.iter()
        .map(|r| {
            if r.is_empty() {
                Ok(EdgeAttr::Absent)
            } else {
                Ok(EdgeAttr::Rows(pp.embed_raw(tape, &model.store, r)?))
            }
        })
        .collect()
}

/// Runs the lane-graph encoder; returns `nodes × hidden`.
pub fn encode_lane_graph<T: Real>(tape: &mut Tape<T>, model: &Model<T>, li: &LaneInputs) -> Result<Var> {
    let net = &model.net;
    let x = tape.constant(Tensor::from_f64(&[li.len(), li.feature_width], &li.features)?)?;
    let x = net.map_input.forward(tape, &model.store, x)?;
    let attrs = embed_attrs(tape, model, &net.pp_lane, &li.raw)?;
    let out = net.lane_stack.forward(tape, &model.store, &li.hetero, &[x], &attrs)?;
    Ok(out[0])
}

/// Scene graph over agent poses at t = 0 and the lane graph. The first
/// `EdgeKind::COUNT` edge sets are the lane edges in kind order, followed by
/// agent→agent, agent→map and map→agent.
pub fn assemble_scene_graph(agent_poses: &[Pose2], g: &LaneGraph, radius: f64) -> Result<HeteroGraph> {
    if g.is_empty() {
        return Err(CoreError::Empty("cannot anchor agents on an empty lane graph".into()));
    }
    if !(radius > 0.0) {
        return Err(CoreError::Config("agent radius must be positive".into()));
    }
    let mut edge_sets: Vec<EdgeSet> = EdgeKind::all()
        .into_iter()
        .map(|k| EdgeSet::new(k.index(), MAP, MAP, g.edges_of(k)))
        .collect();
    let mut a2a = Vec::new();
    for (i, pi) in agent_poses.iter().enumerate() {
        for (j, pj) in agent_poses.iter().enumerate() {
            if i != j && dist(pi.c, pj.c) < radius {
                a2a.push((i, j));
            }
        }
    }
    let anchors: Vec<usize> = agent_poses
        .iter()
        .map(|p| g.nearest_node(p.c).expect("nonempty graph"))
        .collect();
    let a2m: Vec<(usize, usize)> = anchors.iter().enumerate().map(|(a, &m)| (a, m)).collect();
    let m2a: Vec<(usize, usize)> = anchors.iter().enumerate().map(|(a, &m)| (m, a)).collect();
    edge_sets.push(EdgeSet::new(SLOT_A2A, AGENT, AGENT, &a2a));
    edge_sets.push(EdgeSet::new(SLOT_A2M, AGENT, MAP, &a2m));
    edge_sets.push(EdgeSet::new(SLOT_M2A, MAP, AGENT, &m2a));
    Ok(HeteroGraph {
        poses: vec![agent_poses.to_vec(), g.poses()],
        edge_sets,
    })
}

/// Everything the encoders need for one scene, independent of weights.
#[derive(Clone, Debug)]
pub struct SceneInputs {
    pub lane: LaneInputs,
    pub agent_poses: Vec<Pose2>,
    pub history: HistoryInputs,
    pub scene: HeteroGraph,
    /// Raw geometry of the agent edge sets (a2a, a2m, m2a).
    pub agent_raw: [Vec<f64>; 3],
}

impl SceneInputs {
    pub fn new(net: &Network, lane: LaneInputs, agents: &[&AgentTrack]) -> Result<Self> {
        let history = history_inputs(net, agents)?;
        let agent_poses: Vec<Pose2> = agents.iter().map(|a| *a.current()).collect();
        let scene = assemble_scene_graph(&agent_poses, &lane.graph, net.cfg.agent_radius)?;
        let n = EdgeKind::COUNT;
        let agent_raw = if net.relative() {
            [
                scene.raw_geometry(&net.bank, n),
                scene.raw_geometry(&net.bank, n + 1),
                scene.raw_geometry(&net.bank, n + 2),
            ]
        } else {
            Default::default()
        };
        Ok(Self {
            lane,
            agent_poses,
            history,
            scene,
            agent_raw,
        })
    }

    /// Builds the lane graph of a scenario and the inputs for all agents.
    pub fn from_scenario(net: &Network, scenario: &Scenario) -> Result<Self> {
        let g = lane_graph(&scenario.map, net.cfg.domain.interval(), net.cfg.conflict_radius)?;
        let refs: Vec<&AgentTrack> = scenario.agents.iter().collect();
        Self::new(net, LaneInputs::new(net, g)?, &refs)
    }

    pub fn num_agents(&self) -> usize {
        self.agent_poses.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.lane.len()
    }
}

/// Outputs of the full encoder.
#[derive(Clone, Copy, Debug)]
pub struct SceneEmbedding {
    pub agents: Var,
    pub map: Var,
}

/// Fuses agent and map embeddings with the scene stack; both classes update
/// together in every layer.
pub fn encode_scene<T: Real>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    si: &SceneInputs,
    agent_emb: Var,
    map_emb: Var,
) -> Result<SceneEmbedding> {
    let net = &model.net;
    let mut attrs = embed_attrs(tape, model, &net.pp_scene, &si.lane.raw)?;
    attrs.extend(embed_attrs(tape, model, &net.pp_scene, &si.agent_raw)?);
    if attrs.len() < si.scene.edge_sets.len() {
        attrs.resize(si.scene.edge_sets.len(), EdgeAttr::Absent);
    }
    let out = net.scene_stack.forward(tape, &model.store, &si.scene, &[agent_emb, map_emb], &attrs)?;
    Ok(SceneEmbedding {
        agents: out[AGENT],
        map: out[MAP],
    })
}

/// History, lane-graph and scene encoders in sequence. A cached lane-graph
/// embedding replaces the lane-graph encoder when given.
pub fn encode<T: Real>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    si: &SceneInputs,
    cached_map: Option<&Tensor<T>>,
) -> Result<SceneEmbedding> {
    let map_emb = match cached_map {
        Some(t) => {
            if t.dims2() != (si.num_nodes(), model.net.cfg.hidden) {
                return Err(CoreError::Shape("cached map embedding has the wrong shape".into()));
            }
            tape.constant(t.clone())?
        }
        None => encode_lane_graph(tape, model, &si.lane)?,
    };
    let agent_emb = encode_history(tape, model, &si.history)?;
    encode_scene(tape, model, si, agent_emb, map_emb)
}
