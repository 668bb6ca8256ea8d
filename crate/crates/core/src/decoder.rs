//! Goal decoding: per-agent goal classification over lane-graph nodes with
//! node-frame offsets, greedy multi-modal goal selection, and trajectory
//! completion in the agent frame.

use std::io::{BufRead, Write};

use diffmath::{Real, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::config::SamplerConfig;
use crate::encoders::{embed_attrs, encode, SceneEmbedding, SceneInputs};
use crate::error::{CoreError, Result};
use crate::geometry::{dist, Pose2, Vec2};
use crate::hmp::{EdgeAttr, EdgeSet, HeteroGraph};
use crate::lanegraph::EdgeKind;
use crate::model::{Model, Network, AGENT, GOAL_A2M, GOAL_M2A, MAP};

/// Meters per unit of the agent-frame goal coordinates fed to completion.
pub const GOAL_COORD_SCALE: f64 = 20.0;

/// Goal graph: one connected component per agent, holding the agent and a
/// copy of every map node. Map copy `a·M + m` belongs to agent `a`.
#[derive(Clone, Debug)]
pub struct GoalInputs {
    pub graph: HeteroGraph,
    pub agents: usize,
    pub nodes: usize,
    /// Map node behind each copy.
    pub map_index: Vec<usize>,
    /// Per lane edge kind: the lane-graph edge behind each copied edge.
    pub lane_index: Vec<Vec<usize>>,
    pub a2m_raw: Vec<f64>,
    pub m2a_raw: Vec<f64>,
}

pub fn build_goal_graph(net: &Network, si: &SceneInputs) -> GoalInputs {
    let a = si.num_agents();
    let m = si.num_nodes();
    let g = &si.lane.graph;
    let node_poses = g.poses();
    let mut map_poses = Vec::with_capacity(a * m);
    for _ in 0..a {
        map_poses.extend_from_slice(&node_poses);
    }
    let map_index: Vec<usize> = (0..a * m).map(|i| i % m).collect();
    let mut edge_sets = Vec::with_capacity(EdgeKind::COUNT + 2);
    let mut lane_index = Vec::with_capacity(EdgeKind::COUNT);
    for kind in EdgeKind::all() {
        let edges = g.edges_of(kind);
        let mut src = Vec::with_capacity(a * edges.len());
        let mut dst = Vec::with_capacity(a * edges.len());
        let mut idx = Vec::with_capacity(a * edges.len());
        for c in 0..a {
            for (e, &(s, d)) in edges.iter().enumerate() {
                src.push(c * m + s);
                dst.push(c * m + d);
                idx.push(e);
            }
        }
        edge_sets.push(EdgeSet {
            slot: kind.index(),
            src_class: MAP,
            dst_class: MAP,
            src,
            dst,
        });
        lane_index.push(idx);
    }
    let a2m: Vec<(usize, usize)> = (0..a * m).map(|i| (i / m, i)).collect();
    let m2a: Vec<(usize, usize)> = a2m.iter().map(|&(x, y)| (y, x)).collect();
    edge_sets.push(EdgeSet::new(GOAL_A2M, AGENT, MAP, &a2m));
    edge_sets.push(EdgeSet::new(GOAL_M2A, MAP, AGENT, &m2a));
    let graph = HeteroGraph {
        poses: vec![si.agent_poses.clone(), map_poses],
        edge_sets,
    };
    let (a2m_raw, m2a_raw) = if net.relative() {
        (graph.raw_geometry(&net.bank, GOAL_A2M), graph.raw_geometry(&net.bank, GOAL_M2A))
    } else {
        (Vec::new(), Vec::new())
    };
    GoalInputs {
        graph,
        agents: a,
        nodes: m,
        map_index,
        lane_index,
        a2m_raw,
        m2a_raw,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GoalOutput {
    /// `A·M × 1` goal logits.
    pub logits: Var,
    /// `A·M × 2` offsets in each node's frame, meters.
    pub offsets: Var,
    /// `A × H` agent features after the goal stack.
    pub agents: Var,
}

pub fn predict_goals<T: Real>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    si: &SceneInputs,
    gi: &GoalInputs,
    emb: &SceneEmbedding,
) -> Result<GoalOutput> {
    let net = &model.net;
    let store = &model.store;
    let map0 = tape.gather_rows(emb.map, &gi.map_index)?;
    let mut attrs = Vec::with_capacity(gi.graph.edge_sets.len());
    let unique = embed_attrs(tape, model, &net.pp_goal, &si.lane.raw)?;
    for (u, index) in unique.into_iter().zip(&gi.lane_index) {
        attrs.push(match u {
            EdgeAttr::Rows(v) => EdgeAttr::Gathered {
                unique: v,
                index: index.clone(),
            },
            other => other,
        });
    }
    for raw in [&gi.a2m_raw, &gi.m2a_raw] {
        attrs.push(if raw.is_empty() {
            EdgeAttr::Absent
        } else {
            EdgeAttr::Rows(net.pp_goal.embed_raw(tape, store, raw)?)
        });
    }
    let out = net.goal_stack.forward(tape, store, &gi.graph, &[emb.agents, map0], &attrs)?;
    let logits = net.logit_head.forward(tape, store, out[MAP])?;
    let offsets = net.offset_head.forward(tape, store, out[MAP])?;
    Ok(GoalOutput {
        logits,
        offsets,
        agents: out[AGENT],
    })
}

/// Numerically stable softmax in f64.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

/// World position of a node-frame offset.
pub fn goal_world(node: &Pose2, offset: Vec2) -> Vec2 {
    node.to_world(offset)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GoalPick {
    pub node: usize,
    pub prob: f64,
}

/// Slack in meters for the sampler's distance thresholds.
pub const DIST_TOL: f64 = 1e-9;

/// Greedy diverse goal selection over node probabilities.
///
/// Each round takes the highest surviving score (lowest index on ties),
/// removes every node closer than `gamma` to it, and divides the score of
/// every node closer than `nu` by `tau`. Distances within `DIST_TOL` of a
/// threshold count as on it, so rounding from a rigid transform cannot flip
/// a comparison on exactly spaced maps. If the candidates run out before
/// `k` picks, the last pick is repeated and its probability shared equally.
/// Mode probabilities are the picked nodes' probabilities renormalised.
pub fn greedy_sample(probs: &[f64], centers: &[Vec2], cfg: &SamplerConfig) -> Result<Vec<GoalPick>> {
    if probs.is_empty() {
        return Err(CoreError::Empty("no goal candidates".into()));
    }
    if probs.len() != centers.len() {
        return Err(CoreError::Shape("one center per probability required".into()));
    }
    if probs.iter().any(|p| !(*p >= 0.0)) {
        return Err(CoreError::Shape("goal probabilities must be non-negative".into()));
    }
    let n = probs.len();
    let mut active = vec![true; n];
    let mut hits = vec![0i32; n];
    let mut picks: Vec<usize> = Vec::with_capacity(cfg.k);
    while picks.len() < cfg.k {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            if !active[i] {
                continue;
            }
            let s = probs[i] / cfg.tau.powi(hits[i]);
            if best.map_or(true, |(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        let Some((pick, _)) = best else { break };
        picks.push(pick);
        for i in 0..n {
            let d = dist(centers[i], centers[pick]);
            if d < cfg.gamma - DIST_TOL {
                active[i] = false;
            } else if d < cfg.nu - DIST_TOL {
                hits[i] += 1;
            }
        }
    }
    Ok(mode_probabilities(probs, &picks, cfg.k))
}

/// Renormalised probabilities of distinct picks, padded to `k` modes by
/// splitting the last pick.
pub fn mode_probabilities(probs: &[f64], picks: &[usize], k: usize) -> Vec<GoalPick> {
    let mass: Vec<f64> = picks.iter().map(|&i| probs[i].max(f64::MIN_POSITIVE)).collect();
    let total: f64 = mass.iter().sum();
    let mut out: Vec<GoalPick> = picks
        .iter()
        .zip(&mass)
        .map(|(&node, &m)| GoalPick { node, prob: m / total })
        .collect();
    if out.len() < k {
        let last = out.pop().expect("at least one pick");
        let copies = k - out.len();
        for _ in 0..copies {
            out.push(GoalPick {
                node: last.node,
                prob: last.prob / copies as f64,
            });
        }
    }
    out
}

/// Raw conditioning rows for completion: goal geometry relative to the
/// agent pose (heading slots zero) and agent-frame goal coordinates.
pub fn completion_conditions(net: &Network, pose0: &Pose2, goal: Vec2, out: &mut Vec<f64>) {
    let w = net.bank.width();
    let start = out.len();
    out.resize(start + w, 0.0);
    if net.relative() {
        net.bank.encode_point_into(goal, pose0, &mut out[start..]);
    }
    let local = pose0.to_local(goal);
    out.extend([local[0] / GOAL_COORD_SCALE, local[1] / GOAL_COORD_SCALE]);
}

/// Agent-frame waypoints (meters) for each `(agent row, goal)` request;
/// returns `G × 2T_f`.
pub fn complete_trajectory<T: Real>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    agent_rows: Var,
    poses: &[Pose2],
    requests: &[(usize, Vec2)],
) -> Result<Var> {
    let net = &model.net;
    let mut cond = Vec::with_capacity(requests.len() * (net.bank.width() + 2));
    for &(a, goal) in requests {
        if !goal[0].is_finite() || !goal[1].is_finite() {
            return Err(CoreError::Geometry("goal is not finite".into()));
        }
        completion_conditions(net, &poses[a], goal, &mut cond);
    }
    let idx: Vec<usize> = requests.iter().map(|r| r.0).collect();
    let rows = tape.gather_rows(agent_rows, &idx)?;
    let cond = tape.constant(Tensor::from_f64(&[requests.len(), net.bank.width() + 2], &cond)?)?;
    let x = tape.concat_cols(&[rows, cond])?;
    let y = net.completion.forward(tape, &model.store, x)?;
    Ok(tape.scale(y, T::of(net.cfg.output_scale))?)
}

/// Agent-frame flat waypoint row to world points.
pub fn waypoints_to_world(pose0: &Pose2, flat: &[f64]) -> Vec<Vec2> {
    flat.chunks_exact(2).map(|p| pose0.to_world([p[0], p[1]])).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub probability: f64,
    pub goal: Vec2,
    /// Lane-graph node the goal is anchored to.
    pub node: usize,
    pub waypoints: Vec<Vec2>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentForecast {
    pub scenario_id: u64,
    pub agent_id: u32,
    pub modes: Vec<Mode>,
}

pub type ForecastSet = Vec<AgentForecast>;

/// Full pipeline on prepared inputs; one forecast per agent in input order.
pub fn forecast_prepared<T: Real>(
    model: &Model<T>,
    si: &SceneInputs,
    agent_ids: &[u32],
    scenario_id: u64,
    sampler: &SamplerConfig,
    cached_map: Option<&Tensor<T>>,
) -> Result<ForecastSet> {
    sampler.validate()?;
    if si.num_agents() == 0 {
        return Ok(Vec::new());
    }
    let mut tape = Tape::new();
    let emb = encode(&mut tape, model, si, cached_map)?;
    let gi = build_goal_graph(&model.net, si);
    let out = predict_goals(&mut tape, model, si, &gi, &emb)?;
    let logits = tape.value(out.logits).to_f64_vec();
    let offsets = tape.value(out.offsets).to_f64_vec();
    let m = gi.nodes;
    let nodes = &si.lane.graph.nodes;
    let centers: Vec<Vec2> = nodes.iter().map(|n| n.pose.c).collect();
    let mut requests = Vec::new();
    let mut picks_per_agent = Vec::with_capacity(si.num_agents());
    for a in 0..si.num_agents() {
        let probs = softmax(&logits[a * m..(a + 1) * m]);
        let picks = greedy_sample(&probs, &centers, sampler)?;
        for p in &picks {
            let row = a * m + p.node;
            let goal = goal_world(&nodes[p.node].pose, [offsets[2 * row], offsets[2 * row + 1]]);
            requests.push((a, goal));
        }
        picks_per_agent.push(picks);
    }
    let traj = complete_trajectory(&mut tape, model, out.agents, &si.agent_poses, &requests)?;
    let traj = tape.value(traj).to_f64_vec();
    let width = 2 * model.net.cfg.domain.future_len();
    let mut result = Vec::with_capacity(si.num_agents());
    let mut r = 0;
    for (a, picks) in picks_per_agent.into_iter().enumerate() {
        let mut modes = Vec::with_capacity(picks.len());
        for p in picks {
            modes.push(Mode {
                probability: p.prob,
                goal: requests[r].1,
                node: p.node,
                waypoints: waypoints_to_world(&si.agent_poses[a], &traj[r * width..(r + 1) * width]),
            });
            r += 1;
        }
        result.push(AgentForecast {
            scenario_id,
            agent_id: agent_ids[a],
            modes,
        });
    }
    Ok(result)
}

/// Builds the inputs for a scenario and forecasts every agent.
pub fn forecast<T: Real>(
    model: &Model<T>,
    scenario: &crate::track::Scenario,
    sampler: &SamplerConfig,
    cached_map: Option<&Tensor<T>>,
) -> Result<ForecastSet> {
    let si = SceneInputs::from_scenario(&model.net, scenario)?;
    let ids: Vec<u32> = scenario.agents.iter().map(|a| a.id).collect();
    forecast_prepared(model, &si, &ids, scenario.id, sampler, cached_map)
}

pub fn write_forecasts<W: Write>(mut w: W, forecasts: &[AgentForecast]) -> Result<()> {
    for f in forecasts {
        serde_json::to_writer(&mut w, f)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_forecasts<R: BufRead>(r: R) -> Result<Vec<AgentForecast>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CoreError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
