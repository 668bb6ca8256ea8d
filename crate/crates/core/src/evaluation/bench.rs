//! Encoder runtime scaling: one shared scene encoding versus one agent-centric
//! encoding per agent.
//!
//! Both modes are timed from the raw scenario through the scene encoder,
//! including lane-graph construction. In per-agent mode the scenario is moved
//! into each agent's frame and encoded in full, one agent after another.

use std::time::Instant;

use diffmath::{Real, Tape};
use serde::Serialize;

use crate::config::{Domain, SamplerConfig};
use crate::decoder::{forecast, ForecastSet};
use crate::encoders::{encode, SceneInputs};
use crate::error::{CoreError, Result};
use crate::geometry::{dist, Pose2, Se2};
use crate::lanegraph::lane_graph;
use crate::map::MapSource;
use crate::model::Model;
use crate::scenarios::templates::multi_lane_straight;
use crate::track::{AgentClass, AgentTrack, Scenario};

const BENCH_SPEED: f64 = 25.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodeMode {
    Shared,
    PerAgent,
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub agent_counts: Vec<usize>,
    pub node_counts: Vec<usize>,
    /// Map size during the agent sweep.
    pub fixed_nodes: usize,
    /// Agent count during the node sweep.
    pub fixed_agents: usize,
    pub trials: usize,
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            agent_counts: vec![1, 5, 10, 20, 40],
            node_counts: vec![10, 50, 100, 250, 500],
            fixed_nodes: 250,
            fixed_agents: 40,
            trials: 20,
            warmup: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub mode: EncodeMode,
    pub sweep: String,
    pub agents: usize,
    pub nodes: usize,
    pub median_ms: f64,
    /// Relative to the sweep baseline: one agent in shared mode for the
    /// agent sweep, the smallest map in shared mode for the node sweep.
    pub relative: f64,
}

/// Highway map of parallel straight lanes with exactly `nodes` lane-graph
/// nodes (up to 100 per lane).
pub fn bench_map(nodes: usize) -> Result<MapSource> {
    if nodes == 0 {
        return Err(CoreError::Config("benchmark map needs at least one node".into()));
    }
    let interval = Domain::Highway.interval();
    let lanes = (1..=nodes)
        .find(|l| nodes % l == 0 && nodes / l <= 100)
        .unwrap_or(nodes);
    let per_lane = nodes / lanes;
    Ok(multi_lane_straight(lanes, per_lane as f64 * interval, BENCH_SPEED))
}

/// `agents` vehicles driving along the lanes of `map` at constant speed.
pub fn bench_scenario(agents: usize, nodes: usize) -> Result<Scenario> {
    let map = bench_map(nodes)?;
    let domain = Domain::Highway;
    let lanes = map.lanes.len();
    let length = crate::scenarios::sim::path_length(&map.lanes[0].centerline);
    let per_lane = agents.div_ceil(lanes).max(1);
    let dt = 1.0 / crate::config::TRACK_HZ;
    let hist = domain.history_len();
    let tracks = (0..agents)
        .map(|i| {
            let lane = &map.lanes[i % lanes];
            let slot = i / lanes;
            let x = (slot as f64 + 0.5) * length / per_lane as f64;
            let y = lane.centerline[0][1];
            let poses = (0..hist)
                .map(|t| Pose2::from_angle([x - BENCH_SPEED * dt * (hist - 1 - t) as f64, y], 0.0))
                .collect();
            AgentTrack {
                id: i as u32 + 1,
                class: AgentClass::Vehicle,
                size: [4.5, 2.0],
                poses,
                velocities: vec![[BENCH_SPEED, 0.0]; hist],
                observed: vec![true; hist],
                future: vec![],
                future_valid: vec![],
            }
        })
        .collect();
    Ok(Scenario {
        id: 0,
        domain,
        template: "bench".into(),
        map,
        agents: tracks,
    })
}

/// One shared encoding of the whole scene.
pub fn encode_shared<T: Real>(model: &Model<T>, scenario: &Scenario) -> Result<()> {
    let si = SceneInputs::from_scenario(&model.net, scenario)?;
    let mut tape = Tape::new();
    encode(&mut tape, model, &si, None)?;
    Ok(())
}

fn agent_frame(a: &AgentTrack) -> Se2 {
    let p = a.current();
    Se2::new(p.angle(), p.c).inverse()
}

/// One full encoding per agent, each in that agent's frame.
pub fn encode_per_agent<T: Real>(model: &Model<T>, scenario: &Scenario) -> Result<()> {
    for a in &scenario.agents {
        let local = scenario.transformed(&agent_frame(a));
        encode_shared(model, &local)?;
    }
    Ok(())
}

/// Largest waypoint difference between shared forecasts and per-agent
/// forecasts mapped back to the world frame.
pub fn equivalence_gap<T: Real>(model: &Model<T>, scenario: &Scenario, sampler: &SamplerConfig) -> Result<f64> {
    let shared = forecast(model, scenario, sampler, None)?;
    let mut gap: f64 = 0.0;
    for (i, a) in scenario.agents.iter().enumerate() {
        let to_local = agent_frame(a);
        let back = to_local.inverse();
        let local: ForecastSet = forecast(model, &scenario.transformed(&to_local), sampler, None)?;
        for (m, n) in shared[i].modes.iter().zip(&local[i].modes) {
            gap = gap.max((m.probability - n.probability).abs());
            for (p, q) in m.waypoints.iter().zip(&n.waypoints) {
                gap = gap.max(dist(*p, back.apply_point(*q)));
            }
        }
    }
    Ok(gap)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median wall-clock milliseconds of one encoding in `mode`.
pub fn time_mode<T: Real>(model: &Model<T>, scenario: &Scenario, mode: EncodeMode, cfg: &BenchConfig) -> Result<f64> {
    let run = || match mode {
        EncodeMode::Shared => encode_shared(model, scenario),
        EncodeMode::PerAgent => encode_per_agent(model, scenario),
    };
    for _ in 0..cfg.warmup {
        run()?;
    }
    let mut times = Vec::with_capacity(cfg.trials);
    for _ in 0..cfg.trials.max(1) {
        let t = Instant::now();
        run()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(median(times))
}

/// Runs both sweeps. Returns an error when the two modes disagree on the
/// forecasts of the largest configuration by more than `tolerance`.
pub fn runtime_bench<T: Real>(
    model: &Model<T>,
    cfg: &BenchConfig,
    sampler: &SamplerConfig,
    tolerance: f64,
) -> Result<Vec<BenchRow>> {
    let gate = bench_scenario(cfg.fixed_agents.min(8), cfg.fixed_nodes)?;
    let gap = equivalence_gap(model, &gate, sampler)?;
    if !(gap <= tolerance) {
        return Err(CoreError::Shape(format!(
            "shared and per-agent forecasts differ by {gap:e}"
        )));
    }
    let nodes_of = |sc: &Scenario| -> Result<usize> { Ok(lane_graph(&sc.map, sc.domain.interval(), model.cfg().conflict_radius)?.len()) };
    let mut rows = Vec::new();
    let mut sweep = |name: &str, configs: Vec<(usize, usize)>| -> Result<()> {
        let mut base = None;
        for (agents, nodes) in configs {
            let sc = bench_scenario(agents, nodes)?;
            let n = nodes_of(&sc)?;
            for mode in [EncodeMode::Shared, EncodeMode::PerAgent] {
                let ms = time_mode(model, &sc, mode, cfg)?;
                let b = *base.get_or_insert(ms);
                log::info!("{name}: {mode:?} agents {agents} nodes {n}: {ms:.3} ms");
                rows.push(BenchRow {
                    mode,
                    sweep: name.to_string(),
                    agents,
                    nodes: n,
                    median_ms: ms,
                    relative: ms / b,
                });
            }
        }
        Ok(())
    };
    sweep("agents", cfg.agent_counts.iter().map(|&a| (a, cfg.fixed_nodes)).collect())?;
    sweep("nodes", cfg.node_counts.iter().map(|&n| (cfg.fixed_agents, n)).collect())?;
    Ok(rows)
}
