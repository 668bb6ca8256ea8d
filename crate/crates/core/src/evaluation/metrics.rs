//! Displacement metrics over multi-modal forecasts.
//!
//! `@K` metrics use the first `K` modes of each forecast. The best mode is
//! the one with the smallest endpoint error (lowest index on ties). Brier
//! variants add `(1 - p_best)^2` and a miss is an endpoint error above
//! [`MISS_THRESHOLD`]; both follow the public Argoverse 2 convention.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::decoder::AgentForecast;
use crate::error::{CoreError, Result};
use crate::geometry::{dist, dot, normalize, sub, Vec2};
use crate::track::{AgentTrack, Scenario};

pub const MISS_THRESHOLD: f64 = 2.0;

/// Metrics of one scored agent.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AgentMetrics {
    pub scenario_id: u64,
    pub agent_id: u32,
    pub min_ade_1: f64,
    pub min_fde_1: f64,
    pub brier_fde_1: f64,
    pub miss_1: f64,
    pub min_ade_k: f64,
    pub min_fde_k: f64,
    pub brier_fde_k: f64,
    pub miss_k: f64,
    pub ate_1: f64,
    pub cte_1: f64,
    pub brier_ate_k: f64,
    pub brier_cte_k: f64,
}

/// Means over a set of agents; `mr` fields are miss rates.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Summary {
    pub agents: usize,
    pub min_ade_1: f64,
    pub min_fde_1: f64,
    pub brier_fde_1: f64,
    pub mr_1: f64,
    pub min_ade_k: f64,
    pub min_fde_k: f64,
    pub brier_fde_k: f64,
    pub mr_k: f64,
    pub ate_1: f64,
    pub cte_1: f64,
    pub brier_ate_k: f64,
    pub brier_cte_k: f64,
}

impl Summary {
    pub fn of(agents: &[AgentMetrics]) -> Summary {
        let n = agents.len();
        if n == 0 {
            return Summary::default();
        }
        let mean = |f: fn(&AgentMetrics) -> f64| agents.iter().map(f).sum::<f64>() / n as f64;
        Summary {
            agents: n,
            min_ade_1: mean(|a| a.min_ade_1),
            min_fde_1: mean(|a| a.min_fde_1),
            brier_fde_1: mean(|a| a.brier_fde_1),
            mr_1: mean(|a| a.miss_1),
            min_ade_k: mean(|a| a.min_ade_k),
            min_fde_k: mean(|a| a.min_fde_k),
            brier_fde_k: mean(|a| a.brier_fde_k),
            mr_k: mean(|a| a.miss_k),
            ate_1: mean(|a| a.ate_1),
            cte_1: mean(|a| a.cte_1),
            brier_ate_k: mean(|a| a.brier_ate_k),
            brier_cte_k: mean(|a| a.brier_cte_k),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub k: usize,
    pub agents: Vec<AgentMetrics>,
    pub scenarios: BTreeMap<u64, Summary>,
    pub aggregate: Summary,
}

impl MetricReport {
    /// Aggregate restricted to scenarios whose template is in `templates`.
    pub fn filtered(&self, scenarios: &[Scenario], templates: &[&str]) -> Summary {
        let keep: Vec<u64> = scenarios
            .iter()
            .filter(|s| templates.contains(&s.template.as_str()))
            .map(|s| s.id)
            .collect();
        let agents: Vec<AgentMetrics> = self
            .agents
            .iter()
            .filter(|a| keep.contains(&a.scenario_id))
            .cloned()
            .collect();
        Summary::of(&agents)
    }
}

/// Along-track and cross-track components of `pred - gt` at every waypoint,
/// in the frame of the ground-truth tangent. Tangents use central
/// differences inside and a backward difference at the last waypoint;
/// `fallback` is used where the ground truth does not move.
pub fn track_errors(pred: &[Vec2], gt: &[Vec2], fallback: Vec2) -> Vec<(f64, f64)> {
    let n = gt.len();
    let mut last = fallback;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (a, b) = match (i, n) {
            (_, 1) => (0, 0),
            (0, _) => (0, 1),
            (i, n) if i == n - 1 => (i - 1, i),
            (i, _) => (i - 1, i + 1),
        };
        let t = normalize(sub(gt[b], gt[a])).unwrap_or(last);
        last = t;
        let e = sub(pred[i], gt[i]);
        out.push((dot(e, t), t[0] * e[1] - t[1] * e[0]));
    }
    out
}

fn ade(pred: &[Vec2], gt: &[Vec2]) -> f64 {
    pred.iter().zip(gt).map(|(p, g)| dist(*p, *g)).sum::<f64>() / gt.len() as f64
}

/// Metrics of a single agent against its ground truth.
pub fn agent_metrics(f: &AgentForecast, gt: &AgentTrack, k: usize) -> Result<AgentMetrics> {
    if f.modes.len() < k || k == 0 {
        return Err(CoreError::Shape(format!(
            "agent {}: {} modes for K = {k}",
            f.agent_id,
            f.modes.len()
        )));
    }
    let t = gt.future.len();
    if t == 0 {
        return Err(CoreError::Empty(format!("agent {} has no ground-truth future", gt.id)));
    }
    for m in &f.modes[..k] {
        if m.waypoints.len() != t {
            return Err(CoreError::Shape(format!(
                "agent {}: {} waypoints, ground truth has {t}",
                f.agent_id,
                m.waypoints.len()
            )));
        }
    }
    let end = gt.future[t - 1];
    let fde: Vec<f64> = f.modes[..k].iter().map(|m| dist(m.waypoints[t - 1], end)).collect();
    let best_of = |kk: usize| -> usize {
        let mut b = 0;
        for i in 1..kk {
            if fde[i] < fde[b] {
                b = i;
            }
        }
        b
    };
    let min_ade = |kk: usize| -> f64 {
        f.modes[..kk]
            .iter()
            .map(|m| ade(&m.waypoints, &gt.future))
            .fold(f64::INFINITY, f64::min)
    };
    let penalty = |i: usize| (1.0 - f.modes[i].probability).powi(2);
    let fallback = gt.current().h;
    let endpoint = |i: usize| -> (f64, f64) {
        let e = track_errors(&f.modes[i].waypoints, &gt.future, fallback);
        let (a, c) = e[t - 1];
        (a.abs(), c.abs())
    };
    let b1 = best_of(1);
    let bk = best_of(k);
    let (ate1, cte1) = endpoint(b1);
    let (atek, ctek) = endpoint(bk);
    Ok(AgentMetrics {
        scenario_id: f.scenario_id,
        agent_id: f.agent_id,
        min_ade_1: min_ade(1),
        min_fde_1: fde[b1],
        brier_fde_1: fde[b1] + penalty(b1),
        miss_1: (fde[b1] > MISS_THRESHOLD) as u8 as f64,
        min_ade_k: min_ade(k),
        min_fde_k: fde[bk],
        brier_fde_k: fde[bk] + penalty(bk),
        miss_k: (fde[bk] > MISS_THRESHOLD) as u8 as f64,
        ate_1: ate1,
        cte_1: cte1,
        brier_ate_k: atek + penalty(bk),
        brier_cte_k: ctek + penalty(bk),
    })
}

/// Scores every agent with a full ground-truth future. Forecasts are matched
/// by scenario and agent id; a scored agent without a forecast is an error.
pub fn metrics(forecasts: &[AgentForecast], scenarios: &[Scenario], k: usize) -> Result<MetricReport> {
    let index: BTreeMap<(u64, u32), &AgentForecast> =
        forecasts.iter().map(|f| ((f.scenario_id, f.agent_id), f)).collect();
    let mut agents = Vec::new();
    let mut scenarios_out = BTreeMap::new();
    for sc in scenarios {
        let mut mine = Vec::new();
        for a in sc.agents.iter().filter(|a| a.has_full_future()) {
            let f = index.get(&(sc.id, a.id)).ok_or_else(|| {
                CoreError::Shape(format!("no forecast for agent {} of scenario {}", a.id, sc.id))
            })?;
            mine.push(agent_metrics(f, a, k)?);
        }
        scenarios_out.insert(sc.id, Summary::of(&mine));
        agents.extend(mine);
    }
    let aggregate = Summary::of(&agents);
    Ok(MetricReport {
        k,
        agents,
        scenarios: scenarios_out,
        aggregate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::Mode;
    use crate::geometry::Pose2;
    use crate::track::AgentClass;

    pub(crate) fn gt_track(future: Vec<Vec2>) -> AgentTrack {
        AgentTrack {
            id: 1,
            class: AgentClass::Vehicle,
            size: [4.0, 2.0],
            poses: vec![Pose2::from_angle([0.0, 0.0], 0.0)],
            velocities: vec![[1.0, 0.0]],
            observed: vec![true],
            future_valid: vec![true; future.len()],
            future,
        }
    }

    fn single(waypoints: Vec<Vec2>, p: f64) -> AgentForecast {
        AgentForecast {
            scenario_id: 0,
            agent_id: 1,
            modes: vec![Mode {
                probability: p,
                goal: *waypoints.last().unwrap(),
                node: 0,
                waypoints,
            }],
        }
    }

    #[test]
    fn perfect_forecast_scores_zero() {
        let gt: Vec<Vec2> = (1..=10).map(|i| [i as f64, 0.5 * i as f64]).collect();
        let m = agent_metrics(&single(gt.clone(), 1.0), &gt_track(gt), 1).unwrap();
        assert_eq!(
            [m.min_ade_1, m.min_fde_1, m.brier_fde_1, m.miss_1, m.ate_1, m.cte_1],
            [0.0; 6]
        );
    }

    #[test]
    fn endpoint_three_meters_off() {
        let gt: Vec<Vec2> = (1..=10).map(|i| [i as f64, 0.0]).collect();
        let mut pred = gt.clone();
        pred[9][1] += 3.0;
        let m = agent_metrics(&single(pred, 0.5), &gt_track(gt), 1).unwrap();
        assert_eq!(m.min_fde_1, 3.0);
        assert_eq!(m.brier_fde_1, 3.25);
        assert_eq!(m.miss_1, 1.0);
    }

    #[test]
    fn lateral_offset_is_cross_track() {
        let gt: Vec<Vec2> = (1..=10).map(|i| [i as f64, 0.0]).collect();
        let pred: Vec<Vec2> = gt.iter().map(|p| [p[0], p[1] + 1.0]).collect();
        let m = agent_metrics(&single(pred, 1.0), &gt_track(gt), 1).unwrap();
        assert_eq!(m.ate_1, 0.0);
        assert_eq!(m.cte_1, 1.0);
    }

    #[test]
    fn too_few_modes_is_an_error() {
        let gt: Vec<Vec2> = (1..=3).map(|i| [i as f64, 0.0]).collect();
        assert!(agent_metrics(&single(gt.clone(), 1.0), &gt_track(gt), 6).is_err());
    }

    #[test]
    fn stationary_truth_uses_heading() {
        let gt = vec![[0.0, 0.0]; 4];
        let pred = vec![[1.0, 2.0]; 4];
        let e = track_errors(&pred, &gt, [0.0, 1.0]);
        assert_eq!(e[3], (2.0, -1.0));
    }
}
