//! Procedural map templates and simulated agent tracks.
//!
//! A scenario is built in three steps: a map template is instantiated with
//! randomized dimensions, each agent is given a lane route and a start state,
//! and the kinematic simulator in [`sim`] rolls everything out over history
//! and future. The same seed always produces the same scenario.

pub mod io;
pub mod sim;
pub mod templates;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Domain, TRACK_HZ};
use crate::error::{CoreError, Result};
use crate::geometry::{dist, Vec2};
use crate::map::{MapSource, Polyline};
use crate::track::{AgentClass, Scenario};
use sim::{AgentSpec, LaneChange};
use templates::LANE_WIDTH;

const MAX_ATTEMPTS: usize = 200;
/// Minimum spacing between placed vehicles along a shared path, on top of
/// their half lengths.
const PLACEMENT_CLEARANCE: f64 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    Straight,
    Curve,
    Fork,
    Merge,
    Intersection,
    CrosswalkStreet,
}

impl Template {
    pub const ALL: [Template; 6] = [
        Template::Straight,
        Template::Curve,
        Template::Fork,
        Template::Merge,
        Template::Intersection,
        Template::CrosswalkStreet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Template::Straight => "straight",
            Template::Curve => "curve",
            Template::Fork => "fork",
            Template::Merge => "merge",
            Template::Intersection => "intersection",
            Template::CrosswalkStreet => "crosswalk-street",
        }
    }

    pub fn parse(s: &str) -> Result<Template> {
        Template::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown template {s:?}")))
    }

    pub fn supports(self, domain: Domain) -> bool {
        domain == Domain::Urban || !matches!(self, Template::Intersection | Template::CrosswalkStreet)
    }

    /// Templates usable in `domain`.
    pub fn for_domain(domain: Domain) -> Vec<Template> {
        Template::ALL.into_iter().filter(|t| t.supports(domain)).collect()
    }

    pub fn build_map<R: Rng + ?Sized>(self, domain: Domain, rng: &mut R) -> Result<MapSource> {
        if !self.supports(domain) {
            return Err(CoreError::Config(format!("template {} is urban only", self.name())));
        }
        Ok(match self {
            Template::Straight => templates::straight(domain, rng),
            Template::Curve => templates::curve(domain, rng),
            Template::Fork => templates::fork(domain, rng),
            Template::Merge => templates::merge(domain, rng),
            Template::Intersection => templates::intersection(rng),
            Template::CrosswalkStreet => templates::crosswalk_street(rng),
        })
    }
}

/// Probabilities and ranges that shape agent behavior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BehaviorMix {
    /// Chance of taking the left branch at a two-way split.
    pub fork_left: f64,
    /// Turn choice at intersections; straight gets the remainder.
    pub turn_left: f64,
    pub turn_right: f64,
    /// Chance of a lane change where a neighbor lane exists.
    pub lane_change_rate: f64,
    pub stationary_rate: f64,
    /// Desired speed as a fraction of the speed limit.
    pub speed_factor: (f64, f64),
    /// Chance that observation starts after the first history step.
    pub partial_history_rate: f64,
    /// Maximum pedestrians on crosswalk templates.
    pub max_pedestrians: usize,
}

impl Default for BehaviorMix {
    fn default() -> Self {
        Self {
            fork_left: 0.5,
            turn_left: 0.25,
            turn_right: 0.25,
            lane_change_rate: 0.15,
            stationary_rate: 0.05,
            speed_factor: (0.6, 1.0),
            partial_history_rate: 0.2,
            max_pedestrians: 2,
        }
    }
}

impl BehaviorMix {
    pub fn for_domain(domain: Domain) -> Self {
        match domain {
            Domain::Urban => Self::default(),
            Domain::Highway => Self {
                stationary_rate: 0.0,
                partial_history_rate: 0.0,
                speed_factor: (0.7, 1.0),
                ..Self::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = |x: f64| (0.0..=1.0).contains(&x);
        let ok = p(self.fork_left)
            && p(self.turn_left)
            && p(self.turn_right)
            && self.turn_left + self.turn_right <= 1.0
            && p(self.lane_change_rate)
            && p(self.stationary_rate)
            && p(self.partial_history_rate)
            && self.speed_factor.0 > 0.0
            && self.speed_factor.0 <= self.speed_factor.1;
        if ok {
            Ok(())
        } else {
            Err(CoreError::Config(format!("invalid behavior mix {self:?}")))
        }
    }
}

/// A lane route: the visited lane ids and the concatenated centerline
/// resampled at 1 m.
#[derive(Clone, Debug)]
pub struct Route {
    pub lanes: Vec<u32>,
    pub path: Vec<Vec2>,
    pub speed_limit: f64,
}

fn resample(pts: &[Vec2], step: f64) -> Result<Vec<Vec2>> {
    let line = Polyline::new(pts)?;
    let n = (line.length() / step).ceil().max(1.0) as usize;
    Ok((0..=n).map(|k| line.point_at(line.length() * k as f64 / n as f64)).collect())
}

fn pick_successor<R: Rng + ?Sized>(map: &MapSource, from: u32, mix: &BehaviorMix, rng: &mut R) -> Option<u32> {
    let lane = map.lane(from)?;
    let mut succ: Vec<(f64, u32)> = lane
        .successors
        .iter()
        .filter_map(|id| map.lane(*id))
        .map(|l| (templates::turn_angle(&lane.centerline, &l.centerline), l.id))
        .collect();
    succ.sort_by(|a, b| a.0.total_cmp(&b.0));
    let u: f64 = rng.gen();
    match succ.len() {
        0 => None,
        1 => Some(succ[0].1),
        2 => Some(if u < mix.fork_left { succ[1].1 } else { succ[0].1 }),
        _ => {
            // rightmost, straightest, leftmost
            let straight = succ
                .iter()
                .min_by(|a, b| a.0.abs().total_cmp(&b.0.abs()))
                .map(|s| s.1)
                .unwrap();
            Some(if u < mix.turn_left {
                succ[succ.len() - 1].1
            } else if u < mix.turn_left + mix.turn_right {
                succ[0].1
            } else {
                straight
            })
        }
    }
}

/// Samples a route starting on an entry lane (one without predecessors).
pub fn sample_route<R: Rng + ?Sized>(map: &MapSource, mix: &BehaviorMix, rng: &mut R) -> Result<Route> {
    let entries: Vec<u32> = map.lanes.iter().filter(|l| l.predecessors.is_empty()).map(|l| l.id).collect();
    if entries.is_empty() {
        return Err(CoreError::Map("no entry lanes".into()));
    }
    let mut id = entries[rng.gen_range(0..entries.len())];
    let mut lanes = vec![id];
    let mut path = map.lane(id).unwrap().centerline.clone();
    let mut speed_limit = map.lane(id).unwrap().speed_limit;
    while let Some(next) = pick_successor(map, id, mix, rng) {
        if lanes.contains(&next) {
            break;
        }
        let l = map.lane(next).unwrap();
        templates::extend(&mut path, &l.centerline);
        speed_limit = speed_limit.max(l.speed_limit);
        lanes.push(next);
        id = next;
    }
    Ok(Route {
        lanes,
        path: resample(&path, 1.0)?,
        speed_limit,
    })
}

fn vehicle_class<R: Rng + ?Sized>(domain: Domain, rng: &mut R) -> (AgentClass, [f64; 2]) {
    let u: f64 = rng.gen();
    match domain {
        Domain::Urban if u < 0.05 => (AgentClass::Cyclist, [1.8, 0.7]),
        Domain::Urban if u < 0.1 => (AgentClass::Motorcycle, [2.2, 0.9]),
        Domain::Highway if u < 0.15 => (AgentClass::Vehicle, [rng.gen_range(8.0..14.0), 2.5]),
        _ => (AgentClass::Vehicle, [rng.gen_range(4.0..5.2), rng.gen_range(1.8..2.1)]),
    }
}

/// True when `a` starts clear of every placed vehicle: no overlap, and
/// enough spacing along a shared path.
fn clear_of(a: &AgentSpec, placed: &[AgentSpec]) -> Result<bool> {
    let la = Polyline::new(&a.path)?;
    let pa = la.point_at(a.s_start);
    for b in placed.iter().filter(|b| b.vehicle) {
        let lb = Polyline::new(&b.path)?;
        let pb = lb.point_at(b.s_start);
        if dist(pa, pb) < 3.0 {
            return Ok(false);
        }
        let need = 0.5 * (a.size[0] + b.size[0]) + PLACEMENT_CLEARANCE;
        for (line, p, q) in [(&la, pa, pb), (&lb, pb, pa)] {
            let (sp, _) = line.project(p);
            let (sq, lat) = line.project(q);
            if lat.abs() < 0.5 * LANE_WIDTH && (sq - sp).abs() < need {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn place_vehicle<R: Rng + ?Sized>(
    id: u32,
    map: &MapSource,
    domain: Domain,
    mix: &BehaviorMix,
    rng: &mut R,
) -> Result<AgentSpec> {
    let hist = domain.history_len();
    let dt = 1.0 / TRACK_HZ;
    let past = (hist - 1) as f64 * dt;
    let horizon = domain.horizon();
    let route = sample_route(map, mix, rng)?;
    let len = sim::path_length(&route.path);
    let (class, size) = vehicle_class(domain, rng);
    let stationary = rng.gen_bool(mix.stationary_rate);
    let factor = rng.gen_range(mix.speed_factor.0..=mix.speed_factor.1);
    let cap = if class == AgentClass::Cyclist { 6.0 } else { f64::INFINITY };
    let mut v_des = if stationary { 0.0 } else { (factor * route.speed_limit).min(cap) };
    // stay on the route for the whole window
    v_des = v_des.min((len - 5.0) / (past + horizon));
    let v0 = if stationary { 0.0 } else { v_des * rng.gen_range(0.85..=1.0) };
    let lo = v0 * past;
    let hi = len - v_des.max(v0) * horizon - 5.0;
    let s_t0 = if hi > lo { rng.gen_range(lo..hi) } else { lo };
    let lane_change = if !stationary && rng.gen_bool(mix.lane_change_rate) {
        let lane = map.lane(route.lanes[0]).unwrap();
        let side = match (lane.left_neighbor, lane.right_neighbor) {
            (Some(_), Some(_)) => Some(if rng.gen_bool(0.5) { 1.0 } else { -1.0 }),
            (Some(_), None) => Some(1.0),
            (None, Some(_)) => Some(-1.0),
            (None, None) => None,
        };
        side.map(|sgn| LaneChange {
            start: rng.gen_range(hist.saturating_sub(10)..hist + 20),
            duration: 40,
            offset: sgn * LANE_WIDTH,
        })
    } else {
        None
    };
    let first_observed = if rng.gen_bool(mix.partial_history_rate) {
        rng.gen_range(1..hist.max(11) - 10)
    } else {
        0
    };
    Ok(AgentSpec {
        id,
        class,
        size,
        path: route.path,
        s_start: s_t0 - v0 * past,
        v0,
        v_desired: v_des,
        vehicle: true,
        lane_change,
        first_observed,
    })
}

fn place_pedestrian<R: Rng + ?Sized>(id: u32, map: &MapSource, domain: Domain, rng: &mut R) -> Result<AgentSpec> {
    let cw = map
        .crosswalks
        .first()
        .ok_or_else(|| CoreError::Map("pedestrians need a crosswalk".into()))?;
    let xs = cw.polygon.iter().map(|p| p[0]);
    let x = 0.5 * (xs.clone().fold(f64::INFINITY, f64::min) + xs.fold(f64::NEG_INFINITY, f64::max));
    let x = x + rng.gen_range(-1.0..1.0);
    let (a, b) = if rng.gen_bool(0.5) { (-8.0, 8.0) } else { (8.0, -8.0) };
    let speed = rng.gen_range(1.0..1.6);
    let past = (domain.history_len() - 1) as f64 / TRACK_HZ;
    let s_t0 = rng.gen_range(0.0..8.0);
    Ok(AgentSpec {
        id,
        class: AgentClass::Pedestrian,
        size: [0.6, 0.6],
        path: templates::line([x, a], [x, b], 1.0),
        s_start: s_t0 - speed * past,
        v0: speed,
        v_desired: speed,
        vehicle: false,
        lane_change: None,
        first_observed: 0,
    })
}

/// Builds one scenario with `n_agents` agents. Fails with
/// [`CoreError::Infeasible`] when agents cannot be placed without overlap.
pub fn generate(template: Template, domain: Domain, n_agents: usize, mix: &BehaviorMix, seed: u64) -> Result<Scenario> {
    mix.validate()?;
    if n_agents == 0 {
        return Err(CoreError::Config("a scenario needs at least one agent".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let map = template.build_map(domain, &mut rng)?;
    let mut specs: Vec<AgentSpec> = Vec::with_capacity(n_agents);
    let n_ped = if template == Template::CrosswalkStreet {
        rng.gen_range(0..=mix.max_pedestrians.min(n_agents - 1))
    } else {
        0
    };
    for k in 0..n_ped {
        specs.push(place_pedestrian(k as u32 + 1, &map, domain, &mut rng)?);
    }
    let mut attempts = 0;
    while specs.len() < n_agents {
        let id = specs.len() as u32 + 1;
        let cand = place_vehicle(id, &map, domain, mix, &mut rng)?;
        if clear_of(&cand, &specs)? {
            specs.push(cand);
            continue;
        }
        attempts += 1;
        if attempts >= MAX_ATTEMPTS {
            return Err(CoreError::Infeasible(format!(
                "placed {} of {n_agents} agents on {} after {MAX_ATTEMPTS} attempts",
                specs.len(),
                template.name()
            )));
        }
    }
    let agents = sim::simulate(domain, &specs)?;
    let scenario = Scenario {
        id: seed,
        domain,
        template: template.name().to_string(),
        map,
        agents,
    };
    scenario.validate()?;
    Ok(scenario)
}

/// Generates `count` scenarios, cycling through `templates` with agent counts
/// drawn from `agents`. Per-scenario seeds come from `seed`.
pub fn generate_dataset(
    templates: &[Template],
    domain: Domain,
    count: usize,
    agents: (usize, usize),
    mix: &BehaviorMix,
    seed: u64,
) -> Result<Vec<Scenario>> {
    if templates.is_empty() {
        return Err(CoreError::Config("no templates given".into()));
    }
    if agents.0 == 0 || agents.0 > agents.1 {
        return Err(CoreError::Config(format!("invalid agent range {agents:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let t = templates[i % templates.len()];
            let n = rng.gen_range(agents.0..=agents.1);
            let s: u64 = rng.gen();
            generate(t, domain, n, mix, s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lanegraph::lane_graph;

    #[test]
    fn template_names_round_trip() {
        for t in Template::ALL {
            assert_eq!(Template::parse(t.name()).unwrap(), t);
        }
        assert!(Template::parse("roundabout").is_err());
        assert!(Template::Intersection.build_map(Domain::Highway, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn same_seed_same_bytes() {
        let mix = BehaviorMix::default();
        for t in Template::ALL {
            let a = generate(t, Domain::Urban, 6, &mix, 42).unwrap();
            let b = generate(t, Domain::Urban, 6, &mix, 42).unwrap();
            assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        }
        let c = generate(Template::Straight, Domain::Urban, 6, &mix, 43).unwrap();
        let a = generate(Template::Straight, Domain::Urban, 6, &mix, 42).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn fork_branch_frequency_follows_prior() {
        let mix = BehaviorMix::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let map = templates::fork(Domain::Urban, &mut rng);
        let n = 4000;
        let left = (0..n)
            .filter(|_| sample_route(&map, &mix, &mut rng).unwrap().lanes == vec![1, 2])
            .count();
        let p = left as f64 / n as f64;
        // 4 standard errors
        assert!((p - 0.5).abs() < 4.0 * (0.25 / n as f64).sqrt(), "left share {p}");

        let skewed = BehaviorMix {
            fork_left: 0.8,
            ..mix
        };
        let left = (0..n)
            .filter(|_| sample_route(&map, &skewed, &mut rng).unwrap().lanes == vec![1, 2])
            .count();
        assert!((left as f64 / n as f64 - 0.8).abs() < 0.03);
    }

    #[test]
    fn agents_stay_near_the_map() {
        let mut total = 0;
        let mut inside = 0;
        for domain in [Domain::Urban, Domain::Highway] {
            let mix = BehaviorMix::for_domain(domain);
            let set = generate_dataset(&Template::for_domain(domain), domain, 12, (3, 8), &mix, 5).unwrap();
            for sc in &set {
                let g = lane_graph(&sc.map, domain.interval(), 2.5).unwrap();
                for a in &sc.agents {
                    total += 1;
                    let ok = a
                        .poses
                        .iter()
                        .map(|p| p.c)
                        .chain(a.future.iter().copied())
                        .all(|p| g.distance_to_map(p) <= 10.0);
                    inside += ok as usize;
                }
            }
        }
        assert!(inside as f64 >= 0.95 * total as f64, "{inside}/{total}");
    }

    #[test]
    fn vehicles_keep_their_gap() {
        let mix = BehaviorMix {
            lane_change_rate: 0.0,
            ..BehaviorMix::default()
        };
        for seed in 0..10 {
            let sc = generate(Template::Straight, Domain::Urban, 8, &mix, seed).unwrap();
            let map = &sc.map;
            for lane in &map.lanes {
                // vehicles whose whole track is on this lane
                let line = Polyline::new(&lane.centerline).unwrap();
                let on: Vec<_> = sc
                    .agents
                    .iter()
                    .filter(|a| {
                        a.poses
                            .iter()
                            .map(|p| p.c)
                            .chain(a.future.iter().copied())
                            .all(|p| line.project(p).1.abs() < 0.5)
                    })
                    .collect();
                for f in &on {
                    for l in &on {
                        if f.id == l.id {
                            continue;
                        }
                        let ahead = line.project(l.current().c).0 > line.project(f.current().c).0;
                        if ahead {
                            let g = sim::min_gap(f, l, &lane.centerline).unwrap();
                            assert!(g >= sim::MIN_GAP - 1e-6, "seed {seed}: gap {g}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn too_many_agents_is_infeasible() {
        let err = generate(Template::CrosswalkStreet, Domain::Urban, 200, &BehaviorMix::default(), 1);
        assert!(matches!(err, Err(CoreError::Infeasible(_))));
    }

    #[test]
    fn partial_history_and_pedestrians_appear() {
        let mix = BehaviorMix {
            partial_history_rate: 1.0,
            ..BehaviorMix::default()
        };
        let sc = generate(Template::CrosswalkStreet, Domain::Urban, 5, &mix, 3).unwrap();
        for a in sc.agents.iter().filter(|a| a.class != AgentClass::Pedestrian) {
            assert!(!a.observed[0]);
            assert!(*a.observed.last().unwrap());
        }
        let peds = (0..20)
            .map(|s| generate(Template::CrosswalkStreet, Domain::Urban, 5, &BehaviorMix::default(), s).unwrap())
            .flat_map(|sc| sc.agents)
            .filter(|a| a.class == AgentClass::Pedestrian)
            .count();
        assert!(peds > 0);
    }
}
