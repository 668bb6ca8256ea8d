//! Open-loop kinematic rollouts along lane routes at 10 Hz.
//!
//! Vehicles follow their route with an intelligent-driver-model speed law
//! (free-road term capped by a curvature speed limit with look-ahead), keep
//! at least [`MIN_GAP`] meters of bumper gap to the vehicle ahead on their
//! route, and may perform a lateral lane change. Pedestrians walk their path
//! at constant speed.

use crate::config::{Domain, TRACK_HZ};
use crate::error::{CoreError, Result};
use crate::geometry::{dist, dot, normalize, sub, Pose2, Vec2};
use crate::lanegraph::menger_curvature;
use crate::map::Polyline;
use crate::track::{AgentClass, AgentTrack};

pub const MIN_GAP: f64 = 2.0;
pub const LATERAL_ACCEL: f64 = 2.5;
const DT: f64 = 1.0 / TRACK_HZ;
const IDM_ACCEL: f64 = 1.5;
const IDM_DECEL: f64 = 2.0;
const IDM_HEADWAY: f64 = 1.2;
const IDM_JAM: f64 = 2.5;
const MAX_BRAKE: f64 = 6.0;
/// Lateral distance within which another vehicle counts as on my route.
const SAME_PATH: f64 = 2.0;

#[derive(Clone, Debug)]
pub struct LaneChange {
    /// Track step at which the manoeuvre starts.
    pub start: usize,
    pub duration: usize,
    /// Final lateral offset, positive to the left.
    pub offset: f64,
}

#[derive(Clone, Debug)]
pub struct AgentSpec {
    pub id: u32,
    pub class: AgentClass,
    pub size: [f64; 2],
    pub path: Vec<Vec2>,
    /// Arclength at the first history step.
    pub s_start: f64,
    pub v0: f64,
    pub v_desired: f64,
    /// Takes part in car following and curvature speed limits.
    pub vehicle: bool,
    pub lane_change: Option<LaneChange>,
    /// First observed history step.
    pub first_observed: usize,
}

struct Route {
    line: Polyline,
    /// |curvature| sampled every meter of arclength.
    kappa: Vec<f64>,
}

impl Route {
    fn new(path: &[Vec2]) -> Result<Self> {
        let line = Polyline::new(path)?;
        let n = line.length().floor() as usize + 1;
        let kappa = (0..n)
            .map(|i| {
                let s = i as f64;
                menger_curvature(line.point_at(s - 2.0), line.point_at(s), line.point_at(s + 2.0)).abs()
            })
            .collect();
        Ok(Self { line, kappa })
    }

    fn speed_cap(&self, s: f64, v: f64) -> f64 {
        let look = 10.0 + 3.0 * v;
        let lo = s.max(0.0).floor() as usize;
        let hi = ((s + look).max(0.0).ceil() as usize).min(self.kappa.len());
        let k = self.kappa.get(lo..hi).map_or(0.0, |w| w.iter().copied().fold(0.0, f64::max));
        if k < 1e-6 {
            f64::INFINITY
        } else {
            (LATERAL_ACCEL / k).sqrt()
        }
    }

    fn position(&self, s: f64, lateral: f64) -> Vec2 {
        let p = self.line.point_at(s);
        if lateral == 0.0 {
            return p;
        }
        let t = self.line.tangent_at(s);
        [p[0] - t[1] * lateral, p[1] + t[0] * lateral]
    }
}

fn lateral_at(lc: &Option<LaneChange>, step: usize) -> f64 {
    match lc {
        None => 0.0,
        Some(lc) if step <= lc.start => 0.0,
        Some(lc) if step >= lc.start + lc.duration => lc.offset,
        Some(lc) => {
            let u = (step - lc.start) as f64 / lc.duration as f64;
            lc.offset * 0.5 * (1.0 - (std::f64::consts::PI * u).cos())
        }
    }
}

/// Bumper gap from `me` to the closest vehicle ahead on my route, with its speed.
fn leader(
    i: usize,
    routes: &[Route],
    specs: &[AgentSpec],
    s: &[f64],
    v: &[f64],
    pos: &[Vec2],
    heading: &[Vec2],
) -> Option<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    for j in 0..specs.len() {
        if j == i || !specs[j].vehicle {
            continue;
        }
        if dot(heading[i], heading[j]) < 0.5 {
            continue;
        }
        let (sj, lat) = routes[i].line.project(pos[j]);
        if lat.abs() > SAME_PATH || sj <= s[i] {
            continue;
        }
        let gap = sj - s[i] - 0.5 * (specs[i].size[0] + specs[j].size[0]);
        if best.map_or(true, |(g, _)| gap < g) {
            best = Some((gap, v[j]));
        }
    }
    best
}

fn idm(v: f64, v_free: f64, lead: Option<(f64, f64)>) -> f64 {
    let free = if v_free < 0.1 {
        if v > 0.0 {
            return -MAX_BRAKE.min(v / DT);
        }
        0.0
    } else {
        1.0 - (v / v_free).powi(4)
    };
    let inter = match lead {
        Some((gap, vl)) => {
            let star = IDM_JAM + (v * IDM_HEADWAY + v * (v - vl) / (2.0 * (IDM_ACCEL * IDM_DECEL).sqrt())).max(0.0);
            (star / gap.max(0.1)).powi(2)
        }
        None => 0.0,
    };
    (IDM_ACCEL * (free - inter)).clamp(-MAX_BRAKE, IDM_ACCEL)
}

fn positions(routes: &[Route], specs: &[AgentSpec], s: &[f64], step: usize) -> Vec<Vec2> {
    (0..s.len())
        .map(|i| routes[i].position(s[i], lateral_at(&specs[i].lane_change, step)))
        .collect()
}

fn tangents(routes: &[Route], s: &[f64]) -> Vec<Vec2> {
    (0..s.len()).map(|i| routes[i].line.tangent_at(s[i])).collect()
}

/// Pushes followers back until every bumper gap is at least [`MIN_GAP`].
fn enforce_gap(routes: &[Route], specs: &[AgentSpec], s: &mut [f64], v: &mut [f64], step: usize) {
    for _ in 0..3 {
        let pos = positions(routes, specs, s, step);
        let head = tangents(routes, s);
        let mut changed = false;
        for i in 0..s.len() {
            if !specs[i].vehicle {
                continue;
            }
            if let Some((gap, vl)) = leader(i, routes, specs, s, v, &pos, &head) {
                if gap < MIN_GAP {
                    s[i] -= MIN_GAP - gap;
                    v[i] = v[i].min(vl);
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
}

/// Simulates all agents over history plus future and cuts the result into
/// tracks for `domain`.
pub fn simulate(domain: Domain, specs: &[AgentSpec]) -> Result<Vec<AgentTrack>> {
    let h = domain.history_len();
    let stride = domain.future_stride();
    let steps = h + domain.future_len() * stride;
    let routes: Vec<Route> = specs.iter().map(|sp| Route::new(&sp.path)).collect::<Result<_>>()?;
    let n = specs.len();
    let mut s: Vec<f64> = specs.iter().map(|sp| sp.s_start).collect();
    let mut v: Vec<f64> = specs.iter().map(|sp| sp.v0.max(0.0)).collect();
    let mut traj_s = vec![Vec::with_capacity(steps); n];
    enforce_gap(&routes, specs, &mut s, &mut v, 0);
    for step in 0..steps {
        for i in 0..n {
            traj_s[i].push(s[i]);
        }
        if step + 1 == steps {
            break;
        }
        let pos = positions(&routes, specs, &s, step);
        let head = tangents(&routes, &s);
        let mut acc = vec![0.0; n];
        for i in 0..n {
            if !specs[i].vehicle {
                continue;
            }
            let v_free = specs[i].v_desired.min(routes[i].speed_cap(s[i], v[i]));
            let lead = leader(i, &routes, specs, &s, &v, &pos, &head);
            acc[i] = idm(v[i], v_free, lead);
        }
        for i in 0..n {
            let vn = (v[i] + acc[i] * DT).max(0.0);
            s[i] += 0.5 * (v[i] + vn) * DT;
            v[i] = vn;
        }
        enforce_gap(&routes, specs, &mut s, &mut v, step + 1);
    }

    let mut tracks = Vec::with_capacity(n);
    for (i, sp) in specs.iter().enumerate() {
        let pts: Vec<Vec2> = (0..steps)
            .map(|t| routes[i].position(traj_s[i][t], lateral_at(&sp.lane_change, t)))
            .collect();
        if pts.iter().flatten().any(|x| !x.is_finite()) {
            return Err(CoreError::Infeasible(format!("agent {} left the numeric range", sp.id)));
        }
        let vel: Vec<Vec2> = (0..steps)
            .map(|t| {
                let (a, b) = (t.saturating_sub(1), (t + 1).min(steps - 1));
                let dt = (b - a) as f64 * DT;
                [(pts[b][0] - pts[a][0]) / dt, (pts[b][1] - pts[a][1]) / dt]
            })
            .collect();
        let heading: Vec<Vec2> = (0..steps)
            .map(|t| {
                let moving = vel[t][0].hypot(vel[t][1]) > 0.3;
                match (moving, normalize(vel[t])) {
                    (true, Some(hd)) => hd,
                    _ => routes[i].line.tangent_at(traj_s[i][t]),
                }
            })
            .collect();
        let poses = (0..h).map(|t| Pose2 { c: pts[t], h: heading[t] }).collect();
        let future: Vec<Vec2> = (1..=domain.future_len()).map(|k| pts[h - 1 + k * stride]).collect();
        tracks.push(AgentTrack {
            id: sp.id,
            class: sp.class,
            size: sp.size,
            poses,
            velocities: vel[..h].to_vec(),
            observed: (0..h).map(|t| t >= sp.first_observed.min(h - 1)).collect(),
            future_valid: vec![true; future.len()],
            future,
        });
    }
    Ok(tracks)
}

/// Smallest bumper gap between two same-path vehicles over the whole track
/// (history and future), measured along the follower's path.
pub fn min_gap(follower: &AgentTrack, leader: &AgentTrack, path: &[Vec2]) -> Result<f64> {
    let line = Polyline::new(path)?;
    let points = |a: &AgentTrack| -> Vec<Vec2> { a.poses.iter().map(|p| p.c).chain(a.future.iter().copied()).collect() };
    let (pf, pl) = (points(follower), points(leader));
    let half = 0.5 * (follower.size[0] + leader.size[0]);
    Ok(pf
        .iter()
        .zip(&pl)
        .map(|(a, b)| line.project(*b).0 - line.project(*a).0 - half)
        .fold(f64::INFINITY, f64::min))
}

pub fn path_length(path: &[Vec2]) -> f64 {
    path.windows(2).map(|w| dist(w[0], w[1])).sum()
}

/// Direction from `a` to `b`, or +x for coincident points.
pub fn direction(a: Vec2, b: Vec2) -> Vec2 {
    normalize(sub(b, a)).unwrap_or([1.0, 0.0])
}
