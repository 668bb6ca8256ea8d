//! Agent tracks and scenarios: the unit of training and evaluation data.

use serde::{Deserialize, Serialize};

use crate::config::Domain;
use crate::error::{CoreError, Result};
use crate::geometry::{Pose2, Se2, Vec2};
use crate::map::MapSource;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentClass {
    Vehicle,
    Pedestrian,
    Cyclist,
    Motorcycle,
}

impl AgentClass {
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        match self {
            AgentClass::Vehicle => 0,
            AgentClass::Pedestrian => 1,
            AgentClass::Cyclist => 2,
            AgentClass::Motorcycle => 3,
        }
    }

    pub fn one_hot(self) -> [f64; Self::COUNT] {
        let mut v = [0.0; Self::COUNT];
        v[self.index()] = 1.0;
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub id: u32,
    pub class: AgentClass,
    /// Bounding box length and width in meters.
    pub size: [f64; 2],
    /// History poses at 10 Hz, oldest first; the last entry is t = 0.
    pub poses: Vec<Pose2>,
    /// World-frame velocity (m/s) per history step.
    pub velocities: Vec<Vec2>,
    pub observed: Vec<bool>,
    /// Ground-truth future centroids at the domain's waypoint rate.
    #[serde(default)]
    pub future: Vec<Vec2>,
    #[serde(default)]
    pub future_valid: Vec<bool>,
}

impl AgentTrack {
    pub fn current(&self) -> &Pose2 {
        self.poses.last().expect("validated track has a current pose")
    }

    pub fn history_len(&self) -> usize {
        self.poses.len()
    }

    pub fn has_full_future(&self) -> bool {
        !self.future.is_empty() && self.future_valid.iter().all(|&v| v)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.poses.len();
        if t == 0 || self.velocities.len() != t || self.observed.len() != t {
            return Err(CoreError::Shape(format!("agent {}: inconsistent history lengths", self.id)));
        }
        if !self.observed[t - 1] {
            return Err(CoreError::Shape(format!("agent {}: current pose not observed", self.id)));
        }
        if self.future.len() != self.future_valid.len() {
            return Err(CoreError::Shape(format!("agent {}: future mask length mismatch", self.id)));
        }
        if self.poses.iter().any(|p| !p.heading_is_unit()) {
            return Err(CoreError::Geometry(format!("agent {}: heading not unit length", self.id)));
        }
        let finite = self
            .poses
            .iter()
            .flat_map(|p| p.c.iter().chain(&p.h))
            .chain(self.velocities.iter().flatten())
            .chain(self.future.iter().flatten())
            .chain(&self.size)
            .all(|v| v.is_finite());
        if !finite {
            return Err(CoreError::Geometry(format!("agent {}: non-finite values", self.id)));
        }
        Ok(())
    }

    pub fn transformed(&self, t: &Se2) -> AgentTrack {
        AgentTrack {
            poses: self.poses.iter().map(|p| t.apply(p)).collect(),
            velocities: self.velocities.iter().map(|v| t.apply_vec(*v)).collect(),
            future: self.future.iter().map(|p| t.apply_point(*p)).collect(),
            ..self.clone()
        }
    }

    /// Scales positions, velocities and box size about the origin.
    pub fn scaled(&self, s: f64) -> AgentTrack {
        let sc = |v: &Vec2| [v[0] * s, v[1] * s];
        AgentTrack {
            size: [self.size[0] * s, self.size[1] * s],
            poses: self.poses.iter().map(|p| Pose2 { c: sc(&p.c), h: p.h }).collect(),
            velocities: self.velocities.iter().map(sc).collect(),
            future: self.future.iter().map(sc).collect(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: u64,
    pub domain: Domain,
    pub template: String,
    pub map: MapSource,
    pub agents: Vec<AgentTrack>,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.map.validate()?;
        let t = self.domain.history_len();
        let f = self.domain.future_len();
        for a in &self.agents {
            a.validate()?;
            if a.history_len() != t {
                return Err(CoreError::Shape(format!("agent {}: expected {t} history steps", a.id)));
            }
            if !a.future.is_empty() && a.future.len() != f {
                return Err(CoreError::Shape(format!("agent {}: expected {f} future waypoints", a.id)));
            }
        }
        Ok(())
    }

    pub fn transformed(&self, t: &Se2) -> Scenario {
        Scenario {
            map: self.map.transformed(t),
            agents: self.agents.iter().map(|a| a.transformed(t)).collect(),
            ..self.clone()
        }
    }

    pub fn scaled(&self, s: f64) -> Scenario {
        Scenario {
            map: self.map.scaled(s),
            agents: self.agents.iter().map(|a| a.scaled(s)).collect(),
            ..self.clone()
        }
    }

    /// Center of the bounding box over map points and agent positions.
    pub fn bbox_center(&self) -> Vec2 {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        let mut grow = |p: Vec2| {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        };
        if let Some((a, b)) = self.map.bbox() {
            grow(a);
            grow(b);
        }
        for a in &self.agents {
            grow(a.current().c);
        }
        if !lo[0].is_finite() {
            return [0.0, 0.0];
        }
        [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])]
    }
}
