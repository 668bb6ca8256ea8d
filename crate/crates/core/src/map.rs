//! Vector map primitives: lane centerlines with topology, and crosswalks.
//!
//! Units are meters and meters per second throughout.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::{dist, normalize, Se2, Vec2};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryType {
    Solid,
    Dashed,
    Double,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryColor {
    White,
    Yellow,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Boundary {
    pub kind: BoundaryType,
    pub color: BoundaryColor,
}

impl Boundary {
    pub const NONE: Boundary = Boundary {
        kind: BoundaryType::None,
        color: BoundaryColor::None,
    };

    pub fn new(kind: BoundaryType, color: BoundaryColor) -> Self {
        Self { kind, color }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub id: u32,
    pub centerline: Vec<Vec2>,
    pub width: f64,
    pub speed_limit: f64,
    pub left_boundary: Boundary,
    pub right_boundary: Boundary,
    #[serde(default)]
    pub in_intersection: bool,
    #[serde(default)]
    pub successors: Vec<u32>,
    #[serde(default)]
    pub predecessors: Vec<u32>,
    #[serde(default)]
    pub left_neighbor: Option<u32>,
    #[serde(default)]
    pub right_neighbor: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Crosswalk {
    pub id: u32,
    pub polygon: Vec<Vec2>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MapSource {
    pub lanes: Vec<Lane>,
    pub crosswalks: Vec<Crosswalk>,
}

impl MapSource {
    pub fn lane_index(&self) -> BTreeMap<u32, usize> {
        self.lanes.iter().enumerate().map(|(i, l)| (l.id, i)).collect()
    }

    pub fn lane(&self, id: u32) -> Option<&Lane> {
        self.lanes.iter().find(|l| l.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for lane in &self.lanes {
            if !ids.insert(lane.id) {
                return Err(CoreError::Map(format!("duplicate lane id {}", lane.id)));
            }
            if lane.centerline.len() < 2 {
                return Err(CoreError::Map(format!("lane {} has fewer than 2 points", lane.id)));
            }
            if lane.centerline.iter().flatten().any(|v| !v.is_finite()) {
                return Err(CoreError::Map(format!("lane {} has non-finite points", lane.id)));
            }
            if !(lane.width > 0.0) || !(lane.speed_limit >= 0.0) {
                return Err(CoreError::Map(format!("lane {} has invalid width or speed limit", lane.id)));
            }
        }
        for lane in &self.lanes {
            let refs = lane
                .successors
                .iter()
                .chain(&lane.predecessors)
                .chain(lane.left_neighbor.iter())
                .chain(lane.right_neighbor.iter());
            for r in refs {
                if !ids.contains(r) {
                    return Err(CoreError::Map(format!("lane {} references missing lane {}", lane.id, r)));
                }
                if *r == lane.id {
                    return Err(CoreError::Map(format!("lane {} references itself", lane.id)));
                }
            }
        }
        let mut cw_ids = BTreeSet::new();
        for cw in &self.crosswalks {
            if !cw_ids.insert(cw.id) {
                return Err(CoreError::Map(format!("duplicate crosswalk id {}", cw.id)));
            }
            if cw.polygon.len() < 3 {
                return Err(CoreError::Map(format!("crosswalk {} has fewer than 3 vertices", cw.id)));
            }
        }
        Ok(())
    }

    pub fn transformed(&self, t: &Se2) -> MapSource {
        let mut out = self.clone();
        for lane in &mut out.lanes {
            lane.centerline.iter_mut().for_each(|p| *p = t.apply_point(*p));
        }
        for cw in &mut out.crosswalks {
            cw.polygon.iter_mut().for_each(|p| *p = t.apply_point(*p));
        }
        out
    }

    /// Scales all lengths and speeds by `s` about the origin.
    pub fn scaled(&self, s: f64) -> MapSource {
        let mut out = self.clone();
        for lane in &mut out.lanes {
            lane.centerline.iter_mut().for_each(|p| *p = [p[0] * s, p[1] * s]);
            lane.width *= s;
            lane.speed_limit *= s;
        }
        for cw in &mut out.crosswalks {
            cw.polygon.iter_mut().for_each(|p| *p = [p[0] * s, p[1] * s]);
        }
        out
    }

    /// Axis-aligned bounding box `[min, max]` over all map points.
    pub fn bbox(&self) -> Option<(Vec2, Vec2)> {
        let pts = self
            .lanes
            .iter()
            .flat_map(|l| l.centerline.iter())
            .chain(self.crosswalks.iter().flat_map(|c| c.polygon.iter()));
        let mut bb: Option<(Vec2, Vec2)> = None;
        for p in pts {
            bb = Some(match bb {
                None => (*p, *p),
                Some((lo, hi)) => ([lo[0].min(p[0]), lo[1].min(p[1])], [hi[0].max(p[0]), hi[1].max(p[1])]),
            });
        }
        bb
    }
}

/// Polyline with cumulative arclength.
#[derive(Clone, Debug)]
pub struct Polyline {
    pts: Vec<Vec2>,
    cum: Vec<f64>,
}

impl Polyline {
    pub fn new(pts: &[Vec2]) -> Result<Self> {
        if pts.len() < 2 {
            return Err(CoreError::Geometry("polyline needs at least 2 points".into()));
        }
        let mut cum = Vec::with_capacity(pts.len());
        cum.push(0.0);
        for w in pts.windows(2) {
            cum.push(cum.last().unwrap() + dist(w[0], w[1]));
        }
        Ok(Self { pts: pts.to_vec(), cum })
    }

    pub fn points(&self) -> &[Vec2] {
        &self.pts
    }

    pub fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    fn segment_at(&self, s: f64) -> usize {
        // last segment whose start is <= s
        let idx = self.cum.partition_point(|&c| c <= s);
        idx.saturating_sub(1).min(self.pts.len() - 2)
    }

    /// Point at arclength `s`, extrapolating linearly beyond either end.
    pub fn point_at(&self, s: f64) -> Vec2 {
        let i = self.segment_at(s);
        let (a, b) = (self.pts[i], self.pts[i + 1]);
        let len = self.cum[i + 1] - self.cum[i];
        if len <= 0.0 {
            return a;
        }
        let t = (s - self.cum[i]) / len;
        [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
    }

    /// Unit tangent of the segment containing `s`.
    pub fn tangent_at(&self, s: f64) -> Vec2 {
        let mut i = self.segment_at(s);
        loop {
            if let Some(t) = normalize([self.pts[i + 1][0] - self.pts[i][0], self.pts[i + 1][1] - self.pts[i][1]]) {
                return t;
            }
            if i == 0 {
                break;
            }
            i -= 1;
        }
        for w in self.pts.windows(2) {
            if let Some(t) = normalize([w[1][0] - w[0][0], w[1][1] - w[0][1]]) {
                return t;
            }
        }
        [1.0, 0.0]
    }

    /// Arclength of the closest point on the polyline to `p`, with the lateral
    /// offset (positive to the left of travel).
    pub fn project(&self, p: Vec2) -> (f64, f64) {
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..self.pts.len() - 1 {
            let a = self.pts[i];
            let b = self.pts[i + 1];
            let ab = [b[0] - a[0], b[1] - a[1]];
            let len2 = ab[0] * ab[0] + ab[1] * ab[1];
            let ap = [p[0] - a[0], p[1] - a[1]];
            let t = if len2 > 0.0 {
                ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let q = [a[0] + t * ab[0], a[1] + t * ab[1]];
            let d = dist(p, q);
            if d < best.0 {
                let side = ab[0] * ap[1] - ab[1] * ap[0];
                let lat = if side >= 0.0 { d } else { -d };
                best = (d, self.cum[i] + t * len2.sqrt(), lat);
            }
        }
        (best.1, best.2)
    }
}
