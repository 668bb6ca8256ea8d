//! Lane graph construction: resampled centerline segments and crosswalk
//! cells as nodes, typed directed edges between them.
//!
//! Node feature layout (`NODE_FEATURES` wide, all scaled to order one):
//!
//! | slots  | content                                                     |
//! |--------|-------------------------------------------------------------|
//! | 0..4   | length/10, width/4, curvature*10, speed limit/20            |
//! | 4..11  | left boundary one-hot: type(4) then color(3)                |
//! | 11..18 | right boundary one-hot                                      |
//! | 18..20 | left / right boundary distance (width/2), divided by 4      |
//! | 20, 21 | intersection flag, crosswalk flag                           |
//! | 22..27 | out-degree/4 for successor, predecessor, left, right, conflict |
//!
//! Crosswalk nodes leave slots 0..21 zero apart from the crosswalk flag.

use std::collections::{BTreeSet, HashMap};

use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::geometry::{cross, dist, dist2, dot, normalize, sub, Pose2, Vec2};
use crate::map::{Boundary, BoundaryColor, BoundaryType, MapSource, Polyline};

pub const NODE_FEATURES: usize = 27;
pub const MAX_DILATION: u8 = 5;
pub const DEFAULT_CONFLICT_RADIUS: f64 = 2.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeKind {
    Successor(u8),
    Predecessor(u8),
    Left,
    Right,
    Conflict,
}

impl EdgeKind {
    pub const COUNT: usize = 2 * MAX_DILATION as usize + 3;

    pub fn all() -> Vec<EdgeKind> {
        (0..Self::COUNT).map(Self::from_index).collect()
    }

    pub fn index(self) -> usize {
        let d = MAX_DILATION as usize;
        match self {
            EdgeKind::Successor(k) => k as usize - 1,
            EdgeKind::Predecessor(k) => d + k as usize - 1,
            EdgeKind::Left => 2 * d,
            EdgeKind::Right => 2 * d + 1,
            EdgeKind::Conflict => 2 * d + 2,
        }
    }

    pub fn from_index(i: usize) -> EdgeKind {
        let d = MAX_DILATION as usize;
        match i {
            i if i < d => EdgeKind::Successor(i as u8 + 1),
            i if i < 2 * d => EdgeKind::Predecessor((i - d) as u8 + 1),
            i if i == 2 * d => EdgeKind::Left,
            i if i == 2 * d + 1 => EdgeKind::Right,
            i if i == 2 * d + 2 => EdgeKind::Conflict,
            _ => panic!("edge kind index {i} out of range"),
        }
    }

    pub fn name(self) -> String {
        match self {
            EdgeKind::Successor(k) => format!("succ{k}"),
            EdgeKind::Predecessor(k) => format!("pred{k}"),
            EdgeKind::Left => "left".into(),
            EdgeKind::Right => "right".into(),
            EdgeKind::Conflict => "conflict".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeSource {
    /// Lane index in the map and segment index along it.
    Lane { lane: usize, segment: usize },
    Crosswalk { crosswalk: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapNode {
    pub pose: Pose2,
    /// Extent along and across the heading, used for margin tests.
    pub extent: [f64; 2],
    /// Source map entity; lanes first, then crosswalks.
    pub entity: usize,
    pub source: NodeSource,
    pub features: [f64; NODE_FEATURES],
}

#[derive(Clone, Debug, PartialEq)]
pub struct LaneGraph {
    pub nodes: Vec<MapNode>,
    /// Sorted, duplicate-free edge lists indexed by [`EdgeKind::index`].
    pub edges: Vec<Vec<(usize, usize)>>,
    /// SHA-256 of the source map and the construction parameters, so that
    /// edits which leave the sampled graph unchanged still change
    /// [`LaneGraph::content_hash`].
    pub source: [u8; 32],
}

impl LaneGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn edges_of(&self, kind: EdgeKind) -> &[(usize, usize)] {
        &self.edges[kind.index()]
    }

    pub fn num_edges(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }

    pub fn poses(&self) -> Vec<Pose2> {
        self.nodes.iter().map(|n| n.pose).collect()
    }

    /// Row-major `M × NODE_FEATURES` feature table.
    pub fn feature_table(&self) -> Vec<f64> {
        self.nodes.iter().flat_map(|n| n.features).collect()
    }

    /// Index of the node whose centroid is nearest to `p`; ties go to the
    /// lowest index.
    pub fn nearest_node(&self, p: Vec2) -> Option<usize> {
        let mut best: Option<(f64, usize)> = None;
        for (i, n) in self.nodes.iter().enumerate() {
            let d = dist2(n.pose.c, p);
            if best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
        best.map(|b| b.1)
    }

    /// Distance from `p` to the union of node rectangles.
    pub fn distance_to_map(&self, p: Vec2) -> f64 {
        let mut best = f64::INFINITY;
        for n in &self.nodes {
            let local = n.pose.to_local(p);
            let dx = (local[0].abs() - 0.5 * n.extent[0]).max(0.0);
            let dy = (local[1].abs() - 0.5 * n.extent[1]).max(0.0);
            best = best.min(dx.hypot(dy));
            if best == 0.0 {
                break;
            }
        }
        best
    }

    fn refresh_degrees(&mut self) {
        let kinds = [
            EdgeKind::Successor(1),
            EdgeKind::Predecessor(1),
            EdgeKind::Left,
            EdgeKind::Right,
            EdgeKind::Conflict,
        ];
        for n in &mut self.nodes {
            n.features[22..27].iter_mut().for_each(|v| *v = 0.0);
        }
        for (slot, kind) in kinds.iter().enumerate() {
            let mut counts = vec![0usize; self.nodes.len()];
            for &(s, _) in &self.edges[kind.index()] {
                counts[s] += 1;
            }
            for (n, c) in self.nodes.iter_mut().zip(counts) {
                n.features[22 + slot] = c as f64 / 4.0;
            }
        }
    }

    /// SHA-256 over the source hash, node poses, features and the full
    /// edge structure.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"lanegraph-v2");
        h.update(self.source);
        h.update((self.nodes.len() as u64).to_le_bytes());
        for n in &self.nodes {
            for v in n.pose.c.iter().chain(&n.pose.h).chain(&n.extent).chain(&n.features) {
                h.update(v.to_le_bytes());
            }
            h.update((n.entity as u64).to_le_bytes());
        }
        for list in &self.edges {
            h.update((list.len() as u64).to_le_bytes());
            for &(a, b) in list {
                h.update((a as u64).to_le_bytes());
                h.update((b as u64).to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// Signed Menger curvature of the circle through three points; 0 when
/// (near) collinear.
pub fn menger_curvature(a: Vec2, b: Vec2, c: Vec2) -> f64 {
    let ab = sub(b, a);
    let bc = sub(c, b);
    let (lab, lbc, lac) = (dist(a, b), dist(b, c), dist(a, c));
    let denom = lab * lbc * lac;
    let cr = cross(ab, bc);
    if denom <= 1e-18 || cr.abs() <= 1e-12 * lab * lbc {
        return 0.0;
    }
    2.0 * cr / denom
}

/// Signed curvature of a polyline at arclength `at`, from the points at
/// `at - h`, `at`, `at + h` (clamped to the polyline).
pub fn curvature(polyline: &Polyline, at: f64, h: f64) -> f64 {
    let len = polyline.length();
    let a = polyline.point_at((at - h).max(0.0));
    let b = polyline.point_at(at.clamp(0.0, len));
    let c = polyline.point_at((at + h).min(len));
    menger_curvature(a, b, c)
}

fn boundary_one_hot(b: Boundary, out: &mut [f64]) {
    let t = match b.kind {
        BoundaryType::Solid => 0,
        BoundaryType::Dashed => 1,
        BoundaryType::Double => 2,
        BoundaryType::None => 3,
    };
    let c = match b.color {
        BoundaryColor::White => 0,
        BoundaryColor::Yellow => 1,
        BoundaryColor::None => 2,
    };
    out[t] = 1.0;
    out[4 + c] = 1.0;
}

fn point_in_polygon(p: Vec2, poly: &[Vec2]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn insert_both(set: &mut BTreeSet<(usize, usize)>, a: usize, b: usize) {
    if a != b {
        set.insert((a, b));
        set.insert((b, a));
    }
}

/// Builds nodes and successor / predecessor / lateral edges, plus conflict
/// edges between consecutive cells of the same crosswalk. Radius-based
/// conflict edges are added by [`add_conflict_edges`].
pub fn build_lane_graph(map: &MapSource, interval: f64) -> Result<LaneGraph> {
    if !(interval > 0.0) {
        return Err(CoreError::Config(format!("sampling interval must be positive, got {interval}")));
    }
    map.validate()?;
    let index = map.lane_index();
    let mut nodes = Vec::new();
    let mut lane_nodes: Vec<Vec<usize>> = Vec::with_capacity(map.lanes.len());
    let mut lane_fracs: Vec<Vec<f64>> = Vec::with_capacity(map.lanes.len());

    for (li, lane) in map.lanes.iter().enumerate() {
        let poly = Polyline::new(&lane.centerline)?;
        let len = poly.length();
        if len < 1e-6 {
            return Err(CoreError::Map(format!("lane {} has zero length", lane.id)));
        }
        let nseg = ((len / interval + 1e-9).floor() as usize).max(1);
        let mut ids = Vec::with_capacity(nseg);
        let mut fracs = Vec::with_capacity(nseg);
        for k in 0..nseg {
            let s0 = k as f64 * interval;
            let s1 = if k + 1 == nseg { len } else { (k + 1) as f64 * interval };
            let sm = 0.5 * (s0 + s1);
            let a = poly.point_at(s0);
            let b = poly.point_at(s1);
            let h = normalize(sub(b, a)).unwrap_or_else(|| poly.tangent_at(sm));
            let seg_len = s1 - s0;
            let mut f = [0.0; NODE_FEATURES];
            f[0] = seg_len / 10.0;
            f[1] = lane.width / 4.0;
            f[2] = curvature(&poly, sm, 0.5 * seg_len) * 10.0;
            f[3] = lane.speed_limit / 20.0;
            boundary_one_hot(lane.left_boundary, &mut f[4..11]);
            boundary_one_hot(lane.right_boundary, &mut f[11..18]);
            f[18] = 0.5 * lane.width / 4.0;
            f[19] = 0.5 * lane.width / 4.0;
            f[20] = if lane.in_intersection { 1.0 } else { 0.0 };
            ids.push(nodes.len());
            fracs.push(sm / len);
            nodes.push(MapNode {
                pose: Pose2 { c: poly.point_at(sm), h },
                extent: [seg_len, lane.width],
                entity: li,
                source: NodeSource::Lane { lane: li, segment: k },
                features: f,
            });
        }
        lane_nodes.push(ids);
        lane_fracs.push(fracs);
    }

    let mut conflict: BTreeSet<(usize, usize)> = BTreeSet::new();
    for (ci, cw) in map.crosswalks.iter().enumerate() {
        let entity = map.lanes.len() + ci;
        let poly = &cw.polygon;
        let n = poly.len();
        let lens: Vec<f64> = (0..n).map(|k| dist(poly[k], poly[(k + 1) % n])).collect();
        let longest = lens.iter().cloned().fold(0.0, f64::max);
        let k = lens.iter().position(|&l| l >= longest - 1e-9).unwrap();
        let origin = poly[k];
        let x = normalize(sub(poly[(k + 1) % n], origin))
            .ok_or_else(|| CoreError::Map(format!("crosswalk {} is degenerate", cw.id)))?;
        let mut y = [-x[1], x[0]];
        let mean = poly.iter().fold([0.0, 0.0], |acc, p| [acc[0] + p[0] / n as f64, acc[1] + p[1] / n as f64]);
        if dot(sub(mean, origin), y) < 0.0 {
            y = [-y[0], -y[1]];
        }
        let local: Vec<Vec2> = poly.iter().map(|p| [dot(sub(*p, origin), x), dot(sub(*p, origin), y)]).collect();
        let (umin, umax) = local.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[0]), hi.max(p[0])));
        let (wmin, wmax) = local.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[1]), hi.max(p[1])));
        let nx = (((umax - umin) / interval + 1e-9).floor() as usize).max(1);
        let ny = (((wmax - wmin) / interval + 1e-9).floor() as usize).max(1);
        let (dx, dy) = ((umax - umin) / nx as f64, (wmax - wmin) / ny as f64);
        let mut grid = vec![None; nx * ny];
        for j in 0..ny {
            for i in 0..nx {
                let u = umin + (i as f64 + 0.5) * dx;
                let w = wmin + (j as f64 + 0.5) * dy;
                if !point_in_polygon([u, w], &local) {
                    continue;
                }
                let c = [origin[0] + u * x[0] + w * y[0], origin[1] + u * x[1] + w * y[1]];
                let mut f = [0.0; NODE_FEATURES];
                f[21] = 1.0;
                grid[j * nx + i] = Some(nodes.len());
                nodes.push(MapNode {
                    pose: Pose2 { c, h: x },
                    extent: [dx, dy],
                    entity,
                    source: NodeSource::Crosswalk { crosswalk: ci },
                    features: f,
                });
            }
        }
        for j in 0..ny {
            for i in 0..nx {
                if let Some(a) = grid[j * nx + i] {
                    if i + 1 < nx {
                        if let Some(b) = grid[j * nx + i + 1] {
                            insert_both(&mut conflict, a, b);
                        }
                    }
                    if j + 1 < ny {
                        if let Some(b) = grid[(j + 1) * nx + i] {
                            insert_both(&mut conflict, a, b);
                        }
                    }
                }
            }
        }
    }

    // lane-level successor pairs, from both successor and predecessor lists
    let mut lane_succ: BTreeSet<(usize, usize)> = BTreeSet::new();
    for (li, lane) in map.lanes.iter().enumerate() {
        for s in &lane.successors {
            lane_succ.insert((li, index[s]));
        }
        for p in &lane.predecessors {
            lane_succ.insert((index[p], li));
        }
    }
    let m = nodes.len();
    let mut succ1: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); m];
    for ids in &lane_nodes {
        for w in ids.windows(2) {
            succ1[w[0]].insert(w[1]);
        }
    }
    for &(a, b) in &lane_succ {
        let from = *lane_nodes[a].last().unwrap();
        let to = lane_nodes[b][0];
        if from != to {
            succ1[from].insert(to);
        }
    }

    let mut edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); EdgeKind::COUNT];
    // reach[i] = nodes reachable by walks of exactly k successor hops
    let mut reach: Vec<BTreeSet<usize>> = succ1.clone();
    for k in 1..=MAX_DILATION {
        if k > 1 {
            reach = reach
                .iter()
                .map(|r| r.iter().flat_map(|&j| succ1[j].iter().copied()).collect())
                .collect();
        }
        let mut list: Vec<(usize, usize)> = reach
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.iter().filter(move |&&j| j != i).map(move |&j| (i, j)))
            .collect();
        list.sort_unstable();
        let mut pred: Vec<(usize, usize)> = list.iter().map(|&(a, b)| (b, a)).collect();
        pred.sort_unstable();
        edges[EdgeKind::Successor(k).index()] = list;
        edges[EdgeKind::Predecessor(k).index()] = pred;
    }

    for (kind, pick) in [(EdgeKind::Left, true), (EdgeKind::Right, false)] {
        let mut list = Vec::new();
        for (li, lane) in map.lanes.iter().enumerate() {
            let nb = if pick { lane.left_neighbor } else { lane.right_neighbor };
            let Some(nb) = nb else { continue };
            let nj = index[&nb];
            for (k, &node) in lane_nodes[li].iter().enumerate() {
                let f = lane_fracs[li][k];
                let mut best = (f64::INFINITY, 0usize);
                for (q, &g) in lane_fracs[nj].iter().enumerate() {
                    let d = (g - f).abs();
                    if d < best.0 {
                        best = (d, q);
                    }
                }
                let other = lane_nodes[nj][best.1];
                if other != node {
                    list.push((node, other));
                }
            }
        }
        list.sort_unstable();
        list.dedup();
        edges[kind.index()] = list;
    }
    edges[EdgeKind::Conflict.index()] = conflict.into_iter().collect();

    let mut h = Sha256::new();
    h.update(serde_json::to_vec(map)?);
    h.update(interval.to_le_bytes());
    let mut g = LaneGraph {
        nodes,
        edges,
        source: h.finalize().into(),
    };
    g.refresh_degrees();
    Ok(g)
}

/// Uniform-grid spatial hash keyed by `floor(coord / cell)`.
fn spatial_pairs(nodes: &[MapNode], radius: f64) -> BTreeSet<(usize, usize)> {
    let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    let key = |p: Vec2| ((p[0] / radius).floor() as i64, (p[1] / radius).floor() as i64);
    for (i, n) in nodes.iter().enumerate() {
        cells.entry(key(n.pose.c)).or_default().push(i);
    }
    let r2 = radius * radius;
    let mut out = BTreeSet::new();
    for (i, n) in nodes.iter().enumerate() {
        let (cx, cy) = key(n.pose.c);
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(bucket) = cells.get(&(cx + dx, cy + dy)) {
                    for &j in bucket {
                        if j != i && nodes[j].entity != n.entity && dist2(n.pose.c, nodes[j].pose.c) < r2 {
                            out.insert((i, j));
                        }
                    }
                }
            }
        }
    }
    out
}

/// All-pairs reference for conflict detection.
pub fn conflict_pairs_bruteforce(nodes: &[MapNode], radius: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..nodes.len() {
        for j in 0..nodes.len() {
            if i != j && nodes[i].entity != nodes[j].entity && dist(nodes[i].pose.c, nodes[j].pose.c) < radius {
                out.push((i, j));
            }
        }
    }
    out
}

/// Adds symmetric conflict edges between nodes of distinct entities closer
/// than `radius`.
pub fn add_conflict_edges(mut g: LaneGraph, radius: f64) -> Result<LaneGraph> {
    if !(radius > 0.0) {
        return Err(CoreError::Config(format!("conflict radius must be positive, got {radius}")));
    }
    let mut set: BTreeSet<(usize, usize)> = g.edges[EdgeKind::Conflict.index()].iter().copied().collect();
    set.extend(spatial_pairs(&g.nodes, radius));
    g.edges[EdgeKind::Conflict.index()] = set.into_iter().collect();
    let mut h = Sha256::new();
    h.update(g.source);
    h.update(radius.to_le_bytes());
    g.source = h.finalize().into();
    g.refresh_degrees();
    Ok(g)
}

/// `build_lane_graph` followed by `add_conflict_edges`.
pub fn lane_graph(map: &MapSource, interval: f64, conflict_radius: f64) -> Result<LaneGraph> {
    add_conflict_edges(build_lane_graph(map, interval)?, conflict_radius)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Se2;
    use crate::map::{Crosswalk, Lane};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lane(id: u32, pts: Vec<Vec2>) -> Lane {
        Lane {
            id,
            centerline: pts,
            width: 3.5,
            speed_limit: 13.0,
            left_boundary: Boundary::new(BoundaryType::Dashed, BoundaryColor::White),
            right_boundary: Boundary::new(BoundaryType::Solid, BoundaryColor::White),
            in_intersection: false,
            successors: vec![],
            predecessors: vec![],
            left_neighbor: None,
            right_neighbor: None,
        }
    }

    fn single(pts: Vec<Vec2>) -> MapSource {
        MapSource {
            lanes: vec![lane(1, pts)],
            crosswalks: vec![],
        }
    }

    #[test]
    fn straight_lane_dilation_counts() {
        let g = build_lane_graph(&single(vec![[0.0, 0.0], [30.0, 0.0]]), 3.0).unwrap();
        assert_eq!(g.len(), 10);
        for k in 1..=5u8 {
            assert_eq!(g.edges_of(EdgeKind::Successor(k)).len(), 10 - k as usize);
            assert_eq!(g.edges_of(EdgeKind::Predecessor(k)).len(), 10 - k as usize);
        }
        assert!(g.edges_of(EdgeKind::Left).is_empty());
        let first = &g.nodes[0];
        assert!((first.pose.c[0] - 1.5).abs() < 1e-12);
        assert_eq!(first.pose.h, [1.0, 0.0]);
        assert_eq!(first.features[2], 0.0);
    }

    #[test]
    fn remainder_merges_into_last_segment() {
        let g = build_lane_graph(&single(vec![[0.0, 0.0], [31.0, 0.0]]), 3.0).unwrap();
        assert_eq!(g.len(), 10);
        assert!((g.nodes[9].extent[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn single_node_graph_has_no_edges() {
        let g = lane_graph(&single(vec![[0.0, 0.0], [2.0, 0.0]]), 3.0, 2.5).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.num_edges(), 0);
    }

    #[test]
    fn degenerate_lane_and_bad_interval_rejected() {
        assert!(build_lane_graph(&single(vec![[1.0, 1.0], [1.0, 1.0]]), 3.0).is_err());
        assert!(build_lane_graph(&single(vec![[0.0, 0.0], [5.0, 0.0]]), 0.0).is_err());
    }

    #[test]
    fn parallel_neighbors_get_lateral_edges() {
        let mut a = lane(1, vec![[0.0, 0.0], [30.0, 0.0]]);
        let mut b = lane(2, vec![[0.0, 3.5], [30.0, 3.5]]);
        a.left_neighbor = Some(2);
        b.right_neighbor = Some(1);
        let g = build_lane_graph(
            &MapSource {
                lanes: vec![a, b],
                crosswalks: vec![],
            },
            3.0,
        )
        .unwrap();
        let left = g.edges_of(EdgeKind::Left);
        let right = g.edges_of(EdgeKind::Right);
        assert_eq!(left.len(), 10);
        assert_eq!(right.len(), 10);
        for &(i, j) in left {
            assert!((g.nodes[i].pose.c[0] - g.nodes[j].pose.c[0]).abs() < 1e-12);
            assert!(g.nodes[j].pose.c[1] > g.nodes[i].pose.c[1]);
        }
    }

    #[test]
    fn crossing_lanes_conflict_and_same_lane_does_not() {
        let a = lane(1, vec![[-15.0, 0.0], [15.0, 0.0]]);
        let b = lane(2, vec![[0.0, -15.0], [0.0, 15.0]]);
        let g = lane_graph(
            &MapSource {
                lanes: vec![a, b],
                crosswalks: vec![],
            },
            3.0,
            2.5,
        )
        .unwrap();
        let c = g.edges_of(EdgeKind::Conflict);
        assert!(!c.is_empty());
        assert!(c.iter().all(|&(i, j)| g.nodes[i].entity != g.nodes[j].entity));
        assert!(c.contains(&(c[0].1, c[0].0)));
    }

    #[test]
    fn successor_topology_and_transpose() {
        let mut a = lane(1, vec![[0.0, 0.0], [9.0, 0.0]]);
        let mut b = lane(2, vec![[9.0, 0.0], [18.0, 3.0]]);
        let c = lane(3, vec![[9.0, 0.0], [18.0, -3.0]]);
        a.successors = vec![2];
        b.predecessors = vec![1];
        let mut c = c;
        c.predecessors = vec![1];
        let g = build_lane_graph(
            &MapSource {
                lanes: vec![a, b, c],
                crosswalks: vec![],
            },
            3.0,
        )
        .unwrap();
        for k in 1..=MAX_DILATION {
            let mut t: Vec<_> = g.edges_of(EdgeKind::Successor(k)).iter().map(|&(a, b)| (b, a)).collect();
            t.sort();
            assert_eq!(t, g.edges_of(EdgeKind::Predecessor(k)));
        }
        // last node of lane 1 feeds the first node of both branches
        let s1 = g.edges_of(EdgeKind::Successor(1));
        assert!(s1.contains(&(2, 3)) && s1.contains(&(2, 6)));
    }

    fn boolean_power_oracle(g: &LaneGraph, k: usize) -> Vec<(usize, usize)> {
        let m = g.len();
        let mut a = vec![vec![false; m]; m];
        for &(i, j) in g.edges_of(EdgeKind::Successor(1)) {
            a[i][j] = true;
        }
        let mut p = a.clone();
        for _ in 1..k {
            let mut q = vec![vec![false; m]; m];
            for i in 0..m {
                for l in 0..m {
                    if p[i][l] {
                        for j in 0..m {
                            q[i][j] |= a[l][j];
                        }
                    }
                }
            }
            p = q;
        }
        let mut out = vec![];
        for i in 0..m {
            for j in 0..m {
                if p[i][j] && i != j {
                    out.push((i, j));
                }
            }
        }
        out
    }

    #[test]
    fn dilations_match_boolean_matrix_powers() {
        // diamond: 1 -> {2, 3} -> 4
        let mut l1 = lane(1, vec![[0.0, 0.0], [6.0, 0.0]]);
        let mut l2 = lane(2, vec![[6.0, 0.0], [12.0, 3.0]]);
        let mut l3 = lane(3, vec![[6.0, 0.0], [15.0, -3.0]]);
        let l4 = lane(4, vec![[18.0, 0.0], [27.0, 0.0]]);
        l1.successors = vec![2, 3];
        l2.successors = vec![4];
        l3.successors = vec![4];
        let g = build_lane_graph(
            &MapSource {
                lanes: vec![l1, l2, l3, l4],
                crosswalks: vec![],
            },
            3.0,
        )
        .unwrap();
        for k in 1..=5 {
            assert_eq!(g.edges_of(EdgeKind::Successor(k as u8)), boolean_power_oracle(&g, k).as_slice());
        }
    }

    #[test]
    fn crosswalk_nodes_are_flagged_and_linked() {
        let cw = Crosswalk {
            id: 7,
            polygon: vec![[0.0, 0.0], [9.0, 0.0], [9.0, 3.0], [0.0, 3.0]],
        };
        let g = build_lane_graph(
            &MapSource {
                lanes: vec![],
                crosswalks: vec![cw],
            },
            3.0,
        )
        .unwrap();
        assert_eq!(g.len(), 3);
        assert!(g.nodes.iter().all(|n| n.features[21] == 1.0 && n.features[..21].iter().all(|&v| v == 0.0)));
        assert_eq!(g.edges_of(EdgeKind::Conflict).len(), 4);
    }

    #[test]
    fn circle_curvature() {
        let r = 20.0;
        let pts: Vec<Vec2> = (0..=200)
            .map(|i| {
                let t = i as f64 / 200.0 * std::f64::consts::PI;
                [r * t.cos(), r * t.sin()]
            })
            .collect();
        let poly = Polyline::new(&pts).unwrap();
        let k = curvature(&poly, poly.length() / 2.0, 1.5);
        assert!((k - 1.0 / r).abs() < 0.05 / r, "{k}");
        let mirrored: Vec<Vec2> = pts.iter().map(|p| [p[0], -p[1]]).collect();
        let km = curvature(&Polyline::new(&mirrored).unwrap(), poly.length() / 2.0, 1.5);
        assert!((k + km).abs() < 1e-12);
        let line = Polyline::new(&[[0.0, 0.0], [5.0, 5.0], [10.0, 10.0]]).unwrap();
        assert_eq!(curvature(&line, 7.0, 2.0), 0.0);
    }

    fn random_map(rng: &mut ChaCha8Rng) -> MapSource {
        let lanes = (0..6)
            .map(|i| {
                let p0 = [rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0)];
                let th: f64 = rng.gen_range(-3.0..3.0);
                let len = rng.gen_range(5.0..40.0);
                let bend: f64 = rng.gen_range(-0.5..0.5);
                let mid = [p0[0] + 0.5 * len * th.cos(), p0[1] + 0.5 * len * th.sin()];
                let p1 = [mid[0] + 0.5 * len * (th + bend).cos(), mid[1] + 0.5 * len * (th + bend).sin()];
                lane(i, vec![p0, mid, p1])
            })
            .collect();
        MapSource {
            lanes,
            crosswalks: vec![Crosswalk {
                id: 0,
                polygon: vec![[0.0, 0.0], [8.0, 1.0], [7.5, 4.0], [-0.5, 3.0]],
            }],
        }
    }

    #[test]
    fn spatial_hash_matches_bruteforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let map = random_map(&mut rng);
            let g = build_lane_graph(&map, 2.0).unwrap();
            let mut expected: BTreeSet<(usize, usize)> = g.edges_of(EdgeKind::Conflict).iter().copied().collect();
            expected.extend(conflict_pairs_bruteforce(&g.nodes, 2.5));
            let g2 = add_conflict_edges(g, 2.5).unwrap();
            assert_eq!(g2.edges_of(EdgeKind::Conflict), expected.into_iter().collect::<Vec<_>>().as_slice());
        }
    }

    #[test]
    fn construction_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let map = random_map(&mut rng);
        let a = lane_graph(&map, 3.0, 2.5).unwrap();
        let b = lane_graph(&map, 3.0, 2.5).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
    }

    proptest! {
        #[test]
        fn structure_and_features_are_rigid_invariant(seed in 0u64..500, th in -3.14f64..3.14, tx in -500.0f64..500.0, ty in -500.0f64..500.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let map = random_map(&mut rng);
            let t = Se2::new(th, [tx, ty]);
            let a = lane_graph(&map, 3.0, 2.5).unwrap();
            let b = lane_graph(&map.transformed(&t), 3.0, 2.5).unwrap();
            prop_assert_eq!(&a.edges, &b.edges);
            prop_assert_eq!(a.len(), b.len());
            for (na, nb) in a.nodes.iter().zip(&b.nodes) {
                for (u, v) in na.features.iter().zip(&nb.features) {
                    prop_assert!((u - v).abs() < 1e-9);
                }
                let moved = t.apply(&na.pose);
                prop_assert!(dist(moved.c, nb.pose.c) < 1e-9);
                prop_assert!(dist(moved.h, nb.pose.h) < 1e-9);
            }
        }
    }
}
