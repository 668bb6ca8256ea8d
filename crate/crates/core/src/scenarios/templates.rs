//! Parametric road layouts.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;

use crate::config::Domain;
use crate::geometry::{add, normalize, scale, sub, Vec2};
use crate::map::{Boundary, BoundaryColor, BoundaryType, Crosswalk, Lane, MapSource};

pub const LANE_WIDTH: f64 = 3.5;

/// Points along a circular arc starting at `start` with heading `theta`,
/// turning left for positive `radius`, spaced about `step` apart.
pub fn arc(start: Vec2, theta: f64, radius: f64, angle: f64, step: f64) -> Vec<Vec2> {
    let len = (radius * angle).abs();
    let n = (len / step).ceil().max(1.0) as usize;
    let center = add(start, scale([-theta.sin(), theta.cos()], radius));
    (0..=n)
        .map(|i| {
            let phi = theta + angle.copysign(radius) * i as f64 / n as f64;
            sub(center, scale([-phi.sin(), phi.cos()], radius))
        })
        .collect()
}

pub fn line(a: Vec2, b: Vec2, step: f64) -> Vec<Vec2> {
    let n = (crate::geometry::dist(a, b) / step).ceil().max(1.0) as usize;
    (0..=n).map(|i| add(a, scale(sub(b, a), i as f64 / n as f64))).collect()
}

pub fn bezier(a: Vec2, ctrl: Vec2, b: Vec2, n: usize) -> Vec<Vec2> {
    (0..=n)
        .map(|i| {
            let t = i as f64 / n as f64;
            let u = 1.0 - t;
            [
                u * u * a[0] + 2.0 * u * t * ctrl[0] + t * t * b[0],
                u * u * a[1] + 2.0 * u * t * ctrl[1] + t * t * b[1],
            ]
        })
        .collect()
}

/// Appends `more` to `path`, skipping its first point when it repeats the end.
pub fn extend(path: &mut Vec<Vec2>, more: &[Vec2]) {
    let skip = match (path.last(), more.first()) {
        (Some(a), Some(b)) => crate::geometry::dist(*a, *b) < 1e-9,
        _ => false,
    };
    path.extend_from_slice(if skip { &more[1..] } else { more });
}

/// Lateral offset of a polyline, positive to the left of travel.
pub fn offset(path: &[Vec2], d: f64) -> Vec<Vec2> {
    let n = path.len();
    (0..n)
        .map(|i| {
            let a = path[i.saturating_sub(1)];
            let b = path[(i + 1).min(n - 1)];
            let t = normalize(sub(b, a)).unwrap_or([1.0, 0.0]);
            add(path[i], scale([-t[1], t[0]], d))
        })
        .collect()
}

fn lane(id: u32, centerline: Vec<Vec2>, speed_limit: f64) -> Lane {
    Lane {
        id,
        centerline,
        width: LANE_WIDTH,
        speed_limit,
        left_boundary: Boundary::new(BoundaryType::Solid, BoundaryColor::White),
        right_boundary: Boundary::new(BoundaryType::Solid, BoundaryColor::White),
        in_intersection: false,
        successors: vec![],
        predecessors: vec![],
        left_neighbor: None,
        right_neighbor: None,
    }
}

fn link(lanes: &mut [Lane], from: u32, to: u32) {
    let fi = lanes.iter().position(|l| l.id == from).unwrap();
    let ti = lanes.iter().position(|l| l.id == to).unwrap();
    lanes[fi].successors.push(to);
    lanes[ti].predecessors.push(from);
}

fn neighbors(lanes: &mut [Lane], right: u32, left: u32) {
    for l in lanes.iter_mut() {
        if l.id == right {
            l.left_neighbor = Some(left);
            l.left_boundary = Boundary::new(BoundaryType::Dashed, BoundaryColor::White);
        }
        if l.id == left {
            l.right_neighbor = Some(right);
            l.right_boundary = Boundary::new(BoundaryType::Dashed, BoundaryColor::White);
        }
    }
}

/// Length multiplier and speed limit for a domain.
fn domain_scale(domain: Domain) -> (f64, f64) {
    match domain {
        Domain::Urban => (1.0, 13.9),
        Domain::Highway => (2.5, 30.0),
    }
}

/// `n` parallel lanes along a reference path; lane 0 is rightmost.
pub fn parallel_lanes(reference: &[Vec2], n: usize, speed_limit: f64, first_id: u32) -> Vec<Lane> {
    let mut lanes: Vec<Lane> = (0..n)
        .map(|k| {
            let d = (k as f64 - (n as f64 - 1.0) / 2.0) * LANE_WIDTH;
            lane(first_id + k as u32, offset(reference, d), speed_limit)
        })
        .collect();
    for k in 1..n {
        neighbors(&mut lanes, first_id + k as u32 - 1, first_id + k as u32);
    }
    lanes
}

pub fn straight<R: Rng + ?Sized>(domain: Domain, rng: &mut R) -> MapSource {
    let (s, v) = domain_scale(domain);
    let len = 200.0 * s * rng.gen_range(0.9..1.1);
    let reference = line([0.0, 0.0], [len, 0.0], 5.0);
    MapSource {
        lanes: parallel_lanes(&reference, 2, v, 1),
        crosswalks: vec![],
    }
}

pub fn curve<R: Rng + ?Sized>(domain: Domain, rng: &mut R) -> MapSource {
    let (s, v) = domain_scale(domain);
    let radius = rng.gen_range(40.0..80.0) * s * s.sqrt();
    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let angle = rng.gen_range(0.6..1.0) * FRAC_PI_2;
    let mut reference = line([0.0, 0.0], [40.0 * s, 0.0], 2.0);
    let bend = arc([40.0 * s, 0.0], 0.0, sign * radius, angle, 2.0);
    extend(&mut reference, &bend);
    let end = *reference.last().unwrap();
    let th = sign * angle;
    extend(&mut reference, &line(end, add(end, scale([th.cos(), th.sin()], 50.0 * s)), 2.0));
    MapSource {
        lanes: parallel_lanes(&reference, 2, v, 1),
        crosswalks: vec![],
    }
}

fn fork_geometry<R: Rng + ?Sized>(domain: Domain, rng: &mut R) -> (Vec<Vec2>, Vec<Vec2>, Vec<Vec2>, f64) {
    let (s, v) = domain_scale(domain);
    let trunk_len = 80.0 * s * rng.gen_range(0.9..1.1);
    let radius = rng.gen_range(50.0..80.0) * s * s;
    let angle = match domain {
        Domain::Urban => rng.gen_range(0.45..0.7),
        Domain::Highway => rng.gen_range(0.15..0.25),
    };
    let branch_len = 100.0 * s;
    let trunk = line([0.0, 0.0], [trunk_len, 0.0], 2.0);
    let mut branches = Vec::new();
    for sign in [1.0, -1.0] {
        let mut b = arc([trunk_len, 0.0], 0.0, sign * radius, angle, 2.0);
        let end = *b.last().unwrap();
        let rest = (branch_len - radius * angle).max(10.0);
        let th = sign * angle;
        extend(&mut b, &line(end, add(end, scale([th.cos(), th.sin()], rest)), 2.0));
        branches.push(b);
    }
    let right = branches.pop().unwrap();
    let left = branches.pop().unwrap();
    (trunk, left, right, v)
}

/// One trunk lane splitting into a left and a right branch.
pub fn fork<R: Rng + ?Sized>(domain: Domain, rng: &mut R) -> MapSource {
    let (trunk, left, right, v) = fork_geometry(domain, rng);
    let mut lanes = vec![lane(1, trunk, v), lane(2, left, v), lane(3, right, v)];
    link(&mut lanes, 1, 2);
    link(&mut lanes, 1, 3);
    MapSource {
        lanes,
        crosswalks: vec![],
    }
}

/// Two entry lanes joining into one trunk.
pub fn merge<R: Rng + ?Sized>(domain: Domain, rng: &mut R) -> MapSource {
    let (trunk, left, right, v) = fork_geometry(domain, rng);
    // mirror x so travel runs toward the trunk, then reverse point order
    let flip = |p: &Vec<Vec2>| -> Vec<Vec2> { p.iter().rev().map(|q| [-q[0], q[1]]).collect() };
    let mut lanes = vec![lane(1, flip(&left), v), lane(2, flip(&right), v), lane(3, flip(&trunk), v)];
    link(&mut lanes, 1, 3);
    link(&mut lanes, 2, 3);
    MapSource {
        lanes,
        crosswalks: vec![],
    }
}

/// Four-way intersection: each arm has an inbound and an outbound lane, and
/// every inbound lane connects to the outbound lanes of the other arms.
pub fn intersection<R: Rng + ?Sized>(rng: &mut R) -> MapSource {
    let arm = 60.0 * rng.gen_range(0.9..1.1);
    let half = 10.0;
    let off = LANE_WIDTH / 2.0;
    let mut lanes = Vec::new();
    let mut inbound = Vec::new();
    let mut outbound = Vec::new();
    for k in 0..4 {
        let th = k as f64 * FRAC_PI_2;
        let u = [th.cos(), th.sin()];
        let n = [-u[1], u[0]];
        // inbound drives along -u with its right side toward +n
        let a = add(scale(u, half + arm), scale(n, off));
        let b = add(scale(u, half), scale(n, off));
        let mut l = lane(1 + 2 * k as u32, line(a, b, 3.0), 11.1);
        l.left_boundary = Boundary::new(BoundaryType::Double, BoundaryColor::Yellow);
        inbound.push((l.id, b, scale(u, -1.0)));
        lanes.push(l);
        let c = sub(scale(u, half), scale(n, off));
        let d = sub(scale(u, half + arm), scale(n, off));
        let mut l = lane(2 + 2 * k as u32, line(c, d, 3.0), 11.1);
        l.left_boundary = Boundary::new(BoundaryType::Double, BoundaryColor::Yellow);
        outbound.push((l.id, c, u));
        lanes.push(l);
    }
    let mut next = 9;
    for (ki, &(in_id, p, dir_in)) in inbound.iter().enumerate() {
        for (ko, &(out_id, q, dir_out)) in outbound.iter().enumerate() {
            if ki == ko {
                continue;
            }
            // control point where the two lane lines meet; straight for through
            let denom = crate::geometry::cross(dir_in, dir_out);
            let ctrl = if denom.abs() < 1e-9 {
                scale(add(p, q), 0.5)
            } else {
                let t = crate::geometry::cross(sub(q, p), dir_out) / denom;
                add(p, scale(dir_in, t))
            };
            let mut l = lane(next, bezier(p, ctrl, q, 12), 8.0);
            l.in_intersection = true;
            l.left_boundary = Boundary::NONE;
            l.right_boundary = Boundary::NONE;
            lanes.push(l);
            link(&mut lanes, in_id, next);
            link(&mut lanes, next, out_id);
            next += 1;
        }
    }
    MapSource {
        lanes,
        crosswalks: vec![],
    }
}

/// Two-way street with a crosswalk across its middle.
pub fn crosswalk_street<R: Rng + ?Sized>(rng: &mut R) -> MapSource {
    let len = 160.0 * rng.gen_range(0.9..1.1);
    let off = LANE_WIDTH / 2.0;
    let mut east = lane(1, line([0.0, -off], [len, -off], 3.0), 11.1);
    east.left_boundary = Boundary::new(BoundaryType::Double, BoundaryColor::Yellow);
    let mut west = lane(2, line([len, off], [0.0, off], 3.0), 11.1);
    west.left_boundary = Boundary::new(BoundaryType::Double, BoundaryColor::Yellow);
    let x = len / 2.0;
    let cw = Crosswalk {
        id: 1,
        polygon: vec![[x - 2.0, -6.0], [x + 2.0, -6.0], [x + 2.0, 6.0], [x - 2.0, 6.0]],
    };
    MapSource {
        lanes: vec![east, west],
        crosswalks: vec![cw],
    }
}

/// `n_lanes` parallel straight lanes of `length` meters.
pub fn multi_lane_straight(n_lanes: usize, length: f64, speed_limit: f64) -> MapSource {
    let reference = line([0.0, 0.0], [length, 0.0], 10.0);
    MapSource {
        lanes: parallel_lanes(&reference, n_lanes, speed_limit, 1),
        crosswalks: vec![],
    }
}

/// Signed heading change from the start of `a`'s last segment direction to
/// the end direction of `b`.
pub fn turn_angle(a: &[Vec2], b: &[Vec2]) -> f64 {
    let da = sub(a[a.len() - 1], a[a.len() - 2]);
    let db = sub(b[b.len() - 1], b[b.len() - 2]);
    let mut d = db[1].atan2(db[0]) - da[1].atan2(da[0]);
    while d > PI {
        d -= 2.0 * PI;
    }
    while d < -PI {
        d += 2.0 * PI;
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::dist;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn arc_has_constant_radius_and_length() {
        let pts = arc([0.0, 0.0], 0.0, 20.0, FRAC_PI_2, 1.0);
        let c = [0.0, 20.0];
        assert!(pts.iter().all(|p| (dist(*p, c) - 20.0).abs() < 1e-9));
        assert!(dist(*pts.last().unwrap(), [20.0, 20.0]) < 1e-9);
        let right = arc([0.0, 0.0], 0.0, -20.0, FRAC_PI_2, 1.0);
        assert!(dist(*right.last().unwrap(), [20.0, -20.0]) < 1e-9);
    }

    #[test]
    fn templates_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for d in [Domain::Urban, Domain::Highway] {
            straight(d, &mut rng).validate().unwrap();
            curve(d, &mut rng).validate().unwrap();
            fork(d, &mut rng).validate().unwrap();
            merge(d, &mut rng).validate().unwrap();
        }
        let x = intersection(&mut rng);
        x.validate().unwrap();
        assert_eq!(x.lanes.len(), 8 + 12);
        crosswalk_street(&mut rng).validate().unwrap();
    }

    #[test]
    fn fork_and_merge_topology() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = fork(Domain::Urban, &mut rng);
        assert_eq!(f.lane(1).unwrap().successors, vec![2, 3]);
        let l = f.lane(2).unwrap();
        assert!(turn_angle(&f.lane(1).unwrap().centerline, &l.centerline) > 0.3);
        let m = merge(Domain::Urban, &mut rng);
        assert_eq!(m.lane(3).unwrap().predecessors, vec![1, 2]);
        let a = m.lane(1).unwrap().centerline.last().unwrap();
        let b = m.lane(3).unwrap().centerline[0];
        assert!(dist(*a, b) < 1e-9);
    }

    #[test]
    fn intersection_turns_classify() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = intersection(&mut rng);
        let inbound = m.lane(1).unwrap();
        let mut kinds = vec![];
        for s in &inbound.successors {
            let c = m.lane(*s).unwrap();
            let next = m.lane(c.successors[0]).unwrap();
            kinds.push((turn_angle(&inbound.centerline, &next.centerline) * 2.0 / PI).round() as i32);
        }
        kinds.sort();
        assert_eq!(kinds, vec![-1, 0, 1]);
    }
}
