//! Poses, rigid SE(2) transforms and the pair-wise relative pose encoding.
//!
//! All geometry is computed in `f64`; only the finished (invariant) feature
//! rows are cast to the network precision.
//!
//! 2D cross product convention: `a × b = a.x * b.y - a.y * b.x`.

use diffmath::nn::Mlp;
use diffmath::{ParamStore, Real, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub type Vec2 = [f64; 2];

/// Distances below this are treated as coincident centroids.
pub const DEGENERATE_DIST: f64 = 1e-9;

#[inline]
pub fn cross(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

#[inline]
pub fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
pub fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub fn add(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] + b[0], a[1] + b[1]]
}

#[inline]
pub fn scale(a: Vec2, s: f64) -> Vec2 {
    [a[0] * s, a[1] * s]
}

#[inline]
pub fn norm(a: Vec2) -> f64 {
    a[0].hypot(a[1])
}

#[inline]
pub fn dist(a: Vec2, b: Vec2) -> f64 {
    norm(sub(a, b))
}

#[inline]
pub fn dist2(a: Vec2, b: Vec2) -> f64 {
    let d = sub(a, b);
    d[0] * d[0] + d[1] * d[1]
}

/// Rotates `v` counter-clockwise by the angle whose unit vector is `h`.
#[inline]
pub fn rotate(v: Vec2, h: Vec2) -> Vec2 {
    [h[0] * v[0] - h[1] * v[1], h[1] * v[0] + h[0] * v[1]]
}

/// Inverse of [`rotate`].
#[inline]
pub fn unrotate(v: Vec2, h: Vec2) -> Vec2 {
    [h[0] * v[0] + h[1] * v[1], -h[1] * v[0] + h[0] * v[1]]
}

/// Returns `v / |v|`, or `None` for a (near) zero vector.
pub fn normalize(v: Vec2) -> Option<Vec2> {
    let n = norm(v);
    if n < 1e-12 || !n.is_finite() {
        None
    } else {
        Some([v[0] / n, v[1] / n])
    }
}

/// Centroid plus unit heading.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub c: Vec2,
    pub h: Vec2,
}

impl Pose2 {
    /// Builds a pose, normalising the heading.
    pub fn new(c: Vec2, h: Vec2) -> Result<Self> {
        let h = normalize(h).ok_or_else(|| CoreError::Geometry(format!("zero heading at {c:?}")))?;
        Ok(Self { c, h })
    }

    pub fn from_angle(c: Vec2, theta: f64) -> Self {
        Self {
            c,
            h: [theta.cos(), theta.sin()],
        }
    }

    pub fn angle(&self) -> f64 {
        self.h[1].atan2(self.h[0])
    }

    pub fn heading_is_unit(&self) -> bool {
        (norm(self.h) - 1.0).abs() <= 1e-9
    }

    /// World point expressed in this pose's frame (x along the heading).
    pub fn to_local(&self, p: Vec2) -> Vec2 {
        unrotate(sub(p, self.c), self.h)
    }

    pub fn to_world(&self, p: Vec2) -> Vec2 {
        add(self.c, rotate(p, self.h))
    }
}

/// Rigid transform `p ↦ R p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Se2 {
    pub cos: f64,
    pub sin: f64,
    pub t: Vec2,
}

impl Se2 {
    pub fn identity() -> Self {
        Self {
            cos: 1.0,
            sin: 0.0,
            t: [0.0, 0.0],
        }
    }

    pub fn new(theta: f64, t: Vec2) -> Self {
        Self {
            cos: theta.cos(),
            sin: theta.sin(),
            t,
        }
    }

    /// Rotation by `theta` about `pivot`.
    pub fn rotation_about(theta: f64, pivot: Vec2) -> Self {
        let r = Self::new(theta, [0.0, 0.0]);
        let moved = r.apply_vec(pivot);
        Self {
            t: sub(pivot, moved),
            ..r
        }
    }

    pub fn angle(&self) -> f64 {
        self.sin.atan2(self.cos)
    }

    pub fn apply_vec(&self, v: Vec2) -> Vec2 {
        [self.cos * v[0] - self.sin * v[1], self.sin * v[0] + self.cos * v[1]]
    }

    pub fn apply_point(&self, p: Vec2) -> Vec2 {
        add(self.apply_vec(p), self.t)
    }

    pub fn apply(&self, pose: &Pose2) -> Pose2 {
        Pose2 {
            c: self.apply_point(pose.c),
            h: self.apply_vec(pose.h),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Se2) -> Se2 {
        Se2 {
            cos: self.cos * other.cos - self.sin * other.sin,
            sin: self.sin * other.cos + self.cos * other.sin,
            t: self.apply_point(other.t),
        }
    }

    pub fn inverse(&self) -> Se2 {
        let inv_rot = Se2 {
            cos: self.cos,
            sin: -self.sin,
            t: [0.0, 0.0],
        };
        let t = inv_rot.apply_vec(self.t);
        Se2 {
            t: [-t[0], -t[1]],
            ..inv_rot
        }
    }
}

/// Raw relative geometry of an ordered pose pair.
#[derive(Clone, Debug, PartialEq)]
pub struct RelGeom {
    pub sin_alpha: f64,
    pub cos_alpha: f64,
    pub sin_beta: f64,
    pub cos_beta: f64,
    /// `[p_0..p_{N-1}, r_0..r_{N-1}]`.
    pub dist_encoding: Vec<f64>,
}

impl RelGeom {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = vec![self.sin_alpha, self.cos_alpha, self.sin_beta, self.cos_beta];
        out.extend_from_slice(&self.dist_encoding);
        out
    }
}

/// Sinusoid bank with angular frequencies `exp(sign * 4n/N)`, `n = 0..N-1`.
///
/// `sign = -1` gives wavelengths from `2π` m up to a few hundred meters;
/// `sign = +1` gives the literal growing exponent.
#[derive(Clone, Debug, PartialEq)]
pub struct FreqBank {
    pub n_freq: usize,
    pub sign: f64,
    freqs: Vec<f64>,
}

impl FreqBank {
    pub fn new(n_freq: usize, sign: f64) -> Result<Self> {
        if n_freq == 0 {
            return Err(CoreError::Config("n_freq must be at least 1".into()));
        }
        if sign != 1.0 && sign != -1.0 {
            return Err(CoreError::Config(format!("frequency sign must be +1 or -1, got {sign}")));
        }
        let freqs = (0..n_freq)
            .map(|n| (sign * 4.0 * n as f64 / n_freq as f64).exp())
            .collect();
        Ok(Self { n_freq, sign, freqs })
    }

    /// Width of a raw geometry row: four angle slots plus `2N` sinusoids.
    pub fn width(&self) -> usize {
        4 + 2 * self.n_freq
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.freqs
    }

    fn sinusoids_into(&self, d: f64, out: &mut [f64]) {
        let n = self.n_freq;
        for (i, &w) in self.freqs.iter().enumerate() {
            let (s, c) = (d * w).sin_cos();
            out[i] = s;
            out[n + i] = c;
        }
    }

    pub fn sinusoids(&self, d: f64) -> Vec<f64> {
        let mut out = vec![0.0; 2 * self.n_freq];
        self.sinusoids_into(d, &mut out);
        out
    }

    /// Writes the raw geometry of `src → dst` into `out[..width]`.
    pub fn encode_into(&self, src: &Pose2, dst: &Pose2, out: &mut [f64]) {
        out[0] = cross(src.h, dst.h);
        out[1] = dot(src.h, dst.h);
        self.beta_and_distance_into(src.c, dst, out);
    }

    /// Same layout as [`FreqBank::encode_into`] for a heading-free point:
    /// the two α slots are zero.
    pub fn encode_point_into(&self, point: Vec2, dst: &Pose2, out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = 0.0;
        self.beta_and_distance_into(point, dst, out);
    }

    fn beta_and_distance_into(&self, src_c: Vec2, dst: &Pose2, out: &mut [f64]) {
        let v = sub(src_c, dst.c);
        let d = norm(v);
        if d < DEGENERATE_DIST {
            out[2] = 0.0;
            out[3] = 1.0;
        } else {
            out[2] = cross(v, dst.h) / d;
            out[3] = dot(v, dst.h) / d;
        }
        self.sinusoids_into(d, &mut out[4..4 + 2 * self.n_freq]);
    }

    pub fn rel_geom(&self, src: &Pose2, dst: &Pose2) -> RelGeom {
        let mut buf = vec![0.0; self.width()];
        self.encode_into(src, dst, &mut buf);
        RelGeom {
            sin_alpha: buf[0],
            cos_alpha: buf[1],
            sin_beta: buf[2],
            cos_beta: buf[3],
            dist_encoding: buf[4..].to_vec(),
        }
    }

    /// Row-stacked raw geometry for a list of `(src, dst)` pairs.
    pub fn matrix<'a, I>(&self, pairs: I) -> Vec<f64>
    where
        I: IntoIterator<Item = (&'a Pose2, &'a Pose2)>,
    {
        let w = self.width();
        let mut out = Vec::new();
        for (s, d) in pairs {
            let start = out.len();
            out.resize(start + w, 0.0);
            self.encode_into(s, d, &mut out[start..]);
        }
        out
    }
}

pub fn sinusoid_bank(d: f64, n_freq: usize, sign: f64) -> Result<Vec<f64>> {
    Ok(FreqBank::new(n_freq, sign)?.sinusoids(d))
}

pub fn rel_geom(src: &Pose2, dst: &Pose2, n_freq: usize, sign: f64) -> Result<RelGeom> {
    Ok(FreqBank::new(n_freq, sign)?.rel_geom(src, dst))
}

/// Learned edge attribute: an MLP over raw relative geometry.
#[derive(Clone, Debug)]
pub struct PairPose {
    pub bank: FreqBank,
    pub mlp: Mlp,
}

impl PairPose {
    pub fn dim(&self) -> usize {
        self.mlp.dout()
    }

    /// Embeds pre-computed raw geometry rows (`E × width`).
    pub fn embed_raw<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        raw: &[f64],
    ) -> Result<Var> {
        let w = self.bank.width();
        if w != self.mlp.din() {
            return Err(CoreError::Shape(format!(
                "pair-pose mlp expects {} inputs, geometry has {}",
                self.mlp.din(),
                w
            )));
        }
        let rows = raw.len() / w;
        let x = tape.constant(Tensor::from_f64(&[rows, w], raw)?)?;
        Ok(self.mlp.forward(tape, store, x)?)
    }

    /// Embeds a single ordered pose pair.
    pub fn encode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        src: &Pose2,
        dst: &Pose2,
    ) -> Result<Var> {
        let raw = self.bank.matrix([(src, dst)]);
        self.embed_raw(tape, store, &raw)
    }
}

/// Standalone `e = MLP(g)` for one pose pair.
pub fn pairpose_encode<T: Real>(
    pose: &PairPose,
    store: &ParamStore<T>,
    src: &Pose2,
    dst: &Pose2,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = pose.encode(&mut tape, store, src, dst)?;
    Ok(tape.value(v).clone())
}
