//! Analytic signed distance functions for the object primitives and the
//! articulated occluder. Negative inside, positive outside.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Mat3, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Sphere,
    Cylinder,
    Box,
    Torus,
    Capsule,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 5] = [
        ObjectClass::Sphere,
        ObjectClass::Cylinder,
        ObjectClass::Box,
        ObjectClass::Torus,
        ObjectClass::Capsule,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Sphere => "sphere",
            ObjectClass::Cylinder => "cylinder",
            ObjectClass::Box => "box",
            ObjectClass::Torus => "torus",
            ObjectClass::Capsule => "capsule",
        }
    }

    pub fn index(self) -> usize {
        ObjectClass::ALL.iter().position(|c| *c == self).unwrap()
    }

    /// Surface albedo used by the renderer.
    pub fn albedo(self) -> [f64; 3] {
        match self {
            ObjectClass::Sphere => [0.85, 0.18, 0.15],
            ObjectClass::Cylinder => [0.15, 0.7, 0.25],
            ObjectClass::Box => [0.15, 0.3, 0.85],
            ObjectClass::Torus => [0.9, 0.8, 0.1],
            ObjectClass::Capsule => [0.6, 0.2, 0.75],
        }
    }

    pub fn color_name(self) -> &'static str {
        match self {
            ObjectClass::Sphere => "red",
            ObjectClass::Cylinder => "green",
            ObjectClass::Box => "blue",
            ObjectClass::Torus => "yellow",
            ObjectClass::Capsule => "purple",
        }
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ObjectClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::domain(format!("unknown object class `{s}`")))
    }
}

/// Primitive in its local frame. Cylinder and capsule axes run along `y`;
/// the torus ring lies in the `xy` plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Primitive {
    Sphere { radius: f64 },
    Cylinder { radius: f64, half_height: f64 },
    Box { half_extents: [f64; 3] },
    Torus { major: f64, minor: f64 },
    Capsule { radius: f64, half_length: f64 },
}

impl Primitive {
    pub fn class(&self) -> ObjectClass {
        match self {
            Primitive::Sphere { .. } => ObjectClass::Sphere,
            Primitive::Cylinder { .. } => ObjectClass::Cylinder,
            Primitive::Box { .. } => ObjectClass::Box,
            Primitive::Torus { .. } => ObjectClass::Torus,
            Primitive::Capsule { .. } => ObjectClass::Capsule,
        }
    }

    /// Exact signed distance in the local frame.
    pub fn sdf_local(&self, p: Vec3) -> f64 {
        match *self {
            Primitive::Sphere { radius } => geom::norm(p) - radius,
            Primitive::Cylinder {
                radius,
                half_height,
            } => {
                let dx = (p[0] * p[0] + p[2] * p[2]).sqrt() - radius;
                let dy = p[1].abs() - half_height;
                let outside = (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt();
                outside + dx.max(dy).min(0.0)
            }
            Primitive::Box { half_extents } => {
                let q = [
                    p[0].abs() - half_extents[0],
                    p[1].abs() - half_extents[1],
                    p[2].abs() - half_extents[2],
                ];
                let outside = geom::norm([q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)]);
                outside + q[0].max(q[1]).max(q[2]).min(0.0)
            }
            Primitive::Torus { major, minor } => {
                let qx = (p[0] * p[0] + p[1] * p[1]).sqrt() - major;
                (qx * qx + p[2] * p[2]).sqrt() - minor
            }
            Primitive::Capsule {
                radius,
                half_length,
            } => {
                let y = p[1].clamp(-half_length, half_length);
                geom::norm([p[0], p[1] - y, p[2]]) - radius
            }
        }
    }

    /// Radius of a ball around the local origin containing the primitive.
    pub fn bounding_radius(&self) -> f64 {
        match *self {
            Primitive::Sphere { radius } => radius,
            Primitive::Cylinder {
                radius,
                half_height,
            } => (radius * radius + half_height * half_height).sqrt(),
            Primitive::Box { half_extents } => geom::norm(half_extents),
            Primitive::Torus { major, minor } => major + minor,
            Primitive::Capsule {
                radius,
                half_length,
            } => half_length + radius,
        }
    }
}

/// Rigid placement of an object: rotation `rot_z(roll) · rot_x(tilt)` then translation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub center: Vec3,
    pub roll: f64,
    pub tilt: f64,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            center: [0.0; 3],
            roll: 0.0,
            tilt: 0.0,
        }
    }

    pub fn rotation(&self) -> Mat3 {
        geom::mat_mul(&geom::rot_z(self.roll), &geom::rot_x(self.tilt))
    }
}

/// Analytic ground truth of one object.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectParams {
    pub primitive: Primitive,
    pub pose: Pose,
}

impl ObjectParams {
    pub fn class(&self) -> ObjectClass {
        self.primitive.class()
    }

    /// Signed distance at a world-space point (no extent check).
    pub fn sdf_world(&self, p: Vec3) -> f64 {
        let local = geom::mat_t_vec(&self.pose.rotation(), geom::sub(p, self.pose.center));
        self.primitive.sdf_local(local)
    }

    pub fn bounding_radius(&self) -> f64 {
        self.primitive.bounding_radius()
    }
}

/// Exact signed distance of `obj` at `p`, which must lie in `[-1, 1]³`.
pub fn analytic_sdf(obj: &ObjectParams, p: Vec3) -> Result<f64> {
    if p.iter().any(|c| c.abs() > 1.0 || !c.is_finite()) {
        return Err(Error::domain(format!("query point {p:?} outside [-1,1]^3")));
    }
    Ok(obj.sdf_world(p))
}

/// Polynomial smooth minimum with blend radius `k`.
pub fn smooth_min(a: f64, b: f64, k: f64) -> f64 {
    let h = (0.5 + 0.5 * (b - a) / k).clamp(0.0, 1.0);
    b + (a - b) * h - k * h * (1.0 - h)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Finger {
    pub base: Vec3,
    pub tip: Vec3,
    pub radius: f64,
}

fn segment_sdf(p: Vec3, a: Vec3, b: Vec3, r: f64) -> f64 {
    let pa = geom::sub(p, a);
    let ba = geom::sub(b, a);
    let h = (geom::dot(pa, ba) / geom::dot(ba, ba)).clamp(0.0, 1.0);
    geom::norm(geom::sub(pa, geom::scale(ba, h))) - r
}

/// Blob hand: a palm ellipsoid-ish sphere with capsule fingers, blended smoothly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Occluder {
    pub palm_center: Vec3,
    pub palm_radius: f64,
    pub fingers: Vec<Finger>,
}

const OCCLUDER_BLEND: f64 = 0.04;

impl Occluder {
    /// Hand of overall size `size` centered at `center`, fingers spread toward
    /// `direction` (radians in the image plane) with per-finger curl.
    pub fn articulated(center: Vec3, size: f64, direction: f64, curls: &[f64]) -> Self {
        let palm_radius = 0.55 * size;
        let mut fingers = Vec::with_capacity(curls.len());
        let n = curls.len().max(1) as f64;
        for (i, curl) in curls.iter().enumerate() {
            let spread = (i as f64 - (n - 1.0) / 2.0) * 0.35;
            let ang = direction + spread;
            let dir = [ang.cos(), ang.sin(), 0.0];
            let base = geom::add(center, geom::scale(dir, 0.8 * palm_radius));
            let len = size * (0.9 - 0.35 * curl);
            let bent = geom::normalize([dir[0], dir[1], -1.2 * curl]);
            let tip = geom::add(base, geom::scale(bent, len));
            fingers.push(Finger {
                base,
                tip,
                radius: 0.16 * size,
            });
        }
        Occluder {
            palm_center: center,
            palm_radius,
            fingers,
        }
    }

    pub fn sdf(&self, p: Vec3) -> f64 {
        let mut d = geom::norm(geom::sub(p, self.palm_center)) - self.palm_radius;
        for f in &self.fingers {
            d = smooth_min(d, segment_sdf(p, f.base, f.tip, f.radius), OCCLUDER_BLEND);
        }
        d
    }

    pub fn bounding_sphere(&self) -> (Vec3, f64) {
        let mut r = self.palm_radius;
        for f in &self.fingers {
            let a = geom::norm(geom::sub(f.base, self.palm_center)) + f.radius;
            let b = geom::norm(geom::sub(f.tip, self.palm_center)) + f.radius;
            r = r.max(a).max(b);
        }
        (self.palm_center, r + OCCLUDER_BLEND)
    }

    /// Copy moved by `delta`.
    pub fn translated(&self, delta: Vec3) -> Self {
        Occluder {
            palm_center: geom::add(self.palm_center, delta),
            palm_radius: self.palm_radius,
            fingers: self
                .fingers
                .iter()
                .map(|f| Finger {
                    base: geom::add(f.base, delta),
                    tip: geom::add(f.tip, delta),
                    radius: f.radius,
                })
                .collect(),
        }
    }
}
