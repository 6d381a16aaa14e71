//! Orthographic sphere-traced renders of object + occluder scenes.
//!
//! The camera looks down `-z` of its own frame; view `v` is the world
//! rotated about `y` by [`view_yaw`]. Pixel `(row, col)` covers the square
//! `[-1, 1]²` with `+y` up.

use super::shapes::{ObjectParams, Occluder};
use crate::geom::{self, Mat3, Vec3};
use crate::image::{pixel_center, ImageTensor, IMAGE_SIZE};

pub const VIEW_STEP_DEG: f64 = 20.0;
pub const OCCLUDER_ALBEDO: [f64; 3] = [0.87, 0.67, 0.53];
pub const AMBIENT: f64 = 0.3;

const HIT_EPS: f64 = 1e-4;
const MAX_STEPS: usize = 256;

pub fn light_dir() -> Vec3 {
    geom::normalize([-0.35, 0.5, 1.0])
}

/// Lambertian shade of `albedo` for unit normal `n`.
pub fn shade(albedo: [f64; 3], n: Vec3) -> [f64; 3] {
    let k = AMBIENT + (1.0 - AMBIENT) * geom::dot(n, light_dir()).max(0.0);
    albedo.map(|a| (a * k).clamp(0.0, 1.0))
}

/// Camera yaw of `view_id` among `num_views` views, spread symmetrically about 0.
pub fn view_yaw(view_id: usize, num_views: usize) -> f64 {
    let offset = view_id as f64 - (num_views.max(1) as f64 - 1.0) / 2.0;
    (offset * VIEW_STEP_DEG).to_radians()
}

/// World ← camera rotation of a view.
pub fn view_rotation(view_id: usize, num_views: usize) -> Mat3 {
    geom::rot_y(view_yaw(view_id, num_views))
}

/// Signed distance field expressed in a camera frame, with a bounding sphere.
pub trait CameraSdf {
    fn sdf(&self, p: Vec3) -> f64;
    fn bounds(&self) -> (Vec3, f64);
}

pub struct ObjectInView<'a> {
    pub object: &'a ObjectParams,
    pub rotation: Mat3,
}

impl CameraSdf for ObjectInView<'_> {
    fn sdf(&self, p: Vec3) -> f64 {
        self.object.sdf_world(geom::mat_vec(&self.rotation, p))
    }

    fn bounds(&self) -> (Vec3, f64) {
        (
            geom::mat_t_vec(&self.rotation, self.object.pose.center),
            self.object.bounding_radius() + 1e-3,
        )
    }
}

pub struct OccluderInView<'a> {
    pub occluder: &'a Occluder,
    pub rotation: Mat3,
}

impl CameraSdf for OccluderInView<'_> {
    fn sdf(&self, p: Vec3) -> f64 {
        self.occluder.sdf(geom::mat_vec(&self.rotation, p))
    }

    fn bounds(&self) -> (Vec3, f64) {
        let (c, r) = self.occluder.bounding_sphere();
        (geom::mat_t_vec(&self.rotation, c), r + 1e-3)
    }
}

/// Sphere-traces the ray through `(x, y)` toward `-z`; returns the hit depth.
pub fn trace<S: CameraSdf + ?Sized>(s: &S, x: f64, y: f64) -> Option<f64> {
    let (c, r) = s.bounds();
    let d2 = (x - c[0]).powi(2) + (y - c[1]).powi(2);
    if d2 >= r * r {
        return None;
    }
    let h = (r * r - d2).sqrt();
    let mut z = c[2] + h;
    let z_end = c[2] - h;
    for _ in 0..MAX_STEPS {
        let d = s.sdf([x, y, z]);
        if d < HIT_EPS {
            return Some(z);
        }
        z -= d;
        if z < z_end {
            return None;
        }
    }
    None
}

/// Central-difference unit normal.
pub fn sdf_normal<S: CameraSdf + ?Sized>(s: &S, p: Vec3) -> Vec3 {
    let e = 1e-4;
    let dx = s.sdf([p[0] + e, p[1], p[2]]) - s.sdf([p[0] - e, p[1], p[2]]);
    let dy = s.sdf([p[0], p[1] + e, p[2]]) - s.sdf([p[0], p[1] - e, p[2]]);
    let dz = s.sdf([p[0], p[1], p[2] + e]) - s.sdf([p[0], p[1], p[2] - e]);
    geom::normalize([dx, dy, dz])
}

/// Everything one render pass produces.
#[derive(Clone, Debug)]
pub struct SceneRender {
    /// Object with the occluder in front of it.
    pub image: ImageTensor,
    /// Object alone.
    pub clean_image: ImageTensor,
    /// Pixels covered by the object silhouette (occlusion-free).
    pub object_mask: Vec<bool>,
    /// Pixels where the occluder is the visible surface.
    pub occluder_mask: Vec<bool>,
    /// Object pixels hidden by the occluder.
    pub occluded_mask: Vec<bool>,
}

impl SceneRender {
    pub fn occlusion_ratio(&self) -> f64 {
        let total = self.object_mask.iter().filter(|m| **m).count();
        if total == 0 {
            return 0.0;
        }
        let hidden = self.occluded_mask.iter().filter(|m| **m).count();
        hidden as f64 / total as f64
    }
}

pub fn render_scene(object: &ObjectParams, occluder: Option<&Occluder>, rotation: Mat3) -> SceneRender {
    let obj = ObjectInView { object, rotation };
    let occ = occluder.map(|o| OccluderInView {
        occluder: o,
        rotation,
    });
    let n = IMAGE_SIZE * IMAGE_SIZE;
    let mut image = ImageTensor::background();
    let mut clean_image = ImageTensor::background();
    let mut object_mask = vec![false; n];
    let mut occluder_mask = vec![false; n];
    let mut occluded_mask = vec![false; n];
    let albedo = object.class().albedo();
    for row in 0..IMAGE_SIZE {
        for col in 0..IMAGE_SIZE {
            let (x, y) = pixel_center(row, col);
            let i = row * IMAGE_SIZE + col;
            let zo = trace(&obj, x, y);
            let zh = occ.as_ref().and_then(|o| trace(o, x, y));
            if let Some(z) = zo {
                object_mask[i] = true;
                let c = shade(albedo, sdf_normal(&obj, [x, y, z]));
                clean_image.set_pixel(row, col, c);
                image.set_pixel(row, col, c);
            }
            if let (Some(z), Some(o)) = (zh, occ.as_ref()) {
                if zo.is_none_or(|zo| z > zo) {
                    occluder_mask[i] = true;
                    occluded_mask[i] = zo.is_some();
                    image.set_pixel(row, col, shade(OCCLUDER_ALBEDO, sdf_normal(o, [x, y, z])));
                }
            }
        }
    }
    SceneRender {
        image,
        clean_image,
        object_mask,
        occluder_mask,
        occluded_mask,
    }
}

/// Object depth on a strided pixel lattice, for quick occlusion estimates.
pub struct CoarseDepth {
    stride: usize,
    depth: Vec<Option<f64>>,
}

impl CoarseDepth {
    pub fn new(object: &ObjectParams, rotation: Mat3, stride: usize) -> Self {
        let obj = ObjectInView { object, rotation };
        let side = IMAGE_SIZE / stride;
        let mut depth = Vec::with_capacity(side * side);
        for r in 0..side {
            for c in 0..side {
                let (x, y) = pixel_center(r * stride + stride / 2, c * stride + stride / 2);
                depth.push(trace(&obj, x, y));
            }
        }
        CoarseDepth { stride, depth }
    }

    pub fn object_pixels(&self) -> usize {
        self.depth.iter().filter(|d| d.is_some()).count()
    }

    pub fn occlusion_ratio(&self, occluder: &Occluder, rotation: Mat3) -> f64 {
        let occ = OccluderInView { occluder, rotation };
        let side = IMAGE_SIZE / self.stride;
        let mut total = 0usize;
        let mut hidden = 0usize;
        for r in 0..side {
            for c in 0..side {
                let Some(zo) = self.depth[r * side + c] else { continue };
                total += 1;
                let (x, y) = pixel_center(r * self.stride + self.stride / 2, c * self.stride + self.stride / 2);
                if trace(&occ, x, y).is_some_and(|zh| zh > zo) {
                    hidden += 1;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            hidden as f64 / total as f64
        }
    }
}

/// Rough average of the shading factor over a lit surface.
pub fn mean_shading_factor() -> f64 {
    AMBIENT + (1.0 - AMBIENT) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::shapes::{Pose, Primitive};

    fn sphere(r: f64) -> ObjectParams {
        ObjectParams {
            primitive: Primitive::Sphere { radius: r },
            pose: Pose::identity(),
        }
    }

    #[test]
    fn centered_sphere_silhouette() {
        let s = sphere(0.5);
        let r = render_scene(&s, None, geom::rot_y(0.0));
        assert!(!r.clean_image.is_background(112, 112));
        assert!(r.clean_image.is_background(0, 0));
        let frac = r.object_mask.iter().filter(|m| **m).count() as f64 / (IMAGE_SIZE * IMAGE_SIZE) as f64;
        let expected = std::f64::consts::PI * 0.25 / 4.0;
        assert!((frac - expected).abs() / expected < 0.02, "{frac} vs {expected}");
        assert_eq!(r.occlusion_ratio(), 0.0);
        assert_eq!(r.image, r.clean_image);
    }

    #[test]
    fn occluder_in_front_hides_object() {
        let s = sphere(0.5);
        let occ = Occluder::articulated([0.0, 0.0, 0.9], 0.3, 0.0, &[0.0, 0.0]);
        let r = render_scene(&s, Some(&occ), geom::rot_y(0.0));
        let ratio = r.occlusion_ratio();
        assert!(ratio > 0.05 && ratio < 1.0, "{ratio}");
        let coarse = CoarseDepth::new(&s, geom::rot_y(0.0), 4).occlusion_ratio(&occ, geom::rot_y(0.0));
        assert!((coarse - ratio).abs() < 0.03);
    }

    #[test]
    fn views_are_symmetric() {
        assert_eq!(view_yaw(0, 1), 0.0);
        assert!((view_yaw(0, 2) + view_yaw(1, 2)).abs() < 1e-15);
    }
}
