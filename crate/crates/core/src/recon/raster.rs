//! Orthographic z-buffered rasterization of meshes along `-z`.

use super::mesh::Mesh;
use crate::geom::{self, Vec3};
use crate::image::{pixel_center, ImageTensor, IMAGE_SIZE};
use crate::synth::render::shade;

/// Albedo used when no color estimate is supplied.
pub const DEFAULT_ALBEDO: [f64; 3] = [0.8, 0.8, 0.8];

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub image: ImageTensor,
    /// The mesh was empty and the image is pure background.
    pub empty: bool,
}

pub fn project(mesh: &Mesh) -> Projection {
    project_with_albedo(mesh, DEFAULT_ALBEDO)
}

/// Continuous pixel coordinate (column, row) of a camera-plane point.
fn to_pixel(p: Vec3) -> (f64, f64) {
    let s = IMAGE_SIZE as f64 / 2.0;
    ((p[0] + 1.0) * s - 0.5, (1.0 - p[1]) * s - 0.5)
}

pub fn project_with_albedo(mesh: &Mesh, albedo: [f64; 3]) -> Projection {
    let mut image = ImageTensor::background();
    if mesh.is_empty() {
        return Projection { image, empty: true };
    }
    let n = IMAGE_SIZE * IMAGE_SIZE;
    let mut depth = vec![f64::NEG_INFINITY; n];
    let mut normal = vec![[0.0; 3]; n];
    let verts = mesh.vertices();
    let norms = mesh.normals();
    for t in mesh.triangles() {
        let [a, b, c] = t.map(|i| verts[i]);
        let area = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
        if area == 0.0 {
            continue;
        }
        let cols = [a, b, c].map(|p| to_pixel(p).0);
        let rows = [a, b, c].map(|p| to_pixel(p).1);
        let lo = |v: [f64; 3]| v.iter().cloned().fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let hi = |v: [f64; 3]| {
            (v.iter().cloned().fold(f64::NEG_INFINITY, f64::max).ceil() as isize).clamp(-1, IMAGE_SIZE as isize - 1)
        };
        let (c1, r1) = (hi(cols), hi(rows));
        if c1 < 0 || r1 < 0 {
            continue;
        }
        for row in lo(rows)..=r1 as usize {
            for col in lo(cols)..=c1 as usize {
                let (x, y) = pixel_center(row, col);
                let w0 = ((b[0] - x) * (c[1] - y) - (c[0] - x) * (b[1] - y)) / area;
                let w1 = ((c[0] - x) * (a[1] - y) - (a[0] - x) * (c[1] - y)) / area;
                let w2 = 1.0 - w0 - w1;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let z = w0 * a[2] + w1 * b[2] + w2 * c[2];
                let i = row * IMAGE_SIZE + col;
                if z > depth[i] {
                    depth[i] = z;
                    let [na, nb, nc] = t.map(|k| norms[k]);
                    normal[i] = geom::add(geom::add(geom::scale(na, w0), geom::scale(nb, w1)), geom::scale(nc, w2));
                }
            }
        }
    }
    for i in 0..n {
        if depth[i] > f64::NEG_INFINITY {
            image.set_pixel(i / IMAGE_SIZE, i % IMAGE_SIZE, shade(albedo, geom::normalize(normal[i])));
        }
    }
    Projection { image, empty: false }
}
