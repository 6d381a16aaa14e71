//! Marching cubes over a regular grid.
//!
//! The triangle table is derived from per-face rules instead of being typed
//! in: on every cube face the sign-changing edges are paired into segments
//! (ambiguous faces keep the inside corners apart), segments are oriented so
//! the inside lies on their left as seen from outside, and the resulting
//! closed loops are fan-triangulated. Two cubes sharing a face always make the
//! same choice there, so the surface is watertight.

use std::collections::HashMap;
use std::sync::OnceLock;

use super::mesh::Mesh;
use super::sdf::SdfGrid;
use crate::geom::{self, Vec3};

pub const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

pub const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 0),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 4),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// Cube faces as cyclic corner lists with their outward normals.
const FACES: [([usize; 4], [f64; 3]); 6] = [
    ([0, 1, 2, 3], [0.0, 0.0, -1.0]),
    ([4, 5, 6, 7], [0.0, 0.0, 1.0]),
    ([0, 1, 5, 4], [0.0, -1.0, 0.0]),
    ([3, 2, 6, 7], [0.0, 1.0, 0.0]),
    ([0, 3, 7, 4], [-1.0, 0.0, 0.0]),
    ([1, 2, 6, 5], [1.0, 0.0, 0.0]),
];

fn edge_between(a: usize, b: usize) -> usize {
    EDGES
        .iter()
        .position(|&(x, y)| (x == a && y == b) || (x == b && y == a))
        .expect("adjacent corners")
}

fn corner_pos(c: usize) -> Vec3 {
    CORNERS[c].map(|v| v as f64)
}

fn edge_mid(e: usize) -> Vec3 {
    let (a, b) = EDGES[e];
    geom::scale(geom::add(corner_pos(a), corner_pos(b)), 0.5)
}

/// Direction from the inside endpoint of a crossing edge to its outside endpoint.
fn edge_outward(e: usize, inside: u8) -> Vec3 {
    let (a, b) = EDGES[e];
    if inside & (1 << a) != 0 {
        geom::sub(corner_pos(b), corner_pos(a))
    } else {
        geom::sub(corner_pos(a), corner_pos(b))
    }
}

fn face_segments(case: u8) -> Vec<(usize, usize)> {
    let inside = |c: usize| case & (1 << c) != 0;
    let mut segs = Vec::new();
    for (corners, normal) in FACES {
        let edges: Vec<usize> = (0..4).map(|i| edge_between(corners[i], corners[(i + 1) % 4])).collect();
        let crossing: Vec<usize> = (0..4)
            .filter(|&i| inside(corners[i]) != inside(corners[(i + 1) % 4]))
            .map(|i| edges[i])
            .collect();
        let pairs: Vec<(usize, usize)> = match crossing.len() {
            0 => vec![],
            2 => vec![(crossing[0], crossing[1])],
            4 => (0..4)
                .filter(|&i| inside(corners[i]))
                .map(|i| (edges[(i + 3) % 4], edges[i]))
                .collect(),
            _ => unreachable!("a face has an even number of crossings"),
        };
        for (a, b) in pairs {
            let out = geom::add(edge_outward(a, case), edge_outward(b, case));
            let t = geom::cross(out, normal);
            if geom::dot(geom::sub(edge_mid(b), edge_mid(a)), t) > 0.0 {
                segs.push((a, b));
            } else {
                segs.push((b, a));
            }
        }
    }
    segs
}

fn case_triangles(case: u8) -> Vec<[usize; 3]> {
    let segs = face_segments(case);
    let next: HashMap<usize, usize> = segs.iter().cloned().collect();
    debug_assert_eq!(next.len(), segs.len());
    let mut used = vec![false; 12];
    let mut tris = Vec::new();
    let mut starts: Vec<usize> = next.keys().cloned().collect();
    starts.sort_unstable();
    for start in starts {
        if used[start] {
            continue;
        }
        let mut lp = vec![start];
        used[start] = true;
        let mut e = next[&start];
        while e != start {
            used[e] = true;
            lp.push(e);
            e = next[&e];
        }
        for i in 1..lp.len() - 1 {
            tris.push([lp[0], lp[i], lp[i + 1]]);
        }
    }
    tris
}

/// Triangles (as cube-edge triples) for each of the 256 corner sign cases.
/// Bit `c` of the case index is set when corner `c` is inside.
pub fn triangle_table() -> &'static [Vec<[usize; 3]>] {
    static TABLE: OnceLock<Vec<Vec<[usize; 3]>>> = OnceLock::new();
    TABLE.get_or_init(|| (0..=255u8).map(case_triangles).collect())
}

/// Bitmask of the edges crossing the surface for each case.
pub fn edge_mask(case: u8) -> u16 {
    let mut m = 0u16;
    for (e, &(a, b)) in EDGES.iter().enumerate() {
        if (case >> a) & 1 != (case >> b) & 1 {
            m |= 1 << e;
        }
    }
    m
}

const MIN_TRIANGLE_AREA: f64 = 1e-12;

/// Extracts the zero level set. Values below zero count as inside.
pub fn marching_cubes(grid: &SdfGrid) -> Mesh {
    let r = grid.resolution();
    let table = triangle_table();
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut index: HashMap<(usize, usize), usize> = HashMap::new();
    let mut triangles: Vec<[usize; 3]> = Vec::new();
    let gid = |i: usize, j: usize, k: usize| (i * r + j) * r + k;
    for i in 0..r - 1 {
        for j in 0..r - 1 {
            for k in 0..r - 1 {
                let mut case = 0u8;
                let mut vals = [0.0; 8];
                let mut ids = [0usize; 8];
                for (c, off) in CORNERS.iter().enumerate() {
                    let id = gid(i + off[0], j + off[1], k + off[2]);
                    ids[c] = id;
                    vals[c] = grid.values()[id];
                    if vals[c] < 0.0 {
                        case |= 1 << c;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                let mut vid = |e: usize| -> usize {
                    let (a, b) = EDGES[e];
                    let key = (ids[a].min(ids[b]), ids[a].max(ids[b]));
                    *index.entry(key).or_insert_with(|| {
                        let pa = grid.point_of(ids[a]);
                        let pb = grid.point_of(ids[b]);
                        let t = (vals[a] / (vals[a] - vals[b])).clamp(0.0, 1.0);
                        vertices.push(geom::add(pa, geom::scale(geom::sub(pb, pa), t)));
                        vertices.len() - 1
                    })
                };
                for tri in &table[case as usize] {
                    triangles.push([vid(tri[0]), vid(tri[1]), vid(tri[2])]);
                }
            }
        }
    }
    triangles.retain(|t| {
        let [a, b, c] = t.map(|i| vertices[i]);
        geom::norm(geom::cross(geom::sub(b, a), geom::sub(c, a))) * 0.5 > MIN_TRIANGLE_AREA
    });
    Mesh::from_triangles(vertices, triangles)
}
