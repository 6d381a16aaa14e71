//! Regular SDF grids over `[-1, 1]³` and the positional encoding of query points.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::Vec3;

pub const EXTENT: (f64, f64) = (-1.0, 1.0);
/// Largest distance inside the extent; grid values are clamped to it.
pub const MAX_ABS_SDF: f64 = 2.0 * 1.732_050_807_568_877_2;
const GRID_MAGIC: &[u8; 8] = b"SDFGRID1";

/// `[p, sin(ω_k p), cos(ω_k p)]` with `ω_k = 2^{k/2} · π/2`.
pub fn positional_encoding(p: Vec3, num_freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(encoding_len(num_freqs));
    out.extend_from_slice(&p);
    for k in 0..num_freqs {
        let w = 2f64.powf(k as f64 / 2.0) * std::f64::consts::FRAC_PI_2;
        for c in p {
            out.push((w * c).sin());
        }
        for c in p {
            out.push((w * c).cos());
        }
    }
    out
}

pub fn encoding_len(num_freqs: usize) -> usize {
    3 + 6 * num_freqs
}

pub fn check_in_extent(p: Vec3) -> Result<()> {
    if p.iter().all(|c| c.is_finite() && c.abs() <= 1.0) {
        Ok(())
    } else {
        Err(Error::domain(format!("query point {p:?} outside [-1,1]^3")))
    }
}

/// Coordinate of grid index `i` along one axis.
pub fn grid_coord(i: usize, resolution: usize) -> f64 {
    EXTENT.0 + (EXTENT.1 - EXTENT.0) * i as f64 / (resolution - 1) as f64
}

/// Signed distances sampled at `R³` points, index `(i·R + j)·R + k` for `(x_i, y_j, z_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SdfGrid {
    resolution: usize,
    values: Vec<f64>,
}

impl SdfGrid {
    pub fn new(resolution: usize, values: Vec<f64>) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::domain(format!("grid resolution {resolution} < 2")));
        }
        if values.len() != resolution.pow(3) {
            return Err(Error::dim("sdf grid", &[resolution; 3], &[values.len()]));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("non-finite grid value"));
        }
        let values = values.into_iter().map(|v| v.clamp(-MAX_ABS_SDF, MAX_ABS_SDF)).collect();
        Ok(SdfGrid { resolution, values })
    }

    /// Samples `f` at every grid point, in parallel.
    pub fn from_fn(resolution: usize, f: impl Fn(Vec3) -> f64 + Sync) -> Result<Self> {
        let values = grid_points(resolution).into_par_iter().map(&f).collect();
        SdfGrid::new(resolution, values)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn point(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let r = self.resolution;
        [grid_coord(i, r), grid_coord(j, r), grid_coord(k, r)]
    }

    pub fn point_of(&self, id: usize) -> Vec3 {
        let r = self.resolution;
        self.point(id / (r * r), (id / r) % r, id % r)
    }

    /// Spacing between adjacent grid points.
    pub fn cell_size(&self) -> f64 {
        (EXTENT.1 - EXTENT.0) / (self.resolution - 1) as f64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 8 * self.values.len());
        out.extend_from_slice(GRID_MAGIC);
        out.extend_from_slice(&(self.resolution as u64).to_le_bytes());
        out.extend_from_slice(&EXTENT.0.to_le_bytes());
        out.extend_from_slice(&EXTENT.1.to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format {
            line: 0,
            message: format!("sdf grid: {m}"),
        };
        if bytes.len() < 32 || &bytes[..8] != GRID_MAGIC {
            return Err(bad("missing header"));
        }
        let word = |i: usize| <[u8; 8]>::try_from(&bytes[i..i + 8]).unwrap();
        let r = u64::from_le_bytes(word(8)) as usize;
        if f64::from_le_bytes(word(16)) != EXTENT.0 || f64::from_le_bytes(word(24)) != EXTENT.1 {
            return Err(bad("unsupported extent"));
        }
        let body = &bytes[32..];
        if r.checked_pow(3).and_then(|n| n.checked_mul(8)) != Some(body.len()) {
            return Err(bad("body length does not match resolution"));
        }
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        SdfGrid::new(r, values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        SdfGrid::from_bytes(&bytes)
    }
}

/// All grid points in storage order.
pub fn grid_points(resolution: usize) -> Vec<Vec3> {
    let mut pts = Vec::with_capacity(resolution.pow(3));
    for i in 0..resolution {
        for j in 0..resolution {
            for k in 0..resolution {
                pts.push([
                    grid_coord(i, resolution),
                    grid_coord(j, resolution),
                    grid_coord(k, resolution),
                ]);
            }
        }
    }
    pts
}

/// Centers of the `n³` cells partitioning the extent.
pub fn cell_centers(n: usize) -> Vec<Vec3> {
    let h = (EXTENT.1 - EXTENT.0) / n as f64;
    let c = |i: usize| EXTENT.0 + (i as f64 + 0.5) * h;
    let mut pts = Vec::with_capacity(n.pow(3));
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                pts.push([c(i), c(j), c(k)]);
            }
        }
    }
    pts
}
