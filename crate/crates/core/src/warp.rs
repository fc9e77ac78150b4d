//! Spatial-transformer warping with trilinear interpolation and its analytic
//! backward pass, plus field resampling between grids.
//!
//! Sample coordinates outside the grid are clamped to the border (replicate).
//! In a clamped axis the interpolant is locally constant, so its derivative
//! there is zero.

use crate::error::{OfgError, Result};
use crate::volume::{DisplacementField, Grid, LabelVolume, ScalarVolume};

/// Trilinear sample location: lower corner, fractional offsets and which
/// axes hit the border clamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Sample {
    base: [usize; 3],
    frac: [f64; 3],
    clamped: [bool; 3],
}

impl Sample {
    #[inline]
    pub(crate) fn at(dims: [usize; 3], p: [f64; 3]) -> Self {
        let mut base = [0; 3];
        let mut frac = [0.0; 3];
        let mut clamped = [false; 3];
        for a in 0..3 {
            let hi = (dims[a] - 1) as f64;
            let mut x = p[a];
            if x < 0.0 {
                x = 0.0;
                clamped[a] = true;
            } else if x > hi {
                x = hi;
                clamped[a] = true;
            }
            let b = (x.floor() as usize).min(dims[a] - 2);
            base[a] = b;
            frac[a] = x - b as f64;
        }
        Sample {
            base,
            frac,
            clamped,
        }
    }

    /// Corner weights in order `c = dx + 2 dy + 4 dz`.
    #[inline]
    pub(crate) fn weights(&self) -> [f64; 8] {
        let [fx, fy, fz] = self.frac;
        let wx = [1.0 - fx, fx];
        let wy = [1.0 - fy, fy];
        let wz = [1.0 - fz, fz];
        std::array::from_fn(|c| wx[c & 1] * wy[(c >> 1) & 1] * wz[c >> 2])
    }

    #[inline]
    fn corners(&self, dims: [usize; 3]) -> [usize; 8] {
        let [bx, by, bz] = self.base;
        let (sx, sy) = (dims[0], dims[0] * dims[1]);
        let o = bx + sx * by + sy * bz;
        [
            o,
            o + 1,
            o + sx,
            o + sx + 1,
            o + sy,
            o + sy + 1,
            o + sy + sx,
            o + sy + sx + 1,
        ]
    }

    #[inline]
    pub(crate) fn interpolate(&self, dims: [usize; 3], value: impl Fn(usize) -> f64) -> f64 {
        let w = self.weights();
        let c = self.corners(dims);
        (0..8).map(|n| w[n] * value(c[n])).sum()
    }

    /// Derivative of the interpolant with respect to the sample coordinate.
    #[inline]
    fn gradient(&self, dims: [usize; 3], value: impl Fn(usize) -> f64) -> [f64; 3] {
        let c = self.corners(dims);
        let v: [f64; 8] = std::array::from_fn(|n| value(c[n]));
        let [fx, fy, fz] = self.frac;
        let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
        let dx = gy * gz * (v[1] - v[0])
            + fy * gz * (v[3] - v[2])
            + gy * fz * (v[5] - v[4])
            + fy * fz * (v[7] - v[6]);
        let dy = gx * gz * (v[2] - v[0])
            + fx * gz * (v[3] - v[1])
            + gx * fz * (v[6] - v[4])
            + fx * fz * (v[7] - v[5]);
        let dz = gx * gy * (v[4] - v[0])
            + fx * gy * (v[5] - v[1])
            + gx * fy * (v[6] - v[2])
            + fx * fy * (v[7] - v[3]);
        let mut g = [dx, dy, dz];
        for (x, &c) in g.iter_mut().zip(&self.clamped) {
            if c {
                *x = 0.0;
            }
        }
        g
    }
}

/// Sample positions recorded by a forward warp, reused by the backward pass.
#[derive(Debug, Clone)]
pub struct WarpCache {
    grid: Grid,
    samples: Vec<Sample>,
}

impl WarpCache {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// The 8 trilinear corner weights used at `voxel`.
    pub fn weights(&self, voxel: usize) -> [f64; 8] {
        self.samples[voxel].weights()
    }

    /// Sample coordinate after border clamping.
    pub fn sample_coord(&self, voxel: usize) -> [f64; 3] {
        let s = &self.samples[voxel];
        std::array::from_fn(|a| s.base[a] as f64 + s.frac[a])
    }

    pub fn is_clamped(&self, voxel: usize) -> [bool; 3] {
        self.samples[voxel].clamped
    }
}

pub fn identity_field(grid: Grid) -> DisplacementField {
    DisplacementField::zeros(grid)
}

pub(crate) fn warp_f64(grid: &Grid, moving: &[f64], field: &[[f64; 3]]) -> (Vec<f64>, WarpCache) {
    let dims = grid.dims();
    let mut out = Vec::with_capacity(grid.len());
    let mut samples = Vec::with_capacity(grid.len());
    for (idx, [i, j, k]) in grid.voxels().enumerate() {
        let u = field[idx];
        let s = Sample::at(dims, [i as f64 + u[0], j as f64 + u[1], k as f64 + u[2]]);
        out.push(s.interpolate(dims, |n| moving[n]));
        samples.push(s);
    }
    (
        out,
        WarpCache {
            grid: *grid,
            samples,
        },
    )
}

/// Resamples `moving` at `x + u(x)` for every voxel `x`.
pub fn warp_trilinear(
    moving: &ScalarVolume,
    field: &DisplacementField,
) -> Result<(ScalarVolume, WarpCache)> {
    moving.grid().ensure_same(field.grid())?;
    let (out, cache) = warp_f64(moving.grid(), &moving.to_f64(), &field.to_f64());
    Ok((ScalarVolume::from_f64(*moving.grid(), &out)?, cache))
}

pub(crate) fn warp_backward_f64(
    moving: &[f64],
    cache: &WarpCache,
    upstream: &[f64],
) -> Vec<[f64; 3]> {
    let dims = cache.grid.dims();
    cache
        .samples
        .iter()
        .zip(upstream)
        .map(|(s, &up)| {
            if up == 0.0 {
                return [0.0; 3];
            }
            let g = s.gradient(dims, |n| moving[n]);
            [up * g[0], up * g[1], up * g[2]]
        })
        .collect()
}

/// Gradient of a loss with respect to the displacement field, given the
/// loss gradient `upstream` with respect to the warped image.
pub fn warp_backward(
    moving: &ScalarVolume,
    cache: &WarpCache,
    upstream: &ScalarVolume,
) -> Result<DisplacementField> {
    moving.grid().ensure_same(&cache.grid)?;
    upstream.grid().ensure_same(&cache.grid)?;
    let g = warp_backward_f64(&moving.to_f64(), cache, &upstream.to_f64());
    DisplacementField::from_f64(cache.grid, &g)
}

/// Nearest-neighbour label warp: `out(x) = labels[floor(x + u(x) + 0.5)]`,
/// clamped to the grid.
pub fn warp_nearest(labels: &LabelVolume, field: &DisplacementField) -> Result<LabelVolume> {
    labels.grid().ensure_same(field.grid())?;
    let grid = *labels.grid();
    let dims = grid.dims();
    let src = labels.data();
    let data = grid
        .voxels()
        .zip(field.data())
        .map(|(x, u)| {
            let q: [usize; 3] = std::array::from_fn(|a| {
                let r = (x[a] as f64 + u[a] as f64 + 0.5).floor();
                r.clamp(0.0, (dims[a] - 1) as f64) as usize
            });
            src[grid.index(q[0], q[1], q[2])]
        })
        .collect();
    LabelVolume::new(grid, data)
}

/// Position in a source grid of a target voxel, using corner-aligned
/// normalized coordinates.
fn source_position(src: [usize; 3], dst: [usize; 3], x: [usize; 3]) -> [f64; 3] {
    std::array::from_fn(|a| {
        if dst[a] == 1 {
            0.0
        } else {
            x[a] as f64 * (src[a] - 1) as f64 / (dst[a] - 1) as f64
        }
    })
}

/// Trilinear resampling of an image onto `target` (corner-aligned).
pub fn resample_volume(v: &ScalarVolume, target: Grid) -> Result<ScalarVolume> {
    let (src, dst) = (v.grid().dims(), target.dims());
    let data = v.data();
    let out: Vec<f64> = target
        .voxels()
        .map(|x| Sample::at(src, source_position(src, dst, x)).interpolate(src, |n| data[n] as f64))
        .collect();
    ScalarVolume::from_f64(target, &out)
}

/// Resamples a displacement field onto `target`, rescaling each component so
/// displacements stay in target voxel units.
pub fn resample_field(field: &DisplacementField, target: Grid) -> Result<DisplacementField> {
    let (src, dst) = (field.grid().dims(), target.dims());
    if src == dst {
        return Ok(field.clone());
    }
    let scale: [f64; 3] = std::array::from_fn(|a| (dst[a] - 1) as f64 / (src[a] - 1) as f64);
    let data = field.data();
    let out: Vec<[f64; 3]> = target
        .voxels()
        .map(|x| {
            let s = Sample::at(src, source_position(src, dst, x));
            std::array::from_fn(|c| s.interpolate(src, |n| data[n][c] as f64) * scale[c])
        })
        .collect();
    DisplacementField::from_f64(target, &out)
}

/// Fixed-point inverse of a displacement field: finds `v` with
/// `v(x) = -u(x + v(x))`, so that warping by `u` then by `v` is close to the
/// identity. Converges for fields whose Jacobian stays well away from zero.
pub fn invert_field(field: &DisplacementField, iterations: usize) -> DisplacementField {
    let grid = *field.grid();
    let dims = grid.dims();
    let u = field.to_f64();
    let mut v = vec![[0.0f64; 3]; grid.len()];
    for _ in 0..iterations {
        v = grid
            .voxels()
            .zip(&v)
            .map(|(x, vx)| {
                let s = Sample::at(dims, std::array::from_fn(|a| x[a] as f64 + vx[a]));
                std::array::from_fn(|c| -s.interpolate(dims, |n| u[n][c]))
            })
            .collect();
    }
    DisplacementField::from_f64(grid, &v).expect("inverse of a finite field is finite")
}

pub(crate) fn ensure_min_dims(grid: &Grid, min: usize, what: &str) -> Result<()> {
    if grid.dims().iter().any(|&d| d < min) {
        return Err(OfgError::InvalidGrid(format!(
            "{what} requires every dimension >= {min}, got {:?}",
            grid.dims()
        )));
    }
    Ok(())
}
