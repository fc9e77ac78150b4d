//! Instance-optimization energy: image similarity (windowed squared NCC or
//! MSE) plus an L2 penalty on forward differences of the displacement, with
//! analytic gradients. Also hosts the field-MSE supervision loss.
//!
//! All reductions accumulate in `f64` in a fixed sequential order.

use crate::error::{OfgError, Result};
use crate::volume::{DisplacementField, Grid, ScalarVolume};
use crate::warp::{warp_backward_f64, warp_f64};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Similarity {
    Ncc,
    Mse,
}

impl std::str::FromStr for Similarity {
    type Err = OfgError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ncc" => Ok(Similarity::Ncc),
            "mse" => Ok(Similarity::Mse),
            other => Err(OfgError::InvalidConfig(format!(
                "unknown similarity '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyConfig {
    pub similarity: Similarity,
    /// Edge length of the cubic NCC window (odd).
    pub ncc_window: usize,
    /// Weight of the smoothness term.
    pub reg_weight: f64,
    pub ncc_epsilon: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            similarity: Similarity::Ncc,
            ncc_window: 9,
            reg_weight: 1.0,
            ncc_epsilon: 1e-5,
        }
    }
}

impl EnergyConfig {
    /// Defaults for grids of 32^3 and below (5^3 window).
    pub fn desk() -> Self {
        Self {
            ncc_window: 5,
            ..Self::default()
        }
    }

    pub fn validate(&self, grid: &Grid) -> Result<()> {
        if self.ncc_window < 3 || self.ncc_window.is_multiple_of(2) {
            return Err(OfgError::InvalidConfig(format!(
                "ncc window must be odd and >= 3, got {}",
                self.ncc_window
            )));
        }
        let min_dim = grid.dims().into_iter().min().unwrap_or(0);
        if self.similarity == Similarity::Ncc && self.ncc_window > min_dim {
            return Err(OfgError::InvalidConfig(format!(
                "ncc window {} exceeds smallest grid dimension {min_dim}",
                self.ncc_window
            )));
        }
        if !(self.reg_weight >= 0.0 && self.reg_weight.is_finite()) {
            return Err(OfgError::InvalidConfig(format!(
                "reg weight must be finite and >= 0, got {}",
                self.reg_weight
            )));
        }
        if !(self.ncc_epsilon > 0.0 && self.ncc_epsilon.is_finite()) {
            return Err(OfgError::InvalidConfig(format!(
                "ncc epsilon must be positive, got {}",
                self.ncc_epsilon
            )));
        }
        Ok(())
    }

    fn radius(&self) -> usize {
        self.ncc_window / 2
    }
}

/// Sum over the centered `(2r+1)^3` box, clipped at the grid boundary.
pub(crate) fn box_sum(dims: [usize; 3], data: &[f64], r: usize) -> Vec<f64> {
    let mut cur = data.to_vec();
    let mut out = vec![0.0; cur.len()];
    let mut acc = Vec::new();
    for axis in 0..3 {
        // View the volume as [outer][n][inner] with `inner` contiguous and
        // slide a running window sum along `n`.
        let n = dims[axis];
        let inner: usize = dims[..axis].iter().product();
        let first = r.min(n - 1);
        for (src, dst) in cur
            .chunks_exact(n * inner)
            .zip(out.chunks_exact_mut(n * inner))
        {
            if inner == 1 {
                let mut a: f64 = src[..=first].iter().sum();
                for t in 0..n {
                    dst[t] = a;
                    if t + r + 1 < n {
                        a += src[t + r + 1];
                    }
                    if t >= r {
                        a -= src[t - r];
                    }
                }
                continue;
            }
            let row = |t: usize| &src[t * inner..(t + 1) * inner];
            acc.clear();
            acc.resize(inner, 0.0);
            for t in 0..=first {
                acc.iter_mut().zip(row(t)).for_each(|(a, &b)| *a += b);
            }
            for t in 0..n {
                dst[t * inner..(t + 1) * inner].copy_from_slice(&acc);
                if t + r + 1 < n {
                    acc.iter_mut()
                        .zip(row(t + r + 1))
                        .for_each(|(a, &b)| *a += b);
                }
                if t >= r {
                    acc.iter_mut().zip(row(t - r)).for_each(|(a, &b)| *a -= b);
                }
            }
        }
        std::mem::swap(&mut cur, &mut out);
    }
    cur
}

fn window_counts(grid: &Grid, r: usize) -> Vec<f64> {
    let dims = grid.dims();
    let extent = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|t| ((t + r).min(n - 1) - t.saturating_sub(r) + 1) as f64)
            .collect()
    };
    let [ex, ey, ez] = [extent(dims[0]), extent(dims[1]), extent(dims[2])];
    let mut out = Vec::with_capacity(grid.len());
    for z in &ez {
        for y in &ey {
            out.extend(ex.iter().map(|x| x * y * z));
        }
    }
    out
}

/// Per-voxel window statistics shared by the NCC value and its gradient.
struct NccWindows {
    map: Vec<f64>,
    // d cc / d w_q = alpha (f_q - fbar) - beta (w_q - wbar), summed over windows.
    alpha: Vec<f64>,
    beta: Vec<f64>,
    mean_f: Vec<f64>,
    mean_w: Vec<f64>,
}

fn ncc_windows(
    grid: &Grid,
    f: &[f64],
    w: &[f64],
    r: usize,
    eps: f64,
    with_grad: bool,
) -> NccWindows {
    let dims = grid.dims();
    let n = window_counts(grid, r);
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<_>>();
    let sf = box_sum(dims, f, r);
    let sw = box_sum(dims, w, r);
    let sff = box_sum(dims, &sq(f, f), r);
    let sww = box_sum(dims, &sq(w, w), r);
    let sfw = box_sum(dims, &sq(f, w), r);
    let len = grid.len();
    let mut out = NccWindows {
        map: Vec::with_capacity(len),
        alpha: Vec::new(),
        beta: Vec::new(),
        mean_f: Vec::new(),
        mean_w: Vec::new(),
    };
    if with_grad {
        out.alpha.reserve(len);
        out.beta.reserve(len);
        out.mean_f.reserve(len);
        out.mean_w.reserve(len);
    }
    for p in 0..len {
        let (mf, mw) = (sf[p] / n[p], sw[p] / n[p]);
        let cross = sfw[p] - sf[p] * mw;
        let var_f = sff[p] - sf[p] * mf;
        let var_w = sww[p] - sw[p] * mw;
        let denom = var_f * var_w + eps;
        out.map.push(cross * cross / denom);
        if with_grad {
            out.alpha.push(2.0 * cross / denom);
            out.beta.push(2.0 * cross * cross * var_f / (denom * denom));
            out.mean_f.push(mf);
            out.mean_w.push(mw);
        }
    }
    out
}

pub(crate) fn ncc_mean_f64(
    grid: &Grid,
    f: &[f64],
    w: &[f64],
    cfg: &EnergyConfig,
) -> (f64, Vec<f64>) {
    let win = ncc_windows(grid, f, w, cfg.radius(), cfg.ncc_epsilon, false);
    let mean = win.map.iter().sum::<f64>() / grid.len() as f64;
    (mean, win.map)
}

/// Mean NCC and the gradient of `-mean NCC` with respect to `w`.
pub(crate) fn ncc_value_grad_f64(
    grid: &Grid,
    f: &[f64],
    w: &[f64],
    cfg: &EnergyConfig,
) -> (f64, Vec<f64>) {
    let r = cfg.radius();
    let dims = grid.dims();
    let win = ncc_windows(grid, f, w, r, cfg.ncc_epsilon, true);
    let mean = win.map.iter().sum::<f64>() / grid.len() as f64;
    // A voxel q lies in the window of p exactly when p lies in the window of
    // q, so the adjoint of the window gather is again a clipped box sum.
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<_>>();
    let b_alpha = box_sum(dims, &win.alpha, r);
    let b_alpha_f = box_sum(dims, &prod(&win.alpha, &win.mean_f), r);
    let b_beta = box_sum(dims, &win.beta, r);
    let b_beta_w = box_sum(dims, &prod(&win.beta, &win.mean_w), r);
    let scale = -1.0 / grid.len() as f64;
    let grad = (0..grid.len())
        .map(|q| scale * (f[q] * b_alpha[q] - b_alpha_f[q] - w[q] * b_beta[q] + b_beta_w[q]))
        .collect();
    (mean, grad)
}

/// Windowed squared NCC: returns the mean over voxels and the per-voxel map.
pub fn local_ncc(
    fixed: &ScalarVolume,
    warped: &ScalarVolume,
    cfg: &EnergyConfig,
) -> Result<(f64, ScalarVolume)> {
    fixed.grid().ensure_same(warped.grid())?;
    EnergyConfig {
        similarity: Similarity::Ncc,
        ..*cfg
    }
    .validate(fixed.grid())?;
    let (mean, map) = ncc_mean_f64(fixed.grid(), &fixed.to_f64(), &warped.to_f64(), cfg);
    Ok((mean, ScalarVolume::from_f64(*fixed.grid(), &map)?))
}

/// Gradient of `-mean NCC` with respect to the warped image.
pub fn ncc_grad(
    fixed: &ScalarVolume,
    warped: &ScalarVolume,
    cfg: &EnergyConfig,
) -> Result<ScalarVolume> {
    fixed.grid().ensure_same(warped.grid())?;
    EnergyConfig {
        similarity: Similarity::Ncc,
        ..*cfg
    }
    .validate(fixed.grid())?;
    let (_, g) = ncc_value_grad_f64(fixed.grid(), &fixed.to_f64(), &warped.to_f64(), cfg);
    ScalarVolume::from_f64(*fixed.grid(), &g)
}

pub(crate) fn mse_f64(f: &[f64], w: &[f64]) -> f64 {
    f.iter().zip(w).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / f.len() as f64
}

pub(crate) fn mse_grad_f64(f: &[f64], w: &[f64]) -> Vec<f64> {
    let s = 2.0 / f.len() as f64;
    f.iter().zip(w).map(|(a, b)| s * (b - a)).collect()
}

pub fn mse_similarity(fixed: &ScalarVolume, warped: &ScalarVolume) -> Result<f64> {
    fixed.grid().ensure_same(warped.grid())?;
    Ok(mse_f64(&fixed.to_f64(), &warped.to_f64()))
}

pub fn mse_similarity_grad(fixed: &ScalarVolume, warped: &ScalarVolume) -> Result<ScalarVolume> {
    fixed.grid().ensure_same(warped.grid())?;
    ScalarVolume::from_f64(
        *fixed.grid(),
        &mse_grad_f64(&fixed.to_f64(), &warped.to_f64()),
    )
}

// Visits every forward-difference pair `(p, p + stride_a)` that stays inside
// the grid.
#[inline]
fn for_each_forward_pair(grid: &Grid, mut f: impl FnMut(usize, usize)) {
    let [nx, ny, nz] = grid.dims();
    let plane = nx * ny;
    for z in 0..nz {
        for y in 0..ny {
            let row = z * plane + y * nx;
            for p in row..row + nx - 1 {
                f(p, p + 1);
            }
            if y + 1 < ny {
                for p in row..row + nx {
                    f(p, p + nx);
                }
            }
            if z + 1 < nz {
                for p in row..row + nx {
                    f(p, p + plane);
                }
            }
        }
    }
}

/// Squared forward differences of every component along every axis, summed
/// and divided by the voxel count.
pub(crate) fn smoothness_f64(grid: &Grid, u: &[[f64; 3]]) -> f64 {
    let mut acc = 0.0;
    for_each_forward_pair(grid, |p, q| {
        for (a, b) in u[q].iter().zip(&u[p]) {
            acc += (a - b) * (a - b);
        }
    });
    acc / grid.len() as f64
}

pub(crate) fn smoothness_grad_f64(grid: &Grid, u: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let s = 2.0 / grid.len() as f64;
    let mut g = vec![[0.0; 3]; grid.len()];
    for_each_forward_pair(grid, |p, q| {
        for c in 0..3 {
            let d = s * (u[q][c] - u[p][c]);
            g[q][c] += d;
            g[p][c] -= d;
        }
    });
    g
}

pub fn smoothness(field: &DisplacementField) -> f64 {
    smoothness_f64(field.grid(), &field.to_f64())
}

pub fn smoothness_grad(field: &DisplacementField) -> DisplacementField {
    let g = smoothness_grad_f64(field.grid(), &field.to_f64());
    DisplacementField::from_f64(*field.grid(), &g).expect("finite field has a finite gradient")
}

/// Inputs of the energy converted once to `f64` so repeated evaluations
/// inside the optimizer avoid re-conversion.
pub(crate) struct EnergyProblem<'a> {
    pub grid: Grid,
    pub fixed: Vec<f64>,
    pub moving: Vec<f64>,
    pub cfg: &'a EnergyConfig,
}

impl<'a> EnergyProblem<'a> {
    pub fn new(fixed: &ScalarVolume, moving: &ScalarVolume, cfg: &'a EnergyConfig) -> Result<Self> {
        fixed.grid().ensure_same(moving.grid())?;
        cfg.validate(fixed.grid())?;
        Ok(Self {
            grid: *fixed.grid(),
            fixed: fixed.to_f64(),
            moving: moving.to_f64(),
            cfg,
        })
    }

    pub fn similarity_loss(&self, warped: &[f64]) -> f64 {
        match self.cfg.similarity {
            Similarity::Ncc => 1.0 - ncc_mean_f64(&self.grid, &self.fixed, warped, self.cfg).0,
            Similarity::Mse => mse_f64(&self.fixed, warped),
        }
    }

    pub fn value(&self, u: &[[f64; 3]]) -> f64 {
        let (warped, _) = warp_f64(&self.grid, &self.moving, u);
        let reg = if self.cfg.reg_weight > 0.0 {
            self.cfg.reg_weight * smoothness_f64(&self.grid, u)
        } else {
            0.0
        };
        self.similarity_loss(&warped) + reg
    }

    pub fn value_and_grad(&self, u: &[[f64; 3]]) -> (f64, Vec<[f64; 3]>) {
        let (warped, cache) = warp_f64(&self.grid, &self.moving, u);
        let (sim, upstream) = match self.cfg.similarity {
            Similarity::Ncc => {
                let (mean, g) = ncc_value_grad_f64(&self.grid, &self.fixed, &warped, self.cfg);
                (1.0 - mean, g)
            }
            Similarity::Mse => (
                mse_f64(&self.fixed, &warped),
                mse_grad_f64(&self.fixed, &warped),
            ),
        };
        let mut grad = warp_backward_f64(&self.moving, &cache, &upstream);
        let lambda = self.cfg.reg_weight;
        if lambda > 0.0 {
            for (g, s) in grad.iter_mut().zip(smoothness_grad_f64(&self.grid, u)) {
                for c in 0..3 {
                    g[c] += lambda * s[c];
                }
            }
            (sim + lambda * smoothness_f64(&self.grid, u), grad)
        } else {
            (sim, grad)
        }
    }
}

/// `D_sim(fixed, moving o (x + u)) + reg_weight * smoothness(u)`, where
/// `D_sim` is `1 - mean NCC` or the MSE.
pub fn energy(
    fixed: &ScalarVolume,
    moving: &ScalarVolume,
    field: &DisplacementField,
    cfg: &EnergyConfig,
) -> Result<f64> {
    fixed.grid().ensure_same(field.grid())?;
    let problem = EnergyProblem::new(fixed, moving, cfg)?;
    Ok(problem.value(&field.to_f64()))
}

/// Gradient of [`energy`] with respect to the displacement field.
pub fn energy_grad(
    fixed: &ScalarVolume,
    moving: &ScalarVolume,
    field: &DisplacementField,
    cfg: &EnergyConfig,
) -> Result<DisplacementField> {
    fixed.grid().ensure_same(field.grid())?;
    let problem = EnergyProblem::new(fixed, moving, cfg)?;
    let (_, g) = problem.value_and_grad(&field.to_f64());
    DisplacementField::from_f64(*field.grid(), &g)
}

/// Mean squared difference over all scalar components.
pub fn field_mse(a: &DisplacementField, b: &DisplacementField) -> Result<f64> {
    a.grid().ensure_same(b.grid())?;
    let sum: f64 = a
        .components()
        .zip(b.components())
        .map(|(x, y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(sum / a.num_components() as f64)
}

pub fn field_mse_grad(a: &DisplacementField, b: &DisplacementField) -> Result<DisplacementField> {
    a.grid().ensure_same(b.grid())?;
    let s = 2.0 / a.num_components() as f64;
    let g: Vec<[f64; 3]> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| std::array::from_fn(|c| s * (x[c] as f64 - y[c] as f64)))
        .collect();
    DisplacementField::from_f64(*a.grid(), &g)
}
