//! Finite-difference checks of every hand-written gradient.
//!
//! Each check compares an analytic gradient with 64-bit central differences
//! at a sample of coordinates and reports the worst relative error
//! `|a - n| / max(|a|, |n|, floor)`, where `floor` is a small fraction of the
//! largest analytic component so that near-zero entries do not dominate.

use rand::{seq::index::sample, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{derive_seed, gaussian_smooth};
use crate::energy::{
    field_mse, field_mse_grad, mse_f64, mse_grad_f64, ncc_mean_f64, ncc_value_grad_f64,
    smoothness_f64, smoothness_grad_f64, EnergyConfig, EnergyProblem, Similarity,
};
use crate::error::Result;
use crate::predictor::layers::{conv_backward, conv_forward, ConvShape, Tensor};
use crate::predictor::{Architecture, PredictorParams};
use crate::volume::{DisplacementField, Grid, ScalarVolume};
use crate::warp::{warp_backward_f64, warp_f64};

/// Tolerance for field- and image-level operators evaluated in `f64`.
pub const FIELD_TOLERANCE: f64 = 1e-3;
/// Tolerance for the full predictor, whose forward pass runs in `f32`.
pub const PREDICTOR_TOLERANCE: f64 = 1e-2;

const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub samples: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < self.tolerance
    }
}

struct Worst {
    max: f64,
    samples: usize,
    floor: f64,
}

impl Worst {
    fn new(analytic_scale: f64) -> Self {
        Self {
            max: 0.0,
            samples: 0,
            floor: (FLOOR * analytic_scale).max(1e-300),
        }
    }

    fn add(&mut self, analytic: f64, numeric: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(self.floor);
        let rel = (analytic - numeric).abs() / denom;
        // NaN must not be swallowed by `max`.
        self.max = if rel.is_nan() {
            f64::NAN
        } else {
            self.max.max(rel)
        };
        self.samples += 1;
    }

    fn finish(self, name: &'static str, tolerance: f64) -> CheckResult {
        CheckResult {
            name,
            max_rel_error: self.max,
            tolerance,
            samples: self.samples,
        }
    }
}

fn central(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

/// Fourth-order stencil, for quantities whose gradient is tiny compared with
/// their curvature.
fn central4(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
}

fn max_abs(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn smooth_image(dims: [usize; 3], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..dims.iter().product())
        .map(|_| rng.gen_range(0.0..1.0))
        .collect();
    gaussian_smooth(dims, &raw, 1.0)
}

/// Random field whose sample points stay at least `margin` away from grid
/// lines and from the border, so the trilinear warp is smooth around every
/// probed coordinate.
fn off_lattice_field(grid: &Grid, amp: f64, margin: f64, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let dims = grid.dims();
    grid.voxels()
        .map(|x| {
            std::array::from_fn(|a| loop {
                let u = rng.gen_range(-amp..amp);
                let p = x[a] as f64 + u;
                let frac = p - p.floor();
                let inside = p > margin && p < (dims[a] - 1) as f64 - margin;
                if inside && frac > margin && frac < 1.0 - margin {
                    break u;
                }
            })
        })
        .collect()
}

fn grid8() -> Grid {
    Grid::cube(8).expect("valid grid")
}

fn pick(rng: &mut ChaCha8Rng, len: usize, n: usize) -> Vec<usize> {
    sample(rng, len, n.min(len)).into_vec()
}

/// `L(u) = sum_p r_p * warp(moving, u)_p` against the warp's reverse pass.
pub fn check_warp(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = grid8();
    let moving = smooth_image(g.dims(), &mut rng);
    let r: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let u = off_lattice_field(&g, 2.0, 0.05, &mut rng);
    let loss = |u: &[[f64; 3]]| -> f64 {
        warp_f64(&g, &moving, u)
            .0
            .iter()
            .zip(&r)
            .map(|(a, b)| a * b)
            .sum()
    };
    let (_, cache) = warp_f64(&g, &moving, &u);
    let grad = warp_backward_f64(&moving, &cache, &r);
    let mut worst = Worst::new(max_abs(grad.iter().flatten().copied()));
    for idx in pick(&mut rng, g.len(), 100) {
        for c in 0..3 {
            let fd = central(
                |d| {
                    let mut p = u.clone();
                    p[idx][c] += d;
                    loss(&p)
                },
                1e-5,
            );
            worst.add(grad[idx][c], fd);
        }
    }
    worst.finish("warp_backward", FIELD_TOLERANCE)
}

/// Gradient of `-mean NCC` with respect to the warped image.
pub fn check_ncc(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = grid8();
    let cfg = EnergyConfig::desk();
    let f = smooth_image(g.dims(), &mut rng);
    let w: Vec<f64> = f.iter().map(|v| v + rng.gen_range(-0.2..0.2)).collect();
    let (_, grad) = ncc_value_grad_f64(&g, &f, &w, &cfg);
    let mut worst = Worst::new(max_abs(grad.iter().copied()));
    for q in pick(&mut rng, g.len(), 150) {
        let fd = central4(
            |d| {
                let mut x = w.clone();
                x[q] += d;
                -ncc_mean_f64(&g, &f, &x, &cfg).0
            },
            1e-4,
        );
        worst.add(grad[q], fd);
    }
    worst.finish("ncc_grad", FIELD_TOLERANCE)
}

pub fn check_mse(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = grid8();
    let f = smooth_image(g.dims(), &mut rng);
    let w = smooth_image(g.dims(), &mut rng);
    let grad = mse_grad_f64(&f, &w);
    let mut worst = Worst::new(max_abs(grad.iter().copied()));
    for q in pick(&mut rng, g.len(), 150) {
        let fd = central(
            |d| {
                let mut x = w.clone();
                x[q] += d;
                mse_f64(&f, &x)
            },
            1e-4,
        );
        worst.add(grad[q], fd);
    }
    worst.finish("mse_grad", FIELD_TOLERANCE)
}

pub fn check_smoothness(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Grid::new([6, 7, 8]).expect("valid grid");
    let u: Vec<[f64; 3]> = (0..g.len())
        .map(|_| std::array::from_fn(|_| rng.gen_range(-2.0..2.0)))
        .collect();
    let grad = smoothness_grad_f64(&g, &u);
    let mut worst = Worst::new(max_abs(grad.iter().flatten().copied()));
    for idx in pick(&mut rng, g.len(), 100) {
        for c in 0..3 {
            let fd = central(
                |d| {
                    let mut p = u.clone();
                    p[idx][c] += d;
                    smoothness_f64(&g, &p)
                },
                1e-4,
            );
            worst.add(grad[idx][c], fd);
        }
    }
    worst.finish("smoothness_grad", FIELD_TOLERANCE)
}

pub fn check_field_mse(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = grid8();
    let mut field =
        || DisplacementField::from_fn(g, |_| std::array::from_fn(|_| rng.gen_range(-2.0..2.0)));
    let (a, b) = (field()?, field()?);
    let grad = field_mse_grad(&a, &b)?.to_f64();
    let mut worst = Worst::new(max_abs(grad.iter().flatten().copied()));
    let base = a.to_f64();
    let other = b.to_f64();
    let n = (3 * g.len()) as f64;
    let loss = |u: &[[f64; 3]]| -> f64 {
        u.iter()
            .zip(&other)
            .flat_map(|(x, y)| (0..3).map(move |c| (x[c] - y[c]).powi(2)))
            .sum::<f64>()
            / n
    };
    // Cross-check the library value against the independent sum once.
    let lib = field_mse(&a, &b)?;
    worst.add(lib, loss(&base));
    for idx in pick(&mut rng, g.len(), 100) {
        for c in 0..3 {
            let fd = central(
                |d| {
                    let mut p = base.clone();
                    p[idx][c] += d;
                    loss(&p)
                },
                1e-4,
            );
            worst.add(grad[idx][c], fd);
        }
    }
    Ok(worst.finish("field_mse_grad", FIELD_TOLERANCE))
}

/// Full energy (similarity through the warp plus smoothness) with respect to
/// the displacement field.
pub fn check_energy(seed: u64, similarity: Similarity) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = grid8();
    let cfg = EnergyConfig {
        similarity,
        ..EnergyConfig::desk()
    };
    let fixed = ScalarVolume::from_f64(g, &smooth_image(g.dims(), &mut rng))?;
    let moving = ScalarVolume::from_f64(g, &smooth_image(g.dims(), &mut rng))?;
    let problem = EnergyProblem::new(&fixed, &moving, &cfg)?;
    let u = off_lattice_field(&g, 1.5, 0.05, &mut rng);
    let (_, grad) = problem.value_and_grad(&u);
    let mut worst = Worst::new(max_abs(grad.iter().flatten().copied()));
    for idx in pick(&mut rng, g.len(), 60) {
        for c in 0..3 {
            let fd = central4(
                |d| {
                    let mut p = u.clone();
                    p[idx][c] += d;
                    problem.value(&p)
                },
                1e-5,
            );
            worst.add(grad[idx][c], fd);
        }
    }
    let name = match similarity {
        Similarity::Ncc => "energy_grad_ncc",
        Similarity::Mse => "energy_grad_mse",
    };
    Ok(worst.finish(name, FIELD_TOLERANCE))
}

/// A single 3x3x3 convolution mapping the image pair to a field, trained
/// through `field_mse`, entirely in `f64`.
pub fn check_predictor_toy(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [8; 3];
    let n = dims.iter().product::<usize>();
    let s = ConvShape {
        cin: 2,
        cout: 3,
        kernel: 3,
        stride: 1,
    };
    let mut input = Tensor::<f64>::zeros(2, dims);
    input.data = [smooth_image(dims, &mut rng), smooth_image(dims, &mut rng)].concat();
    let mut params: Vec<f64> = (0..s.weight_len() + s.cout)
        .map(|_| rng.gen_range(-0.3..0.3))
        .collect();
    let target: Vec<f64> = (0..3 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let wl = s.weight_len();
    let loss = |p: &[f64]| -> f64 {
        let out = conv_forward(&input, &p[..wl], &p[wl..], s);
        out.data
            .iter()
            .zip(&target)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / (3 * n) as f64
    };
    let out = conv_forward(&input, &params[..wl], &params[wl..], s);
    let mut gout = Tensor::<f64>::zeros(3, dims);
    for (g, (a, b)) in gout.data.iter_mut().zip(out.data.iter().zip(&target)) {
        *g = 2.0 * (a - b) / (3 * n) as f64;
    }
    let mut gw = vec![0.0; wl];
    let mut gb = vec![0.0; s.cout];
    conv_backward(&input, &params[..wl], &gout, s, &mut gw, &mut gb, false);
    let grad = [gw, gb].concat();
    let mut worst = Worst::new(max_abs(grad.iter().copied()));
    for i in pick(&mut rng, params.len(), 50) {
        let orig = params[i];
        let fd = central(
            |d| {
                let mut p = params.clone();
                p[i] = orig + d;
                loss(&p)
            },
            1e-5,
        );
        worst.add(grad[i], fd);
        params[i] = orig;
    }
    worst.finish("predictor_toy_f64", FIELD_TOLERANCE)
}

/// The default encoder-decoder on a 16^3 pair, loss `field_mse(predict, t)`.
/// The analytic gradient comes from the `f32` forward and reverse passes; the
/// reference differentiates the same network evaluated in `f64`.
pub fn check_predictor(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Grid::cube(16)?;
    let fixed = ScalarVolume::from_f64(g, &smooth_image(g.dims(), &mut rng))?;
    let moving = ScalarVolume::from_f64(g, &smooth_image(g.dims(), &mut rng))?;
    let target =
        DisplacementField::from_fn(g, |_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0)))?;
    let mut params = PredictorParams::init(Architecture::default(), derive_seed(seed, 7))?;
    // Untrained heads are 1e-5 in size; lift them so every layer matters.
    params.scale_head(2e4);
    let (pred, cache) = params.predict(&fixed, &moving)?;
    let grad = params.backward(&cache, &field_mse_grad(&pred, &target)?)?;
    let mut worst = Worst::new(max_abs(grad.iter().map(|&x| x as f64)));
    let values: Vec<f64> = params.values().iter().map(|&v| v as f64).collect();
    let t = target.to_f64();
    let n = t.len() as f64 * 3.0;
    let loss = |v: &[f64]| -> Result<f64> {
        let u = params.predict_f64(&fixed, &moving, v)?;
        Ok(u.iter()
            .zip(&t)
            .flat_map(|(a, b)| (0..3).map(move |c| (a[c] - b[c]).powi(2)))
            .sum::<f64>()
            / n)
    };
    for i in pick(&mut rng, values.len(), 100) {
        let h = 1e-6 * values[i].abs().max(0.1);
        let mut v = values.clone();
        v[i] = values[i] + h;
        let lp = loss(&v)?;
        v[i] = values[i] - h;
        let lm = loss(&v)?;
        worst.add(grad[i] as f64, (lp - lm) / (2.0 * h));
    }
    Ok(worst.finish("predictor_full_f32", PREDICTOR_TOLERANCE))
}

/// Every check, in a fixed order, each on its own derived seed.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let s = |k| derive_seed(seed, k);
    Ok(vec![
        check_warp(s(1)),
        check_ncc(s(2)),
        check_mse(s(3)),
        check_smoothness(s(4)),
        check_field_mse(s(5))?,
        check_energy(s(6), Similarity::Ncc)?,
        check_energy(s(7), Similarity::Mse)?,
        check_predictor_toy(s(8)),
        check_predictor(s(9))?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for seed in [0, 1] {
            for r in run_all(seed).unwrap() {
                assert!(r.passed(), "seed {seed}: {r:?}");
                assert!(r.samples > 0);
            }
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut w = Worst::new(1.0);
        w.add(1.0, 1.1);
        assert!(!w.finish("x", FIELD_TOLERANCE).passed());
        let mut w = Worst::new(1.0);
        w.add(f64::NAN, 1.0);
        assert!(!w.finish("x", FIELD_TOLERANCE).passed());
    }
}
