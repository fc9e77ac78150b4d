use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{OfgError, Result};
use crate::volume::{normalize, DisplacementField, Grid, LabelVolume, ScalarVolume};

/// Voxels kept free between any shape and the grid boundary.
const MARGIN: f64 = 2.0;

/// Nested ellipsoids and boxes with per-shape intensity and label.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub shapes: usize,
    /// Intensity per shape, cycled when shorter than `shapes`.
    pub intensities: Vec<f32>,
    /// Label id per shape, cycled when shorter than `shapes`. Non-zero.
    pub labels: Vec<u16>,
    /// Standard deviation of the Gaussian texture added inside shapes.
    pub noise_sigma: f32,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [32; 3],
            shapes: 4,
            intensities: vec![0.4, 0.75, 1.0, 0.55],
            labels: vec![1, 2, 3, 4],
            noise_sigma: 0.01,
        }
    }
}

impl PhantomSpec {
    fn validate(&self) -> Result<()> {
        if self.shapes == 0 || self.intensities.is_empty() || self.labels.is_empty() {
            return Err(OfgError::InvalidConfig(
                "phantom needs at least one shape, intensity and label".into(),
            ));
        }
        if self.labels.contains(&0) {
            return Err(OfgError::InvalidConfig(
                "phantom label 0 is reserved for background".into(),
            ));
        }
        if self
            .intensities
            .iter()
            .any(|&v| !(v > 0.0 && v.is_finite()))
        {
            return Err(OfgError::InvalidConfig(
                "phantom intensities must be positive".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(OfgError::InvalidConfig(
                "phantom noise sigma must be >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Distinct label ids the phantom paints.
    pub fn label_ids(&self) -> Vec<u16> {
        let mut ids: Vec<u16> = (0..self.shapes)
            .map(|s| self.labels[s % self.labels.len()])
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

#[derive(Debug, Clone, Copy)]
struct Shape {
    center: [f64; 3],
    radius: [f64; 3],
    ellipsoid: bool,
}

impl Shape {
    fn contains(&self, x: [usize; 3]) -> bool {
        let d: [f64; 3] = std::array::from_fn(|a| (x[a] as f64 - self.center[a]) / self.radius[a]);
        if self.ellipsoid {
            d.iter().map(|v| v * v).sum::<f64>() <= 1.0
        } else {
            d.iter().all(|v| v.abs() <= 1.0)
        }
    }
}

/// Shapes shrink geometrically and each is placed inside its predecessor.
fn layout(dims: [usize; 3], count: usize, rng: &mut impl Rng) -> Result<Vec<Shape>> {
    let mut shapes: Vec<Shape> = Vec::with_capacity(count);
    for s in 0..count {
        let frac = 0.42 * 0.66f64.powi(s as i32);
        let mut radius = [0.0; 3];
        let mut center = [0.0; 3];
        for a in 0..3 {
            let n = dims[a] as f64;
            let r = frac * n * rng.gen_range(0.85..1.1);
            let c = match shapes.last() {
                None => (n - 1.0) / 2.0 + rng.gen_range(-1.0..1.0),
                Some(p) => {
                    let slack = (p.radius[a] - r).max(0.0) * 0.5;
                    p.center[a] + rng.gen_range(-1.0..=1.0) * slack
                }
            };
            let fit = r.min(c - MARGIN).min(n - 1.0 - MARGIN - c);
            if fit < 1.0 {
                return Err(OfgError::InvalidConfig(format!(
                    "phantom shape {s} does not fit in {dims:?} with a {MARGIN}-voxel margin"
                )));
            }
            radius[a] = fit;
            center[a] = c;
        }
        shapes.push(Shape {
            center,
            radius,
            ellipsoid: s % 2 == 0,
        });
    }
    Ok(shapes)
}

/// Renders a phantom: later shapes paint over earlier ones, Gaussian texture
/// is added inside shapes (the background stays exactly zero), and the
/// result is normalized to `[0, 1]`.
pub fn gen_phantom(spec: &PhantomSpec, seed: u64) -> Result<(ScalarVolume, LabelVolume)> {
    spec.validate()?;
    let grid = Grid::new(spec.dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = layout(spec.dims, spec.shapes, &mut rng)?;
    let mut intensity = vec![0.0f32; grid.len()];
    let mut labels = vec![0u16; grid.len()];
    for (idx, x) in grid.voxels().enumerate() {
        for (s, shape) in shapes.iter().enumerate() {
            if shape.contains(x) {
                intensity[idx] = spec.intensities[s % spec.intensities.len()];
                labels[idx] = spec.labels[s % spec.labels.len()];
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f32, spec.noise_sigma).expect("sigma validated");
        for (v, &l) in intensity.iter_mut().zip(&labels) {
            if l != 0 {
                *v = (*v + normal.sample(&mut rng)).max(0.0);
            }
        }
    }
    let image = normalize(&ScalarVolume::new(grid, intensity)?)?;
    Ok((image, LabelVolume::new(grid, labels)?))
}

/// Parameters of a random smooth deformation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSpec {
    /// Largest displacement magnitude, in voxels.
    pub amplitude: f64,
    /// Gaussian smoothing width, in voxels.
    pub sigma: f64,
    pub seed: u64,
}

impl Default for FieldSpec {
    fn default() -> Self {
        Self {
            amplitude: 3.0,
            sigma: 4.0,
            seed: 0,
        }
    }
}

/// Separable Gaussian filter with border replication; kernel radius `ceil(3 sigma)`.
pub fn gaussian_smooth(dims: [usize; 3], data: &[f64], sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / total).collect();
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut cur = data.to_vec();
    for axis in 0..3 {
        let n = dims[axis] as isize;
        let mut out = vec![0.0; cur.len()];
        for (idx, o) in out.iter_mut().enumerate() {
            let pos = ((idx / strides[axis]) % dims[axis]) as isize;
            let line = idx - pos as usize * strides[axis];
            *o = kernel
                .iter()
                .enumerate()
                .map(|(t, k)| {
                    let q = (pos + t as isize - radius).clamp(0, n - 1) as usize;
                    k * cur[line + q * strides[axis]]
                })
                .sum();
        }
        cur = out;
    }
    cur
}

/// White noise, Gaussian-smoothed per component, rescaled so the largest
/// vector magnitude equals `spec.amplitude`.
pub fn gen_smooth_field(grid: Grid, spec: &FieldSpec) -> Result<DisplacementField> {
    if !(spec.amplitude >= 0.0 && spec.amplitude.is_finite())
        || spec.sigma.is_nan()
        || spec.sigma <= 0.0
    {
        return Err(OfgError::InvalidConfig(format!(
            "field amplitude must be >= 0 and sigma > 0, got {} / {}",
            spec.amplitude, spec.sigma
        )));
    }
    if spec.amplitude == 0.0 {
        return Ok(DisplacementField::zeros(grid));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
    // Noise is drawn on a grid padded by the kernel radius and cropped after
    // smoothing, so border replication does not inflate variance near faces.
    let pad = (3.0 * spec.sigma).ceil() as usize;
    let dims = grid.dims();
    let padded = dims.map(|d| d + 2 * pad);
    let padded_len = padded.iter().product::<usize>();
    let comps: Vec<Vec<f64>> = (0..3)
        .map(|_| {
            let noise: Vec<f64> = (0..padded_len).map(|_| normal.sample(&mut rng)).collect();
            let smooth = gaussian_smooth(padded, &noise, spec.sigma);
            grid.voxels()
                .map(|[i, j, k]| {
                    smooth[(i + pad) + padded[0] * ((j + pad) + padded[1] * (k + pad))]
                })
                .collect()
        })
        .collect();
    let max = (0..grid.len())
        .map(|i| (comps[0][i].powi(2) + comps[1][i].powi(2) + comps[2][i].powi(2)).sqrt())
        .fold(0.0, f64::max);
    let scale = if max > 0.0 { spec.amplitude / max } else { 0.0 };
    let data: Vec<[f64; 3]> = (0..grid.len())
        .map(|i| std::array::from_fn(|c| comps[c][i] * scale))
        .collect();
    DisplacementField::from_f64(grid, &data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warp::resample_field;

    #[test]
    fn phantom_deterministic() {
        let s = PhantomSpec::default();
        assert_eq!(gen_phantom(&s, 5).unwrap(), gen_phantom(&s, 5).unwrap());
        assert_ne!(gen_phantom(&s, 5).unwrap().0, gen_phantom(&s, 6).unwrap().0);
    }

    #[test]
    fn phantom_labels_are_declared() {
        let s = PhantomSpec::default();
        for seed in 0..5 {
            let (_, l) = gen_phantom(&s, seed).unwrap();
            assert_eq!(l.label_ids(), vec![1, 2, 3, 4]);
            assert!(l.data().contains(&0));
        }
    }

    #[test]
    fn noiseless_phantom_is_piecewise_constant() {
        let s = PhantomSpec {
            noise_sigma: 0.0,
            ..PhantomSpec::default()
        };
        let (v, l) = gen_phantom(&s, 1).unwrap();
        for (&x, &lab) in v.data().iter().zip(l.data()) {
            let want = if lab == 0 {
                0.0
            } else {
                s.intensities[lab as usize - 1]
            };
            assert_eq!(x, want);
        }
    }

    #[test]
    fn margin_respected() {
        let (_, l) = gen_phantom(&PhantomSpec::default(), 2).unwrap();
        let g = *l.grid();
        for x in g.voxels() {
            if (0..3).any(|a| x[a] < 2 || x[a] + 2 >= 32) {
                assert_eq!(l.get(x), 0);
            }
        }
    }

    #[test]
    fn impossible_phantom_rejected() {
        let s = PhantomSpec {
            dims: [4; 3],
            ..PhantomSpec::default()
        };
        assert!(gen_phantom(&s, 0).is_err());
        let s = PhantomSpec {
            labels: vec![0],
            ..PhantomSpec::default()
        };
        assert!(gen_phantom(&s, 0).is_err());
    }

    #[test]
    fn field_amplitude() {
        let g = Grid::cube(16).unwrap();
        let zero = gen_smooth_field(
            g,
            &FieldSpec {
                amplitude: 0.0,
                ..FieldSpec::default()
            },
        )
        .unwrap();
        assert_eq!(zero.max_abs_component(), 0.0);
        for seed in 0..3 {
            let f = gen_smooth_field(
                g,
                &FieldSpec {
                    seed,
                    ..FieldSpec::default()
                },
            )
            .unwrap();
            assert!((f.max_magnitude() - 3.0).abs() < 1e-4);
        }
    }

    #[test]
    fn resample_round_trip_on_smooth_fields() {
        let g = Grid::cube(32).unwrap();
        let half = Grid::cube(16).unwrap();
        for seed in 0..5 {
            let f = gen_smooth_field(
                g,
                &FieldSpec {
                    seed,
                    ..FieldSpec::default()
                },
            )
            .unwrap();
            let back = resample_field(&resample_field(&f, half).unwrap(), g).unwrap();
            let err = f
                .components()
                .zip(back.components())
                .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
            assert!(err < 0.1 * 3.0, "seed {seed}: {err}");
        }
    }
}
