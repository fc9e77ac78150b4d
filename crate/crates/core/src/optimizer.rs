//! Instance optimizer: refines a displacement field by gradient descent on
//! the registration energy. The refined field is the pseudo-label used to
//! supervise the predictor.

use std::time::{Duration, Instant};

use crate::energy::{EnergyConfig, EnergyProblem};
use crate::error::{OfgError, Result};
use crate::volume::{DisplacementField, Grid, ScalarVolume};
use crate::warp::{ensure_min_dims, resample_field, resample_volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Adam,
    Sgd,
}

impl std::str::FromStr for Method {
    type Err = OfgError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(Method::Adam),
            "sgd" => Ok(Method::Sgd),
            other => Err(OfgError::InvalidConfig(format!(
                "unknown optimizer method '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub method: Method,
    pub lr: f64,
    pub steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub energy: EnergyConfig,
    /// Optimize on a half-resolution grid and upsample the result.
    pub downsample: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            method: Method::Adam,
            lr: 0.1,
            steps: 10,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            energy: EnergyConfig::default(),
            downsample: false,
        }
    }
}

impl OptimConfig {
    pub fn desk() -> Self {
        Self {
            energy: EnergyConfig::desk(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(OfgError::InvalidConfig(
                "optimizer steps must be >= 1".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(OfgError::InvalidConfig(format!(
                "optimizer lr must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(OfgError::InvalidConfig(
                "adam betas must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Adam hyper-parameters and moment buffers over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct AdamMoments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamMoments {
    pub(crate) fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub(crate) fn len(&self) -> usize {
        self.m.len()
    }

    pub(crate) fn steps(&self) -> u64 {
        self.t
    }

    /// Advances the moments with `grad` and calls `apply(i, delta)` with the
    /// bias-corrected update `-lr * m_hat / (sqrt(v_hat) + eps)` for every element.
    pub(crate) fn step(
        &mut self,
        grad: impl ExactSizeIterator<Item = f64>,
        lr: f64,
        (beta1, beta2, eps): (f64, f64, f64),
        mut apply: impl FnMut(usize, f64),
    ) -> Result<()> {
        assert_eq!(grad.len(), self.m.len(), "gradient length mismatch");
        let grad: Vec<f64> = grad.collect();
        if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
            return Err(OfgError::NonFinite {
                what: "gradient",
                index,
            });
        }
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (i, g) in grad.into_iter().enumerate() {
            let m = beta1 * self.m[i] + (1.0 - beta1) * g;
            let v = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            self.m[i] = m;
            self.v[i] = v;
            apply(i, -lr * (m / bc1) / ((v / bc2).sqrt() + eps));
        }
        Ok(())
    }
}

/// Adam state for one displacement field. Created fresh for every refine call.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    moments: AdamMoments,
}

impl OptimState {
    pub fn new(grid: &Grid) -> Self {
        Self {
            moments: AdamMoments::new(grid.len() * 3),
        }
    }

    /// Number of Adam updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.moments.steps()
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.moments.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.moments.v
    }

    /// One bias-corrected Adam update of `field` along `grad`.
    pub fn adam_step(
        &mut self,
        field: &DisplacementField,
        grad: &DisplacementField,
        cfg: &OptimConfig,
    ) -> Result<DisplacementField> {
        field.grid().ensure_same(grad.grid())?;
        if self.moments.len() != field.num_components() {
            return Err(OfgError::LengthMismatch {
                expected: self.moments.len(),
                actual: field.num_components(),
            });
        }
        let mut u = field.to_f64();
        let g: Vec<f64> = grad.components().map(f64::from).collect();
        self.step_f64(&mut u, &g, cfg)?;
        DisplacementField::from_f64(*field.grid(), &u)
    }

    fn step_f64(&mut self, u: &mut [[f64; 3]], grad: &[f64], cfg: &OptimConfig) -> Result<()> {
        let flat = u.as_flattened_mut();
        self.moments.step(
            grad.iter().copied(),
            cfg.lr,
            (cfg.beta1, cfg.beta2, cfg.adam_eps),
            |i, d| flat[i] = round_to_storage(flat[i] + d),
        )
    }
}

// Fields are stored in 32-bit; keeping iterates representable makes the
// trace energies exactly those of the returned field.
#[inline]
fn round_to_storage(x: f64) -> f64 {
    x as f32 as f64
}

/// Per-step energies `E^0 .. E^n` of one refine call.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineTrace {
    pub energies: Vec<f64>,
    pub wall: Duration,
}

impl RefineTrace {
    pub fn initial(&self) -> f64 {
        self.energies[0]
    }

    pub fn last(&self) -> f64 {
        *self.energies.last().expect("trace holds at least E^0")
    }

    /// `E^0 - E^n`; positive when the optimizer lowered the energy.
    pub fn drop(&self) -> f64 {
        self.initial() - self.last()
    }
}

/// Runs `cfg.steps` descent steps on the energy starting from `init` and
/// returns the refined field. The result carries no link to its inputs.
pub fn refine(
    fixed: &ScalarVolume,
    moving: &ScalarVolume,
    init: &DisplacementField,
    cfg: &OptimConfig,
) -> Result<(DisplacementField, RefineTrace)> {
    cfg.validate()?;
    fixed.grid().ensure_same(init.grid())?;
    let start = Instant::now();
    let problem = EnergyProblem::new(fixed, moving, &cfg.energy)?;
    let mut state = OptimState::new(init.grid());
    let mut u = init.to_f64();
    let mut energies = Vec::with_capacity(cfg.steps + 1);
    for step in 0..cfg.steps {
        let (e, grad) = problem.value_and_grad(&u);
        energies.push(e);
        if !e.is_finite() {
            return Err(OfgError::Divergence {
                step,
                trace: energies,
            });
        }
        let flat = grad.as_flattened();
        match cfg.method {
            Method::Adam => state.step_f64(&mut u, flat, cfg).map_err(|err| match err {
                OfgError::NonFinite { .. } => OfgError::Divergence {
                    step,
                    trace: energies.clone(),
                },
                other => other,
            })?,
            Method::Sgd => {
                for (x, g) in u.as_flattened_mut().iter_mut().zip(flat) {
                    *x = round_to_storage(*x - cfg.lr * g);
                }
            }
        }
    }
    let e = problem.value(&u);
    energies.push(e);
    if !e.is_finite() || u.iter().flatten().any(|x| !x.is_finite()) {
        return Err(OfgError::Divergence {
            step: cfg.steps,
            trace: energies,
        });
    }
    let field = DisplacementField::from_f64(*init.grid(), &u)?;
    Ok((
        field,
        RefineTrace {
            energies,
            wall: start.elapsed(),
        },
    ))
}

/// Grid with every dimension halved (rounded up).
pub fn half_grid(grid: &Grid) -> Result<Grid> {
    let d = grid.dims();
    Grid::with_spacing(d.map(|n| n.div_ceil(2)), grid.spacing().map(|s| s * 2.0))
}

/// [`refine`] on a half-resolution copy of the problem; the refined field is
/// upsampled back to the input grid. The trace holds the coarse energies.
pub fn refine_downsampled(
    fixed: &ScalarVolume,
    moving: &ScalarVolume,
    init: &DisplacementField,
    cfg: &OptimConfig,
) -> Result<(DisplacementField, RefineTrace)> {
    ensure_min_dims(fixed.grid(), 8, "downsampled refine")?;
    fixed.grid().ensure_same(moving.grid())?;
    fixed.grid().ensure_same(init.grid())?;
    let coarse = half_grid(fixed.grid())?;
    let (f, m) = (
        resample_volume(fixed, coarse)?,
        resample_volume(moving, coarse)?,
    );
    let u = resample_field(init, coarse)?;
    let (refined, trace) = refine(&f, &m, &u, cfg)?;
    Ok((resample_field(&refined, *fixed.grid())?, trace))
}

/// Dispatches to [`refine`] or [`refine_downsampled`] per `cfg.downsample`.
pub fn optimize(
    fixed: &ScalarVolume,
    moving: &ScalarVolume,
    init: &DisplacementField,
    cfg: &OptimConfig,
) -> Result<(DisplacementField, RefineTrace)> {
    if cfg.downsample {
        refine_downsampled(fixed, moving, init, cfg)
    } else {
        refine(fixed, moving, init, cfg)
    }
}
