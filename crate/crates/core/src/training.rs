//! Training loops: learning from optimizer-refined pseudo-labels, the
//! unsupervised baseline, (optimized) self-training and the blended regimes
//! that trade the two off.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{derive_seed, Dataset};
use crate::energy::{field_mse, field_mse_grad, EnergyProblem};
use crate::error::{OfgError, Result};
use crate::metrics::evaluate;
use crate::optimizer::{optimize, OptimConfig, RefineTrace};
use crate::predictor::{Architecture, PredictorParams, TrainState};
use crate::volume::{DisplacementField, ImagePair};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Ofg,
    Unsupervised,
    SelfTrain,
    OptimizedSelfTrain,
    BlendFrequency,
    BlendLoss,
    BlendProbabilistic,
}

impl TrainMode {
    pub const ALL: [TrainMode; 7] = [
        TrainMode::Ofg,
        TrainMode::Unsupervised,
        TrainMode::SelfTrain,
        TrainMode::OptimizedSelfTrain,
        TrainMode::BlendFrequency,
        TrainMode::BlendLoss,
        TrainMode::BlendProbabilistic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Ofg => "ofg",
            TrainMode::Unsupervised => "unsup",
            TrainMode::SelfTrain => "selftrain",
            TrainMode::OptimizedSelfTrain => "selftrain-opt",
            TrainMode::BlendFrequency => "blend-freq",
            TrainMode::BlendLoss => "blend-loss",
            TrainMode::BlendProbabilistic => "blend-prob",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = OfgError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|m| m.name()).collect();
                OfgError::InvalidConfig(format!(
                    "unknown mode '{s}', expected one of {}",
                    names.join("|")
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlendConfig {
    /// `blend-freq`: refine on epochs divisible by this, unsupervised otherwise.
    pub every_n: usize,
    /// `blend-loss`: weight of the pseudo-label loss.
    pub alpha: f64,
    /// `blend-loss`: weight of the unsupervised energy.
    pub beta: f64,
    /// `blend-prob`: probability that a training instance is refined.
    pub prob: f64,
}

impl Default for BlendConfig {
    fn default() -> Self {
        Self {
            every_n: 2,
            alpha: 1.0,
            beta: 1.0,
            prob: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelfTrainConfig {
    /// Epochs per stage; labels are regenerated at every stage boundary.
    pub stage_len: usize,
    /// Refine steps applied to each label in `selftrain-opt` mode.
    pub label_opt_steps: usize,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        Self {
            stage_len: 10,
            label_opt_steps: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub optim: OptimConfig,
    pub blend: BlendConfig,
    pub selftrain: SelfTrainConfig,
    pub arch: Architecture,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Ofg,
            epochs: 500,
            lr: 1e-4,
            weight_decay: 0.02,
            optim: OptimConfig::default(),
            blend: BlendConfig::default(),
            selftrain: SelfTrainConfig::default(),
            arch: Architecture::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings sized for 32^3 synthetic data on a single CPU core.
    pub fn desk() -> Self {
        Self {
            epochs: 40,
            lr: 1e-3,
            optim: OptimConfig::desk(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(OfgError::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("model lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.lr * self.weight_decay < 1.0) {
            return bad(format!("weight decay {} out of range", self.weight_decay));
        }
        if self.blend.every_n == 0 {
            return bad("blend every_n must be >= 1".into());
        }
        if !(self.blend.alpha >= 0.0 && self.blend.beta >= 0.0) {
            return bad("blend alpha and beta must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.blend.prob) {
            return bad(format!(
                "blend prob must lie in [0, 1], got {}",
                self.blend.prob
            ));
        }
        if self.selftrain.stage_len == 0 {
            return bad("selftrain stage_len must be >= 1".into());
        }
        self.optim.validate()?;
        self.arch.validate()
    }
}

/// Outcome of a single parameter update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// `E(phi_pre) - E(phi_opt)` when the step refined a pseudo-label.
    pub refine_drop: Option<f64>,
    /// The refined label has a higher energy than the prediction it started from.
    pub flagged: bool,
}

/// Weights of the two loss terms of one update.
#[derive(Debug, Clone, Copy)]
struct LossWeights {
    ofg: f64,
    unsup: f64,
}

fn pseudo_label(
    pair: &ImagePair,
    init: &DisplacementField,
    optim: &OptimConfig,
) -> Result<(DisplacementField, RefineTrace)> {
    optimize(&pair.fixed, &pair.moving, init, optim)
}

fn apply(
    model: &mut PredictorParams,
    state: &mut TrainState,
    cache: &crate::predictor::ForwardCache,
    grad: &DisplacementField,
    cfg: &TrainConfig,
) -> Result<()> {
    let g = model.backward(cache, grad)?;
    let lr = cfg.lr;
    let wd = cfg.weight_decay;
    let arch = model.architecture().clone();
    let mut values = model.values().to_vec();
    state.update(&mut values, &g, lr, wd)?;
    *model = PredictorParams::from_values(arch, values)?;
    Ok(())
}

fn weighted_step(
    model: &mut PredictorParams,
    state: &mut TrainState,
    pair: &ImagePair,
    cfg: &TrainConfig,
    w: LossWeights,
) -> Result<StepStats> {
    let (pre, cache) = model.predict(&pair.fixed, &pair.moving)?;
    let grid = *pre.grid();
    let mut loss = 0.0;
    let mut grad = vec![[0.0f64; 3]; grid.len()];
    let mut refine_drop = None;
    let mut flagged = false;
    if w.ofg > 0.0 {
        let (opt, trace) = pseudo_label(pair, &pre, &cfg.optim)?;
        refine_drop = Some(trace.drop());
        flagged = trace.last() > trace.initial();
        loss += w.ofg * field_mse(&pre, &opt)?;
        for (g, d) in grad.iter_mut().zip(field_mse_grad(&pre, &opt)?.data()) {
            for c in 0..3 {
                g[c] += w.ofg * d[c] as f64;
            }
        }
    }
    if w.unsup > 0.0 {
        let problem = EnergyProblem::new(&pair.fixed, &pair.moving, &cfg.optim.energy)?;
        let (e, eg) = problem.value_and_grad(&pre.to_f64());
        loss += w.unsup * e;
        for (g, d) in grad.iter_mut().zip(eg) {
            for c in 0..3 {
                g[c] += w.unsup * d[c];
            }
        }
    }
    let grad = DisplacementField::from_f64(grid, &grad)?;
    apply(model, state, &cache, &grad, cfg)?;
    Ok(StepStats {
        loss,
        refine_drop,
        flagged,
    })
}

/// Predicts, refines the prediction with the instance optimizer, and moves the
/// model towards the (detached) refined field under `field_mse`.
pub fn ofg_step(
    model: &mut PredictorParams,
    state: &mut TrainState,
    pair: &ImagePair,
    cfg: &TrainConfig,
) -> Result<StepStats> {
    weighted_step(
        model,
        state,
        pair,
        cfg,
        LossWeights {
            ofg: 1.0,
            unsup: 0.0,
        },
    )
}

/// One update on the registration energy evaluated at the prediction.
pub fn unsup_step(
    model: &mut PredictorParams,
    state: &mut TrainState,
    pair: &ImagePair,
    cfg: &TrainConfig,
) -> Result<StepStats> {
    weighted_step(
        model,
        state,
        pair,
        cfg,
        LossWeights {
            ofg: 0.0,
            unsup: 1.0,
        },
    )
}

/// One update towards a fixed pseudo-label.
pub fn supervised_step(
    model: &mut PredictorParams,
    state: &mut TrainState,
    pair: &ImagePair,
    label: &DisplacementField,
    cfg: &TrainConfig,
) -> Result<StepStats> {
    let (pre, cache) = model.predict(&pair.fixed, &pair.moving)?;
    let loss = field_mse(&pre, label)?;
    apply(model, state, &cache, &field_mse_grad(&pre, label)?, cfg)?;
    Ok(StepStats {
        loss,
        refine_drop: None,
        flagged: false,
    })
}

/// Validation metrics averaged over pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValSummary {
    pub dice: f64,
    pub ncc: f64,
    pub jac_pct: f64,
}

pub fn validate(
    model: &PredictorParams,
    pairs: &[ImagePair],
    cfg: &TrainConfig,
) -> Result<ValSummary> {
    if pairs.is_empty() {
        return Err(OfgError::InvalidConfig("validation set is empty".into()));
    }
    let mut sum = ValSummary {
        dice: 0.0,
        ncc: 0.0,
        jac_pct: 0.0,
    };
    for (i, pair) in pairs.iter().enumerate() {
        let (Some(fl), Some(ml)) = (&pair.fixed_labels, &pair.moving_labels) else {
            return Err(OfgError::InvalidConfig(format!(
                "validation pair {i} has no label maps"
            )));
        };
        let (u, _) = model.predict(&pair.fixed, &pair.moving)?;
        let r = evaluate(
            &pair.fixed,
            &pair.moving,
            fl,
            ml,
            &u,
            &cfg.optim.energy,
            None,
        )
        .map_err(|e| e.context(format!("validation pair {i}")))?;
        sum.dice += r.mean_dice;
        sum.ncc += r.mean_ncc;
        sum.jac_pct += r.pct_nondiffeo;
    }
    let n = pairs.len() as f64;
    Ok(ValSummary {
        dice: sum.dice / n,
        ncc: sum.ncc / n,
        jac_pct: sum.jac_pct / n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mode: TrainMode,
    /// Mean training loss over the epoch's updates.
    pub loss: f64,
    pub dice: f64,
    pub ncc: f64,
    pub jac_pct: f64,
    /// Mean energy drop of the refine calls made this epoch (0 if none).
    pub refine_drop: f64,
    pub wall_ms: f64,
    pub refine_calls: usize,
    pub flagged: usize,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,mode,loss,dice,ncc,jac_pct,refine_drop,wall_ms";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.3}",
            self.epoch,
            self.mode,
            self.loss,
            self.dice,
            self.ncc,
            self.jac_pct,
            self.refine_drop,
            self.wall_ms
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: PredictorParams,
    pub best_epoch: usize,
    pub last: PredictorParams,
    /// Validation of the untrained model.
    pub initial: ValSummary,
    pub logs: Vec<EpochLog>,
}

impl TrainOutcome {
    pub fn final_log(&self) -> &EpochLog {
        self.logs.last().expect("at least one epoch")
    }

    pub fn refine_calls(&self) -> usize {
        self.logs.iter().map(|l| l.refine_calls).sum()
    }

    pub fn flagged(&self) -> usize {
        self.logs.iter().map(|l| l.flagged).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(EpochLog::CSV_HEADER);
        s.push('\n');
        for l in &self.logs {
            s.push_str(&l.csv_row());
            s.push('\n');
        }
        s
    }
}

/// What one training instance is updated with in the current epoch.
enum Plan<'a> {
    Weighted(LossWeights),
    Label(&'a DisplacementField),
}

/// Trains a freshly initialized model. `on_epoch` sees every log row as soon
/// as it is produced.
pub fn train_with(
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(OfgError::InvalidConfig("training set is empty".into()));
    }
    let mut model = PredictorParams::init(cfg.arch.clone(), derive_seed(cfg.seed, 1))?;
    let mut state = TrainState::new(model.values().len());
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2));
    let mut coin_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3));
    let initial = validate(&model, &dataset.val, cfg)?;
    let mut best = (model.clone(), 0usize, f64::NEG_INFINITY);
    let mut labels: Vec<DisplacementField> = Vec::new();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let ofg = LossWeights {
        ofg: 1.0,
        unsup: 0.0,
    };
    let unsup = LossWeights {
        ofg: 0.0,
        unsup: 1.0,
    };

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let selftrain = matches!(
            cfg.mode,
            TrainMode::SelfTrain | TrainMode::OptimizedSelfTrain
        );
        let mut label_drop = Vec::new();
        let mut label_flags = 0;
        if selftrain && epoch > 0 && epoch % cfg.selftrain.stage_len == 0 {
            let steps = match cfg.mode {
                TrainMode::OptimizedSelfTrain => cfg.selftrain.label_opt_steps,
                _ => 0,
            };
            labels.clear();
            for (i, pair) in dataset.train.iter().enumerate() {
                let (u, _) = model.predict(&pair.fixed, &pair.moving)?;
                let label = if steps > 0 {
                    let optim = OptimConfig { steps, ..cfg.optim };
                    let (opt, trace) = pseudo_label(pair, &u, &optim)
                        .map_err(|e| e.context(format!("epoch {epoch}, label for pair {i}")))?;
                    label_drop.push(trace.drop());
                    label_flags += usize::from(trace.last() > trace.initial());
                    opt
                } else {
                    u
                };
                labels.push(label);
            }
        }

        let mut order: Vec<usize> = (0..dataset.train.len()).collect();
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut drops = label_drop;
        let mut flagged = label_flags;
        for &i in &order {
            let pair = &dataset.train[i];
            let plan = match cfg.mode {
                TrainMode::Ofg => Plan::Weighted(ofg),
                TrainMode::Unsupervised => Plan::Weighted(unsup),
                TrainMode::SelfTrain | TrainMode::OptimizedSelfTrain => match labels.get(i) {
                    Some(l) => Plan::Label(l),
                    None => Plan::Weighted(unsup),
                },
                TrainMode::BlendFrequency => Plan::Weighted(if epoch % cfg.blend.every_n == 0 {
                    ofg
                } else {
                    unsup
                }),
                TrainMode::BlendLoss => Plan::Weighted(LossWeights {
                    ofg: cfg.blend.alpha,
                    unsup: cfg.blend.beta,
                }),
                TrainMode::BlendProbabilistic => {
                    Plan::Weighted(if coin_rng.gen_bool(cfg.blend.prob) {
                        ofg
                    } else {
                        unsup
                    })
                }
            };
            let stats = match plan {
                Plan::Weighted(w) => weighted_step(&mut model, &mut state, pair, cfg, w),
                Plan::Label(l) => supervised_step(&mut model, &mut state, pair, l, cfg),
            }
            .map_err(|e| e.context(format!("epoch {epoch}, training pair {i}")))?;
            if !stats.loss.is_finite() {
                return Err(OfgError::NonFinite {
                    what: "training loss",
                    index: i,
                }
                .context(format!("epoch {epoch}")));
            }
            loss_sum += stats.loss;
            if let Some(d) = stats.refine_drop {
                drops.push(d);
            }
            flagged += usize::from(stats.flagged);
        }

        let val =
            validate(&model, &dataset.val, cfg).map_err(|e| e.context(format!("epoch {epoch}")))?;
        let log = EpochLog {
            epoch,
            mode: cfg.mode,
            loss: loss_sum / order.len() as f64,
            dice: val.dice,
            ncc: val.ncc,
            jac_pct: val.jac_pct,
            refine_drop: if drops.is_empty() {
                0.0
            } else {
                drops.iter().sum::<f64>() / drops.len() as f64
            },
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            refine_calls: drops.len(),
            flagged,
        };
        on_epoch(&log);
        if val.dice > best.2 {
            best = (model.clone(), epoch, val.dice);
        }
        logs.push(log);
    }
    Ok(TrainOutcome {
        best: best.0,
        best_epoch: best.1,
        last: model,
        initial,
        logs,
    })
}

pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(dataset, cfg, |_| {})
}

/// Self-training: stage 0 is unsupervised, then the model is fitted to
/// pseudo-labels regenerated at every stage boundary.
pub fn selftrain_run(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if !matches!(
        cfg.mode,
        TrainMode::SelfTrain | TrainMode::OptimizedSelfTrain
    ) {
        return Err(OfgError::InvalidConfig(format!(
            "selftrain_run needs a self-training mode, got {}",
            cfg.mode
        )));
    }
    train(dataset, cfg)
}
