//! `ofg`: synthetic data generation, training in every regime, stand-alone
//! registration, evaluation and gradient self-checks.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ofg_core::data::{load_pairs, read_field, read_volume, save_pairs, write_field, Dataset};
use ofg_core::metrics::{evaluate, MetricsReport};
use ofg_core::optimizer::{optimize, OptimConfig};
use ofg_core::predictor::{read_checkpoint, write_checkpoint, PredictorParams};
use ofg_core::training::{train_with, EpochLog};
use ofg_core::volume::{DisplacementField, ImagePair};
use ofg_core::warp::invert_field;
use ofg_core::{gradcheck, OfgError, Result};

use config::RunConfig;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

/// Fixed-point iterations used to invert truth fields for endpoint error.
const INVERT_ITERATIONS: usize = 30;

#[derive(Parser)]
#[command(
    name = "ofg",
    version,
    about = "Deformable 3D registration trained with optimizer-refined pseudo-labels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override, `key=value`; may repeat. Applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cubic grid edge length.
    #[arg(long)]
    dims: Option<usize>,
    /// Largest displacement magnitude in voxels.
    #[arg(long)]
    amplitude: Option<f64>,
    /// Smoothing width of the deformation in voxels.
    #[arg(long)]
    sigma: Option<f64>,
    /// Overwrite an existing dataset.
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic phantom pairs with known deformations.
    GenData(GenDataArgs),
    /// Train a predictor; writes metrics.csv, checkpoints and the config echo.
    Train {
        /// ofg | unsup | selftrain | selftrain-opt | blend-freq | blend-loss | blend-prob
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite an existing output directory.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Register one pair: predict from a checkpoint and/or refine.
    Register {
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Refine steps after prediction (or from the zero field).
        #[arg(long, default_value_t = 0)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint or a fixed field on every pair of a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "field")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        field: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Compare every analytic gradient against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OfgError + '_ {
    move |source| OfgError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && !force {
        return Err(OfgError::InvalidConfig(format!(
            "output directory {} exists; pass --force to overwrite",
            dir.display()
        )));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut cfg = args.cfg.load()?;
    let (out, pairs, seed) = (args.out.as_path(), args.pairs, args.seed);
    if let Some(d) = args.dims {
        cfg.phantom.dims = [d; 3];
    }
    if let Some(a) = args.amplitude {
        cfg.field.amplitude = a;
    }
    if let Some(s) = args.sigma {
        cfg.field.sigma = s;
    }
    if pairs == 0 {
        return Err(OfgError::InvalidConfig("--pairs must be >= 1".into()));
    }
    if out.join(ofg_core::data::DatasetManifest::FILE).exists() && !args.force {
        return Err(OfgError::InvalidConfig(format!(
            "{} already holds a dataset; pass --force to overwrite",
            out.display()
        )));
    }
    let set = Dataset::synthetic(&cfg.phantom, &cfg.field, pairs, 0, seed)?;
    let mut settings = vec![
        ("pairs".to_string(), pairs.to_string()),
        ("seed".to_string(), seed.to_string()),
    ];
    for key in config::KEYS.iter().filter(|k| k.starts_with("data.")) {
        settings.push((key.to_string(), cfg.get(key).expect("known key")));
    }
    save_pairs(out, &set.train, settings)?;
    println!("wrote {pairs} pairs to {}", out.display());
    Ok(())
}

fn split(pairs: Vec<ImagePair>, val: usize) -> Result<Dataset> {
    if val == 0 || val >= pairs.len() {
        return Err(OfgError::InvalidConfig(format!(
            "val_pairs = {val} must lie in 1..{} for a dataset of {} pairs",
            pairs.len(),
            pairs.len()
        )));
    }
    let mut train = pairs;
    let val = train.split_off(train.len() - val);
    Ok(Dataset { train, val })
}

fn train(mode: Option<String>, data: &Path, out: &Path, force: bool, cfg: RunConfig) -> Result<()> {
    let mut cfg = cfg;
    if let Some(m) = mode {
        cfg.train.mode = m.parse()?;
    }
    cfg.validate()?;
    let (_, pairs) = load_pairs(data)?;
    let dataset = split(pairs, cfg.val_pairs)?;
    prepare_out_dir(out, force)?;
    write_text(&out.join("config.txt"), &cfg.render())?;
    let csv_path = out.join("metrics.csv");
    let mut csv = fs::File::create(&csv_path).map_err(io_err(&csv_path))?;
    writeln!(csv, "{}", EpochLog::CSV_HEADER).map_err(io_err(&csv_path))?;
    let mut write_err = None;
    let outcome = train_with(&dataset, &cfg.train, |log| {
        eprintln!(
            "epoch {:>4} loss {:.6} dice {:.4} jac% {:.4} ({:.0} ms)",
            log.epoch, log.loss, log.dice, log.jac_pct, log.wall_ms
        );
        if let Err(e) = writeln!(csv, "{}", log.csv_row()).and_then(|_| csv.flush()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(io_err(&csv_path)(e));
    }
    write_checkpoint(&out.join("ckpt_best.ofgp"), &outcome.best)?;
    write_checkpoint(&out.join("ckpt_last.ofgp"), &outcome.last)?;
    let last = outcome.final_log();
    println!("mode {}", cfg.train.mode);
    println!("initial dice {:.6}", outcome.initial.dice);
    println!("final dice {:.6}", last.dice);
    println!("final jac_pct {:.6}", last.jac_pct);
    println!(
        "best epoch {} dice {:.6}",
        outcome.best_epoch, outcome.logs[outcome.best_epoch].dice
    );
    if outcome.refine_calls() > 0 {
        println!(
            "flagged refines {}/{}",
            outcome.flagged(),
            outcome.refine_calls()
        );
    }
    Ok(())
}

fn register(
    fixed: &Path,
    moving: &Path,
    ckpt: Option<&Path>,
    steps: usize,
    out: &Path,
    cfg: RunConfig,
) -> Result<()> {
    let f = read_volume(fixed)?;
    let m = read_volume(moving)?;
    f.grid().ensure_same(m.grid())?;
    let init = match ckpt {
        Some(c) => read_checkpoint(c)?.predict(&f, &m)?.0,
        None => DisplacementField::zeros(*f.grid()),
    };
    let field = if steps > 0 {
        let optim = OptimConfig {
            steps,
            ..cfg.train.optim
        };
        let (field, trace) = optimize(&f, &m, &init, &optim)?;
        println!("step,energy");
        for (i, e) in trace.energies.iter().enumerate() {
            println!("{i},{e}");
        }
        field
    } else {
        let e = ofg_core::energy::energy(&f, &m, &init, &cfg.train.optim.energy)?;
        println!("step,energy\n0,{e}");
        init
    };
    write_field(out, &field)
}

fn eval(
    data: &Path,
    ckpt: Option<&Path>,
    field: Option<&Path>,
    out: &Path,
    cfg: RunConfig,
) -> Result<()> {
    let (manifest, pairs) = load_pairs(data)?;
    let model: Option<PredictorParams> = ckpt.map(read_checkpoint).transpose()?;
    let fixed_field = field.map(read_field).transpose()?;
    let mut csv = format!("pair,{}\n", MetricsReport::CSV_HEADER);
    let mut reports = Vec::with_capacity(pairs.len());
    for (name, pair) in manifest.members.iter().zip(&pairs) {
        let (Some(fl), Some(ml)) = (&pair.fixed_labels, &pair.moving_labels) else {
            return Err(OfgError::InvalidConfig(format!(
                "pair {name} has no label maps"
            )));
        };
        let u = match (&model, &fixed_field) {
            (Some(p), _) => p.predict(&pair.fixed, &pair.moving)?.0,
            (None, Some(f)) => f.clone(),
            (None, None) => DisplacementField::zeros(*pair.grid()),
        };
        let reference = pair
            .truth_field
            .as_ref()
            .map(|t| invert_field(t, INVERT_ITERATIONS));
        let r = evaluate(
            &pair.fixed,
            &pair.moving,
            fl,
            ml,
            &u,
            &cfg.train.optim.energy,
            reference.as_ref(),
        )
        .map_err(|e| e.context(format!("pair {name}")))?;
        csv.push_str(&format!("{name},{}\n", r.csv_row()));
        reports.push(r);
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let epe: Vec<f64> = reports.iter().filter_map(|r| r.endpoint_error).collect();
    let mean_epe = (!epe.is_empty()).then(|| epe.iter().sum::<f64>() / epe.len() as f64);
    let summary = MetricsReport {
        per_label_dice: Vec::new(),
        mean_dice: mean(|r| r.mean_dice),
        pct_nondiffeo: mean(|r| r.pct_nondiffeo),
        mean_ncc: mean(|r| r.mean_ncc),
        max_magnitude: mean(|r| r.max_magnitude),
        mean_magnitude: mean(|r| r.mean_magnitude),
        endpoint_error: mean_epe,
    };
    csv.push_str(&format!("mean,{}\n", summary.csv_row()));
    write_text(out, &csv)?;
    println!("pairs {}", reports.len());
    println!("mean dice {:.6}", summary.mean_dice);
    println!("mean jac_pct {:.6}", summary.pct_nondiffeo);
    println!("mean ncc {:.6}", summary.mean_ncc);
    if let Some(e) = mean_epe {
        println!("mean epe {e:.6}");
    }
    Ok(())
}

fn run_gradcheck(seed: u64) -> Result<bool> {
    let results = gradcheck::run_all(seed)?;
    let mut ok = true;
    for r in &results {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        ok &= r.passed();
        println!(
            "{status} {:<20} max_rel_err {:.3e} (tol {:.0e}, {} samples)",
            r.name, r.max_rel_error, r.tolerance, r.samples
        );
    }
    Ok(ok)
}

fn exit_code(e: &OfgError) -> u8 {
    match e.root() {
        OfgError::InvalidConfig(_) => EXIT_CONFIG,
        OfgError::Divergence { .. } | OfgError::NonFinite { .. } => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData(args) => gen_data(args)?,
        Command::Train {
            mode,
            data,
            out,
            force,
            cfg,
        } => train(mode, &data, &out, force, cfg.load()?)?,
        Command::Register {
            fixed,
            moving,
            ckpt,
            steps,
            out,
            cfg,
        } => register(&fixed, &moving, ckpt.as_deref(), steps, &out, cfg.load()?)?,
        Command::Eval {
            data,
            ckpt,
            field,
            out,
            cfg,
        } => eval(&data, ckpt.as_deref(), field.as_deref(), &out, cfg.load()?)?,
        Command::Gradcheck { seed } => {
            if !run_gradcheck(seed)? {
                eprintln!("error: gradient check failed");
                return Ok(ExitCode::from(EXIT_NUMERICAL));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
