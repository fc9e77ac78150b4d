//! Acceptance suite: one PASS/FAIL line per criterion, run in order.
//! Artifacts (training logs, the step sweep) land in the cargo target tmp dir.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use ofg_core::data::{
    make_pair, read_field, read_labels, read_volume, write_field, write_labels, write_volume,
    Dataset, FieldSpec, PhantomSpec,
};
use ofg_core::metrics::{dice, jacobian_det, pct_nondiffeo, VoxelMask};
use ofg_core::optimizer::{refine, OptimConfig};
use ofg_core::predictor::{read_checkpoint, write_checkpoint, Architecture, PredictorParams};
use ofg_core::training::{train, TrainConfig, TrainMode, TrainOutcome};
use ofg_core::warp::warp_nearest;
use ofg_core::{DisplacementField, Grid, LabelVolume};

const SEED: u64 = 2024;
const EPOCHS: usize = 40;
const N_TRAIN: usize = 24;
const N_VAL: usize = 8;

const GRADCHECK_BUDGET: Duration = Duration::from_secs(120);
const FIELD_TOL: f64 = 1e-3;
const PREDICTOR_TOL: f64 = 1e-2;
const REFINE_SEEDS: u64 = 20;
const REFINE_MIN_IMPROVED: usize = 18;
const REFINE_BUDGET: Duration = Duration::from_secs(120);
const MAX_FLAG_RATE: f64 = 0.02;
const DICE_SLACK: f64 = 0.005;
const COMPARE_BUDGET: Duration = Duration::from_secs(15 * 60);
const TREND_SLACK: f64 = 0.005;
const SWEEP_STEPS: [usize; 4] = [1, 5, 10, 15];

/// Criteria that fail on this benchmark. They are still run and reported;
/// any other failure fails the suite.
const KNOWN_FAILURES: [usize; 2] = [4, 6];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn artifacts() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn ofg(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ofg"))
        .args(args)
        .output()
        .expect("spawn ofg")
}

fn dataset() -> Dataset {
    Dataset::synthetic(
        &PhantomSpec::default(),
        &FieldSpec::default(),
        N_TRAIN,
        N_VAL,
        SEED,
    )
    .unwrap()
}

fn config(mode: TrainMode) -> TrainConfig {
    TrainConfig {
        mode,
        epochs: EPOCHS,
        seed: SEED,
        ..TrainConfig::desk()
    }
}

/// A training run with its wall time.
struct Run {
    outcome: TrainOutcome,
    wall: Duration,
}

impl Run {
    fn new(data: &Dataset, cfg: &TrainConfig, name: &str) -> Run {
        let start = Instant::now();
        let outcome = train(data, cfg).unwrap_or_else(|e| panic!("{name}: {e}"));
        let wall = start.elapsed();
        std::fs::write(artifacts().join(format!("{name}.csv")), outcome.to_csv()).unwrap();
        Run { outcome, wall }
    }

    fn dice(&self) -> f64 {
        self.outcome.final_log().dice
    }

    fn jac(&self) -> f64 {
        self.outcome.final_log().jac_pct
    }

    fn mean_epoch_ms(&self) -> f64 {
        let logs = &self.outcome.logs;
        logs.iter().map(|l| l.wall_ms).sum::<f64>() / logs.len() as f64
    }
}

/// Training log with the wall-clock column removed.
fn without_wall(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

fn gradient_gate() -> Verdict {
    let start = Instant::now();
    let out = ofg(&["gradcheck", "--seed", "0"]);
    let wall = start.elapsed();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let mut worst = Vec::new();
    let mut ok = out.status.success() && wall < GRADCHECK_BUDGET;
    let mut checks = 0;
    for line in stdout.lines() {
        let fields: Vec<_> = line.split_whitespace().collect();
        let (Some(status), Some(name), Some(err)) = (fields.first(), fields.get(1), fields.get(3))
        else {
            ok = false;
            continue;
        };
        let err: f64 = err.parse().unwrap_or(f64::NAN);
        let tol = if name.starts_with("predictor_full") {
            PREDICTOR_TOL
        } else {
            FIELD_TOL
        };
        ok &= *status == "PASS" && err < tol;
        checks += 1;
        worst.push(format!("{name} {err:.1e}"));
    }
    let covered = [
        "warp",
        "ncc",
        "mse",
        "smoothness",
        "energy",
        "predictor_full",
    ]
    .iter()
    .all(|k| stdout.contains(k));
    verdict(
        ok && covered && checks >= 6,
        format!(
            "{checks} checks in {:.1}s: {}",
            wall.as_secs_f64(),
            worst.join(", ")
        ),
    )
}

fn mean_dice(pair: &ofg_core::ImagePair, u: &DisplacementField) -> f64 {
    let (fl, ml) = (
        pair.fixed_labels.as_ref().unwrap(),
        pair.moving_labels.as_ref().unwrap(),
    );
    dice(fl, &warp_nearest(ml, u).unwrap(), &fl.label_ids())
        .unwrap()
        .mean
}

/// Per-seed refine log: seed, dice before, dice after, E^0, E^n.
fn refine_log() -> String {
    let cfg = OptimConfig::desk();
    let mut csv = String::from("seed,dice_before,dice_after,e0,en\n");
    for seed in 0..REFINE_SEEDS {
        let pair = make_pair(&PhantomSpec::default(), &FieldSpec::default(), SEED + seed).unwrap();
        let zero = DisplacementField::zeros(*pair.grid());
        let (u, trace) = refine(&pair.fixed, &pair.moving, &zero, &cfg).unwrap();
        writeln!(
            csv,
            "{seed},{},{},{},{}",
            mean_dice(&pair, &zero),
            mean_dice(&pair, &u),
            trace.initial(),
            trace.last()
        )
        .unwrap();
    }
    csv
}

fn optimizer_efficacy(log: &str, wall: Duration) -> Verdict {
    let rows: Vec<Vec<f64>> = log
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    let improved = rows.iter().filter(|r| r[2] > r[1]).count();
    let descended = rows.iter().filter(|r| r[4] < r[3]).count();
    let n = rows.len() as f64;
    let before = rows.iter().map(|r| r[1]).sum::<f64>() / n;
    let after = rows.iter().map(|r| r[2]).sum::<f64>() / n;
    verdict(
        improved >= REFINE_MIN_IMPROVED && descended == rows.len() && wall < REFINE_BUDGET,
        format!(
            "dice up on {improved}/{}, energy down on {descended}/{}, mean dice {before:.4} -> {after:.4}, {:.1}s",
            rows.len(),
            rows.len(),
            wall.as_secs_f64()
        ),
    )
}

fn pseudo_label_sanity(ofg: &Run) -> Verdict {
    let (flagged, calls) = (ofg.outcome.flagged(), ofg.outcome.refine_calls());
    let rate = flagged as f64 / calls as f64;
    verdict(
        calls > 0 && rate < MAX_FLAG_RATE,
        format!(
            "{flagged}/{calls} refines raised the energy ({:.2}%)",
            rate * 100.0
        ),
    )
}

fn ofg_vs_unsup(ofg: &Run, unsup: &Run) -> Verdict {
    let total = ofg.wall + unsup.wall;
    let dice_ok = ofg.dice() >= unsup.dice() - DICE_SLACK;
    let jac_ok = ofg.jac() <= unsup.jac();
    let overhead = ofg.mean_epoch_ms() / unsup.mean_epoch_ms() - 1.0;
    verdict(
        dice_ok && jac_ok && total < COMPARE_BUDGET,
        format!(
            "dice ofg {:.4} vs unsup {:.4} ({}), jac% ofg {:.4} vs unsup {:.4} ({}), {:.1} min, ofg epoch overhead {:+.0}%",
            ofg.dice(),
            unsup.dice(),
            if dice_ok { "ok" } else { "below slack" },
            ofg.jac(),
            unsup.jac(),
            if jac_ok { "ok" } else { "worse" },
            total.as_secs_f64() / 60.0,
            overhead * 100.0
        ),
    )
}

fn ofg_vs_selftrain(ofg: &Run, st: &Run) -> Verdict {
    verdict(
        ofg.dice() >= st.dice(),
        format!(
            "dice ofg {:.4} vs self-training {:.4}",
            ofg.dice(),
            st.dice()
        ),
    )
}

/// Dice should not increase as the refine probability drops; one inversion
/// of at most the slack is tolerated.
fn intensity_trend(dices: &[(f64, f64)]) -> Verdict {
    let inversions: Vec<f64> = dices
        .windows(2)
        .map(|w| w[1].1 - w[0].1)
        .filter(|&d| d > 0.0)
        .collect();
    let ok = inversions.is_empty() || (inversions.len() == 1 && inversions[0] <= TREND_SLACK);
    let listing: Vec<_> = dices
        .iter()
        .map(|(p, d)| format!("p={p}: {d:.4}"))
        .collect();
    verdict(ok, listing.join(", "))
}

fn step_sweep(runs: &[(usize, &Run)]) -> Verdict {
    let mut csv = String::from("steps,final_dice,final_jac_pct,mean_epoch_ms\n");
    for (steps, run) in runs {
        writeln!(
            csv,
            "{steps},{},{},{:.3}",
            run.dice(),
            run.jac(),
            run.mean_epoch_ms()
        )
        .unwrap();
    }
    let path = artifacts().join("step_sweep.csv");
    std::fs::write(&path, &csv).unwrap();
    let written = std::fs::read_to_string(&path).unwrap();
    let complete = SWEEP_STEPS
        .iter()
        .all(|s| written.lines().any(|l| l.starts_with(&format!("{s},"))));
    let listing: Vec<_> = runs
        .iter()
        .map(|(s, r)| format!("{s}: {:.4} @ {:.0} ms", r.dice(), r.mean_epoch_ms()))
        .collect();
    verdict(
        complete,
        format!("{} -> {}", listing.join(", "), path.display()),
    )
}

fn metrics_oracles() -> Verdict {
    let g = Grid::cube(16).unwrap();
    let cube = |x0: usize| {
        LabelVolume::from_fn(g, move |[i, j, k]| {
            u16::from((x0..x0 + 8).contains(&i) && (4..12).contains(&j) && (4..12).contains(&k))
        })
    };
    let d = dice(&cube(2), &cube(6), &[1]).unwrap().mean;

    let a = 0.3f32;
    let linear = DisplacementField::from_fn(g, |[i, _, _]| [a * i as f32, 0.0, 0.0]).unwrap();
    let det = jacobian_det(&linear);
    let det_err = det
        .data()
        .iter()
        .map(|&v| (v as f64 - (1.0 + a as f64)).abs())
        .fold(0.0, f64::max);

    let shift = DisplacementField::constant(g, [1.7, -2.2, 0.4]);
    let pct = pct_nondiffeo(&shift, &VoxelMask::all(g)).unwrap();
    verdict(
        d == 0.5 && det_err < 1e-6 && pct == 0.0,
        format!("shifted cube dice {d}, linear field det error {det_err:.1e}, translation folding {pct}%"),
    )
}

fn formats() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let pair = make_pair(
        &PhantomSpec {
            dims: [16; 3],
            ..PhantomSpec::default()
        },
        &FieldSpec::default(),
        SEED,
    )
    .unwrap();
    let labels = pair.fixed_labels.clone().unwrap();
    let truth = pair.truth_field.clone().unwrap();
    let model = PredictorParams::init(Architecture::default(), SEED).unwrap();
    write_volume(&p("v.ofgv"), &pair.fixed).unwrap();
    write_field(&p("f.ofgd"), &truth).unwrap();
    write_labels(&p("l.ofgl"), &labels).unwrap();
    write_checkpoint(&p("m.ofgp"), &model).unwrap();
    let round_trip = read_volume(&p("v.ofgv")).unwrap() == pair.fixed
        && read_field(&p("f.ofgd")).unwrap() == truth
        && read_labels(&p("l.ofgl")).unwrap() == labels
        && read_checkpoint(&p("m.ofgp")).unwrap().values() == model.values();
    let bit_exact = round_trip
        && std::fs::read(p("v.ofgv")).unwrap().len() == 4 + 4 + 12 + 12 + 4 + 4 * 16usize.pow(3);

    let corrupt = |src: &str, dst: &str, f: &dyn Fn(&mut Vec<u8>)| {
        let mut bytes = std::fs::read(p(src)).unwrap();
        f(&mut bytes);
        std::fs::write(p(dst), bytes).unwrap();
    };
    corrupt("v.ofgv", "magic.ofgv", &|b| b[..4].copy_from_slice(b"ABCD"));
    corrupt("v.ofgv", "short.ofgv", &|b| b.truncate(30));
    corrupt("v.ofgv", "version.ofgv", &|b| b[4] = 9);
    corrupt("m.ofgp", "short.ofgp", &|b| {
        let n = b.len() - 8;
        b.truncate(n)
    });
    let messages = [
        read_volume(&p("magic.ofgv")).unwrap_err().to_string(),
        read_volume(&p("short.ofgv")).unwrap_err().to_string(),
        read_volume(&p("version.ofgv")).unwrap_err().to_string(),
    ];
    let structured = messages[0].contains("ABCD")
        && messages[1].contains("expected")
        && messages[1].contains("30")
        && messages[2].contains('9');

    let fixed = p("v.ofgv");
    let register = |f: &Path, extra: &[&str]| {
        let mut args = vec![
            "register",
            "--fixed",
            f.to_str().unwrap(),
            "--moving",
            fixed.to_str().unwrap(),
        ];
        let out = p("u.ofgd");
        args.extend(["--out", out.to_str().unwrap()]);
        args.extend(extra);
        ofg(&args).status.code()
    };
    let ckpt = p("short.ofgp");
    let codes = [
        register(&p("magic.ofgv"), &[]),
        register(&p("short.ofgv"), &[]),
        register(&p("version.ofgv"), &[]),
        register(&fixed, &["--ckpt", ckpt.to_str().unwrap()]),
        register(&fixed, &["--steps", "3", "--set", "optim.lr=3e38"]),
    ];
    let codes_ok = codes == [Some(3), Some(3), Some(3), Some(3), Some(4)];
    verdict(
        bit_exact && structured && codes_ok,
        format!(
            "round trips {}, structured errors {}, exit codes {:?} (want 3,3,3,3,4)",
            if bit_exact { "exact" } else { "differ" },
            if structured { "ok" } else { "missing detail" },
            codes.map(|c| c.unwrap_or(-1))
        ),
    )
}

fn main() -> ExitCode {
    let mut failed = Vec::new();
    let mut report = |n: usize, v: Verdict| {
        let known = KNOWN_FAILURES.contains(&n);
        let status = match (v.pass, known) {
            (true, _) => "PASS",
            (false, false) => "FAIL",
            (false, true) => "FAIL (known)",
        };
        println!("criterion {n:>2} {status}: {}", v.detail);
        if !v.pass {
            failed.push(n);
        }
    };

    report(1, gradient_gate());

    let start = Instant::now();
    let refine_csv = refine_log();
    let refine_wall = start.elapsed();
    std::fs::write(artifacts().join("refine.csv"), &refine_csv).unwrap();
    report(2, optimizer_efficacy(&refine_csv, refine_wall));

    let data = dataset();
    let ofg = Run::new(&data, &config(TrainMode::Ofg), "ofg");
    report(3, pseudo_label_sanity(&ofg));

    let unsup = Run::new(&data, &config(TrainMode::Unsupervised), "unsup");
    report(4, ofg_vs_unsup(&ofg, &unsup));

    let mut st_cfg = config(TrainMode::SelfTrain);
    st_cfg.selftrain.stage_len = 10;
    st_cfg.selftrain.label_opt_steps = 0;
    let st = Run::new(&data, &st_cfg, "selftrain");
    report(5, ofg_vs_selftrain(&ofg, &st));

    let mut trend = Vec::new();
    for p in [1.0, 0.5, 0.0] {
        let mut cfg = config(TrainMode::BlendProbabilistic);
        cfg.blend.prob = p;
        trend.push((p, Run::new(&data, &cfg, &format!("blend_prob_{p}")).dice()));
    }
    report(6, intensity_trend(&trend));

    let mut sweep = Vec::new();
    for steps in SWEEP_STEPS {
        if steps == config(TrainMode::Ofg).optim.steps {
            continue;
        }
        let mut cfg = config(TrainMode::Ofg);
        cfg.optim.steps = steps;
        sweep.push((steps, Run::new(&data, &cfg, &format!("ofg_steps_{steps}"))));
    }
    let mut rows: Vec<(usize, &Run)> = sweep.iter().map(|(s, r)| (*s, r)).collect();
    rows.push((config(TrainMode::Ofg).optim.steps, &ofg));
    rows.sort_by_key(|(s, _)| *s);
    report(7, step_sweep(&rows));

    report(8, metrics_oracles());

    let refine_again = refine_log();
    let ofg_again = train(&data, &config(TrainMode::Ofg)).unwrap();
    let unsup_again = train(&data, &config(TrainMode::Unsupervised)).unwrap();
    let same = [
        refine_again == refine_csv,
        without_wall(&ofg_again.to_csv()) == without_wall(&ofg.outcome.to_csv()),
        without_wall(&unsup_again.to_csv()) == without_wall(&unsup.outcome.to_csv()),
    ];
    report(
        9,
        verdict(
            same.iter().all(|&s| s),
            format!("refine log / ofg log / unsup log identical: {same:?} (wall_ms excluded)"),
        ),
    );

    report(10, formats());

    let unexpected: Vec<_> = failed
        .iter()
        .filter(|n| !KNOWN_FAILURES.contains(n))
        .collect();
    let fixed: Vec<_> = KNOWN_FAILURES
        .iter()
        .filter(|n| !failed.contains(n))
        .collect();
    println!("failed criteria: {failed:?}, known failures: {KNOWN_FAILURES:?}");
    if !fixed.is_empty() {
        println!("known failures now passing: {fixed:?}");
    }
    if unexpected.is_empty() && fixed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected outcome");
        ExitCode::FAILURE
    }
}
