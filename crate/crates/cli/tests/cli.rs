use std::path::Path;
use std::process::{Command, Output};

use ofg_core::predictor::{write_checkpoint, Architecture, PredictorParams};

fn ofg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ofg"))
        .args(args)
        .output()
        .expect("spawn ofg")
}

fn ok(args: &[&str]) -> String {
    let out = ofg(args);
    assert!(
        out.status.success(),
        "ofg {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    ofg(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, pairs: usize) {
    ok(&[
        "gen-data",
        "--out",
        s(dir),
        "--pairs",
        &pairs.to_string(),
        "--seed",
        "3",
        "--dims",
        "16",
    ]);
}

fn mean_dice(csv: &Path) -> f64 {
    let text = std::fs::read_to_string(csv).unwrap();
    let last = text.lines().last().unwrap();
    assert!(last.starts_with("mean,"));
    last.split(',').nth(1).unwrap().parse().unwrap()
}

const SMALL: [&str; 6] = [
    "--set",
    "epochs=4",
    "--set",
    "val_pairs=2",
    "--set",
    "seed=5",
];

#[test]
fn train_then_eval_beats_untrained() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 8);
    let run = tmp.path().join("run");
    let mut args = vec![
        "train",
        "--mode",
        "ofg",
        "--data",
        s(&data),
        "--out",
        s(&run),
    ];
    args.extend(SMALL);
    let stdout = ok(&args);
    assert!(stdout.contains("final dice"));
    assert!(stdout.contains("final jac_pct"));
    for f in [
        "config.txt",
        "metrics.csv",
        "ckpt_best.ofgp",
        "ckpt_last.ofgp",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("epoch,mode,loss,dice,ncc,jac_pct,refine_drop,wall_ms\n"));

    let untrained = tmp.path().join("init.ofgp");
    write_checkpoint(
        &untrained,
        &PredictorParams::init(Architecture::default(), 0).unwrap(),
    )
    .unwrap();
    let (a, b) = (tmp.path().join("a.csv"), tmp.path().join("b.csv"));
    let best = run.join("ckpt_best.ofgp");
    ok(&[
        "eval",
        "--data",
        s(&data),
        "--ckpt",
        s(&best),
        "--out",
        s(&a),
    ]);
    ok(&[
        "eval",
        "--data",
        s(&data),
        "--ckpt",
        s(&untrained),
        "--out",
        s(&b),
    ]);
    assert!(mean_dice(&a) >= mean_dice(&b));
    let header = std::fs::read_to_string(&a).unwrap();
    assert!(header.starts_with("pair,dice,ncc,jac_pct,max_mag,mean_mag,epe\n"));

    // The echoed config reproduces the run.
    let again = tmp.path().join("again");
    let cfg = run.join("config.txt");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&again),
    ]);
    let strip = |p: &Path| -> Vec<String> {
        std::fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect()
    };
    assert_eq!(
        strip(&run.join("metrics.csv")),
        strip(&again.join("metrics.csv"))
    );
}

#[test]
fn train_refuses_existing_out_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 3);
    let out = tmp.path().join("out");
    std::fs::create_dir(&out).unwrap();
    std::fs::write(out.join("keep"), "x").unwrap();
    let mut args = vec!["train", "--data", s(&data), "--out", s(&out)];
    args.extend(["--set", "epochs=1", "--set", "val_pairs=1"]);
    assert_eq!(code(&args), 2);
    assert!(!out.join("metrics.csv").exists());
    args.push("--force");
    assert_eq!(code(&args), 0);
    assert!(out.join("metrics.csv").exists());
    assert_eq!(code(&["gen-data", "--out", s(&data), "--pairs", "2"]), 2);
}

#[test]
fn register_trace_settles() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 1);
    let pair = data.join("pair_000");
    let out = tmp.path().join("u.ofgd");
    let stdout = ok(&[
        "register",
        "--fixed",
        s(&pair.join("fixed.ofgv")),
        "--moving",
        s(&pair.join("moving.ofgv")),
        "--steps",
        "10",
        "--out",
        s(&out),
    ]);
    let trace: Vec<f64> = stdout
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(trace.len(), 11);
    assert!(trace[3..].windows(2).all(|w| w[1] <= w[0]), "{trace:?}");
    assert!(out.exists());

    let eval = tmp.path().join("e.csv");
    ok(&[
        "eval",
        "--data",
        s(&data),
        "--field",
        s(&out),
        "--out",
        s(&eval),
    ]);
    let zero = tmp.path().join("z.csv");
    ok(&["eval", "--data", s(&data), "--out", s(&zero)]);
    assert!(mean_dice(&eval) > mean_dice(&zero));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 2);
    let out = tmp.path().join("o");
    let fixed = data.join("pair_000/fixed.ofgv");
    let moving = data.join("pair_000/moving.ofgv");

    assert_eq!(
        code(&[
            "train",
            "--data",
            s(&data),
            "--out",
            s(&out),
            "--set",
            "bogus=1"
        ]),
        2
    );
    assert_eq!(
        code(&[
            "train",
            "--data",
            s(&data),
            "--out",
            s(&out),
            "--mode",
            "nope"
        ]),
        2
    );
    assert_eq!(
        code(&[
            "train",
            "--data",
            s(&data),
            "--out",
            s(&out),
            "--set",
            "lr=-1"
        ]),
        2
    );
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "epochs = 3\nlr 0.1\n").unwrap();
    assert_eq!(
        code(&[
            "train",
            "--config",
            s(&cfg),
            "--data",
            s(&data),
            "--out",
            s(&out)
        ]),
        2
    );

    let missing = tmp.path().join("missing");
    assert_eq!(code(&["eval", "--data", s(&missing), "--out", s(&out)]), 3);
    let bytes = std::fs::read(&fixed).unwrap();
    let truncated = tmp.path().join("t.ofgv");
    std::fs::write(&truncated, &bytes[..bytes.len() - 4]).unwrap();
    let field = tmp.path().join("u.ofgd");
    let reg = |f: &Path, extra: &[&str]| {
        let mut a = vec![
            "register",
            "--fixed",
            s(f),
            "--moving",
            s(&moving),
            "--out",
            s(&field),
        ];
        a.extend(extra);
        code(&a)
    };
    assert_eq!(reg(&truncated, &[]), 3);
    let mut corrupt = bytes.clone();
    corrupt[..4].copy_from_slice(b"XXXX");
    std::fs::write(&truncated, &corrupt).unwrap();
    assert_eq!(reg(&truncated, &[]), 3);
    assert_eq!(reg(&fixed, &["--ckpt", s(&fixed)]), 3);

    assert_eq!(reg(&fixed, &["--steps", "3", "--set", "optim.lr=3e38"]), 4);
    assert!(!field.exists());
    assert_eq!(reg(&fixed, &[]), 0);
}

#[test]
fn gradcheck_passes() {
    let stdout = ok(&["gradcheck", "--seed", "2"]);
    let lines: Vec<_> = stdout.lines().collect();
    assert!(lines.len() >= 9);
    assert!(lines.iter().all(|l| l.starts_with("PASS")), "{stdout}");
}
