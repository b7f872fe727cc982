//! Acceptance gate A1-A6. Runs as a plain binary so every criterion prints
//! one PASS/FAIL line; exits non-zero if any fails.

#[path = "../../core/tests/support/oracle.rs"]
mod oracle;

use std::fs;
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use crossfuse_core::census::{self, CensusShape};
use crossfuse_core::{metrics, selftest, SeededRng};

const BIN: &str = env!("CARGO_BIN_EXE_crossfuse");

// A1
const VJP_EPS: f64 = 1e-5;
const VJP_TOL: f64 = 1e-4;
const MIN_OPS: usize = 10;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(120);
// A2
const INVARIANT_BUDGET: Duration = Duration::from_secs(60);
// A3
const ORACLE_INSTANCES: usize = 200;
const ORACLE_TOL: f64 = 1e-9;
// A4
const A4_SEED: u64 = 0;
const A4_TRAIN: usize = 200;
const A4_VAL: usize = 60;
const A4_EPOCHS: usize = 60;
const A4_MARGIN: f64 = 0.10;
const ABLATION_BUDGET: Duration = Duration::from_secs(90 * 60);

struct Outcome {
    id: &'static str,
    passed: bool,
    detail: String,
}

fn report(id: &'static str, passed: bool, detail: String) -> Outcome {
    println!("{id} {}  {detail}", if passed { "PASS" } else { "FAIL" });
    Outcome { id, passed, detail }
}

fn crossfuse(args: &[&str], cwd: &Path) -> (i32, String) {
    let out = Command::new(BIN)
        .args(args)
        .current_dir(cwd)
        .stderr(Stdio::inherit())
        .output()
        .expect("binary runs");
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stdout).into_owned())
}

fn a1() -> Outcome {
    let start = Instant::now();
    let cases = census::census(CensusShape::default(), 0, false).expect("census builds");
    let outcomes = census::run(&cases, VJP_EPS, VJP_TOL).expect("checks run");
    let elapsed = start.elapsed();
    let worst = outcomes.iter().max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error)).unwrap();
    let composites = ["deca", "depa", "bidir_focus"].iter().all(|n| outcomes.iter().any(|o| o.name == *n));
    let dir = tempfile::tempdir().unwrap();
    let (clean, _) = crossfuse(&["gradcheck"], dir.path());
    let (corrupt, _) = crossfuse(&["gradcheck", "--corrupt-vjp"], dir.path());
    let passed = outcomes.len() >= MIN_OPS
        && outcomes.iter().all(|o| o.passed)
        && composites
        && elapsed < GRADCHECK_BUDGET
        && clean == 0
        && corrupt == 1;
    report(
        "A1",
        passed,
        format!(
            "gradients: {} ops, worst {:.2e} ({}) < {VJP_TOL:e}; composites covered {composites}; {:.1}s; exit codes clean {clean}, corrupted {corrupt}",
            outcomes.len(),
            worst.report.max_rel_error,
            worst.name,
            elapsed.as_secs_f64()
        ),
    )
}

fn a2() -> Outcome {
    let start = Instant::now();
    let checks = selftest::run_all(0).expect("suite runs");
    let elapsed = start.elapsed();
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
    let dir = tempfile::tempdir().unwrap();
    let (code, _) = crossfuse(&["selftest"], dir.path());
    report(
        "A2",
        failed.is_empty() && code == 0 && elapsed < INVARIANT_BUDGET,
        format!(
            "invariants: {}/{} hold {:?}; {:.2}s; selftest exit {code}",
            checks.len() - failed.len(),
            checks.len(),
            failed,
            elapsed.as_secs_f64()
        ),
    )
}

fn a3() -> Outcome {
    let mut rng = SeededRng::new(0xA3);
    let mut worst: f64 = 0.0;
    for _ in 0..ORACLE_INSTANCES {
        let (dets, gts, _) = oracle::micro_instance(&mut rng);
        let (m50, m5095, _) = metrics::map_metrics(&dets, &gts);
        let (b50, b5095) = oracle::brute_map(&dets, &gts);
        worst = worst.max((m50 - b50).abs()).max((m5095 - b5095).abs());
    }
    let mut stair: f64 = 0.0;
    let cases = oracle::lamr_staircases();
    for (dets, gts, n, want) in &cases {
        stair = stair.max((metrics::lamr(dets, gts, *n).unwrap() - want).abs());
    }
    report(
        "A3",
        worst <= ORACLE_TOL && stair <= ORACLE_TOL,
        format!(
            "metric oracle: {ORACLE_INSTANCES} instances, worst mAP diff {worst:.1e}; {} LAMR staircases, worst diff {stair:.1e}; tolerance {ORACLE_TOL:e}",
            cases.len()
        ),
    )
}

struct Row {
    name: String,
    marks: (bool, bool, bool),
    map50: f64,
    map50_95: f64,
}

fn parse_ablation(csv: &str) -> Vec<Row> {
    csv.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            Row {
                name: f[0].to_string(),
                marks: (f[2] == "x", f[3] == "x", f[4] == "x"),
                map50: f[5].parse().unwrap(),
                map50_95: f[6].parse().unwrap(),
            }
        })
        .collect()
}

/// A4 and A5 share one ablation run.
fn a4_a5(work: &Path) -> (Outcome, Outcome) {
    let seed = A4_SEED.to_string();
    let (train, val) = (A4_TRAIN.to_string(), A4_VAL.to_string());
    let (code, _) = crossfuse(
        &["synth", "--seed", &seed, "--out", "data", "--train", &train, "--val", &val, "--test", "0"],
        work,
    );
    assert_eq!(code, 0, "dataset synthesis failed");
    fs::write(work.join("a4.toml"), format!("epochs = {A4_EPOCHS}\ndataset.root = \"data\"\n")).unwrap();

    let start = Instant::now();
    // stream progress; the table is read back from disk
    let status = Command::new(BIN)
        .args(["ablation", "--config", "a4.toml", "--seed", &seed, "--out", "ablation"])
        .current_dir(work)
        .stdout(Stdio::inherit())
        .status()
        .expect("binary runs");
    let elapsed = start.elapsed();
    let csv = fs::read_to_string(work.join("ablation/ablation.csv")).unwrap_or_default();
    let rows = parse_ablation(&csv);
    let find = |name: &str| rows.iter().find(|r| r.name == name).map(|r| r.map50);
    let (full, vis, ir) = (find("+deca+depa+focus"), find("visible_only"), find("infrared_only"));

    let a4 = match (full, vis, ir) {
        (Some(f), Some(v), Some(i)) => report(
            "A4",
            status.success() && f - v >= A4_MARGIN && f - i >= A4_MARGIN && elapsed < ABLATION_BUDGET,
            format!(
                "complementarity: full {f:.4} vs visible-only {v:.4} (+{:.1} pts) and infrared-only {i:.4} (+{:.1} pts), margin {:.0} pts; 7-row table in {:.1} min",
                100.0 * (f - v),
                100.0 * (f - i),
                100.0 * A4_MARGIN,
                elapsed.as_secs_f64() / 60.0
            ),
        ),
        _ => report("A4", false, format!("ablation produced no usable table (status {status})")),
    };

    let grid = [
        (false, false, false),
        (true, false, false),
        (false, true, false),
        (true, true, false),
        (true, true, true),
    ];
    let structured = rows.len() == 7 && rows.iter().take(5).map(|r| r.marks).eq(grid);
    let mut listing = String::new();
    for r in &rows {
        listing += &format!("\n     {:<18} mAP50 {:.4}  mAP50-95 {:.4}", r.name, r.map50, r.map50_95);
    }
    let a5 = report(
        "A5",
        structured,
        format!("ablation table (reported, ordering not asserted): {} rows, component grid {}{listing}", rows.len(), if structured { "matches" } else { "WRONG" }),
    );
    (a4, a5)
}

fn a6(work: &Path) -> Outcome {
    fs::write(work.join("a6.toml"), "epochs = 2\ndataset.root = \"data6\"\n").unwrap();
    let mut files: Vec<Vec<Vec<u8>>> = Vec::new();
    for k in 0..2 {
        let (run, data) = (format!("run{k}"), "data6".to_string());
        let (ckpt, eval_dir) = (format!("{run}/checkpoint.ckpt"), format!("{run}/eval"));
        if k == 1 {
            fs::remove_dir_all(work.join(&data)).unwrap();
        }
        let steps: [Vec<&str>; 3] = [
            vec!["synth", "--config", "a6.toml", "--seed", "5", "--train", "24", "--val", "8", "--test", "0"],
            vec!["train", "--config", "a6.toml", "--seed", "5", "--out", &run],
            vec!["eval", "--config", "a6.toml", "--checkpoint", &ckpt, "--out", &eval_dir],
        ];
        for s in &steps {
            let (code, _) = crossfuse(s, work);
            assert_eq!(code, 0, "{s:?}");
        }
        let read = |p: String| fs::read(work.join(p)).unwrap();
        files.push(vec![
            read("data6/images/visible/000003.png".into()),
            read("data6/labels/000030.txt".into()),
            read("data6/manifest.json".into()),
            read(format!("{run}/log.csv")),
            read(format!("{run}/checkpoint.ckpt")),
            read(format!("{run}/eval/report.json")),
            read(format!("{run}/eval/detections.jsonl")),
        ]);
    }
    let names = ["image", "labels", "manifest", "loss log", "checkpoint", "eval report", "detections"];
    let differing: Vec<_> = names.iter().zip(files[0].iter().zip(&files[1])).filter(|(_, (a, b))| a != b).map(|(n, _)| *n).collect();
    report(
        "A6",
        differing.is_empty(),
        format!("determinism: synth/train/eval rerun with the same seed, {} artefacts compared byte for byte, differing {differing:?}", names.len()),
    )
}

fn main() {
    // `cargo test -- --list` and filters from other targets must not start the gate
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    if args.iter().any(|a| !a.starts_with('-') && !"acceptance".contains(a.as_str())) {
        return;
    }
    let work = tempfile::tempdir().expect("scratch directory");
    let mut all = vec![a1(), a2(), a3()];
    let (a4, a5) = a4_a5(work.path());
    all.push(a4);
    all.push(a5);
    all.push(a6(work.path()));

    println!("\nacceptance summary");
    for o in &all {
        println!("  {} {}", o.id, if o.passed { "PASS" } else { "FAIL" });
    }
    let failed: Vec<_> = all.iter().filter(|o| !o.passed).collect();
    if !failed.is_empty() {
        for o in &failed {
            eprintln!("{} failed: {}", o.id, o.detail);
        }
        std::process::exit(1);
    }
}
