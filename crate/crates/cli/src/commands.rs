use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use crossfuse_core::ablation::{self, RowResult};
use crossfuse_core::census::{self, CensusShape};
use crossfuse_core::metrics::EvalReport;
use crossfuse_core::model::train::PreparedSet;
use crossfuse_core::model::{Checkpoint, DecodeConfig, EpochLog, TrainConfig, Trainer};
use crossfuse_core::selftest;
use crossfuse_core::synth::{self, Dataset, PairedSample, CLASS_NAMES, NUM_CLASSES};
use serde::Serialize;

use crate::config::ExperimentConfig;

/// Bad invocation, bad configuration, or missing inputs (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// A check ran and did not pass (exit code 1).
#[derive(Debug)]
pub struct VerificationFailed(pub String);

impl fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for VerificationFailed {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;
pub const CONFIG_ECHO: &str = "config.toml";
pub const LOG_FILE: &str = "log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const REPORT_FILE: &str = "report.json";
pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const ABLATION_FILE: &str = "ablation.csv";

/// Flags shared by every subcommand.
#[derive(Clone, Debug, Default)]
pub struct Globals {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub force: bool,
}

impl Globals {
    pub fn effective_config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path).map_err(|e| usage(format!("{e:#}")))?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

fn is_nonempty_dir(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Creates `dir`, refusing one that already has content unless forced.
fn claim_output(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && !dir.is_dir() {
        return Err(usage(format!("output path {} exists and is not a directory", dir.display())));
    }
    if is_nonempty_dir(dir) && !force {
        return Err(usage(format!(
            "output directory {} is not empty (pass --force to overwrite)",
            dir.display()
        )));
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn echo_config(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let text = cfg.to_toml();
    println!("# effective config\n{text}");
    write(&dir.join(CONFIG_ECHO), text)
}

fn load_dataset(root: &Path) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(usage(format!("dataset directory {} does not exist", root.display())));
    }
    synth::read_dataset(root).map_err(|e| usage(format!("reading dataset {}: {e}", root.display())))
}

fn prepare(ds: &Dataset, split: &str, cfg: &TrainConfig) -> Result<PreparedSet> {
    let samples = ds.split(split).map_err(|e| usage(e.to_string()))?;
    check_classes(&samples, cfg.model.num_classes, &ds.root)?;
    PreparedSet::new(&samples, cfg.model.image_size).map_err(|e| usage(format!("split `{split}`: {e}")))
}

fn check_classes(samples: &[PairedSample], num_classes: usize, root: &Path) -> Result<()> {
    let seen = samples.iter().flat_map(|s| &s.labels).map(|l| l.class).max();
    if let Some(top) = seen.filter(|&c| c >= num_classes) {
        return Err(usage(format!(
            "dataset {} has class {top} but the model predicts {num_classes} classes",
            root.display()
        )));
    }
    Ok(())
}

pub fn synth(g: &Globals, n_train: Option<usize>, n_val: Option<usize>, n_test: Option<usize>) -> Result<()> {
    let mut cfg = g.effective_config()?;
    cfg.dataset.n_train = n_train.unwrap_or(cfg.dataset.n_train);
    cfg.dataset.n_val = n_val.unwrap_or(cfg.dataset.n_val);
    cfg.dataset.n_test = n_test.unwrap_or(cfg.dataset.n_test);
    let root = g.out.clone().unwrap_or_else(|| cfg.dataset.root.clone());
    cfg.dataset.root = root.clone();
    claim_output(&root, g.force)?;
    if g.force {
        // stale samples from an earlier, larger run would otherwise survive
        for sub in ["images", "labels"] {
            let p = root.join(sub);
            if p.exists() {
                fs::remove_dir_all(&p).with_context(|| format!("clearing {}", p.display()))?;
            }
        }
    }
    echo_config(&cfg, &root)?;
    let d = &cfg.dataset;
    let (samples, manifest) = synth::synthesize(cfg.seed, &cfg.scene(), d.n_train, d.n_val, d.n_test);
    synth::write_dataset(&samples, &manifest, &root)?;
    let mut per_class = [0usize; NUM_CLASSES];
    for l in samples.iter().flat_map(|s| &s.labels) {
        per_class[l.class] += 1;
    }
    println!(
        "wrote {} pairs to {} (train {}, val {}, test {})",
        samples.len(),
        root.display(),
        manifest.train.len(),
        manifest.val.len(),
        manifest.test.len()
    );
    for (name, n) in CLASS_NAMES.iter().zip(per_class) {
        println!("  {name:<14} {n}");
    }
    Ok(())
}

pub fn gradcheck(g: &Globals, corrupt: bool) -> Result<()> {
    let cfg = g.effective_config()?;
    let start = Instant::now();
    let cases = census::census(CensusShape::default(), cfg.seed, corrupt)?;
    let outcomes = census::run(&cases, GRADCHECK_EPS, GRADCHECK_TOL)?;
    println!("{:<26} {:>12}  worst coordinate", "op", "max rel err");
    for o in &outcomes {
        println!(
            "{:<26} {:>12.3e}  {}{}",
            o.name,
            o.report.max_rel_error,
            o.report.worst,
            if o.passed { "" } else { "  FAIL" }
        );
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
    println!(
        "{} ops, {} failed, tolerance {GRADCHECK_TOL:e}, {:.1}s",
        outcomes.len(),
        failed.len(),
        start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        return Err(VerificationFailed(format!("gradient check failed for: {}", failed.join(", "))).into());
    }
    Ok(())
}

pub fn selftest(g: &Globals) -> Result<()> {
    let cfg = g.effective_config()?;
    let checks = selftest::run_all(cfg.seed)?;
    for c in &checks {
        println!("{} {:<44} {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
    if !failed.is_empty() {
        return Err(VerificationFailed(format!("invariants violated: {}", failed.join(", "))).into());
    }
    println!("{} invariants hold", checks.len());
    Ok(())
}

pub const LOG_HEADER: &str = "epoch,lr,objectness,classification,box_iou,total,val_map50";

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for e in log {
        let val = e.val_map50.map(|v| v.to_string()).unwrap_or_default();
        s += &format!(
            "{},{},{},{},{},{},{}\n",
            e.epoch, e.lr, e.loss.objectness, e.loss.classification, e.loss.box_iou, e.loss.total, val
        );
    }
    s
}

pub fn train(g: &Globals, resume: Option<&Path>) -> Result<()> {
    let cfg = g.effective_config()?;
    let out = g.out.clone().unwrap_or_else(|| cfg.out.dir.clone());
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path).map_err(|e| usage(e.to_string()))?;
            println!("resuming from {} after epoch {}", path.display(), ckpt.epoch);
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            ckpt.into_trainer()?
        }
        None => {
            let tc = cfg.train().map_err(|e| usage(e.to_string()))?;
            claim_output(&out, g.force)?;
            Trainer::new(tc)?
        }
    };
    echo_config(&cfg, &out)?;
    let ds = load_dataset(&cfg.dataset.root)?;
    let train = prepare(&ds, "train", &trainer.cfg)?;
    let val = prepare(&ds, "val", &trainer.cfg)?;
    if train.is_empty() {
        return Err(usage(format!("dataset {} has an empty train split", ds.root.display())));
    }
    println!("training on {} pairs, validating on {}", train.len(), val.len());
    let start = Instant::now();
    trainer.run(&train, Some(&val), |t, e| {
        println!(
            "epoch {:>3}  lr {:.2e}  obj {:.4}  cls {:.4}  box {:.4}  total {:.4}  val mAP50 {}  ({:.0}s)",
            e.epoch,
            e.lr,
            e.loss.objectness,
            e.loss.classification,
            e.loss.box_iou,
            e.loss.total,
            e.val_map50.map_or("-".into(), |v| format!("{v:.4}")),
            start.elapsed().as_secs_f64()
        );
        let log_path = out.join(LOG_FILE);
        fs::write(&log_path, log_csv(&t.log)).map_err(|e| crossfuse_core::Error::io(&log_path, e))?;
        Checkpoint::capture(t).save(&out.join(CHECKPOINT_FILE))
    })?;
    println!("checkpoint and log in {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    split: &'a str,
    n_images: usize,
    #[serde(flatten)]
    report: &'a EvalReport,
}

pub fn eval(g: &Globals, checkpoint: &Path, split: &str) -> Result<()> {
    let cfg = g.effective_config()?;
    let ckpt = Checkpoint::load(checkpoint).map_err(|e| usage(e.to_string()))?;
    let trainer = ckpt.into_trainer()?;
    let ds = load_dataset(&cfg.dataset.root)?;
    let data = prepare(&ds, split, &trainer.cfg)?;
    if data.is_empty() {
        return Err(usage(format!("split `{split}` of {} is empty", ds.root.display())));
    }
    let out = g.out.clone().unwrap_or_else(|| cfg.out.dir.join(format!("eval-{split}")));
    claim_output(&out, g.force)?;
    echo_config(&cfg, &out)?;

    let dets = trainer.detect(&data, &DecodeConfig::EVAL)?;
    let report = crossfuse_core::metrics::evaluate(&dets, &data.ground_truth(), data.len())?;
    let mut lines = String::new();
    for d in &dets {
        lines += &serde_json::to_string(d)?;
        lines.push('\n');
    }
    write(&out.join(DETECTIONS_FILE), lines)?;
    let json = serde_json::to_string_pretty(&EvalOutput {
        split,
        n_images: data.len(),
        report: &report,
    })?;
    write(&out.join(REPORT_FILE), &json)?;
    println!(
        "{split}: mAP50 {:.4}  mAP50-95 {:.4}  LAMR {:.4}  ({} images, {} detections)",
        report.map50,
        report.map50_95,
        report.lamr,
        data.len(),
        dets.len()
    );
    for (class, c) in &report.per_class {
        let name = CLASS_NAMES.get(*class).copied().unwrap_or("?");
        println!("  {name:<14} AP50 {:.4}  AP50-95 {:.4}  ({} boxes)", c.ap50, c.ap50_95, c.n_gt);
    }
    println!("report in {}", out.join(REPORT_FILE).display());
    Ok(())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Per-row medians across seeds.
fn combine(per_seed: &[Vec<RowResult>]) -> Vec<RowResult> {
    (0..per_seed[0].len())
        .map(|i| {
            let pick = |f: fn(&RowResult) -> f64| median(per_seed.iter().map(|rows| f(&rows[i])).collect());
            let mut r = per_seed[0][i].clone();
            r.report.map50 = pick(|r| r.report.map50);
            r.report.map50_95 = pick(|r| r.report.map50_95);
            r.report.lamr = pick(|r| r.report.lamr);
            r
        })
        .collect()
}

pub fn ablation(g: &Globals, seeds: usize) -> Result<()> {
    if seeds == 0 {
        bail!(usage("--seeds must be at least 1"));
    }
    let cfg = g.effective_config()?;
    let base = cfg.train().map_err(|e| usage(e.to_string()))?;
    let out = g.out.clone().unwrap_or_else(|| cfg.out.dir.join("ablation"));
    let ds = load_dataset(&cfg.dataset.root)?;
    let train = prepare(&ds, "train", &base)?;
    let val = prepare(&ds, "val", &base)?;
    if train.is_empty() || val.is_empty() {
        return Err(usage(format!("dataset {} needs non-empty train and val splits", ds.root.display())));
    }
    claim_output(&out, g.force)?;
    echo_config(&cfg, &out)?;
    let mut per_seed = Vec::with_capacity(seeds);
    for k in 0..seeds as u64 {
        let seeded = TrainConfig {
            seed: base.seed + k,
            ..base
        };
        println!("seed {}: {} rows x {} epochs", seeded.seed, ablation::ROWS.len(), seeded.epochs);
        let rows = ablation::run(&seeded, &train, &val, |r| {
            println!(
                "  {:<18} mAP50 {:.4}  mAP50-95 {:.4}  LAMR {:.4}  ({:.0}s)",
                r.row.name, r.report.map50, r.report.map50_95, r.report.lamr, r.seconds
            );
            Ok(())
        })?;
        if seeds > 1 {
            write(&out.join(format!("ablation_seed{}.csv", seeded.seed)), ablation::to_csv(&rows))?;
        }
        per_seed.push(rows);
    }
    let table = if seeds > 1 { combine(&per_seed) } else { per_seed.remove(0) };
    let csv = ablation::to_csv(&table);
    write(&out.join(ABLATION_FILE), &csv)?;
    print!("{csv}");
    Ok(())
}
