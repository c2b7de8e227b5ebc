//! Files written for each run and the [`RunSummary`] read back from them.
//!
//! Run directory layout:
//!
//! ```text
//! config.toml               echo of the experiment configuration
//! summary.csv               selected-epoch metrics per seed, then mean/std rows
//! FAILED                    only after a failed run; holds the error
//! seed_<s>/metrics.csv      training steps and per-epoch evaluations
//! seed_<s>/selected.csv     selected-epoch metrics of this seed
//! seed_<s>/checkpoint.txt   selected student and teacher parameters
//! seed_<s>/flatness.csv     flatness curve (when enabled)
//! seed_<s>/robustness.csv   fused accuracy under modality noise
//! ```
//!
//! Split labels are `train`, `val` and `test_d<domain>`; with the `both`
//! evaluation model the student's rows repeat them with a `student_` prefix.

use std::path::{Path, PathBuf};
use std::time::Duration;

use mbcd_core::flatness::FlatnessCurve;
use mbcd_core::train::EvalMetrics;

use crate::config::{ExperimentConfig, FORMAT_VERSION};
use crate::error::{LabError, Result};
use crate::run::{EpochRecord, RunSeeds, SeedRun, SplitMetrics};
use crate::table::{mean_std, num, Table};

pub const CONFIG_FILE: &str = "config.toml";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const FAILED_FILE: &str = "FAILED";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SELECTED_FILE: &str = "selected.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const FLATNESS_FILE: &str = "flatness.csv";
pub const ROBUSTNESS_FILE: &str = "robustness.csv";

/// Split label of the training-step rows in `metrics.csv`.
pub const STEP_SPLIT: &str = "train_step";

pub fn seed_dir(run_dir: &Path, seed: u64) -> PathBuf {
    run_dir.join(format!("seed_{seed}"))
}

fn numbered(prefix: &str, m: usize) -> impl Iterator<Item = String> + '_ {
    (1..=m).map(move |k| format!("{prefix}_{k}"))
}

pub fn metrics_header(m: usize) -> Vec<String> {
    let mut h: Vec<String> = ["step", "epoch", "split", "loss_total", "loss_mm"].map(String::from).into();
    h.extend(numbered("loss_uni", m));
    h.push("loss_dis".into());
    h.push("acc_mm".into());
    for p in ["acc_uni", "s", "r", "p", "dropped"] {
        h.extend(numbered(p, m));
    }
    h
}

/// `(label, metrics)` for every split of one evaluation, student rows last.
pub fn labelled_splits<'a>(primary: &'a SplitMetrics, student: Option<&'a SplitMetrics>) -> Vec<(String, &'a EvalMetrics)> {
    let one = |s: &'a SplitMetrics, prefix: &str| {
        let mut out = vec![(format!("{prefix}train"), &s.train), (format!("{prefix}val"), &s.val)];
        out.extend(s.tests.iter().map(|(d, e)| (format!("{prefix}test_d{d}"), e)));
        out
    };
    let mut out = one(primary, "");
    if let Some(s) = student {
        out.extend(one(s, "student_"));
    }
    out
}

fn nums(v: &[f64]) -> impl Iterator<Item = String> + '_ {
    v.iter().map(|&x| num(x))
}

pub fn metrics_table(run: &SeedRun, m: usize) -> Table {
    let mut t = Table::new(metrics_header(m));
    let blank = || vec![String::new(); m];
    let mut epoch_rows = run.epochs.iter().peekable();
    let mut steps_done = 0u64;
    let flush_epoch = |t: &mut Table, rec: &EpochRecord, steps_done: u64| {
        for (label, e) in labelled_splits(&rec.primary, rec.student.as_ref()) {
            let mut row = vec![steps_done.to_string(), rec.epoch.to_string(), label, String::new(), num(e.loss_mm)];
            row.extend(nums(&e.loss_uni));
            row.push(String::new());
            row.push(num(e.acc_mm));
            row.extend(nums(&e.acc_uni));
            for _ in 0..4 {
                row.extend(blank());
            }
            t.push(row);
        }
    };
    for (epoch, s) in &run.steps {
        while let Some(rec) = epoch_rows.next_if(|r| r.epoch < *epoch) {
            flush_epoch(&mut t, rec, steps_done);
        }
        let mut row = vec![
            s.step.to_string(),
            epoch.to_string(),
            STEP_SPLIT.into(),
            num(s.loss_total),
            num(s.loss_mm),
        ];
        row.extend(nums(&s.loss_uni));
        row.push(num(s.loss_dis));
        row.push(num(s.acc_mm));
        row.extend(nums(&s.acc_uni));
        row.extend(nums(&s.stats.s));
        row.extend(nums(&s.stats.r));
        row.extend(nums(&s.stats.drop_prob));
        row.extend(s.stats.mask.iter().map(|&k| if k == 0.0 { "1" } else { "0" }.to_string()));
        t.push(row);
        steps_done = s.step + 1;
    }
    for rec in epoch_rows {
        flush_epoch(&mut t, rec, steps_done);
    }
    t
}

/// Evaluation of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitRow {
    pub split: String,
    pub n: usize,
    pub loss_mm: f64,
    pub acc_mm: f64,
    pub loss_uni: Vec<f64>,
    pub acc_uni: Vec<f64>,
}

impl SplitRow {
    pub fn new(split: String, e: &EvalMetrics) -> Self {
        SplitRow {
            split,
            n: e.n,
            loss_mm: e.loss_mm,
            acc_mm: e.acc_mm,
            loss_uni: e.loss_uni.clone(),
            acc_uni: e.acc_uni.clone(),
        }
    }
}

/// Per-epoch evaluation row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub epoch: usize,
    pub split: String,
    pub loss_mm: f64,
    pub acc_mm: f64,
    pub loss_uni: Vec<f64>,
    pub acc_uni: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessPoint {
    pub variance: f64,
    pub acc_mm: f64,
    pub loss_mm: f64,
    pub acc_uni: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedSummary {
    pub seed: u64,
    pub selected_epoch: usize,
    /// Every split evaluated at the selected epoch.
    pub selected: Vec<SplitRow>,
    pub curves: Vec<CurveRow>,
    pub flatness: Option<FlatnessCurve>,
    pub robustness: Vec<RobustnessPoint>,
}

impl SeedSummary {
    pub fn split(&self, label: &str) -> Option<&SplitRow> {
        self.selected.iter().find(|r| r.split == label)
    }

    /// Selected-epoch metrics on the first evaluated domain.
    pub fn first_test(&self) -> &SplitRow {
        self.selected
            .iter()
            .find(|r| r.split.starts_with("test_d"))
            .expect("every protocol evaluates at least one domain")
    }
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub format_version: u32,
    pub config: ExperimentConfig,
    pub dir: PathBuf,
    pub seeds: Vec<SeedSummary>,
    /// Measured in-process only; never written to disk.
    pub wall_clock: Option<Duration>,
}

impl PartialEq for RunSummary {
    fn eq(&self, other: &Self) -> bool {
        self.format_version == other.format_version && self.config == other.config && self.seeds == other.seeds
    }
}

pub fn selected_header(m: usize) -> Vec<String> {
    let mut h: Vec<String> = ["seed", "selected_epoch", "split", "n", "loss_mm", "acc_mm"].map(String::from).into();
    h.extend(numbered("loss_uni", m));
    h.extend(numbered("acc_uni", m));
    h
}

fn split_row(seed: &str, epoch: &str, r: &SplitRow) -> Vec<String> {
    let mut row = vec![seed.into(), epoch.into(), r.split.clone(), r.n.to_string(), num(r.loss_mm), num(r.acc_mm)];
    row.extend(nums(&r.loss_uni));
    row.extend(nums(&r.acc_uni));
    row
}

pub fn selected_table(s: &SeedSummary, m: usize) -> Table {
    let mut t = Table::new(selected_header(m));
    for r in &s.selected {
        t.push(split_row(&s.seed.to_string(), &s.selected_epoch.to_string(), r));
    }
    t
}

/// Every seed's selected rows followed by `mean` and `std` rows per split
/// (sample standard deviation; `n` and `selected_epoch` left blank).
pub fn summary_table(seeds: &[SeedSummary], m: usize) -> Table {
    let mut t = Table::new(selected_header(m));
    for s in seeds {
        t.rows.extend(selected_table(s, m).rows);
    }
    let Some(first) = seeds.first() else { return t };
    for (stat, pick) in [("mean", 0usize), ("std", 1)] {
        for split in first.selected.iter().map(|r| &r.split) {
            let rows: Vec<&SplitRow> = seeds.iter().filter_map(|s| s.split(split)).collect();
            let agg = |f: &dyn Fn(&SplitRow) -> f64| {
                let v: Vec<f64> = rows.iter().map(|r| f(r)).collect();
                let (mean, std) = mean_std(&v);
                num([mean, std][pick])
            };
            let mut row = vec![stat.into(), String::new(), split.clone(), String::new(), agg(&|r| r.loss_mm), agg(&|r| r.acc_mm)];
            row.extend((0..m).map(|k| agg(&|r| r.loss_uni[k])));
            row.extend((0..m).map(|k| agg(&|r| r.acc_uni[k])));
            t.push(row);
        }
    }
    t
}

pub fn flatness_table(c: &FlatnessCurve) -> Table {
    let mut t = Table::new(["radius", "mean_loss_increase", "n_nan_directions"]);
    for i in 0..c.radii.len() {
        t.push(vec![num(c.radii[i]), num(c.mean_loss_increase[i]), c.n_nan[i].to_string()]);
    }
    t
}

pub fn robustness_header(m: usize) -> Vec<String> {
    let mut h: Vec<String> = ["modality", "variance", "acc_mm", "loss_mm"].map(String::from).into();
    h.extend(numbered("acc_uni", m));
    h
}

/// `modality` is 0-based here and written 1-based.
pub fn robustness_table(points: &[RobustnessPoint], modality: usize, m: usize) -> Table {
    let mut t = Table::new(robustness_header(m));
    for p in points {
        let mut row = vec![(modality + 1).to_string(), num(p.variance), num(p.acc_mm), num(p.loss_mm)];
        row.extend(nums(&p.acc_uni));
        t.push(row);
    }
    t
}

impl RunSummary {
    pub fn label(&self) -> String {
        self.config.label()
    }

    pub fn modalities(&self) -> usize {
        self.config.data.modalities()
    }

    /// Mean and sample standard deviation over seeds of `f` applied to the
    /// selected first-test-domain metrics.
    pub fn test_stat(&self, f: impl Fn(&SplitRow) -> f64) -> (f64, f64) {
        let v: Vec<f64> = self.seeds.iter().map(|s| f(s.first_test())).collect();
        mean_std(&v)
    }

    /// Reads a completed run directory.
    pub fn load(dir: &Path) -> Result<RunSummary> {
        if dir.join(FAILED_FILE).exists() {
            return Err(LabError::Input(format!("{} is marked as failed", dir.display())));
        }
        let config = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
        let m = config.data.modalities();
        let seeds = config
            .seeds
            .iter()
            .map(|&seed| load_seed(&config, &seed_dir(dir, seed), seed, m))
            .collect::<Result<_>>()?;
        Ok(RunSummary {
            format_version: FORMAT_VERSION,
            config,
            dir: dir.to_path_buf(),
            seeds,
            wall_clock: None,
        })
    }
}

fn check_header(t: &Table, expected: &[String], path: &Path) -> Result<()> {
    if t.header != expected {
        return Err(LabError::Parse {
            path: path.to_path_buf(),
            message: format!("columns {:?} differ from the expected {:?}", t.header, expected),
        });
    }
    Ok(())
}

fn load_seed(cfg: &ExperimentConfig, dir: &Path, seed: u64, m: usize) -> Result<SeedSummary> {
    let path = dir.join(SELECTED_FILE);
    let t = Table::load(&path)?;
    check_header(&t, &selected_header(m), &path)?;
    let rd = t.reader(&path);
    let mut selected_epoch = 0;
    let mut selected = Vec::new();
    for row in &t.rows {
        selected_epoch = rd.usize(row, "selected_epoch")?;
        selected.push(SplitRow {
            split: rd.str(row, "split")?.into(),
            n: rd.usize(row, "n")?,
            loss_mm: rd.f64(row, "loss_mm")?,
            acc_mm: rd.f64(row, "acc_mm")?,
            loss_uni: numbered("loss_uni", m).map(|c| rd.f64(row, &c)).collect::<Result<_>>()?,
            acc_uni: numbered("acc_uni", m).map(|c| rd.f64(row, &c)).collect::<Result<_>>()?,
        });
    }

    let path = dir.join(METRICS_FILE);
    let t = Table::load(&path)?;
    check_header(&t, &metrics_header(m), &path)?;
    let rd = t.reader(&path);
    let mut curves = Vec::new();
    for row in &t.rows {
        let split = rd.str(row, "split")?;
        if split == STEP_SPLIT {
            continue;
        }
        curves.push(CurveRow {
            epoch: rd.usize(row, "epoch")?,
            split: split.into(),
            loss_mm: rd.f64(row, "loss_mm")?,
            acc_mm: rd.f64(row, "acc_mm")?,
            loss_uni: numbered("loss_uni", m).map(|c| rd.f64(row, &c)).collect::<Result<_>>()?,
            acc_uni: numbered("acc_uni", m).map(|c| rd.f64(row, &c)).collect::<Result<_>>()?,
        });
    }

    let flatness = if cfg.flatness.enabled {
        let path = dir.join(FLATNESS_FILE);
        let t = Table::load(&path)?;
        let rd = t.reader(&path);
        let mut c = FlatnessCurve {
            radii: Vec::new(),
            mean_loss_increase: Vec::new(),
            n_nan: Vec::new(),
            n_directions: cfg.flatness.n_directions,
            seed: RunSeeds::new(seed).flatness,
        };
        for row in &t.rows {
            c.radii.push(rd.f64(row, "radius")?);
            c.mean_loss_increase.push(rd.f64(row, "mean_loss_increase")?);
            c.n_nan.push(rd.usize(row, "n_nan_directions")?);
        }
        Some(c)
    } else {
        None
    };

    let path = dir.join(ROBUSTNESS_FILE);
    let t = Table::load(&path)?;
    check_header(&t, &robustness_header(m), &path)?;
    let rd = t.reader(&path);
    let robustness = t
        .rows
        .iter()
        .map(|row| {
            Ok(RobustnessPoint {
                variance: rd.f64(row, "variance")?,
                acc_mm: rd.f64(row, "acc_mm")?,
                loss_mm: rd.f64(row, "loss_mm")?,
                acc_uni: numbered("acc_uni", m).map(|c| rd.f64(row, &c)).collect::<Result<_>>()?,
            })
        })
        .collect::<Result<_>>()?;

    Ok(SeedSummary {
        seed,
        selected_epoch,
        selected,
        curves,
        flatness,
        robustness,
    })
}
