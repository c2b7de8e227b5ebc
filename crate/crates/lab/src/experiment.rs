//! Multi-seed experiments and one-axis sweeps.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint;
use crate::config::{ExperimentConfig, FORMAT_VERSION};
use crate::error::{io_err, LabError, Result};
use crate::record::{
    flatness_table, labelled_splits, metrics_table, robustness_table, seed_dir, selected_table, summary_table,
    RobustnessPoint, RunSummary, SeedSummary, SplitRow, CHECKPOINT_FILE, CONFIG_FILE, FAILED_FILE, FLATNESS_FILE,
    METRICS_FILE, ROBUSTNESS_FILE, SELECTED_FILE, SUMMARY_FILE,
};
use crate::run::{perturbed_test, train_seed, SeedRun};
use crate::table::{mean_std, num, Table};

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

fn remove_if_exists(path: &Path) -> Result<()> {
    match std::fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(io_err(path)(e)),
        _ => Ok(()),
    }
}

/// Trains one seed and writes its files under `dir`.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<(SeedRun, SeedSummary)> {
    let run = train_seed(cfg, seed)?;
    let m = cfg.data.modalities();
    create_dir(dir)?;
    metrics_table(&run, m).save(&dir.join(METRICS_FILE))?;
    checkpoint::save(&run.selected, &dir.join(CHECKPOINT_FILE))?;

    let rec = run.selected_record();
    let selected = labelled_splits(&rec.primary, rec.student.as_ref())
        .into_iter()
        .map(|(label, e)| SplitRow::new(label, e))
        .collect();
    let robustness = cfg
        .robustness
        .variances
        .iter()
        .map(|&variance| {
            let e = perturbed_test(&run, cfg.robustness.modality, variance)?;
            Ok(RobustnessPoint {
                variance,
                acc_mm: e.acc_mm,
                loss_mm: e.loss_mm,
                acc_uni: e.acc_uni,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = SeedSummary {
        seed,
        selected_epoch: run.selected.epoch,
        selected,
        curves: Vec::new(),
        flatness: run.flatness.clone(),
        robustness,
    };
    selected_table(&summary, m).save(&dir.join(SELECTED_FILE))?;
    robustness_table(&summary.robustness, cfg.robustness.modality, m).save(&dir.join(ROBUSTNESS_FILE))?;
    if let Some(c) = &summary.flatness {
        flatness_table(c).save(&dir.join(FLATNESS_FILE))?;
    }
    Ok((run, summary))
}

/// Runs every seed of `cfg` into its output directory and writes
/// `summary.csv`.
///
/// The configuration is validated before anything is written. When a seed
/// fails, the files of earlier seeds and a summary over them stay on disk
/// next to a `FAILED` file holding the error.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let start = Instant::now();
    let dir = cfg.resolved_output_dir();
    create_dir(&dir)?;
    remove_if_exists(&dir.join(FAILED_FILE))?;
    cfg.save(&dir.join(CONFIG_FILE))?;
    let m = cfg.data.modalities();

    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        match run_seed(cfg, seed, &seed_dir(&dir, seed)) {
            Ok((_, summary)) => seeds.push(summary),
            Err(e) => {
                summary_table(&seeds, m).save(&dir.join(SUMMARY_FILE))?;
                let path = dir.join(FAILED_FILE);
                std::fs::write(&path, format!("seed {seed}: {e}\n")).map_err(io_err(&path))?;
                return Err(e);
            }
        }
    }
    summary_table(&seeds, m).save(&dir.join(SUMMARY_FILE))?;
    // Re-read so the in-memory summary is exactly what the files hold.
    let mut summary = RunSummary::load(&dir)?;
    let elapsed = start.elapsed();
    summary.wall_clock = Some(elapsed);
    eprintln!("{}: {} seed(s) in {:.1}s", dir.display(), seeds.len(), elapsed.as_secs_f64());
    debug_assert_eq!(summary.format_version, FORMAT_VERSION);
    Ok(summary)
}

/// The parameter varied by a sweep.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    /// Any dotted config key, e.g. `mbcd.beta_ema`.
    Config(String),
    /// Noise variance on `robustness.modality`; one training run evaluated
    /// at every value.
    NoiseVariance,
}

impl SweepAxis {
    /// Accepts `beta_ema`, `lambda`, `noise_variance` or any dotted key of
    /// the configuration.
    pub fn parse(axis: &str, base: &ExperimentConfig) -> Result<SweepAxis> {
        let key = match axis {
            "noise_variance" | "robustness.variances" => return Ok(SweepAxis::NoiseVariance),
            "beta_ema" => "mbcd.beta_ema",
            "lambda" => "mbcd.lambda",
            "alpha" => "mbcd.alpha",
            other => other,
        };
        let doc: toml::Table = toml::from_str(&base.to_toml()?).map_err(|e| LabError::Config(e.to_string()))?;
        let mut node = Some(&doc);
        let mut found = None;
        for (i, part) in key.split('.').enumerate() {
            let value = node.and_then(|t| t.get(part));
            node = value.and_then(toml::Value::as_table);
            if i == key.split('.').count() - 1 {
                found = value;
            }
        }
        match found {
            Some(v) if !v.is_table() => Ok(SweepAxis::Config(key.into())),
            _ => Err(LabError::Config(format!("unknown sweep axis `{axis}`"))),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            SweepAxis::Config(k) => k,
            SweepAxis::NoiseVariance => "noise_variance",
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    /// One run per value; a single run for [`SweepAxis::NoiseVariance`].
    pub runs: Vec<RunSummary>,
    /// Path of the combined CSV.
    pub table: PathBuf,
}

pub const SWEEP_FILE: &str = "sweep.csv";

/// `(seed, [acc_mm, acc_uni_1..M])`.
type SeedAccuracies = (u64, Vec<f64>);

/// Runs `base` once per value of `axis` and writes a combined table keyed
/// by value: per-seed rows then `mean`/`std` rows of the fused and uni
/// accuracies on the first evaluated domain.
pub fn run_sweep(base: &ExperimentConfig, axis: &str, values: &[f64]) -> Result<SweepResult> {
    base.validate()?;
    let axis = SweepAxis::parse(axis, base)?;
    if values.is_empty() {
        return Err(LabError::Config("a sweep needs at least one value".into()));
    }
    let root = base.resolved_output_dir();
    let m = base.data.modalities();
    let mut header = vec!["axis".to_string(), "value".into(), "seed".into(), "acc_mm".into()];
    header.extend((1..=m).map(|k| format!("acc_uni_{k}")));
    let mut table = Table::new(header);
    let mut groups: Vec<(f64, Vec<SeedAccuracies>)> = Vec::new();
    let mut runs = Vec::new();
    match &axis {
        SweepAxis::Config(key) => {
            for &v in values {
                let mut cfg = base.with_overrides(&[format!("{key}={}", num(v))])?;
                cfg.output_dir = base.output_dir.join(format!("{key}={}", num(v)));
                cfg.name = Some(format!("{} {key}={}", base.label(), num(v)));
                let summary = run_experiment(&cfg)?;
                let rows = summary
                    .seeds
                    .iter()
                    .map(|s| {
                        let t = s.first_test();
                        let mut r = vec![t.acc_mm];
                        r.extend(&t.acc_uni);
                        (s.seed, r)
                    })
                    .collect();
                groups.push((v, rows));
                runs.push(summary);
            }
        }
        SweepAxis::NoiseVariance => {
            let mut cfg = base.clone();
            cfg.robustness.variances = values.to_vec();
            cfg.validate()?;
            let summary = run_experiment(&cfg)?;
            for (i, &v) in values.iter().enumerate() {
                let rows = summary
                    .seeds
                    .iter()
                    .map(|s| {
                        let p = &s.robustness[i];
                        let mut r = vec![p.acc_mm];
                        r.extend(&p.acc_uni);
                        (s.seed, r)
                    })
                    .collect();
                groups.push((v, rows));
            }
            runs.push(summary);
        }
    }
    for (v, rows) in &groups {
        for (seed, r) in rows {
            let mut row = vec![axis.name().to_string(), num(*v), seed.to_string()];
            row.extend(r.iter().map(|&x| num(x)));
            table.push(row);
        }
    }
    for (stat, pick) in [("mean", 0usize), ("std", 1)] {
        for (v, rows) in &groups {
            let mut row = vec![axis.name().to_string(), num(*v), stat.to_string()];
            for c in 0..=m {
                let col: Vec<f64> = rows.iter().map(|(_, r)| r[c]).collect();
                let (mean, std) = mean_std(&col);
                row.push(num([mean, std][pick]));
            }
            table.push(row);
        }
    }
    create_dir(&root)?;
    let path = root.join(SWEEP_FILE);
    table.save(&path)?;
    Ok(SweepResult {
        axis,
        values: values.to_vec(),
        runs,
        table: path,
    })
}
