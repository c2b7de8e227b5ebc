//! Tidy CSV data behind the standard figures.
//!
//! | kind                | columns                                      |
//! |---------------------|----------------------------------------------|
//! | `flatness`          | method, radius, mean_loss_increase, seed     |
//! | `robustness`        | method, variance, accuracy, seed             |
//! | `modality_accuracy` | method, branch, accuracy, seed               |
//! | `training_curves`   | method, epoch, split, acc_mm, loss_mm, seed  |
//!
//! Per-seed rows come first, in input order; then one `mean` and one `std`
//! row (sample standard deviation) per method and x value, where `seed`
//! holds the statistic name. Accuracies are measured on the first evaluated
//! domain at the selected epoch; `branch` is `fused` or `uni_<k>` (1-based).

use std::path::{Path, PathBuf};

use crate::error::{io_err, LabError, Result};
use crate::record::RunSummary;
use crate::table::{mean_std, num, Table};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum PlotKind {
    Flatness,
    Robustness,
    ModalityAccuracy,
    TrainingCurves,
}

impl PlotKind {
    pub fn name(self) -> &'static str {
        match self {
            PlotKind::Flatness => "flatness",
            PlotKind::Robustness => "robustness",
            PlotKind::ModalityAccuracy => "modality_accuracy",
            PlotKind::TrainingCurves => "training_curves",
        }
    }

    /// Columns before `seed`; the last one holds the measured value.
    pub fn columns(self) -> &'static [&'static str] {
        match self {
            PlotKind::Flatness => &["method", "radius", "mean_loss_increase"],
            PlotKind::Robustness => &["method", "variance", "accuracy"],
            PlotKind::ModalityAccuracy => &["method", "branch", "accuracy"],
            PlotKind::TrainingCurves => &["method", "epoch", "split", "acc_mm", "loss_mm"],
        }
    }

    pub fn header(self) -> Vec<String> {
        let mut h: Vec<String> = self.columns().iter().map(|c| c.to_string()).collect();
        h.push("seed".into());
        h
    }
}

/// One per-seed observation: key columns, then measured values.
struct Obs {
    key: Vec<String>,
    values: Vec<f64>,
    seed: u64,
}

fn observations(run: &RunSummary, kind: PlotKind) -> Result<Vec<Obs>> {
    let method = run.label();
    let mut out = Vec::new();
    for s in &run.seeds {
        match kind {
            PlotKind::Flatness => {
                let c = s.flatness.as_ref().ok_or_else(|| {
                    LabError::Input(format!("run `{method}` has no flatness curve (flatness.enabled = false)"))
                })?;
                for (r, v) in c.radii.iter().zip(&c.mean_loss_increase) {
                    out.push(Obs {
                        key: vec![method.clone(), num(*r)],
                        values: vec![*v],
                        seed: s.seed,
                    });
                }
            }
            PlotKind::Robustness => {
                for p in &s.robustness {
                    out.push(Obs {
                        key: vec![method.clone(), num(p.variance)],
                        values: vec![p.acc_mm],
                        seed: s.seed,
                    });
                }
            }
            PlotKind::ModalityAccuracy => {
                let t = s.first_test();
                out.push(Obs {
                    key: vec![method.clone(), "fused".into()],
                    values: vec![t.acc_mm],
                    seed: s.seed,
                });
                for (k, a) in t.acc_uni.iter().enumerate() {
                    out.push(Obs {
                        key: vec![method.clone(), format!("uni_{}", k + 1)],
                        values: vec![*a],
                        seed: s.seed,
                    });
                }
            }
            PlotKind::TrainingCurves => {
                for c in &s.curves {
                    out.push(Obs {
                        key: vec![method.clone(), c.epoch.to_string(), c.split.clone()],
                        values: vec![c.acc_mm, c.loss_mm],
                        seed: s.seed,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Builds the table for `kind` from runs that share a protocol and target.
pub fn plot_table(runs: &[RunSummary], kind: PlotKind) -> Result<Table> {
    let first = runs
        .first()
        .ok_or_else(|| LabError::Input("no runs given".into()))?;
    for r in runs {
        if (r.config.protocol, r.config.target) != (first.config.protocol, first.config.target) {
            return Err(LabError::Input(format!(
                "runs mix protocols: `{}` and `{}` differ in protocol or target",
                first.label(),
                r.label()
            )));
        }
    }
    let mut labels: Vec<String> = runs.iter().map(RunSummary::label).collect();
    labels.sort();
    if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
        return Err(LabError::Input(format!(
            "two runs are labelled `{}`; set `name` in their configs",
            w[0]
        )));
    }

    let mut table = Table::new(kind.header());
    let mut obs = Vec::new();
    for r in runs {
        obs.extend(observations(r, kind)?);
    }
    for o in &obs {
        let mut row = o.key.clone();
        row.extend(o.values.iter().map(|&v| num(v)));
        row.push(o.seed.to_string());
        table.push(row);
    }
    // Groups in order of first appearance.
    let mut keys: Vec<&Vec<String>> = Vec::new();
    for o in &obs {
        if !keys.contains(&&o.key) {
            keys.push(&o.key);
        }
    }
    for (stat, pick) in [("mean", 0usize), ("std", 1)] {
        for key in &keys {
            let group: Vec<&Obs> = obs.iter().filter(|o| &o.key == *key).collect();
            let mut row = (*key).clone();
            for i in 0..group[0].values.len() {
                let v: Vec<f64> = group.iter().map(|o| o.values[i]).collect();
                let (mean, std) = mean_std(&v);
                row.push(num([mean, std][pick]));
            }
            row.push(stat.into());
            table.push(row);
        }
    }
    Ok(table)
}

/// Writes `<out_dir>/<kind>.csv` and returns its path.
pub fn emit_plot_data(runs: &[RunSummary], kind: PlotKind, out_dir: &Path) -> Result<PathBuf> {
    let table = plot_table(runs, kind)?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let path = out_dir.join(format!("{}.csv", kind.name()));
    table.save(&path)?;
    Ok(path)
}
