use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mbcd_core::data::generate;
use mbcd_core::flatness::probe_fused;
use mbcd_lab::config::{FlatnessSplit, OUTPUT_ROOT_ENV};
use mbcd_lab::record::{flatness_table, labelled_splits, selected_header, RunSummary};
use mbcd_lab::run::{build_splits, eval_all, RunSeeds};
use mbcd_lab::table::{num, Table};
use mbcd_lab::{checkpoint, dataset, emit_plot_data, run_experiment, run_sweep, ExperimentConfig, LabError, PlotKind, Result};

/// Modality-balanced multimodal training experiments on synthetic data.
#[derive(Parser)]
#[command(name = "mbcd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration as TOML.
    ShowConfig(ConfigArgs),
    /// Generate the dataset of one seed and export it as CSV files.
    GenerateData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Run seed whose data stream is used (default: the first configured seed).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every configured seed and write metrics, checkpoints and summaries.
    Train(ConfigArgs),
    /// Evaluate a checkpoint on the splits of one seed.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output CSV (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Probe the loss flatness of a checkpoint's fused predictor.
    Flatness {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one experiment per value of a configuration field.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// `beta_ema`, `lambda`, `noise_variance` or a dotted config key.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Write plot data from finished run directories.
    EmitPlots {
        #[arg(long, value_enum)]
        kind: PlotKind,
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment file (default: the built-in benchmark).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a field, e.g. `--set mbcd.lambda=0.5` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    protocol: Option<String>,
    #[arg(long)]
    target: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, help = format!("Output directory; relative paths are placed under ${OUTPUT_ROOT_ENV} when set"))]
    output_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let base = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let mut overrides = Vec::new();
        if let Some(m) = &self.method {
            overrides.push(format!("method=\"{m}\""));
        }
        if let Some(p) = &self.protocol {
            overrides.push(format!("protocol=\"{p}\""));
        }
        if let Some(t) = self.target {
            overrides.push(format!("target={t}"));
        }
        if let Some(s) = &self.seeds {
            let list: Vec<String> = s.iter().map(u64::to_string).collect();
            overrides.push(format!("seeds=[{}]", list.join(",")));
        }
        if let Some(o) = &self.output_dir {
            let quoted = toml::Value::String(o.to_string_lossy().into_owned()).to_string();
            overrides.push(format!("output_dir={quoted}"));
        }
        overrides.extend(self.set.iter().cloned());
        base.with_overrides(&overrides)
    }
}

fn write_table(t: &Table, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => t.save(p),
        None => std::io::stdout()
            .write_all(&t.to_bytes())
            .map_err(|e| LabError::Io {
                path: "<stdout>".into(),
                source: e,
            }),
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::ShowConfig(args) => print!("{}", args.load()?.to_toml()?),
        Command::GenerateData { config, seed, out } => {
            let cfg = config.load()?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let mut data = cfg.data.clone();
            data.seed = RunSeeds::new(seed).data;
            dataset::export(&generate(&data)?, &out)?;
            println!("{}", out.display());
        }
        Command::Train(args) => {
            let summary = run_experiment(&args.load()?)?;
            println!("{}", summary.dir.display());
        }
        Command::Evaluate {
            config,
            checkpoint: path,
            seed,
            out,
        } => {
            let cfg = config.load()?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let ckpt = checkpoint::load(&path, &cfg.model)?;
            let splits = build_splits(&cfg, &RunSeeds::new(seed))?;
            let eval_model = cfg.effective_mbcd().resolved_eval_model();
            let (primary, student) = eval_all(&ckpt.student, &ckpt.teacher, eval_model, &splits)?;
            let m = cfg.data.modalities();
            let mut t = Table::new(selected_header(m));
            for (label, e) in labelled_splits(&primary, student.as_ref()) {
                let mut row = vec![seed.to_string(), ckpt.epoch.to_string(), label, e.n.to_string(), num(e.loss_mm), num(e.acc_mm)];
                row.extend(e.loss_uni.iter().chain(&e.acc_uni).map(|&v| num(v)));
                t.push(row);
            }
            write_table(&t, out.as_deref())?;
        }
        Command::Flatness {
            config,
            checkpoint: path,
            seed,
            out,
        } => {
            let cfg = config.load()?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let ckpt = checkpoint::load(&path, &cfg.model)?;
            let seeds = RunSeeds::new(seed);
            let splits = build_splits(&cfg, &seeds)?;
            let batch = match cfg.flatness.split {
                FlatnessSplit::TargetTest => &splits.tests[0].1,
                FlatnessSplit::SourceVal => &splits.val,
            };
            let fused = ckpt.fused(cfg.effective_mbcd().resolved_eval_model());
            // Fail early on a checkpoint that does not fit the data.
            mbcd_core::train::evaluate_fused(&fused, batch)?;
            let f = &cfg.flatness;
            let curve = probe_fused(&fused, batch, &f.radii, f.n_directions, seeds.flatness)?;
            write_table(&flatness_table(&curve), out.as_deref())?;
        }
        Command::Sweep { config, axis, values } => {
            let result = run_sweep(&config.load()?, &axis, &values)?;
            println!("{}", result.table.display());
        }
        Command::EmitPlots { kind, runs, out } => {
            let runs = runs.iter().map(|d| RunSummary::load(d)).collect::<Result<Vec<_>>>()?;
            println!("{}", emit_plot_data(&runs, kind, &out)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error kind={} message={:?}", e.kind(), e.to_string());
            ExitCode::FAILURE
        }
    }
}
