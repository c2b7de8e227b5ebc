use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mbcd_core::data::{generate, Protocol};
use mbcd_lab::config::ExperimentConfig;
use mbcd_lab::record::{metrics_header, seed_dir, RunSummary, FAILED_FILE, METRICS_FILE, SELECTED_FILE, SUMMARY_FILE};
use mbcd_lab::run::{build_splits, train_seed, RunSeeds};
use mbcd_lab::table::{mean_std, Table};
use mbcd_lab::{checkpoint, dataset, emit_plot_data, run_experiment, run_sweep, LabError, PlotKind};

/// A fresh, not yet created directory inside a temporary root that lives as
/// long as the returned guard.
fn scratch(name: &str) -> (tempfile::TempDir, PathBuf) {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join(name);
    (root, dir)
}

fn small(dir: &Path, seeds: &[u64]) -> ExperimentConfig {
    let seeds: Vec<String> = seeds.iter().map(u64::to_string).collect();
    ExperimentConfig::default()
        .with_overrides(&[
            format!("seeds=[{}]", seeds.join(",")),
            format!("output_dir={}", toml::Value::String(dir.to_string_lossy().into())),
            "mbcd.epochs=3".into(),
            "mbcd.batch_size=16".into(),
            "data.train_per_domain=48".into(),
            "data.val_per_domain=24".into(),
            "data.test_per_domain=40".into(),
            "model.hidden_dims=[8,8,8]".into(),
            "model.feature_dims=[4,4,4]".into(),
            "flatness.n_directions=3".into(),
            "flatness.radii=[0.0,0.1,0.2]".into(),
        ])
        .unwrap()
}

fn read_tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    walkdir::WalkDir::new(dir)
        .into_iter()
        .map(Result::unwrap)
        .filter(|e| e.file_type().is_file())
        .map(|e| (e.path().strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(e.path()).unwrap()))
        .collect()
}

#[test]
fn identical_runs_write_identical_bytes() {
    let (_guard_dir, dir) = scratch("determinism");
    let cfg = small(&dir, &[7]);
    run_experiment(&cfg).unwrap();
    let first = read_tree(&dir);
    std::fs::remove_dir_all(&dir).unwrap();
    run_experiment(&cfg).unwrap();
    assert_eq!(first, read_tree(&dir));
    assert!(first.contains_key(Path::new("seed_7/metrics.csv")));
}

#[test]
fn adding_seeds_keeps_earlier_runs() {
    let (_guard_a, a) = scratch("seeds_a");
    let (_guard_b, b) = scratch("seeds_b");
    run_experiment(&small(&a, &[3])).unwrap();
    run_experiment(&small(&b, &[3, 4])).unwrap();
    let file = |d: &Path| std::fs::read(seed_dir(d, 3).join(METRICS_FILE)).unwrap();
    assert_eq!(file(&a), file(&b));
}

#[test]
fn csv_columns_match_the_documented_schema() {
    let (_guard_dir, dir) = scratch("schema");
    let summary = run_experiment(&small(&dir, &[1])).unwrap();
    let header = |p: PathBuf| Table::load(&p).unwrap().header.join(",");
    let s = seed_dir(&dir, 1);
    assert_eq!(
        header(s.join(METRICS_FILE)),
        "step,epoch,split,loss_total,loss_mm,loss_uni_1,loss_uni_2,loss_uni_3,loss_dis,acc_mm,\
         acc_uni_1,acc_uni_2,acc_uni_3,s_1,s_2,s_3,r_1,r_2,r_3,p_1,p_2,p_3,dropped_1,dropped_2,dropped_3"
    );
    assert_eq!(metrics_header(3).join(","), header(s.join(METRICS_FILE)));
    assert_eq!(
        header(dir.join(SUMMARY_FILE)),
        "seed,selected_epoch,split,n,loss_mm,acc_mm,loss_uni_1,loss_uni_2,loss_uni_3,acc_uni_1,acc_uni_2,acc_uni_3"
    );
    assert_eq!(header(s.join("flatness.csv")), "radius,mean_loss_increase,n_nan_directions");
    assert_eq!(
        header(s.join("robustness.csv")),
        "modality,variance,acc_mm,loss_mm,acc_uni_1,acc_uni_2,acc_uni_3"
    );
    let plots = dir.join("plots");
    let expected = [
        (PlotKind::Flatness, "method,radius,mean_loss_increase,seed"),
        (PlotKind::Robustness, "method,variance,accuracy,seed"),
        (PlotKind::ModalityAccuracy, "method,branch,accuracy,seed"),
        (PlotKind::TrainingCurves, "method,epoch,split,acc_mm,loss_mm,seed"),
    ];
    for (kind, cols) in expected {
        let path = emit_plot_data(std::slice::from_ref(&summary), kind, &plots).unwrap();
        assert_eq!(header(path), cols);
    }
}

#[test]
fn metrics_rows_cover_every_step_and_epoch() {
    let (_guard_dir, dir) = scratch("rows");
    let cfg = small(&dir, &[2]);
    run_experiment(&cfg).unwrap();
    let path = seed_dir(&dir, 2).join(METRICS_FILE);
    let t = Table::load(&path).unwrap();
    let split = t.column("split").unwrap();
    let steps = t.rows.iter().filter(|r| r[split] == "train_step").count();
    // 96 source training rows in batches of 16, three epochs.
    assert_eq!(steps, 18);
    let evals = t.rows.iter().filter(|r| r[split] != "train_step").count();
    assert_eq!(evals, 3 * 3);
    let dropped = t.column("dropped_1").unwrap();
    assert!(t.rows.iter().filter(|r| r[split] == "train_step").all(|r| r[dropped] == "0" || r[dropped] == "1"));
}

#[test]
fn summary_aggregates_match_recomputation_from_seed_files() {
    let (_guard_dir, dir) = scratch("aggregate");
    let cfg = small(&dir, &[1, 2, 3]);
    run_experiment(&cfg).unwrap();
    let per_seed: Vec<Table> = cfg
        .seeds
        .iter()
        .map(|&s| Table::load(&seed_dir(&dir, s).join(SELECTED_FILE)).unwrap())
        .collect();
    let summary = Table::load(&dir.join(SUMMARY_FILE)).unwrap();
    let col = |name: &str| summary.column(name).unwrap();
    for row in summary.rows.iter().filter(|r| r[0] == "mean" || r[0] == "std") {
        for name in ["acc_mm", "loss_mm", "acc_uni_2"] {
            let values: Vec<f64> = per_seed
                .iter()
                .map(|t| {
                    let r = t.rows.iter().find(|r| r[2] == row[2]).unwrap();
                    r[t.column(name).unwrap()].parse().unwrap()
                })
                .collect();
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let expected = if row[0] == "mean" {
                mean
            } else {
                (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            };
            let got: f64 = row[col(name)].parse().unwrap();
            assert!((got - expected).abs() <= 1e-12, "{} {} {name}: {got} vs {expected}", row[0], row[2]);
        }
    }
}

#[test]
fn loaded_summary_equals_returned_summary() {
    let (_guard_dir, dir) = scratch("reload");
    let summary = run_experiment(&small(&dir, &[5])).unwrap();
    assert!(summary.wall_clock.is_some());
    let loaded = RunSummary::load(&dir).unwrap();
    assert_eq!(summary, loaded);
    let s = &loaded.seeds[0];
    assert_eq!(s.curves.iter().filter(|c| c.split == "val").count(), 3);
    let best = s
        .curves
        .iter()
        .filter(|c| c.split == "val")
        .fold((0usize, f64::MIN), |b, c| if c.acc_mm > b.1 { (c.epoch, c.acc_mm) } else { b });
    assert_eq!(s.selected_epoch, best.0);
}

#[test]
fn multi_source_uses_every_other_domain() {
    let (_guard_dir, dir) = scratch("protocol");
    for (protocol, target, sources) in [
        (Protocol::MultiSource, 0, vec![1, 2]),
        (Protocol::MultiSource, 2, vec![0, 1]),
        (Protocol::SingleSource, 1, vec![1]),
        (Protocol::InDomain, 2, vec![2]),
    ] {
        let mut cfg = small(&dir, &[0]);
        cfg.protocol = protocol;
        cfg.target = target;
        let splits = build_splits(&cfg, &RunSeeds::new(0)).unwrap();
        assert_eq!(splits.sources, sources, "{protocol:?}");
    }
}

#[test]
fn invalid_configs_fail_before_writing() {
    let (_guard_dir, dir) = scratch("invalid");
    let text = small(&dir, &[0]).to_toml().unwrap() + "\nsurprise = 1\n";
    let err = ExperimentConfig::from_toml(&text, Path::new("x.toml")).unwrap_err();
    assert!(err.to_string().contains("surprise"), "{err}");
    let text = small(&dir, &[0]).to_toml().unwrap().replace("[mbcd]", "[mbcd]\nlamda = 1.0");
    assert!(ExperimentConfig::from_toml(&text, Path::new("x.toml")).is_err());
    let mut cfg = small(&dir, &[0]);
    cfg.seeds.clear();
    assert!(matches!(run_experiment(&cfg), Err(LabError::Config(_))));
    assert!(!dir.exists());
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = ExperimentConfig::default();
    let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap(), Path::new("x.toml")).unwrap();
    assert_eq!(cfg, back);
}

#[test]
fn failed_runs_leave_a_marker_and_partial_results() {
    let (_guard_dir, dir) = scratch("failed");
    let cfg = small(&dir, &[0]).with_overrides(&["mbcd.adam.lr=1e200".into()]).unwrap();
    let err = run_experiment(&cfg).unwrap_err();
    let marker = std::fs::read_to_string(dir.join(FAILED_FILE)).unwrap();
    assert!(marker.contains(&err.to_string()));
    assert!(dir.join(SUMMARY_FILE).exists());
    assert!(RunSummary::load(&dir).is_err());
}

#[test]
fn checkpoints_round_trip_bitwise() {
    let (_guard_dir, dir) = scratch("checkpoint");
    let cfg = small(&dir, &[4]);
    let run = train_seed(&cfg, 4).unwrap();
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("c.txt");
    checkpoint::save(&run.selected, &path).unwrap();
    let back = checkpoint::load(&path, &cfg.model).unwrap();
    assert_eq!(back, run.selected);

    let mut wrong = cfg.model.clone();
    wrong.feature_dims = vec![5, 4, 4];
    assert!(checkpoint::load(&path, &wrong).is_err());
    let text = std::fs::read_to_string(&path).unwrap();
    let truncated: String = text.lines().take(5).map(|l| format!("{l}\n")).collect();
    assert!(checkpoint::from_text(&truncated, &cfg.model, &path).is_err());
}

#[test]
fn datasets_round_trip_through_csv() {
    let (_guard_dir, dir) = scratch("dataset");
    let cfg = small(&dir, &[0]);
    let data = generate(&cfg.data).unwrap();
    dataset::export(&data, &dir).unwrap();
    let back = dataset::import(&dir).unwrap();
    assert!(back.matches(&data));
    let first = std::fs::read_to_string(dir.join("d0_train_m2.csv")).unwrap();
    let line = first.lines().next().unwrap();
    assert_eq!(line.split(',').count(), cfg.data.input_dims[1]);
    assert_eq!(first.lines().count(), cfg.data.train_per_domain);

    std::fs::write(dir.join("d1_val_labels.csv"), "0\n").unwrap();
    assert!(dataset::import(&dir).is_err());
}

#[test]
fn sweeps_key_results_by_value() {
    let (_guard_dir, dir) = scratch("sweep");
    let base = small(&dir, &[0, 1]).with_overrides(&["flatness.enabled=false".into()]).unwrap();
    let result = run_sweep(&base, "lambda", &[0.0, 1.0]).unwrap();
    assert_eq!(result.runs.len(), 2);
    assert_eq!(result.runs[0].config.mbcd.lambda, 0.0);
    let t = Table::load(&result.table).unwrap();
    assert_eq!(t.header[..4].join(","), "axis,value,seed,acc_mm");
    assert_eq!(t.rows.len(), 2 * 2 + 2 * 2);
    // With lambda = 0 the distillation term is still logged.
    let m = Table::load(&seed_dir(&result.runs[0].dir, 0).join(METRICS_FILE)).unwrap();
    let (split, dis, total, mm) = (
        m.column("split").unwrap(),
        m.column("loss_dis").unwrap(),
        m.column("loss_total").unwrap(),
        m.column("loss_mm").unwrap(),
    );
    let steps: Vec<&Vec<String>> = m.rows.iter().filter(|r| r[split] == "train_step").collect();
    assert!(steps.iter().any(|r| r[dis].parse::<f64>().unwrap() > 0.0));
    for r in steps {
        let uni: f64 = (1..=3).map(|k| r[m.column(&format!("loss_uni_{k}")).unwrap()].parse::<f64>().unwrap()).sum();
        let sum = r[mm].parse::<f64>().unwrap() + uni;
        assert!((r[total].parse::<f64>().unwrap() - sum).abs() < 1e-12);
    }

    let err = run_sweep(&base, "mbcd.nonexistent", &[1.0]).unwrap_err();
    assert!(err.to_string().contains("unknown sweep axis"));
}

#[test]
fn noise_sweep_reuses_one_training_run() {
    let (_guard_dir, dir) = scratch("noise");
    let base = small(&dir, &[0]).with_overrides(&["flatness.enabled=false".into()]).unwrap();
    let result = run_sweep(&base, "noise_variance", &[0.0, 0.5, 1.0, 2.0]).unwrap();
    assert_eq!(result.runs.len(), 1);
    let s = &result.runs[0].seeds[0];
    assert_eq!(s.robustness.len(), 4);
    assert_eq!(s.robustness[0].acc_mm, s.first_test().acc_mm);
}

#[test]
fn plot_aggregates_match_per_seed_rows() {
    let (_guard_dir, dir) = scratch("plots");
    let erm = run_experiment(
        &small(&dir.join("erm"), &[0, 1])
            .with_overrides(&["method=\"erm\"".into()])
            .unwrap(),
    )
    .unwrap();
    let mbcd = run_experiment(&small(&dir.join("mbcd"), &[0, 1])).unwrap();
    let runs = [erm, mbcd];
    for kind in [PlotKind::Flatness, PlotKind::Robustness, PlotKind::ModalityAccuracy, PlotKind::TrainingCurves] {
        let t = Table::load(&emit_plot_data(&runs, kind, &dir.join("out")).unwrap()).unwrap();
        let seed_col = t.header.len() - 1;
        let keys = kind.columns().len() - if kind == PlotKind::TrainingCurves { 2 } else { 1 };
        for agg in t.rows.iter().filter(|r| r[seed_col] == "mean" || r[seed_col] == "std") {
            for c in keys..seed_col {
                let v: Vec<f64> = t
                    .rows
                    .iter()
                    .filter(|r| r[seed_col].parse::<u64>().is_ok() && r[..keys] == agg[..keys])
                    .map(|r| r[c].parse().unwrap())
                    .collect();
                assert_eq!(v.len(), 2);
                let (mean, std) = mean_std(&v);
                let expected = if agg[seed_col] == "mean" { mean } else { std };
                let got: f64 = agg[c].parse().unwrap();
                assert!((got - expected).abs() <= 1e-12 * expected.abs().max(1.0));
            }
        }
        let methods: Vec<&str> = t.rows.iter().map(|r| r[0].as_str()).collect();
        assert!(methods.contains(&"erm") && methods.contains(&"mbcd"));
    }

    let mut other = runs[1].clone();
    other.config.protocol = Protocol::InDomain;
    other.config.name = Some("mbcd_in_domain".into());
    let err = emit_plot_data(&[runs[0].clone(), other], PlotKind::Flatness, &dir.join("mixed")).unwrap_err();
    assert!(err.to_string().contains("mix"));
    assert!(emit_plot_data(&[runs[0].clone(), runs[0].clone()], PlotKind::Flatness, &dir.join("dup")).is_err());
}
