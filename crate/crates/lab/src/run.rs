//! Training runs: one seed at a time, with per-epoch evaluation and
//! best-validation checkpoint selection.

use mbcd_core::data::{check_no_leakage, generate, perturb_batch, protocol_splits, MultiModalBatch, ProtocolSplits};
use mbcd_core::flatness::{probe_fused, FlatnessCurve};
use mbcd_core::model::{init_params, FusedParams, ModelParams};
use mbcd_core::rng::{self, derive_seed, stream};
use mbcd_core::train::{evaluate, train_step, EvalMetrics, EvalModel, StepMetrics, TrainerState};
use rand::seq::SliceRandom;

use crate::config::{ExperimentConfig, FlatnessSplit};
use crate::error::Result;

/// Seeds of the independent streams of one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunSeeds {
    pub data: u64,
    pub init: u64,
    pub shuffle: u64,
    pub dropout: u64,
    pub flatness: u64,
    pub perturb: u64,
}

impl RunSeeds {
    pub fn new(seed: u64) -> Self {
        RunSeeds {
            data: derive_seed(seed, stream::DATA),
            init: derive_seed(seed, stream::INIT),
            shuffle: derive_seed(seed, stream::SHUFFLE),
            dropout: derive_seed(seed, stream::DROPOUT),
            flatness: derive_seed(seed, stream::FLATNESS),
            perturb: derive_seed(seed, stream::PERTURB),
        }
    }
}

/// Metrics of one model on every split after an epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitMetrics {
    pub train: EvalMetrics,
    pub val: EvalMetrics,
    /// `(domain id, metrics)` per evaluated domain.
    pub tests: Vec<(usize, EvalMetrics)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// The configured evaluation model (teacher for `both`).
    pub primary: SplitMetrics,
    /// Student metrics when the evaluation model is `both`.
    pub student: Option<SplitMetrics>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub student: ModelParams,
    pub teacher: FusedParams,
}

impl Checkpoint {
    /// Fused predictor used for evaluation under `model`.
    pub fn fused(&self, model: EvalModel) -> FusedParams {
        match model {
            EvalModel::Student => self.student.fused(),
            EvalModel::Teacher | EvalModel::Both => self.teacher.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub seeds: RunSeeds,
    /// Per-step training metrics with their 1-based epoch.
    pub steps: Vec<(usize, StepMetrics)>,
    pub epochs: Vec<EpochRecord>,
    pub selected: Checkpoint,
    pub flatness: Option<FlatnessCurve>,
    pub splits: ProtocolSplits,
    pub eval_model: EvalModel,
}

impl SeedRun {
    pub fn selected_record(&self) -> &EpochRecord {
        &self.epochs[self.selected.epoch - 1]
    }

    /// Metrics of the selected checkpoint on the first evaluated domain.
    pub fn selected_test(&self) -> &EvalMetrics {
        &self.selected_record().primary.tests[0].1
    }
}

pub fn build_splits(cfg: &ExperimentConfig, seeds: &RunSeeds) -> Result<ProtocolSplits> {
    let mut data_cfg = cfg.data.clone();
    data_cfg.seed = seeds.data;
    let dataset = generate(&data_cfg)?;
    let splits = protocol_splits(&dataset, cfg.protocol, cfg.target)?;
    check_no_leakage(&splits)?;
    Ok(splits)
}

fn eval_splits(student: &ModelParams, fused: Option<&FusedParams>, splits: &ProtocolSplits) -> Result<SplitMetrics> {
    Ok(SplitMetrics {
        train: evaluate(student, fused, &splits.train)?,
        val: evaluate(student, fused, &splits.val)?,
        tests: splits
            .tests
            .iter()
            .map(|(d, b)| Ok((*d, evaluate(student, fused, b)?)))
            .collect::<Result<_>>()?,
    })
}

/// Evaluates `student` (uni branches) and the fused predictor chosen by
/// `model` on every split.
pub fn eval_all(student: &ModelParams, teacher: &FusedParams, model: EvalModel, splits: &ProtocolSplits) -> Result<(SplitMetrics, Option<SplitMetrics>)> {
    match model {
        EvalModel::Student => Ok((eval_splits(student, None, splits)?, None)),
        EvalModel::Teacher => Ok((eval_splits(student, Some(teacher), splits)?, None)),
        EvalModel::Both => Ok((
            eval_splits(student, Some(teacher), splits)?,
            Some(eval_splits(student, None, splits)?),
        )),
    }
}

/// Trains one seed of `cfg` and selects the epoch with the best validation
/// fused accuracy (earliest epoch on ties).
pub fn train_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    cfg.validate()?;
    let seeds = RunSeeds::new(seed);
    let splits = build_splits(cfg, &seeds)?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.init_seed = seeds.init;
    let mbcd = cfg.effective_mbcd();
    let eval_model = mbcd.resolved_eval_model();
    let mut state = TrainerState::new(init_params(&model_cfg)?, mbcd.adam, seeds.dropout);
    let mut shuffle = rng::rng(seeds.shuffle);
    let mut order: Vec<usize> = (0..splits.train.len()).collect();

    let mut steps = Vec::new();
    let mut epochs = Vec::with_capacity(mbcd.epochs);
    let mut best: Option<(f64, Checkpoint)> = None;
    for epoch in 1..=mbcd.epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(mbcd.batch_size) {
            let batch = splits.train.select(chunk)?;
            steps.push((epoch, train_step(&mut state, &batch, &mbcd)?));
        }
        let (primary, student) = eval_all(&state.student, &state.teacher, eval_model, &splits)?;
        let val = primary.val.acc_mm;
        if best.as_ref().is_none_or(|(b, _)| val > *b) {
            best = Some((
                val,
                Checkpoint {
                    epoch,
                    student: state.student.clone(),
                    teacher: state.teacher.clone(),
                },
            ));
        }
        epochs.push(EpochRecord { epoch, primary, student });
    }
    let (_, selected) = best.expect("at least one epoch");

    let flatness = if cfg.flatness.enabled {
        let f = &cfg.flatness;
        let batch = match f.split {
            FlatnessSplit::TargetTest => &splits.tests[0].1,
            FlatnessSplit::SourceVal => &splits.val,
        };
        Some(probe_fused(
            &selected.fused(eval_model),
            batch,
            &f.radii,
            f.n_directions,
            seeds.flatness,
        )?)
    } else {
        None
    };

    Ok(SeedRun {
        seed,
        seeds,
        steps,
        epochs,
        selected,
        flatness,
        splits,
        eval_model,
    })
}

/// Fused accuracy of the selected checkpoint on the first evaluated domain
/// after adding `N(0, variance)` noise to modality `k`.
pub fn perturbed_test(run: &SeedRun, k: usize, variance: f64) -> Result<EvalMetrics> {
    let (_, test) = &run.splits.tests[0];
    let noisy: MultiModalBatch = perturb_batch(test, k, variance, run.seeds.perturb)?;
    let fused = run.selected.fused(run.eval_model);
    Ok(evaluate(&run.selected.student, Some(&fused), &noisy)?)
}
