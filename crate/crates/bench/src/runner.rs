//! Matrix execution: every (task, method, seed) run is trained, evaluated and
//! analysed independently, then merged in a fixed order.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use shiftbench_core::analysis::{
    feature_a_distance, hdh_divergence, lambda_h, verify_bound, AnalysisError, FiniteHypothesisClass,
    MIN_PROXY_SAMPLES,
};
use shiftbench_core::domains::{DomainDataset, LabeledSample};
use shiftbench_core::models::ModelBundle;
use shiftbench_core::trainer::{train, Split, TrainHistory};

use crate::config::{ConfigError, ExperimentConfig, TaskSpec};
use crate::records::{aggregate, emit_csv, sort_records, ExperimentRecord, RecordError, SeedKey};

/// Thresholds per input dimension for the input-space hypothesis class.
pub const STUMPS_PER_DIM: usize = 21;

/// Input dimensions above which the H∆H diagnostics are skipped.
pub const MAX_HDH_DIMS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct RunFailure {
    pub task: String,
    pub method: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, Default)]
pub struct MatrixOutput {
    /// Raw per-seed records followed by aggregates, sorted.
    pub records: Vec<ExperimentRecord>,
    pub failures: Vec<RunFailure>,
}

impl MatrixOutput {
    pub fn succeeded(&self) -> bool {
        self.failures.is_empty()
    }
}

pub struct RunOutput {
    pub records: Vec<ExperimentRecord>,
    pub model: ModelBundle,
    pub dataset: DomainDataset,
    pub history: TrainHistory,
}

struct Recorder<'a> {
    task: &'a str,
    method: &'a str,
    seed: u64,
    out: Vec<ExperimentRecord>,
}

impl Recorder<'_> {
    fn push(&mut self, split: Split, metric: &str, step: usize, value: f64) {
        self.out.push(ExperimentRecord {
            method: self.method.to_string(),
            task: self.task.to_string(),
            seed: SeedKey::Run(self.seed),
            split: split.name().to_string(),
            metric: metric.to_string(),
            step,
            value,
        });
    }
}

fn target_labeled(ds: &DomainDataset) -> Vec<LabeledSample> {
    ds.target_unlabeled
        .iter()
        .zip(ds.target_train_labels.reveal())
        .map(|(x, &y)| LabeledSample { x: x.clone(), y })
        .collect()
}

/// Input-space divergence diagnostics against the hidden target labels.
/// Returns `(d_hdh, lambda_h, bound_gap)`, or `None` for wide or multiclass inputs.
pub fn input_space_bound(ds: &DomainDataset) -> Result<Option<(f64, f64, f64)>, AnalysisError> {
    if ds.input_dim() > MAX_HDH_DIMS || ds.num_classes() != 2 {
        return Ok(None);
    }
    let t = target_labeled(ds);
    let sx: Vec<&[f64]> = ds.source_labeled.iter().map(|s| s.x.as_slice()).collect();
    let tx: Vec<&[f64]> = t.iter().map(|s| s.x.as_slice()).collect();
    let all: Vec<&[f64]> = sx.iter().chain(&tx).copied().collect();
    let class = FiniteHypothesisClass::stumps_covering(&all, STUMPS_PER_DIM)?;
    let d = hdh_divergence(&class, &sx, &tx)?;
    let lambda = lambda_h(&class, &ds.source_labeled, &t)?;
    let gap = verify_bound(&class, &ds.source_labeled, &t)?
        .iter()
        .map(|r| r.gap())
        .fold(f64::INFINITY, f64::min);
    Ok(Some((d, lambda, gap)))
}

pub fn run_one(config: &ExperimentConfig, task: &TaskSpec, method: &str, seed: u64) -> Result<RunOutput, String> {
    let dataset = task.build(seed).map_err(|e| e.to_string())?;
    let mut tc = config.train_config(method, seed).map_err(|e| e.to_string())?;
    tc.augmentation = task.augmentation.clone();
    let (model, history) = train(&dataset, &tc).map_err(|e| e.to_string())?;

    let mut rec = Recorder {
        task: &task.name,
        method,
        seed,
        out: Vec::new(),
    };
    for h in &history.records {
        for (split, m) in [(Split::Transductive, h.transductive), (Split::Inductive, h.inductive)] {
            rec.push(split, "acc", h.step, m.acc);
            rec.push(split, "cat_acc", h.step, m.cat_acc);
        }
        rec.push(Split::Transductive, "sup_loss", h.step, h.sup_loss);
        rec.push(Split::Transductive, "total_loss", h.step, h.total_loss);
        rec.push(Split::Transductive, "lr", h.step, h.lr);
        if let Some(r) = h.mask_rate {
            rec.push(Split::Transductive, "mask_rate", h.step, r);
        }
    }
    let last = tc.total_steps;
    for split in [Split::Transductive, Split::Inductive] {
        if let Some(b) = history.best(split) {
            let acc = match split {
                Split::Transductive => b.transductive.acc,
                Split::Inductive => b.inductive.acc,
            };
            rec.push(split, "best_acc", last, acc);
            rec.push(split, "best_step", last, b.step as f64);
        }
    }
    if dataset.source_labeled.len() >= MIN_PROXY_SAMPLES && dataset.target_unlabeled.len() >= MIN_PROXY_SAMPLES {
        let d = feature_a_distance(&model, &dataset.source_x(), &dataset.target_x(), seed).map_err(|e| e.to_string())?;
        rec.push(Split::Transductive, "proxy_a_distance", last, d);
    }
    if let Some((d, lambda, gap)) = input_space_bound(&dataset).map_err(|e| e.to_string())? {
        rec.push(Split::Transductive, "d_hdh", last, d);
        rec.push(Split::Transductive, "lambda_h", last, lambda);
        rec.push(Split::Transductive, "bound_gap", last, gap);
    }
    Ok(RunOutput {
        records: rec.out,
        model,
        dataset,
        history,
    })
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.+".contains(c) { c } else { '_' })
        .collect()
}

pub fn run_file_name(task: &str, method: &str, seed: u64) -> String {
    format!("{}__{}__{seed}.csv", sanitize(task), sanitize(method))
}

/// The run list in merge order: tasks, then methods, then seeds, as configured.
pub fn run_list(config: &ExperimentConfig) -> Vec<(usize, String, u64)> {
    let mut v = Vec::new();
    for (ti, _) in config.tasks.iter().enumerate() {
        for m in &config.methods {
            for &s in &config.train.seeds {
                v.push((ti, m.clone(), s));
            }
        }
    }
    v
}

/// Runs the whole matrix on `jobs` workers. With `runs_dir`, every finished run
/// is also written to its own file there.
pub fn run_matrix(config: &ExperimentConfig, jobs: usize, runs_dir: Option<&Path>) -> Result<MatrixOutput, ConfigError> {
    config.validate()?;
    if let Some(d) = runs_dir {
        std::fs::create_dir_all(d).map_err(|source| ConfigError::Io {
            path: d.to_path_buf(),
            source,
        })?;
    }
    let runs = run_list(config);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| ConfigError::Invalid(format!("worker pool: {e}")))?;
    let results: Vec<Result<Vec<ExperimentRecord>, RunFailure>> = pool.install(|| {
        runs.par_iter()
            .map(|(ti, method, seed)| {
                let task = &config.tasks[*ti];
                let fail = |error: String| RunFailure {
                    task: task.name.clone(),
                    method: method.clone(),
                    seed: *seed,
                    error,
                };
                let out = run_one(config, task, method, *seed).map_err(&fail)?;
                if let Some(d) = runs_dir {
                    let path: PathBuf = d.join(run_file_name(&task.name, method, *seed));
                    emit_csv(&out.records, &path).map_err(|e: RecordError| fail(e.to_string()))?;
                }
                Ok(out.records)
            })
            .collect()
    });
    let mut out = MatrixOutput::default();
    for r in results {
        match r {
            Ok(recs) => out.records.extend(recs),
            Err(f) => {
                out.records.push(ExperimentRecord {
                    method: f.method.clone(),
                    task: f.task.clone(),
                    seed: SeedKey::Run(f.seed),
                    split: Split::Transductive.name().to_string(),
                    metric: "failed".into(),
                    step: 0,
                    value: 1.0,
                });
                out.failures.push(f);
            }
        }
    }
    let ok: Vec<ExperimentRecord> = out.records.iter().filter(|r| r.metric != "failed").cloned().collect();
    out.records.extend(aggregate(&ok));
    sort_records(&mut out.records);
    Ok(out)
}
