use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, SweepParam};
use super::train::{evaluate, train_episode, Objective, TrainSettings, TraceEntry};
use crate::model::checkpoint::Checkpoint;
use crate::model::{build_model, Encoder, LinearHead, TwoTowerModel};
use crate::objective::LossReport;
use crate::tasks::{generate_task, import_embeddings, split_episode, Task};
use crate::{Error, Result, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub accuracy: f64,
    /// Query accuracy of the untrained model on the same episode.
    pub zero_shot_accuracy: f64,
    pub steps: usize,
    pub final_report: LossReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedTiming {
    pub seed: u64,
    pub seconds: f64,
}

/// Wall-clock figures, kept out of `result.json` so that file is reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_seconds: f64,
    pub seeds: Vec<SeedTiming>,
}

/// Aggregate of one run. `result.json` holds everything except the trace
/// (written to `trace.jsonl`) and the timing (`timing.json`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run_id: String,
    pub config: RunConfig,
    pub classes: usize,
    pub iterations: usize,
    pub seeds: Vec<SeedResult>,
    pub mean_accuracy: f64,
    /// Sample standard deviation (n − 1); zero for a single seed.
    pub std_accuracy: f64,
    pub mean_zero_shot_accuracy: f64,
    #[serde(skip)]
    pub trace: Vec<TraceEntry>,
    #[serde(skip)]
    pub timing: Option<Timing>,
}

impl RunResult {
    pub fn accuracies(&self) -> Vec<f64> {
        self.seeds.iter().map(|s| s.accuracy).collect()
    }
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation; zero below two values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

struct SeedOutcome {
    result: SeedResult,
    trace: Vec<TraceEntry>,
    checkpoint: Option<Checkpoint>,
    seconds: f64,
}

fn run_model<M: Encoder<f64>>(
    cfg: &RunConfig,
    seed: u64,
    mut model: M,
    task: &Task,
) -> Result<(SeedResult, Vec<TraceEntry>, Option<Checkpoint>)> {
    let episode = split_episode(task, cfg.shots, cfg.query_per_class, &mut Rng::new(seed).fork(1))?;
    let zero_shot_accuracy = evaluate(&model, &episode, task)?;
    let settings = TrainSettings {
        iterations: cfg.resolved_iterations(),
        lr: cfg.lr,
        objective: Objective::Limo {
            weights: cfg.weights(),
            toggles: cfg.toggles(),
        },
        trace_every: cfg.trace_every,
        seed,
    };
    let outcome = train_episode(&mut model, task, &episode, &settings)?;
    let accuracy = evaluate(&model, &episode, task)?;
    let checkpoint = cfg.save_checkpoints.then(|| Checkpoint::capture(&model));
    let result = SeedResult {
        seed,
        accuracy,
        zero_shot_accuracy,
        steps: outcome.steps_run,
        final_report: outcome.final_report,
    };
    Ok((result, outcome.trace, checkpoint))
}

fn run_seed(cfg: &RunConfig, seed: u64, imported: Option<&Task>) -> Result<SeedOutcome> {
    let start = Instant::now();
    let (result, trace, checkpoint) = match imported {
        Some(task) => {
            let head = LinearHead::new(task.dim(), cfg.strategy, cfg.tau)?;
            run_model(cfg, seed, head, task)?
        }
        None => {
            let task = generate_task(&cfg.generator_spec(), &mut Rng::new(seed).fork(0))?;
            let model: TwoTowerModel = build_model(&cfg.tower_config(seed), cfg.strategy)?;
            run_model(cfg, seed, model, &task)?
        }
    };
    Ok(SeedOutcome {
        result,
        trace,
        checkpoint,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs every seed (in parallel), aggregates, and writes the output files
/// when `cfg.out` is set. The first failing seed, in seed-list order, aborts
/// the run.
pub fn run_benchmark(cfg: &RunConfig) -> Result<RunResult> {
    cfg.validate()?;
    let start = Instant::now();
    let imported: Option<Task> = cfg.embeddings.as_ref().map(import_embeddings).transpose()?;
    let outcomes: Vec<Result<SeedOutcome>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| run_seed(cfg, seed, imported.as_ref()))
        .collect();
    let mut seeds = Vec::with_capacity(outcomes.len());
    let mut trace = Vec::new();
    let mut checkpoints = Vec::new();
    let mut timings = Vec::new();
    for (outcome, &seed) in outcomes.into_iter().zip(&cfg.seeds) {
        let o = outcome.map_err(|e| Error::Seed {
            seed,
            source: Box::new(e),
        })?;
        timings.push(SeedTiming { seed, seconds: o.seconds });
        trace.extend(o.trace);
        if let Some(c) = o.checkpoint {
            checkpoints.push((seed, c));
        }
        seeds.push(o.result);
    }
    let acc: Vec<f64> = seeds.iter().map(|s| s.accuracy).collect();
    let zs: Vec<f64> = seeds.iter().map(|s| s.zero_shot_accuracy).collect();
    let result = RunResult {
        run_id: cfg.run_id.clone(),
        config: cfg.clone(),
        classes: imported.as_ref().map_or(cfg.classes, Task::classes),
        iterations: cfg.resolved_iterations(),
        mean_accuracy: mean(&acc),
        std_accuracy: sample_std(&acc),
        mean_zero_shot_accuracy: mean(&zs),
        seeds,
        trace,
        timing: Some(Timing {
            total_seconds: start.elapsed().as_secs_f64(),
            seeds: timings,
        }),
    };
    if let Some(out) = &cfg.out {
        write_outputs(&result, out)?;
        for (seed, c) in &checkpoints {
            let dir = run_dir(out, &result.run_id).join("checkpoints");
            fs::create_dir_all(&dir)?;
            c.save(dir.join(format!("seed-{seed}.json")))?;
        }
    }
    Ok(result)
}

#[derive(Debug, Serialize)]
struct SummaryRow<'a> {
    run_id: &'a str,
    strategy: &'a str,
    shots: usize,
    #[serde(rename = "K")]
    classes: usize,
    lambda_ent: f64,
    lambda_cond: f64,
    lambda_text: f64,
    seed_count: usize,
    mean_acc: f64,
    std_acc: f64,
}

pub const SUMMARY_HEADER: [&str; 10] = [
    "run_id",
    "strategy",
    "shots",
    "K",
    "lambda_ent",
    "lambda_cond",
    "lambda_text",
    "seed_count",
    "mean_acc",
    "std_acc",
];

pub fn run_dir(out: &Path, run_id: &str) -> PathBuf {
    out.join(run_id)
}

/// Appends a row to a CSV file, writing the header first if the file is new
/// or empty.
fn append_csv<S: Serialize>(path: &Path, header: &[&str], row: &S) -> Result<()> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if fresh {
        w.write_record(header)?;
    }
    w.serialize(row)?;
    w.flush()?;
    Ok(())
}

/// Writes `<out>/<run_id>/{result.json, trace.jsonl, timing.json}` and
/// appends one row to `<out>/summary.csv`.
pub fn write_outputs(result: &RunResult, out: &Path) -> Result<()> {
    let dir = run_dir(out, &result.run_id);
    fs::create_dir_all(&dir)?;
    let mut json = serde_json::to_string_pretty(result)?;
    json.push('\n');
    fs::write(dir.join("result.json"), json)?;

    let mut trace = BufWriter::new(fs::File::create(dir.join("trace.jsonl"))?);
    for entry in &result.trace {
        serde_json::to_writer(&mut trace, entry)?;
        trace.write_all(b"\n")?;
    }
    trace.flush()?;

    if let Some(timing) = &result.timing {
        fs::write(dir.join("timing.json"), serde_json::to_string_pretty(timing)? + "\n")?;
    }

    let cfg = &result.config;
    let row = SummaryRow {
        run_id: &result.run_id,
        strategy: cfg.strategy.as_str(),
        shots: cfg.shots,
        classes: result.classes,
        lambda_ent: cfg.lambda_ent,
        lambda_cond: cfg.lambda_cond,
        lambda_text: cfg.lambda_text,
        seed_count: result.seeds.len(),
        mean_acc: result.mean_accuracy,
        std_acc: result.std_accuracy,
    };
    append_csv(&out.join("summary.csv"), &SUMMARY_HEADER, &row)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub mean_acc: f64,
    pub std_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub parameter: SweepParam,
    pub rows: Vec<SweepRow>,
    pub runs: Vec<RunResult>,
}

/// One benchmark per value of `param`, all else fixed. With `cfg.out` set,
/// each cell writes its own run directory and the table goes to
/// `<out>/<run_id>-sweep-<param>.csv`.
pub fn sweep(cfg: &RunConfig, param: SweepParam, values: &[f64]) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let mut runs = Vec::with_capacity(values.len());
    for &v in values {
        let mut cell = cfg.with_param(param, v);
        cell.run_id = format!("{}-{}-{}", cfg.run_id, param, v);
        runs.push(run_benchmark(&cell)?);
    }
    let rows: Vec<SweepRow> = values
        .iter()
        .zip(&runs)
        .map(|(&value, r)| SweepRow {
            value,
            mean_acc: r.mean_accuracy,
            std_acc: r.std_accuracy,
        })
        .collect();
    if let Some(out) = &cfg.out {
        let mut w = csv::Writer::from_path(out.join(format!("{}-sweep-{}.csv", cfg.run_id, param)))?;
        for row in &rows {
            w.serialize(row)?;
        }
        w.flush()?;
    }
    Ok(SweepTable {
        parameter: param,
        rows,
        runs,
    })
}
