use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use limo_core::harness::{posterior_eval, run_benchmark, sweep, RunConfig, RunResult, SweepParam, Term};
use limo_core::model::{build_model, LinearHead, Strategy, TwoTowerModel};
use limo_core::tasks::{generate_task, import_embeddings, EmbeddingFile, Task};
use limo_core::Rng;

#[derive(Parser)]
#[command(name = "limo", version, about = "Transductive few-shot adaptation benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every seed, then write result.json, trace.jsonl and a summary.csv row.
    Run(RunArgs),
    /// One run per value of a loss weight, all else fixed.
    Sweep {
        #[arg(long)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Encode a synthetic task with the frozen towers and write it as an embedding container.
    DumpSynthetic {
        #[arg(long)]
        output: PathBuf,
        /// Task seed (defaults to the first run seed).
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Validate an embedding container and report its contents.
    ImportCheck { path: PathBuf },
}

#[derive(Args, Default)]
struct RunArgs {
    /// JSON file with RunConfig keys; flags given here override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the calibrated reference benchmark instead of the plain defaults.
    #[arg(long)]
    reference: bool,
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    query_per_class: Option<usize>,
    #[arg(long)]
    concentration: Option<f64>,
    #[arg(long)]
    class_correlation: Option<f64>,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    lambda_ent: Option<f64>,
    #[arg(long)]
    lambda_cond: Option<f64>,
    #[arg(long)]
    lambda_text: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Disable a loss term; repeatable.
    #[arg(long)]
    toggle_off: Vec<Term>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    trace_every: Option<usize>,
    #[arg(long)]
    save_checkpoints: bool,
}

macro_rules! set {
    ($cfg:ident, $args:ident, $($field:ident),*) => {
        $(if let Some(v) = $args.$field.clone() { $cfg.$field = v; })*
    };
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_json_file(path).with_context(|| format!("reading {}", path.display()))?,
            None if self.reference => RunConfig::reference(),
            None => RunConfig::default(),
        };
        set!(
            cfg,
            self,
            run_id,
            shots,
            classes,
            query_per_class,
            concentration,
            class_correlation,
            strategy,
            lambda_ent,
            lambda_cond,
            lambda_text,
            tau,
            rank,
            dropout,
            lr,
            seeds,
            trace_every
        );
        if self.iterations.is_some() {
            cfg.iterations = self.iterations;
        }
        if self.embeddings.is_some() {
            cfg.embeddings = self.embeddings.clone();
        }
        if self.out.is_some() {
            cfg.out = self.out.clone();
        }
        if !self.toggle_off.is_empty() {
            cfg.toggle_off = self.toggle_off.clone();
        }
        cfg.save_checkpoints |= self.save_checkpoints;
        if cfg.out.is_none() {
            cfg.out = Some(PathBuf::from("results"));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn report(r: &RunResult) {
    for s in &r.seeds {
        println!(
            "seed {:>4}  zero-shot {:6.2}%  adapted {:6.2}%",
            s.seed,
            100.0 * s.zero_shot_accuracy,
            100.0 * s.accuracy
        );
    }
    println!(
        "{}: {} seeds, {} iterations, accuracy {:.2} ± {:.2}% (zero-shot {:.2}%)",
        r.run_id,
        r.seeds.len(),
        r.iterations,
        100.0 * r.mean_accuracy,
        100.0 * r.std_accuracy,
        100.0 * r.mean_zero_shot_accuracy
    );
}

fn dump_synthetic(cfg: &RunConfig, seed: u64, output: &PathBuf) -> Result<()> {
    if cfg.embeddings.is_some() {
        bail!("dump-synthetic encodes a generated task; drop --embeddings");
    }
    let task: Task = generate_task(&cfg.generator_spec(), &mut Rng::new(seed).fork(0))?;
    let model: TwoTowerModel = build_model(&cfg.tower_config(seed), Strategy::Frozen)?;
    let images = model.encode_images(task.samples())?;
    let classes = model.encode_classes(task.class_rows())?;
    let encoded = Task::precomputed(images, classes, task.labels().to_vec())?;
    EmbeddingFile::from_task(&encoded)?.write(output)?;
    println!(
        "wrote {} ({} samples, d = {}, K = {})",
        output.display(),
        encoded.len(),
        encoded.dim(),
        encoded.classes()
    );
    Ok(())
}

fn import_check(path: &PathBuf) -> Result<()> {
    let task: Task = import_embeddings(path)?;
    let mut counts = vec![0usize; task.classes()];
    for &y in task.labels() {
        counts[y] += 1;
    }
    let head = LinearHead::new(task.dim(), Strategy::Frozen, 0.01)?;
    let post = posterior_eval(&head, task.samples(), task.class_rows())?;
    let hits = post.predictions().iter().zip(task.labels()).filter(|(p, y)| p == y).count();
    println!("{}: ok", path.display());
    println!("samples {}  dim {}  classes {}", task.len(), task.dim(), task.classes());
    println!("per-class counts {counts:?}");
    println!("zero-shot accuracy {:.2}%", 100.0 * hits as f64 / task.len() as f64);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => args.resolve().and_then(|cfg| {
            report(&run_benchmark(&cfg)?);
            Ok(())
        }),
        Command::Sweep { param, values, run } => run.resolve().and_then(|cfg| {
            let table = sweep(&cfg, param, &values)?;
            println!("{param},mean_acc,std_acc");
            for row in &table.rows {
                println!("{},{:.4},{:.4}", row.value, row.mean_acc, row.std_acc);
            }
            Ok(())
        }),
        Command::DumpSynthetic { output, seed, run } => run.resolve().and_then(|cfg| {
            let seed = seed.unwrap_or(cfg.seeds[0]);
            dump_synthetic(&cfg, seed, &output)
        }),
        Command::ImportCheck { path } => import_check(&path),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
