//! Training loop, evaluation, multi-seed benchmarks, λ sweeps and result files.

mod bench;
mod config;
mod optim;
mod train;

pub use bench::{
    mean, run_benchmark, run_dir, sample_std, sweep, write_outputs, RunResult, SeedResult, SeedTiming, SweepRow,
    SweepTable, Timing, SUMMARY_HEADER,
};
pub use config::{RunConfig, SweepParam, Term};
pub use optim::Adam;
pub use train::{
    accuracy, evaluate, posterior_eval, train_episode, Objective, TraceEntry, TrainOutcome, TrainSettings, Trainer,
};
