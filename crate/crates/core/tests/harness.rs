mod common;

use std::fs;

use common::{setup, small_config};
use limo_core::harness::{
    evaluate, run_benchmark, sweep, train_episode, Objective, RunConfig, SweepParam, TrainSettings, Trainer,
};
use limo_core::model::{Encoder, Strategy};
use limo_core::objective::tim::tim_objective;
use limo_core::objective::{LossWeights, TermToggles};
use limo_core::tasks::Episode;

fn settings(cfg: &RunConfig, objective: Objective) -> TrainSettings {
    TrainSettings {
        iterations: cfg.resolved_iterations(),
        lr: cfg.lr,
        objective,
        trace_every: 1,
        seed: 0,
    }
}

fn limo(weights: LossWeights) -> Objective {
    Objective::Limo {
        weights,
        toggles: TermToggles::default(),
    }
}

#[test]
fn zero_weights_match_pure_cross_entropy_at_every_step() {
    let cfg = RunConfig {
        iterations: Some(25),
        ..small_config()
    };
    for strategy in [Strategy::Lora, Strategy::Prompt, Strategy::Lvp] {
        let (mut a, task, episode) = setup(&cfg, 5, strategy);
        let mut b = a.clone();
        let mut ta = Trainer::new(&mut a, &task, &episode, &settings(&cfg, limo(LossWeights::zero()))).unwrap();
        let mut tb = Trainer::new(&mut b, &task, &episode, &settings(&cfg, Objective::CrossEntropyOnly)).unwrap();
        for step in 0..25 {
            let ra = ta.step().unwrap();
            let rb = tb.step().unwrap();
            assert_eq!(ra.total.to_bits(), rb.total.to_bits(), "{strategy} step {step}");
        }
        drop((ta, tb));
        for ((_, name, x), (_, _, y)) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(x.data(), y.data(), "{name}");
        }
    }
}

#[test]
fn text_free_objective_matches_vision_only_infomax() {
    let cfg = RunConfig {
        iterations: Some(20),
        lambda_text: 0.0,
        ..small_config()
    };
    let weights = cfg.weights();
    let (mut model, task, episode) = setup(&cfg, 2, Strategy::Lvp);
    assert!(model.text_frozen());
    let rows: Vec<usize> = episode.support.iter().chain(&episode.query).copied().collect();
    let ns = episode.support.len();
    let support: Vec<usize> = (0..ns).collect();
    let query: Vec<usize> = (ns..rows.len()).collect();
    let images = task.gather(&rows);
    let classifier = model.encode_classes(task.class_rows()).unwrap();
    let tau = cfg.tau;

    let mut trainer = Trainer::new(&mut model, &task, &episode, &settings(&cfg, limo(weights))).unwrap();
    for step in 0..20 {
        let features = trainer.model().encode_images(&images).unwrap();
        assert_eq!(trainer.model().encode_classes(task.class_rows()).unwrap(), classifier);
        let report = trainer.step().unwrap();
        let tim = tim_objective(
            features.data(),
            classifier.data(),
            classifier.cols(),
            &support,
            &episode.support_labels,
            &query,
            &weights,
            tau,
        );
        assert_eq!(report.kl_text, 0.0);
        assert!((report.ce - tim.ce).abs() <= 1e-12, "step {step}");
        assert!((report.cond_entropy - tim.cond_entropy).abs() <= 1e-12, "step {step}");
        assert!((report.marg_entropy - tim.marg_entropy).abs() <= 1e-12, "step {step}");
        assert!((report.total - tim.total).abs() <= 1e-12, "step {step}");
    }
}

#[test]
fn same_config_and_seed_give_identical_result_json() {
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str| {
        let cfg = RunConfig {
            seeds: vec![3, 4],
            out: Some(dir.path().join(sub)),
            ..small_config()
        };
        run_benchmark(&cfg).unwrap();
        fs::read(dir.path().join(sub).join("small").join("result.json")).unwrap()
    };
    let a = run("a");
    let b = run("b");
    assert!(!a.is_empty());
    // the out path is part of the echoed config; mask it before comparing
    let text_a = String::from_utf8(a).unwrap().replace("/a\"", "/X\"");
    let text_b = String::from_utf8(b).unwrap().replace("/b\"", "/X\"");
    assert_eq!(text_a, text_b);
}

#[test]
fn repeated_seed_repeats_accuracy() {
    let cfg = RunConfig {
        seeds: vec![0, 0],
        ..small_config()
    };
    let r = run_benchmark(&cfg).unwrap();
    assert_eq!(r.seeds[0], r.seeds[1]);
    assert_eq!(r.std_accuracy, 0.0);
}

#[test]
fn aggregates_recompute_from_seeds() {
    let cfg = RunConfig {
        seeds: vec![0, 1, 2, 3],
        ..small_config()
    };
    let r = run_benchmark(&cfg).unwrap();
    let acc = r.accuracies();
    let mean = acc.iter().sum::<f64>() / acc.len() as f64;
    let var = acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (acc.len() - 1) as f64;
    assert!((r.mean_accuracy - mean).abs() <= 1e-12);
    assert!((r.std_accuracy - var.sqrt()).abs() <= 1e-12);
    assert_eq!(r.iterations, 15);
    assert_eq!(r.trace.len(), 4 * 15);
}

#[test]
fn query_labels_are_never_read_during_training() {
    let cfg = small_config();
    let (mut a, task, episode) = setup(&cfg, 1, Strategy::Lora);
    let mut b = a.clone();
    // every query label overwritten with one class
    let blind = task.with_labels_overwritten(&episode.query, 0);
    let s = settings(&cfg, limo(cfg.weights()));
    let ta = train_episode(&mut a, &task, &episode, &s).unwrap();
    let tb = train_episode(&mut b, &blind, &episode, &s).unwrap();
    assert_eq!(ta.trace, tb.trace);
    for ((_, _, x), (_, _, y)) in a.params().iter().zip(b.params().iter()) {
        assert_eq!(x.data(), y.data());
    }
}

#[test]
fn frozen_tensors_stay_bit_identical_for_every_strategy() {
    let cfg = RunConfig {
        iterations: Some(30),
        ..small_config()
    };
    for strategy in Strategy::ALL {
        let (mut model, task, episode) = setup(&cfg, 4, strategy);
        let before = model.params().clone();
        train_episode(&mut model, &task, &episode, &settings(&cfg, limo(cfg.weights()))).unwrap();
        let mut moved = 0;
        for ((_, name, x), (_, _, y)) in before.iter().zip(model.params().iter()) {
            if x.requires_grad() {
                moved += usize::from(x.data() != y.data());
            } else {
                assert_eq!(x.data(), y.data(), "{strategy}: frozen {name} changed");
            }
        }
        assert_eq!(moved > 0, strategy != Strategy::Frozen, "{strategy}");
    }
}

#[test]
fn frozen_strategy_keeps_accuracy_and_embeddings() {
    let cfg = small_config();
    let (mut model, task, episode) = setup(&cfg, 6, Strategy::Frozen);
    let before = evaluate(&model, &episode, &task).unwrap();
    let emb = model.encode_images(task.samples()).unwrap();
    let out = train_episode(&mut model, &task, &episode, &settings(&cfg, limo(cfg.weights()))).unwrap();
    assert_eq!(out.steps_run, 0);
    assert_eq!(evaluate(&model, &episode, &task).unwrap(), before);
    assert_eq!(model.encode_images(task.samples()).unwrap(), emb);
}

#[test]
fn cross_entropy_alone_fits_one_shot_two_way_support() {
    let cfg = RunConfig {
        classes: 2,
        shots: 1,
        query_per_class: 3,
        concentration: 4.0,
        class_correlation: 0.0,
        iterations: Some(200),
        lr: 1e-2,
        lambda_ent: 0.0,
        lambda_cond: 0.0,
        lambda_text: 0.0,
        toggle_off: vec![limo_core::harness::Term::Mi, limo_core::harness::Term::Text],
        ..small_config()
    };
    for seed in 0..5 {
        let (mut model, task, episode) = setup(&cfg, seed, Strategy::Lora);
        let s = TrainSettings {
            seed,
            ..settings(&cfg, Objective::Limo { weights: cfg.weights(), toggles: cfg.toggles() })
        };
        let out = train_episode(&mut model, &task, &episode, &s).unwrap();
        assert!(out.final_report.ce < 0.05, "seed {seed}: {:?}", out.final_report);
        let on_support = Episode {
            query: episode.support.clone(),
            ..episode.clone()
        };
        assert_eq!(evaluate(&model, &on_support, &task).unwrap(), 1.0, "seed {seed}");
    }
}

#[test]
fn outputs_and_summary_rows() {
    let dir = tempfile::tempdir().unwrap();
    let base = RunConfig {
        out: Some(dir.path().to_path_buf()),
        ..small_config()
    };
    let full = RunConfig {
        run_id: "full".into(),
        ..base.clone()
    };
    let ce = RunConfig {
        run_id: "ce".into(),
        lambda_ent: 0.0,
        lambda_cond: 0.0,
        lambda_text: 0.0,
        ..base
    };
    run_benchmark(&full).unwrap();
    run_benchmark(&ce).unwrap();
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], "run_id,strategy,shots,K,lambda_ent,lambda_cond,lambda_text,seed_count,mean_acc,std_acc");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("full,lora,2,3,10.0,1.0,0.1,1,"));
    assert!(lines[2].starts_with("ce,lora,2,3,0.0,0.0,0.0,1,"));

    let trace = fs::read_to_string(dir.path().join("full").join("trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 15);
    for line in trace.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["report"]["total"].is_number());
    }
    let result: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("full").join("result.json")).unwrap()).unwrap();
    assert!(result.get("timing").is_none() && result.get("trace").is_none());
    assert!(dir.path().join("full").join("timing.json").exists());
}

#[test]
fn sweep_emits_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        out: Some(dir.path().to_path_buf()),
        ..small_config()
    };
    let table = sweep(&cfg, SweepParam::LambdaText, &[0.1, 1.0, 10.0]).unwrap();
    assert_eq!(table.rows.len(), 3);
    assert_eq!(table.runs[2].config.lambda_text, 10.0);
    let csv = fs::read_to_string(dir.path().join("small-sweep-lambda_text.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "value,mean_acc,std_acc");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("10.0,"));
    assert!(sweep(&cfg, SweepParam::LambdaEnt, &[]).is_err());
}

#[test]
fn single_value_sweep_equals_plain_run() {
    let cfg = RunConfig {
        seeds: vec![0, 1],
        ..small_config()
    };
    let table = sweep(&cfg, SweepParam::LambdaCond, &[cfg.lambda_cond]).unwrap();
    let plain = run_benchmark(&cfg).unwrap();
    assert_eq!(table.runs[0].seeds, plain.seeds);
    assert_eq!(table.rows[0].mean_acc, plain.mean_accuracy);
    assert_eq!(table.rows[0].std_acc, plain.std_accuracy);
}

#[test]
fn failing_seed_is_named() {
    let cfg = RunConfig {
        seeds: vec![0],
        lr: 1e300,
        iterations: Some(5),
        ..small_config()
    };
    match run_benchmark(&cfg) {
        Err(limo_core::Error::Seed { seed: 0, source }) => {
            assert!(matches!(*source, limo_core::Error::Divergence { .. }), "{source}");
        }
        other => panic!("expected a seed error, got {other:?}"),
    }
}
