use mgcm_core::autodiff::Tape;
use mgcm_core::harness::benchmark::{generate_benchmark, Dataset};
use mgcm_core::harness::config::RunConfig;
use mgcm_core::harness::study::{compare_strategies, load_study, run_dir, study_report};
use mgcm_core::harness::train::{seq_batch, train};
use mgcm_core::strategies::StrategyKind;
use mgcm_core::transformer::ToyTransformer;

#[test]
fn sum_and_mgcm_agree_without_conflict() {
    let mut sum = RunConfig::engineered(StrategyKind::Sum, 0.0, 2);
    sum.train.steps = 300;
    let mut mgcm = sum.clone();
    mgcm.train.strategy = StrategyKind::Mgcm;
    let data = generate_benchmark(&sum.benchmark_spec()).unwrap();
    let a = train(&sum, &data).unwrap();
    let b = train(&mgcm, &data).unwrap();
    assert_eq!(b.conflict_events, 0);
    for (x, y) in a.trajectory.iter().zip(&b.trajectory) {
        assert!((x.primary - y.primary).abs() <= 1e-9);
        assert!((x.aux1 - y.aux1).abs() <= 1e-9);
    }
    assert!((a.final_primary_loss - b.final_primary_loss).abs() <= 1e-9);
}

/// Conflict frequency of the designated block under plain summation.
fn designated_conflict_rate(knob: f64, seed: u64) -> f64 {
    let mut c = RunConfig::engineered(StrategyKind::Sum, knob, seed);
    c.train.steps = 200;
    let data = generate_benchmark(&c.benchmark_spec()).unwrap();
    let r = train(&c, &data).unwrap();
    let block = c.data.designated_block as i64;
    let rates: Vec<f64> = (0..2).map(|aux| r.stats.probability(block, aux).unwrap()).collect();
    rates.iter().sum::<f64>() / rates.len() as f64
}

#[test]
fn conflict_knob_controls_designated_module() {
    for seed in 0..5 {
        let low = designated_conflict_rate(0.0, seed);
        let high = designated_conflict_rate(1.0, seed);
        assert!(low < 0.2, "seed {seed}: knob 0 rate {low}");
        assert!(high > 0.6, "seed {seed}: knob 1 rate {high}");
    }
}

#[test]
fn pcgrad_runs_log_masking_episodes() {
    let configs: Vec<RunConfig> = (0..3)
        .flat_map(|s| {
            [StrategyKind::PcGradModel, StrategyKind::Mgcm].map(|k| {
                let mut c = RunConfig::engineered(k, 0.8, s);
                c.train.steps = 300;
                c
            })
        })
        .collect();
    let (_, results) = compare_strategies(&configs).unwrap();
    for r in results.iter().filter(|r| r.strategy == StrategyKind::PcGradModel) {
        assert!(r.masking_episodes > 0, "seed {}", r.seed);
    }
}

#[test]
fn study_report_rebuilds_from_saved_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let mut configs = Vec::new();
    for seed in 0..3 {
        for k in [StrategyKind::Sum, StrategyKind::Mgcm] {
            let mut c = RunConfig::engineered(k, 0.8, seed);
            c.train.steps = 100;
            c.out = Some(run_dir(dir.path(), k, seed));
            configs.push(c);
        }
    }
    let (report, _) = compare_strategies(&configs).unwrap();
    let again = study_report(&load_study(dir.path()).unwrap()).unwrap();
    assert_eq!(report.to_text(), again.to_text());
    assert_eq!(report, again);
}

#[test]
fn identical_configs_share_fingerprint_and_logs() {
    let dir = tempfile::tempdir().unwrap();
    let mut outs = Vec::new();
    for name in ["x", "y"] {
        let mut c = RunConfig::engineered(StrategyKind::Mgcm, 0.8, 7);
        c.train.steps = 150;
        c.out = Some(dir.path().join(name));
        let data = generate_benchmark(&c.benchmark_spec()).unwrap();
        outs.push(train(&c, &data).unwrap());
    }
    assert_eq!(outs[0].fingerprint, outs[1].fingerprint);
    for log in ["steps.csv", "events.csv", "masking.csv"] {
        let a = std::fs::read(dir.path().join("x").join(log)).unwrap();
        let b = std::fs::read(dir.path().join("y").join(log)).unwrap();
        assert_eq!(a, b, "{log}");
    }
}

#[test]
fn task_gradients_are_isolated() {
    let cfg = RunConfig::default();
    let Dataset::Seq { train, .. } = generate_benchmark(&cfg.benchmark_spec()).unwrap() else {
        panic!("expected sequence data")
    };
    let picked: Vec<_> = train.iter().take(4).collect();
    let (model, _) = ToyTransformer::<f32>::new(cfg.model, 0).unwrap();
    let grad = |m: &ToyTransformer<f32>, task: usize| {
        let mut tape = Tape::new();
        let loss = m.loss(&mut tape, &seq_batch(&picked, task)).unwrap();
        m.params.flatten(&tape.backward(loss, &m.params).unwrap())
    };
    // all three tasks in sequence on one model, as the training loop does
    let shared: Vec<Vec<f64>> = (0..3).map(|t| grad(&model, t)).collect();
    for (task, g) in shared.iter().enumerate() {
        let fresh = model.clone();
        assert_eq!(*g, grad(&fresh, task), "task {task}");
    }
}
