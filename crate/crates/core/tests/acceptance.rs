//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

mod common;

use std::time::{Duration, Instant};

use mgcm_core::cli::run_with;
use mgcm_core::harness::benchmark::{generate_benchmark, Dataset};
use mgcm_core::harness::config::RunConfig;
use mgcm_core::harness::study::compare_strategies;
use mgcm_core::harness::train::{seq_batch, train};
use mgcm_core::registry::{GradientVector, ModuleRegistry};
use mgcm_core::strategies::{
    combine_mgcm, combine_pcgrad_model, combine_sum, cos_sim, measured_scratch_memory, project,
    StrategyKind, TaskGradientSet,
};
use mgcm_core::telemetry::{estimate_extra_memory, paired_permutation_test, read_event_log, stats_from_rows};
use mgcm_core::autodiff::Tape;
use mgcm_core::transformer::{ToyTransformer, TransformerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn fig1() -> (TaskGradientSet, ModuleRegistry) {
    let ts = TaskGradientSet::new(
        GradientVector::new("primary", vec![0.5, 0.4, 0.7, 0.4]),
        vec![GradientVector::new("aux", vec![0.9, 0.8, -0.9, 0.7])],
        0,
    )
    .unwrap();
    (ts, ModuleRegistry::from_spans(&[0..2, 2..4]).unwrap())
}

fn c1_masking() -> Outcome {
    let (ts, reg) = fig1();
    let (p, a) = (&ts.primary.values, &ts.auxiliaries[0].values);
    let whole = cos_sim(p, a).map_err(|e| e.to_string())?.dot;
    let enc = cos_sim(&p[0..2], &a[0..2]).unwrap().dot;
    let dec = cos_sim(&p[2..4], &a[2..4]).unwrap().dot;
    for (label, got, want) in [("whole", whole, 0.42), ("encoder", enc, 0.77), ("decoder", dec, -0.35)] {
        ensure((got - want).abs() <= 1e-12, || format!("{label} dot {got} != {want}"))?;
    }
    let pc = combine_pcgrad_model(&ts).conflicts();
    let mg = combine_mgcm(&ts, &reg).unwrap().conflicts();
    ensure(pc == 0 && mg == 1, || format!("pcgrad {pc} conflicts, mgcm {mg}"))?;
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run_with(["mgcm", "masking-demo"], &mut out, &mut err);
    ensure(code == 0, || format!("masking-demo exited {code}"))?;
    Ok(format!("dots {whole:.2}/{enc:.2}/{dec:.2}, pcgrad 0 conflicts, mgcm 1"))
}

fn c2_projection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_orth = 0.0f64;
    let mut worst_idem = 0.0f64;
    for _ in 0..10_000 {
        let n = rng.gen_range(1..=512);
        let p = normal_vec(&mut rng, n);
        let mut a = normal_vec(&mut rng, n);
        if dot(&p, &a) >= 0.0 {
            a.iter_mut().for_each(|v| *v = -*v);
        }
        if dot(&p, &a) >= 0.0 {
            continue;
        }
        let r = project(&a, &p).unwrap().values;
        let orth = dot(&r, &p).abs() / (norm(&r) * norm(&p)).max(1e-12);
        let again = project(&r, &p).unwrap().values;
        let change = r.iter().zip(&again).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let idem = change / norm(&r).max(1e-12);
        worst_orth = worst_orth.max(orth);
        worst_idem = worst_idem.max(idem);
        ensure(orth <= 1e-6, || format!("dim {n}: |r·p| ratio {orth:e}"))?;
        ensure(idem <= 1e-9, || format!("dim {n}: re-projection change {idem:e}"))?;
    }
    Ok(format!("worst |r·p| ratio {worst_orth:.1e}, worst re-projection {worst_idem:.1e}"))
}

fn random_spans(rng: &mut ChaCha8Rng, n: usize) -> Vec<std::ops::Range<usize>> {
    let mut cuts: Vec<usize> = (1..n).filter(|_| rng.gen_bool(0.3)).collect();
    cuts.insert(0, 0);
    cuts.push(n);
    cuts.windows(2).map(|w| w[0]..w[1]).collect()
}

fn c3_no_conflict_noop() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..1000 {
        let n = rng.gen_range(1..=64);
        let spans = random_spans(&mut rng, n);
        let reg = ModuleRegistry::from_spans(&spans).unwrap();
        let p = normal_vec(&mut rng, n);
        let mut auxes: Vec<Vec<f64>> = (0..2).map(|_| normal_vec(&mut rng, n)).collect();
        for a in &mut auxes {
            for s in &spans {
                if dot(&p[s.clone()], &a[s.clone()]) < 0.0 {
                    a[s.clone()].iter_mut().for_each(|v| *v = -*v);
                }
            }
        }
        let ts = TaskGradientSet::new(
            GradientVector::new("p", p.clone()),
            auxes.iter().map(|a| GradientVector::new("a", a.clone())).collect(),
            i,
        )
        .unwrap();
        let sum = combine_sum(&ts).total.values;
        let mg = combine_mgcm(&ts, &reg).unwrap().total.values;
        ensure(sum == mg, || format!("instance {i}: MGCM total differs from Sum"))?;

        // model level: condition the whole vectors instead
        let mut whole = auxes.clone();
        for a in &mut whole {
            if dot(&p, a) < 0.0 {
                a.iter_mut().for_each(|v| *v = -*v);
            }
        }
        let ts = TaskGradientSet::new(
            GradientVector::new("p", p),
            whole.into_iter().map(|a| GradientVector::new("a", a)).collect(),
            i,
        )
        .unwrap();
        let sum = combine_sum(&ts).total.values;
        let pc = combine_pcgrad_model(&ts).total.values;
        ensure(sum == pc, || format!("instance {i}: PCGrad total differs from Sum"))?;
    }
    Ok("1000 instances bitwise equal for MGCM and PCGrad".into())
}

fn c4_degeneracy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut conflicting = 0;
    let mut worst = 0.0f64;
    for i in 0..50 {
        let n = rng.gen_range(2..=128);
        let reg = ModuleRegistry::from_spans(std::slice::from_ref(&(0..n))).unwrap();
        let p = normal_vec(&mut rng, n);
        let auxes: Vec<GradientVector> = (0..2).map(|_| GradientVector::new("a", normal_vec(&mut rng, n))).collect();
        conflicting += auxes.iter().filter(|a| dot(&p, &a.values) < 0.0).count();
        let ts = TaskGradientSet::new(GradientVector::new("p", p), auxes, i).unwrap();
        let mg = combine_mgcm(&ts, &reg).unwrap().total.values;
        let pc = combine_pcgrad_model(&ts).total.values;
        let diff = mg.iter().zip(&pc).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let rel = diff / norm(&pc).max(1e-300);
        worst = worst.max(rel);
        ensure(rel <= 1e-12, || format!("instance {i}: relative difference {rel:e}"))?;
    }
    ensure(conflicting > 0, || "no conflicting instance was generated".into())?;
    Ok(format!("50 instances ({conflicting} conflicting auxiliaries), worst {worst:.1e}"))
}

fn c5_gradients() -> Outcome {
    let mut worst = 0.0f64;
    let checks = common::all_op_checks();
    for (name, shapes, away, build) in &checks {
        worst = worst.max(common::run_op_check(name, shapes, *away, build.as_ref())?);
    }
    Ok(format!("{} ops x {} seeds, worst relative error {worst:.1e}", checks.len(), common::SEEDS))
}

fn c6_memory() -> Outcome {
    let table = [(0.2e9, 3.77, 0.20, 94.69), (0.5e9, 9.41, 0.48, 94.90), (1.0e9, 18.81, 0.95, 94.95)];
    let mut parts = Vec::new();
    for (p, pc_gb, mg_gb, saving) in table {
        let pc = estimate_extra_memory(StrategyKind::PcGradModel, p as u64, 4).map_err(|e| e.to_string())?;
        let mg = estimate_extra_memory(StrategyKind::Mgcm, p as u64, 4).map_err(|e| e.to_string())?;
        let within = |got: f64, want: f64| (got - want).abs() <= 0.15 * want;
        ensure(within(pc.extra_gb(), pc_gb), || format!("P={p:e}: pcgrad {} GB vs {pc_gb}", pc.extra_gb()))?;
        ensure(within(mg.extra_gb(), mg_gb), || format!("P={p:e}: mgcm {} GB vs {mg_gb}", mg.extra_gb()))?;
        ensure((mg.saving_percent() - saving).abs() <= 0.6, || {
            format!("P={p:e}: saving {}% vs {saving}%", mg.saving_percent())
        })?;
        parts.push(format!("{:.2}/{:.2}/{:.2}%", pc.extra_gb(), mg.extra_gb(), mg.saving_percent()));
    }
    let big = 1u64 << 50;
    let ratio = estimate_extra_memory(StrategyKind::Mgcm, big, 4).unwrap().ratio_vs_pcgrad;
    ensure((ratio - 0.05).abs() <= 0.005, || format!("asymptotic ratio {ratio}"))?;
    parts.push(format!("ratio {ratio:.4}"));
    Ok(parts.join(", "))
}

/// Measured scratch peaks for one toy model using real task gradients.
fn scratch_peaks(cfg: TransformerConfig) -> Result<(usize, usize, usize, usize), String> {
    let (model, reg) = ToyTransformer::<f32>::new(cfg, 0).map_err(|e| e.to_string())?;
    let mut run = RunConfig { model: cfg, ..RunConfig::default() };
    run.data.dataset_size = 8;
    let Dataset::Seq { train, .. } = generate_benchmark(&run.benchmark_spec()).map_err(|e| e.to_string())? else {
        return Err("expected a sequence dataset".into());
    };
    let picked: Vec<_> = train.iter().take(4).collect();
    let grads: Vec<GradientVector> = (0..3)
        .map(|task| {
            let mut tape = Tape::new();
            let loss = model.loss(&mut tape, &seq_batch(&picked, task)).unwrap();
            GradientVector::new("g", model.params.flatten(&tape.backward(loss, &model.params).unwrap()))
        })
        .collect();
    let mut grads = grads.into_iter();
    let ts = TaskGradientSet::new(grads.next().unwrap(), grads.collect(), 0).unwrap();
    let mg = measured_scratch_memory(StrategyKind::Mgcm, &ts, &reg).map_err(|e| e.to_string())?;
    let pc = measured_scratch_memory(StrategyKind::PcGradModel, &ts, &reg).map_err(|e| e.to_string())?;
    let largest = reg.largest_module();
    Ok((mg, pc, largest, reg.total()))
}

fn c7_scratch() -> Outcome {
    let base = TransformerConfig::default();
    let (mg1, pc1, largest, total) = scratch_peaks(base)?;
    ensure(largest * 20 <= total, || format!("largest module {largest} of {total} exceeds 1/20"))?;
    ensure(mg1 * 10 <= pc1, || format!("mgcm peak {mg1} B vs pcgrad {pc1} B"))?;
    let doubled = TransformerConfig {
        enc_layers: base.enc_layers * 2,
        dec_layers: base.dec_layers * 2,
        ..base
    };
    let (mg2, pc2, _, total2) = scratch_peaks(doubled)?;
    let mg_ratio = mg2 as f64 / mg1 as f64;
    let pc_ratio = pc2 as f64 / pc1 as f64;
    ensure((mg_ratio - 1.0).abs() <= 0.1, || format!("mgcm peak ratio {mg_ratio}"))?;
    ensure((pc_ratio - 2.0).abs() <= 0.2, || format!("pcgrad peak ratio {pc_ratio}"))?;
    Ok(format!(
        "params {total}->{total2}; mgcm {mg1}->{mg2} B (x{mg_ratio:.2}); pcgrad {pc1}->{pc2} B (x{pc_ratio:.2})"
    ))
}

fn c8_telemetry() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = RunConfig::default();
    cfg.train.strategy = StrategyKind::Mgcm;
    cfg.train.steps = 500;
    cfg.out = Some(dir.path().join("run"));
    let data = generate_benchmark(&cfg.benchmark_spec()).map_err(|e| e.to_string())?;
    let result = train(&cfg, &data).map_err(|e| e.to_string())?;
    let path = result.event_log.clone().ok_or("no event log written")?;
    let rows = read_event_log(std::fs::File::open(path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let rebuilt = stats_from_rows(&rows);
    ensure(rebuilt == result.stats, || "rebuilt counters differ from online counters".into())?;
    let conflicts: u64 = result.stats.iter().map(|(_, c)| c.conflicts_observed).sum();
    Ok(format!(
        "{} rows, {} counters, {conflicts} conflicts over {} steps match exactly",
        rows.len(),
        result.stats.iter().count(),
        result.stats.steps_recorded()
    ))
}

fn c9_training() -> Outcome {
    let strategies = [StrategyKind::Sum, StrategyKind::PcGradModel, StrategyKind::Mgcm];
    let configs: Vec<RunConfig> = (0..10)
        .flat_map(|seed| strategies.iter().map(move |k| RunConfig::engineered(*k, 0.8, seed)))
        .collect();
    let (report, _) = compare_strategies(&configs).map_err(|e| e.to_string())?;
    let sum = report.comparison(StrategyKind::Sum).ok_or("no sum comparison")?;
    let pc = report.comparison(StrategyKind::PcGradModel).ok_or("no pcgrad comparison")?;
    let p = sum.p_value.ok_or("no p-value")?;
    let summary = format!(
        "mgcm <= sum in {}/10, <= pcgrad in {}/10, p(vs sum) = {p:.4}",
        sum.mgcm_wins, pc.mgcm_wins
    );
    ensure(sum.mgcm_wins >= 8 && pc.mgcm_wins >= 7 && p < 0.05, || summary.clone())?;
    Ok(summary)
}

fn c10_significance() -> Outcome {
    let a = [0.31, 0.52, 0.47, 0.66, 0.29, 0.44];
    let p_same = paired_permutation_test(&a, &a, 10_000, 0).map_err(|e| e.to_string())?;
    ensure(p_same == 1.0, || format!("identical inputs gave p = {p_same}"))?;
    let trials = 200;
    let mut rejections = 0;
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(1_000 + t);
        let x = normal_vec(&mut rng, 20);
        let y = normal_vec(&mut rng, 20);
        if paired_permutation_test(&x, &y, 10_000, t).unwrap() < 0.05 {
            rejections += 1;
        }
    }
    let rate = rejections as f64 / trials as f64;
    ensure((0.03..=0.07).contains(&rate), || format!("false-positive rate {rate}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x = normal_vec(&mut rng, 20);
    let y: Vec<f64> = x
        .iter()
        .map(|v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            v + 1.0 + 0.3 * z
        })
        .collect();
    let p_shift = paired_permutation_test(&x, &y, 10_000, 0).unwrap();
    ensure(p_shift < 0.01, || format!("shifted inputs gave p = {p_shift}"))?;
    Ok(format!("p(identical) = 1, false-positive rate {rate:.3}, p(shifted) = {p_shift:.1e}"))
}

fn c11_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut texts = Vec::new();
    for name in ["a", "b"] {
        let mut cfg = RunConfig::default();
        cfg.train.steps = 60;
        cfg.train.strategy = StrategyKind::PcGradModel;
        cfg.out = Some(dir.path().join(name));
        let data = generate_benchmark(&cfg.benchmark_spec()).map_err(|e| e.to_string())?;
        let r = train(&cfg, &data).map_err(|e| e.to_string())?;
        let read = |p: Option<std::path::PathBuf>| std::fs::read(p.unwrap()).unwrap();
        texts.push((read(r.step_log), read(r.event_log), r.fingerprint));
    }
    ensure(texts[0].0 == texts[1].0, || "step logs differ".into())?;
    ensure(texts[0].1 == texts[1].1, || "event logs differ".into())?;
    ensure(texts[0].2 == texts[1].2, || "fingerprints differ".into())?;
    Ok(format!("step log {} B and event log {} B identical", texts[0].0.len(), texts[0].1.len()))
}

type Criterion = (u32, &'static str, Duration, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 11] = [
        (1, "conflict masking example", Duration::from_secs(1), c1_masking),
        (2, "projection contract", Duration::from_secs(10), c2_projection),
        (3, "no-conflict no-op", Duration::from_secs(10), c3_no_conflict_noop),
        (4, "single-module degeneracy", Duration::MAX, c4_degeneracy),
        (5, "gradient correctness", Duration::from_secs(60), c5_gradients),
        (6, "memory model", Duration::from_secs(1), c6_memory),
        (7, "scratch-memory scaling", Duration::from_secs(60), c7_scratch),
        (8, "telemetry soundness", Duration::MAX, c8_telemetry),
        (9, "training benefit", Duration::from_secs(600), c9_training),
        (10, "significance calibration", Duration::from_secs(60), c10_significance),
        (11, "determinism", Duration::MAX, c11_determinism),
    ];
    let only: Vec<u32> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failed = 0;
    for (id, name, limit, f) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        let outcome = outcome.and_then(|msg| {
            if took <= limit {
                Ok(msg)
            } else {
                Err(format!("{msg}; took {took:.1?}, limit {limit:?}"))
            }
        });
        match outcome {
            Ok(msg) => println!("PASS  criterion {id:>2}  {name:<26} {took:>9.2?}  {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL  criterion {id:>2}  {name:<26} {took:>9.2?}  {msg}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
