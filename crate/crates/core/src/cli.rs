//! Command-line front end. [`run`] returns the process exit code: 0 on
//! success, 1 on usage errors, 2 on runtime failures.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::harness::benchmark::generate_benchmark;
use crate::harness::config::RunConfig;
use crate::harness::study::{compare_strategies, load_study, run_dir, study_report};
use crate::harness::train::train;
use crate::registry::{GradientVector, ModuleRegistry};
use crate::strategies::{combine, cos_sim, detect_conflict, StrategyKind, TaskGradientSet};
use crate::telemetry::stats::parse_group_keys;
use crate::telemetry::{detect_masking, estimate_extra_memory, paired_permutation_test, read_event_log, report_from_rows};

#[derive(Debug, Parser)]
#[command(name = "mgcm", version, about = "Module-level gradient conflict mitigation toolkit")]
struct Cli {
    /// Run configuration (JSON)
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for both the data and the training run
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Gradient combination strategy: sum, pcgrad, discard or mgcm
    #[arg(long, global = true, value_name = "NAME")]
    strategy: Option<StrategyKind>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one run and print its summary
    Train(TrainArgs),
    /// Compare strategies over several seeds
    Study(StudyArgs),
    /// Show how a module-level conflict hides inside an agreeing model-level gradient
    MaskingDemo(MaskingArgs),
    /// Estimate the extra memory of each strategy
    Memory(MemoryArgs),
    /// Paired permutation test on two CSV columns
    Sigtest(SigtestArgs),
    /// Aggregate event logs, or a saved study, into tables
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Override the number of training steps
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Debug, Args)]
struct StudyArgs {
    /// Number of consecutive seeds, starting at --seed (default 0)
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// Comma-separated strategies to compare
    #[arg(long, default_value = "sum,pcgrad,discard,mgcm")]
    strategies: String,
    /// Override the number of training steps
    #[arg(long)]
    steps: Option<usize>,
    /// Override the conflict knob of the data section
    #[arg(long)]
    knob: Option<f64>,
}

#[derive(Debug, Args)]
struct MaskingArgs {
    /// Primary gradient, comma-separated
    #[arg(long, default_value = "0.5,0.4,0.7,0.4", allow_hyphen_values = true)]
    primary: String,
    /// Auxiliary gradient, comma-separated
    #[arg(long, default_value = "0.9,0.8,-0.9,0.7", allow_hyphen_values = true)]
    aux: String,
    /// Module boundaries, comma-separated (a single 2 gives [0,2) and [2,4))
    #[arg(long, default_value = "2")]
    split: String,
}

#[derive(Debug, Args)]
struct MemoryArgs {
    /// Parameter counts, comma-separated; scientific notation is accepted
    #[arg(long, default_value = "0.2e9,0.5e9,1.0e9")]
    params: String,
    /// Bytes per element: 2, 4 or 8
    #[arg(long, default_value_t = 4)]
    bytes: u32,
}

#[derive(Debug, Args)]
struct SigtestArgs {
    /// CSV file with one row per paired observation
    #[arg(long)]
    csv: PathBuf,
    /// Column holding the first system's scores
    #[arg(long)]
    a: String,
    /// Column holding the second system's scores
    #[arg(long)]
    b: String,
    /// Number of random sign flips
    #[arg(long, default_value_t = 10_000)]
    resamples: usize,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Event log CSV files
    #[arg(long, num_args = 1.., value_name = "PATH")]
    events: Vec<PathBuf>,
    /// Grouping keys, comma-separated: kind, layer, component
    #[arg(long, default_value = "kind")]
    group_by: String,
    /// Keep only modules from the attention/FFN/LN taxonomy
    #[arg(long)]
    taxonomy_only: bool,
    /// Rebuild a study table from a study output directory
    #[arg(long, value_name = "DIR")]
    study: Option<PathBuf>,
}

/// Parses `argv` (program name first) and runs the command, printing to the
/// process streams.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(argv, &mut stdout.lock(), &mut stderr.lock())
}

pub fn run_with<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    0
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    1
                }
            }
        }
    };
    match execute(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            2
        }
    }
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(&cli, a, out),
        Command::Study(a) => cmd_study(&cli, a, out),
        Command::MaskingDemo(a) => cmd_masking(a, out),
        Command::Memory(a) => cmd_memory(a, out),
        Command::Sigtest(a) => cmd_sigtest(&cli, a, out),
        Command::Report(a) => cmd_report(a, out),
    }
}

fn base_config(cli: &Cli, fallback: RunConfig) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => fallback,
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
        cfg.data.seed = s;
    }
    if let Some(k) = cli.strategy {
        cfg.train.strategy = k;
    }
    if let Some(o) = &cli.out {
        cfg.out = Some(o.clone());
    }
    Ok(cfg)
}

fn cmd_train(cli: &Cli, a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = base_config(cli, RunConfig::default())?;
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    let data = generate_benchmark(&cfg.benchmark_spec())?;
    let r = train(&cfg, &data)?;
    writeln!(out, "strategy            {}", r.strategy)?;
    writeln!(out, "steps               {}", r.trajectory.len())?;
    writeln!(out, "initial primary     {}", r.initial_primary_loss)?;
    writeln!(out, "final primary       {}", r.final_primary_loss)?;
    writeln!(out, "module conflicts    {}", r.conflict_events)?;
    writeln!(out, "masking episodes    {}", r.masking_episodes)?;
    writeln!(out, "fingerprint         {}", r.fingerprint)?;
    if let Some(d) = &cfg.out {
        writeln!(out, "written to          {}", d.display())?;
    }
    Ok(())
}

fn cmd_study(cli: &Cli, a: &StudyArgs, out: &mut dyn Write) -> Result<()> {
    let strategies = a
        .strategies
        .split(',')
        .map(|s| s.trim().parse::<StrategyKind>())
        .collect::<Result<Vec<_>>>()?;
    let mut base = base_config(cli, RunConfig::engineered(StrategyKind::Mgcm, 0.8, 0))?;
    if let Some(s) = a.steps {
        base.train.steps = s;
    }
    if let Some(k) = a.knob {
        base.data.conflict_knob = k;
    }
    let root = base.out.take();
    let first = cli.seed.unwrap_or(0);
    let mut configs = Vec::new();
    for seed in first..first + a.seeds {
        for k in &strategies {
            let mut c = base.clone();
            c.train.strategy = *k;
            c.train.seed = seed;
            c.data.seed = seed;
            c.out = root.as_deref().map(|r| run_dir(r, *k, seed));
            configs.push(c);
        }
    }
    let (report, _) = compare_strategies(&configs)?;
    let text = report.to_text();
    if let Some(r) = &root {
        std::fs::write(r.join("study.csv"), &text)?;
        std::fs::write(r.join("study.json"), serde_json::to_string_pretty(&report)?)?;
    }
    write!(out, "{text}")?;
    Ok(())
}

fn parse_list(field: &str, s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Invalid(format!("--{field}: `{t}` is not a number")))
        })
        .collect()
}

/// Shortest decimal that is stable for display (rounded to 12 digits).
fn num(x: f64) -> String {
    let r = (x * 1e12).round() / 1e12;
    if r == 0.0 {
        "0".into()
    } else {
        r.to_string()
    }
}

fn cmd_masking(a: &MaskingArgs, out: &mut dyn Write) -> Result<()> {
    let p = parse_list("primary", &a.primary)?;
    let g = parse_list("aux", &a.aux)?;
    if p.len() != g.len() {
        return Err(Error::Invalid(format!("--primary has {} values but --aux has {}", p.len(), g.len())));
    }
    let mut bounds = vec![0usize];
    for b in parse_list("split", &a.split)? {
        if b < 0.0 || b.fract() != 0.0 {
            return Err(Error::Invalid(format!("--split: {b} is not a boundary index")));
        }
        bounds.push(b as usize);
    }
    bounds.push(p.len());
    let spans: Vec<_> = bounds.windows(2).map(|w| w[0]..w[1]).collect();
    let reg = ModuleRegistry::from_spans(&spans)?;
    let ts = TaskGradientSet::new(GradientVector::new("primary", p.clone()), vec![GradientVector::new("aux", g.clone())], 0)?;

    let fmt_vec = |v: &[f64]| v.iter().map(|x| num(*x)).collect::<Vec<_>>().join(", ");
    writeln!(out, "primary    ({})", fmt_vec(&p))?;
    writeln!(out, "auxiliary  ({})", fmt_vec(&g))?;
    let whole = cos_sim(&p, &g)?;
    writeln!(
        out,
        "model-level    dot {:>8}  cosine {:>8}  {}",
        num(whole.dot),
        num(whole.cosine),
        if detect_conflict(&p, &g)? { "conflict" } else { "no conflict" }
    )?;
    for m in reg.modules() {
        let name = match (reg.len(), m.module_id) {
            (2, 0) => "encoder".to_string(),
            (2, 1) => "decoder".to_string(),
            (_, i) => format!("module {i}"),
        };
        let s = cos_sim(&p[m.span()], &g[m.span()])?;
        let verdict = if detect_conflict(&p[m.span()], &g[m.span()])? { "conflict" } else { "no conflict" };
        writeln!(
            out,
            "{:<14} dot {:>8}  cosine {:>8}  {verdict}  [{}, {})",
            name,
            num(s.dot),
            num(s.cosine),
            m.span_start,
            m.span_end
        )?;
    }
    let pc = combine(StrategyKind::PcGradModel, &ts, &reg)?;
    let mg = combine(StrategyKind::Mgcm, &ts, &reg)?;
    writeln!(out, "pcgrad conflicts {}  total ({})", pc.conflicts(), fmt_vec(&pc.total.values))?;
    writeln!(out, "mgcm conflicts   {}  total ({})", mg.conflicts(), fmt_vec(&mg.total.values))?;
    let masked = detect_masking(&ts, &reg)?;
    let verdict = match masked.first() {
        Some(r) => format!(
            "masked conflict (modules {})",
            r.conflicting_module_ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(", ")
        ),
        None if whole.dot < 0.0 => "model-level conflict".into(),
        None => "no conflict".into(),
    };
    writeln!(out, "verdict: {verdict}")?;
    Ok(())
}

fn cmd_memory(a: &MemoryArgs, out: &mut dyn Write) -> Result<()> {
    let counts = parse_list("params", &a.params)?;
    writeln!(out, "{:>14}  {:>12}  {:>12}  {:>12}  {:>9}", "params", "pcgrad_gb", "mgcm_gb", "discard_gb", "saving_%")?;
    for c in counts {
        if !(c.is_finite() && c >= 1.0) {
            return Err(Error::Invalid(format!("--params: {c} is not a positive parameter count")));
        }
        let n = c.round() as u64;
        let pc = estimate_extra_memory(StrategyKind::PcGradModel, n, a.bytes)?;
        let mg = estimate_extra_memory(StrategyKind::Mgcm, n, a.bytes)?;
        let di = estimate_extra_memory(StrategyKind::Discard, n, a.bytes)?;
        writeln!(
            out,
            "{:>14}  {:>12.2}  {:>12.2}  {:>12.2}  {:>9.2}",
            n,
            pc.extra_gb(),
            mg.extra_gb(),
            di.extra_gb(),
            mg.saving_percent()
        )?;
    }
    Ok(())
}

fn read_columns(path: &Path, a: &str, b: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Invalid(format!("column `{name}` not found in {}", path.display())))
    };
    let (ia, ib) = (col(a)?, col(b)?);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let get = |i: usize| {
            rec.get(i)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::Invalid(format!("row {}: column {} is not a number", line + 1, i + 1)))
        };
        xs.push(get(ia)?);
        ys.push(get(ib)?);
    }
    Ok((xs, ys))
}

fn cmd_sigtest(cli: &Cli, a: &SigtestArgs, out: &mut dyn Write) -> Result<()> {
    let (xs, ys) = read_columns(&a.csv, &a.a, &a.b)?;
    let p = paired_permutation_test(&xs, &ys, a.resamples, cli.seed.unwrap_or(0))?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    writeln!(out, "n          {}", xs.len())?;
    writeln!(out, "mean {:<5} {}", a.a, mean(&xs))?;
    writeln!(out, "mean {:<5} {}", a.b, mean(&ys))?;
    writeln!(out, "p-value    {p}")?;
    Ok(())
}

fn cmd_report(a: &ReportArgs, out: &mut dyn Write) -> Result<()> {
    if let Some(dir) = &a.study {
        let report = study_report(&load_study(dir)?)?;
        write!(out, "{}", report.to_text())?;
        return Ok(());
    }
    if a.events.is_empty() {
        return Err(Error::Invalid("report needs --events or --study".into()));
    }
    let keys = parse_group_keys(&a.group_by)?;
    let mut rows = Vec::new();
    for p in &a.events {
        rows.extend(read_event_log(std::fs::File::open(p)?)?);
    }
    write!(out, "{}", report_from_rows(&rows, &keys, a.taxonomy_only)?.to_csv())?;
    Ok(())
}
