//! The `hardbench` command line.
//!
//! Exit codes: 0 success, 1 bad arguments or configuration, 2 runtime failure.
//! The output directory is taken from `--out`, then `HARDBENCH_OUT`, then the
//! config file.

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use serde::Serialize;

use super::config::{geometric_grid, ExperimentConfig};
use super::output::OutputDir;
use super::report::{run_bias_report, run_crossover_report};
use super::sim::{read_rows_csv, run_simulation, teacher_for_seed, write_rows_csv, SimRow};
use crate::bench::{
    build_random_bench, hard_bench_sweep, run_bench_seed, write_results_csv, BenchResult, BenchSpec, Metric,
};
use crate::dataset::{
    generate_teacher_dataset, ingest_csv, take_indices, IngestOptions, LabeledDataset, SubsetSelection,
};
use crate::error::Error;
use crate::mmd::{bound_report, mmd_ordering_experiment, BoundReport, MmdOptions, OrderingConfig};
use crate::nnet::{score_dataset, train, write_scores_csv, MlpModel};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::theory::{fit_power_law, hard_curve_for_pool, theory_curve, PowerLawFit, TheoryCurve};

pub const OUT_ENV: &str = "HARDBENCH_OUT";

#[derive(Debug, Parser)]
#[command(
    name = "hardbench",
    version,
    about = "Hard-sample selection experiments for low-resource learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Teacher-student simulation over α, seeds and selection settings.
    Simulate,
    /// Saddle-point generalization curve.
    Theory,
    /// MMD between biased subsets and the full data, per angle.
    Mmd,
    /// Train a predictor and write per-sample difficulty scores.
    Score,
    /// Hard and random benchmark selections without evaluation.
    Select,
    /// Full benchmark: select, train students, evaluate.
    Bench,
    /// Crossover and bias reports from an existing simulation CSV.
    Report {
        /// Simulation CSV; defaults to `<out>/simulation.csv`.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// JSON experiment config; defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    /// Use seeds 0..n.
    #[arg(long, global = true)]
    seeds: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    d: Option<usize>,
    /// Pool size N.
    #[arg(long = "pool", global = true)]
    n: Option<usize>,
    /// Comma-separated α grid.
    #[arg(long, global = true, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    /// Geometric α grid, together with --alpha-max and --points.
    #[arg(long, global = true)]
    alpha_min: Option<f64>,
    #[arg(long, global = true)]
    alpha_max: Option<f64>,
    #[arg(long, global = true)]
    points: Option<usize>,
    /// Comma-separated bias angles in degrees.
    #[arg(long, global = true, value_delimiter = ',')]
    thetas: Option<Vec<f64>>,
    #[arg(long, global = true)]
    keep_fraction: Option<f64>,
    #[arg(long, global = true)]
    pool_alpha: Option<f64>,
    /// MMD trials per angle.
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Comma-separated examples-per-label values for the benchmark.
    #[arg(long, global = true, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    /// CSV dataset for score/select/bench instead of the synthetic blobs.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

fn resolve_config(common: &Common, env_out: Option<OsString>) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = env_out.filter(|v| !v.is_empty()) {
        cfg.output_dir = out.into();
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(n) = common.seeds {
        cfg.seeds = (0..n).collect();
    }
    if let Some(s) = common.seed_override {
        cfg.seeds = vec![s];
    }
    if common.workers.is_some() {
        cfg.workers = common.workers;
    }
    if let Some(d) = common.d {
        cfg.d = d;
        cfg.mmd.d = d;
    }
    if common.n.is_some() {
        cfg.n = common.n;
    }
    if let Some(a) = &common.alphas {
        cfg.alphas = a.clone();
    }
    match (common.alpha_min, common.alpha_max, common.points) {
        (Some(lo), Some(hi), Some(n)) => {
            cfg.alphas = geometric_grid(lo, hi, n)?;
            cfg.theory.alpha_min = None;
            cfg.theory.alpha_max = None;
            cfg.theory.points = None;
        }
        (None, None, None) => {}
        _ => {
            return Err(config_error(
                "--alpha-min, --alpha-max and --points must be given together",
            ))
        }
    }
    if let Some(t) = &common.thetas {
        cfg.thetas_deg = t.clone();
        cfg.mmd.thetas_deg = t.clone();
    }
    if let Some(f) = common.keep_fraction {
        cfg.theory.keep_fraction = f;
    }
    if common.pool_alpha.is_some() {
        cfg.theory.pool_alpha = common.pool_alpha;
    }
    if let Some(t) = common.trials {
        cfg.mmd.trials = t;
    }
    if let Some(k) = &common.ks {
        cfg.bench.ks = k.clone();
    }
    if common.data.is_some() {
        cfg.bench.input_csv = common.data.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn cli_entry<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let cfg = match resolve_config(&cli.common, std::env::var_os(OUT_ENV)) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return 1;
        }
    };
    match run(&cli.command, &cfg) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            let is_config = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Config(_))));
            if is_config {
                1
            } else {
                2
            }
        }
    }
}

fn open_out(cfg: &ExperimentConfig) -> anyhow::Result<OutputDir> {
    OutputDir::create(&cfg.output_dir).map_err(|e| {
        config_error(format!(
            "output directory {} is not writable: {e}",
            cfg.output_dir.display()
        ))
    })
}

fn run(command: &Command, cfg: &ExperimentConfig) -> anyhow::Result<()> {
    match command {
        Command::Simulate => simulate(cfg),
        Command::Theory => theory(cfg),
        Command::Mmd => mmd(cfg),
        Command::Score => score(cfg),
        Command::Select => select(cfg),
        Command::Bench => bench(cfg),
        Command::Report { input } => report(cfg, input.as_deref()),
    }
}

fn write_reports(out: &mut OutputDir, rows: &[SimRow]) -> anyhow::Result<()> {
    use super::config::Setting;
    let has = |s: Setting| rows.iter().any(|r| r.setting == s);
    if has(Setting::Random) && has(Setting::Hard) {
        let rep = run_crossover_report(rows)?;
        println!("crossover: {}", rep.message);
        out.write_json("crossover.json", &rep)?;
    }
    if has(Setting::Biased) {
        out.write_json("bias_report.json", &run_bias_report(rows)?)?;
    }
    Ok(())
}

fn simulate(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let mut out = open_out(cfg)?;
    let res = run_simulation(cfg).context("simulation")?;
    out.write_csv("simulation.csv", |w| write_rows_csv(&res.rows, w))?;
    out.write_json("simulation.json", &res)?;
    write_reports(&mut out, &res.rows)?;
    let n_fail = res.failures.len();
    out.finish("simulate", cfg, res.failures)?;
    println!(
        "{} rows, {n_fail} failed cells -> {}",
        res.rows.len(),
        cfg.output_dir.display()
    );
    Ok(())
}

fn report(cfg: &ExperimentConfig, input: Option<&std::path::Path>) -> anyhow::Result<()> {
    let path = input.map_or_else(|| cfg.output_dir.join("simulation.csv"), PathBuf::from);
    let file = std::fs::File::open(&path).with_context(|| format!("cannot open {}", path.display()))?;
    let rows = read_rows_csv(file).with_context(|| format!("reading {}", path.display()))?;
    let mut out = open_out(cfg)?;
    write_reports(&mut out, &rows)?;
    out.finish("report", cfg, Vec::new())?;
    Ok(())
}

#[derive(Serialize)]
struct TheoryOutput {
    curve: TheoryCurve,
    /// Power law fitted to the points with α ≥ 1, when there are three.
    fit: Option<PowerLawFit>,
}

fn theory(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let mut out = open_out(cfg)?;
    let alphas = cfg.theory_alphas()?;
    let curve = match cfg.theory.pool_alpha {
        Some(pool) => hard_curve_for_pool(&alphas, pool, cfg.theory.options)?,
        None => theory_curve(&alphas, cfg.theory.keep_fraction, cfg.theory.options)?,
    };
    let tail: Vec<(f64, f64)> = curve.pairs().into_iter().filter(|(a, _)| *a >= 1.0).collect();
    let fit = if tail.len() >= 3 {
        Some(fit_power_law(&tail)?)
    } else {
        None
    };
    out.write_csv("theory.csv", |w| curve.write_csv(w))?;
    out.write_json("theory.json", &TheoryOutput { curve, fit })?;
    out.finish("theory", cfg, Vec::new())?;
    Ok(())
}

#[derive(Serialize)]
struct BoundRow {
    theta_deg: f64,
    report: BoundReport,
}

fn mmd(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let mut out = open_out(cfg)?;
    let m = &cfg.mmd;
    let seed = cfg.seeds[0];
    let teacher = teacher_for_seed(m.d, seed)?;
    let ds = generate_teacher_dataset(m.d, m.n, &teacher, seed)?;
    let ordering = OrderingConfig {
        kernel: m.kernel,
        view: m.view,
        base_seed: seed,
        balanced: m.balanced,
        options: MmdOptions {
            max_rows: m.max_rows,
            seed,
        },
    };
    let table = mmd_ordering_experiment(&ds, &teacher, &m.thetas_deg, m.p, m.trials, &ordering)?;
    out.write_csv("mmd_trials.csv", |w| table.write_trials_csv(w))?;
    out.write_csv("mmd_summary.csv", |w| table.write_summary_csv(w))?;
    out.write_json("mmd.json", &table)?;
    if let Some(b) = &m.bound {
        let rows = table
            .summary
            .iter()
            .map(|s| {
                Ok(BoundRow {
                    theta_deg: s.theta_deg,
                    report: bound_report(
                        s.mean.max(0.0).sqrt(),
                        b.margin,
                        b.c,
                        b.h_size,
                        b.delta,
                        b.eps_alpha,
                        b.eps_h,
                    )?,
                })
            })
            .collect::<crate::Result<Vec<_>>>()?;
        out.write_json("bound.json", &rows)?;
    }
    out.finish("mmd", cfg, Vec::new())?;
    Ok(())
}

/// Train and test split for one benchmark seed: the synthetic blob task, or
/// a seeded random split of the ingested CSV.
fn bench_data(cfg: &ExperimentConfig, seed: u64) -> anyhow::Result<(LabeledDataset, LabeledDataset)> {
    let b = &cfg.bench;
    match &b.input_csv {
        None => {
            let task = crate::bench::blob_with_outliers(&b.blob, seed)?;
            Ok((task.train, task.test))
        }
        Some(path) => {
            let ds = ingest_csv(
                path,
                &b.label_column,
                IngestOptions {
                    standardize: b.standardize,
                },
            )?;
            let mut order: Vec<usize> = (0..ds.len()).collect();
            order.shuffle(&mut stream_rng(derive_seed(seed, &[0x5911]), Stream::Sampling));
            let n_test = ((b.test_fraction * ds.len() as f64).round() as usize).clamp(1, ds.len().saturating_sub(1));
            let (test, train) = order.split_at(n_test);
            let (mut train, mut test) = (train.to_vec(), test.to_vec());
            train.sort_unstable();
            test.sort_unstable();
            crate::bench::check_disjoint(&train, &test)?;
            Ok((take_indices(&ds, &train)?, take_indices(&ds, &test)?))
        }
    }
}

fn score(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let mut out = open_out(cfg)?;
    let seed = cfg.seeds[0];
    let (train_ds, _) = bench_data(cfg, seed)?;
    let p = &cfg.bench.predictor;
    let init = MlpModel::init(train_ds.d(), p.d_hidden, 2, p.activation, seed)?;
    let model = if cfg.bench.at_init {
        init
    } else {
        train(&init, &train_ds, &p.train, seed)?
    };
    let scores = score_dataset(&model, &train_ds, &cfg.bench.score)?;
    out.write_csv("scores.csv", |w| write_scores_csv(&scores, w))?;
    out.write_bytes("predictor.json", model.to_json()?.as_bytes())?;
    out.finish("score", cfg, Vec::new())?;
    Ok(())
}

#[derive(Serialize)]
struct SelectionRecord {
    bench_type: &'static str,
    metric: Option<Metric>,
    k: usize,
    seed: u64,
    selection: SubsetSelection,
}

fn select(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let mut out = open_out(cfg)?;
    let b = &cfg.bench;
    let mut records = Vec::new();
    for &seed in &cfg.seeds {
        let (train_ds, _) = bench_data(cfg, seed)?;
        for &metric in &b.metrics {
            let spec = BenchSpec {
                metric,
                k: b.ks.iter().copied().max().unwrap_or(1),
                predictor: b.predictor,
                at_init: b.at_init,
                score: b.score,
            };
            for (sel, &k) in hard_bench_sweep(&train_ds, &spec, &b.ks, seed)?.into_iter().zip(&b.ks) {
                records.push(SelectionRecord {
                    bench_type: "hard",
                    metric: Some(metric),
                    k,
                    seed,
                    selection: sel,
                });
            }
        }
        for &k in &b.ks {
            records.push(SelectionRecord {
                bench_type: "random",
                metric: None,
                k,
                seed,
                selection: build_random_bench(&train_ds, k, &[seed])?.remove(0),
            });
        }
    }
    out.write_csv("selections.csv", |w| {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["bench_type", "metric", "k", "seed", "rank", "index"])?;
        for r in &records {
            for (rank, i) in r.selection.indices.iter().enumerate() {
                w.write_record([
                    r.bench_type.to_string(),
                    r.metric.map_or("none", Metric::as_str).to_string(),
                    r.k.to_string(),
                    r.seed.to_string(),
                    rank.to_string(),
                    i.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    })?;
    out.write_json("selections.json", &records)?;
    out.finish("select", cfg, Vec::new())?;
    Ok(())
}

fn bench(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let mut out = open_out(cfg)?;
    let b = &cfg.bench;
    let mut results: Vec<BenchResult> = Vec::new();
    for &seed in &cfg.seeds {
        let (train_ds, test_ds) = bench_data(cfg, seed)?;
        results.extend(
            run_bench_seed(
                &train_ds,
                &test_ds,
                &b.metrics,
                &b.ks,
                &b.predictor,
                &b.student,
                &b.student_seeds,
                b.at_init,
                seed,
            )
            .with_context(|| format!("bench seed {seed}"))?,
        );
    }
    out.write_csv("bench_results.csv", |w| write_results_csv(&results, w))?;
    out.write_json("bench_results.json", &results)?;
    out.finish("bench", cfg, Vec::new())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("hardbench").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flag_beats_env_beats_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("c.json");
        std::fs::write(&cfg_path, r#"{"output_dir": "from-config"}"#).unwrap();
        let c = cfg_path.to_str().unwrap();

        let cli = parse(&["simulate", "--config", c]);
        assert_eq!(
            resolve_config(&cli.common, None).unwrap().output_dir,
            PathBuf::from("from-config")
        );
        let env = Some(OsString::from("from-env"));
        assert_eq!(
            resolve_config(&cli.common, env.clone()).unwrap().output_dir,
            PathBuf::from("from-env")
        );
        let cli = parse(&["simulate", "--config", c, "--out", "from-flag"]);
        assert_eq!(
            resolve_config(&cli.common, env).unwrap().output_dir,
            PathBuf::from("from-flag")
        );
    }

    #[test]
    fn geometric_flags() {
        let cli = parse(&["theory", "--alpha-min", "0.5", "--alpha-max", "8", "--points", "5"]);
        let cfg = resolve_config(&cli.common, None).unwrap();
        for (a, b) in cfg.alphas.iter().zip([0.5, 1.0, 2.0, 4.0, 8.0]) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let cli = parse(&["theory", "--alpha-min", "0.5"]);
        assert!(resolve_config(&cli.common, None).is_err());
    }

    #[test]
    fn seed_flags() {
        let cli = parse(&["simulate", "--seeds", "3"]);
        assert_eq!(resolve_config(&cli.common, None).unwrap().seeds, vec![0, 1, 2]);
        let cli = parse(&["simulate", "--seeds", "3", "--seed-override", "9"]);
        assert_eq!(resolve_config(&cli.common, None).unwrap().seeds, vec![9]);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(cli_entry(["hardbench", "--version"]), 0);
        assert_eq!(cli_entry(["hardbench", "frobnicate"]), 1);
        assert_eq!(cli_entry(["hardbench", "simulate", "--alphas", "2,1"]), 1);
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.csv");
        let out = dir.path().join("out");
        let code = cli_entry([
            "hardbench",
            "report",
            "--input",
            missing.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 2);
    }
}
