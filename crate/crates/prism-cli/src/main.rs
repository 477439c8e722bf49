//! Command-line harness for the pipeline: dataset generation, the
//! non-i.i.d. audit, domain mining, pack evaluation, strategy
//! comparison, and hyper-parameter sweeps.
//!
//! Exit codes: 0 success (or an audit that found the data i.i.d.),
//! 10 non-i.i.d. audit verdict, 2 usage or input problems, 3 numeric
//! failures.

mod output;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use prism::baselines;
use prism::config::{load_run_config, RunConfig, SweepParameter};
use prism::dataset::{self, Dataset};
use prism::nid;
use prism::oup;
use prism::tde::{self, LossTrace, TdeConfig};

use output::{bar_svg, csv_line, polyline_svg, write_atomic, Series};

#[derive(Parser)]
#[command(
    name = "prism",
    version,
    about = "Task-aware domain mining for windowed time series"
)]
struct Cli {
    /// JSON run configuration; flags override individual fields.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; overrides every stage seed from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory the command writes its outputs into.
    #[arg(long, global = true, value_name = "DIR", default_value = "prism-out")]
    out_dir: PathBuf,
    /// Force SVG plot emission on.
    #[arg(long, global = true, overrides_with = "no_plot")]
    plot: bool,
    /// Skip SVG plot emission.
    #[arg(long, global = true)]
    no_plot: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    Gen(GenArgs),
    /// Audit a dataset for distribution inconsistency.
    Nid(NidArgs),
    /// Mine task-aware domains and write a deployable model pack.
    Mine(MineArgs),
    /// Score a saved pack on a dataset split.
    Eval(EvalArgs),
    /// Compare partitioning strategies across seeds.
    Compare(CompareArgs),
    /// Sweep one mining knob across a value grid.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output file; defaults to <out-dir>/dataset.jsonl.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct NidArgs {
    dataset: PathBuf,
    /// Reuse the encoder of a saved pack instead of training one.
    #[arg(long, value_name = "PATH")]
    pack: Option<PathBuf>,
    /// Number of exchange rounds (the dataset is cut into 2k clips).
    #[arg(long)]
    k_clips: Option<usize>,
    /// Verdict threshold on the averaged inconsistence.
    #[arg(long)]
    nid_threshold: Option<f64>,
}

#[derive(Args)]
struct MineArgs {
    dataset: PathBuf,
    /// Mine domains even when the audit calls the data i.i.d.
    #[arg(long)]
    force_tde: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    n_domains: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    k_clips: Option<usize>,
    #[arg(long)]
    nid_threshold: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    pack: PathBuf,
    dataset: PathBuf,
    /// Part of the dataset to score: train, val, test, or all.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct CompareArgs {
    dataset: PathBuf,
    /// Metadata key the semantic baseline routes by.
    #[arg(long)]
    meta_key: Option<String>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    n_domains: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
}

#[derive(Args)]
struct SweepArgs {
    dataset: PathBuf,
    /// Knob to sweep: alpha, n_domains, or margin.
    #[arg(long)]
    parameter: Option<String>,
    /// Comma-separated grid values.
    #[arg(long, value_delimiter = ',')]
    values: Vec<f64>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {:#}", e);
            std::process::exit(exit_code(&e));
        }
    }
}

fn exit_code(e: &anyhow::Error) -> i32 {
    match e.downcast_ref::<prism::Error>() {
        Some(prism::Error::Numeric(_)) => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> anyhow::Result<i32> {
    let mut config = match &cli.config {
        Some(path) => load_run_config(path)
            .with_context(|| format!("reading config {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        reseed(&mut config, seed);
    }
    if cli.no_plot {
        config.plot = false;
    } else if cli.plot {
        config.plot = true;
    }
    std::fs::create_dir_all(&cli.out_dir)
        .with_context(|| format!("creating {}", cli.out_dir.display()))?;
    match &cli.command {
        Command::Gen(args) => cmd_gen(config, &cli.out_dir, args),
        Command::Nid(args) => cmd_nid(config, &cli.out_dir, args),
        Command::Mine(args) => cmd_mine(config, &cli.out_dir, args),
        Command::Eval(args) => cmd_eval(config, &cli.out_dir, args),
        Command::Compare(args) => cmd_compare(config, &cli.out_dir, args),
        Command::Sweep(args) => cmd_sweep(config, &cli.out_dir, args),
    }
}

/// Points every stage seed at one master value.
fn reseed(config: &mut RunConfig, seed: u64) {
    config.seed = seed;
    config.tde.seed = seed;
    config.nid.seed = seed;
    config.split.seed = seed;
}

fn write_resolved_config(config: &RunConfig, out_dir: &Path, command: &str) -> anyhow::Result<()> {
    let path = out_dir.join(format!("{}-config.json", command));
    write_atomic(&path, config.to_json_pretty().as_bytes())
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load_dataset(path: &Path) -> anyhow::Result<Dataset> {
    let ds = dataset::load_jsonl(path)
        .with_context(|| format!("reading dataset {}", path.display()))?;
    Ok(ds)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_gen(config: RunConfig, out_dir: &Path, args: &GenArgs) -> anyhow::Result<i32> {
    write_resolved_config(&config, out_dir, "gen")?;
    let ds = dataset::generate_synthetic(
        &config.synth.name,
        &config.synth.domains,
        config.synth.window_len,
        config.synth.samples_per_class,
        config.seed,
    )?;
    let path = args.out.clone().unwrap_or_else(|| out_dir.join("dataset.jsonl"));
    write_atomic(&path, dataset::to_jsonl(&ds)?.as_bytes())
        .with_context(|| format!("writing {}", path.display()))?;
    println!(
        "wrote {}: {} samples, {} domains, {} classes, window {}x{}",
        path.display(),
        ds.len(),
        config.synth.domains.len(),
        ds.num_classes,
        ds.window_len,
        ds.channels
    );
    Ok(0)
}

fn audit(config: &RunConfig, ds: &Dataset, encoder: &prism::numerics::FeedforwardNet)
    -> anyhow::Result<nid::NidReport> {
    let schedule = nid::build_schedule(ds, config.nid.k, config.nid.seed)?;
    Ok(nid::nid(encoder, ds, &schedule, &config.nid)?)
}

fn cmd_nid(mut config: RunConfig, out_dir: &Path, args: &NidArgs) -> anyhow::Result<i32> {
    if let Some(k) = args.k_clips {
        config.nid.k = k;
    }
    if let Some(t) = args.nid_threshold {
        config.nid.threshold = t;
    }
    write_resolved_config(&config, out_dir, "nid")?;
    let ds = load_dataset(&args.dataset)?;
    let encoder = match &args.pack {
        Some(path) => {
            oup::load_pack(path)
                .with_context(|| format!("reading pack {}", path.display()))?
                .encoder
        }
        None => {
            let (train, val, _) = dataset::split(&ds, &config.split)?;
            tde::train_initial(&train, &val, &config.tde)?.encoder
        }
    };
    let report = audit(&config, &ds, &encoder)?;
    write_json(&out_dir.join("nid-report.json"), &report)?;
    println!(
        "NID = {:.4} over {} rounds (threshold {}): {}",
        report.nid,
        report.ni_values.len(),
        report.threshold,
        if report.is_non_iid { "non-i.i.d." } else { "looks i.i.d." }
    );
    Ok(if report.is_non_iid { 10 } else { 0 })
}

fn trace_csv(trace: &LossTrace) -> String {
    let mut csv = csv_line(&[
        "epoch",
        "post_e_ltde",
        "m_step_losses",
        "l_contrastive",
        "l_task",
        "l_tde",
        "val_macro_f1",
        "skipped_passes",
        "ari_vs_meta",
    ]);
    for e in &trace.epochs {
        let losses =
            e.m_step_losses.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(";");
        let ari = e.ari_vs_meta.map(|a| a.to_string()).unwrap_or_default();
        csv.push_str(&csv_line(&[
            e.epoch.to_string(),
            e.post_e_ltde.to_string(),
            losses,
            e.l_contrastive.to_string(),
            e.l_task.to_string(),
            e.l_tde.to_string(),
            e.val_macro_f1.to_string(),
            e.skipped_passes.len().to_string(),
            ari,
        ]));
    }
    csv
}

fn cmd_mine(mut config: RunConfig, out_dir: &Path, args: &MineArgs) -> anyhow::Result<i32> {
    if let Some(v) = args.epochs {
        config.tde.epochs = v;
    }
    if let Some(v) = args.alpha {
        config.tde.alpha = v;
    }
    if let Some(v) = args.n_domains {
        config.tde.n_domains = v;
    }
    if let Some(v) = args.margin {
        config.tde.margin = v;
    }
    if let Some(v) = args.k_clips {
        config.nid.k = v;
    }
    if let Some(v) = args.nid_threshold {
        config.nid.threshold = v;
    }
    write_resolved_config(&config, out_dir, "mine")?;
    let ds = load_dataset(&args.dataset)?;
    let (train, val, _) = dataset::split(&ds, &config.split)?;

    let initial = tde::train_initial(&train, &val, &config.tde)?;
    let report = audit(&config, &ds, &initial.encoder)?;
    write_json(&out_dir.join("nid-report.json"), &report)?;
    let mine_domains = report.is_non_iid || args.force_tde;
    let effective = if mine_domains {
        config.tde.clone()
    } else {
        println!(
            "audit calls this dataset i.i.d. (NID {:.4} <= {}); training a single shared model \
             (--force-tde mines domains anyway)",
            report.nid, config.nid.threshold
        );
        TdeConfig { n_domains: 1, alpha: 0.0, ..config.tde.clone() }
    };

    let (pack, partition, trace) = tde::mine(&train, &val, &effective)?;
    oup::save_pack(&out_dir.join("model-pack.json"), &pack)?;
    write_json(&out_dir.join("partition.json"), &partition)?;
    write_atomic(&out_dir.join("trace.csv"), trace_csv(&trace).as_bytes())?;
    if config.plot {
        let post_e = Series {
            label: "after E-step".to_string(),
            points: trace
                .epochs
                .iter()
                .map(|e| (e.epoch as f64, e.post_e_ltde))
                .collect(),
        };
        let post_m = Series {
            label: "after M-step".to_string(),
            points: trace.epochs.iter().map(|e| (e.epoch as f64, e.l_tde)).collect(),
        };
        let svg = polyline_svg("joint objective", "epoch", "loss", &[post_e, post_m]);
        write_atomic(&out_dir.join("loss.svg"), svg.as_bytes())?;
    }
    match pack.provenance.best_epoch {
        Some(best) => {
            let val_f1 = trace.epochs.get(best).map(|e| e.val_macro_f1).unwrap_or(f64::NAN);
            print!(
                "mined {} domain(s) in {} epochs; kept epoch {} with val macro-F1 {:.4}",
                pack.heads.len(),
                trace.epochs.len(),
                best,
                val_f1
            );
        }
        None => print!(
            "mined {} domain(s) in {} epochs; kept the unspecialized starting model",
            pack.heads.len(),
            trace.epochs.len()
        ),
    }
    match partition.ari_vs_meta {
        Some(ari) => println!("; ARI vs meta[\"domain\"] = {:.4}", ari),
        None => println!(),
    }
    Ok(0)
}

fn cmd_eval(config: RunConfig, out_dir: &Path, args: &EvalArgs) -> anyhow::Result<i32> {
    write_resolved_config(&config, out_dir, "eval")?;
    let pack = oup::load_pack(&args.pack)
        .with_context(|| format!("reading pack {}", args.pack.display()))?;
    let ds = load_dataset(&args.dataset)?;
    let subset = match args.split.as_str() {
        "train" => dataset::split(&ds, &config.split)?.0,
        "val" => dataset::split(&ds, &config.split)?.1,
        "test" => dataset::split(&ds, &config.split)?.2,
        "all" => ds,
        other => {
            return Err(prism::Error::Input(format!(
                "unknown split {:?}; expected train, val, test, or all",
                other
            ))
            .into())
        }
    };
    let records = oup::predict(&pack, &subset)?;
    let report = oup::evaluate(&pack, &subset)?;
    write_json(&out_dir.join("eval-report.json"), &report)?;
    let mut csv = csv_line(&["id", "true_label", "predicted_label", "domain", "correct"]);
    for r in &records {
        csv.push_str(&csv_line(&[
            r.id.clone(),
            r.true_label.to_string(),
            r.predicted_label.to_string(),
            r.domain.to_string(),
            r.correct.to_string(),
        ]));
    }
    write_atomic(&out_dir.join("predictions.csv"), csv.as_bytes())?;
    println!(
        "{} split of {}: accuracy {:.4}, macro-F1 {:.4} over {} samples",
        args.split, report.dataset, report.accuracy, report.macro_f1, report.n_samples
    );
    for flag in &report.flags {
        println!("note: {}", flag);
    }
    Ok(0)
}

/// Runs `count` jobs across up to `PRISM_THREADS` workers (defaulting to
/// the machine's parallelism) and returns results in job order.
fn parallel_jobs<T: Send>(count: usize, job: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let threads = thread_cap().min(count).max(1);
    if threads <= 1 {
        return (0..count).map(job).collect();
    }
    let next = AtomicUsize::new(0);
    let done: Mutex<Vec<(usize, T)>> = Mutex::new(Vec::with_capacity(count));
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= count {
                    break;
                }
                let out = job(i);
                done.lock().unwrap().push((i, out));
            });
        }
    });
    let mut rows = done.into_inner().unwrap();
    rows.sort_by_key(|(i, _)| *i);
    rows.into_iter().map(|(_, t)| t).collect()
}

fn thread_cap() -> usize {
    match std::env::var("PRISM_THREADS") {
        Ok(v) => v.trim().parse().ok().filter(|&n| n >= 1).unwrap_or(1),
        Err(_) => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    }
}

const METHODS: [&str; 5] = ["p0", "sem", "cd", "cf", "prism"];

struct CompareRow {
    method: &'static str,
    seed: u64,
    accuracy: f64,
    macro_f1: f64,
}

fn compare_one_seed(
    base: &RunConfig,
    ds: &Dataset,
    seed: u64,
) -> Result<Vec<CompareRow>, prism::Error> {
    let mut cfg = base.clone();
    reseed(&mut cfg, seed);
    let (train, val, test) = dataset::split(ds, &cfg.split)?;
    let n = cfg.tde.n_domains;
    let reports = [
        baselines::baseline_p0(&train, &val, &test, &cfg.tde)?,
        baselines::baseline_semantic(&train, &val, &test, &cfg.meta_key, &cfg.tde)?,
        baselines::baseline_cluster_data(&train, &val, &test, n, &cfg.tde)?,
        baselines::baseline_cluster_feature(&train, &val, &test, n, &cfg.tde)?,
        {
            let (pack, _, _) = tde::mine(&train, &val, &cfg.tde)?;
            oup::evaluate(&pack, &test)?
        },
    ];
    Ok(METHODS
        .iter()
        .zip(reports)
        .map(|(method, r)| CompareRow {
            method,
            seed,
            accuracy: r.accuracy,
            macro_f1: r.macro_f1,
        })
        .collect())
}

fn cmd_compare(mut config: RunConfig, out_dir: &Path, args: &CompareArgs) -> anyhow::Result<i32> {
    if let Some(k) = &args.meta_key {
        config.meta_key = k.clone();
    }
    if !args.seeds.is_empty() {
        config.compare_seeds = args.seeds.clone();
    }
    if let Some(v) = args.epochs {
        config.tde.epochs = v;
    }
    if let Some(v) = args.alpha {
        config.tde.alpha = v;
    }
    if let Some(v) = args.n_domains {
        config.tde.n_domains = v;
    }
    if let Some(v) = args.margin {
        config.tde.margin = v;
    }
    write_resolved_config(&config, out_dir, "compare")?;
    let ds = load_dataset(&args.dataset)?;
    let seeds = config.compare_seeds.clone();
    let results = parallel_jobs(seeds.len(), |i| compare_one_seed(&config, &ds, seeds[i]));
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    rows.sort_by_key(|r| {
        (METHODS.iter().position(|m| *m == r.method).unwrap_or(METHODS.len()), r.seed)
    });

    let mut csv = csv_line(&["method", "seed", "accuracy", "macro_f1"]);
    for r in &rows {
        csv.push_str(&csv_line(&[
            r.method.to_string(),
            r.seed.to_string(),
            r.accuracy.to_string(),
            r.macro_f1.to_string(),
        ]));
    }
    write_atomic(&out_dir.join("compare.csv"), csv.as_bytes())?;

    let mut bars = Vec::new();
    println!("mean over {} seed(s):", seeds.len());
    for method in METHODS {
        let f1s: Vec<f64> =
            rows.iter().filter(|r| r.method == method).map(|r| r.macro_f1).collect();
        let mean = f1s.iter().sum::<f64>() / f1s.len().max(1) as f64;
        println!("  {:<6} macro-F1 {:.4}", method, mean);
        bars.push((method.to_string(), mean));
    }
    if config.plot {
        let svg = bar_svg("strategy comparison", "mean macro-F1", &bars);
        write_atomic(&out_dir.join("compare.svg"), svg.as_bytes())?;
    }
    Ok(0)
}

fn parse_sweep_parameter(text: &str) -> Result<SweepParameter, prism::Error> {
    match text {
        "alpha" => Ok(SweepParameter::Alpha),
        "n_domains" | "n-domains" => Ok(SweepParameter::NDomains),
        "margin" => Ok(SweepParameter::Margin),
        other => Err(prism::Error::Input(format!(
            "unknown sweep parameter {:?}; expected alpha, n_domains, or margin",
            other
        ))),
    }
}

fn cmd_sweep(mut config: RunConfig, out_dir: &Path, args: &SweepArgs) -> anyhow::Result<i32> {
    if let Some(p) = &args.parameter {
        config.sweep.parameter = parse_sweep_parameter(p)?;
    }
    if !args.values.is_empty() {
        config.sweep.values = args.values.clone();
    }
    if !args.seeds.is_empty() {
        config.compare_seeds = args.seeds.clone();
    }
    if let Some(v) = args.epochs {
        config.tde.epochs = v;
    }
    config.validate()?;
    write_resolved_config(&config, out_dir, "sweep")?;
    let ds = load_dataset(&args.dataset)?;

    let parameter = config.sweep.parameter;
    let name = match parameter {
        SweepParameter::Alpha => "alpha",
        SweepParameter::NDomains => "n_domains",
        SweepParameter::Margin => "margin",
    };
    let mut jobs = Vec::new();
    for &value in &config.sweep.values {
        for &seed in &config.compare_seeds {
            jobs.push((value, seed));
        }
    }
    let results = parallel_jobs(jobs.len(), |i| -> Result<(f64, u64, f64, f64), prism::Error> {
        let (value, seed) = jobs[i];
        let mut cfg = config.clone();
        reseed(&mut cfg, seed);
        match parameter {
            SweepParameter::Alpha => cfg.tde.alpha = value,
            SweepParameter::NDomains => cfg.tde.n_domains = value as usize,
            SweepParameter::Margin => cfg.tde.margin = value,
        }
        let (train, val, test) = dataset::split(&ds, &cfg.split)?;
        let (pack, _, _) = tde::mine(&train, &val, &cfg.tde)?;
        let report = oup::evaluate(&pack, &test)?;
        Ok((value, seed, report.accuracy, report.macro_f1))
    });
    let mut rows = Vec::new();
    for r in results {
        rows.push(r?);
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut csv = csv_line(&["parameter", "value", "seed", "accuracy", "macro_f1"]);
    for (value, seed, accuracy, macro_f1) in &rows {
        csv.push_str(&csv_line(&[
            name.to_string(),
            value.to_string(),
            seed.to_string(),
            accuracy.to_string(),
            macro_f1.to_string(),
        ]));
    }
    write_atomic(&out_dir.join("sweep.csv"), csv.as_bytes())?;

    let mut acc_points = Vec::new();
    let mut f1_points = Vec::new();
    println!("{} sweep over {} seed(s):", name, config.compare_seeds.len());
    for &value in &config.sweep.values {
        let of_value: Vec<&(f64, u64, f64, f64)> =
            rows.iter().filter(|r| r.0 == value).collect();
        let mean_acc =
            of_value.iter().map(|r| r.2).sum::<f64>() / of_value.len().max(1) as f64;
        let mean_f1 =
            of_value.iter().map(|r| r.3).sum::<f64>() / of_value.len().max(1) as f64;
        println!("  {} = {:<8} accuracy {:.4}, macro-F1 {:.4}", name, value, mean_acc, mean_f1);
        acc_points.push((value, mean_acc));
        f1_points.push((value, mean_f1));
    }
    if config.plot {
        let svg = polyline_svg(
            &format!("sweep over {}", name),
            name,
            "mean score",
            &[
                Series { label: "accuracy".to_string(), points: acc_points },
                Series { label: "macro-F1".to_string(), points: f1_points },
            ],
        );
        write_atomic(&out_dir.join("sweep.svg"), svg.as_bytes())?;
    }
    Ok(0)
}
