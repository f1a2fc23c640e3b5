//! `proxforge` command-line front end.
//!
//! Every command records a [`manifest::RunManifest`]; `replay` reruns one.
//! Exit codes: 0 success, 1 internal error, 2 input or validation error.

mod manifest;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use proxforge::arch::{param_count, sample_arch, ArchConfig, SearchSpace};
use proxforge::bench::{
    capture_store, generate_synthetic, split, BenchError, BenchStore, CaptureSettings, Link,
    SyntheticSpec,
};
use proxforge::evolution::{evolve_with, EvolutionSettings, FitnessContext, Strategy};
use proxforge::metrics::{reports_to_csv, CorrelationReport};
use proxforge::proxy::{BuiltinProxy, Proxy, ProxyGraph, ProxyScore};
use proxforge::rng::child_rng;
use proxforge::search::search;
use proxforge::sim::{capture_with_mode, grad_check};
use proxforge::stats::{BatchSpec, CaptureMode, NetworkStatistics};

use manifest::{digest_input, strip_jobs, InputDigest, RunManifest};

#[derive(Debug)]
pub enum CliError {
    Input(String),
    Internal(String),
}

impl CliError {
    pub fn input(m: impl Into<String>) -> Self {
        CliError::Input(m.into())
    }

    pub fn internal(m: impl Into<String>) -> Self {
        CliError::Internal(m.into())
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Internal(_) => 1,
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        CliError::input(e.to_string())
    }
}

fn input_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::input(e.to_string())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .map_err(|e| CliError::internal(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::internal(format!("{}: {e}", path.display())))
}

#[derive(Parser, Debug)]
#[command(
    name = "proxforge",
    version,
    about = "Evolve and evaluate zero-cost proxies for vision transformers"
)]
struct Cli {
    /// Worker threads (outputs do not depend on this).
    #[arg(long, short = 'j', global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct SeedArg {
    #[arg(long, env = "PROXFORGE_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Clone)]
struct CaptureArgs {
    /// Width divisor; defaults to the space's desk scale.
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 16)]
    image_side: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long, default_value_t = 4)]
    patch_size: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
}

impl CaptureArgs {
    fn batch(&self) -> Result<BatchSpec, CliError> {
        let b = BatchSpec {
            batch_size: self.batch_size,
            image_side: self.image_side,
            channels: self.channels,
            patch_size: self.patch_size,
            num_classes: self.classes,
        };
        if !b.is_valid() {
            return Err(CliError::input(format!("invalid batch geometry: {b:?}")));
        }
        Ok(b)
    }

    fn settings(&self, space: SearchSpace, seed: u64) -> Result<CaptureSettings, CliError> {
        Ok(CaptureSettings {
            scale: self.scale.unwrap_or_else(|| space.default_scale()),
            batch: self.batch()?,
            seed,
        })
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Standard,
    Synflow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    All,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StrategyArg {
    Elitism,
    Naive,
    Random,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LinkArg {
    Identity,
    Logistic,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Capture a statistics archive for one architecture.
    GenStats {
        #[arg(long, default_value = "autoformer")]
        space: SearchSpace,
        /// Architecture JSON file; overrides sampling from --space.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "standard")]
        mode: ModeArg,
        #[command(flatten)]
        capture: CaptureArgs,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: PathBuf,
        /// Run manifest path (default: `<out>.run.json`).
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Correlate a proxy's scores with benchmark accuracies.
    Rank {
        /// Builtin proxy name or a proxy graph JSON file.
        #[arg(long)]
        proxy: String,
        #[arg(long)]
        bench: PathBuf,
        /// Directory of per-record archives named by zero-padded index.
        #[arg(long)]
        stats_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
        #[arg(long, default_value_t = 0.6)]
        val_fraction: f64,
        /// Use vanilla instead of distilled accuracies.
        #[arg(long)]
        vanilla: bool,
        #[command(flatten)]
        seed: SeedArg,
        /// CSV path; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Evolve a proxy graph against a benchmark.
    Evolve {
        #[arg(long)]
        bench: PathBuf,
        #[arg(long)]
        stats_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "elitism")]
        strategy: StrategyArg,
        #[arg(long, default_value_t = 20)]
        population: usize,
        #[arg(long, default_value_t = 200)]
        iterations: usize,
        #[arg(long, default_value_t = 0.5)]
        sample_ratio: f64,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
        #[arg(long, default_value_t = 0.5)]
        mutation_prob: f64,
        #[arg(long, default_value_t = 0.1, allow_hyphen_values = true)]
        margin: f64,
        #[arg(long, default_value_t = 32)]
        retry_cap: usize,
        #[arg(long, default_value_t = 100)]
        subset_size: usize,
        /// Comma-separated per-dataset weights.
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        #[arg(long)]
        target_jcm: Option<f64>,
        #[arg(long, default_value_t = 0.6)]
        val_fraction: f64,
        #[arg(long)]
        vanilla: bool,
        #[command(flatten)]
        seed: SeedArg,
        /// Receives best_proxy.json, trace.csv and run.json.
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Score sampled architectures with a proxy and keep the best.
    Search {
        #[arg(long)]
        proxy: String,
        #[arg(long, default_value = "autoformer")]
        space: SearchSpace,
        #[arg(long, default_value_t = 400)]
        n: usize,
        /// Inclusive parameter range `lo:hi`, e.g. `4e6:9e6`.
        #[arg(long)]
        params: Option<String>,
        #[command(flatten)]
        capture: CaptureArgs,
        #[command(flatten)]
        seed: SeedArg,
        /// Report JSON path.
        #[arg(long)]
        out: PathBuf,
        /// `index,params,score` CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// `params,score` CSV sorted by parameter count.
        #[arg(long)]
        emit_plot_data: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Validate a benchmark file and optional statistics archives.
    BenchValidate {
        #[arg(long)]
        bench: Option<PathBuf>,
        #[arg(long)]
        archive: Vec<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Generate a synthetic benchmark whose accuracies follow a planted proxy.
    SynthBench {
        #[arg(long)]
        planted: String,
        #[arg(long, value_enum, default_value = "identity")]
        link: LinkArg,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 300)]
        records: usize,
        #[arg(long, default_value = "autoformer")]
        space: SearchSpace,
        #[arg(long, value_delimiter = ',', default_value = "cifar100,flowers")]
        datasets: Vec<String>,
        #[command(flatten)]
        capture: CaptureArgs,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences.
    GradCheck {
        #[arg(long, default_value = "autoformer")]
        space: SearchSpace,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[command(flatten)]
        capture: CaptureArgs,
        #[command(flatten)]
        seed: SeedArg,
        /// Report JSON path; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Rerun the command recorded in a run manifest.
    Replay {
        manifest: PathBuf,
        /// Run even if recorded input digests no longer match.
        #[arg(long)]
        force: bool,
    },
}

/// Collects what a command did for its manifest.
struct Record {
    command: &'static str,
    argv: Vec<String>,
    settings: serde_json::Value,
    seeds: BTreeMap<String, u64>,
    inputs: Vec<InputDigest>,
    outputs: Vec<String>,
}

impl Record {
    fn new(command: &'static str, argv: Vec<String>) -> Self {
        Record {
            command,
            argv,
            settings: serde_json::Value::Null,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.push(digest_input(path)?);
        Ok(())
    }

    fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    fn finish(self, path: &Path) -> Result<(), CliError> {
        RunManifest {
            command: self.command.to_string(),
            argv: self.argv,
            settings: self.settings,
            seeds: self.seeds,
            version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: self.inputs,
            outputs: self.outputs,
        }
        .write(path)
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_proxy(spec: &str, rec: &mut Record) -> Result<Proxy, CliError> {
    if let Ok(b) = spec.parse::<BuiltinProxy>() {
        return Ok(Proxy::Builtin(b));
    }
    let path = Path::new(spec);
    if !path.is_file() {
        return Err(CliError::input(format!(
            "`{spec}` is neither a builtin proxy nor a readable file"
        )));
    }
    rec.input(path)?;
    let text = fs::read_to_string(path).map_err(|e| CliError::input(format!("{spec}: {e}")))?;
    ProxyGraph::from_json(&text)
        .map(Proxy::Graph)
        .map_err(|e| CliError::input(format!("{spec}: {e}")))
}

/// `strict` checks the config against its search-space table.
fn load_config(path: &Path, strict: bool, rec: &mut Record) -> Result<ArchConfig, CliError> {
    rec.input(path)?;
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let cfg: ArchConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    if strict {
        cfg.validate().map_err(input_err)?;
    }
    Ok(cfg)
}

fn load_store(path: &Path, rec: &mut Record) -> Result<BenchStore, CliError> {
    rec.input(path)?;
    BenchStore::load(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn store_stats(
    store: &BenchStore,
    stats_dir: Option<&Path>,
    mode: CaptureMode,
    rec: &mut Record,
) -> Result<Vec<NetworkStatistics>, CliError> {
    if let Some(dir) = stats_dir {
        rec.input(dir)?;
        return store
            .records
            .iter()
            .map(|r| {
                let p = dir.join(format!("{:05}", r.index));
                let s = NetworkStatistics::read_archive(&p)
                    .map_err(|e| CliError::input(format!("{}: {e}", p.display())))?;
                if s.capture_mode != mode {
                    return Err(CliError::input(format!(
                        "{}: captured in {:?} mode, proxy needs {mode:?}",
                        p.display(),
                        s.capture_mode
                    )));
                }
                Ok(s)
            })
            .collect();
    }
    let settings = store.capture.ok_or_else(|| {
        CliError::input("benchmark carries no capture settings; pass --stats-dir")
    })?;
    capture_store(store, &settings, mode).map_err(input_err)
}

fn parse_range(s: &str) -> Result<(u64, u64), CliError> {
    let bad = || CliError::input(format!("bad parameter range `{s}`, expected lo:hi"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    let num = |t: &str| -> Result<u64, CliError> {
        let v: f64 = t.trim().parse().map_err(|_| bad())?;
        if !(v >= 0.0 && v.is_finite()) {
            return Err(bad());
        }
        Ok(v.round() as u64)
    };
    Ok((num(a)?, num(b)?))
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen_stats(
    space: SearchSpace,
    config: Option<PathBuf>,
    mode: ModeArg,
    capture: CaptureArgs,
    seed: u64,
    out: PathBuf,
    manifest: Option<PathBuf>,
    mut rec: Record,
) -> Result<(), CliError> {
    let cfg = match &config {
        Some(p) => load_config(p, true, &mut rec)?,
        None => sample_arch(space, &mut child_rng(seed, "arch", 0)),
    };
    let mode = match mode {
        ModeArg::Standard => CaptureMode::Standard,
        ModeArg::Synflow => CaptureMode::Synflow,
    };
    let scale = capture.scale.unwrap_or_else(|| cfg.space().default_scale());
    let batch = capture.batch()?;
    let stats = capture_with_mode(&cfg, scale, batch, seed, mode).map_err(input_err)?;
    stats
        .write_archive(&out)
        .map_err(|e| CliError::internal(format!("{}: {e}", out.display())))?;
    rec.output(&out);
    rec.seeds.insert("seed".into(), seed);
    rec.settings = json!({ "config": cfg, "scale": scale, "batch": batch, "mode": mode });
    rec.finish(&manifest.unwrap_or_else(|| sibling(&out, ".run.json")))
}

#[allow(clippy::too_many_arguments)]
fn cmd_rank(
    proxy: String,
    bench: PathBuf,
    stats_dir: Option<PathBuf>,
    split_arg: SplitArg,
    val_fraction: f64,
    vanilla: bool,
    seed: u64,
    out: Option<PathBuf>,
    manifest: Option<PathBuf>,
    mut rec: Record,
) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&val_fraction) {
        return Err(CliError::input("--val-fraction must lie in [0, 1]"));
    }
    let proxy = load_proxy(&proxy, &mut rec)?;
    let store = load_store(&bench, &mut rec)?;
    let stats = store_stats(&store, stats_dir.as_deref(), proxy.capture_mode(), &mut rec)?;
    let (val, test) = split(store.len(), val_fraction, seed);
    let selected: Vec<usize> = match split_arg {
        SplitArg::All => (0..store.len()).collect(),
        SplitArg::Val => val,
        SplitArg::Test => test,
    };
    let mut scores = vec![None; store.len()];
    for &i in &selected {
        scores[i] = match proxy.score(&stats[i]).map_err(input_err)? {
            ProxyScore::Value(v) => Some(v),
            ProxyScore::Invalid(r) => {
                eprintln!("record {i}: invalid score ({r}), excluded");
                None
            }
        };
    }
    let mut reports = Vec::new();
    for name in store.datasets() {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for &i in &selected {
            if let (Some(s), Ok(a)) = (scores[i], store.acc_by_idx(i, &name, !vanilla)) {
                xs.push(s);
                ys.push(a);
            }
        }
        if xs.len() < 2 {
            eprintln!("{name}: fewer than 2 scored records, skipped");
            continue;
        }
        reports.push(CorrelationReport::compute(&name, &xs, &ys).map_err(input_err)?);
    }
    let csv = reports_to_csv(&reports, true);
    rec.seeds.insert("split".into(), seed);
    rec.settings = json!({
        "proxy": proxy.label(),
        "split": format!("{split_arg:?}").to_lowercase(),
        "val_fraction": val_fraction,
        "distill": !vanilla,
    });
    match &out {
        Some(p) => {
            write_file(p, csv.as_bytes())?;
            rec.output(p);
        }
        None => print!("{csv}"),
    }
    match manifest.or_else(|| out.as_ref().map(|p| sibling(p, ".run.json"))) {
        Some(m) => rec.finish(&m),
        None => Ok(()),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_evolve(
    bench: PathBuf,
    stats_dir: Option<PathBuf>,
    strategy: StrategyArg,
    settings: EvolutionSettings,
    val_fraction: f64,
    vanilla: bool,
    out_dir: PathBuf,
    manifest: Option<PathBuf>,
    mut rec: Record,
) -> Result<(), CliError> {
    settings.validate().map_err(input_err)?;
    if !(0.0..=1.0).contains(&val_fraction) {
        return Err(CliError::input("--val-fraction must lie in [0, 1]"));
    }
    let strategy = match strategy {
        StrategyArg::Elitism => Strategy::Elitism,
        StrategyArg::Naive => Strategy::Naive,
        StrategyArg::Random => Strategy::Random,
    };
    let store = load_store(&bench, &mut rec)?;
    let stats = store_stats(
        &store,
        stats_dir.as_deref(),
        CaptureMode::Standard,
        &mut rec,
    )?;
    let (val, _) = split(store.len(), val_fraction, settings.seed);
    let ctx = FitnessContext::from_store(&store, &stats, &val, !vanilla, &settings)?;
    let result = evolve_with(&settings, &ctx, strategy, &mut |r, _| {
        if r.iteration % 20 == 0 {
            eprintln!("iteration {}: best {:.4}", r.iteration, r.best_jcm);
        }
    })
    .map_err(input_err)?;
    let best = out_dir.join("best_proxy.json");
    let mut text = result.best.to_json();
    text.push('\n');
    write_file(&best, text.as_bytes())?;
    let trace = out_dir.join("trace.csv");
    write_file(&trace, result.trace_csv().as_bytes())?;
    rec.output(&best);
    rec.output(&trace);
    eprintln!("best fitness {:.6}: {}", result.best_fitness, result.best);
    rec.seeds.insert("seed".into(), settings.seed);
    rec.settings = json!({
        "strategy": format!("{strategy:?}").to_lowercase(),
        "evolution": settings,
        "val_fraction": val_fraction,
        "distill": !vanilla,
        "best_fitness": result.best_fitness,
        "iterations_to_target": result.iterations_to_target,
    });
    rec.finish(&manifest.unwrap_or_else(|| out_dir.join("run.json")))
}

#[allow(clippy::too_many_arguments)]
fn cmd_search(
    proxy: String,
    space: SearchSpace,
    n: usize,
    params: Option<String>,
    capture: CaptureArgs,
    seed: u64,
    out: PathBuf,
    csv: Option<PathBuf>,
    plot: Option<PathBuf>,
    manifest: Option<PathBuf>,
    mut rec: Record,
) -> Result<(), CliError> {
    let proxy = load_proxy(&proxy, &mut rec)?;
    let range = match &params {
        Some(s) => parse_range(s)?,
        None => space.default_param_range(),
    };
    let settings = capture.settings(space, seed)?;
    let report = search(&proxy, space, n, range, &settings).map_err(input_err)?;
    let mut text =
        serde_json::to_string_pretty(&report).map_err(|e| CliError::internal(e.to_string()))?;
    text.push('\n');
    write_file(&out, text.as_bytes())?;
    rec.output(&out);
    if let Some(p) = &csv {
        write_file(p, report.plot_csv().as_bytes())?;
        rec.output(p);
    }
    if let Some(p) = &plot {
        let mut rows: Vec<_> = report
            .candidates
            .iter()
            .filter_map(|c| c.score.map(|s| (c.params, c.index, s)))
            .collect();
        rows.sort_by_key(|&(p, i, _)| (p, i));
        let mut body = String::from("params,score\n");
        for (p, _, s) in rows {
            body.push_str(&format!("{p},{s:.17e}\n"));
        }
        write_file(p, body.as_bytes())?;
        rec.output(p);
    }
    eprintln!(
        "best candidate {} ({} params), score {:.6e}",
        report.best_index,
        param_count(&report.best_config),
        report.best_score
    );
    rec.seeds.insert("seed".into(), seed);
    rec.settings = json!({
        "proxy": proxy.label(),
        "space": space,
        "n": n,
        "param_range": range,
        "capture": settings,
    });
    rec.finish(&manifest.unwrap_or_else(|| sibling(&out, ".run.json")))
}

fn cmd_bench_validate(
    bench: Option<PathBuf>,
    archives: Vec<PathBuf>,
    manifest: Option<PathBuf>,
    mut rec: Record,
) -> Result<(), CliError> {
    if bench.is_none() && archives.is_empty() {
        return Err(CliError::input(
            "nothing to validate: pass --bench and/or --archive",
        ));
    }
    let mut summary = serde_json::Map::new();
    if let Some(p) = &bench {
        let store = load_store(p, &mut rec)?;
        summary.insert(
            "bench".into(),
            json!({
                "path": p.display().to_string(),
                "space": store.space,
                "provenance": store.provenance,
                "records": store.len(),
                "datasets": store.datasets(),
            }),
        );
    }
    let mut checked = Vec::new();
    for a in &archives {
        rec.input(a)?;
        let s = NetworkStatistics::read_archive(a)
            .map_err(|e| CliError::input(format!("{}: {e}", a.display())))?;
        s.validate()
            .map_err(|e| CliError::input(format!("{}: {e}", a.display())))?;
        checked.push(json!({
            "path": a.display().to_string(),
            "layers": s.layers.len(),
            "capture_mode": s.capture_mode,
        }));
    }
    if !archives.is_empty() {
        summary.insert("archives".into(), checked.into());
    }
    println!("{}", serde_json::Value::Object(summary));
    rec.settings = json!({});
    match manifest {
        Some(m) => rec.finish(&m),
        None => Ok(()),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth_bench(
    planted: String,
    link: LinkArg,
    noise: f64,
    records: usize,
    space: SearchSpace,
    datasets: Vec<String>,
    capture: CaptureArgs,
    seed: u64,
    out: PathBuf,
    manifest: Option<PathBuf>,
    mut rec: Record,
) -> Result<(), CliError> {
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(CliError::input(
            "--noise must be a finite non-negative number",
        ));
    }
    if records < 2 {
        return Err(CliError::input("--records must be at least 2"));
    }
    let planted = load_proxy(&planted, &mut rec)?;
    let spec = SyntheticSpec {
        planted,
        link: match link {
            LinkArg::Identity => Link::Identity,
            LinkArg::Logistic => Link::Logistic,
        },
        noise_std: noise,
        records,
        seed,
        space,
        datasets: datasets.clone(),
        capture: capture.settings(space, seed)?,
    };
    let (store, _, _) = generate_synthetic(&spec)?;
    write_file(&out, store.to_jsonl().as_bytes())?;
    rec.output(&out);
    rec.seeds.insert("seed".into(), seed);
    rec.settings = json!({
        "planted": planted.label(),
        "link": spec.link,
        "noise_std": noise,
        "records": records,
        "space": space,
        "datasets": datasets,
        "capture": spec.capture,
    });
    rec.finish(&manifest.unwrap_or_else(|| sibling(&out, ".run.json")))
}

#[allow(clippy::too_many_arguments)]
fn cmd_grad_check(
    space: SearchSpace,
    config: Option<PathBuf>,
    tolerance: f64,
    capture: CaptureArgs,
    seed: u64,
    out: Option<PathBuf>,
    manifest: Option<PathBuf>,
    mut rec: Record,
) -> Result<(), CliError> {
    let cfg = match &config {
        Some(p) => load_config(p, false, &mut rec)?,
        None => sample_arch(space, &mut child_rng(seed, "arch", 0)),
    };
    let scale = capture.scale.unwrap_or_else(|| cfg.space().default_scale());
    let batch = capture.batch()?;
    let report = grad_check(&cfg, scale, batch, seed, tolerance).map_err(input_err)?;
    let mut text =
        serde_json::to_string_pretty(&report).map_err(|e| CliError::internal(e.to_string()))?;
    text.push('\n');
    match &out {
        Some(p) => {
            write_file(p, text.as_bytes())?;
            rec.output(p);
        }
        None => print!("{text}"),
    }
    rec.seeds.insert("seed".into(), seed);
    rec.settings = json!({ "config": cfg, "scale": scale, "batch": batch, "tolerance": tolerance });
    if let Some(m) = manifest.or_else(|| out.as_ref().map(|p| sibling(p, ".run.json"))) {
        rec.finish(&m)?;
    }
    if report.passed {
        Ok(())
    } else {
        Err(CliError::internal(format!(
            "gradient check failed: max relative error {:.3e} > {tolerance:.1e}",
            report.max_rel_error
        )))
    }
}

fn cmd_replay(path: PathBuf, force: bool) -> Result<(), CliError> {
    let m = RunManifest::read(&path)?;
    for input in &m.inputs {
        let now = digest_input(Path::new(&input.path))?;
        if now.sha256 != input.sha256 && !force {
            return Err(CliError::input(format!(
                "input {} changed since the recorded run (use --force to replay anyway)",
                input.path
            )));
        }
    }
    if m.argv.first().map(String::as_str) == Some("replay") {
        return Err(CliError::input("refusing to replay a replay"));
    }
    execute(m.argv)
}

/// Parses `args` (without the program name) and runs the command.
fn execute(args: Vec<String>) -> Result<(), CliError> {
    let cli =
        Cli::try_parse_from(std::iter::once("proxforge".to_string()).chain(args.iter().cloned()))
            .map_err(|e| CliError::input(e.to_string()))?;
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(CliError::input("--jobs must be at least 1"));
        }
        // Already configured when replaying inside the same process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global();
    }
    let argv = strip_jobs(&args);
    let started = Instant::now();
    let name = argv.first().cloned().unwrap_or_default();
    let result = match cli.command {
        Command::GenStats {
            space,
            config,
            mode,
            capture,
            seed,
            out,
            manifest,
        } => cmd_gen_stats(
            space,
            config,
            mode,
            capture,
            seed.seed,
            out,
            manifest,
            Record::new("gen-stats", argv),
        ),
        Command::Rank {
            proxy,
            bench,
            stats_dir,
            split,
            val_fraction,
            vanilla,
            seed,
            out,
            manifest,
        } => cmd_rank(
            proxy,
            bench,
            stats_dir,
            split,
            val_fraction,
            vanilla,
            seed.seed,
            out,
            manifest,
            Record::new("rank", argv),
        ),
        Command::Evolve {
            bench,
            stats_dir,
            strategy,
            population,
            iterations,
            sample_ratio,
            top_k,
            mutation_prob,
            margin,
            retry_cap,
            subset_size,
            alphas,
            target_jcm,
            val_fraction,
            vanilla,
            seed,
            out_dir,
            manifest,
        } => {
            let settings = EvolutionSettings {
                population,
                iterations,
                sample_ratio,
                top_k,
                mutation_prob,
                margin,
                retry_cap,
                subset_size,
                alphas,
                seed: seed.seed,
                target_jcm,
            };
            cmd_evolve(
                bench,
                stats_dir,
                strategy,
                settings,
                val_fraction,
                vanilla,
                out_dir,
                manifest,
                Record::new("evolve", argv),
            )
        }
        Command::Search {
            proxy,
            space,
            n,
            params,
            capture,
            seed,
            out,
            csv,
            emit_plot_data,
            manifest,
        } => cmd_search(
            proxy,
            space,
            n,
            params,
            capture,
            seed.seed,
            out,
            csv,
            emit_plot_data,
            manifest,
            Record::new("search", argv),
        ),
        Command::BenchValidate {
            bench,
            archive,
            manifest,
        } => cmd_bench_validate(
            bench,
            archive,
            manifest,
            Record::new("bench-validate", argv),
        ),
        Command::SynthBench {
            planted,
            link,
            noise,
            records,
            space,
            datasets,
            capture,
            seed,
            out,
            manifest,
        } => cmd_synth_bench(
            planted,
            link,
            noise,
            records,
            space,
            datasets,
            capture,
            seed.seed,
            out,
            manifest,
            Record::new("synth-bench", argv),
        ),
        Command::GradCheck {
            space,
            config,
            tolerance,
            capture,
            seed,
            out,
            manifest,
        } => cmd_grad_check(
            space,
            config,
            tolerance,
            capture,
            seed.seed,
            out,
            manifest,
            Record::new("grad-check", argv),
        ),
        Command::Replay { manifest, force } => cmd_replay(manifest, force),
    };
    eprintln!("{name}: {:.2}s", started.elapsed().as_secs_f64());
    result
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    // Let clap print help/version and usage errors itself.
    if let Err(e) =
        Cli::try_parse_from(std::iter::once("proxforge".to_string()).chain(args.iter().cloned()))
    {
        e.exit();
    }
    match execute(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Input(m) => eprintln!("error: {m}"),
                CliError::Internal(m) => eprintln!("internal error: {m}"),
            }
            ExitCode::from(e.code())
        }
    }
}
