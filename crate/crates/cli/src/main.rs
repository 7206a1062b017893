use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use sha2::{Digest, Sha256};

use mebm::bench::{bench_stability, stability_csv, summarize, summary_csv};
use mebm::data::{DataKind, Dataset};
use mebm::diag::{energy_histogram, evaluate, manifold_report, median, render_grid, Group};
use mebm::init::{sample_init, InitDist, InitKind};
use mebm::net::Mode;
use mebm::rng::{stream, Stream};
use mebm::sgld::{sgld_chain, write_sample_dump};
use mebm::tensor::Tensor;
use mebm::trainer::{check_resume, run, train_loop, RunDir, TrainConfig, TrainState};

#[derive(Parser)]
#[command(name = "mebm", version, about = "Energy-based models trained with short-run SGLD from a fitted initial distribution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the chain-initialization distribution to a dataset.
    FitInit(FitInitArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Draw samples from a checkpoint.
    Sample(SampleArgs),
    /// Evaluate a checkpoint against data.
    Eval(EvalArgs),
    /// Print a fitted initialization distribution.
    InspectInit(InspectArgs),
    /// Sweep chain length, initialization and seed, recording divergence.
    BenchStability(BenchArgs),
}

/// Settings that override the config file.
#[derive(Args, Clone)]
struct Overrides {
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long = "inject-sigma")]
    inject_sigma: Option<f64>,
    #[arg(long = "reg-coeff")]
    reg_coeff: Option<f64>,
}

impl Overrides {
    fn config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(s) = self.inject_sigma {
            cfg.inject_sigma = s;
        }
        if let Some(r) = self.reg_coeff {
            cfg.reg_coeff = r;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct DataArgs {
    /// `synth:<kind>:<n>[:<noise>]` or a raster grid file.
    #[arg(long)]
    data: String,
    /// Seed for synthetic data; defaults to the run seed.
    #[arg(long = "data-seed")]
    data_seed: Option<u64>,
}

impl DataArgs {
    fn load(&self, run_seed: u64) -> Result<Dataset> {
        Ok(Dataset::from_spec(&self.data, self.data_seed.unwrap_or(run_seed))?)
    }
}

#[derive(Args)]
struct FitInitArgs {
    #[command(flatten)]
    over: Overrides,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    init: Option<InitKind>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    over: Overrides,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    /// SGLD steps per iteration.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    init: Option<InitKind>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    Buffer,
    FreshChain,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, value_enum, default_value = "fresh-chain")]
    source: Source,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// SGLD steps; defaults to the checkpoint's config.
    #[arg(long)]
    k: Option<usize>,
    /// Raster shape `HxWxC` for rendering; 2D points need none.
    #[arg(long)]
    shape: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 30)]
    bins: usize,
}

#[derive(Args)]
struct InspectArgs {
    /// An init file or a training checkpoint.
    #[arg(long)]
    init: PathBuf,
    /// Draw this many samples and report their moments.
    #[arg(long, default_value_t = 0)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    over: Overrides,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    k: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "informative,uniform")]
    init: Vec<InitKind>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Iterations per cell.
    #[arg(long, default_value_t = 1000)]
    iters: usize,
}

/// Git-style object hash: SHA-256 over `blob <len>\0` followed by the bytes.
fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(content_hash(&bytes))
}

fn dataset_hash(data: &Dataset) -> String {
    let mut bytes: Vec<u8> = data.samples.values().iter().flat_map(|v| v.to_le_bytes()).collect();
    if let Some(labels) = &data.labels {
        bytes.extend(labels.iter().flat_map(|&y| (y as u64).to_le_bytes()));
    }
    content_hash(&bytes)
}

fn write_manifest(dir: &Path, command: &str, seed: u64, config: Option<&TrainConfig>, inputs: serde_json::Value, extra: serde_json::Value) -> Result<()> {
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "config": config.map(TrainConfig::to_text),
        "inputs": inputs,
        "result": extra,
    });
    fs::create_dir_all(dir)?;
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn data_inputs(args: &DataArgs, data: &Dataset, seed: u64) -> serde_json::Value {
    json!({
        "spec": args.data,
        "data_seed": args.data_seed.unwrap_or(seed),
        "samples": data.len(),
        "hash": dataset_hash(data),
    })
}

fn config_input(over: &Overrides) -> Result<serde_json::Value> {
    Ok(match &over.config {
        Some(p) => json!({ "path": p, "hash": file_hash(p)? }),
        None => serde_json::Value::Null,
    })
}

fn parse_shape(s: &str) -> Result<DataKind> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|d| d.parse().with_context(|| format!("bad shape '{s}'")))
        .collect::<Result<_>>()?;
    match dims[..] {
        [height, width, channels] => Ok(DataKind::Raster { height, width, channels }),
        [height, width] => Ok(DataKind::Raster {
            height,
            width,
            channels: 1,
        }),
        _ => bail!(mebm::Error::Config(format!("shape '{s}' is not HxW or HxWxC"))),
    }
}

fn grid_layout(n: usize) -> (usize, usize) {
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    (n.div_ceil(cols), cols)
}

fn render_path(dir: &Path, stem: &str, kind: DataKind) -> PathBuf {
    match kind {
        DataKind::Points => dir.join(format!("{stem}.txt")),
        DataKind::Raster { .. } => dir.join(format!("{stem}.ppm")),
    }
}

fn cmd_fit_init(a: FitInitArgs) -> Result<()> {
    let mut cfg = a.over.config()?;
    if let Some(k) = a.init {
        cfg.init = k;
    }
    let data = a.data.load(cfg.seed)?;
    data.validate()?;
    let p0 = InitDist::fit(cfg.init, &data.samples, data.labels.as_deref(), data.range, cfg.eps_reg)?;
    fs::create_dir_all(&a.out)?;
    let path = a.out.join("init.ebmi");
    p0.save(&path)?;
    fs::write(a.out.join("init.txt"), describe_init(&p0))?;
    let inputs = json!({ "config": config_input(&a.over)?, "data": data_inputs(&a.data, &data, cfg.seed) });
    write_manifest(&a.out, "fit-init", cfg.seed, Some(&cfg), inputs, json!({ "init": path, "hash": file_hash(&path)? }))?;
    println!("wrote {} ({}, D = {})", path.display(), p0.kind(), p0.dim());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = a.over.config()?;
    if let Some(k) = a.k {
        cfg.sgld.steps = k;
    }
    if let Some(i) = a.init {
        cfg.init = i;
    }
    cfg.validate()?;
    let data = a.data.load(cfg.seed)?;
    let dir = RunDir::new(&a.out)?;
    let inputs = json!({ "config": config_input(&a.over)?, "data": data_inputs(&a.data, &data, cfg.seed) });
    write_manifest(&a.out, "train", cfg.seed, Some(&cfg), inputs.clone(), json!({ "status": "running" }))?;

    let outcome = if a.resume {
        let (mut state, stored) = TrainState::load(&dir.checkpoint())?;
        check_resume(&stored, &cfg)?;
        run(&mut state, &cfg, &data, Some(&dir)).map(|()| state)
    } else {
        train_loop(&cfg, &data, Some(&dir))
    };
    match outcome {
        Ok(state) => {
            state.model.save(&dir.root.join("model.ebmn"))?;
            let last = state.history.last();
            write_manifest(
                &a.out,
                "train",
                cfg.seed,
                Some(&cfg),
                inputs,
                json!({
                    "status": "completed",
                    "iterations": state.iteration,
                    "final_gen_loss": last.map(|b| b.gen_loss),
                    "final_accuracy": last.and_then(|b| b.accuracy),
                }),
            )?;
            println!("trained {} iterations, outputs in {}", state.iteration, a.out.display());
            Ok(())
        }
        Err(e) => {
            let status = match &e {
                mebm::Error::TrainingDivergence { iter, .. } => json!({ "status": "diverged", "iteration": iter }),
                _ => json!({ "status": "failed" }),
            };
            write_manifest(&a.out, "train", cfg.seed, Some(&cfg), inputs, json!({ "reason": e.to_string(), "outcome": status }))?;
            Err(e.into())
        }
    }
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let (state, cfg) = TrainState::load(&a.checkpoint)?;
    let d = state.model.input_dim();
    let kind = match &a.shape {
        Some(s) => Some(parse_shape(s)?),
        None if d == 2 => Some(DataKind::Points),
        None => None,
    };
    let mut rng = stream(a.seed, Stream::Eval);
    let samples = match a.source {
        Source::Buffer => {
            if state.buffer.is_empty() {
                bail!(mebm::Error::Data("checkpoint holds no buffer entries".into()));
            }
            state.buffer.sample_rows(a.count, &mut rng)?
        }
        Source::FreshChain if a.count == 0 => Tensor::zeros(vec![0, d]),
        Source::FreshChain => {
            let range = mebm::data::DATA_RANGE;
            let x0 = sample_init(&state.p0, a.count, cfg.init_clamp.then_some(range), &mut rng);
            let mut sgld = cfg.sgld.clone();
            if let Some(k) = a.k {
                sgld.steps = k;
            }
            sgld.clamp = cfg.chain_clamp.resolve_for(kind.unwrap_or(DataKind::Points), range);
            sgld.validate()?;
            sgld_chain(&state.model, &x0, &sgld, &mut rng)?
        }
    };
    fs::create_dir_all(&a.out)?;
    write_sample_dump(&samples, &a.out.join("samples.bin"))?;
    if let Some(kind) = kind {
        render_grid(&samples, grid_layout(samples.rows()), kind, &render_path(&a.out, "samples", kind))?;
    }
    let source = match a.source {
        Source::Buffer => "buffer",
        Source::FreshChain => "fresh-chain",
    };
    let inputs = json!({ "checkpoint": { "path": a.checkpoint, "hash": file_hash(&a.checkpoint)? } });
    write_manifest(&a.out, "sample", a.seed, Some(&cfg), inputs, json!({ "source": source, "count": samples.rows() }))?;
    println!("wrote {} samples to {}", samples.rows(), a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (state, cfg) = TrainState::load(&a.checkpoint)?;
    let data = a.data.load(a.seed)?;
    data.validate()?;
    if data.dim() != state.model.input_dim() {
        bail!(mebm::Error::Data(format!(
            "data has dimension {} but the model expects {}",
            data.dim(),
            state.model.input_dim()
        )));
    }
    let count = a.count.min(data.len());
    if count < 2 {
        bail!(mebm::Error::Data("evaluation needs at least two data points".into()));
    }
    let mut rng = stream(a.seed, Stream::Eval);
    let (_, real) = data.split(count as f64 / data.len() as f64, &mut rng);
    let x0 = sample_init(&state.p0, real.len(), cfg.init_clamp.then_some(data.range), &mut rng);
    let mut sgld = cfg.sgld.clone();
    if let Some(k) = a.k {
        sgld.steps = k;
    }
    sgld.clamp = cfg.chain_clamp.resolve(&data);
    sgld.validate()?;
    let gen = sgld_chain(&state.model, &x0, &sgld, &mut rng)?;
    let uniform = InitDist::Uniform {
        dim: data.dim(),
        lo: data.range.0,
        hi: data.range.1,
    };
    let noise = sample_init(&uniform, real.len(), None, &mut rng);
    let pos = match &real.labels {
        Some(y) => Group::labeled("x_pos", real.samples.clone(), y.clone()),
        None => Group::new("x_pos", real.samples.clone()),
    };
    let groups = vec![pos, Group::new("x_neg", gen.clone()), Group::new("x_init", x0), Group::new("uniform", noise)];
    let labeled = data.labels.as_deref().map(|y| (&data.samples, y));
    let report = evaluate(&state.model, &gen, &real.samples, &groups, labeled)?;
    let hist = energy_histogram(&state.model, &groups, a.bins)?;
    let manifold = manifold_report(&state.model, &groups[..3])?;

    let neg_e = |g: &Group| -> Result<Vec<f64>> { Ok(state.model.energy(&g.x)?.into_iter().map(|v| -v).collect()) };
    let contrast = median(&neg_e(&groups[0])?) - median(&neg_e(&groups[3])?);

    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("report.csv"), report.to_csv())?;
    fs::write(a.out.join("histogram.csv"), hist.to_csv())?;
    fs::write(a.out.join("histogram.txt"), hist.render_text(40))?;
    fs::write(a.out.join("manifold.csv"), manifold.to_csv())?;
    if data.dim() == 2 || matches!(data.kind, DataKind::Raster { .. }) {
        render_grid(&gen, grid_layout(gen.rows()), data.kind, &render_path(&a.out, "samples", data.kind))?;
    }
    let inputs = json!({
        "checkpoint": { "path": a.checkpoint, "hash": file_hash(&a.checkpoint)? },
        "data": data_inputs(&a.data, &data, a.seed),
    });
    write_manifest(
        &a.out,
        "eval",
        a.seed,
        Some(&cfg),
        inputs,
        json!({ "mmd": report.mmd, "cov_frobenius_gap": report.cov_frobenius_gap, "accuracy": report.accuracy, "median_contrast": contrast }),
    )?;
    print!("{}", report.to_csv());
    println!("median_contrast,{contrast}");
    Ok(())
}

fn format_row(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:>12.6}")).collect::<Vec<_>>().join(" ")
}

fn describe_gaussian(out: &mut String, mean: &[f64], cov: &[f64]) {
    let d = mean.len();
    out.push_str(&format!("mean       {}\n", format_row(mean)));
    out.push_str("covariance\n");
    for i in 0..d.min(16) {
        out.push_str(&format!("           {}\n", format_row(&cov[i * d..(i * d + d).min(i * d + 16)])));
    }
    if d > 16 {
        out.push_str("           (truncated to 16×16)\n");
    }
}

fn describe_init(p0: &InitDist) -> String {
    let mut s = format!("kind       {}\ndim        {}\n", p0.kind(), p0.dim());
    match p0 {
        InitDist::Gaussian(g) => {
            s.push_str(&format!("eps_reg    {}\n", g.eps_reg()));
            describe_gaussian(&mut s, g.mean(), &g.covariance());
        }
        InitDist::Mixture(m) => {
            for ((class, g), w) in m.components().iter().zip(m.weights()) {
                s.push_str(&format!("component  class {class}, weight {w}\n"));
                describe_gaussian(&mut s, g.mean(), &g.covariance());
            }
        }
        InitDist::Uniform { lo, hi, .. } => s.push_str(&format!("range      [{lo}, {hi}]\n")),
    }
    s
}

fn cmd_inspect_init(a: InspectArgs) -> Result<()> {
    let bytes = fs::read(&a.init).with_context(|| format!("reading {}", a.init.display()))?;
    let p0 = if bytes.starts_with(b"EBMC") {
        TrainState::load(&a.init)?.0.p0
    } else {
        InitDist::load(&a.init)?
    };
    print!("{}", describe_init(&p0));
    if a.samples >= 2 {
        let mut rng = stream(a.seed, Stream::Eval);
        let x = sample_init(&p0, a.samples, None, &mut rng);
        let (mean, cov) = mebm::init::mean_and_covariance(&x)?;
        println!("-- moments of {} draws", a.samples);
        let mut s = String::new();
        describe_gaussian(&mut s, &mean, &cov);
        print!("{s}");
    }
    Ok(())
}

fn worker_threads() -> usize {
    std::env::var("EBM_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let mut cfg = a.over.config()?;
    cfg.epochs = 1;
    cfg.iters_per_epoch = a.iters;
    cfg.validate()?;
    let data = a.data.load(cfg.seed)?;
    let threads = worker_threads();
    let rows = bench_stability(&cfg, &data, &a.k, &a.init, &a.seeds, threads)?;
    let summary = summarize(&rows);
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("stability.csv"), stability_csv(&rows))?;
    fs::write(a.out.join("stability_summary.csv"), summary_csv(&summary))?;
    let inputs = json!({ "config": config_input(&a.over)?, "data": data_inputs(&a.data, &data, cfg.seed) });
    write_manifest(
        &a.out,
        "bench-stability",
        cfg.seed,
        Some(&cfg),
        inputs,
        json!({ "k": a.k, "init": a.init.iter().map(|i| i.to_string()).collect::<Vec<_>>(), "seeds": a.seeds, "cells": rows.len() }),
    )?;
    print!("{}", summary_csv(&summary));
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if let Some(err) = e.downcast_ref::<mebm::Error>() {
        return err.exit_code() as u8;
    }
    if e.downcast_ref::<std::io::Error>().is_some() {
        return 3;
    }
    5
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::FitInit(a) => cmd_fit_init(a),
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Eval(a) => cmd_eval(a),
        Command::InspectInit(a) => cmd_inspect_init(a),
        Command::BenchStability(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
