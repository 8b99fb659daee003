//! Command line front end: train a program, arbitrate between checkpoint
//! stores, run scenario files, re-check recorded evidence, and benchmark
//! the deterministic operators.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use refdel::commit::hash_tensor;
use refdel::detops::{self, det_rand, DetRngKey, Dist, OpCtx, Shape};
use refdel::harness::{load_program_file, render_report, run_scenario, Scenario};
use refdel::protocol::{verify_evidence, LiveExchange, Referee, TrainerEndpoint};
use refdel::trainer::{CheckpointStore, TrainStats, Trainer};

#[derive(Parser)]
#[command(name = "refdel", version, about = "Replicated training with refereed disputes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a training program and save its checkpoint store.
    Train(TrainArgs),
    /// Arbitrate between two saved checkpoint stores.
    Dispute(DisputeArgs),
    /// Scenario files: staged disputes with declared expectations.
    #[command(subcommand)]
    Scenario(ScenarioCmd),
    /// Re-derive the verdict recorded in a transcript and check every frame.
    VerifyEvidence(VerifyArgs),
    /// Micro-benchmarks.
    #[command(subcommand)]
    Bench(BenchCmd),
}

#[derive(Args)]
struct TrainArgs {
    /// Program file: steps, schedule, seed, optimizer, dataset, model path.
    program: PathBuf,
    /// Directory to write the checkpoint store into.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; the result is bitwise identical for any count.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct DisputeArgs {
    /// Checkpoint store of the first trainer.
    #[arg(long)]
    a: PathBuf,
    /// Checkpoint store of the second trainer.
    #[arg(long)]
    b: PathBuf,
    /// Program file both stores claim to have run.
    #[arg(long)]
    program: PathBuf,
    /// Also write the report here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write the replayable transcript here.
    #[arg(long)]
    evidence: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand)]
enum ScenarioCmd {
    /// Run a scenario file; exit 0 only if the verdict matches [expect].
    Run(ScenarioRunArgs),
}

#[derive(Args)]
struct ScenarioRunArgs {
    config: PathBuf,
    /// Also write the report here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write the replayable transcript here.
    #[arg(long)]
    evidence: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Transcript written by `dispute` or `scenario run`.
    transcript: PathBuf,
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Time one deterministic operator.
    Detops(BenchArgs),
}

#[derive(Args)]
struct BenchArgs {
    /// Operator: matmul, softmax, or relu.
    #[arg(long)]
    op: String,
    /// Dimensions: MxKxN for matmul, RxC otherwise.
    #[arg(long)]
    dims: String,
    #[arg(long, default_value_t = 5)]
    iters: u32,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run() -> Result<ExitCode> {
    match Cli::parse().cmd {
        Cmd::Train(a) => train(a),
        Cmd::Dispute(a) => dispute(a),
        Cmd::Scenario(ScenarioCmd::Run(a)) => scenario_run(a),
        Cmd::VerifyEvidence(a) => verify(a),
        Cmd::Bench(BenchCmd::Detops(a)) => bench(a),
    }
}

fn ctx_for(workers: usize) -> OpCtx {
    if workers <= 1 {
        OpCtx::serial()
    } else {
        OpCtx::with_workers(workers)
    }
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let program = load_program_file(&a.program)?;
    let mut t = Trainer::new("trainer", program, ctx_for(a.workers))?;
    t.train()?;
    let c = t.output_commitment()?;
    t.store().save(&a.out).with_context(|| format!("saving {}", a.out.display()))?;
    println!("steps = {}", t.prepared().program.steps);
    println!("checkpoints = {}", t.store().len());
    println!("commitment = {}", hex::encode(c.to_bytes()));
    println!("store = {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn dispute(a: DisputeArgs) -> Result<ExitCode> {
    let program = load_program_file(&a.program)?;
    let load = |dir: &PathBuf| {
        CheckpointStore::load(dir).with_context(|| format!("loading {}", dir.display()))
    };
    let mut ta = Trainer::from_store("a", program.clone(), ctx_for(a.workers), load(&a.a)?)?;
    let mut tb = Trainer::from_store("b", program.clone(), ctx_for(a.workers), load(&a.b)?)?;
    let roster = vec!["a".to_string(), "b".to_string()];

    let mut referee = Referee::new(&program)?;
    let mut ex = LiveExchange::new(vec![
        &mut ta as &mut dyn TrainerEndpoint,
        &mut tb as &mut dyn TrainerEndpoint,
    ]);
    let verdict = referee.resolve(&mut ex, &roster)?;
    let trainer_stats: Vec<(String, TrainStats)> =
        roster.iter().cloned().zip(ex.endpoint_stats()).collect();
    let (transcript, exchange) = ex.into_transcript();

    let evidence = match verify_evidence(&transcript) {
        Ok(replayed) if replayed == verdict => "verified".to_string(),
        Ok(_) => "replay diverged".to_string(),
        Err(e) => format!("invalid: {e}"),
    };
    let report = render_report(&verdict, &trainer_stats, &exchange, transcript.len(), &evidence);
    print!("{report}");
    if let Some(path) = &a.report {
        std::fs::write(path, &report)?;
    }
    if let Some(path) = &a.evidence {
        std::fs::write(path, &transcript)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn scenario_run(a: ScenarioRunArgs) -> Result<ExitCode> {
    let scenario = Scenario::load(&a.config)?;
    let out = run_scenario(&scenario)?;
    print!("{}", out.report);
    if let Some(path) = &a.report {
        std::fs::write(path, &out.report)?;
    }
    if let Some(path) = &a.evidence {
        std::fs::write(path, &out.transcript)?;
    }
    Ok(if out.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn verify(a: VerifyArgs) -> Result<ExitCode> {
    let bytes = std::fs::read(&a.transcript)
        .with_context(|| format!("reading {}", a.transcript.display()))?;
    match verify_evidence(&bytes) {
        Ok(verdict) => {
            print!("{}", verdict.canonical_text());
            println!("evidence = verified");
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => {
            println!("evidence = invalid: {e}");
            Ok(ExitCode::FAILURE)
        }
    }
}

fn bench(a: BenchArgs) -> Result<ExitCode> {
    let dims: Vec<usize> = a
        .dims
        .split('x')
        .map(|d| d.parse().context("dims must be numbers separated by `x`"))
        .collect::<Result<_>>()?;
    let ctx = ctx_for(a.workers);
    let rand = |label: &str, dims: &[usize]| {
        det_rand(DetRngKey::for_purpose(1, label), &Shape::new(dims.to_vec()).unwrap(), Dist::Normal)
    };

    // closure per op so setup cost stays outside the timed region
    let timed: Box<dyn Fn() -> detops::Tensor> = match a.op.as_str() {
        "matmul" => {
            let [m, k, n] = dims[..] else { bail!("matmul needs MxKxN") };
            let lhs = rand("bench-a", &[m, k]);
            let rhs = rand("bench-b", &[k, n]);
            Box::new(move || detops::matmul(ctx, &lhs, &rhs).unwrap())
        }
        "softmax" => {
            let [r, c] = dims[..] else { bail!("softmax needs RxC") };
            let x = rand("bench-a", &[r, c]);
            Box::new(move || detops::softmax(ctx, &x, 1).unwrap())
        }
        "relu" => {
            let [r, c] = dims[..] else { bail!("relu needs RxC") };
            let x = rand("bench-a", &[r, c]);
            Box::new(move || detops::relu(ctx, &x).unwrap())
        }
        other => bail!("unknown op `{other}` (expected matmul, softmax, or relu)"),
    };

    let mut out = timed();
    let mut best = f64::INFINITY;
    for _ in 0..a.iters {
        let t0 = Instant::now();
        out = timed();
        best = best.min(t0.elapsed().as_secs_f64());
    }
    println!("op = {}", a.op);
    println!("dims = {}", a.dims);
    println!("workers = {}", a.workers);
    println!("best_seconds = {best:.6}");
    if a.op == "matmul" {
        let [m, k, n] = dims[..] else { unreachable!() };
        let flops = 2.0 * (m * k * n) as f64;
        println!("gflops = {:.3}", flops / best / 1e9);
    }
    println!("output_digest = {}", hex::encode(hash_tensor(&out).0));
    Ok(ExitCode::SUCCESS)
}
