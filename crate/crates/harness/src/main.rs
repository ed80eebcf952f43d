use std::fs::{self, File};
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use mph_harness::config::{parse_delay, ExperimentConfig, Protocol};
use mph_harness::model::{self, ModelParams};
use mph_harness::runner::{build_replicas, run_experiment, write_csv, RunOutput};
use mph_harness::scenario::{scenario, NAMES};

#[derive(Parser)]
#[command(name = "mphbench", about = "Simulated BFT consensus experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one simulated experiment and write a CSV row.
    Run(RunArgs),
    /// Evaluate the closed-form service time, throughput and latency model.
    ///
    /// t_s = 3 t_cpu + 2 t_nic + t_l + t_q with t_nic = 2m/b;
    /// BPS = 1 / ((3 t_cpu + 2 t_q + t_l)/m + 4/b); latency = 3 t_s + 6 t_l.
    /// Note the BPS denominator uses 2 t_q + t_l, which does not follow
    /// from the t_s decomposition (t_q + t_l + 2 t_nic). Both formulas are
    /// evaluated as written.
    Model(ModelArgs),
    /// Run a scenario under both protocols for several seeds.
    Compare(CompareArgs),
    /// Run a wall-clock cluster over loopback TCP and print log lengths.
    Local(LocalArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` file applied before the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    protocol: Option<Protocol>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    views: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Client transactions per second.
    #[arg(long)]
    arrival_rate: Option<f64>,
    #[arg(long)]
    timeout_ms: Option<u64>,
    #[arg(long)]
    delta_ms: Option<u64>,
    #[arg(long)]
    gst_ms: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    payload_bytes: Option<usize>,
    /// CSV destination; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    /// Per-step CPU time, ms.
    #[arg(long)]
    t_cpu: f64,
    /// Block size, bytes.
    #[arg(long)]
    m: f64,
    /// Bandwidth, bytes per second.
    #[arg(long)]
    b: f64,
    /// Round-trip latency, ms.
    #[arg(long)]
    t_l: f64,
    /// Quorum wait, ms. Estimated from --delay when absent.
    #[arg(long)]
    t_q: Option<f64>,
    /// Delay distribution for the estimate: uniform:LO:HI or normal:MEAN:SD (ms).
    #[arg(long, default_value = "uniform:5:15")]
    delay: String,
    #[arg(long, default_value_t = 4)]
    n: usize,
    #[arg(long, default_value_t = 800)]
    tx_per_block: usize,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long, default_value = "best-case")]
    scenario: String,
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[arg(long)]
    views: Option<u64>,
    #[arg(long)]
    arrival_rate: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LocalArgs {
    #[arg(long, default_value = "mph")]
    protocol: Protocol,
    #[arg(long, default_value_t = 4)]
    n: usize,
    #[arg(long, default_value_t = 2000)]
    duration_ms: u64,
    #[arg(long, default_value_t = 100)]
    timeout_ms: u64,
}

type Res<T> = Result<T, Box<dyn std::error::Error>>;

fn build_config(a: &RunArgs) -> Res<ExperimentConfig> {
    let mut c = match &a.scenario {
        Some(s) => scenario(s).map_err(|e| format!("{e}; known: {}", NAMES.join(", ")))?,
        None => ExperimentConfig::default(),
    };
    if let Some(p) = &a.config {
        c.apply_text(&fs::read_to_string(p)?)?;
    }
    let pairs: [(&str, Option<String>); 10] = [
        ("protocol", a.protocol.map(|p| p.to_string())),
        ("n", a.n.map(|x| x.to_string())),
        ("views", a.views.map(|x| x.to_string())),
        ("seed", a.seed.map(|x| x.to_string())),
        ("arrival_rate", a.arrival_rate.map(|x| x.to_string())),
        ("timeout_ms", a.timeout_ms.map(|x| x.to_string())),
        ("delta_ms", a.delta_ms.map(|x| x.to_string())),
        ("gst_ms", a.gst_ms.map(|x| x.to_string())),
        ("batch_size", a.batch_size.map(|x| x.to_string())),
        ("payload_bytes", a.payload_bytes.map(|x| x.to_string())),
    ];
    for (k, v) in pairs {
        if let Some(v) = v {
            c.set(k, &v)?;
        }
    }
    c.validate()?;
    Ok(c)
}

fn emit(out: &Option<PathBuf>, runs: &[RunOutput]) -> Res<()> {
    match out {
        Some(p) => write_csv(File::create(p)?, runs)?,
        None => write_csv(io::stdout().lock(), runs)?,
    }
    Ok(())
}

fn cmd_run(a: RunArgs) -> Res<()> {
    let c = build_config(&a)?;
    let o = run_experiment(&c)?;
    emit(&a.out, &[o])
}

fn cmd_model(a: ModelArgs) -> Res<()> {
    let t_q = match a.t_q {
        Some(t) => t / 1e3,
        None => model::estimate_t_q(&parse_delay(&a.delay)?, a.n, 100_000, 1)?,
    };
    let p = ModelParams {
        t_cpu: a.t_cpu / 1e3,
        m: a.m,
        b: a.b,
        t_l: a.t_l / 1e3,
        t_q,
        n: a.n,
        tx_per_block: a.tx_per_block,
    };
    let ts = model::eval_service_time(&p)?;
    let bps = model::eval_bps(&p)?;
    let lat = model::eval_latency(&p)?;
    let mut w = io::stdout().lock();
    writeln!(w, "t_q_ms        {:.6}", t_q * 1e3)?;
    writeln!(w, "t_nic_ms      {:.6}", p.t_nic() * 1e3)?;
    writeln!(w, "service_ms    {:.6}", ts * 1e3)?;
    writeln!(w, "blocks_per_s  {:.6}", bps)?;
    writeln!(w, "tx_per_s      {:.3}", bps * a.tx_per_block as f64)?;
    writeln!(w, "latency_ms    {:.6}", lat * 1e3)?;
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> Res<()> {
    let base = scenario(&a.scenario)?;
    let mut runs = Vec::new();
    for p in [Protocol::Mph, Protocol::HotStuff] {
        for seed in 1..=a.seeds {
            let mut c = base.clone().with_seed(seed);
            c.protocol = p;
            if let Some(v) = a.views {
                c.views = v;
            }
            if let Some(r) = a.arrival_rate {
                c.arrival_rate = r;
            }
            runs.push(run_experiment(&c)?);
        }
    }
    emit(&a.out, &runs)
}

fn cmd_local(a: LocalArgs) -> Res<()> {
    let mut c = ExperimentConfig::default();
    c.protocol = a.protocol;
    c.n = a.n;
    c.timeout_ms = a.timeout_ms;
    let sys = c.validate()?;
    let report = mph_core::net::tcp::run_local(
        build_replicas(&c, sys),
        Duration::from_millis(a.duration_ms),
    )?;
    for (i, log) in report.logs.iter().enumerate() {
        println!("replica {i}: {} blocks committed", log.len());
    }
    println!("frames {} bytes {}", report.frames_sent, report.bytes_sent);
    Ok(())
}

fn main() -> ExitCode {
    let res = match Cli::parse().cmd {
        Cmd::Run(a) => cmd_run(a),
        Cmd::Model(a) => cmd_model(a),
        Cmd::Compare(a) => cmd_compare(a),
        Cmd::Local(a) => cmd_local(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
